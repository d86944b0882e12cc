use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attnflow_core::flowmodel::{AttentionKind, FlowModel, ModelConfig};
use attnflow_core::numkit::Tensor;
use attnflow_core::par::Execution;
use attnflow_core::verify::{
    gradchecks, layer_jacobians, model_matrix, model_roundtrips, mutants, reports_csv, run_suite, GradMutation,
    SuiteOptions,
};
use attnflow_core::{Error, ErrorClass};

fn quick() -> SuiteOptions {
    SuiteOptions {
        seed: 21,
        roundtrip_seeds: 3,
        jacobian_seeds: 2,
        model_seeds: 1,
        ..SuiteOptions::default()
    }
}

#[test]
fn every_suite_passes_at_a_fresh_seed() {
    let reports = run_suite("all", &quick()).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let csv = String::from_utf8(reports_csv(&reports).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), reports.len() + 1);
}

#[test]
fn execution_mode_does_not_change_reports() {
    let seq = quick();
    let par = SuiteOptions {
        exec: Execution::with_threads(4),
        ..seq
    };
    let configs = &model_matrix()[..4];
    let a = reports_csv(&model_roundtrips(configs, &seq)).unwrap();
    let b = reports_csv(&model_roundtrips(configs, &par)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        reports_csv(&layer_jacobians(&seq)).unwrap(),
        reports_csv(&layer_jacobians(&par)).unwrap()
    );
}

#[test]
fn negated_adjoint_is_flagged_for_every_config() {
    let reports = gradchecks(&quick(), GradMutation::NegateAdjoint).unwrap();
    assert!(reports.iter().all(|r| !r.passed));
    for r in mutants(&quick()).unwrap() {
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn unknown_suite_is_a_usage_error() {
    assert_eq!(run_suite("nope", &quick()).unwrap_err().class(), ErrorClass::Usage);
}

#[test]
fn pure_eq6_model_is_singular_with_zero_query_key_weights() {
    let mut model = FlowModel::build(ModelConfig {
        attention: AttentionKind::ISdp,
        pure_eq6: true,
        ..ModelConfig::default()
    })
    .unwrap();
    let params = model.params_mut();
    let ids: Vec<_> = params
        .ids()
        .filter(|&id| params.entry(id).name.contains(".wq") || params.entry(id).name.contains(".wk"))
        .collect();
    for id in ids {
        params.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(model.input_shape(2), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let err = model.log_prob(&x, None).unwrap_err();
    assert!(matches!(err, Error::SingularBlock { .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Numerical);
}
