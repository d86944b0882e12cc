use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowmodel::{AttentionKind, AttentionPosition, CouplingKind, FlowModel, ModelConfig};
use crate::par::Execution;

use super::subjects::{jitter_params, LayerSubject, SignFlipped, SkippedInverseHalf, BROKEN_IMAP, LAYER_KINDS};
use super::{
    block_structure_check, gradcheck_all, logdet_check, model_roundtrip, roundtrip_check, seeded_input, GradMutation,
    OracleReport, LAYER_ROUNDTRIP_TOL, MODEL_ROUNDTRIP_TOL,
};

/// Sizes of a suite run; seeds are `seed, seed + 1, …`.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub roundtrip_seeds: usize,
    pub jacobian_seeds: usize,
    pub model_seeds: usize,
    /// Single-sample layer shape `(C, H, W)`.
    pub layer_shape: (usize, usize, usize),
    pub exec: Execution,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            roundtrip_seeds: 10,
            jacobian_seeds: 5,
            model_seeds: 3,
            layer_shape: (4, 4, 4),
            exec: Execution::Sequential,
        }
    }
}

pub fn suite_names() -> &'static [&'static str] {
    &["layers", "jacobian", "model", "grad", "mutants", "all"]
}

fn seeds(start: u64, n: usize) -> Vec<u64> {
    (start..start + n as u64).collect()
}

pub fn layer_roundtrips(opts: &SuiteOptions) -> Vec<OracleReport> {
    let s = seeds(opts.seed, opts.roundtrip_seeds);
    LAYER_KINDS
        .iter()
        .map(|kind| {
            roundtrip_check(kind, &s, LAYER_ROUNDTRIP_TOL, opts.exec, |seed| {
                let l = LayerSubject::build(kind, opts.layer_shape, seed)?;
                let x = l.input(4, seed);
                Ok((l, x))
            })
        })
        .collect()
}

/// Worst report across seeds (the first failure, if any).
fn worst(reports: Vec<OracleReport>) -> Option<OracleReport> {
    let fail = reports.iter().position(|r| !r.passed);
    match fail {
        Some(k) => reports.into_iter().nth(k),
        None => reports.into_iter().max_by(|a, b| a.measured.total_cmp(&b.measured)),
    }
}

pub fn layer_jacobians(opts: &SuiteOptions) -> Vec<OracleReport> {
    let s = seeds(opts.seed, opts.jacobian_seeds);
    let mut out = Vec::new();
    for kind in LAYER_KINDS {
        let per_seed = opts.exec.map(&s, |&seed| match LayerSubject::build(kind, opts.layer_shape, seed) {
            Ok(l) => {
                let x = l.input(1, seed);
                let ld = logdet_check(&l, &x, seed);
                let block = l.half_a.as_ref().map(|a| block_structure_check(&l, &x, a, seed));
                (ld, block)
            }
            Err(e) => (OracleReport::error(*kind, "fd_logdet", super::LOGDET_TOL, seed, &e), None),
        });
        let (lds, blocks): (Vec<_>, Vec<_>) = per_seed.into_iter().unzip();
        out.extend(worst(lds));
        out.extend(worst(blocks.into_iter().flatten().collect()));
    }
    out
}

/// The ablation matrix {affine, mixture} × {none, iMap, iSDP} × {pos1..pos4} × {1, 3 heads}
/// on a two-level model; attention-free configs appear once per coupling.
pub fn model_matrix() -> Vec<ModelConfig> {
    let base = ModelConfig {
        levels: 2,
        steps: 2,
        channels: 8,
        input_height: 16,
        input_width: 16,
        mix_components: 3,
        ..ModelConfig::default()
    };
    let positions = [
        AttentionPosition::Pos1,
        AttentionPosition::Pos2,
        AttentionPosition::Pos3,
        AttentionPosition::Pos4,
    ];
    let mut out = Vec::new();
    for coupling in [CouplingKind::Affine, CouplingKind::Mixture] {
        out.push(ModelConfig {
            coupling,
            ..base.clone()
        });
        for attention in [AttentionKind::IMap, AttentionKind::ISdp] {
            for position in positions {
                for heads in [1, 3] {
                    out.push(ModelConfig {
                        coupling,
                        attention,
                        position,
                        heads,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

pub fn config_label(c: &ModelConfig) -> String {
    match c.attention {
        AttentionKind::None => format!("{}/none", c.coupling),
        a => format!("{}/{a}/{}/h{}", c.coupling, c.position, c.heads),
    }
}

/// A model from `config` with seeded, jittered parameters and actnorm
/// marked initialized.
pub fn jittered_model(config: &ModelConfig, seed: u64, std: f64) -> Result<FlowModel> {
    let mut model = FlowModel::build(ModelConfig {
        seed,
        ..config.clone()
    })?;
    jitter_params(model.params_mut(), std, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x0DD5));
    model.initialize_identity();
    Ok(model)
}

pub fn model_roundtrips(configs: &[ModelConfig], opts: &SuiteOptions) -> Vec<OracleReport> {
    let s = seeds(opts.seed, opts.model_seeds);
    configs
        .iter()
        .map(|cfg| {
            let label = config_label(cfg);
            let per_seed = opts.exec.map(&s, |&seed| -> Result<(f64, u64)> {
                let model = jittered_model(cfg, seed, 0.05)?;
                let x = seeded_input(model.input_shape(1), seed);
                Ok((model_roundtrip(&model, &x)?, seed))
            });
            let mut worst_err: f64 = 0.0;
            let mut worst_seed = opts.seed;
            for r in per_seed {
                match r {
                    Ok((e, seed)) if !(e <= worst_err) => {
                        worst_err = e;
                        worst_seed = seed;
                    }
                    Ok(_) => {}
                    Err(e) => return OracleReport::error(&label, "model_roundtrip", MODEL_ROUNDTRIP_TOL, worst_seed, &e),
                }
            }
            OracleReport::new(&label, "model_roundtrip", worst_err, MODEL_ROUNDTRIP_TOL, worst_seed)
        })
        .collect()
}

/// L = 1, K = 1 models used for gradient checks.
pub fn gradcheck_configs() -> Vec<ModelConfig> {
    [AttentionKind::None, AttentionKind::IMap, AttentionKind::ISdp]
        .into_iter()
        .map(|attention| ModelConfig {
            levels: 1,
            steps: 1,
            channels: 4,
            attention,
            ..ModelConfig::default()
        })
        .collect()
}

pub fn gradchecks(opts: &SuiteOptions, mutation: GradMutation) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for cfg in gradcheck_configs() {
        let model = jittered_model(&cfg, opts.seed, 0.1)?;
        let x = seeded_input(model.input_shape(2), opts.seed);
        let prefix = config_label(&cfg);
        for mut r in gradcheck_all(&model, &x, opts.exec, mutation, opts.seed)? {
            r.subject = format!("{prefix}:{}", r.subject);
            out.push(r);
        }
    }
    Ok(out)
}

/// Each oracle run against corrupted subjects; every report passes only
/// when the corruption is detected.
pub fn mutants(opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let seed = opts.seed;
    let shape = opts.layer_shape;
    let mut out = Vec::new();
    for kind in ["affine_checkerboard", "imap", "isdp_sigmoid_h1"] {
        let l = LayerSubject::build(kind, shape, seed)?;
        let x = l.input(1, seed);
        out.push(OracleReport::expect_failure(logdet_check(&SignFlipped(l.clone()), &x, seed)));
        let name = format!("{kind}+skipped_inverse_half");
        let rt = roundtrip_check(&name, &[seed], LAYER_ROUNDTRIP_TOL, Execution::Sequential, |s| {
            let inner = LayerSubject::build(kind, shape, s)?;
            let keep = inner.half_a.clone().ok_or_else(|| Error::Config(format!("{kind} has no mask")))?;
            let x = inner.input(4, s);
            Ok((SkippedInverseHalf { inner, keep }, x))
        });
        out.push(OracleReport::expect_failure(rt));
    }
    let b = LayerSubject::build(BROKEN_IMAP, shape, seed)?;
    let x = b.input(1, seed);
    let a = b.half_a.clone().expect("imap mask");
    out.push(OracleReport::expect_failure(block_structure_check(&b, &x, &a, seed)));
    let grads = gradchecks(opts, GradMutation::NegateAdjoint)?;
    let caught = grads.iter().filter(|r| !r.passed).count();
    let mut summary = OracleReport::new(
        "models+negated_adjoint",
        "gradcheck",
        caught as f64,
        0.0,
        seed,
    );
    summary.detail = format!("{caught} of {} parameters flagged", grads.len());
    summary.passed = caught == 0;
    out.push(OracleReport::expect_failure(summary));
    Ok(out)
}

pub fn run_suite(name: &str, opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let all = name == "all";
    if !suite_names().contains(&name) {
        return Err(Error::Config(format!(
            "unknown suite {name:?}; expected one of {}",
            suite_names().join(", ")
        )));
    }
    if all || name == "layers" {
        out.extend(layer_roundtrips(opts));
    }
    if all || name == "jacobian" {
        out.extend(layer_jacobians(opts));
    }
    if all || name == "model" {
        out.extend(model_roundtrips(&model_matrix(), opts));
    }
    if all || name == "grad" {
        out.extend(gradchecks(opts, GradMutation::None)?);
    }
    if all || name == "mutants" {
        out.extend(mutants(opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_size() {
        assert_eq!(model_matrix().len(), 34);
    }

    #[test]
    fn quick_layer_suites_pass() {
        let opts = SuiteOptions {
            roundtrip_seeds: 2,
            jacobian_seeds: 1,
            ..SuiteOptions::default()
        };
        for r in layer_roundtrips(&opts).into_iter().chain(layer_jacobians(&opts)) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn mutants_are_caught() {
        for r in mutants(&SuiteOptions::default()).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
