use attnflow_core::dataio::{csv_read, toy2d_grid, Dataset};
use attnflow_core::flowmodel::{AttentionKind, FlowModel, ModelConfig};
use attnflow_core::par::Execution;
use attnflow_core::training::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, TrainConfig, Trainer, CHECKPOINT_FILE, METRICS_FILE,
};

fn setup(attention: AttentionKind, iters: u64) -> (Trainer, Dataset) {
    let model = FlowModel::build(ModelConfig {
        attention,
        channels: 8,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        batch: 8,
        iters,
        seed: 11,
        warmup: 5,
        ..TrainConfig::default()
    };
    (Trainer::new(model, config).unwrap(), toy2d_grid("checker-density", 8, 128, 1).unwrap())
}

fn params_bits(t: &Trainer) -> Vec<u64> {
    let p = t.model.params();
    p.ids().flat_map(|id| p.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    for attention in [AttentionKind::None, AttentionKind::IMap, AttentionKind::ISdp] {
        let (mut a, data) = setup(attention, 6);
        let (mut b, _) = setup(attention, 6);
        let ra = a.run(&data, Execution::Sequential, None).unwrap();
        let rb = b.run(&data, Execution::Sequential, None).unwrap();
        let nll = |r: &[attnflow_core::dataio::MetricsRow]| r.iter().map(|m| m.nll.to_bits()).collect::<Vec<_>>();
        assert_eq!(nll(&ra), nll(&rb), "{attention}");
        assert_eq!(params_bits(&a), params_bits(&b), "{attention}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (mut a, data) = setup(AttentionKind::ISdp, 4);
    let (mut b, _) = setup(AttentionKind::ISdp, 4);
    a.run(&data, Execution::Sequential, None).unwrap();
    b.run(&data, Execution::with_threads(3), None).unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut full, data) = setup(AttentionKind::IMap, 8);
    full.run(&data, Execution::Sequential, None).unwrap();

    let (mut first, _) = setup(AttentionKind::IMap, 4);
    first.run(&data, Execution::Sequential, Some(dir.path())).unwrap();
    let mut resumed = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed.iter, 4);
    resumed.config.iters = 8;
    resumed.run(&data, Execution::Sequential, Some(dir.path())).unwrap();

    let mut expected = full.clone();
    expected.config.iters = 8;
    resumed.config.iters = 8;
    assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&expected));
    let rows = csv_read(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (mut t, data) = setup(AttentionKind::ISdp, 3);
    t.run(&data, Execution::Sequential, None).unwrap();
    let bytes = encode_checkpoint(&t);
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
}

#[test]
fn loss_decreases_on_toy_data() {
    let (mut t, data) = setup(AttentionKind::None, 60);
    let rows = t.run(&data, Execution::Sequential, None).unwrap();
    let head: f64 = rows[..10].iter().map(|r| r.nll).sum();
    let tail: f64 = rows[50..].iter().map(|r| r.nll).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn batches_depend_only_on_seed_and_iteration() {
    let (t, data) = setup(AttentionKind::None, 1);
    let a = t.batch_for(&data, 5).unwrap();
    let b = t.batch_for(&data, 5).unwrap();
    let c = t.batch_for(&data, 6).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}
