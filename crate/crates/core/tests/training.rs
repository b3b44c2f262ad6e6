//! Training loop contracts: determinism, resumption, degenerate alignment
//! settings, divergence handling and the metrics stream.

use flowback::harness::archive::Archive;
use flowback::harness::checkpoint;
use flowback::harness::commands::run_train;
use flowback::harness::config::RunConfig;
use flowback::harness::metrics::{read_records, MetricRecord};
use flowback::harness::train::{train, Experiment, TrainState};

fn config(extra: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    let base = [
        ("data.size", "64"),
        ("model.blocks", "2"),
        ("model.layers", "1"),
        ("model.width", "8"),
        ("model.heads", "1"),
        ("align.proj_hidden", "8"),
        ("align.feature_dim", "4"),
        ("train.batch", "6"),
        ("train.steps", "4"),
        ("seed", "3"),
    ];
    for (k, v) in base.iter().chain(extra) {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn run(cfg: RunConfig, until: usize, state: Option<TrainState>) -> (TrainState, Vec<MetricRecord>) {
    let exp = Experiment::new(cfg).unwrap();
    let mut state = state.unwrap_or_else(|| TrainState::new(&exp));
    let mut records = Vec::new();
    train(
        &exp,
        &mut state,
        until,
        &mut |r| {
            records.push(r.clone());
            Ok(())
        },
        None,
    )
    .unwrap();
    (state, records)
}

fn deterministic(records: &[MetricRecord]) -> Vec<(usize, u64, Option<u64>, u64)> {
    records.iter().map(MetricRecord::deterministic).collect()
}

#[test]
fn repeated_runs_are_bit_identical() {
    for strategy in ["forward", "detach", "reverse"] {
        let cfg = config(&[("align.strategy", strategy)]);
        let (a, ra) = run(cfg.clone(), 4, None);
        let (b, rb) = run(cfg, 4, None);
        assert_eq!(deterministic(&ra), deterministic(&rb), "{strategy}");
        assert_eq!(a, b, "{strategy}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, ra) = run(config(&[]), 3, None);
    let (b, rb) = run(config(&[("train.threads", "3")]), 3, None);
    assert_eq!(deterministic(&ra), deterministic(&rb));
    assert_eq!(a.params, b.params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = config(&[("train.steps", "5")]);
    let (full, records) = run(cfg.clone(), 5, None);
    let dir = tempfile::tempdir().unwrap();
    let (mid, _) = run(cfg.clone(), 3, None);
    checkpoint::save(dir.path(), &cfg, &mid).unwrap();
    let (saved_cfg, loaded) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(saved_cfg.to_text(), cfg.to_text());
    assert_eq!(loaded, mid);
    let (resumed, tail) = run(saved_cfg, 5, Some(loaded));
    assert_eq!(deterministic(&tail), deterministic(&records[3..]));
    assert_eq!(resumed, full);
}

#[test]
fn zero_lambda_matches_forward_with_zero_lambda() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, strategy) in dirs.iter().zip(["reverse", "forward"]) {
        let cfg = config(&[("align.lambda", "0"), ("align.strategy", strategy)]);
        let (state, records) = run(cfg.clone(), 4, None);
        assert!(records.iter().all(|r| r.total == r.nf_loss));
        checkpoint::save(dir.path(), &cfg, &state).unwrap();
    }
    let a = Archive::load(dirs[0].path()).unwrap();
    let b = Archive::load(dirs[1].path()).unwrap();
    assert_eq!(a.arrays().count(), b.arrays().count());
    for (name, t) in a.arrays() {
        let u = b.array(name).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data()), bits(u.data()), "{name}");
    }
    let strip = |a: &Archive| {
        a.metas()
            .filter(|(k, _)| *k != "config.align.strategy")
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let cfg = config(&[
        ("optim.lr", "1e30"),
        ("train.checkpoint_every", "1"),
        ("train.steps", "50"),
    ]);
    let exp = Experiment::new(cfg).unwrap();
    let mut state = TrainState::new(&exp);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ckpt");
    let err = train(&exp, &mut state, 50, &mut |_| Ok(()), Some(&out)).unwrap_err();
    assert!(
        err.to_string().contains("non-finite") || err.to_string().contains("diverged"),
        "{err}"
    );
    let (_, saved) = checkpoint::load(&out).unwrap();
    assert_eq!(saved.step, state.step);
    assert!(saved.step < 50);
    assert!(saved.params.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn metrics_stream_has_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ckpt");
    let mut buf = Vec::new();
    let state = run_train(config(&[]), &out, None, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let records = read_records(text.as_bytes()).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(text.lines().count(), 4);
    assert_eq!(
        records.iter().map(|r| r.step).collect::<Vec<_>>(),
        [1, 2, 3, 4]
    );
    assert!(records
        .iter()
        .all(|r| r.align_loss.is_some() && r.nf_loss.is_finite()));
    assert_eq!(checkpoint::load(&out).unwrap().1, state);

    let mut more = Vec::new();
    let cfg = config(&[("train.steps", "6")]);
    let resumed = run_train(cfg, &out, Some(&out), &mut more).unwrap();
    assert_eq!(resumed.step, 6);
    let tail = read_records(more.as_slice()).unwrap();
    assert_eq!(tail.iter().map(|r| r.step).collect::<Vec<_>>(), [5, 6]);
}
