use std::path::Path;

use tshf::checkpoint::TrainState;
use tshf::trainer::{self, CHECKPOINT_FILE, LOSS_FILE};
use tshf::{data, Checkpoint, HarnessError, RunConfig};

fn tiny(dir: &Path) -> RunConfig {
    RunConfig {
        d: 32,
        layers: 1,
        heads: 2,
        grid_h: 8,
        grid_w: 8,
        visual_size: 40,
        dataset_size: 16,
        batch_size: 2,
        steps: 6,
        warmup_steps: 2,
        out_dir: dir.display().to_string(),
        ..RunConfig::default()
    }
}

#[test]
fn generated_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    data::write(&a, &cfg, &data::generate(&cfg).unwrap()).unwrap();
    data::write(&b, &cfg, &data::generate(&cfg).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = data::read(&a, &cfg).unwrap();
    assert_eq!(back, data::generate(&cfg).unwrap());
    let held: Vec<_> = data::held_out_captions();
    assert!(back.iter().all(|ex| !held.contains(&ex.caption)));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { lr: 0.0, lr_floor: 0.0, ..tiny(dir.path()) };
    let before = TrainState::fresh(&cfg).unwrap();
    let after = trainer::train(&cfg, false).unwrap().state;
    assert_eq!(after.step, cfg.steps);
    for ((_, name, a), (_, _, b)) in before.model.params.iter().zip(after.model.params.iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
}

#[test]
fn checkpoint_file_round_trips_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    trainer::train(&cfg, false).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let copy = dir.path().join("copy.tshf");
    ck.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), bytes);
    let state = ck.restore(&ck.config().unwrap()).unwrap();
    assert_eq!(Checkpoint::capture(&cfg, &state).to_bytes(), bytes);
}

#[test]
fn truncated_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    trainer::train(&cfg, false).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match Checkpoint::load(&path) {
        Err(HarnessError::Checkpoint { .. }) => {}
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
    assert!(trainer::train(&cfg, true).is_err());
}

#[test]
fn resume_past_the_end_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    trainer::train(&cfg, false).unwrap();
    let shorter = RunConfig { steps: 3, ..cfg };
    match trainer::train(&shorter, true) {
        Err(HarnessError::Config { key, .. }) => assert_eq!(key, "steps"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_resume_matches_with_sparse_logging() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |steps| RunConfig {
        steps,
        decay_steps: 10,
        log_every: 3,
        ..tiny(dir.path())
    };
    let snap = || {
        (
            std::fs::read(dir.path().join(LOSS_FILE)).unwrap(),
            std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
        )
    };
    trainer::train(&cfg(10), false).unwrap();
    let whole = snap();
    trainer::train(&cfg(4), false).unwrap();
    trainer::train(&cfg(7), true).unwrap();
    trainer::train(&cfg(10), true).unwrap();
    assert_eq!(snap(), whole);
    let csv = String::from_utf8(whole.0).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["3", "6", "9", "10"]);
}

#[test]
fn staged_transfer_keeps_shared_weights() {
    let dir = tempfile::tempdir().unwrap();
    let stages = trainer::desk_stages(&tiny(dir.path()));
    trainer::check_stages(&stages).unwrap();
    let prev = TrainState::fresh(&stages[0]).unwrap().model;
    let mut next = TrainState::fresh(&RunConfig { seed: 9, ..stages[1].clone() }).unwrap().model;
    let t = trainer::transfer(&prev, &mut next).unwrap();
    assert!(t.fresh.is_empty());
    let mut changed = t.reinitialized.clone();
    changed.sort();
    assert_eq!(changed, ["shuffle.compress.b", "shuffle.compress.w", "shuffle.expand.w"]);
    for name in &t.copied {
        let a = prev.params.get(prev.params.id_of(name).unwrap());
        let b = next.params.get(next.params.id_of(name).unwrap());
        assert_eq!(a.data(), b.data(), "{name}");
    }
    assert_eq!(t.copied.len() + t.reinitialized.len(), next.params.len());
}

#[test]
fn stages_may_not_change_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut stages = trainer::desk_stages(&tiny(dir.path()));
    stages[1].d = 64;
    match trainer::check_stages(&stages) {
        Err(HarnessError::Config { key, .. }) => assert_eq!(key, "d"),
        other => panic!("{other:?}"),
    }
}
