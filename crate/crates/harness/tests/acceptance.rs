//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion before asserting.
//!
//! Criteria 8 through 12 train for tens of minutes each and are ignored by
//! default:
//!
//! ```text
//! cargo test --release -p tshf --test acceptance -- --ignored --nocapture --test-threads 1
//! ```
//!
//! Their runs are kept under `$CARGO_TARGET_TMPDIR/acceptance/` for inspection.

use std::io::Write;
use std::path::{Path, PathBuf};

use tshf::experiments::{self, SweepResult};
use tshf::trainer::{self, CHECKPOINT_FILE, LOSS_FILE};
use tshf::{Checkpoint, RunConfig};
use tshf_core::sampler::{CfgSchedule, DecodeOpts, ScheduleKind};
use tshf_core::shuffle::ShuffleConfig;

/// Writes past the test harness's output capture so the verdict shows up in
/// a plain `cargo test` log.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {n:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn run_root(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn base_in(dir: &Path) -> RunConfig {
    RunConfig {
        out_dir: dir.display().to_string(),
        log_every: 10,
        ..RunConfig::default()
    }
}

fn by_key<'a>(results: &'a [SweepResult], key: &str) -> &'a SweepResult {
    results.iter().find(|r| r.key == key).unwrap()
}

fn ce(r: &SweepResult) -> f64 {
    r.outcome.final_mean(|m| m.total - m.z_term)
}

#[test]
fn criterion_01_token_count_law() {
    let cases = tshf::selftest::token_count_law();
    let full = ShuffleConfig { s: 2, ..ShuffleConfig::default() }.fused_len(64, 64).unwrap();
    let plain = ShuffleConfig { s: 1, ..ShuffleConfig::default() }.fused_len(64, 64).unwrap();
    let pass = cases.is_ok() && full == 1024 && plain == 4096;
    report(1, "token-count law", pass, &format!("{cases:?} cases, 64x64 grid: {plain} -> {full} at s=2"));
    assert!(pass);
}

#[test]
fn criterion_02_bypass_round_trip() {
    let trials = tshf::selftest::bypass_round_trip(100, 2);
    let pass = matches!(trials, Ok(100));
    report(2, "bypass round trip", pass, &format!("{trials:?} bitwise trials over s in {{1,2,4}}"));
    assert!(pass);
}

#[test]
fn criterion_03_gradients() {
    let prims = tshf::selftest::primitive_gradient_errors().unwrap();
    let (worst_name, worst) = prims.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let mut e2e = 0.0f64;
    for (qk, z) in [(false, 0.0), (true, 1e-2)] {
        e2e = e2e.max(tshf::selftest::end_to_end_gradient_error(qk, z, 64).unwrap());
    }
    let pass = worst < 1e-6 && e2e < 1e-4;
    report(
        3,
        "gradients",
        pass,
        &format!("{} primitives, worst {worst:.2e} ({worst_name}); end-to-end {e2e:.2e}", prims.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_04_fused_causality() {
    let v = tshf::selftest::causality_violation(50, 4).unwrap();
    let pass = v <= 1e-12;
    report(4, "fused causality", pass, &format!("max change before j over 50 pairs = {v:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_05_kv_cache() {
    let (ids_equal, gap) = tshf::selftest::kv_cache_fidelity(20, 5).unwrap();
    let pass = ids_equal && gap < 1e-10;
    report(5, "kv-cache fidelity", pass, &format!("20 generations, ids equal {ids_equal}, max logit gap {gap:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_06_cfg_algebra() {
    let algebra = tshf::selftest::cfg_algebra(6);
    let d = RunConfig::default();
    let sched = CfgSchedule::new(d.cfg_schedule, d.alpha_max);
    let n = d.grid_h * d.grid_w / (d.s * d.s);
    let (first, last) = (sched.scale_at(0, n).unwrap(), sched.scale_at(n - 1, n).unwrap());
    let pass = algebra.is_ok() && first == 1.0 && last == 7.5;
    report(6, "cfg algebra", pass, &format!("identities {algebra:?}; default schedule {first} -> {last}"));
    assert!(pass);
}

#[test]
fn criterion_07_overfit_canary() {
    let dir = run_root("canary");
    let cfg = experiments::canary_config(&base_in(&dir));
    let (state, rep) = experiments::run_canary(&cfg).unwrap();
    let ratio = rep.final_loss() / rep.initial_loss();
    let down = rep.decreasing_fraction();
    let pass = ratio < 0.1 && down >= 0.9;
    report(
        7,
        "overfit canary",
        pass,
        &format!(
            "loss {:.4} -> {:.4} ({:.1}% of initial), decreasing in {:.1}% of steps",
            rep.initial_loss(),
            rep.final_loss(),
            100.0 * ratio,
            100.0 * down
        ),
    );
    let opts = DecodeOpts::default();
    let acc = experiments::reproduction_accuracy(
        &state.model,
        &rep.batch,
        4,
        &CfgSchedule::new(ScheduleKind::Constant, 1.0),
        &opts,
        7,
    )
    .unwrap();
    println!("     canary reproduction accuracy {acc:.3}");
    assert!(pass);
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn criterion_13_flop_model() {
    let desk = RunConfig::default().model_config().unwrap();
    let mut worst = 0.0f64;
    for (s, variant) in [(1, "shuffle"), (2, "shuffle"), (4, "shuffle"), (2, "drop"), (2, "simple")] {
        let mut cfg = desk.clone();
        cfg.shuffle.s = s;
        cfg.shuffle.variant = tshf_core::shuffle::Variant::parse(variant).unwrap();
        let m = experiments::instrumented_flops(&cfg, 13).unwrap();
        let rel = |a: u64, b: u64| (a as f64 - b as f64).abs() / b.max(1) as f64;
        worst = worst.max(rel(m.transformer_measured, m.transformer_closed));
        worst = worst.max(rel(m.shuffle_measured, m.shuffle_closed));
    }
    let full = experiments::full_scale().unwrap();
    let rows = experiments::flops_rows("full", &full, &[1, 2]).unwrap();
    let (a, b) = (&rows[0].estimate, &rows[1].estimate);
    let ratio = a.total_training() as f64 / b.total_training() as f64;
    let transformer_ratio = a.transformer_training as f64 / b.transformer_training as f64;
    let pass = worst < 0.01 && ratio >= 3.9;
    report(
        13,
        "flop model",
        pass,
        &format!(
            "instrumented vs closed form worst {worst:.2e}; full-scale s=2 reduction {ratio:.2} total, {transformer_ratio:.2} transformer (d={}, T={})",
            full.d, b.fused_len
        ),
    );
    let desk_rows = experiments::flops_rows("desk", &desk, &[2]).unwrap();
    println!(
        "     shuffle overhead at s=2: desk {:.1}%, full {:.1}%",
        100.0 * desk_rows[0].estimate.shuffle_overhead(),
        100.0 * b.shuffle_overhead()
    );
    assert!(pass);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn criterion_14_reproducibility_and_resume() {
    // out_dir is part of the echoed config, so every run shares one directory
    // and the outputs are snapshotted between runs.
    let dir = run_root("repro");
    let cfg = |steps: u64| RunConfig {
        out_dir: dir.display().to_string(),
        steps,
        decay_steps: 100,
        warmup_steps: 10,
        log_every: 1,
        dataset_size: 256,
        ..RunConfig::default()
    };
    let snapshot = || (read(&dir.join(LOSS_FILE)), read(&dir.join(CHECKPOINT_FILE)));

    trainer::train(&cfg(100), false).unwrap();
    let (csv_a, ck_a) = snapshot();
    trainer::train(&cfg(100), false).unwrap();
    let identical = snapshot() == (csv_a.clone(), ck_a.clone());

    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    let round_trip = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_bytes() == ck_a;

    trainer::train(&cfg(50), false).unwrap();
    trainer::train(&cfg(100), true).unwrap();
    let resumed = snapshot() == (csv_a.clone(), ck_a);
    let rows = String::from_utf8(csv_a).unwrap().lines().count() - 1;

    let pass = identical && round_trip && resumed;
    report(
        14,
        "reproducibility and resume",
        pass,
        &format!("reruns identical {identical}, save/load/save identical {round_trip}, 50+50 resume equals 100 over {rows} logged steps {resumed}"),
    );
    assert!(pass);
}

// Training-heavy criteria. Batch 4 keeps each within its CPU budget on one core.

fn heavy_base(dir: &Path, steps: u64) -> RunConfig {
    RunConfig {
        steps,
        batch_size: 4,
        ..base_in(dir)
    }
}

fn print_sweep(results: &[SweepResult]) {
    for r in results {
        println!(
            "     {:<12} final {:.4}  ce_visual {:.4}  |lse| {:.3}  {:.3} s/step  {} params",
            r.key, r.final_total, r.final_ce_visual, r.final_mean_abs_lse, r.secs_per_step, r.params
        );
    }
}

#[test]
#[ignore = "trains three 3k-step runs"]
fn criterion_08_window_sweep() {
    let dir = run_root("window");
    let base = heavy_base(&dir, 3000);
    let results = experiments::run_sweep(&dir, &experiments::window_points(&base, &[1, 2, 4]).unwrap()).unwrap();
    print_sweep(&results);
    let f = |k| by_key(&results, k).final_total;
    let (l1, l2, l4) = (f("s1"), f("s2"), f("s4"));
    let pass = l1 <= l2 && l2 <= l4;
    report(
        8,
        "window-sweep ordering",
        pass,
        &format!("s1 {l1:.4} <= s2 {l2:.4} <= s4 {l4:.4}; margins {:+.4}, {:+.4}", l2 - l1, l4 - l2),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains four 3k-step runs"]
fn criterion_09_variant_ordering() {
    let dir = run_root("variant");
    let base = heavy_base(&dir, 3000);
    let names = ["shuffle_n2", "drop", "simple", "shuffle_n4"];
    let results = experiments::run_sweep(&dir, &experiments::variant_points(&base, &names).unwrap()).unwrap();
    print_sweep(&results);
    let f = |k| by_key(&results, k).final_total;
    let (n2, drop, simple) = (f("shuffle_n2"), f("drop"), f("simple"));
    let pass = drop > n2 && simple > n2;
    report(
        9,
        "variant ordering",
        pass,
        &format!(
            "shuffle_n2 {n2:.4}, drop {drop:.4} ({:+.4}), simple {simple:.4} ({:+.4}); shuffle_n4 {:.4}",
            drop - n2,
            simple - n2,
            f("shuffle_n4")
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains four 1.5k-step runs at s=1"]
fn criterion_10_redundancy_probe() {
    let dir = run_root("probe");
    let base = heavy_base(&dir, 1500);
    let points = experiments::probe_points(&base, &[None, Some(1), Some(8), Some(32)]).unwrap();
    let results = experiments::run_sweep(&dir, &points).unwrap();
    print_sweep(&results);
    let f = |k| by_key(&results, k).final_total;
    let (none, r1, r8, r32) = (f("none"), f("r1"), f("r8"), f("r32"));
    let mut tail = 0.0f64;
    for key in ["r1", "r8", "r32"] {
        let rank = experiments::probe_rank(&by_key(&results, key).outcome.state.model).unwrap();
        println!(
            "     {key:<12} rank bound {}  sigma[bound-1] {:.3e}  tail max {:.3e}",
            rank.bound,
            rank.singular_values[rank.bound - 1],
            rank.tail_max()
        );
        let scale = rank.singular_values[0].max(1.0);
        tail = tail.max(rank.tail_max() / scale);
    }
    let pass = r8 - r1 <= r32 - r1 && tail < 1e-8;
    report(
        10,
        "redundancy probe",
        pass,
        &format!(
            "r8 - r1 = {:+.4} <= r32 - r1 = {:+.4}; worst relative tail singular value {tail:.2e}",
            r8 - r1,
            r32 - r1
        ),
    );
    println!("     r1 vs unprobed baseline: {none:.4} -> {r1:.4} ({:+.2}%)", 100.0 * (r1 - none) / none);
    assert!(pass);
}

#[test]
#[ignore = "trains a 10k-step run and samples 480 grids"]
fn criterion_11_conditional_generation() {
    let dir = run_root("conditional");
    let cfg = RunConfig {
        steps: 10_000,
        log_every: 50,
        checkpoint_every: 1000,
        ..base_in(&dir)
    };
    let outcome = trainer::train(&cfg, false).unwrap();
    println!(
        "     trained {} steps in {:.0} s, final loss {:.4}",
        cfg.steps,
        outcome.wall_secs,
        outcome.final_mean(|m| m.total)
    );
    let rows = experiments::run_cfg_sweep(
        &outcome.state.model,
        &[1.0, 3.0],
        &[ScheduleKind::Constant],
        240,
        11,
        &cfg.decode_opts(),
    )
    .unwrap();
    std::fs::write(dir.join("cfg_sweep.csv"), experiments::cfg_csv(&rows)).unwrap();
    let (a1, a3) = (rows[0].accuracy, rows[1].accuracy);
    let pass = a3 >= 0.7 && a3 >= a1 - 0.02;
    report(
        11,
        "conditional generation",
        pass,
        &format!("held-out accuracy over 240 samples: alpha=1 {a1:.3}, alpha=3 {a3:.3}"),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains two 3k-step runs"]
fn criterion_12_z_loss() {
    let dir = run_root("zloss");
    let base = heavy_base(&dir, 3000);
    let points: Vec<_> = [("z0", 0.0), ("z1e-5", 1e-5)]
        .into_iter()
        .map(|(key, z)| experiments::SweepPoint {
            key: key.to_string(),
            cfg: RunConfig {
                z_loss_weight: z,
                out_dir: dir.join(key).display().to_string(),
                ..base.clone()
            },
        })
        .collect();
    let results = experiments::run_sweep(&dir, &points).unwrap();
    print_sweep(&results);
    let (off, on) = (by_key(&results, "z0"), by_key(&results, "z1e-5"));
    let degradation = (ce(on) - ce(off)) / ce(off);
    let pass = on.final_mean_abs_lse < off.final_mean_abs_lse && degradation < 0.02;
    report(
        12,
        "z-loss effect",
        pass,
        &format!(
            "mean |lse| {:.4} -> {:.4}; CE {:.4} -> {:.4} ({:+.2}%)",
            off.final_mean_abs_lse,
            on.final_mean_abs_lse,
            ce(off),
            ce(on),
            100.0 * degradation
        ),
    );
    assert!(pass);
}
