//! Training loop, loss CSV, resume and staged training.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tshf_core::model::{Example, StepMetrics};
use tshf_core::Model;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data;
use crate::error::{HarnessError, Result};

pub const LOSS_HEADER: &str = "step,total,ce_text,ce_visual,zterm,grad_norm,lr,mean_abs_lse";
pub const CHECKPOINT_FILE: &str = "checkpoint.tshf";
pub const LOSS_FILE: &str = "loss.csv";

/// Worker threads for per-example gradients: `TSHF_THREADS`, else the
/// machine's parallelism. Results do not depend on it.
pub fn threads() -> usize {
    std::env::var("TSHF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Optimizer steps completed, 1-based.
    pub step: u64,
    pub lr: f64,
    pub metrics: StepMetrics,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, m.total, m.ce_text, m.ce_visual, m.z_term, m.grad_norm, self.lr, m.mean_abs_lse
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Every step run by this invocation, logged or not.
    pub history: Vec<LogRow>,
    pub wall_secs: f64,
}

impl TrainOutcome {
    pub fn secs_per_step(&self) -> f64 {
        self.wall_secs / self.history.len().max(1) as f64
    }

    /// Mean of `f` over the last 10% of steps (at least one).
    pub fn final_mean(&self, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        final_window_mean(&self.history, f)
    }
}

pub fn final_window_mean(rows: &[LogRow], f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let n = (rows.len() / 10).max(1).min(rows.len());
    if n == 0 {
        return f64::NAN;
    }
    rows[rows.len() - n..].iter().map(|r| f(&r.metrics)).sum::<f64>() / n as f64
}

/// Runs optimizer steps until `state.step == cfg.steps`, calling `on_step`
/// after each.
pub fn train_loop(
    cfg: &RunConfig,
    state: &mut TrainState,
    data: &[Example],
    mut on_step: impl FnMut(&LogRow, &TrainState) -> Result<()>,
) -> Result<Vec<LogRow>> {
    if data.is_empty() {
        return Err(HarnessError::Runtime("training set is empty".into()));
    }
    let threads = threads();
    let mut rows = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    while state.step < cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(data[state.rng.below(data.len())].clone());
        }
        let lr = cfg.lr_at(state.step);
        let metrics = state
            .model
            .train_step(&mut state.opt, &batch, lr, cfg.prompt_drop, &mut state.rng, threads)?;
        state.step += 1;
        let row = LogRow {
            step: state.step,
            lr,
            metrics,
        };
        on_step(&row, state)?;
        rows.push(row);
    }
    Ok(rows)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

/// Keeps the header and the rows up to `step` that fall on the `log_every`
/// grid. Later rows came from a crashed or longer run; off-grid rows are the
/// closing rows of shorter runs.
fn truncate_csv(path: &Path, step: u64, log_every: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let mut out = format!("{LOSS_HEADER}\n");
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| HarnessError::Runtime(format!("{}: malformed row {line:?}", path.display())))?;
        if s <= step && s.is_multiple_of(log_every) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains `state` under `cfg`, owning `cfg.out_dir`: writes `config.txt`,
/// `loss.csv` and `checkpoint.tshf`.
pub fn run_in_dir(cfg: &RunConfig, mut state: TrainState, data: &[Example]) -> Result<TrainOutcome> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.echo()).map_err(io(&cfg_path))?;
    let csv_path = dir.join(LOSS_FILE);
    let head = if state.step == 0 {
        format!("{LOSS_HEADER}\n")
    } else {
        truncate_csv(&csv_path, state.step, cfg.log_every)?
    };
    std::fs::write(&csv_path, head).map_err(io(&csv_path))?;
    let mut csv = OpenOptions::new().append(true).open(&csv_path).map_err(io(&csv_path))?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let t0 = Instant::now();
    let history = train_loop(cfg, &mut state, data, |row, st| {
        if row.step % cfg.log_every == 0 || row.step == cfg.steps {
            writeln!(csv, "{}", row.csv()).map_err(io(&csv_path))?;
        }
        if cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0 {
            Checkpoint::capture(cfg, st).save(&ck_path)?;
        }
        Ok(())
    })?;
    let wall_secs = t0.elapsed().as_secs_f64();
    Checkpoint::capture(cfg, &state).save(&ck_path)?;
    Ok(TrainOutcome {
        state,
        history,
        wall_secs,
    })
}

/// Fresh run, or a resumed one from `out_dir/checkpoint.tshf`.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    let state = if resume {
        let path = Path::new(&cfg.out_dir).join(CHECKPOINT_FILE);
        let ck = Checkpoint::load(&path)?;
        if ck.step > cfg.steps {
            return Err(HarnessError::Config {
                key: "steps".into(),
                msg: format!("checkpoint is already at step {}", ck.step),
            });
        }
        ck.restore(cfg)?
    } else {
        TrainState::fresh(cfg)?
    };
    run_in_dir(cfg, state, &data)
}

/// How a stage's parameters were initialized from the previous stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transfer {
    pub copied: Vec<String>,
    /// Same name, new shape; only shape-dependent fusion parameters qualify.
    pub reinitialized: Vec<String>,
    /// Absent in the previous stage.
    pub fresh: Vec<String>,
}

/// Copies every parameter of `prev` into `next` by name when shapes agree.
pub fn transfer(prev: &Model, next: &mut Model) -> Result<Transfer> {
    let mut out = Transfer::default();
    let mut bad = Vec::new();
    let ids: Vec<_> = next.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let Some(src) = prev.params.id_of(&name) else {
            out.fresh.push(name);
            continue;
        };
        let (a, b) = (prev.params.get(src), next.params.get(id));
        if a.shape() == b.shape() {
            next.params.get_mut(id).data_mut().copy_from_slice(a.data());
            out.copied.push(name);
        } else if name.starts_with("shuffle.") {
            out.reinitialized.push(name);
        } else {
            bad.push(format!("{name}: {:?} -> {:?}", a.shape(), b.shape()));
        }
    }
    if !bad.is_empty() {
        return Err(tshf_core::Error::Contract(format!("incompatible stage shapes: {}", bad.join("; "))).into());
    }
    Ok(out)
}

/// Three-stage desk schedule: 8x8 at s=1, 16x16 at s=2, then 32x32 at s=2
/// with QK-norm and z-loss; learning rate falls by 2x then 5x overall.
pub fn desk_stages(base: &RunConfig) -> Vec<RunConfig> {
    let stage = |k: usize, h: usize, s: usize, lr_scale: f64| {
        let mut c = base.clone();
        c.grid_h = h;
        c.grid_w = h;
        c.s = s;
        c.lr = base.lr * lr_scale;
        c.lr_floor = base.lr_floor * lr_scale;
        c.out_dir = format!("{}/stage{k}", base.out_dir);
        c
    };
    let mut third = stage(3, 32, 2, 0.2);
    third.qk_norm = true;
    third.z_loss_weight = 1e-5;
    vec![stage(1, 8, 1, 1.0), stage(2, 16, 2, 0.5), third]
}

pub fn check_stages(stages: &[RunConfig]) -> Result<()> {
    for c in stages {
        c.validate()?;
    }
    for w in stages.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.grid_h < a.grid_h || b.grid_w < a.grid_w {
            return Err(HarnessError::Config {
                key: "grid_h".into(),
                msg: format!("stage grid shrinks from {}x{} to {}x{}", a.grid_h, a.grid_w, b.grid_h, b.grid_w),
            });
        }
        for (key, x, y) in [("d", a.d, b.d), ("text_size", a.text_size, b.text_size), ("visual_size", a.visual_size, b.visual_size)] {
            if x != y {
                return Err(HarnessError::Config {
                    key: key.into(),
                    msg: format!("changes between stages ({x} -> {y})"),
                });
            }
        }
    }
    Ok(())
}

/// Trains each stage from the previous stage's weights with a fresh optimizer.
pub fn staged_train(stages: &[RunConfig]) -> Result<(TrainOutcome, Vec<Transfer>)> {
    check_stages(stages)?;
    let mut transfers = Vec::new();
    let mut last: Option<TrainOutcome> = None;
    for cfg in stages {
        let mut state = TrainState::fresh(cfg)?;
        if let Some(prev) = &last {
            transfers.push(transfer(&prev.state.model, &mut state.model)?);
        }
        let data = data::load(cfg)?;
        last = Some(run_in_dir(cfg, state, &data)?);
    }
    let last = last.ok_or_else(|| HarnessError::Usage("no stages given".into()))?;
    Ok((last, transfers))
}
