//! Sweeps, the redundancy probe, the CFG sweep and the FLOP table.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use tshf_core::cost::{flops_estimate, shuffle_forward_flops, CostModel, FlopEstimate};
use tshf_core::model::{Ctx, MixedSequence, ModelConfig};
use tshf_core::numerics::{FlopScope, Tape};
use tshf_core::sampler::{generate, CfgSchedule, DecodeOpts, ScheduleKind};
use tshf_core::shuffle::{ExtraPe, Variant};
use tshf_core::vocab::{decode_attributes, Caption, TokenGrid, CAPTION_LEN, DECODE_CONFIDENCE_THRESHOLD};
use tshf_core::{Model, Rng};

use crate::config::RunConfig;
use crate::data;
use crate::error::{HarnessError, Result};
use crate::trainer::{self, TrainOutcome};
use crate::checkpoint::TrainState;

/// `[bos, caption, soi]`.
pub const PROMPT_LEN: usize = CAPTION_LEN + 2;
/// `[eoi, eos]`.
pub const SUFFIX_LEN: usize = 2;

pub const VARIANTS: [&str; 7] = [
    "shuffle_n2",
    "shuffle_n4",
    "shuffle_n6",
    "drop",
    "simple",
    "shuffle_local_pe",
    "shuffle_global_pe",
];

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub key: String,
    pub cfg: RunConfig,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub key: String,
    pub final_total: f64,
    pub final_ce_visual: f64,
    pub final_mean_abs_lse: f64,
    pub secs_per_step: f64,
    pub params: usize,
    pub visual_positions: usize,
    pub outcome: TrainOutcome,
}

fn point(base: &RunConfig, key: String, edit: impl FnOnce(&mut RunConfig)) -> Result<SweepPoint> {
    let mut cfg = base.clone();
    edit(&mut cfg);
    cfg.out_dir = format!("{}/{key}", base.out_dir);
    cfg.validate()?;
    Ok(SweepPoint { key, cfg })
}

pub fn window_points(base: &RunConfig, s_list: &[usize]) -> Result<Vec<SweepPoint>> {
    s_list.iter().map(|&s| point(base, format!("s{s}"), |c| c.s = s)).collect()
}

pub fn variant_points(base: &RunConfig, names: &[&str]) -> Result<Vec<SweepPoint>> {
    names
        .iter()
        .map(|&name| {
            let edit: Box<dyn FnOnce(&mut RunConfig)> = match name {
                "shuffle_n2" => Box::new(|c| c.n_blocks = 2),
                "shuffle_n4" => Box::new(|c| c.n_blocks = 4),
                "shuffle_n6" => Box::new(|c| c.n_blocks = 6),
                "drop" => Box::new(|c| c.variant = Variant::Drop),
                "simple" => Box::new(|c| c.variant = Variant::Simple),
                "shuffle_local_pe" => Box::new(|c| c.extra_pe = ExtraPe::Local),
                "shuffle_global_pe" => Box::new(|c| c.extra_pe = ExtraPe::Global),
                _ => {
                    return Err(HarnessError::Usage(format!(
                        "unknown variant {name:?}; choose from {}",
                        VARIANTS.join(", ")
                    )))
                }
            };
            point(base, name.to_string(), edit)
        })
        .collect()
}

/// One run per `r` at s=1; `None` is the unprobed baseline.
pub fn probe_points(base: &RunConfig, r_list: &[Option<usize>]) -> Result<Vec<SweepPoint>> {
    r_list
        .iter()
        .map(|&r| {
            let key = r.map_or("none".to_string(), |r| format!("r{r}"));
            point(base, key, |c| {
                c.s = 1;
                c.probe_r = r.unwrap_or(0);
            })
        })
        .collect()
}

/// Trains every point on its own data and directory, then writes
/// `summary.csv` and `timing.csv` under `out_dir`.
pub fn run_sweep(out_dir: &Path, points: &[SweepPoint]) -> Result<Vec<SweepResult>> {
    let mut results = Vec::with_capacity(points.len());
    for p in points {
        let data = data::load(&p.cfg)?;
        let state = TrainState::fresh(&p.cfg)?;
        let params = state.model.params.num_elements();
        let visual_positions = state.model.cfg.fused_visual_len();
        let outcome = trainer::run_in_dir(&p.cfg, state, &data)?;
        results.push(SweepResult {
            key: p.key.clone(),
            final_total: outcome.final_mean(|m| m.total),
            final_ce_visual: outcome.final_mean(|m| m.ce_visual),
            final_mean_abs_lse: outcome.final_mean(|m| m.mean_abs_lse),
            secs_per_step: outcome.secs_per_step(),
            params,
            visual_positions,
            outcome,
        });
    }
    write_summary(out_dir, &results)?;
    Ok(results)
}

pub fn summary_csv(results: &[SweepResult]) -> String {
    let mut s = String::from("key,final_total,final_ce_visual,final_mean_abs_lse,params,visual_positions\n");
    for r in results {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.key, r.final_total, r.final_ce_visual, r.final_mean_abs_lse, r.params, r.visual_positions
        )
        .expect("string write");
    }
    s
}

fn write_summary(out_dir: &Path, results: &[SweepResult]) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, summary_csv(results)).map_err(|e| HarnessError::io(&path, e))?;
    let mut timing = String::from("key,secs_per_step\n");
    for r in results {
        writeln!(timing, "{},{}", r.key, r.secs_per_step).expect("string write");
    }
    let path = out_dir.join("timing.csv");
    std::fs::write(&path, timing).map_err(|e| HarnessError::io(&path, e))
}

/// Singular values of the probed visual embedding matrix.
#[derive(Debug, Clone)]
pub struct RankCheck {
    pub bound: usize,
    pub singular_values: Vec<f64>,
}

impl RankCheck {
    /// Largest singular value past the `d/r` bound.
    pub fn tail_max(&self) -> f64 {
        self.singular_values.iter().skip(self.bound).copied().fold(0.0, f64::max)
    }
}

pub fn probe_rank(model: &Model) -> Result<RankCheck> {
    let e = model.probed_visual_embeddings()?;
    let m = DMatrix::from_row_slice(e.rows(), e.cols(), e.data());
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let d = model.cfg.d;
    Ok(RankCheck {
        bound: model.cfg.probe_r.map_or(d, |r| d / r),
        singular_values: sv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgRow {
    pub kind: ScheduleKind,
    pub alpha: f64,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    /// Largest `|guided − cond|` seen in any trace.
    pub max_guidance_shift: f64,
}

/// Whether `grid` decodes to `caption` with enough confidence.
pub fn matches(grid: &TokenGrid, caption: &Caption, model: &Model) -> Result<(bool, f64)> {
    let d = decode_attributes(grid, &model.cfg.vocab)?;
    Ok((d.caption == *caption && d.confidence >= DECODE_CONFIDENCE_THRESHOLD, d.confidence))
}

/// Sample `i` uses held-out caption `i mod 12` and a seed derived from
/// `(seed, i)`, so every (kind, α) cell sees the same captions and seeds.
pub fn run_cfg_sweep(
    model: &Model,
    alphas: &[f64],
    kinds: &[ScheduleKind],
    n_samples: usize,
    seed: u64,
    opts: &DecodeOpts,
) -> Result<Vec<CfgRow>> {
    let captions = data::held_out_captions();
    let root = Rng::new(seed);
    let mut rows = Vec::new();
    for &kind in kinds {
        for &alpha in alphas {
            let schedule = CfgSchedule::new(kind, alpha);
            let (mut hits, mut conf, mut shift) = (0usize, 0.0, 0.0f64);
            for i in 0..n_samples {
                let caption = captions[i % captions.len()];
                let g = generate(model, &caption, &schedule, opts, root.fork(i as u64).next_u64())?;
                let (ok, c) = matches(&g.grid, &caption, model)?;
                hits += ok as usize;
                conf += c;
                shift = g.trace.iter().map(|t| t.max_guidance_shift).fold(shift, f64::max);
            }
            rows.push(CfgRow {
                kind,
                alpha,
                samples: n_samples,
                accuracy: hits as f64 / n_samples.max(1) as f64,
                mean_confidence: conf / n_samples.max(1) as f64,
                max_guidance_shift: shift,
            });
        }
    }
    Ok(rows)
}

pub fn cfg_csv(rows: &[CfgRow]) -> String {
    let mut s = String::from("schedule,alpha,samples,accuracy,mean_confidence,max_guidance_shift\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.kind.name(),
            r.alpha,
            r.samples,
            r.accuracy,
            r.mean_confidence,
            r.max_guidance_shift
        )
        .expect("string write");
    }
    s
}

/// Fraction of examples whose sampled grid decodes to the attributes decoded
/// from the example's own grid, over `repeats` samples per example.
pub fn reproduction_accuracy(
    model: &Model,
    examples: &[tshf_core::model::Example],
    repeats: usize,
    schedule: &CfgSchedule,
    opts: &DecodeOpts,
    seed: u64,
) -> Result<f64> {
    let root = Rng::new(seed);
    let mut hits = 0;
    for (i, ex) in examples.iter().enumerate() {
        let target = decode_attributes(&ex.grid, &model.cfg.vocab)?.caption;
        for k in 0..repeats {
            let g = generate(model, &ex.caption, schedule, opts, root.fork2(i as u64, k as u64).next_u64())?;
            hits += matches(&g.grid, &target, model)?.0 as usize;
        }
    }
    Ok(hits as f64 / (examples.len() * repeats).max(1) as f64)
}

/// 64x64-token images at d=3072, 20 layers, 24 heads, 16384 codes.
pub fn full_scale() -> Result<ModelConfig> {
    let base = ModelConfig::desk_default();
    Ok(ModelConfig {
        d: 3072,
        layers: 20,
        heads: 24,
        mlp_ratio: 4,
        vocab: tshf_core::vocab::VocabLayout::new(base.vocab.text_size(), 16384)?,
        grid_h: 64,
        grid_w: 64,
        ..base
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopRow {
    pub scale: String,
    pub s: usize,
    pub estimate: FlopEstimate,
}

pub fn flops_rows(scale: &str, base: &ModelConfig, s_list: &[usize]) -> Result<Vec<FlopRow>> {
    s_list
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            cfg.shuffle.s = s;
            cfg.validate()?;
            Ok(FlopRow {
                scale: scale.to_string(),
                s,
                estimate: flops_estimate(&cfg, PROMPT_LEN, SUFFIX_LEN)?,
            })
        })
        .collect()
}

pub fn flops_csv(rows: &[FlopRow]) -> String {
    let mut s = String::from(
        "scale,s,fused_len,transformer_training,shuffle_training,head_training,total_training,shuffle_overhead,inference_steps\n",
    );
    for r in rows {
        let e = &r.estimate;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.scale,
            r.s,
            e.fused_len,
            e.transformer_training,
            e.shuffle_training,
            e.head_training,
            e.total_training(),
            e.shuffle_overhead(),
            e.inference_steps
        )
        .expect("string write");
    }
    s
}

/// Tape-counted forward FLOPs against the closed form for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstrumentedFlops {
    pub transformer_measured: u64,
    pub transformer_closed: u64,
    pub shuffle_measured: u64,
    pub shuffle_closed: u64,
}

pub fn instrumented_flops(cfg: &ModelConfig, seed: u64) -> Result<InstrumentedFlops> {
    let model = Model::new(cfg.clone(), &mut Rng::new(seed))?;
    let mut rng = Rng::new(seed).fork(1);
    let caption = Caption::from_index(rng.below(tshf_core::vocab::NUM_CAPTIONS)).expect("in range");
    let grid = tshf_core::vocab::render(&caption, cfg.grid_h, cfg.grid_w, 0.0, &mut rng, &cfg.vocab)?;
    let seq = MixedSequence::new(Some(&caption), grid, &cfg.vocab)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params);
    model.forward_logits(&mut ctx, &seq)?;
    let t = seq.fused_len(cfg.shuffle.s)?;
    let cost = CostModel {
        d: cfg.d,
        layers: cfg.layers,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        t,
    };
    Ok(InstrumentedFlops {
        transformer_measured: tape.flops(FlopScope::Transformer),
        transformer_closed: cost.forward_flops(),
        shuffle_measured: tape.flops(FlopScope::Shuffle),
        shuffle_closed: shuffle_forward_flops(&cfg.shuffle, cfg.d, cfg.grid_h * cfg.grid_w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_validate() {
        let base = RunConfig::default();
        assert_eq!(window_points(&base, &[1, 2, 4]).unwrap().len(), 3);
        assert!(window_points(&base, &[3]).is_err());
        assert_eq!(variant_points(&base, &VARIANTS).unwrap().len(), 7);
        assert!(matches!(variant_points(&base, &["bogus"]), Err(HarnessError::Usage(_))));
        let probes = probe_points(&base, &[None, Some(8)]).unwrap();
        assert!(probes.iter().all(|p| p.cfg.s == 1));
        assert!(probe_points(&base, &[Some(3)]).is_err());
    }

    #[test]
    fn full_scale_token_counts() {
        let rows = flops_rows("full", &full_scale().unwrap(), &[1, 2]).unwrap();
        assert_eq!(rows[0].estimate.inference_steps - PROMPT_LEN, 4096);
        assert_eq!(rows[1].estimate.inference_steps - PROMPT_LEN, 1024);
    }
}

#[derive(Debug, Clone)]
pub struct CanaryReport {
    pub history: Vec<trainer::LogRow>,
    pub batch: Vec<tshf_core::model::Example>,
}

impl CanaryReport {
    pub fn initial_loss(&self) -> f64 {
        self.history.first().map_or(f64::NAN, |r| r.metrics.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.metrics.total)
    }

    /// Fraction of steps whose loss is below the previous step's.
    pub fn decreasing_fraction(&self) -> f64 {
        let n = self.history.len().saturating_sub(1).max(1);
        let down = self.history.windows(2).filter(|w| w[1].metrics.total < w[0].metrics.total).count();
        down as f64 / n as f64
    }
}

/// Overfit settings: one fixed batch, no prompt dropout, no weight decay,
/// 200 steps.
pub fn canary_config(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.steps = 200;
    c.batch_size = 8;
    c.dataset_size = 8;
    c.dataset = String::new();
    c.prompt_drop = 0.0;
    c.lr = 2e-3;
    c.lr_floor = 1e-5;
    c.weight_decay = 0.0;
    c.warmup_steps = 10;
    c.decay_steps = 0;
    c
}

/// Trains on the same batch of distinct captions every step and saves the checkpoint plus the
/// batch (`batch.txt`) under `cfg.out_dir`.
pub fn run_canary(cfg: &RunConfig) -> Result<(TrainState, CanaryReport)> {
    cfg.validate()?;
    let batch = data::render_all(cfg, &data::distinct_captions(cfg.batch_size, cfg.seed))?;
    let mut state = TrainState::fresh(cfg)?;
    let mut history = Vec::with_capacity(cfg.steps as usize);
    let threads = trainer::threads();
    while state.step < cfg.steps {
        let lr = cfg.lr_at(state.step);
        let metrics = state
            .model
            .train_step(&mut state.opt, &batch, lr, cfg.prompt_drop, &mut state.rng, threads)?;
        state.step += 1;
        history.push(trainer::LogRow {
            step: state.step,
            lr,
            metrics,
        });
    }
    let dir = Path::new(&cfg.out_dir);
    data::write(&dir.join("batch.txt"), cfg, &batch)?;
    let mut csv = format!("{}\n", trainer::LOSS_HEADER);
    for r in &history {
        writeln!(csv, "{}", r.csv()).expect("string write");
    }
    let path = dir.join(trainer::LOSS_FILE);
    std::fs::write(&path, csv).map_err(|e| HarnessError::io(&path, e))?;
    crate::checkpoint::Checkpoint::capture(cfg, &state).save(&dir.join(trainer::CHECKPOINT_FILE))?;
    Ok((state, CanaryReport { history, batch }))
}
