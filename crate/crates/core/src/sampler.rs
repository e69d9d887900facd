//! Classifier-free-guided autoregressive decoding at fused-token granularity.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{ensure, Error, Result};
use crate::model::{Ctx, KvCache, Model};
use crate::numerics::{Rng, Scalar, Tape, Var};
use crate::vocab::{self, Caption, TokenGrid, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Linear,
    HalfLinear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Constant, ScheduleKind::Linear, ScheduleKind::HalfLinear];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::HalfLinear => "half_linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfgSchedule {
    pub kind: ScheduleKind,
    pub alpha_max: f64,
}

impl Default for CfgSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::HalfLinear,
            alpha_max: 7.5,
        }
    }
}

fn ramp(i: usize, len: usize, alpha_max: f64) -> f64 {
    if len <= 1 {
        alpha_max
    } else {
        1.0 + (i as f64 / (len - 1) as f64) * (alpha_max - 1.0)
    }
}

impl CfgSchedule {
    pub fn new(kind: ScheduleKind, alpha_max: f64) -> Self {
        Self { kind, alpha_max }
    }

    /// Guidance scale at fused step `i` of `n`.
    ///
    /// Half-linear ramps from 1 to `alpha_max` across the first `⌈n/2⌉`
    /// steps and holds the peak afterwards.
    pub fn scale_at(&self, i: usize, n: usize) -> Result<f64> {
        ensure!(n >= 1, "schedule needs at least one step");
        ensure!(i < n, "step {i} outside schedule of {n} steps");
        Ok(match self.kind {
            ScheduleKind::Constant => self.alpha_max,
            ScheduleKind::Linear => ramp(i, n, self.alpha_max),
            ScheduleKind::HalfLinear => {
                let len = n.div_ceil(2);
                if i < len {
                    ramp(i, len, self.alpha_max)
                } else {
                    self.alpha_max
                }
            }
        })
    }
}

/// `α·cond + (1−α)·uncond`; equal to the conditional logits exactly at
/// `α = 1` and to the unconditional ones at `α = 0`.
pub fn guided_logits(cond: &[f64], uncond: &[f64], alpha: f64) -> Result<Vec<f64>> {
    ensure!(
        cond.len() == uncond.len(),
        "conditional and unconditional logits differ in length: {} vs {}",
        cond.len(),
        uncond.len()
    );
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| alpha * c + (1.0 - alpha) * u).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOpts {
    /// `0` selects argmax decoding.
    pub temperature: f64,
    /// `0` keeps the whole band.
    pub top_k: usize,
    /// Recompute the full sequence every step instead of using KV caches.
    pub full_recompute: bool,
}

impl Default for DecodeOpts {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 64,
            full_recompute: false,
        }
    }
}

/// Draws one id from `logits` restricted to `band`.
pub fn sample_token(logits: &[f64], temperature: f64, top_k: usize, band: Range<usize>, rng: &mut Rng) -> Result<usize> {
    ensure!(
        band.start < band.end && band.end <= logits.len(),
        "sampling band {band:?} is empty or exceeds {} logits",
        logits.len()
    );
    ensure!(temperature >= 0.0, "temperature must be >= 0, got {temperature}");
    if temperature == 0.0 || top_k == 1 {
        let mut best = band.start;
        for i in band.clone() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let mut cand: Vec<(usize, f64)> = band.map(|i| (i, logits[i] / temperature)).collect();
    if top_k > 0 && top_k < cand.len() {
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(top_k);
        cand.sort_by_key(|c| c.0);
    }
    let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return Ok(c.0);
        }
        u -= w;
    }
    Ok(cand.last().expect("non-empty band").0)
}

/// One decode step of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub alpha: f64,
    /// Largest in-band guided logit of the window.
    pub max_logit: f64,
    /// Mean in-band entropy of the guided distributions (temperature 1).
    pub entropy: f64,
    /// Largest `|guided − cond|` over the window's in-band logits.
    pub max_guidance_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub grid: TokenGrid,
    pub trace: Vec<StepTrace>,
    /// Guided logits of every step, `s²` rows of the full vocabulary each.
    pub logits: Vec<Vec<f64>>,
}

/// CSV `step,alpha,max_logit,entropy`.
pub fn trace_csv(trace: &[StepTrace]) -> String {
    let mut out = String::from("step,alpha,max_logit,entropy\n");
    for t in trace {
        writeln!(out, "{},{},{},{}", t.step, t.alpha, t.max_logit, t.entropy).expect("string write");
    }
    out
}

fn band_entropy(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
    let lz = z.ln();
    row.iter()
        .map(|&l| {
            let lp = l - max - lz;
            -lp.exp() * lp
        })
        .sum()
}

/// One CFG pass: a prompt plus its cache.
struct Pass<T> {
    prompt: Vec<TokenId>,
    cache: KvCache<T>,
    last: Vec<T>,
}

impl<T: Scalar> Pass<T> {
    fn new(model: &Model<T>, prompt: Vec<TokenId>, full: bool) -> Result<Self> {
        let mut pass = Self {
            prompt,
            cache: KvCache::new(),
            last: Vec::new(),
        };
        pass.advance(model, &[], full)?;
        Ok(pass)
    }

    /// Feeds the newest window (or the prompt when `windows` is empty) and
    /// stores the last hidden row.
    fn advance(&mut self, model: &Model<T>, windows: &[TokenId], full: bool) -> Result<()> {
        let s2 = model.cfg.shuffle.window();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let h = if full {
            let x = model.fused_inputs(&mut ctx, &self.prompt, windows, &[])?;
            model.transformer_forward(&mut ctx, x, 0, None)?
        } else if windows.is_empty() {
            let x = model.fused_inputs(&mut ctx, &self.prompt, &[], &[])?;
            model.transformer_forward(&mut ctx, x, 0, Some(&mut self.cache))?
        } else {
            let k = windows.len() / s2 - 1;
            let x = model.fuse_window_ids(&mut ctx, &windows[k * s2..], k)?;
            let start = self.prompt.len() + k;
            model.transformer_forward(&mut ctx, x, start, Some(&mut self.cache))?
        };
        let hv = ctx.tape.value(h);
        self.last = hv.row(hv.rows() - 1).to_vec();
        Ok(())
    }

    fn window_logits(&self, model: &Model<T>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let h: Var = ctx.tape.constant(crate::numerics::Tensor::new(vec![1, self.last.len()], self.last.clone())?);
        let l = model.window_logits(&mut ctx, h)?;
        let lv = ctx.tape.value(l);
        Ok((0..lv.rows()).map(|r| lv.row(r).iter().map(|x| x.as_f64()).collect()).collect())
    }
}

/// Generates one grid for `caption` under `schedule`.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    caption: &Caption,
    schedule: &CfgSchedule,
    opts: &DecodeOpts,
    seed: u64,
) -> Result<Generation> {
    let cfg = &model.cfg;
    let layout = cfg.vocab;
    let s2 = cfg.shuffle.window();
    let n = cfg.fused_visual_len();
    let full = opts.full_recompute;
    let mut cond = Pass::new(model, vocab::prompt(Some(caption), &layout)?, full)?;
    let mut uncond = Pass::new(model, vocab::prompt(None, &layout)?, full)?;
    let band = layout.first_visual() as usize..layout.total();
    let mut rng = Rng::new(seed);
    let mut windows: Vec<TokenId> = Vec::with_capacity(n * s2);
    let mut trace = Vec::with_capacity(n);
    let mut all_logits = Vec::with_capacity(n);
    for i in 0..n {
        let alpha = schedule.scale_at(i, n)?;
        let lc = cond.window_logits(model)?;
        let lu = uncond.window_logits(model)?;
        let mut step_logits = Vec::with_capacity(s2 * layout.total());
        let (mut max_logit, mut entropy, mut shift) = (f64::NEG_INFINITY, 0.0, 0.0f64);
        for (c, u) in lc.iter().zip(&lu) {
            let g = guided_logits(c, u, alpha)?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("guided logits at decode step {i}")));
            }
            let in_band = &g[band.clone()];
            max_logit = in_band.iter().copied().fold(max_logit, f64::max);
            entropy += band_entropy(in_band) / s2 as f64;
            for j in band.clone() {
                shift = shift.max((g[j] - c[j]).abs());
            }
            let id = sample_token(&g, opts.temperature, opts.top_k, band.clone(), &mut rng)?;
            windows.push(id as TokenId);
            step_logits.extend_from_slice(&g);
        }
        trace.push(StepTrace {
            step: i,
            alpha,
            max_logit,
            entropy,
            max_guidance_shift: shift,
        });
        all_logits.push(step_logits);
        if i + 1 < n {
            cond.advance(model, &windows, full)?;
            uncond.advance(model, &windows, full)?;
            if !full {
                ensure!(
                    cond.cache.len() - cond.prompt.len() == uncond.cache.len() - uncond.prompt.len(),
                    "CFG caches diverged at step {i}"
                );
            }
        }
    }
    let raster = model.raster_of_slot()?;
    let mut ids = vec![0; windows.len()];
    for (slot, &id) in windows.iter().enumerate() {
        ids[raster[slot]] = id;
    }
    Ok(Generation {
        grid: TokenGrid::new(cfg.grid_h, cfg.grid_w, ids, &layout)?,
        trace,
        logits: all_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let lin = CfgSchedule::new(ScheduleKind::Linear, 7.5);
        assert_eq!(lin.scale_at(0, 64).unwrap(), 1.0);
        assert_eq!(lin.scale_at(63, 64).unwrap(), 7.5);
        assert_eq!(lin.scale_at(0, 1).unwrap(), 7.5);
        assert!(lin.scale_at(64, 64).is_err());
        let half = CfgSchedule::new(ScheduleKind::HalfLinear, 7.5);
        let v: Vec<f64> = (0..8).map(|i| half.scale_at(i, 8).unwrap()).collect();
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[3..], &[7.5; 5]);
        let c = CfgSchedule::new(ScheduleKind::Constant, 7.5);
        assert!((0..10).all(|i| c.scale_at(i, 10).unwrap() == 7.5));
    }

    #[test]
    fn guidance_identities() {
        let c = [1.0, 3.0];
        let u = [0.0, 0.0];
        assert_eq!(guided_logits(&c, &u, 2.0).unwrap(), vec![2.0, 6.0]);
        let c = [0.1, -2.7, 1e3];
        let u = [5.5, 0.3, -7.0];
        assert_eq!(guided_logits(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(guided_logits(&c, &u, 0.0).unwrap(), u.to_vec());
        assert!(guided_logits(&c, &u[..2], 1.0).is_err());
    }

    #[test]
    fn sampling_modes() {
        let logits = [9.0, 0.5, 2.0, 1.0, 2.0];
        let mut rng = Rng::new(0);
        assert_eq!(sample_token(&logits, 0.0, 0, 1..5, &mut rng).unwrap(), 2);
        for _ in 0..50 {
            assert_eq!(sample_token(&logits, 3.0, 1, 1..5, &mut rng).unwrap(), 2);
            let id = sample_token(&logits, 1.0, 2, 1..5, &mut rng).unwrap();
            assert!(id == 2 || id == 4);
        }
        assert!(sample_token(&logits, 1.0, 0, 3..3, &mut rng).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let t = StepTrace {
            step: 0,
            alpha: 1.0,
            max_logit: 2.5,
            entropy: 0.25,
            max_guidance_shift: 0.0,
        };
        assert_eq!(trace_csv(&[t]), "step,alpha,max_logit,entropy\n0,1,2.5,0.25\n");
    }
}
