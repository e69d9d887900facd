//! Decoder-only transformer with the shuffle pair wrapped around the visual
//! span.
//!
//! Sequence layout (fused positions):
//!
//! ```text
//! [bos, caption..., soi] [window 0 .. window m-1] [eoi, eos]
//! ```
//!
//! Targets are shifted by one fused position. The hidden state at position
//! `k - 1` (position `soi` for `k = 0`) is unshuffled into the `s²` logit rows
//! of window `k`; the last window position predicts `eoi` and `eoi` predicts
//! `eos`. Logit rows are ordered `prefix[1..]`, the grid in raster order,
//! then the suffix.

mod params;
mod train;

pub use params::*;
pub use train::*;

use crate::error::{ensure, Error, Result};
use crate::numerics::{FlopScope, ParamId, Rng, Scalar, Tensor, Var};
use crate::shuffle::{inverse_map, window_index_map, ShuffleConfig, ShuffleParams};
use crate::vocab::{self, Caption, TokenGrid, TokenId, VocabLayout, EOI, EOS};

/// Epsilon of every RMS norm in the model.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub qk_norm: bool,
    pub z_loss_weight: f64,
    pub visual_loss_weight: f64,
    pub vocab: VocabLayout,
    pub shuffle: ShuffleConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Rank-reduction factor of the visual-embedding probe, if any.
    pub probe_r: Option<usize>,
}

impl ModelConfig {
    /// d=128, 4 layers, 4 heads, 16x16 grid, s=2.
    pub fn desk_default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            rope_base: 10000.0,
            qk_norm: false,
            z_loss_weight: 0.0,
            visual_loss_weight: 1.0,
            vocab: VocabLayout::new(64, 512).expect("static layout"),
            shuffle: ShuffleConfig::default(),
            grid_h: 16,
            grid_w: 16,
            probe_r: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Fused positions occupied by the visual span.
    pub fn fused_visual_len(&self) -> usize {
        self.grid_h * self.grid_w / self.shuffle.window()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1 && self.layers >= 1 && self.heads >= 1, "d, layers and heads must be positive");
        ensure!(self.d.is_multiple_of(self.heads), "heads={} must divide d={}", self.heads, self.d);
        ensure!(self.head_dim().is_multiple_of(2), "head_dim={} must be even for RoPE", self.head_dim());
        ensure!(self.mlp_ratio >= 1, "mlp_ratio must be >= 1");
        ensure!(self.rope_base > 1.0, "rope_base must exceed 1");
        ensure!(self.z_loss_weight >= 0.0, "z_loss_weight must be >= 0, got {}", self.z_loss_weight);
        ensure!(
            self.visual_loss_weight > 0.0 && self.visual_loss_weight <= 1.0,
            "visual_loss_weight must lie in (0, 1], got {}",
            self.visual_loss_weight
        );
        self.shuffle.validate(self.d)?;
        self.shuffle.fused_len(self.grid_h, self.grid_w)?;
        if let Some(r) = self.probe_r {
            ensure!(r >= 1 && self.d.is_multiple_of(r), "probe r={r} must divide d={}", self.d);
        }
        Ok(())
    }
}

/// A training or evaluation sequence: prefix ids, the grid, suffix ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence {
    pub prefix: Vec<TokenId>,
    pub grid: TokenGrid,
    pub suffix: Vec<TokenId>,
}

impl MixedSequence {
    /// `[bos, caption?, soi] grid [eoi, eos]`.
    pub fn new(caption: Option<&Caption>, grid: TokenGrid, layout: &VocabLayout) -> Result<Self> {
        Ok(Self {
            prefix: vocab::prompt(caption, layout)?,
            grid,
            suffix: vec![EOI, EOS],
        })
    }

    pub fn fused_len(&self, s: usize) -> Result<usize> {
        let cfg = ShuffleConfig { s, ..ShuffleConfig::default() };
        Ok(self.prefix.len() + cfg.fused_len(self.grid.h(), self.grid.w())? + self.suffix.len())
    }

    /// Fused position of the hidden state behind every logit row.
    pub fn source_positions(&self, s: usize) -> Result<Vec<usize>> {
        let p = self.prefix.len();
        let m = self.fused_len(s)? - p - self.suffix.len();
        let map = window_index_map(self.grid.h(), self.grid.w(), s)?;
        let s2 = s * s;
        let mut visual = vec![0; map.len()];
        for (slot, &r) in map.iter().enumerate() {
            visual[r] = p - 1 + slot / s2;
        }
        let mut out: Vec<usize> = (0..p - 1).collect();
        out.extend(visual);
        out.extend((0..self.suffix.len()).map(|i| p + m - 1 + i));
        Ok(out)
    }

    /// One target id per logit row.
    pub fn targets(&self) -> Vec<TokenId> {
        let mut t = self.prefix[1..].to_vec();
        t.extend_from_slice(self.grid.ids());
        t.extend_from_slice(&self.suffix);
        t
    }
}

/// Per-layer attention keys and values (after RoPE) of every processed
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    len: usize,
}

impl<T> Default for KvCache<T> {
    fn default() -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
        }
    }
}

impl<T> KvCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Scalar summaries of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub ce_text: f64,
    pub ce_visual: f64,
    /// `z_loss_weight · mean(lse²)`.
    pub z_term: f64,
    pub mean_abs_lse: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    attn_norm: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    q_norm: Option<ParamId>,
    k_norm: Option<ParamId>,
    mlp_norm: ParamId,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    embed: ParamId,
    probe: Option<(Linear, Linear)>,
    layers: Vec<Layer>,
    shuffle: ShuffleParams,
    final_norm: ParamId,
    head: Linear,
}

fn ids_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let v = cfg.vocab.total();
        let mut p = ParamStore::new();
        let embed = p.add_uniform("embed", &[v, d], d, &mut rng.fork(0))?;
        let probe = match cfg.probe_r {
            Some(r) => {
                let mut prng = rng.fork(1);
                Some((
                    Linear::new(&mut p, "probe.down", d, d / r, false, &mut prng)?,
                    Linear::new(&mut p, "probe.up", d / r, d, false, &mut prng)?,
                ))
            }
            None => None,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut lrng = rng.fork2(2, i as u64);
            let n = |s: &str| format!("layer{i}.{s}");
            let hd = cfg.head_dim();
            let attn_norm = p.add(n("attn_norm"), Tensor::ones(&[d]))?;
            let wq = Linear::new(&mut p, &n("wq"), d, d, false, &mut lrng)?;
            let wk = Linear::new(&mut p, &n("wk"), d, d, false, &mut lrng)?;
            let wv = Linear::new(&mut p, &n("wv"), d, d, false, &mut lrng)?;
            let wo = Linear::new(&mut p, &n("wo"), d, d, false, &mut lrng)?;
            let (q_norm, k_norm) = if cfg.qk_norm {
                (
                    Some(p.add(n("q_norm"), Tensor::ones(&[hd]))?),
                    Some(p.add(n("k_norm"), Tensor::ones(&[hd]))?),
                )
            } else {
                (None, None)
            };
            let mlp_norm = p.add(n("mlp_norm"), Tensor::ones(&[d]))?;
            let hidden = cfg.mlp_ratio * d;
            let fc1 = Linear::new(&mut p, &n("fc1"), d, hidden, false, &mut lrng)?;
            let fc2 = Linear::new(&mut p, &n("fc2"), hidden, d, false, &mut lrng)?;
            layers.push(Layer {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                q_norm,
                k_norm,
                mlp_norm,
                fc1,
                fc2,
            });
        }
        let shuffle = ShuffleParams::new(&mut p, cfg.shuffle, d, cfg.fused_visual_len(), &mut rng.fork(3))?;
        let final_norm = p.add("final_norm", Tensor::ones(&[d]))?;
        let head = Linear::new(&mut p, "head", d, v, false, &mut rng.fork(4))?;
        Ok(Self {
            cfg,
            params: p,
            embed,
            probe,
            layers,
            shuffle,
            final_norm,
            head,
        })
    }

    pub fn shuffle_params(&self) -> &ShuffleParams {
        &self.shuffle
    }

    /// Embedding lookup; visual ids additionally pass through the probe.
    pub fn embed(&self, ctx: &mut Ctx<'_, '_, T>, ids: &[TokenId], visual: bool) -> Result<Var> {
        let total = self.cfg.vocab.total();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= total) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {total}")));
        }
        let prev = ctx.tape.set_scope(FlopScope::Other);
        let table = ctx.p(self.embed);
        let mut x = ctx.tape.gather_rows(table, &ids_usize(ids))?;
        if visual {
            if let Some((down, up)) = &self.probe {
                let z = down.forward(ctx, x)?;
                x = up.forward(ctx, z)?;
            }
        }
        ctx.tape.set_scope(prev);
        Ok(x)
    }

    /// Probed embeddings of every visual id, `[visual_size, d]`.
    pub fn probed_visual_embeddings(&self) -> Result<Tensor<T>> {
        let layout = self.cfg.vocab;
        let ids: Vec<TokenId> = (0..layout.visual_size()).map(|k| layout.visual_id(k)).collect();
        let mut tape = crate::numerics::Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let x = self.embed(&mut ctx, &ids, true)?;
        Ok(ctx.tape.value(x).clone())
    }

    /// Fuses `window_ids` (window-slot order, whole windows starting at
    /// fused window `first_window`).
    pub fn fuse_window_ids(&self, ctx: &mut Ctx<'_, '_, T>, window_ids: &[TokenId], first_window: usize) -> Result<Var> {
        let s2 = self.cfg.shuffle.window();
        ensure!(
            !window_ids.is_empty() && window_ids.len().is_multiple_of(s2),
            "{} visual ids do not form whole windows of {s2}",
            window_ids.len()
        );
        let x = self.embed(ctx, window_ids, true)?;
        let windows: Vec<usize> = (first_window..first_window + window_ids.len() / s2).collect();
        let prev = ctx.tape.set_scope(FlopScope::Shuffle);
        let out = self.shuffle.fuse_windows(ctx, x, &windows);
        ctx.tape.set_scope(prev);
        out
    }

    /// Transformer inputs for `prefix`, the windows decoded so far (window
    /// order) and `suffix`; any part may be empty except the prefix.
    pub fn fused_inputs(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        prefix: &[TokenId],
        window_ids: &[TokenId],
        suffix: &[TokenId],
    ) -> Result<Var> {
        ensure!(!prefix.is_empty(), "sequence prefix is empty");
        let mut parts = vec![self.embed(ctx, prefix, false)?];
        if !window_ids.is_empty() {
            parts.push(self.fuse_window_ids(ctx, window_ids, 0)?);
        }
        if !suffix.is_empty() {
            parts.push(self.embed(ctx, suffix, false)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        ctx.tape.concat_rows(&parts)
    }

    /// `[fused_len, d]` transformer inputs of a full sequence.
    pub fn embed_and_fuse(&self, ctx: &mut Ctx<'_, '_, T>, seq: &MixedSequence) -> Result<Var> {
        self.check_grid(&seq.grid)?;
        let map = window_index_map(seq.grid.h(), seq.grid.w(), self.cfg.shuffle.s)?;
        let ordered: Vec<TokenId> = map.iter().map(|&r| seq.grid.ids()[r]).collect();
        self.fused_inputs(ctx, &seq.prefix, &ordered, &seq.suffix)
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        ensure!(
            grid.h() == self.cfg.grid_h && grid.w() == self.cfg.grid_w,
            "grid {}x{} does not match the configured {}x{}",
            grid.h(),
            grid.w(),
            self.cfg.grid_h,
            self.cfg.grid_w
        );
        Ok(())
    }

    /// Runs the blocks on `x: [T, d]` occupying fused positions
    /// `start..start+T`. With a cache, `start` must equal the cached length
    /// and the new keys/values are appended.
    pub fn transformer_forward(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        x: Var,
        start: usize,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<Var> {
        let t = ctx.tape.shape(x)[0];
        ensure!(t >= 1, "transformer_forward needs at least one position");
        if let Some(c) = cache.as_deref() {
            ensure!(
                c.len == start,
                "cache holds {} positions but the input starts at position {start}",
                c.len
            );
        }
        let cfg = &self.cfg;
        let (d, heads, hd) = (cfg.d, cfg.heads, cfg.head_dim());
        let positions: Vec<usize> = (start..start + t).collect();
        let eps = T::lit(NORM_EPS);
        let base = T::lit(cfg.rope_base);
        let prev = ctx.tape.set_scope(FlopScope::Transformer);
        let mut x = x;
        let mut new_kv = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let g = ctx.p(layer.attn_norm);
            let hn = ctx.tape.rms_norm(x, g, eps)?;
            let mut q = layer.wq.forward(ctx, hn)?;
            let mut k = layer.wk.forward(ctx, hn)?;
            let v = layer.wv.forward(ctx, hn)?;
            if let (Some(qn), Some(kn)) = (layer.q_norm, layer.k_norm) {
                for (var, gain) in [(&mut q, qn), (&mut k, kn)] {
                    let g = ctx.p(gain);
                    let r = ctx.tape.reshape(*var, &[t * heads, hd])?;
                    let r = ctx.tape.rms_norm(r, g, eps)?;
                    *var = ctx.tape.reshape(r, &[t, d])?;
                }
            }
            let q = ctx.tape.rope(q, heads, &positions, base)?;
            let mut k = ctx.tape.rope(k, heads, &positions, base)?;
            let mut v = v;
            if let Some(c) = cache.as_deref() {
                if c.len > 0 {
                    let pk = ctx.tape.constant(c.k[li].clone());
                    let pv = ctx.tape.constant(c.v[li].clone());
                    k = ctx.tape.concat_rows(&[pk, k])?;
                    v = ctx.tape.concat_rows(&[pv, v])?;
                }
            }
            if cache.is_some() {
                new_kv.push((ctx.tape.value(k).clone(), ctx.tape.value(v).clone()));
            }
            let a = ctx.tape.causal_attention(q, k, v, heads)?;
            let o = layer.wo.forward(ctx, a)?;
            x = ctx.tape.add(x, o)?;
            let g = ctx.p(layer.mlp_norm);
            let hn = ctx.tape.rms_norm(x, g, eps)?;
            let h = layer.fc1.forward(ctx, hn)?;
            let h = ctx.tape.gelu(h);
            let h = layer.fc2.forward(ctx, h)?;
            x = ctx.tape.add(x, h)?;
        }
        ctx.tape.set_scope(prev);
        if let Some(c) = cache {
            let (k, v): (Vec<_>, Vec<_>) = new_kv.into_iter().unzip();
            c.k = k;
            c.v = v;
            c.len = start + t;
        }
        Ok(x)
    }

    /// Final norm and output head over per-token features.
    pub fn project(&self, ctx: &mut Ctx<'_, '_, T>, features: Var) -> Result<Var> {
        let prev = ctx.tape.set_scope(FlopScope::Head);
        let g = ctx.p(self.final_norm);
        let n = ctx.tape.rms_norm(features, g, T::lit(NORM_EPS))?;
        let out = self.head.forward(ctx, n);
        ctx.tape.set_scope(prev);
        out
    }

    /// Logits for the `s²` tokens of the window that follows `hidden`
    /// (`[1, d]`), rows in window-slot order.
    pub fn window_logits(&self, ctx: &mut Ctx<'_, '_, T>, hidden: Var) -> Result<Var> {
        let prev = ctx.tape.set_scope(FlopScope::Shuffle);
        let per_token = self.shuffle.split_windows(ctx, hidden);
        ctx.tape.set_scope(prev);
        self.project(ctx, per_token?)
    }

    /// Logit rows aligned with [`MixedSequence::targets`].
    pub fn unfuse_and_project(&self, ctx: &mut Ctx<'_, '_, T>, h: Var, seq: &MixedSequence) -> Result<Var> {
        let p = seq.prefix.len();
        let m = seq.fused_len(self.cfg.shuffle.s)? - p - seq.suffix.len();
        ensure!(
            ctx.tape.shape(h)[0] == p + m + seq.suffix.len(),
            "hidden states have {} rows, sequence needs {}",
            ctx.tape.shape(h)[0],
            p + m + seq.suffix.len()
        );
        let text = ctx.tape.slice_rows(h, 0, p - 1)?;
        let windows = ctx.tape.slice_rows(h, p - 1, p - 1 + m)?;
        let prev = ctx.tape.set_scope(FlopScope::Shuffle);
        let visual = self.shuffle.split_grid(ctx, windows, seq.grid.h(), seq.grid.w());
        ctx.tape.set_scope(prev);
        let mut parts = vec![text, visual?];
        if !seq.suffix.is_empty() {
            let tail = p + m - 1;
            parts.push(ctx.tape.slice_rows(h, tail, tail + seq.suffix.len())?);
        }
        let features = ctx.tape.concat_rows(&parts)?;
        self.project(ctx, features)
    }

    /// Embed, fuse, transformer, unfuse, project.
    pub fn forward_logits(&self, ctx: &mut Ctx<'_, '_, T>, seq: &MixedSequence) -> Result<Var> {
        let x = self.embed_and_fuse(ctx, seq)?;
        let h = self.transformer_forward(ctx, x, 0, None)?;
        self.unfuse_and_project(ctx, h, seq)
    }

    /// `CE_text + visual_weight·CE_visual + z_weight·mean(lse²)`. Rows are
    /// classed by their target id: visual ids versus text and special ids.
    pub fn loss(&self, ctx: &mut Ctx<'_, '_, T>, logits: Var, targets: &[TokenId]) -> Result<(Var, LossParts)> {
        let shape = ctx.tape.shape(logits).to_vec();
        let total_v = self.cfg.vocab.total();
        ensure!(
            shape.len() == 2 && shape[1] == total_v && shape[0] == targets.len(),
            "logits {shape:?} do not match {} targets over {total_v} ids",
            targets.len()
        );
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= total_v) {
            return Err(Error::Contract(format!("target id {bad} outside vocabulary of {total_v}")));
        }
        let layout = self.cfg.vocab;
        let visual: Vec<bool> = targets.iter().map(|&t| layout.is_visual(t)).collect();
        let n_vis = visual.iter().filter(|&&v| v).count();
        let n_text = targets.len() - n_vis;
        let vw = self.cfg.visual_loss_weight;
        let weights: Vec<T> = visual
            .iter()
            .map(|&v| {
                T::lit(if v {
                    vw / n_vis as f64
                } else {
                    1.0 / n_text as f64
                })
            })
            .collect();
        let lse = ctx.tape.logsumexp_rows(logits);
        let picked = ctx.tape.pick(logits, &ids_usize(targets))?;
        let ce = ctx.tape.sub(lse, picked)?;
        let mut total = ctx.tape.dot(ce, weights)?;
        let zw = self.cfg.z_loss_weight;
        let rows = targets.len() as f64;
        if zw > 0.0 {
            let sq = ctx.tape.mul(lse, lse)?;
            let z = ctx.tape.dot(sq, vec![T::lit(zw / rows); targets.len()])?;
            total = ctx.tape.add(total, z)?;
        }
        let ce_v = ctx.tape.value(ce).data();
        let lse_v = ctx.tape.value(lse).data();
        let class_mean = |want: bool, n: usize| {
            if n == 0 {
                0.0
            } else {
                ce_v.iter().zip(&visual).filter(|(_, &v)| v == want).map(|(c, _)| c.as_f64()).sum::<f64>() / n as f64
            }
        };
        let parts = LossParts {
            total: ctx.tape.value(total).data()[0].as_f64(),
            ce_text: class_mean(false, n_text),
            ce_visual: class_mean(true, n_vis),
            z_term: zw * lse_v.iter().map(|l| l.as_f64().powi(2)).sum::<f64>() / rows,
            mean_abs_lse: lse_v.iter().map(|l| l.as_f64().abs()).sum::<f64>() / rows,
        };
        Ok((total, parts))
    }

    /// Forward-only loss of one sequence.
    pub fn evaluate(&self, seq: &MixedSequence) -> Result<LossParts> {
        let mut tape = crate::numerics::Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let logits = self.forward_logits(&mut ctx, seq)?;
        Ok(self.loss(&mut ctx, logits, &seq.targets())?.1)
    }

    /// Raster position of every window-slot index, for placing decoded
    /// windows into a grid.
    pub fn raster_of_slot(&self) -> Result<Vec<usize>> {
        window_index_map(self.cfg.grid_h, self.cfg.grid_w, self.cfg.shuffle.s)
    }

    /// Window-slot index of every raster position.
    pub fn slot_of_raster(&self) -> Result<Vec<usize>> {
        Ok(inverse_map(&self.raster_of_slot()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use crate::vocab::{render, Caption};

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            vocab: VocabLayout::new(16, 40).unwrap(),
            grid_h: 8,
            grid_w: 8,
            ..ModelConfig::desk_default()
        }
    }

    fn toy_sequence(cfg: &ModelConfig, seed: u64) -> MixedSequence {
        let cap = Caption::from_index(7).unwrap();
        let grid = render(&cap, cfg.grid_h, cfg.grid_w, 0.1, &mut Rng::new(seed), &cfg.vocab).unwrap();
        MixedSequence::new(Some(&cap), grid, &cfg.vocab).unwrap()
    }

    #[test]
    fn validation_names_constraints() {
        let bad = ModelConfig { heads: 3, ..toy_config() };
        assert!(bad.validate().unwrap_err().to_string().contains("heads=3"));
        let bad = ModelConfig { grid_h: 7, ..toy_config() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { visual_loss_weight: 0.0, ..toy_config() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fused_length_and_rows() {
        let cfg = toy_config();
        let model = Model::<f64>::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let seq = toy_sequence(&cfg, 2);
        assert_eq!(seq.fused_len(2).unwrap(), 8 + 16 + 2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let x = model.embed_and_fuse(&mut ctx, &seq).unwrap();
        assert_eq!(ctx.tape.shape(x), &[26, 16]);
        let h = model.transformer_forward(&mut ctx, x, 0, None).unwrap();
        let logits = model.unfuse_and_project(&mut ctx, h, &seq).unwrap();
        assert_eq!(ctx.tape.shape(logits), &[7 + 64 + 2, cfg.vocab.total()]);
        assert_eq!(seq.targets().len(), 73);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = toy_config();
        let model = Model::<f64>::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let v = cfg.vocab.total();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let logits = ctx.tape.constant(Tensor::zeros(&[3, v]));
        let targets = [5, cfg.vocab.first_visual(), 1];
        let (_, parts) = model.loss(&mut ctx, logits, &targets).unwrap();
        let ln_v = (v as f64).ln();
        assert!((parts.ce_text - ln_v).abs() < 1e-12);
        assert!((parts.ce_visual - ln_v).abs() < 1e-12);
        assert!((parts.total - 2.0 * ln_v).abs() < 1e-12);
        assert!(model.loss(&mut ctx, logits, &[0, 0, v as TokenId]).is_err());
    }

    #[test]
    fn cache_position_mismatch_is_an_error() {
        let cfg = toy_config();
        let model = Model::<f64>::new(cfg, &mut Rng::new(1)).unwrap();
        let mut cache = KvCache::new();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let x = model.embed(&mut ctx, &[0, 2], false).unwrap();
        model.transformer_forward(&mut ctx, x, 0, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 2);
        let y = model.embed(&mut ctx, &[4], false).unwrap();
        assert!(model.transformer_forward(&mut ctx, y, 5, Some(&mut cache)).is_err());
    }

    #[test]
    fn cached_forward_matches_full_recompute() {
        let cfg = ModelConfig { qk_norm: true, ..toy_config() };
        let model = Model::<f64>::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let ids: Vec<TokenId> = vec![0, 5, 6, 7, 2, 30, 31];
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let x = model.embed(&mut ctx, &ids, false).unwrap();
        let full = model.transformer_forward(&mut ctx, x, 0, None).unwrap();
        let full = ctx.tape.value(full).clone();
        let mut cache = KvCache::new();
        for (i, &id) in ids.iter().enumerate() {
            let x = model.embed(&mut ctx, &[id], false).unwrap();
            let h = model.transformer_forward(&mut ctx, x, i, Some(&mut cache)).unwrap();
            let row = ctx.tape.value(h).row(0);
            for (a, b) in row.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn probe_bounds_rank_input() {
        let cfg = ModelConfig { probe_r: Some(4), ..toy_config() };
        let model = Model::<f64>::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let e = model.probed_visual_embeddings().unwrap();
        assert_eq!(e.shape(), &[40, 16]);
        let bad = ModelConfig { probe_r: Some(3), ..toy_config() };
        assert!(bad.validate().is_err());
    }
}
