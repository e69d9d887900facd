use super::{Ctx, LossParts, MixedSequence, Model};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor};
use crate::vocab::{Caption, TokenGrid};

/// One caption/grid pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub caption: Caption,
    pub grid: TokenGrid,
}

/// AdamW with decoupled weight decay on matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    /// β₁=0.9, β₂=0.95, weight decay 0.1, clip 1.0.
    pub fn new(params: &super::ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    /// Clips `grads` to the global norm limit and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut super::ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<f64> {
        ensure!(
            grads.len() == params.len() && self.m.len() == params.len(),
            "optimizer holds {} slots, params {}, grads {}",
            self.m.len(),
            params.len(),
            grads.len()
        );
        let norm = grads.iter().map(|g| g.norm_sq().as_f64()).sum::<f64>().sqrt();
        let clip = if norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let (eps, lr_t, clip) = (T::lit(self.eps), T::lit(lr), T::lit(clip));
        for (id, g) in grads.iter().enumerate() {
            let decay = if params.get(id).shape().len() >= 2 {
                T::lit(self.weight_decay)
            } else {
                T::zero()
            };
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps) + decay * p[i];
                p[i] -= lr_t * update;
            }
        }
        Ok(norm)
    }
}

/// Metrics of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub total: f64,
    pub ce_text: f64,
    pub ce_visual: f64,
    pub z_term: f64,
    pub grad_norm: f64,
    pub mean_abs_lse: f64,
    /// Batch elements that used the unconditional form.
    pub dropped: usize,
}

type ExampleResult<T> = Result<(LossParts, Vec<Tensor<T>>)>;

impl<T: Scalar> Model<T> {
    /// Loss and dense gradients (registration order) of one sequence.
    pub fn loss_and_grads(&self, seq: &MixedSequence) -> ExampleResult<T> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let logits = self.forward_logits(&mut ctx, seq)?;
        let (loss, parts) = self.loss(&mut ctx, logits, &seq.targets())?;
        let mut map = tape.backward(loss)?.into_map();
        let grads = self
            .params
            .iter()
            .map(|(id, _, t)| map.remove(&id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((parts, grads))
    }

    /// Gradient norm per top-level parameter group (`embed`, `layer0`, ...).
    pub fn grad_norms_by_group(&self, grads: &[Tensor<T>]) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for ((_, name, _), g) in self.params.iter().zip(grads) {
            let group = name.split('.').next().unwrap_or(name).to_string();
            let sq = g.norm_sq().as_f64();
            match out.last_mut() {
                Some((n, acc)) if *n == group => *acc += sq,
                _ => out.push((group, sq)),
            }
        }
        out.into_iter().map(|(n, s)| (n, s.sqrt())).collect()
    }

    /// Forward, loss, backward and one AdamW update on `batch`.
    ///
    /// Each element independently takes the unconditional form with
    /// probability `prompt_drop`, drawn from `rng` in batch order. Element
    /// gradients are computed on up to `threads` workers and summed in batch
    /// order, so results do not depend on the thread count.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW<T>,
        batch: &[Example],
        lr: f64,
        prompt_drop: f64,
        rng: &mut Rng,
        threads: usize,
    ) -> Result<StepMetrics> {
        ensure!(!batch.is_empty(), "empty batch");
        let layout = self.cfg.vocab;
        let mut seqs = Vec::with_capacity(batch.len());
        let mut dropped = 0;
        for ex in batch {
            let drop = rng.bernoulli(prompt_drop);
            dropped += drop as usize;
            let caption = if drop { None } else { Some(&ex.caption) };
            seqs.push(MixedSequence::new(caption, ex.grid.clone(), &layout)?);
        }
        let results = self.per_example(&seqs, threads.max(1));
        let n = T::lit(batch.len() as f64);
        let mut sum: Option<Vec<Tensor<T>>> = None;
        let mut metrics = StepMetrics {
            dropped,
            ..StepMetrics::default()
        };
        for r in results {
            let (parts, grads) = r?;
            metrics.total += parts.total;
            metrics.ce_text += parts.ce_text;
            metrics.ce_visual += parts.ce_visual;
            metrics.z_term += parts.z_term;
            metrics.mean_abs_lse += parts.mean_abs_lse;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let b = batch.len() as f64;
        metrics.total /= b;
        metrics.ce_text /= b;
        metrics.ce_visual /= b;
        metrics.z_term /= b;
        metrics.mean_abs_lse /= b;
        let mut grads = sum.expect("non-empty batch");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        if !metrics.total.is_finite() {
            let dump = self
                .grad_norms_by_group(&grads)
                .iter()
                .map(|(n, g)| format!("{n}={g:.4e}"))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::NonFinite(format!(
                "loss {} at optimizer step {}; grad norms: {dump}",
                metrics.total,
                opt.t + 1
            )));
        }
        metrics.grad_norm = opt.step(&mut self.params, &grads, lr)?;
        Ok(metrics)
    }

    fn per_example(&self, seqs: &[MixedSequence], threads: usize) -> Vec<ExampleResult<T>> {
        if threads == 1 || seqs.len() == 1 {
            return seqs.iter().map(|s| self.loss_and_grads(s)).collect();
        }
        let chunk = seqs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seqs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.loss_and_grads(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    }
}
