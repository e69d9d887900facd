//! Invariant checks shared by the `selftest` subcommand and the acceptance
//! suite. Each returns measurements; callers decide pass or fail.

use tshf_core::model::{Ctx, MixedSequence, ModelConfig, ParamStore};
use tshf_core::numerics::gradcheck::{max_relative_error, numeric_gradient, numeric_gradient_at};
use tshf_core::numerics::{Tape, Tensor, Var};
use tshf_core::sampler::{generate, guided_logits, CfgSchedule, DecodeOpts, ScheduleKind};
use tshf_core::shuffle::{token_shuffle, token_unshuffle, window_index_map, ExtraPe, ShuffleConfig, ShuffleParams, Variant};
use tshf_core::vocab::{Caption, TokenGrid, VocabLayout, NUM_CAPTIONS};
use tshf_core::{Model, Rng};

use crate::error::{HarnessError, Result};

const FD_STEP: f64 = 1e-6;

fn fail(msg: String) -> HarnessError {
    HarnessError::Runtime(msg)
}

/// Fused visual length of every variant over a grid of shapes, plus the
/// 64x64 at s=2 full case. Returns the number of cases checked.
pub fn token_count_law() -> Result<usize> {
    let mut cases = 0;
    for s in [1, 2, 4] {
        for a in 1..=4 {
            for b in 1..=4 {
                let (h, w) = (a * s, b * s);
                let d = 2 * s * s;
                for variant in [Variant::Shuffle, Variant::Drop, Variant::Simple] {
                    let mut store = ParamStore::<f64>::new();
                    let cfg = ShuffleConfig {
                        s,
                        variant,
                        n_blocks: 1,
                        ..ShuffleConfig::default()
                    };
                    let p = ShuffleParams::new(&mut store, cfg, d, h * w / (s * s), &mut Rng::new(cases as u64))?;
                    let mut tape = Tape::new();
                    let mut ctx = Ctx::new(&mut tape, &store);
                    let x = ctx.tape.constant(Tensor::from_fn(&[h * w, d], |i| (i as f64).sin()));
                    let fused = p.fuse_grid(&mut ctx, x, h, w)?;
                    let got = ctx.tape.shape(fused)[0];
                    if got != h * w / (s * s) || cfg.fused_len(h, w)? != got {
                        return Err(fail(format!("{h}x{w} s={s} {}: {got} fused tokens", variant.name())));
                    }
                    cases += 1;
                }
            }
        }
    }
    let full = ShuffleConfig::default().fused_len(64, 64)?;
    if full != 1024 {
        return Err(fail(format!("64x64 at s=2 fuses to {full}, not 1024")));
    }
    Ok(cases + 1)
}

/// Random bypass-mode shuffle/unshuffle round trips with s in {1,2,4},
/// grids up to 32x32 and d up to 256. Every token must get back its own
/// channel slice bit for bit, and zeros elsewhere (all of `x` when s=1).
pub fn bypass_round_trip(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = Rng::new(seed);
    for trial in 0..trials {
        let s = [1, 2, 4][trial % 3];
        let h = s * (1 + rng.below(32 / s));
        let w = s * (1 + rng.below(32 / s));
        let d = s * s * (1 + rng.below(256 / (s * s)));
        let mut store = ParamStore::<f64>::new();
        let cfg = ShuffleConfig {
            s,
            bypass_mlp: true,
            ..ShuffleConfig::default()
        };
        let p = ShuffleParams::new(&mut store, cfg, d, h * w / (s * s), &mut rng.fork(trial as u64))?;
        let x = Tensor::from_fn(&[h * w, d], |_| rng.symmetric(1e3) * rng.uniform().powi(8));
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let xv = ctx.tape.constant(x.clone());
        let f = token_shuffle(&mut ctx, &p, xv, h, w)?;
        let u = token_unshuffle(&mut ctx, &p, f, h, w)?;
        let uv = ctx.tape.value(u);
        let chunk = d / (s * s);
        for (k, &r) in window_index_map(h, w, s)?.iter().enumerate() {
            let slot = k % (s * s);
            for q in 0..d {
                let expect = if q / chunk == slot { x.row(r)[q] } else { 0.0 };
                if uv.row(r)[q].to_bits() != expect.to_bits() {
                    return Err(fail(format!("trial {trial}: {h}x{w} s={s} d={d} token {r} channel {q}")));
                }
            }
        }
    }
    Ok(trials)
}

fn random(shape: &[usize], rng: &mut Rng, a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.symmetric(a))
}

type Op = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> tshf_core::Result<Var>;

/// Worst relative error of `d(Σ w·f(inputs))/d(input)` over all inputs.
fn primitive_error(inputs: &[Tensor<f64>], seed: u64, f: &Op) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.symmetric(1.0)).collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("shapes already checked");
        let l = tape.dot(out, weights.clone()).expect("length already checked");
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.dot(out, weights.clone())?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(x, FD_STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            eval(&xs)
        });
        let analytic = grads.get(i).ok_or_else(|| fail(format!("no gradient for input {i}")))?;
        worst = worst.max(max_relative_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// Finite-difference relative error of every differentiable tape primitive.
pub fn primitive_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(1);
    let a = random(&[4, 6], &mut rng, 2.0);
    let b = random(&[4, 6], &mut rng, 2.0);
    let m1 = random(&[5, 7], &mut rng, 1.0);
    let m2 = random(&[7, 3], &mut rng, 1.0);
    let bias = random(&[6], &mut rng, 1.0);
    let g3 = random(&[3, 9], &mut rng, 3.0);
    let x48 = random(&[4, 8], &mut rng, 1.5);
    let gain = Tensor::from_fn(&[8], |_| 1.0 + rng.symmetric(0.5));
    let sm = random(&[3, 7], &mut rng, 1.0);
    let x54 = random(&[5, 4], &mut rng, 1.0);
    let x24 = random(&[2, 4], &mut rng, 1.0);
    let q = random(&[3, 8], &mut rng, 1.0);
    let k = random(&[5, 8], &mut rng, 1.0);
    let v = random(&[5, 8], &mut rng, 1.0);
    let r = random(&[4, 8], &mut rng, 1.0);
    let x33 = random(&[3, 3], &mut rng, 1.0);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Box<Op>)> = vec![
        ("matmul", vec![m1, m2], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_row", vec![a, bias], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("gelu", vec![g3], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("rms_norm", vec![x48, gain], Box::new(|t, v| t.rms_norm(v[0], v[1], 1e-6))),
        ("softmax_rows", vec![sm.clone()], Box::new(|t, v| Ok(t.softmax_rows(v[0])))),
        ("logsumexp_rows", vec![sm], Box::new(|t, v| Ok(t.logsumexp_rows(v[0])))),
        ("gather_rows", vec![x54.clone()], Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))),
        ("pick", vec![x54.clone()], Box::new(|t, v| t.pick(v[0], &[0, 3, 3, 1, 2]))),
        ("reshape", vec![x54.clone()], Box::new(|t, v| t.reshape(v[0], &[10, 2]))),
        ("concat_rows", vec![x54, x24], Box::new(|t, v| t.concat_rows(&[v[1], v[0], v[1]]))),
        ("causal_attention", vec![q, k, v], Box::new(|t, v| t.causal_attention(v[0], v[1], v[2], 2))),
        ("rope", vec![r], Box::new(|t, v| t.rope(v[0], 2, &[0, 3, 7, 100], 10000.0))),
        ("sum", vec![x33.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("dot", vec![x33], Box::new(|t, v| t.dot(v[0], vec![0.5; 9]))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| Ok((name, primitive_error(&inputs, 100 + i as u64, op.as_ref())?)))
        .collect()
}

/// Two-layer d=32 model on a 4x4 grid; relative error over `coords`
/// parameter coordinates spread across every array.
pub fn end_to_end_gradient_error(qk_norm: bool, z_loss_weight: f64, coords: usize) -> Result<f64> {
    let cfg = ModelConfig {
        d: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2,
        qk_norm,
        z_loss_weight,
        vocab: VocabLayout::new(16, 40)?,
        grid_h: 4,
        grid_w: 4,
        shuffle: ShuffleConfig {
            extra_pe: ExtraPe::Global,
            ..ShuffleConfig::default()
        },
        ..ModelConfig::desk_default()
    };
    let model = Model::new(cfg.clone(), &mut Rng::new(40))?;
    let mut rng = Rng::new(41);
    let ids = (0..16).map(|_| cfg.vocab.visual_id(rng.below(40))).collect();
    let grid = TokenGrid::new(4, 4, ids, &cfg.vocab)?;
    let seq = MixedSequence::new(Some(&Caption::from_index(3).expect("in range")), grid, &cfg.vocab)?;
    let (_, grads) = model.loss_and_grads(&seq)?;
    let total = model.params.len();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for k in 0..coords {
        let id = k % total;
        let t = model.params.get(id).clone();
        let c = rng.below(t.len());
        analytic.push(grads[id].data()[c]);
        numeric.extend(numeric_gradient_at(&t, &[c], 1e-5, |p| {
            let mut m = model.clone();
            *m.params.get_mut(id) = p.clone();
            m.evaluate(&seq).map_or(f64::NAN, |l| l.total)
        }));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

fn small_model(rng: &mut Rng, trial: usize) -> Result<Model> {
    let variant = [Variant::Shuffle, Variant::Drop, Variant::Simple][trial % 3];
    let extra_pe = [ExtraPe::None, ExtraPe::Local, ExtraPe::Global][(trial / 3) % 3];
    let cfg = ModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        qk_norm: trial.is_multiple_of(2),
        vocab: VocabLayout::new(16, 40)?,
        grid_h: 8,
        grid_w: 8,
        shuffle: ShuffleConfig {
            s: if trial % 4 == 3 { 4 } else { 2 },
            variant,
            extra_pe,
            ..ShuffleConfig::default()
        },
        ..ModelConfig::desk_default()
    };
    Ok(Model::new(cfg, &mut rng.fork(trial as u64))?)
}

fn logits(model: &Model, seq: &MixedSequence) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params);
    let l = model.forward_logits(&mut ctx, seq)?;
    Ok(ctx.tape.value(l).clone())
}

/// Largest logit change, over `pairs` random (model, position) pairs, at
/// rows whose hidden state sits before the perturbed fused position.
pub fn causality_violation(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..pairs {
        let model = small_model(&mut rng, trial)?;
        let cfg = &model.cfg;
        let layout = cfg.vocab;
        let s = cfg.shuffle.s;
        let ids = (0..64).map(|_| layout.visual_id(rng.below(40))).collect();
        let caption = Caption::from_index(rng.below(NUM_CAPTIONS)).expect("in range");
        let seq = MixedSequence::new(Some(&caption), TokenGrid::new(8, 8, ids, &layout)?, &layout)?;
        let p = seq.prefix.len();
        let m = 64 / (s * s);
        let j = rng.below(p + m + 1);
        let mut pert = seq.clone();
        if j < p {
            while pert.prefix[j] == seq.prefix[j] {
                pert.prefix[j] = layout.text_id(rng.below(16));
            }
        } else if j < p + m {
            let raster = model.raster_of_slot()?;
            let mut ids = seq.grid.ids().to_vec();
            for slot in 0..s * s {
                let r = raster[(j - p) * s * s + slot];
                let k = layout.visual_index(ids[r]).expect("visual");
                ids[r] = layout.visual_id((k + 1 + rng.below(39)) % 40);
            }
            pert.grid = TokenGrid::new(8, 8, ids, &layout)?;
        } else {
            pert.suffix[0] = layout.text_id(5);
        }
        let (a, b) = (logits(&model, &seq)?, logits(&model, &pert)?);
        let sources = seq.source_positions(s)?;
        let mut changed_after = false;
        for (r, &src) in sources.iter().enumerate() {
            let diff = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if src < j {
                worst = worst.max(diff);
            } else if diff > 0.0 {
                changed_after = true;
            }
        }
        if !changed_after {
            return Err(fail(format!("trial {trial}: perturbing position {j} changed nothing")));
        }
    }
    Ok(worst)
}

/// `(all token ids equal, largest logit gap)` between cached and full
/// recompute decoding over `n` seeded generations.
pub fn kv_cache_fidelity(n: usize, seed: u64) -> Result<(bool, f64)> {
    let mut rng = Rng::new(seed);
    let (mut same, mut worst) = (true, 0.0f64);
    for trial in 0..n {
        let model = small_model(&mut rng, trial)?;
        let caption = Caption::from_index(rng.below(NUM_CAPTIONS)).expect("in range");
        let kind = ScheduleKind::ALL[trial % 3];
        let schedule = CfgSchedule::new(kind, 1.0 + 6.5 * rng.uniform());
        let opts = DecodeOpts::default();
        let gen_seed = rng.next_u64();
        let cached = generate(&model, &caption, &schedule, &opts, gen_seed)?;
        let full = generate(
            &model,
            &caption,
            &schedule,
            &DecodeOpts {
                full_recompute: true,
                ..opts
            },
            gen_seed,
        )?;
        same &= cached.grid == full.grid;
        for (a, b) in cached.logits.iter().zip(&full.logits) {
            worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
    }
    Ok((same, worst))
}

/// Exact identities of the guidance combination and the schedules.
pub fn cfg_algebra(seed: u64) -> Result<()> {
    let mut rng = Rng::new(seed);
    for _ in 0..100 {
        let c: Vec<f64> = (0..50).map(|_| rng.symmetric(20.0)).collect();
        let u: Vec<f64> = (0..50).map(|_| rng.symmetric(20.0)).collect();
        if guided_logits(&c, &u, 1.0)? != c {
            return Err(fail("alpha=1 must return the conditional logits".into()));
        }
        if guided_logits(&c, &u, 0.0)? != u {
            return Err(fail("alpha=0 must return the unconditional logits".into()));
        }
        let alpha = rng.symmetric(10.0);
        let g = guided_logits(&c, &u, alpha)?;
        for i in 0..50 {
            let expect = u[i] + alpha * (c[i] - u[i]);
            if (g[i] - expect).abs() > 1e-12 * (1.0 + expect.abs()) {
                return Err(fail(format!("affine form off by {} at alpha={alpha}", g[i] - expect)));
            }
        }
    }
    for kind in ScheduleKind::ALL {
        for n in [1, 2, 7, 64, 256] {
            let sched = CfgSchedule::new(kind, 7.5);
            let v: Vec<f64> = (0..n).map(|i| sched.scale_at(i, n)).collect::<tshf_core::Result<_>>()?;
            if v.windows(2).any(|w| w[1] < w[0]) {
                return Err(fail(format!("{} schedule decreases at n={n}", kind.name())));
            }
            if v[n - 1] != 7.5 {
                return Err(fail(format!("{} schedule ends at {} for n={n}", kind.name(), v[n - 1])));
            }
            let ramp = match kind {
                ScheduleKind::Constant => 0,
                ScheduleKind::Linear => n,
                ScheduleKind::HalfLinear => n.div_ceil(2),
            };
            if ramp >= 2 && v[0] != 1.0 {
                return Err(fail(format!("{} schedule starts at {} for n={n}", kind.name(), v[0])));
            }
            if v.iter().any(|&a| !(1.0..=7.5).contains(&a)) {
                return Err(fail(format!("{} schedule leaves [1, 7.5]", kind.name())));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn record(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// The invariant suite at reduced trial counts.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        record("token-count law", token_count_law().map(|n| (true, format!("{n} cases")))),
        record("bypass round trip", bypass_round_trip(30, 0).map(|n| (true, format!("{n} trials")))),
        record(
            "primitive gradients",
            primitive_gradient_errors().map(|v| {
                let (name, worst) = v.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
                (worst < 1e-6, format!("worst {name} {worst:.2e}"))
            }),
        ),
        record(
            "end-to-end gradient",
            end_to_end_gradient_error(true, 1e-2, 20).map(|e| (e < 1e-4, format!("{e:.2e}"))),
        ),
        record("fused causality", causality_violation(10, 0).map(|e| (e <= 1e-12, format!("max change {e:.1e}")))),
        record(
            "kv-cache fidelity",
            kv_cache_fidelity(4, 0).map(|(same, gap)| (same && gap < 1e-10, format!("ids equal {same}, gap {gap:.1e}"))),
        ),
        record("cfg algebra", cfg_algebra(0).map(|()| (true, "exact".into()))),
    ]
}
