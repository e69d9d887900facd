//! Analytic gradients against central finite differences.

use tshf_core::model::{Ctx, MixedSequence, ModelConfig, ParamStore};
use tshf_core::numerics::gradcheck::{max_relative_error, numeric_gradient, numeric_gradient_at};
use tshf_core::numerics::{Tape, Tensor, Var};
use tshf_core::shuffle::{token_shuffle, token_unshuffle, ExtraPe, ShuffleConfig, ShuffleParams};
use tshf_core::vocab::{Caption, VocabLayout};
use tshf_core::{Model, Rng};

const STEP: f64 = 1e-6;
const PRIMITIVE_TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut Rng, a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.symmetric(a))
}

/// Builds `out = f(inputs)` and checks `d(Σ w·out)/d(input)` for every input.
fn check(inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut rng = Rng::new(seed);
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.symmetric(1.0)).collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let l = tape.dot(out, weights.clone()).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
    let out = f(&mut tape, &vars);
    let loss = tape.dot(out, weights.clone()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(x, STEP, |probe| {
            let mut xs = inputs.clone();
            xs[i] = probe.clone();
            eval(&xs)
        });
        let analytic = grads.get(i).unwrap();
        worst = worst.max(max_relative_error(analytic.data(), numeric.data()));
    }
    worst
}

#[test]
fn matmul_gradient() {
    let mut rng = Rng::new(1);
    let err = check(vec![random(&[5, 7], &mut rng, 1.0), random(&[7, 3], &mut rng, 1.0)], 2, |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn sum_of_matmul_has_closed_form_gradient() {
    let mut rng = Rng::new(3);
    let a = random(&[5, 7], &mut rng, 1.0);
    let b = random(&[7, 3], &mut rng, 1.0);
    let mut tape = Tape::new();
    let av = tape.param(0, &a);
    let bv = tape.param(1, &b);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    let expect = Tensor::ones(&[5, 3]).matmul(&b.transpose()).unwrap();
    assert!(g.get(0).unwrap().max_abs_diff(&expect) < 1e-12);
}

#[test]
fn elementwise_gradients() {
    let mut rng = Rng::new(4);
    let a = random(&[4, 6], &mut rng, 2.0);
    let b = random(&[4, 6], &mut rng, 2.0);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let err = check(vec![a.clone(), b.clone()], 5, |t, v| match op {
            0 => t.add(v[0], v[1]).unwrap(),
            1 => t.sub(v[0], v[1]).unwrap(),
            _ => t.mul(v[0], v[1]).unwrap(),
        });
        assert!(err < PRIMITIVE_TOL, "{name}: {err}");
    }
    let err = check(vec![a.clone()], 6, |t, v| t.scale(v[0], -1.7));
    assert!(err < PRIMITIVE_TOL, "scale: {err}");
    let bias = random(&[6], &mut rng, 1.0);
    let err = check(vec![a, bias], 7, |t, v| t.add_row(v[0], v[1]).unwrap());
    assert!(err < PRIMITIVE_TOL, "add_row: {err}");
}

#[test]
fn gelu_gradient() {
    let mut rng = Rng::new(8);
    let err = check(vec![random(&[3, 9], &mut rng, 3.0)], 9, |t, v| t.gelu(v[0]));
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn rms_norm_gradient() {
    let mut rng = Rng::new(10);
    let x = random(&[4, 8], &mut rng, 1.5);
    let g = Tensor::from_fn(&[8], |_| 1.0 + rng.symmetric(0.5));
    let err = check(vec![x, g], 11, |t, v| t.rms_norm(v[0], v[1], 1e-6).unwrap());
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn softmax_and_logsumexp_gradients() {
    let mut rng = Rng::new(12);
    // Moderate logits: components near 1e-6 sit at the finite-difference noise floor.
    let x = random(&[3, 7], &mut rng, 1.0);
    let err = check(vec![x.clone()], 13, |t, v| t.softmax_rows(v[0]));
    assert!(err < PRIMITIVE_TOL, "softmax: {err}");
    let err = check(vec![x], 14, |t, v| t.logsumexp_rows(v[0]));
    assert!(err < PRIMITIVE_TOL, "logsumexp: {err}");
}

#[test]
fn indexing_gradients() {
    let mut rng = Rng::new(15);
    let x = random(&[5, 4], &mut rng, 1.0);
    let err = check(vec![x.clone()], 16, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    assert!(err < PRIMITIVE_TOL, "gather_rows: {err}");
    let err = check(vec![x.clone()], 17, |t, v| t.pick(v[0], &[0, 3, 3, 1, 2]).unwrap());
    assert!(err < PRIMITIVE_TOL, "pick: {err}");
    let err = check(vec![x.clone()], 18, |t, v| t.reshape(v[0], &[10, 2]).unwrap());
    assert!(err < PRIMITIVE_TOL, "reshape: {err}");
    let y = random(&[2, 4], &mut rng, 1.0);
    let err = check(vec![x, y], 19, |t, v| t.concat_rows(&[v[1], v[0], v[1]]).unwrap());
    assert!(err < PRIMITIVE_TOL, "concat: {err}");
}

#[test]
fn attention_gradient() {
    let mut rng = Rng::new(20);
    // Three queries attending over five keys (two cached positions).
    let q = random(&[3, 8], &mut rng, 1.0);
    let k = random(&[5, 8], &mut rng, 1.0);
    let v = random(&[5, 8], &mut rng, 1.0);
    let err = check(vec![q, k, v], 21, |t, v| t.causal_attention(v[0], v[1], v[2], 2).unwrap());
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn rope_gradient() {
    let mut rng = Rng::new(22);
    let x = random(&[4, 8], &mut rng, 1.0);
    let err = check(vec![x], 23, |t, v| t.rope(v[0], 2, &[0, 3, 7, 100], 10000.0).unwrap());
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn reductions_gradients() {
    let mut rng = Rng::new(24);
    let x = random(&[3, 3], &mut rng, 1.0);
    let err = check(vec![x.clone()], 25, |t, v| t.sum(v[0]));
    assert!(err < PRIMITIVE_TOL, "sum: {err}");
    let err = check(vec![x], 26, |t, v| t.dot(v[0], vec![0.5; 9]).unwrap());
    assert!(err < PRIMITIVE_TOL, "dot: {err}");
}

#[test]
fn backward_of_single_parameter_sum_is_ones() {
    let p = Tensor::from_fn(&[6], |i| i as f64);
    let unused = Tensor::ones(&[2, 2]);
    let mut tape = Tape::new();
    let v = tape.param(0, &p);
    tape.param(1, &unused);
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(0).unwrap(), &Tensor::ones(&[6]));
    assert_eq!(g.get(1).unwrap(), &Tensor::zeros(&[2, 2]));
    let bad = tape.backward(v).unwrap_err().to_string();
    assert!(bad.contains("scalar"), "{bad}");
}

#[test]
fn shuffle_unshuffle_composite_gradient() {
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    let cfg = ShuffleConfig {
        extra_pe: ExtraPe::Local,
        ..ShuffleConfig::default()
    };
    let params = ShuffleParams::new(&mut store, cfg, d, 4, &mut Rng::new(30)).unwrap();
    let x = random(&[16, d], &mut Rng::new(31), 1.0);
    let weights: Vec<f64> = {
        let mut r = Rng::new(32);
        (0..16 * d).map(|_| r.symmetric(1.0)).collect()
    };
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> (f64, Option<tshf_core::Gradients>) {
        let mut tape = Tape::new();
        let xv = tape.param(store.len(), x);
        let mut ctx = Ctx::new(&mut tape, store);
        let f = token_shuffle(&mut ctx, &params, xv, 4, 4).unwrap();
        let u = token_unshuffle(&mut ctx, &params, f, 4, 4).unwrap();
        let l = ctx.tape.dot(u, weights.clone()).unwrap();
        let v = ctx.tape.value(l).data()[0];
        (v, Some(tape.backward(l).unwrap()))
    };
    let (_, grads) = eval(&store, &x);
    let grads = grads.unwrap();
    let numeric = numeric_gradient(&x, STEP, |p| eval(&store, p).0);
    let err = max_relative_error(grads.get(store.len()).unwrap().data(), numeric.data());
    assert!(err < 1e-4, "input: {err}");
    for id in 0..store.len() {
        let t = store.get(id).clone();
        let coords: Vec<usize> = (0..t.len()).step_by(7).collect();
        let numeric = numeric_gradient_at(&t, &coords, STEP, |p| {
            let mut s = store.clone();
            *s.get_mut(id) = p.clone();
            eval(&s, &x).0
        });
        let analytic: Vec<f64> = coords.iter().map(|&c| grads.get(id).unwrap().data()[c]).collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

fn toy_model(qk_norm: bool, z: f64) -> (Model, MixedSequence) {
    let cfg = ModelConfig {
        d: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2,
        qk_norm,
        z_loss_weight: z,
        vocab: VocabLayout::new(16, 40).unwrap(),
        grid_h: 4,
        grid_w: 4,
        shuffle: ShuffleConfig {
            extra_pe: ExtraPe::Global,
            ..ShuffleConfig::default()
        },
        ..ModelConfig::desk_default()
    };
    let model = Model::new(cfg.clone(), &mut Rng::new(40)).unwrap();
    let caption = Caption::from_index(3).unwrap();
    // 4x4 grids are below the render family minimum; build ids directly.
    let mut rng = Rng::new(41);
    let ids = (0..16).map(|_| cfg.vocab.visual_id(rng.below(40))).collect();
    let grid = tshf_core::vocab::TokenGrid::new(4, 4, ids, &cfg.vocab).unwrap();
    let seq = MixedSequence::new(Some(&caption), grid, &cfg.vocab).unwrap();
    (model, seq)
}

fn loss_of(model: &Model, seq: &MixedSequence) -> f64 {
    model.evaluate(seq).unwrap().total
}

#[test]
fn end_to_end_model_gradient() {
    for (qk, z) in [(false, 0.0), (true, 1e-2)] {
        let (model, seq) = toy_model(qk, z);
        let (_, grads) = model.loss_and_grads(&seq).unwrap();
        // 50 coordinates spread over every parameter array.
        let mut rng = Rng::new(42);
        let total = model.params.len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for k in 0..50 {
            let id = k % total;
            let t = model.params.get(id).clone();
            let c = rng.below(t.len());
            analytic.push(grads[id].data()[c]);
            numeric.extend(numeric_gradient_at(&t, &[c], 1e-5, |p| {
                let mut m = model.clone();
                *m.params.get_mut(id) = p.clone();
                loss_of(&m, &seq)
            }));
        }
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "qk_norm={qk}: {err}");
    }
}

#[test]
fn loss_gradient_against_logits() {
    let (model, _) = toy_model(false, 1e-2);
    let v = model.cfg.vocab.total();
    let logits = random(&[5, v], &mut Rng::new(50), 2.0);
    let targets = [4, 2, model.cfg.vocab.first_visual(), model.cfg.vocab.first_visual() + 3, 1];
    let eval = |l: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let lv = ctx.tape.constant(l.clone());
        let (total, _) = model.loss(&mut ctx, lv, &targets).unwrap();
        ctx.tape.value(total).data()[0]
    };
    let mut tape = Tape::new();
    let lv = tape.param(model.params.len(), &logits);
    let mut ctx = Ctx::new(&mut tape, &model.params);
    let (total, _) = model.loss(&mut ctx, lv, &targets).unwrap();
    let g = tape.backward(total).unwrap();
    let numeric = numeric_gradient(&logits, STEP, eval);
    let err = max_relative_error(g.get(model.params.len()).unwrap().data(), numeric.data());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn z_loss_gradient_is_nonzero() {
    let grad_for = |z: f64| {
        let (model, _) = toy_model(false, z);
        let v = model.cfg.vocab.total();
        let logits = Tensor::from_fn(&[2, v], |i| (i % 3) as f64);
        let mut tape = Tape::new();
        let lv = tape.param(model.params.len(), &logits);
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let (total, _) = model.loss(&mut ctx, lv, &[5, 1]).unwrap();
        tape.backward(total).unwrap().get(model.params.len()).unwrap().clone()
    };
    let with = grad_for(1e-5);
    let without = grad_for(0.0);
    assert!(with.data().iter().zip(without.data()).all(|(a, b)| a != b));
}

#[test]
fn backward_is_deterministic() {
    let (model, seq) = toy_model(true, 1e-5);
    let a = model.loss_and_grads(&seq).unwrap();
    let b = model.loss_and_grads(&seq).unwrap();
    assert_eq!(a, b);
}
