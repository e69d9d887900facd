use tshf_core::model::{Ctx, MixedSequence, ModelConfig};
use tshf_core::numerics::{Tape, Tensor};
use tshf_core::sampler::{generate, CfgSchedule, DecodeOpts, ScheduleKind};
use tshf_core::shuffle::{ExtraPe, ShuffleConfig, Variant};
use tshf_core::vocab::{Caption, TokenGrid, VocabLayout};
use tshf_core::{Model, Rng};

fn config(h: usize, w: usize, s: usize) -> ModelConfig {
    ModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        vocab: VocabLayout::new(16, 40).unwrap(),
        grid_h: h,
        grid_w: w,
        shuffle: ShuffleConfig { s, ..ShuffleConfig::default() },
        ..ModelConfig::desk_default()
    }
}

fn random_grid(cfg: &ModelConfig, rng: &mut Rng) -> TokenGrid {
    let v = cfg.vocab.visual_size();
    let ids = (0..cfg.grid_h * cfg.grid_w).map(|_| cfg.vocab.visual_id(rng.below(v))).collect();
    TokenGrid::new(cfg.grid_h, cfg.grid_w, ids, &cfg.vocab).unwrap()
}

fn logits(model: &Model, seq: &MixedSequence) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params);
    let l = model.forward_logits(&mut ctx, seq).unwrap();
    ctx.tape.value(l).clone()
}

#[test]
fn logit_rows_equal_targets_for_every_shape() {
    for (h, w, s) in [(4, 4, 1), (4, 4, 2), (4, 8, 2), (8, 4, 4), (8, 8, 4), (6, 4, 2)] {
        let cfg = config(h, w, s);
        let model = Model::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let grid = random_grid(&cfg, &mut Rng::new(2));
        for caption in [Some(Caption::from_index(4).unwrap()), None] {
            let seq = MixedSequence::new(caption.as_ref(), grid.clone(), &cfg.vocab).unwrap();
            let l = logits(&model, &seq);
            let p = seq.prefix.len();
            assert_eq!(l.rows(), (p - 1) + h * w + 2, "{h}x{w} s={s}");
            assert_eq!(l.rows(), seq.targets().len());
        }
    }
}

#[test]
fn fused_length_example() {
    let cfg = config(16, 16, 2);
    let grid = random_grid(&cfg, &mut Rng::new(0));
    let seq = MixedSequence {
        prefix: vec![0; 8],
        grid,
        suffix: vec![3, 1],
    };
    assert_eq!(seq.fused_len(2).unwrap(), 74);
}

#[test]
fn s1_bypass_embedding_is_plain_lookup() {
    let cfg = ModelConfig {
        shuffle: ShuffleConfig {
            s: 1,
            bypass_mlp: true,
            ..ShuffleConfig::default()
        },
        ..config(4, 4, 1)
    };
    let model = Model::new(cfg.clone(), &mut Rng::new(3)).unwrap();
    let grid = random_grid(&cfg, &mut Rng::new(4));
    let seq = MixedSequence::new(Some(&Caption::from_index(0).unwrap()), grid.clone(), &cfg.vocab).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params);
    let x = model.embed_and_fuse(&mut ctx, &seq).unwrap();
    let table = model.params.get(model.params.id_of("embed").unwrap());
    let ids: Vec<u32> = seq.prefix.iter().chain(grid.ids()).chain(&seq.suffix).copied().collect();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(ctx.tape.value(x).row(r), table.row(id as usize));
    }
}

#[test]
fn each_hidden_state_feeds_exactly_its_rows() {
    let cfg = config(8, 8, 2);
    let model = Model::new(cfg.clone(), &mut Rng::new(5)).unwrap();
    let seq = MixedSequence::new(Some(&Caption::from_index(9).unwrap()), random_grid(&cfg, &mut Rng::new(6)), &cfg.vocab).unwrap();
    let n = seq.fused_len(2).unwrap();
    let mut rng = Rng::new(7);
    let h = Tensor::from_fn(&[n, cfg.d], |_| rng.symmetric(1.0));
    let project = |h: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let hv = ctx.tape.constant(h.clone());
        let l = model.unfuse_and_project(&mut ctx, hv, &seq).unwrap();
        ctx.tape.value(l).clone()
    };
    let base = project(&h);
    let sources = seq.source_positions(2).unwrap();
    for pos in 0..n - 1 {
        let mut z = h.clone();
        z.row_mut(pos).iter_mut().for_each(|v| *v = 0.0);
        let out = project(&z);
        let changed: Vec<bool> = (0..base.rows()).map(|r| base.row(r) != out.row(r)).collect();
        for (r, &c) in changed.iter().enumerate() {
            assert_eq!(c, sources[r] == pos, "position {pos}, row {r}");
        }
        let p = seq.prefix.len();
        if (p - 1..p - 1 + 16).contains(&pos) {
            assert_eq!(changed.iter().filter(|&&c| c).count(), 4);
        }
    }
}

#[test]
fn fused_causality_is_exact() {
    let mut rng = Rng::new(8);
    for trial in 0..10 {
        let qk = trial % 2 == 0;
        let cfg = ModelConfig { qk_norm: qk, ..config(8, 8, 2) };
        let model = Model::new(cfg.clone(), &mut rng.fork(trial)).unwrap();
        let grid = random_grid(&cfg, &mut rng);
        let seq = MixedSequence::new(Some(&Caption::from_index(trial as usize).unwrap()), grid, &cfg.vocab).unwrap();
        let base = logits(&model, &seq);
        let window = rng.below(16);
        let mut ids = seq.grid.ids().to_vec();
        let raster = model.raster_of_slot().unwrap();
        for slot in 0..4 {
            let r = raster[window * 4 + slot];
            ids[r] = cfg.vocab.visual_id((cfg.vocab.visual_index(ids[r]).unwrap() + 1) % 40);
        }
        let perturbed = MixedSequence {
            grid: TokenGrid::new(8, 8, ids, &cfg.vocab).unwrap(),
            ..seq.clone()
        };
        let out = logits(&model, &perturbed);
        let j = seq.prefix.len() + window;
        let sources = seq.source_positions(2).unwrap();
        for (r, &src) in sources.iter().enumerate() {
            if src < j {
                assert_eq!(base.row(r), out.row(r), "trial {trial}, row {r}");
            }
        }
        assert_ne!(base.row(sources.len() - 1), out.row(sources.len() - 1));
    }
}

#[test]
fn single_position_ignores_mask() {
    let cfg = config(4, 4, 2);
    let model = Model::new(cfg, &mut Rng::new(9)).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params);
    let x = model.embed(&mut ctx, &[0], false).unwrap();
    let h = model.transformer_forward(&mut ctx, x, 0, None).unwrap();
    assert!(ctx.tape.value(h).is_finite());
    assert_eq!(ctx.tape.shape(h), &[1, 16]);
}

#[test]
fn qk_norm_changes_values_not_shapes() {
    let base = config(8, 8, 2);
    let seq = MixedSequence::new(Some(&Caption::from_index(2).unwrap()), random_grid(&base, &mut Rng::new(10)), &base.vocab).unwrap();
    let a = logits(&Model::new(base.clone(), &mut Rng::new(11)).unwrap(), &seq);
    let b = logits(&Model::new(ModelConfig { qk_norm: true, ..base }, &mut Rng::new(11)).unwrap(), &seq);
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn cached_generation_equals_full_recompute() {
    for (variant, pe) in [(Variant::Shuffle, ExtraPe::Global), (Variant::Drop, ExtraPe::Local), (Variant::Simple, ExtraPe::None)] {
        let cfg = ModelConfig {
            qk_norm: true,
            shuffle: ShuffleConfig {
                variant,
                extra_pe: pe,
                ..ShuffleConfig::default()
            },
            ..config(8, 8, 2)
        };
        let model = Model::new(cfg.clone(), &mut Rng::new(12)).unwrap();
        let caption = Caption::from_index(17).unwrap();
        let sched = CfgSchedule::new(ScheduleKind::HalfLinear, 3.0);
        let cached = generate(&model, &caption, &sched, &DecodeOpts::default(), 5).unwrap();
        let full_opts = DecodeOpts {
            full_recompute: true,
            ..DecodeOpts::default()
        };
        let full = generate(&model, &caption, &sched, &full_opts, 5).unwrap();
        assert_eq!(cached.grid, full.grid);
        assert_eq!(cached.trace.len(), 16);
        for (a, b) in cached.logits.iter().zip(&full.logits) {
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_in_band() {
    let cfg = config(8, 8, 2);
    let model = Model::new(cfg.clone(), &mut Rng::new(13)).unwrap();
    let caption = Caption::from_index(33).unwrap();
    let sched = CfgSchedule::new(ScheduleKind::Constant, 1.0);
    let a = generate(&model, &caption, &sched, &DecodeOpts::default(), 6).unwrap();
    let b = generate(&model, &caption, &sched, &DecodeOpts::default(), 6).unwrap();
    assert_eq!(a, b);
    assert!(a.grid.ids().iter().all(|&id| cfg.vocab.is_visual(id)));
    assert!(a.trace.iter().all(|t| t.max_guidance_shift == 0.0));
}

#[test]
fn prompt_drop_rate_is_binomial() {
    let mut rng = Rng::new(14);
    let n = (0..10_000).filter(|_| rng.bernoulli(0.1)).count();
    assert!((900..=1100).contains(&n), "{n}");
}
