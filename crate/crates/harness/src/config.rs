//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use tshf_core::model::ModelConfig;
use tshf_core::sampler::{CfgSchedule, DecodeOpts, ScheduleKind};
use tshf_core::shuffle::{ExtraPe, ShuffleConfig, Variant};
use tshf_core::vocab::{VocabLayout, WORDS};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub qk_norm: bool,
    pub z_loss_weight: f64,
    pub visual_loss_weight: f64,
    // vocabulary and grid
    pub text_size: usize,
    pub visual_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    // shuffle
    pub s: usize,
    pub n_blocks: usize,
    pub variant: Variant,
    pub extra_pe: ExtraPe,
    pub bypass_mlp: bool,
    /// 0 means `d`.
    pub block_hidden: usize,
    /// 0 disables the redundancy probe.
    pub probe_r: usize,
    // sampling
    pub alpha_max: f64,
    pub cfg_schedule: ScheduleKind,
    pub temperature: f64,
    pub top_k: usize,
    // run
    pub dataset: String,
    pub out_dir: String,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    // optimization
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup_steps: u64,
    /// Horizon of the cosine decay; 0 means `steps`.
    pub decay_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub prompt_drop: f64,
    // data and logging
    pub noise_p: f64,
    pub dataset_size: usize,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            rope_base: 10000.0,
            qk_norm: false,
            z_loss_weight: 0.0,
            visual_loss_weight: 1.0,
            text_size: 64,
            visual_size: 512,
            grid_h: 16,
            grid_w: 16,
            s: 2,
            n_blocks: 2,
            variant: Variant::Shuffle,
            extra_pe: ExtraPe::None,
            bypass_mlp: false,
            block_hidden: 0,
            probe_r: 0,
            alpha_max: 7.5,
            cfg_schedule: ScheduleKind::HalfLinear,
            temperature: 1.0,
            top_k: 64,
            dataset: String::new(),
            out_dir: "runs/default".into(),
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lr_floor: 1e-4,
            warmup_steps: 100,
            decay_steps: 0,
            weight_decay: 0.1,
            grad_clip: 1.0,
            prompt_drop: 0.1,
            noise_p: 0.05,
            dataset_size: 81920,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "d",
    "layers",
    "heads",
    "mlp_ratio",
    "rope_base",
    "qk_norm",
    "z_loss_weight",
    "visual_loss_weight",
    "text_size",
    "visual_size",
    "grid_h",
    "grid_w",
    "s",
    "n_blocks",
    "variant",
    "extra_pe",
    "bypass_mlp",
    "block_hidden",
    "probe_r",
    "alpha_max",
    "cfg_schedule",
    "temperature",
    "top_k",
    "dataset",
    "out_dir",
    "seed",
    "steps",
    "batch_size",
    "lr",
    "lr_floor",
    "warmup_steps",
    "decay_steps",
    "weight_decay",
    "grad_clip",
    "prompt_drop",
    "noise_p",
    "dataset_size",
    "log_every",
    "checkpoint_every",
];

fn bad(key: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "d" => self.d = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "mlp_ratio" => self.mlp_ratio = num(key, v)?,
            "rope_base" => self.rope_base = num(key, v)?,
            "qk_norm" => self.qk_norm = boolean(key, v)?,
            "z_loss_weight" => self.z_loss_weight = num(key, v)?,
            "visual_loss_weight" => self.visual_loss_weight = num(key, v)?,
            "text_size" => self.text_size = num(key, v)?,
            "visual_size" => self.visual_size = num(key, v)?,
            "grid_h" => self.grid_h = num(key, v)?,
            "grid_w" => self.grid_w = num(key, v)?,
            "s" => self.s = num(key, v)?,
            "n_blocks" => self.n_blocks = num(key, v)?,
            "variant" => self.variant = Variant::parse(v).ok_or_else(|| bad(key, format!("unknown variant {v:?}")))?,
            "extra_pe" => self.extra_pe = ExtraPe::parse(v).ok_or_else(|| bad(key, format!("unknown option {v:?}")))?,
            "bypass_mlp" => self.bypass_mlp = boolean(key, v)?,
            "block_hidden" => self.block_hidden = num(key, v)?,
            "probe_r" => self.probe_r = num(key, v)?,
            "alpha_max" => self.alpha_max = num(key, v)?,
            "cfg_schedule" => {
                self.cfg_schedule = ScheduleKind::parse(v).ok_or_else(|| bad(key, format!("unknown schedule {v:?}")))?
            }
            "temperature" => self.temperature = num(key, v)?,
            "top_k" => self.top_k = num(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_floor" => self.lr_floor = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "decay_steps" => self.decay_steps = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "prompt_drop" => self.prompt_drop = num(key, v)?,
            "noise_p" => self.noise_p = num(key, v)?,
            "dataset_size" => self.dataset_size = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "d" => self.d.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "rope_base" => self.rope_base.to_string(),
            "qk_norm" => self.qk_norm.to_string(),
            "z_loss_weight" => self.z_loss_weight.to_string(),
            "visual_loss_weight" => self.visual_loss_weight.to_string(),
            "text_size" => self.text_size.to_string(),
            "visual_size" => self.visual_size.to_string(),
            "grid_h" => self.grid_h.to_string(),
            "grid_w" => self.grid_w.to_string(),
            "s" => self.s.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "variant" => self.variant.name().to_string(),
            "extra_pe" => self.extra_pe.name().to_string(),
            "bypass_mlp" => self.bypass_mlp.to_string(),
            "block_hidden" => self.block_hidden.to_string(),
            "probe_r" => self.probe_r.to_string(),
            "alpha_max" => self.alpha_max.to_string(),
            "cfg_schedule" => self.cfg_schedule.name().to_string(),
            "temperature" => self.temperature.to_string(),
            "top_k" => self.top_k.to_string(),
            "dataset" => self.dataset.clone(),
            "out_dir" => self.out_dir.clone(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_floor" => self.lr_floor.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "decay_steps" => self.decay_steps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "prompt_drop" => self.prompt_drop.to_string(),
            "noise_p" => self.noise_p.to_string(),
            "dataset_size" => self.dataset_size.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => unreachable!("KEYS and get() disagree on {key}"),
        }
    }

    /// Parses config text over the defaults. Later lines win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(line, format!("line {} is not `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical `key = value` text of every key; `parse(echo())` is the
    /// identity.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k)).expect("string write");
        }
        out
    }

    /// Checks every constraint before any allocation, naming the key at
    /// fault.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("visual_size", self.visual_size),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("s", self.s),
            ("batch_size", self.batch_size),
            ("dataset_size", self.dataset_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be positive"));
            }
        }
        if self.text_size < WORDS.len() {
            return Err(bad("text_size", format!("must be >= {} to hold the caption words", WORDS.len())));
        }
        if !self.grid_h.is_multiple_of(self.s) {
            return Err(bad("grid_h", format!("s={} must divide grid_h={}", self.s, self.grid_h)));
        }
        if !self.grid_w.is_multiple_of(self.s) {
            return Err(bad("grid_w", format!("s={} must divide grid_w={}", self.s, self.grid_w)));
        }
        if !self.d.is_multiple_of(self.s * self.s) {
            return Err(bad("s", format!("s²={} must divide d={}", self.s * self.s, self.d)));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(bad("heads", format!("heads={} must divide d={}", self.heads, self.d)));
        }
        if !(self.d / self.heads).is_multiple_of(2) {
            return Err(bad("heads", format!("head_dim={} must be even", self.d / self.heads)));
        }
        if self.probe_r > 0 && !self.d.is_multiple_of(self.probe_r) {
            return Err(bad("probe_r", format!("probe_r={} must divide d={}", self.probe_r, self.d)));
        }
        if self.bypass_mlp && self.variant != Variant::Shuffle {
            return Err(bad("bypass_mlp", "only applies to variant = shuffle"));
        }
        if !(self.rope_base > 1.0) {
            return Err(bad("rope_base", "must exceed 1"));
        }
        if !(self.z_loss_weight >= 0.0) {
            return Err(bad("z_loss_weight", "must be >= 0"));
        }
        if !(self.visual_loss_weight > 0.0 && self.visual_loss_weight <= 1.0) {
            return Err(bad("visual_loss_weight", "must lie in (0, 1]"));
        }
        if !(self.alpha_max >= 0.0) {
            return Err(bad("alpha_max", "must be >= 0"));
        }
        if !(self.temperature >= 0.0) {
            return Err(bad("temperature", "must be >= 0"));
        }
        if !(self.lr >= 0.0) {
            return Err(bad("lr", "must be >= 0"));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr.max(0.0)) && self.lr > 0.0 {
            return Err(bad("lr_floor", "must lie in [0, lr]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(bad("grad_clip", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop) {
            return Err(bad("prompt_drop", "must lie in [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.noise_p) {
            return Err(bad("noise_p", "must lie in [0, 0.5)"));
        }
        if self.grid_h < 8 || self.grid_w < 8 {
            return Err(bad("grid_h", "the caption render family needs grids of at least 8x8"));
        }
        if self.log_every == 0 {
            return Err(bad("log_every", "must be positive"));
        }
        if self.visual_size < tshf_core::vocab::NUM_CODEBOOK_BANDS * tshf_core::vocab::TEXTURE_PERIOD {
            return Err(bad("visual_size", "too small for the synthetic codebook bands"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.text_size, self.visual_size).map_err(|e| bad("text_size", e.to_string()))
    }

    pub fn shuffle_config(&self) -> ShuffleConfig {
        ShuffleConfig {
            s: self.s,
            n_blocks: self.n_blocks,
            variant: self.variant,
            extra_pe: self.extra_pe,
            bypass_mlp: self.bypass_mlp,
            hidden: (self.block_hidden > 0).then_some(self.block_hidden),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.validate()?;
        Ok(ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            rope_base: self.rope_base,
            qk_norm: self.qk_norm,
            z_loss_weight: self.z_loss_weight,
            visual_loss_weight: self.visual_loss_weight,
            vocab: self.layout()?,
            shuffle: self.shuffle_config(),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            probe_r: (self.probe_r > 0).then_some(self.probe_r),
        })
    }

    pub fn schedule(&self) -> CfgSchedule {
        CfgSchedule::new(self.cfg_schedule, self.alpha_max)
    }

    pub fn decode_opts(&self) -> DecodeOpts {
        DecodeOpts {
            temperature: self.temperature,
            top_k: self.top_k,
            full_recompute: false,
        }
    }

    pub fn decay_horizon(&self) -> u64 {
        if self.decay_steps == 0 {
            self.steps
        } else {
            self.decay_steps
        }
    }

    /// Warmup then cosine to `lr_floor`, by zero-based step index.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.decay_horizon().saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_floor + 0.5 * (self.lr - self.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
