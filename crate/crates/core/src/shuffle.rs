//! Window fusion of visual tokens (`token_shuffle`) and its inverse.
//!
//! Shuffle compresses each visual token embedding from `d` to `d/s²`
//! channels with one shared linear map, concatenates the `s²` compressed
//! tokens of every `s x s` window into a single `d`-wide token, and refines
//! it with residual MLP blocks. Unshuffle runs the mirror image: residual
//! blocks, split into `s²` chunks, then a shared linear map back to `d`.
//!
//! Two ablation variants replace the input side: `Drop` keeps only the last
//! token of each window, `Simple` concatenates raw embeddings and applies a
//! single linear map (its output side is linear as well).
//!
//! Window layout: fused position `k = i·(w/s) + j` gathers raster indices
//! `(s·i + a)·w + (s·j + b)` for `a, b in 0..s`, row-major inside the window.
//! Slot `t = a·s + b` is a token's place inside its window.

use crate::error::{ensure, Error, Result};
use crate::model::{Ctx, Linear, MlpBlock, ParamStore};
use crate::numerics::{ParamId, Rng, Scalar, Var, ZERO_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Shuffle,
    Drop,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraPe {
    None,
    /// One learned vector per within-window slot, shared across windows.
    Local,
    /// One learned vector per fused position.
    Global,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Shuffle => "shuffle",
            Variant::Drop => "drop",
            Variant::Simple => "simple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Shuffle, Variant::Drop, Variant::Simple].into_iter().find(|v| v.name() == s)
    }
}

impl ExtraPe {
    pub fn name(self) -> &'static str {
        match self {
            ExtraPe::None => "none",
            ExtraPe::Local => "local",
            ExtraPe::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ExtraPe::None, ExtraPe::Local, ExtraPe::Global].into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShuffleConfig {
    /// Window side `s`.
    pub s: usize,
    /// Residual MLP blocks on each side.
    pub n_blocks: usize,
    pub variant: Variant,
    pub extra_pe: ExtraPe,
    /// Replace every MLP by exact channel slicing (test mode).
    pub bypass_mlp: bool,
    /// Hidden width of the residual blocks; `None` means `d`.
    pub hidden: Option<usize>,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self {
            s: 2,
            n_blocks: 2,
            variant: Variant::Shuffle,
            extra_pe: ExtraPe::None,
            bypass_mlp: false,
            hidden: None,
        }
    }
}

impl ShuffleConfig {
    pub fn window(&self) -> usize {
        self.s * self.s
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        ensure!(self.s >= 1, "shuffle window s must be >= 1");
        ensure!(d.is_multiple_of(self.window()), "s²={} must divide d={d}", self.window());
        ensure!(
            !self.bypass_mlp || self.variant == Variant::Shuffle,
            "bypass_mlp only applies to the shuffle variant"
        );
        ensure!(self.hidden != Some(0), "block hidden width must be positive");
        Ok(())
    }

    /// Number of fused positions for an `h x w` grid.
    pub fn fused_len(&self, h: usize, w: usize) -> Result<usize> {
        check_grid(h, w, self.s)?;
        Ok(h * w / self.window())
    }
}

fn check_grid(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Contract(format!(
            "window size s={s} must divide grid dims h={h}, w={w}"
        )));
    }
    Ok(())
}

/// `map[k·s² + t]` is the raster index of slot `t` of fused position `k`.
pub fn window_index_map(h: usize, w: usize, s: usize) -> Result<Vec<usize>> {
    check_grid(h, w, s)?;
    let mut map = Vec::with_capacity(h * w);
    for i in 0..h / s {
        for j in 0..w / s {
            for a in 0..s {
                for b in 0..s {
                    map.push((s * i + a) * w + (s * j + b));
                }
            }
        }
    }
    Ok(map)
}

/// Inverse permutation: raster index to window-order index.
pub fn inverse_map(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (k, &r) in map.iter().enumerate() {
        inv[r] = k;
    }
    inv
}

/// Parameters of the fusion operators, by variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleParams {
    pub cfg: ShuffleConfig,
    pub d: usize,
    pub compress: Option<Linear>,
    pub expand: Option<Linear>,
    pub input_blocks: Vec<MlpBlock>,
    pub output_blocks: Vec<MlpBlock>,
    pub simple_in: Option<Linear>,
    pub simple_out: Option<Linear>,
    pub local_pe: Option<ParamId>,
    pub global_pe: Option<ParamId>,
}

impl ShuffleParams {
    /// Registers parameters under `shuffle.*`. `windows` is the number of
    /// fused positions (sizes the global positional table).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: ShuffleConfig,
        d: usize,
        windows: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let c = d / cfg.window();
        let hidden = cfg.hidden.unwrap_or(d);
        let mut p = Self {
            cfg,
            d,
            compress: None,
            expand: None,
            input_blocks: Vec::new(),
            output_blocks: Vec::new(),
            simple_in: None,
            simple_out: None,
            local_pe: None,
            global_pe: None,
        };
        if cfg.bypass_mlp {
            return Ok(p);
        }
        match cfg.variant {
            Variant::Shuffle => {
                p.compress = Some(Linear::new(store, "shuffle.compress", d, c, true, rng)?);
                for i in 0..cfg.n_blocks {
                    p.input_blocks.push(MlpBlock::new(store, &format!("shuffle.in{i}"), d, hidden, rng)?);
                }
            }
            Variant::Drop => {}
            Variant::Simple => {
                let wd = cfg.window() * d;
                p.simple_in = Some(Linear::new(store, "shuffle.simple_in", wd, d, true, rng)?);
                p.simple_out = Some(Linear::new(store, "shuffle.simple_out", d, wd, true, rng)?);
            }
        }
        if cfg.variant != Variant::Simple {
            for i in 0..cfg.n_blocks {
                p.output_blocks.push(MlpBlock::new(store, &format!("shuffle.out{i}"), d, hidden, rng)?);
            }
            p.expand = Some(Linear::new(store, "shuffle.expand", c, d, true, rng)?);
        }
        match cfg.extra_pe {
            ExtraPe::None => {}
            ExtraPe::Local => {
                p.local_pe = Some(store.add_uniform("shuffle.local_pe", &[cfg.window(), d], d, rng)?);
            }
            ExtraPe::Global => {
                p.global_pe = Some(store.add_uniform("shuffle.global_pe", &[windows, d], d, rng)?);
            }
        }
        Ok(p)
    }

    fn chunk(&self) -> usize {
        self.d / self.cfg.window()
    }

    fn check_input(&self, ctx: &Ctx<'_, '_, impl Scalar>, x: Var, windows: usize) -> Result<()> {
        let shape = ctx.tape.shape(x);
        ensure!(
            shape.len() == 2 && shape[1] == self.d && shape[0] == windows * self.cfg.window(),
            "expected [{}, {}] window-ordered tokens, got {shape:?}",
            windows * self.cfg.window(),
            self.d
        );
        Ok(())
    }

    fn add_local_pe<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var, windows: usize) -> Result<Var> {
        let Some(pe) = self.local_pe else { return Ok(x) };
        let pe = ctx.p(pe);
        let slots: Vec<usize> = (0..windows * self.cfg.window()).map(|r| r % self.cfg.window()).collect();
        let rows = ctx.tape.gather_rows(pe, &slots)?;
        ctx.tape.add(x, rows)
    }

    fn add_global_pe<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, fused: Var, window_ids: &[usize]) -> Result<Var> {
        let Some(pe) = self.global_pe else { return Ok(fused) };
        let pe = ctx.p(pe);
        let rows = ctx.tape.gather_rows(pe, window_ids)?;
        ctx.tape.add(fused, rows)
    }

    /// Fuses window-ordered token embeddings `[m·s², d]` into `[m, d]`,
    /// dispatching on the configured variant. `window_ids` are the fused
    /// positions of the `m` windows (used by the global positional table).
    pub fn fuse_windows<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var, window_ids: &[usize]) -> Result<Var> {
        let m = window_ids.len();
        self.check_input(ctx, x, m)?;
        let s2 = self.cfg.window();
        let d = self.d;
        if self.cfg.bypass_mlp {
            let c = self.chunk();
            let mut index = Vec::with_capacity(m * d);
            for k in 0..m {
                for t in 0..s2 {
                    for j in 0..c {
                        index.push((k * s2 + t) * d + t * c + j);
                    }
                }
            }
            return ctx.tape.gather(x, index, &[m, d]);
        }
        let x = self.add_local_pe(ctx, x, m)?;
        let fused = match self.cfg.variant {
            Variant::Shuffle => {
                let compress = self.compress.as_ref().expect("shuffle params");
                let c = compress.forward(ctx, x)?;
                ctx.tape.reshape(c, &[m, d])?
            }
            Variant::Drop => {
                let last: Vec<usize> = (0..m).map(|k| k * s2 + s2 - 1).collect();
                ctx.tape.gather_rows(x, &last)?
            }
            Variant::Simple => {
                let flat = ctx.tape.reshape(x, &[m, s2 * d])?;
                self.simple_in.as_ref().expect("simple params").forward(ctx, flat)?
            }
        };
        let mut fused = self.add_global_pe(ctx, fused, window_ids)?;
        if self.cfg.variant == Variant::Shuffle {
            for block in &self.input_blocks {
                fused = block.forward(ctx, fused)?;
            }
        }
        Ok(fused)
    }

    /// Splits fused features `[m, d]` into window-ordered per-token features
    /// `[m·s², d]`.
    pub fn split_windows<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, fused: Var) -> Result<Var> {
        let shape = ctx.tape.shape(fused).to_vec();
        ensure!(shape.len() == 2 && shape[1] == self.d, "expected [m, {}] fused features, got {shape:?}", self.d);
        let m = shape[0];
        let s2 = self.cfg.window();
        let d = self.d;
        if self.cfg.bypass_mlp {
            let c = self.chunk();
            let mut index = Vec::with_capacity(m * s2 * d);
            for k in 0..m {
                for t in 0..s2 {
                    for q in 0..d {
                        index.push(if q / c == t { k * d + q } else { ZERO_SLOT });
                    }
                }
            }
            return ctx.tape.gather(fused, index, &[m * s2, d]);
        }
        if self.cfg.variant == Variant::Simple {
            let wide = self.simple_out.as_ref().expect("simple params").forward(ctx, fused)?;
            return ctx.tape.reshape(wide, &[m * s2, d]);
        }
        let mut h = fused;
        for block in &self.output_blocks {
            h = block.forward(ctx, h)?;
        }
        let chunks = ctx.tape.reshape(h, &[m * s2, self.chunk()])?;
        self.expand.as_ref().expect("expand params").forward(ctx, chunks)
    }

    /// Any variant, raster in: `[h·w, d]` to `[h·w/s², d]`.
    pub fn fuse_grid<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, grid_embed: Var, h: usize, w: usize) -> Result<Var> {
        let map = window_index_map(h, w, self.cfg.s)?;
        let ordered = ctx.tape.gather_rows(grid_embed, &map)?;
        let windows: Vec<usize> = (0..map.len() / self.cfg.window()).collect();
        self.fuse_windows(ctx, ordered, &windows)
    }

    /// Any variant, raster out: `[h·w/s², d]` to `[h·w, d]`.
    pub fn split_grid<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, fused: Var, h: usize, w: usize) -> Result<Var> {
        let map = window_index_map(h, w, self.cfg.s)?;
        ensure!(
            ctx.tape.shape(fused)[0] * self.cfg.window() == map.len(),
            "fused length {} does not match a {h}x{w} grid at s={}",
            ctx.tape.shape(fused)[0],
            self.cfg.s
        );
        let per_token = self.split_windows(ctx, fused)?;
        ctx.tape.gather_rows(per_token, &inverse_map(&map))
    }
}

/// Window fusion on a raster of embeddings. Only for the `Shuffle` variant.
pub fn token_shuffle<T: Scalar>(
    ctx: &mut Ctx<'_, '_, T>,
    params: &ShuffleParams,
    grid_embed: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    ensure!(
        params.cfg.variant == Variant::Shuffle,
        "token_shuffle called with the {} variant",
        params.cfg.variant.name()
    );
    params.fuse_grid(ctx, grid_embed, h, w)
}

/// Token-Unshuffle back to a raster of per-token features. Serves the
/// `Shuffle` and `Drop` variants, which share the output side.
pub fn token_unshuffle<T: Scalar>(
    ctx: &mut Ctx<'_, '_, T>,
    params: &ShuffleParams,
    fused: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    ensure!(
        params.cfg.variant != Variant::Simple,
        "token_unshuffle called with the simple variant"
    );
    params.split_grid(ctx, fused, h, w)
}

/// Input side of the `Drop` and `Simple` ablations.
pub fn variant_forward<T: Scalar>(
    ctx: &mut Ctx<'_, '_, T>,
    params: &ShuffleParams,
    grid_embed: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    ensure!(
        params.cfg.variant != Variant::Shuffle,
        "variant_forward handles drop/simple; use token_shuffle for the shuffle variant"
    );
    params.fuse_grid(ctx, grid_embed, h, w)
}
