//! Multimodal token-id space, a synthetic visual tokenizer, and a small
//! caption grammar.
//!
//! Ids are laid out in three contiguous bands starting at zero: four special
//! tokens, the text vocabulary, then the visual codebook.
//!
//! The synthetic tokenizer stands in for a VQ image tokenizer. A caption
//! names a color, a shape, and one of five positions; rendering paints the
//! shape's mask with ids from the color's slice of the codebook and the rest
//! of the grid with ids from a background slice. Within a slice, each row
//! carries a random phase and ids advance by one per column, so rows are
//! locally predictable but not globally memorizable.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::numerics::Rng;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SOI: TokenId = 2;
pub const EOI: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

/// Codebook slices: background plus one per color.
pub const NUM_CODEBOOK_BANDS: usize = 5;
/// Number of distinct within-slice ids used by the row texture.
pub const TEXTURE_PERIOD: usize = 8;
/// Below this decode confidence a grid carries no recognizable caption.
pub const DECODE_CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Special,
    Text,
    Visual,
}

/// Partition of one contiguous id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    text_size: usize,
    visual_size: usize,
}

impl VocabLayout {
    pub fn new(text_size: usize, visual_size: usize) -> Result<Self> {
        ensure!(text_size >= 1, "text_size must be >= 1");
        ensure!(visual_size >= 1, "visual_size must be >= 1");
        ensure!(
            NUM_SPECIAL + text_size + visual_size <= TokenId::MAX as usize,
            "vocabulary of {} ids overflows the id type",
            NUM_SPECIAL + text_size + visual_size
        );
        Ok(Self { text_size, visual_size })
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn visual_size(&self) -> usize {
        self.visual_size
    }

    pub fn total(&self) -> usize {
        NUM_SPECIAL + self.text_size + self.visual_size
    }

    pub fn first_text(&self) -> TokenId {
        NUM_SPECIAL as TokenId
    }

    pub fn first_visual(&self) -> TokenId {
        (NUM_SPECIAL + self.text_size) as TokenId
    }

    pub fn text_id(&self, k: usize) -> TokenId {
        debug_assert!(k < self.text_size);
        self.first_text() + k as TokenId
    }

    pub fn visual_id(&self, k: usize) -> TokenId {
        debug_assert!(k < self.visual_size);
        self.first_visual() + k as TokenId
    }

    /// Codebook index of a visual id.
    pub fn visual_index(&self, id: TokenId) -> Option<usize> {
        self.is_visual(id).then(|| (id - self.first_visual()) as usize)
    }

    pub fn band(&self, id: TokenId) -> Option<Band> {
        let id = id as usize;
        if id < NUM_SPECIAL {
            Some(Band::Special)
        } else if id < NUM_SPECIAL + self.text_size {
            Some(Band::Text)
        } else if id < self.total() {
            Some(Band::Visual)
        } else {
            None
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.band(id) == Some(Band::Special)
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        self.band(id) == Some(Band::Text)
    }

    pub fn is_visual(&self, id: TokenId) -> bool {
        self.band(id) == Some(Band::Visual)
    }

    /// Width of one codebook slice of the synthetic tokenizer.
    pub fn codebook_band_size(&self) -> usize {
        self.visual_size / NUM_CODEBOOK_BANDS
    }

    /// Codebook slice of a visual id: 0 is background, `1 + color` otherwise.
    /// Leftover ids past the last full slice belong to the last slice.
    pub fn codebook_band(&self, id: TokenId) -> Option<usize> {
        let size = self.codebook_band_size().max(1);
        self.visual_index(id)
            .map(|k| (k / size).min(NUM_CODEBOOK_BANDS - 1))
    }
}

/// `build_layout`: specials, then text, then visual.
pub fn build_layout(text_size: usize, visual_size: usize) -> Result<VocabLayout> {
    VocabLayout::new(text_size, visual_size)
}

/// An `h x w` raster of visual ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    ids: Vec<TokenId>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, ids: Vec<TokenId>, layout: &VocabLayout) -> Result<Self> {
        ensure!(h >= 1 && w >= 1, "grid dims must be positive, got {h}x{w}");
        ensure!(ids.len() == h * w, "grid {h}x{w} needs {} ids, got {}", h * w, ids.len());
        if let Some(bad) = ids.iter().find(|&&id| !layout.is_visual(id)) {
            return Err(Error::Contract(format!("grid id {bad} is not a visual token")));
        }
        Ok(Self { h, w, ids })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> TokenId {
        self.ids[r * self.w + c]
    }

    /// Raster (row-major) serialization.
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn name(self) -> &'static str {
        ["red", "green", "blue", "yellow"][self as usize]
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub fn name(self) -> &'static str {
        ["square", "circle", "triangle"][self as usize]
    }
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
        Position::Center,
    ];
    pub fn name(self) -> &'static str {
        ["top-left", "top-right", "bottom-left", "bottom-right", "center"][self as usize]
    }
}

/// One sentence of the caption grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Caption {
    pub color: Color,
    pub shape: Shape,
    pub position: Position,
}

/// Caption vocabulary, in text-id order.
pub const WORDS: [&str; 15] = [
    "a", "red", "green", "blue", "yellow", "square", "circle", "triangle", "in", "the", "top", "bottom", "left",
    "right", "center",
];
/// Every caption tokenizes to exactly this many text ids.
pub const CAPTION_LEN: usize = 6;
pub const NUM_CAPTIONS: usize = 60;

impl Caption {
    pub fn new(color: Color, shape: Shape, position: Position) -> Self {
        Self { color, shape, position }
    }

    /// All 60 captions in `(color, shape, position)` lexicographic order.
    pub fn all() -> Vec<Caption> {
        let mut out = Vec::with_capacity(NUM_CAPTIONS);
        for color in Color::ALL {
            for shape in Shape::ALL {
                for position in Position::ALL {
                    out.push(Caption::new(color, shape, position));
                }
            }
        }
        out
    }

    /// Index into [`Caption::all`].
    pub fn index(&self) -> usize {
        (self.color as usize * 3 + self.shape as usize) * 5 + self.position as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < NUM_CAPTIONS).then(|| {
            Caption::new(Color::ALL[i / 15], Shape::ALL[(i / 5) % 3], Position::ALL[i % 5])
        })
    }

    /// `(color, shape, position)` as small integers.
    pub fn attributes(&self) -> [usize; 3] {
        [self.color as usize, self.shape as usize, self.position as usize]
    }

    pub fn from_attributes(a: [usize; 3]) -> Result<Self> {
        ensure!(a[0] < 4 && a[1] < 3 && a[2] < 5, "caption attributes {a:?} out of range");
        Ok(Caption::new(Color::ALL[a[0]], Shape::ALL[a[1]], Position::ALL[a[2]]))
    }

    /// Held out of training data to measure generalization to unseen
    /// attribute combinations; every single attribute value still occurs in
    /// training. Exactly one position per (color, shape) pair, 12 in total.
    pub fn is_held_out(&self) -> bool {
        (self.color as usize + self.shape as usize + self.position as usize).is_multiple_of(5)
    }

    fn words(&self) -> [&'static str; CAPTION_LEN] {
        let (v, h) = match self.position {
            Position::TopLeft => ("top", "left"),
            Position::TopRight => ("top", "right"),
            Position::BottomLeft => ("bottom", "left"),
            Position::BottomRight => ("bottom", "right"),
            Position::Center => ("the", "center"),
        };
        ["a", self.color.name(), self.shape.name(), "in", v, h]
    }

    /// Text ids of the caption sentence.
    pub fn tokens(&self, layout: &VocabLayout) -> Result<Vec<TokenId>> {
        ensure!(
            layout.text_size() >= WORDS.len(),
            "text vocabulary of {} ids cannot hold the {}-word caption grammar",
            layout.text_size(),
            WORDS.len()
        );
        Ok(self
            .words()
            .iter()
            .map(|w| layout.text_id(WORDS.iter().position(|x| x == w).expect("known word")))
            .collect())
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.color.name(), self.shape.name(), self.position.name())
    }
}

impl FromStr for Caption {
    type Err = Error;

    /// Parses `color,shape,position`, e.g. `red,square,top-left`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', ' ']).filter(|p| !p.is_empty()).collect();
        let bad = || Error::Contract(format!("cannot parse caption {s:?}; expected color,shape,position"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let color = Color::ALL.into_iter().find(|c| c.name() == parts[0]).ok_or_else(bad)?;
        let shape = Shape::ALL.into_iter().find(|c| c.name() == parts[1]).ok_or_else(bad)?;
        let position = Position::ALL.into_iter().find(|c| c.name() == parts[2]).ok_or_else(bad)?;
        Ok(Caption::new(color, shape, position))
    }
}

/// Cells covered by `shape` placed at `position` on an `h x w` grid.
///
/// The shape lives in a half-height, half-width box (a quadrant, or centered);
/// membership is decided at cell centers in box-normalized coordinates.
pub fn shape_mask(shape: Shape, position: Position, h: usize, w: usize) -> Vec<bool> {
    let (bh, bw) = (h / 2, w / 2);
    let (r0, c0) = match position {
        Position::TopLeft => (0, 0),
        Position::TopRight => (0, w - bw),
        Position::BottomLeft => (h - bh, 0),
        Position::BottomRight => (h - bh, w - bw),
        Position::Center => ((h - bh) / 2, (w - bw) / 2),
    };
    let mut mask = vec![false; h * w];
    for r in r0..r0 + bh {
        for c in c0..c0 + bw {
            let v = ((r - r0) as f64 + 0.5) / bh as f64;
            let u = ((c - c0) as f64 + 0.5) / bw as f64;
            let (du, dv) = (u - 0.5, v - 0.5);
            mask[r * w + c] = match shape {
                Shape::Square => du.abs() <= 0.4 && dv.abs() <= 0.4,
                Shape::Circle => du * du + dv * dv <= 0.45 * 0.45,
                Shape::Triangle => (0.1..=0.9).contains(&v) && du.abs() <= 0.45 * (v - 0.1) / 0.8,
            };
        }
    }
    mask
}

/// All 15 masks, validated to be non-empty and pairwise distinct.
fn mask_family(h: usize, w: usize) -> Result<Vec<((Shape, Position), Vec<bool>)>> {
    ensure!(h >= 4 && w >= 4, "grid {h}x{w} is smaller than the 4x4 minimum");
    let mut family = Vec::with_capacity(15);
    for shape in Shape::ALL {
        for position in Position::ALL {
            family.push(((shape, position), shape_mask(shape, position, h, w)));
        }
    }
    for (i, (key, m)) in family.iter().enumerate() {
        ensure!(
            m.iter().any(|&b| b) && m.iter().any(|&b| !b),
            "grid {h}x{w} too small to place {key:?}"
        );
        for (other, m2) in &family[..i] {
            ensure!(m != m2, "grid {h}x{w} too small: {key:?} and {other:?} coincide");
        }
    }
    Ok(family)
}

/// Renders a caption into a token grid.
///
/// Draws one key from `rng`; the noise-free pattern depends only on that key,
/// so the same stream position yields the same base grid at any `noise_p`.
pub fn render(
    caption: &Caption,
    h: usize,
    w: usize,
    noise_p: f64,
    rng: &mut Rng,
    layout: &VocabLayout,
) -> Result<TokenGrid> {
    ensure!((0.0..0.5).contains(&noise_p), "noise_p must be in [0, 0.5), got {noise_p}");
    let band = layout.codebook_band_size();
    ensure!(
        band >= TEXTURE_PERIOD,
        "visual vocabulary of {} ids is too small for {} bands of {} ids",
        layout.visual_size(),
        NUM_CODEBOOK_BANDS,
        TEXTURE_PERIOD
    );
    mask_family(h, w)?;
    let mask = shape_mask(caption.shape, caption.position, h, w);
    let key = Rng::new(rng.next_u64());
    let mut texture = key.fork(0);
    let mut noise = key.fork(1);
    let color_band = 1 + caption.color as usize;
    let mut ids = Vec::with_capacity(h * w);
    for r in 0..h {
        let phase = texture.below(TEXTURE_PERIOD);
        for c in 0..w {
            let b = if mask[r * w + c] { color_band } else { 0 };
            let base = layout.visual_id(b * band + (phase + c) % TEXTURE_PERIOD);
            let flip = noise.bernoulli(noise_p);
            let random = noise.below(layout.visual_size());
            ids.push(if flip { layout.visual_id(random) } else { base });
        }
    }
    TokenGrid::new(h, w, ids, layout)
}

/// Best-guess caption of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub caption: Caption,
    /// Lower of the in-mask color agreement and the out-of-mask background
    /// agreement, each as a fraction of cells.
    pub confidence: f64,
}

/// Recovers `(color, shape, position)` as the hypothesis that agrees with
/// the most cells.
pub fn decode_attributes(grid: &TokenGrid, layout: &VocabLayout) -> Result<Decoded> {
    let family = mask_family(grid.h(), grid.w())?;
    let bands: Vec<usize> = grid
        .ids()
        .iter()
        .map(|&id| layout.codebook_band(id).expect("grid ids are visual"))
        .collect();
    let mut best: Option<(f64, Decoded)> = None;
    for ((shape, position), mask) in &family {
        let inside = mask.iter().filter(|&&m| m).count() as f64;
        let outside = bands.len() as f64 - inside;
        let mut hist = [0usize; NUM_CODEBOOK_BANDS];
        let mut background_out = 0usize;
        for (&b, &m) in bands.iter().zip(mask) {
            if m {
                hist[b] += 1;
            } else if b == 0 {
                background_out += 1;
            }
        }
        for color in Color::ALL {
            let fin = hist[1 + color as usize] as f64 / inside;
            let fout = background_out as f64 / outside;
            // Cells agreeing with the hypothesis: the maximum-likelihood
            // choice under uniform per-cell noise.
            let score = (hist[1 + color as usize] + background_out) as f64;
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((
                    score,
                    Decoded {
                        caption: Caption::new(color, *shape, *position),
                        confidence: fin.min(fout),
                    },
                ));
            }
        }
    }
    Ok(best.expect("mask family is non-empty").1)
}

/// `[bos, caption..., soi]`, or `[bos, soi]` when unconditional.
pub fn prompt(caption: Option<&Caption>, layout: &VocabLayout) -> Result<Vec<TokenId>> {
    let mut out = vec![BOS];
    if let Some(c) = caption {
        out.extend(c.tokens(layout)?);
    }
    out.push(SOI);
    Ok(out)
}

/// `[bos, caption..., soi, raster ids..., eoi, eos]`; the caption is omitted
/// for the unconditional form.
pub fn assemble_sequence(caption: Option<&Caption>, grid: &TokenGrid, layout: &VocabLayout) -> Result<Vec<TokenId>> {
    let mut out = prompt(caption, layout)?;
    out.extend_from_slice(grid.ids());
    out.extend_from_slice(&[EOI, EOS]);
    Ok(out)
}

/// Dataset line format: a header with layout sizes and the generator seed,
/// then one record per grid: `color shape position h w id id ...`.
pub mod dataset {
    use super::*;

    pub const HEADER_TAG: &str = "tshf-data";

    #[derive(Debug, Clone, PartialEq)]
    pub struct Header {
        pub text_size: usize,
        pub visual_size: usize,
        pub seed: u64,
    }

    impl Header {
        pub fn layout(&self) -> Result<VocabLayout> {
            VocabLayout::new(self.text_size, self.visual_size)
        }
    }

    pub fn format_header(h: &Header) -> String {
        format!("{HEADER_TAG} {} {} {}", h.text_size, h.visual_size, h.seed)
    }

    pub fn parse_header(line: &str) -> Result<Header> {
        let mut it = line.split_whitespace();
        ensure!(it.next() == Some(HEADER_TAG), "dataset header must start with {HEADER_TAG:?}");
        let mut num = |what: &str| -> Result<u64> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Contract(format!("dataset header: bad or missing {what}")))
        };
        let header = Header {
            text_size: num("text_size")? as usize,
            visual_size: num("visual_size")? as usize,
            seed: num("seed")?,
        };
        ensure!(it.next().is_none(), "dataset header has trailing fields");
        Ok(header)
    }

    pub fn format_record(caption: &Caption, grid: &TokenGrid) -> String {
        let mut s = String::with_capacity(8 + 4 * grid.len());
        let [c, sh, p] = caption.attributes();
        s.push_str(&format!("{c} {sh} {p} {} {}", grid.h(), grid.w()));
        for id in grid.ids() {
            s.push(' ');
            s.push_str(&id.to_string());
        }
        s
    }

    pub fn parse_record(line: &str, layout: &VocabLayout) -> Result<(Caption, TokenGrid)> {
        let nums: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Contract(format!("dataset record: bad integer {t:?}"))))
            .collect::<Result<_>>()?;
        ensure!(nums.len() >= 5, "dataset record too short");
        let caption = Caption::from_attributes([nums[0] as usize, nums[1] as usize, nums[2] as usize])?;
        let (h, w) = (nums[3] as usize, nums[4] as usize);
        ensure!(
            nums.len() == 5 + h * w,
            "dataset record declares {h}x{w} but carries {} ids",
            nums.len() - 5
        );
        let ids = nums[5..].iter().map(|&v| v as TokenId).collect();
        Ok((caption, TokenGrid::new(h, w, ids, layout)?))
    }
}

/// Binary PGM (P5) with one gray level per codebook slice, each cell drawn
/// as a `scale x scale` block.
pub fn to_pgm(grid: &TokenGrid, layout: &VocabLayout, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (h, w) = (grid.h() * scale, grid.w() * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let step = 255 / (NUM_CODEBOOK_BANDS - 1);
    for r in 0..h {
        for c in 0..w {
            let b = layout.codebook_band(grid.get(r / scale, c / scale)).unwrap_or(0);
            out.push((b * step) as u8);
        }
    }
    out
}
