//! Synthetic dataset generation and the dataset file.

use std::fmt::Write as _;
use std::path::Path;

use tshf_core::model::Example;
use tshf_core::vocab::dataset::{format_header, format_record, parse_header, parse_record, Header};
use tshf_core::vocab::{render, Caption};
use tshf_core::Rng;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

const DATA_STREAM: u64 = 0xda7a;

/// Captions that may appear in training data.
pub fn training_captions() -> Vec<Caption> {
    Caption::all().into_iter().filter(|c| !c.is_held_out()).collect()
}

pub fn held_out_captions() -> Vec<Caption> {
    Caption::all().into_iter().filter(|c| c.is_held_out()).collect()
}

/// `dataset_size` rendered examples over training captions, from `seed`.
pub fn generate(cfg: &RunConfig) -> Result<Vec<Example>> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let captions = training_captions();
    let mut rng = Rng::new(cfg.seed).fork(DATA_STREAM);
    (0..cfg.dataset_size)
        .map(|_| {
            let caption = captions[rng.below(captions.len())];
            let grid = render(&caption, cfg.grid_h, cfg.grid_w, cfg.noise_p, &mut rng, &layout)?;
            Ok(Example { caption, grid })
        })
        .collect()
}

/// One rendered grid per caption, in order, from `seed`.
pub fn render_all(cfg: &RunConfig, captions: &[Caption]) -> Result<Vec<Example>> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let mut rng = Rng::new(cfg.seed).fork(DATA_STREAM);
    captions
        .iter()
        .map(|&caption| {
            let grid = render(&caption, cfg.grid_h, cfg.grid_w, cfg.noise_p, &mut rng, &layout)?;
            Ok(Example { caption, grid })
        })
        .collect()
}

/// `n` distinct training captions, a seeded draw without replacement.
pub fn distinct_captions(n: usize, seed: u64) -> Vec<Caption> {
    let mut pool = training_captions();
    let mut rng = Rng::new(seed).fork(DATA_STREAM + 1);
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        out.push(pool.swap_remove(rng.below(pool.len())));
    }
    out
}

pub fn format(cfg: &RunConfig, examples: &[Example]) -> String {
    let mut out = format_header(&Header {
        text_size: cfg.text_size,
        visual_size: cfg.visual_size,
        seed: cfg.seed,
    });
    out.push('\n');
    for ex in examples {
        writeln!(out, "{}", format_record(&ex.caption, &ex.grid)).expect("string write");
    }
    out
}

pub fn write(path: &Path, cfg: &RunConfig, examples: &[Example]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, format(cfg, examples)).map_err(|e| HarnessError::io(path, e))
}

/// Parses a dataset file and checks it against the configured layout and grid.
pub fn read(path: &Path, cfg: &RunConfig) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    let header = parse_header(lines.next().unwrap_or(""))?;
    let layout = header.layout()?;
    if layout != cfg.layout()? {
        return Err(HarnessError::Config {
            key: "dataset".into(),
            msg: format!(
                "{} was written for text_size={} visual_size={}",
                path.display(),
                header.text_size,
                header.visual_size
            ),
        });
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (caption, grid) = parse_record(line, &layout)
            .map_err(|e| HarnessError::Runtime(format!("{}:{}: {e}", path.display(), n + 2)))?;
        if (grid.h(), grid.w()) != (cfg.grid_h, cfg.grid_w) {
            return Err(HarnessError::Config {
                key: "dataset".into(),
                msg: format!(
                    "{}:{} holds a {}x{} grid, config wants {}x{}",
                    path.display(),
                    n + 2,
                    grid.h(),
                    grid.w(),
                    cfg.grid_h,
                    cfg.grid_w
                ),
            });
        }
        out.push(Example { caption, grid });
    }
    if out.is_empty() {
        return Err(HarnessError::Runtime(format!("{} holds no records", path.display())));
    }
    Ok(out)
}

/// The configured dataset: the file when `dataset` is set, else generated.
pub fn load(cfg: &RunConfig) -> Result<Vec<Example>> {
    if cfg.dataset.is_empty() {
        generate(cfg)
    } else {
        read(Path::new(&cfg.dataset), cfg)
    }
}
