//! Binary checkpoint: little-endian, fully parsed before any state is built.
//!
//! ```text
//! "TSHF" u32:version u32:len config-echo u64:step u64:rng-seed u64:rng-counter
//! u32:n  n x array            (parameters, registration order)
//! u64:adam-t u32:n  n x array  (first moments, then second moments)
//! array = u32:len name u32:ndim ndim x u64:dim  prod(dims) x f64
//! ```

use std::path::Path;

use tshf_core::numerics::Tensor;
use tshf_core::{AdamW, Model, Rng};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"TSHF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    /// Optimizer steps taken.
    pub step: u64,
    /// Stream for batch sampling and prompt drops.
    pub rng: Rng,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg.model_config()?, &mut Rng::new(cfg.seed))?;
        let mut opt = AdamW::new(&model.params);
        opt.weight_decay = cfg.weight_decay;
        opt.grad_clip = cfg.grad_clip;
        Ok(Self {
            model,
            opt,
            step: 0,
            rng: Rng::new(cfg.seed).fork(0xba7c),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub rng: (u64, u64),
    pub params: Vec<NamedArray>,
    pub adam_t: u64,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
}

fn arrays<'a>(names: impl Iterator<Item = String>, tensors: impl Iterator<Item = &'a Tensor<f64>>) -> Vec<NamedArray> {
    names
        .zip(tensors)
        .map(|(name, t)| NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            HarnessError::checkpoint(field, format!("file truncated at byte {} of {}", self.buf.len(), self.pos.saturating_add(n)))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        String::from_utf8(self.take(n, field)?.to_vec()).map_err(|_| HarnessError::checkpoint(field, "not UTF-8"))
    }

    fn array(&mut self, field: &str) -> Result<NamedArray> {
        let name = self.string(&format!("{field} name"))?;
        let f = format!("{field} {name}");
        let ndim = self.u32(&f)? as usize;
        if ndim > 8 {
            return Err(HarnessError::checkpoint(f, format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64(&f)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some())
            .ok_or_else(|| HarnessError::checkpoint(&f, format!("shape {shape:?} overflows")))?;
        let bytes = self.take(count * 8, &f)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(NamedArray { name, shape, data })
    }

    fn arrays(&mut self, field: &str) -> Result<Vec<NamedArray>> {
        let n = self.u32(&format!("{field} count"))? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            out.push(self.array(&format!("{field}[{i}]"))?);
        }
        Ok(out)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[NamedArray]) {
    put_u32(out, arrays.len() as u32);
    for a in arrays {
        put_str(out, &a.name);
        put_u32(out, a.shape.len() as u32);
        for &d in &a.shape {
            put_u64(out, d as u64);
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, state: &TrainState) -> Self {
        let names = || state.model.params.iter().map(|(_, n, _)| n.to_string());
        Self {
            config_echo: cfg.echo(),
            step: state.step,
            rng: state.rng.state(),
            params: arrays(names(), state.model.params.iter().map(|(_, _, t)| t)),
            adam_t: state.opt.t,
            adam_m: arrays(names().map(|n| format!("adam.m.{n}")), state.opt.m.iter()),
            adam_v: arrays(names().map(|n| format!("adam.v.{n}")), state.opt.v.iter()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config_echo);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.rng.0);
        put_u64(&mut out, self.rng.1);
        put_arrays(&mut out, &self.params);
        put_u64(&mut out, self.adam_t);
        let mut moments = self.adam_m.clone();
        moments.extend(self.adam_v.iter().cloned());
        put_arrays(&mut out, &moments);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(HarnessError::checkpoint("magic", "not a TSHF checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(HarnessError::checkpoint("version", format!("found {version}, supported {VERSION}")));
        }
        let config_echo = r.string("config")?;
        let step = r.u64("step")?;
        let rng = (r.u64("rng seed")?, r.u64("rng counter")?);
        let params = r.arrays("params")?;
        let adam_t = r.u64("adam t")?;
        let mut moments = r.arrays("adam moments")?;
        if moments.len() != 2 * params.len() {
            return Err(HarnessError::checkpoint(
                "adam moments",
                format!("{} arrays for {} parameters", moments.len(), params.len()),
            ));
        }
        if r.pos != buf.len() {
            return Err(HarnessError::checkpoint("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
        }
        let adam_v = moments.split_off(params.len());
        Ok(Self {
            config_echo,
            step,
            rng,
            params,
            adam_t,
            adam_m: moments,
            adam_v,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// The run configuration embedded at save time.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_echo)
            .map_err(|e| HarnessError::checkpoint("config", e.to_string()))
    }

    /// Rebuilds the training state for `cfg`, checking every array against
    /// the model `cfg` describes.
    pub fn restore(&self, cfg: &RunConfig) -> Result<TrainState> {
        let mut state = TrainState::fresh(cfg)?;
        let expected: Vec<(String, Vec<usize>)> = state
            .model
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (kind, list, prefix) in [("param", &self.params, ""), ("adam.m", &self.adam_m, "adam.m."), ("adam.v", &self.adam_v, "adam.v.")] {
            if list.len() != expected.len() {
                let have: Vec<&str> = list.iter().map(|a| a.name.as_str()).collect();
                let missing: Vec<String> = expected
                    .iter()
                    .map(|(n, _)| format!("{prefix}{n}"))
                    .filter(|n| !have.contains(&n.as_str()))
                    .collect();
                return Err(HarnessError::checkpoint(
                    kind,
                    format!("{} arrays, model has {}; missing {missing:?}", list.len(), expected.len()),
                ));
            }
            for (a, (name, shape)) in list.iter().zip(&expected) {
                let want = format!("{prefix}{name}");
                if a.name != want {
                    return Err(HarnessError::checkpoint(&a.name, format!("found where {want} was expected")));
                }
                if &a.shape != shape {
                    return Err(HarnessError::checkpoint(&a.name, format!("shape {:?}, config implies {shape:?}", a.shape)));
                }
            }
        }
        let ids: Vec<_> = state.model.params.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = &self.params[i];
            state.model.params.get_mut(id).data_mut().copy_from_slice(&p.data);
            state.opt.m[i].data_mut().copy_from_slice(&self.adam_m[i].data);
            state.opt.v[i].data_mut().copy_from_slice(&self.adam_v[i].data);
        }
        state.opt.t = self.adam_t;
        state.step = self.step;
        state.rng = Rng::from_state(self.rng.0, self.rng.1);
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::parse("d = 16\nheads = 2\nlayers = 1\nmlp_ratio = 2\ngrid_h = 8\ngrid_w = 8\nvisual_size = 40\ntext_size = 16").unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = small();
        let ck = Checkpoint::capture(&cfg, &TrainState::fresh(&cfg).unwrap());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.restore(&cfg).unwrap(), TrainState::fresh(&cfg).unwrap());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let cfg = small();
        let bytes = Checkpoint::capture(&cfg, &TrainState::fresh(&cfg).unwrap()).to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(HarnessError::Checkpoint { .. })), "cut {cut}");
        }
    }

    #[test]
    fn header_errors_name_the_field() {
        let cfg = small();
        let mut bytes = Checkpoint::capture(&cfg, &TrainState::fresh(&cfg).unwrap()).to_bytes();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(HarnessError::Checkpoint { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(HarnessError::Checkpoint { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let cfg = small();
        let ck = Checkpoint::capture(&cfg, &TrainState::fresh(&cfg).unwrap());
        let mut wide = cfg.clone();
        wide.mlp_ratio = 4;
        match ck.restore(&wide) {
            Err(HarnessError::Checkpoint { field, msg }) => {
                assert_eq!(field, "layer0.fc1.w", "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }
}
