use crate::error::{ensure, Result};
use crate::numerics::{ParamId, Rng, Scalar, Tape, Tensor, Var};

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        ensure!(self.id_of(&name).is_none(), "duplicate parameter name {name:?}");
        self.entries.push((name, value));
        Ok(self.entries.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let a = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::from_fn(shape, |_| T::lit(rng.symmetric(a))))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// A tape plus lazily registered parameters, so each parameter enters the
/// tape at most once per forward pass.
pub struct Ctx<'a, 'p, T: Scalar> {
    pub tape: &'a mut Tape<'p, T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, 'p, T: Scalar> Ctx<'a, 'p, T> {
    pub fn new(tape: &'a mut Tape<'p, T>, store: &'p ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id));
        self.bound[id] = Some(v);
        v
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[inp, out], inp, rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Residual two-layer GELU block: `x + fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}
