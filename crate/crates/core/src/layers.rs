//! Named parameter storage and the small layers the model is built from.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// All trainable matrices of a model, addressed by canonical name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value from `(name, value)` pairs; names and shapes must match exactly.
    pub fn load_named(&mut self, named: Vec<(String, Mat)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format {
                what: "parameter set",
                msg: format!("expected {} tensors, found {}", self.values.len(), named.len()),
            });
        }
        for (name, value) in named {
            let i = self.names.iter().position(|n| *n == name).ok_or_else(|| Error::Format {
                what: "parameter set",
                msg: format!("unknown parameter {name}"),
            })?;
            if self.values[i].dim() != value.dim() {
                return Err(Error::Format {
                    what: "parameter set",
                    msg: format!("{name}: shape {:?} != {:?}", value.dim(), self.values[i].dim()),
                });
            }
            self.values[i] = value;
        }
        Ok(())
    }

    /// Inserts every parameter into `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect() }
    }
}

/// Tape handles for a [`ParamStore`] during one pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created in [`ParamStore`] order (e.g. by a gradient checker).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `x · W (+ b)`
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add_uniform(rng, format!("{name}.weight"), fan_in, fan_out, fan_in);
        let b = bias.then(|| store.add_uniform(rng, format!("{name}.bias"), 1, fan_out, fan_in));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Single-head scaled dot-product attention with its own query/key/value maps.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub width: usize,
}

/// Output of an attention unit together with its (row-stochastic) weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width, false),
            key: Linear::new(store, rng, &format!("{name}.key"), width, width, false),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width, false),
            width,
        }
    }

    /// Adds `gain·I` to the query and key maps, so that a fresh unit attends
    /// mostly to matching rows instead of averaging them all together.
    pub fn boost_identity(&self, store: &mut ParamStore, gain: f64) {
        for id in [self.query.w, self.key.w] {
            store.get_mut(id).diag_mut().mapv_inplace(|x| x + gain);
        }
    }

    /// `softmax(q kᵀ / √width) · v` with queries from `q_src` and keys from `k_src`, values from `v_src`.
    pub fn attend(&self, tape: &mut Tape, p: &Bound, q_src: Var, k_src: Var, v_src: Var) -> Result<Attended> {
        let q = self.query.forward(tape, p, q_src)?;
        let k = self.key.forward(tape, p, k_src)?;
        let v = self.value.forward(tape, p, v_src)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.width as f64).sqrt());
        let weights = tape.row_softmax(scores)?;
        let output = tape.matmul(weights, v)?;
        Ok(Attended { output, weights })
    }

    pub fn self_attend(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Attended> {
        self.attend(tape, p, x, x, x)
    }
}

/// Kernel-3, padding-1 temporal convolution: T×C_in → T×C_out.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub linear: Linear,
}

impl Conv1d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        Self { linear: Linear::new(store, rng, name, 3 * c_in, c_out, true) }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cols = tape.unfold3(x);
        self.linear.forward(tape, p, cols)
    }
}
