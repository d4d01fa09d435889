//! Parameter storage and the small set of layers the models are built from.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Mat, Var};

/// Index of a tensor inside a [`ParamSet`]. In a graph created with
/// [`ParamSet::graph`] the parameter occupies the node with the same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn var(self) -> Var {
        Var(self.0)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Mat>,
    pub trainable: bool,
}

/// Named, ordered collection of model tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.get(id).dim(), value.dim(), "parameter shape change");
        self.entries[id.0].value = Arc::new(value);
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Fresh graph whose first `len()` nodes are the parameters.
    pub fn graph(&self) -> Graph {
        let g = Graph::new();
        for e in &self.entries {
            g.leaf_shared(e.value.clone(), e.trainable);
        }
        g
    }

    /// Pulls parameter gradients out of a backward pass, zero-filled where
    /// nothing flowed.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Mat> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                grads
                    .take(Var(i))
                    .unwrap_or_else(|| Mat::zeros(e.value.dim()))
            })
            .collect()
    }

    /// Rounds every tensor to the nearest `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            Arc::make_mut(&mut e.value).mapv_inplace(|v| v as f32 as f64);
        }
    }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weights and bias.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound), true);
        let b = ps.add(format!("{name}.b"), uniform(rng, 1, fan_out, bound), true);
        Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound), true);
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn zero(&self, ps: &mut ParamSet) {
        ps.get_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            ps.get_mut(b).fill(0.0);
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w.var());
        match self.b {
            Some(b) => g.add_row(y, b.var()),
            None => y,
        }
    }
}

/// Stack of linear layers with SiLU between them, and optionally after the
/// last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act_last: bool,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dims: &[usize],
        act_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act_last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn forward(&self, g: &Graph, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < n || self.act_last {
                x = g.silu(x);
            }
        }
        x
    }
}

/// Gated recurrent unit with the input-side biases only:
/// `r = σ(W_ir x + W_hr h)`, `z = σ(W_iz x + W_hz h)`,
/// `n = tanh(W_in x + r ⊙ W_hn h)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl Gru {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::new(ps, &format!("{name}.x"), in_dim, 3 * dim, rng),
            hidden: Linear::without_bias(ps, &format!("{name}.h"), dim, 3 * dim, rng),
            dim,
        }
    }

    pub fn step(&self, g: &Graph, x: Var, h: Var) -> Var {
        let d = self.dim;
        let xi = self.input.forward(g, x);
        let hh = self.hidden.forward(g, h);
        let r = g.sigmoid(g.add(g.slice_cols(xi, 0, d), g.slice_cols(hh, 0, d)));
        let z = g.sigmoid(g.add(g.slice_cols(xi, d, d), g.slice_cols(hh, d, d)));
        let n = g.tanh(g.add(
            g.slice_cols(xi, 2 * d, d),
            g.mul(r, g.slice_cols(hh, 2 * d, d)),
        ));
        // (1 - z) n + z h = n + z (h - n)
        g.add(n, g.mul(z, g.sub(h, n)))
    }
}

/// Standard LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::new(ps, &format!("{name}.x"), in_dim, 4 * dim, rng),
            hidden: Linear::without_bias(ps, &format!("{name}.h"), dim, 4 * dim, rng),
            dim,
        }
    }

    /// One step; returns `(h', c')`.
    pub fn step(&self, g: &Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let d = self.dim;
        let gates = g.add(self.input.forward(g, x), self.hidden.forward(g, h));
        let i = g.sigmoid(g.slice_cols(gates, 0, d));
        let f = g.sigmoid(g.slice_cols(gates, d, d));
        let cand = g.tanh(g.slice_cols(gates, 2 * d, d));
        let o = g.sigmoid(g.slice_cols(gates, 3 * d, d));
        let c_next = g.add(g.mul(f, c), g.mul(i, cand));
        let h_next = g.mul(o, g.tanh(c_next));
        (h_next, c_next)
    }
}
