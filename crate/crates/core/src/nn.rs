//! Parameter storage and the layers shared by the encoder, temporal and shape
//! branches.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Mat, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The frame encoder stack (treated as the pretrained part).
    Backbone,
    /// Projection, temporal, shape and classifier heads.
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Mat<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Disjoint split of every parameter by [`ParamGroup`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub backbone: Vec<ParamId>,
    pub head: Vec<ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param {
            name,
            value,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn groups(&self) -> ParamGroups {
        let mut backbone = Vec::new();
        let mut head = Vec::new();
        for (id, p) in self.iter() {
            if !p.trainable {
                continue;
            }
            match p.group {
                ParamGroup::Backbone => backbone.push(id),
                ParamGroup::Head => head.push(id),
            }
        }
        ParamGroups { backbone, head }
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }

    /// Starts a tape whose first nodes are this store's parameters.
    pub fn graph(&self) -> Graph<T> {
        Graph::with_param_values(self.params.iter().map(|p| (&p.value, p.trainable)))
    }

    /// Starts a tape that tracks no gradients at all.
    pub fn inference_graph(&self) -> Graph<T> {
        Graph::with_param_values(self.params.iter().map(|p| (&p.value, false)))
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| U::lit(v.as_f64())),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Node bound to a parameter of the store this graph was created from.
    pub fn p(&self, id: ParamId) -> Var {
        assert!(id.0 < self.num_params(), "parameter not bound to this graph");
        Var(id.0)
    }
}

/// Shared initialization helpers.
pub struct Init<'a, R> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: (usize, usize), std: f64) -> Mat<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_simple_fn(shape, || T::lit(dist.sample(self.rng)))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: (usize, usize), bound: f64) -> Mat<T> {
        Array2::from_shape_simple_fn(shape, || T::lit(self.rng.random_range(-bound..=bound)))
    }
}

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform((in_dim, out_dim), bound), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim)), group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.p(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.add(y, b)
            }
            None => y,
        }
    }

    /// Plain evaluation on a single row, used by tests and oracles.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = &store.get(self.weight).value;
        (0..self.out_dim)
            .map(|o| {
                let mut acc = self.bias.map_or(T::zero(), |b| store.get(b).value[[0, o]]);
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w[[i, o]];
                }
                acc
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::from_elem((1, dim), T::one()), group),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), group),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer encoder layer with GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "width must divide into heads");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group),
            qkv: Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim, true, group),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true, group),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group),
            ff1: Linear::new(store, init, &format!("{name}.ff1"), dim, ff_mult * dim, true, group),
            ff2: Linear::new(store, init, &format!("{name}.ff2"), ff_mult * dim, dim, true, group),
            heads,
            dim,
        }
    }

    /// `x` holds consecutive sequences of `block` tokens; attention never
    /// crosses a block boundary.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, block: usize) -> Var {
        let h = self.norm1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let q = g.slice_cols(qkv, 0, self.dim);
        let k = g.slice_cols(qkv, self.dim, self.dim);
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim);
        let a = g.attention(q, k, v, block, self.heads);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let h = self.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        g.add(x, h)
    }
}

/// Gated recurrent unit acting on `[x_t ; h_{t-1}]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let joint = input_dim + hidden_dim;
        Self {
            update: Linear::new(store, init, &format!("{name}.update"), joint, hidden_dim, true, group),
            reset: Linear::new(store, init, &format!("{name}.reset"), joint, hidden_dim, true, group),
            candidate: Linear::new(
                store,
                init,
                &format!("{name}.candidate"),
                joint,
                hidden_dim,
                true,
                group,
            ),
            input_dim,
            hidden_dim,
        }
    }

    /// One step for a batch of rows.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Var {
        let xh = g.concat_cols(&[x, h]);
        let z = self.update.forward(g, xh);
        let z = g.sigmoid(z);
        let r = self.reset.forward(g, xh);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let xrh = g.concat_cols(&[x, rh]);
        let c = self.candidate.forward(g, xrh);
        let c = g.tanh(c);
        // h' = h - z*h + z*c
        let zh = g.mul(z, h);
        let zc = g.mul(z, c);
        let keep = g.sub(h, zh);
        g.add(keep, zc)
    }

    /// Runs the recurrence over `batch` sequences of length `len` stored
    /// sequence-major (`row = b * len + t`), from a zero state. Returns the
    /// hidden states in the same layout.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var, batch: usize, len: usize) -> Var {
        let mut h = g.constant(Mat::zeros((batch, self.hidden_dim)));
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.gather(x, (0..batch).map(|b| b * len + t).collect());
            h = self.step(g, xt, h);
            states.push(h);
        }
        let time_major = g.concat_rows(&states);
        g.gather(time_major, sequence_major_index(batch, len))
    }
}

/// Index that maps time-major rows (`t * batch + b`) to sequence-major order.
pub fn sequence_major_index(batch: usize, len: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * len);
    for b in 0..batch {
        for t in 0..len {
            idx.push(t * batch + b);
        }
    }
    idx
}

/// Row groups `[b*len, (b+1)*len)` for per-sequence pooling.
pub fn sequence_groups(batch: usize, len: usize) -> Vec<Vec<usize>> {
    (0..batch).map(|b| (b * len..(b + 1) * len).collect()).collect()
}
