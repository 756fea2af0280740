//! Multi-granularity temporal modeling: stride slicing, relevance reordering,
//! bidirectional selective sequence mixing and softmax scale fusion.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::memory::cosine;
use crate::nn::{Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const DEFAULT_STRIDES: [usize; 3] = [2, 4, 8];

/// Row groups of the contiguous windows of length `s` over `len` steps; a
/// shorter trailing window is kept.
pub fn window_groups(len: usize, s: usize) -> Result<Vec<Vec<usize>>> {
    if s == 0 || s > len {
        return Err(Error::InvalidArgument(format!("stride {s} invalid for length {len}")));
    }
    Ok((0..len)
        .step_by(s)
        .map(|start| (start..(start + s).min(len)).collect())
        .collect())
}

/// Number of tokens produced by [`slice`].
pub fn sliced_len(len: usize, s: usize) -> usize {
    len.div_ceil(s)
}

/// Mean-pools contiguous windows of `s` rows.
pub fn slice<T: Scalar>(seq: &Mat<T>, s: usize) -> Result<Mat<T>> {
    let groups = window_groups(seq.nrows(), s)?;
    let mut out = Mat::zeros((groups.len(), seq.ncols()));
    for (mut row, group) in out.rows_mut().into_iter().zip(&groups) {
        for &r in group {
            row += &seq.row(r);
        }
        let n = T::from_count(group.len());
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Permutation ordering rows by descending cosine similarity to `anchor`,
/// stable on ties. `perm[k]` is the source row placed at position `k`.
pub fn reorder_permutation<T: Scalar>(seq: &Mat<T>, anchor: &[T]) -> Result<Vec<usize>> {
    if seq.nrows() == 0 {
        return Err(Error::Empty("reorder of an empty sequence".into()));
    }
    if anchor.iter().all(|&a| a == T::zero()) {
        return Err(Error::ZeroNorm("reorder anchor".into()));
    }
    let sims: Vec<T> = seq
        .rows()
        .into_iter()
        .map(|r| {
            let c = cosine(r.as_slice().expect("contiguous row"), anchor);
            // zero tokens have no direction; rank them as orthogonal
            if c.is_nan() {
                T::zero()
            } else {
                c
            }
        })
        .collect();
    let mut perm: Vec<usize> = (0..seq.nrows()).collect();
    perm.sort_by(|&i, &j| sims[j].partial_cmp(&sims[i]).expect("finite similarity"));
    Ok(perm)
}

pub fn reorder<T: Scalar>(seq: &Mat<T>, anchor: &[T]) -> Result<(Mat<T>, Vec<usize>)> {
    let perm = reorder_permutation(seq, anchor)?;
    Ok((seq.select(ndarray::Axis(0), &perm), perm))
}

/// Inverse of a permutation returned by [`reorder`].
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Diagonal selective recurrence:
/// `h_t = a_t ⊙ h_{t−1} + b_t ⊙ x_t`, `y_t = c_t ⊙ h_t + g ⊙ x_t`
/// with `a = σ(W_a x)`, `b = softplus(W_b x)`, `c = W_c x`.
#[derive(Clone, Debug)]
pub struct SequenceMixer {
    pub gate_a: Linear,
    pub gate_b: Linear,
    pub gate_c: Linear,
    pub skip: ParamId,
    pub dim: usize,
}

impl SequenceMixer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        let hd = ParamGroup::Head;
        Self {
            gate_a: Linear::new(store, init, &format!("{name}.gate_a"), dim, dim, true, hd),
            gate_b: Linear::new(store, init, &format!("{name}.gate_b"), dim, dim, true, hd),
            gate_c: Linear::new(store, init, &format!("{name}.gate_c"), dim, dim, true, hd),
            skip: store.add(format!("{name}.skip"), Mat::from_elem((1, dim), T::one()), hd),
            dim,
        }
    }

    /// Mixes `batch` sequences of length `len` stored sequence-major.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, batch: usize, len: usize) -> Var {
        let a = self.gate_a.forward(g, x);
        let a = g.sigmoid(a);
        let b = self.gate_b.forward(g, x);
        let b = g.softplus(b);
        let c = self.gate_c.forward(g, x);
        let bx = g.mul(b, x);
        let mut h: Option<Var> = None;
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let rows: Vec<usize> = (0..batch).map(|i| i * len + t).collect();
            let bx_t = g.gather(bx, rows.clone());
            let next = match h {
                None => bx_t,
                Some(prev) => {
                    let a_t = g.gather(a, rows);
                    let carried = g.mul(a_t, prev);
                    g.add(carried, bx_t)
                }
            };
            states.push(next);
            h = Some(next);
        }
        let time_major = g.concat_rows(&states);
        let hs = g.gather(time_major, crate::nn::sequence_major_index(batch, len));
        let ch = g.mul(c, hs);
        let skip = g.p(self.skip);
        let gx = g.mul(x, skip);
        g.add(ch, gx)
    }

    /// Plain evaluation of one sequence (`len × d`).
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, seq: &Mat<T>) -> Mat<T> {
        let mut g = store.inference_graph();
        let x = g.constant(seq.clone());
        let y = self.forward(&mut g, x, 1, seq.nrows());
        g.value(y).clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConfig {
    pub strides: Vec<usize>,
    pub dim: usize,
}

impl TemporalConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::InvalidConfig("stride set is empty".into()));
        }
        for &s in &self.strides {
            if s == 0 || s > len {
                return Err(Error::InvalidConfig(format!("stride {s} invalid for {len} frames")));
            }
        }
        Ok(())
    }
}

/// Per-stride features and their fusion.
#[derive(Clone, Debug)]
pub struct TemporalOutput {
    pub per_stride: Vec<Var>,
    pub weights: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct TemporalModule {
    pub strides: Vec<usize>,
    pub mixers: Vec<SequenceMixer>,
    pub fusion_logits: ParamId,
}

impl TemporalModule {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, init: &mut Init<'_, R>, config: &TemporalConfig) -> Self {
        let mixers = config
            .strides
            .iter()
            .map(|s| SequenceMixer::new(store, init, &format!("temporal.mixer_s{s}"), config.dim))
            .collect();
        let fusion_logits = store.add(
            "temporal.fusion_logits",
            Mat::zeros((1, config.strides.len())),
            ParamGroup::Head,
        );
        Self {
            strides: config.strides.clone(),
            mixers,
            fusion_logits,
        }
    }

    /// `frames` is `(batch · len) × d` sequence-major; `anchors` is `batch × d`.
    /// Returns the stride feature `h^(s)` as a `batch × d` node.
    pub fn stride_feature<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        index: usize,
        frames: Var,
        anchors: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let s = self.strides[index];
        let windows = window_groups(len, s)?;
        let l = windows.len();
        let groups: Vec<Vec<usize>> = (0..batch)
            .flat_map(|b| windows.iter().map(move |w| w.iter().map(|&t| b * len + t).collect()))
            .collect();
        let sliced = g.group_mean(frames, groups);

        let mut order = Vec::with_capacity(batch * l);
        {
            let sv = g.value(sliced);
            let av = g.value(anchors);
            for b in 0..batch {
                let block = sv.slice(ndarray::s![b * l..(b + 1) * l, ..]).to_owned();
                let anchor = av.row(b).to_vec();
                let perm = reorder_permutation(&block, &anchor)?;
                order.extend(perm.into_iter().map(|k| b * l + k));
            }
        }
        let reordered = g.gather(sliced, order.clone());
        let reversed_index: Vec<usize> = (0..batch).flat_map(|b| (0..l).rev().map(move |k| b * l + k)).collect();
        let reversed = g.gather(reordered, reversed_index);

        let mixer = &self.mixers[index];
        let fwd = mixer.forward(g, reordered, batch, l);
        let rev = mixer.forward(g, reversed, batch, l);
        let both = g.add(fwd, rev);
        Ok(g.group_mean(both, crate::nn::sequence_groups(batch, l)))
    }

    /// Softmax-weighted sum of per-stride features.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, per_stride: &[Var]) -> Result<(Var, Var)> {
        let logits = g.p(self.fusion_logits);
        fuse(g, per_stride, logits)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        frames: Var,
        anchors: Var,
        batch: usize,
        len: usize,
    ) -> Result<TemporalOutput> {
        let per_stride = (0..self.strides.len())
            .map(|i| self.stride_feature(g, i, frames, anchors, batch, len))
            .collect::<Result<Vec<_>>>()?;
        let (fused, weights) = self.fuse(g, &per_stride)?;
        Ok(TemporalOutput {
            per_stride,
            weights,
            fused,
        })
    }

    /// Current fusion weights `softmax(a)`.
    pub fn fusion_weights<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut w = store.get(self.fusion_logits).value.row(0).to_vec();
        crate::autograd::softmax_in_place(&mut w);
        w
    }
}

/// `h_M = Σ_s softmax(a)_s h^(s)` for `1 × S` logits. Returns `(h_M, weights)`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, per_stride: &[Var], logits: Var) -> Result<(Var, Var)> {
    let (_, n) = g.shape(logits);
    if per_stride.is_empty() || per_stride.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} stride features for {n} fusion logits",
            per_stride.len()
        )));
    }
    let weights = g.softmax_rows(logits);
    let mut acc: Option<Var> = None;
    for (s, &h) in per_stride.iter().enumerate() {
        let w = g.slice_cols(weights, s, 1);
        let term = g.mul(h, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    Ok((acc.expect("non-empty"), weights))
}
