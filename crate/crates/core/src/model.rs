//! Full network: frame encoder, temporal branch, shape branch and the
//! identity classifiers, plus batched forward passes for training and
//! inference.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::losses::{add_opt, LossNodes, LossWeights};
use crate::memory::{memory_loss_graph, ProxyBank};
use crate::nn::{sequence_groups, Init, Linear, ParamGroup, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::shape::{shape_prior_loss_graph, ShapeBranch, ShapeConfig, ShapePrior};
use crate::synth::SHAPE_DIM;
use crate::temporal::{TemporalConfig, TemporalModule, DEFAULT_STRIDES};

const INIT_STREAM: u64 = 0x1D;

/// Module toggles used by the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    /// Separate backbone/head learning rates.
    pub mdlr: bool,
    /// Video-consistent color jitter.
    pub color_jitter: bool,
    /// Multi-granularity temporal branch; when off `h_M = v`.
    pub temporal: bool,
    /// Shape branch and its prior loss.
    pub shape: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        mdlr: true,
        color_jitter: true,
        temporal: true,
        shape: true,
    };
    pub const NONE: Toggles = Toggles {
        mdlr: false,
        color_jitter: false,
        temporal: false,
        shape: false,
    };

    /// The cumulative ladder: baseline, +MDLR, +VC-CJ, +MGTM, +PRSD.
    pub fn ladder() -> [(&'static str, Toggles); 5] {
        let b = Toggles::NONE;
        let m = Toggles { mdlr: true, ..b };
        let c = Toggles {
            color_jitter: true,
            ..m
        };
        let t = Toggles { temporal: true, ..c };
        [
            ("baseline", b),
            ("+MDLR", m),
            ("+VC-CJ", c),
            ("+MGTM", t),
            ("+PRSD", Toggles::ALL),
        ]
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub strides: Vec<usize>,
    pub frames: usize,
    pub num_identities: usize,
    pub shape_width: usize,
    pub shape_layers: usize,
    pub shape_heads: usize,
    pub toggles: Toggles,
}

impl ModelConfig {
    pub fn new(num_identities: usize, frames: usize) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            strides: DEFAULT_STRIDES.to_vec(),
            frames,
            num_identities,
            shape_width: 64,
            shape_layers: 4,
            shape_heads: 4,
            toggles: Toggles::ALL,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_identities < 2 {
            return Err(Error::InvalidConfig("need at least two training identities".into()));
        }
        self.temporal().validate(self.frames)?;
        self.shape().validate()
    }

    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            strides: self.strides.clone(),
            dim: self.encoder.dim,
        }
    }

    pub fn shape(&self) -> ShapeConfig {
        ShapeConfig {
            interaction_dim: self.shape_width,
            layers: self.shape_layers,
            heads: self.shape_heads,
            ..ShapeConfig::new(self.encoder.dim, self.frames)
        }
    }

    /// Width of the fused retrieval descriptor.
    pub fn descriptor_dim(&self) -> usize {
        2 * self.dim() + if self.toggles.shape { SHAPE_DIM } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub temporal: TemporalModule,
    pub shape: ShapeBranch,
    pub classifier_temporal: Linear,
    pub classifier_shape: Linear,
}

/// Nodes produced by a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub frames: Var,
    /// `B × d` sequence means.
    pub v: Var,
    /// `B × d` temporal representation (`v` itself when the branch is off).
    pub h_m: Var,
    pub f_s: Option<Var>,
    pub alpha_bar: Option<Var>,
}

impl Model {
    /// Builds the structure and initial parameters from `seed`.
    pub fn build<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[INIT_STREAM]);
        let model = Self::new(&mut store, &mut rng, config)?;
        Ok((model, store))
    }

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng };
        let encoder = Encoder::new(store, &mut init, config.encoder.clone())?;
        let temporal = TemporalModule::new(store, &mut init, &config.temporal());
        let shape = ShapeBranch::new(store, &mut init, config.shape())?;
        let y = config.num_identities;
        let classifier_temporal = Linear::new(
            store,
            &mut init,
            "classifier.temporal",
            config.dim(),
            y,
            false,
            ParamGroup::Head,
        );
        let classifier_shape = Linear::new(
            store,
            &mut init,
            "classifier.shape",
            SHAPE_DIM,
            y,
            false,
            ParamGroup::Head,
        );
        Ok(Self {
            config,
            encoder,
            temporal,
            shape,
            classifier_temporal,
            classifier_shape,
        })
    }

    /// Patch matrix for `batch` tracklets of exactly `len` frames each.
    pub fn patchify<T: Scalar>(&self, tracklets: &[&[Frame]], len: usize) -> Result<Mat<T>> {
        for t in tracklets {
            if t.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "tracklet has {} frames, expected {len}",
                    t.len()
                )));
            }
        }
        self.encoder.patchify(tracklets.iter().flat_map(|t| t.iter()))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        patches: Var,
        batch: usize,
        len: usize,
    ) -> Result<ForwardOutput> {
        let frames = self.encoder.frame_features(g, patches, batch * len);
        let v = g.group_mean(frames, sequence_groups(batch, len));
        let h_m = if self.config.toggles.temporal {
            self.temporal.forward(g, frames, v, batch, len)?.fused
        } else {
            v
        };
        let (f_s, alpha_bar) = if self.config.toggles.shape {
            let s = self.shape.forward(g, frames, batch, len)?;
            (Some(s.pooled), Some(s.alpha_bar))
        } else {
            (None, None)
        };
        Ok(ForwardOutput {
            frames,
            v,
            h_m,
            f_s,
            alpha_bar,
        })
    }

    /// Training objective nodes for a forward pass with zero-based `labels`.
    pub fn losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        out: &ForwardOutput,
        labels: &[usize],
        bank: &ProxyBank<T>,
        weights: &LossWeights,
    ) -> Result<LossNodes> {
        let margin = T::lit(weights.margin);
        let eps = T::lit(weights.smoothing);
        let logits = self.classifier_temporal.forward(g, out.h_m);
        let mut id = g.smoothed_cross_entropy(logits, labels, eps);
        let mut tri = g.batch_hard_triplet(out.h_m, labels, margin)?;
        let mut alpha = None;
        if let (Some(f_s), Some(alpha_bar)) = (out.f_s, out.alpha_bar) {
            let logits = self.classifier_shape.forward(g, f_s);
            let l = g.smoothed_cross_entropy(logits, labels, eps);
            id = add_opt(g, Some(id), l);
            let l = g.batch_hard_triplet(f_s, labels, margin)?;
            tri = add_opt(g, Some(tri), l);
            alpha = Some(shape_prior_loss_graph(g, alpha_bar, &ShapePrior::default())?);
        }
        let memory = memory_loss_graph(g, out.v, labels, bank);
        Ok(LossNodes {
            triplet: Some(tri),
            id: Some(id),
            memory: Some(memory),
            alpha,
        })
    }

    /// Descriptors for tracklets, in order, evaluated in chunks without
    /// augmentation.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, tracklets: &[&[Frame]]) -> Result<Vec<Embedding<T>>> {
        const CHUNK: usize = 16;
        let len = self.config.frames;
        let mut out = Vec::with_capacity(tracklets.len());
        for chunk in tracklets.chunks(CHUNK) {
            let patches = self.patchify::<T>(chunk, len)?;
            let mut g = store.inference_graph();
            let x = g.constant(patches);
            let f = self.forward(&mut g, x, chunk.len(), len)?;
            for b in 0..chunk.len() {
                out.push(Embedding {
                    v: g.value(f.v).row(b).to_vec(),
                    h_m: g.value(f.h_m).row(b).to_vec(),
                    f_s: f.f_s.map(|s| g.value(s).row(b).to_vec()),
                });
            }
        }
        Ok(out)
    }
}

/// Per-tracklet inference outputs before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub v: Vec<T>,
    pub h_m: Vec<T>,
    pub f_s: Option<Vec<T>>,
}

impl<T: Scalar> Embedding<T> {
    pub fn fused(&self) -> Result<Vec<T>> {
        crate::eval::fuse_descriptor(&self.v, &self.h_m, self.f_s.as_deref())
    }
}
