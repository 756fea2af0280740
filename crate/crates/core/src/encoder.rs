//! Patch-attention frame encoder producing a class token plus patch tokens,
//! and the linear projection into the shared embedding space.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{Init, LayerNorm, Linear, ParamGroup, ParamGroups, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 56,
            image_width: 28,
            patch_size: 14,
            depth: 2,
            heads: 2,
            dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Number of patch tokens `N = (H/p)(W/p)`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Output feature width (equal to the token width).
    pub fn proj_dim(&self) -> usize {
        self.dim
    }
}

/// Encoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub cls: Vec<T>,
    /// `N × d` patch tokens in raster order.
    pub patches: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    /// Head-group projection of the class token.
    pub projection: Linear,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        config: EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let bb = ParamGroup::Backbone;
        let patch_embed = Linear::new(store, init, "encoder.patch_embed", config.patch_dim(), d, true, bb);
        let cls_token = store.add("encoder.cls_token", init.normal((1, d), 0.02), bb);
        let pos_embed = store.add("encoder.pos_embed", init.normal((config.num_patches(), d), 0.02), bb);
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("encoder.block{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    bb,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", d, bb);
        let projection = Linear::new(store, init, "encoder.projection", d, d, true, ParamGroup::Head);
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            projection,
        })
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.height != self.config.image_height || frame.width != self.config.image_width {
            return Err(Error::DimensionMismatch(format!(
                "frame is {}x{}, encoder expects {}x{}",
                frame.height, frame.width, self.config.image_height, self.config.image_width
            )));
        }
        Ok(())
    }

    /// Flattens frames into a `(frames · N) × (p · p · 3)` matrix of
    /// normalized patches, frame-major, raster patch order.
    pub fn patchify<'a, T: Scalar>(&self, frames: impl IntoIterator<Item = &'a Frame>) -> Result<Mat<T>> {
        let c = &self.config;
        let p = c.patch_size;
        let (gh, gw) = (c.image_height / p, c.image_width / p);
        let mut rows: Vec<T> = Vec::new();
        let mut count = 0;
        for frame in frames {
            self.check_frame(frame)?;
            for py in 0..gh {
                for px in 0..gw {
                    for y in py * p..(py + 1) * p {
                        for x in px * p..(px + 1) * p {
                            for v in frame.pixel(y, x) {
                                rows.push(T::lit(f64::from((v - PIXEL_MEAN) / PIXEL_STD)));
                            }
                        }
                    }
                    count += 1;
                }
            }
        }
        Ok(Mat::from_shape_vec((count, c.patch_dim()), rows).expect("patch matrix shape"))
    }

    /// Runs the attention stack over `n_frames` frames of patches. Returns the
    /// final token matrix laid out as `[cls, patch_1..patch_N]` per frame.
    pub fn tokens<T: Scalar>(&self, g: &mut Graph<T>, patches: Var, n_frames: usize) -> Var {
        let n = self.config.num_patches();
        let emb = self.patch_embed.forward(g, patches);
        let pos = g.p(self.pos_embed);
        let pos = g.gather(pos, (0..n_frames).flat_map(|_| 0..n).collect());
        let emb = g.add(emb, pos);
        let cls = g.p(self.cls_token);
        let cls = g.gather(cls, vec![0; n_frames]);
        let stacked = g.concat_rows(&[cls, emb]);
        let order: Vec<usize> = (0..n_frames)
            .flat_map(|f| std::iter::once(f).chain((0..n).map(move |k| n_frames + f * n + k)))
            .collect();
        let mut x = g.gather(stacked, order);
        for block in &self.blocks {
            x = block.forward(g, x, n + 1);
        }
        self.norm.forward(g, x)
    }

    /// Class-token rows (`n_frames × d`) of a token matrix from [`Self::tokens`].
    pub fn class_tokens<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var, n_frames: usize) -> Var {
        let stride = self.config.num_patches() + 1;
        g.gather(tokens, (0..n_frames).map(|f| f * stride).collect())
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, cls: Var) -> Var {
        self.projection.forward(g, cls)
    }

    /// Frame features `f_t` (`n_frames × d`) for patch rows of `n_frames` frames.
    pub fn frame_features<T: Scalar>(&self, g: &mut Graph<T>, patches: Var, n_frames: usize) -> Var {
        let tokens = self.tokens(g, patches, n_frames);
        let cls = self.class_tokens(g, tokens, n_frames);
        self.project(g, cls)
    }

    /// Inference-mode encoding of a single frame.
    pub fn encode_frame<T: Scalar>(&self, store: &ParamStore<T>, frame: &Frame) -> Result<TokenSet<T>> {
        let patches = self.patchify::<T>(std::iter::once(frame))?;
        let mut g = store.inference_graph();
        let x = g.constant(patches);
        let tokens = self.tokens(&mut g, x, 1);
        let t = g.value(tokens);
        Ok(TokenSet {
            cls: t.row(0).to_vec(),
            patches: t.slice(ndarray::s![1.., ..]).to_owned(),
        })
    }

    /// Inference-mode projection of one class token.
    pub fn project_vector<T: Scalar>(&self, store: &ParamStore<T>, cls: &[T]) -> Result<Vec<T>> {
        if cls.len() != self.config.dim {
            return Err(Error::DimensionMismatch(format!(
                "class token has {} entries, expected {}",
                cls.len(),
                self.config.dim
            )));
        }
        Ok(self.projection.apply(store, cls))
    }
}

/// Backbone/head partition of every trainable parameter.
pub fn parameter_groups<T: Scalar>(store: &ParamStore<T>) -> ParamGroups {
    store.groups()
}
