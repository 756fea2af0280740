//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::EraseConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Toggles};
use crate::temporal::DEFAULT_STRIDES;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub ids_per_batch: usize,
    pub tracklets_per_id: usize,
    pub frames_per_tracklet: usize,
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub warmup_iters: usize,
    pub warmup_start_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,

    pub proxies_per_identity: usize,
    pub memory_momentum: f64,
    pub memory_temperature: f64,

    pub hue_range: f32,
    pub jitter_prob: f32,
    pub flip_prob: f32,
    pub erase_prob: f32,

    pub losses: LossWeights,

    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub strides: Vec<usize>,
    pub shape_width: usize,
    pub shape_layers: usize,
    pub shape_heads: usize,

    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            epochs: 40,
            ids_per_batch: 4,
            tracklets_per_id: 4,
            frames_per_tracklet: 8,
            base_lr: 3.5e-4,
            backbone_lr: 5e-6,
            warmup_iters: 10,
            warmup_start_lr: 3.5e-5,
            decay_epochs: vec![10, 20, 30],
            decay_factor: 0.1,
            seed: 0,
            proxies_per_identity: 2,
            memory_momentum: 0.2,
            memory_temperature: 1.0,
            hue_range: 0.3,
            jitter_prob: 0.5,
            flip_prob: 0.5,
            erase_prob: 0.5,
            losses: LossWeights::default(),
            image_height: enc.image_height,
            image_width: enc.image_width,
            patch_size: enc.patch_size,
            dim: enc.dim,
            depth: enc.depth,
            heads: enc.heads,
            strides: DEFAULT_STRIDES.to_vec(),
            shape_width: 64,
            shape_layers: 4,
            shape_heads: 4,
            toggles: Toggles::ALL,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "ids_per_batch" => self.ids_per_batch = parse(key, v)?,
            "tracklets_per_id" => self.tracklets_per_id = parse(key, v)?,
            "frames_per_tracklet" => self.frames_per_tracklet = parse(key, v)?,
            "base_lr" | "lr" => self.base_lr = parse(key, v)?,
            "backbone_lr" => self.backbone_lr = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "warmup_start_lr" => self.warmup_start_lr = parse(key, v)?,
            "decay_epochs" => self.decay_epochs = parse_list(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "proxies_per_identity" => self.proxies_per_identity = parse(key, v)?,
            "memory_momentum" => self.memory_momentum = parse(key, v)?,
            "memory_temperature" => self.memory_temperature = parse(key, v)?,
            "hue_range" => self.hue_range = parse(key, v)?,
            "jitter_prob" => self.jitter_prob = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "erase_prob" => self.erase_prob = parse(key, v)?,
            "lambda_id" => self.losses.lambda_id = parse(key, v)?,
            "lambda_me" => self.losses.lambda_me = parse(key, v)?,
            "lambda_alpha" => self.losses.lambda_alpha = parse(key, v)?,
            "margin" => self.losses.margin = parse(key, v)?,
            "label_smoothing" => self.losses.smoothing = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "strides" => self.strides = parse_list(key, v)?,
            "shape_width" => self.shape_width = parse(key, v)?,
            "shape_layers" => self.shape_layers = parse(key, v)?,
            "shape_heads" => self.shape_heads = parse(key, v)?,
            "mdlr" => self.toggles.mdlr = parse_bool(key, v)?,
            "color_jitter" => self.toggles.color_jitter = parse_bool(key, v)?,
            "temporal" => self.toggles.temporal = parse_bool(key, v)?,
            "shape" => self.toggles.shape = parse_bool(key, v)?,
            "weight_decay" => {
                let wd: f64 = parse(key, v)?;
                if wd != 0.0 {
                    return Err(Error::InvalidConfig("weight decay is not supported".into()));
                }
            }
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.losses;
        let t = &self.toggles;
        let entries: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("ids_per_batch", self.ids_per_batch.to_string()),
            ("tracklets_per_id", self.tracklets_per_id.to_string()),
            ("frames_per_tracklet", self.frames_per_tracklet.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("backbone_lr", self.backbone_lr.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("warmup_start_lr", self.warmup_start_lr.to_string()),
            ("decay_epochs", join(&self.decay_epochs)),
            ("decay_factor", self.decay_factor.to_string()),
            ("seed", self.seed.to_string()),
            ("proxies_per_identity", self.proxies_per_identity.to_string()),
            ("memory_momentum", self.memory_momentum.to_string()),
            ("memory_temperature", self.memory_temperature.to_string()),
            ("hue_range", self.hue_range.to_string()),
            ("jitter_prob", self.jitter_prob.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("erase_prob", self.erase_prob.to_string()),
            ("lambda_id", l.lambda_id.to_string()),
            ("lambda_me", l.lambda_me.to_string()),
            ("lambda_alpha", l.lambda_alpha.to_string()),
            ("margin", l.margin.to_string()),
            ("label_smoothing", l.smoothing.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("dim", self.dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("strides", join(&self.strides)),
            ("shape_width", self.shape_width.to_string()),
            ("shape_layers", self.shape_layers.to_string()),
            ("shape_heads", self.shape_heads.to_string()),
            ("mdlr", t.mdlr.to_string()),
            ("color_jitter", t.color_jitter.to_string()),
            ("temporal", t.temporal.to_string()),
            ("shape", t.shape.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.ids_per_batch < 2 {
            return bad("ids_per_batch must be at least 2 (triplet negatives)".into());
        }
        if self.tracklets_per_id < 1 || self.frames_per_tracklet < 1 {
            return bad("tracklets_per_id and frames_per_tracklet must be positive".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("backbone_lr", self.backbone_lr),
            ("warmup_start_lr", self.warmup_start_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if self.proxies_per_identity == 0 {
            return bad("proxies_per_identity must be positive".into());
        }
        if !(0.0..1.0).contains(&self.memory_momentum) {
            return bad(format!("memory_momentum {} outside [0, 1)", self.memory_momentum));
        }
        if !(self.memory_temperature > 0.0) {
            return bad("memory_temperature must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.hue_range) {
            return bad(format!("hue_range {} outside [0, 0.5]", self.hue_range));
        }
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        self.losses.validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            patch_size: self.patch_size,
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: 4,
        }
    }

    pub fn model(&self, num_identities: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            strides: self.strides.clone(),
            frames: self.frames_per_tracklet,
            num_identities,
            shape_width: self.shape_width,
            shape_layers: self.shape_layers,
            shape_heads: self.shape_heads,
            toggles: self.toggles,
        }
    }

    pub fn erase(&self) -> EraseConfig {
        EraseConfig {
            flip_prob: self.flip_prob,
            erase_prob: self.erase_prob,
            ..EraseConfig::default()
        }
    }

    /// Effective colour-jitter probability (zero when the toggle is off).
    pub fn effective_jitter_prob(&self) -> f32 {
        if self.toggles.color_jitter {
            self.jitter_prob
        } else {
            0.0
        }
    }
}
