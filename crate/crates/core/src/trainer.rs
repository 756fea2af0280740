//! Optimization loop: PK batch sampling, warmup + step schedule with
//! per-group rates, Adam, proxy memory maintenance and checkpointing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{apply_tracklet, flip_and_erase, sample_jitter};
use crate::autograd::{Grads, Mat, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{DescriptorMeta, EmbeddingSet};
use crate::frame::Frame;
use crate::losses::{total_loss, LossParts};
use crate::memory::{select_representatives, ProxyBank};
use crate::model::{Embedding, Model};
use crate::nn::{ParamGroup, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::synth::Dataset;

const SAMPLER_STREAM: u64 = 0x5A;
const BATCH_STREAM: u64 = 0xBA;
const BANK_STREAM: u64 = 0xB4;

/// Learning-rate schedule shared by both parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub warmup_iters: usize,
    pub warmup_start_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// When false every group uses the head rate.
    pub differential: bool,
}

impl Schedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            base_lr: c.base_lr,
            backbone_lr: c.backbone_lr,
            warmup_iters: c.warmup_iters,
            warmup_start_lr: c.warmup_start_lr,
            decay_epochs: c.decay_epochs.clone(),
            decay_factor: c.decay_factor,
            differential: c.toggles.mdlr,
        }
    }

    /// Rate at global iteration `iter` during (zero-based) `epoch`. Warmup
    /// is linear in `iter`; every decay epoch `e ≤ epoch` multiplies by the
    /// decay factor. The backbone follows the same shape scaled to its own
    /// plateau.
    pub fn lr_at(&self, iter: usize, epoch: usize, group: ParamGroup) -> f64 {
        let warm = if iter < self.warmup_iters {
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * iter as f64 / self.warmup_iters as f64
        } else {
            self.base_lr
        };
        let mut lr = match group {
            ParamGroup::Head => warm,
            ParamGroup::Backbone if !self.differential => warm,
            ParamGroup::Backbone if iter < self.warmup_iters => self.backbone_lr * (warm / self.base_lr),
            ParamGroup::Backbone => self.backbone_lr,
        };
        for &e in &self.decay_epochs {
            if epoch >= e {
                lr *= self.decay_factor;
            }
        }
        lr
    }
}

pub fn parse_group(name: &str) -> Result<ParamGroup> {
    match name {
        "head" => Ok(ParamGroup::Head),
        "backbone" => Ok(ParamGroup::Backbone),
        other => Err(Error::InvalidArgument(format!("unknown parameter group {other:?}"))),
    }
}

/// Identity-balanced batch sampler. One epoch splits every identity's
/// shuffled tracklets into chunks of `K` (topping up with replacement) and
/// draws `P` identities at a time until fewer than `P` still have chunks.
#[derive(Clone, Debug)]
pub struct PkSampler {
    pub by_identity: Vec<Vec<usize>>,
    pub ids_per_batch: usize,
    pub tracklets_per_id: usize,
}

impl PkSampler {
    /// `labels[i]` is the zero-based class of record `i`.
    pub fn new(labels: &[usize], ids_per_batch: usize, tracklets_per_id: usize) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        if map.len() < ids_per_batch {
            return Err(Error::InvalidArgument(format!(
                "{} identities available, batch needs {ids_per_batch}",
                map.len()
            )));
        }
        if tracklets_per_id == 0 {
            return Err(Error::InvalidArgument("tracklets_per_id must be positive".into()));
        }
        Ok(Self {
            by_identity: map.into_values().collect(),
            ids_per_batch,
            tracklets_per_id,
        })
    }

    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let k = self.tracklets_per_id;
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .by_identity
            .iter()
            .map(|idx| {
                let mut pool = idx.clone();
                while pool.len() < k {
                    pool.push(idx[rng.random_range(0..idx.len())]);
                }
                pool.shuffle(rng);
                pool.chunks_exact(k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if open.len() < self.ids_per_batch {
                break;
            }
            open.shuffle(rng);
            let mut batch = Vec::with_capacity(self.ids_per_batch * k);
            for &i in &open[..self.ids_per_batch] {
                batch.extend(chunks[i].pop().expect("open identity"));
            }
            batches.push(batch);
        }
        batches
    }
}

/// `t` temporally ordered indices evenly spread over `n` frames with a
/// random phase.
pub fn sample_frame_indices<R: Rng>(n: usize, t: usize, rng: &mut R) -> Vec<usize> {
    let stride = n as f64 / t as f64;
    let phase = rng.random::<f64>() * stride;
    (0..t)
        .map(|k| ((phase + k as f64 * stride) as usize).min(n - 1))
        .collect()
}

/// Deterministic evaluation-time counterpart (zero phase).
pub fn even_frame_indices(n: usize, t: usize) -> Vec<usize> {
    let stride = n as f64 / t as f64;
    (0..t).map(|k| ((k as f64 * stride) as usize).min(n - 1)).collect()
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Mat<T>> = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `lr(group)` gives each group's rate.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step as i32));
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(Var(i)) else { continue };
            let rate = T::lit(lr(param.group));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= rate * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// One metrics-log line: `epoch iter L_total L_tri L_id L_me L_alpha lr_head lr_backbone`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iter: usize,
    pub total: f64,
    pub parts: LossParts,
    pub lr_head: f64,
    pub lr_backbone: f64,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.parts;
        write!(
            f,
            "{} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.6e} {:.6e}",
            self.epoch, self.iter, self.total, p.triplet, p.id, p.memory, p.alpha, self.lr_head, self.lr_backbone
        )
    }
}

impl FromStr for MetricsRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 9 {
            return Err(Error::InvalidArgument(format!("metrics record has {} fields", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::InvalidArgument(format!("bad metrics field {:?}", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::InvalidArgument(format!("bad metrics field {:?}", f[i])))
        };
        Ok(Self {
            epoch: int(0)?,
            iter: int(1)?,
            total: num(2)?,
            parts: LossParts {
                triplet: num(3)?,
                id: num(4)?,
                memory: num(5)?,
                alpha: num(6)?,
            },
            lr_head: num(7)?,
            lr_backbone: num(8)?,
        })
    }
}

/// Training state: model, parameters, optimizer, proxy memory and counters.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub bank: ProxyBank<T>,
    pub adam: Adam<T>,
    pub schedule: Schedule,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_iter: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, num_identities: usize) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::build::<T>(config.model(num_identities), config.seed)?;
        let bank = ProxyBank::new(
            num_identities,
            config.proxies_per_identity,
            model.config.dim(),
            T::lit(config.memory_momentum),
            T::lit(config.memory_temperature),
            &mut stream(config.seed, &[BANK_STREAM]),
        )?;
        let adam = Adam::new(&store);
        Ok(Self {
            schedule: Schedule::from_config(&config),
            config,
            model,
            store,
            bank,
            adam,
            epoch: 0,
            global_iter: 0,
        })
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.schedule.lr_at(self.global_iter, self.epoch, group)
    }

    /// Samples frames and applies video-consistent augmentation to one
    /// tracklet of a batch.
    fn prepare_tracklet(&self, frames: &[Frame], slot: usize, iter: usize) -> Result<Vec<Frame>> {
        let c = &self.config;
        let mut rng = stream(c.seed, &[BATCH_STREAM, self.epoch as u64, iter as u64, slot as u64]);
        let idx = sample_frame_indices(frames.len(), c.frames_per_tracklet, &mut rng);
        let picked: Vec<Frame> = idx.iter().map(|&i| frames[i].clone()).collect();
        let jitter = sample_jitter(&mut rng, c.hue_range, c.effective_jitter_prob())?;
        let jittered = apply_tracklet(&picked, jitter);
        Ok(flip_and_erase(&jittered, &mut rng, &c.erase()))
    }

    /// One optimization step on the records `batch` of `data`.
    pub fn step(&mut self, data: &Dataset, batch: &[usize], iter: usize) -> Result<MetricsRecord> {
        let len = self.config.frames_per_tracklet;
        let labels: Vec<usize> = batch.iter().map(|&i| data.records[i].class()).collect();
        for &y in &labels {
            if y >= self.bank.num_identities() {
                return Err(Error::IndexOutOfRange(format!(
                    "identity {} beyond {} classes",
                    y + 1,
                    self.bank.num_identities()
                )));
            }
        }
        let clips = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| self.prepare_tracklet(&data.frames[i], slot, iter))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[Frame]> = clips.iter().map(Vec::as_slice).collect();
        let patches = self.model.patchify::<T>(&refs, len)?;

        let mut g = self.store.graph();
        let x = g.constant(patches);
        let out = self.model.forward(&mut g, x, batch.len(), len)?;

        let v = g.value(out.v).clone();
        for (b, &y) in labels.iter().enumerate() {
            if !self.bank.is_initialized(y) {
                self.bank.initialize_identity(y, v.row(b).as_slice().expect("row"))?;
            }
        }

        let nodes = self
            .model
            .losses(&mut g, &out, &labels, &self.bank, &self.config.losses)?;
        let parts = nodes.parts(&g);
        for (name, value) in parts.named() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: name.to_string(),
                    epoch: self.epoch,
                    iter,
                });
            }
        }
        let root = nodes.total(&mut g, &self.config.losses);
        let grads = g.backward(root);

        let lr_head = self.lr(ParamGroup::Head);
        let lr_backbone = self.lr(ParamGroup::Backbone);
        self.adam.update(&mut self.store, &grads, |grp| match grp {
            ParamGroup::Head => lr_head,
            ParamGroup::Backbone => lr_backbone,
        });

        let mut per_identity: BTreeMap<usize, Vec<Vec<T>>> = BTreeMap::new();
        for (b, &y) in labels.iter().enumerate() {
            per_identity.entry(y).or_default().push(v.row(b).to_vec());
        }
        for (y, feats) in per_identity {
            let reps = select_representatives(&feats, y, &self.bank)?;
            self.bank.update(y, 0, &reps.mean)?;
            if self.bank.per_identity() > 1 {
                self.bank.update(y, 1, &reps.hard)?;
            }
        }

        self.global_iter += 1;
        Ok(MetricsRecord {
            epoch: self.epoch,
            iter,
            total: total_loss(&parts, &self.config.losses),
            parts,
            lr_head,
            lr_backbone,
        })
    }

    /// Batches of the current epoch, a pure function of (seed, epoch).
    pub fn epoch_batches(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        let labels: Vec<usize> = data.records.iter().map(|r| r.class()).collect();
        let sampler = PkSampler::new(&labels, self.config.ids_per_batch, self.config.tracklets_per_id)?;
        Ok(sampler.epoch(&mut stream(self.config.seed, &[SAMPLER_STREAM, self.epoch as u64])))
    }

    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        mut on_record: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        let batches = self.epoch_batches(data)?;
        let mut records = Vec::with_capacity(batches.len());
        for (iter, batch) in batches.iter().enumerate() {
            let r = self.step(data, batch, iter)?;
            on_record(&r);
            records.push(r);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Runs the remaining epochs. With `out_dir`, writes a checkpoint before
    /// every decay epoch and at the end.
    pub fn fit(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        mut on_record: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            all.extend(self.run_epoch(data, &mut on_record)?);
            if let Some(dir) = out_dir {
                if self.config.decay_epochs.contains(&self.epoch) && self.epoch < self.config.epochs {
                    self.checkpoint().write(&checkpoint_path(dir, Some(self.epoch)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().write(&checkpoint_path(dir, None))?;
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_params("", &self.store);
        for (id, p) in self.store.iter() {
            c.insert(format!("optim.m.{}", p.name), &self.adam.m[id.index()]);
            c.insert(format!("optim.v.{}", p.name), &self.adam.v[id.index()]);
        }
        c.insert_scalar("optim.step", self.adam.step as f64);
        c.insert("memory.proxies", self.bank.matrix());
        let init: Vec<f64> = self
            .bank
            .initialized()
            .iter()
            .map(|&b| f64::from(u8::from(b)))
            .collect();
        c.insert(
            "memory.initialized",
            &Mat::from_shape_vec((1, init.len()), init).expect("row"),
        );
        c.insert_scalar("train.epoch", self.epoch as f64);
        c.insert_scalar("train.global_iter", self.global_iter as f64);
        c
    }

    /// Restores a full training state written by [`Self::checkpoint`].
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let y = num_identities_in(ckpt)?;
        let mut t = Self::new(config, y)?;
        ckpt.load_params("", &mut t.store)?;
        let names: Vec<(usize, String)> = t.store.iter().map(|(id, p)| (id.index(), p.name.clone())).collect();
        for (i, name) in names {
            t.adam.m[i] = ckpt.require_as(&format!("optim.m.{name}"))?;
            t.adam.v[i] = ckpt.require_as(&format!("optim.v.{name}"))?;
        }
        t.adam.step = ckpt.scalar("optim.step")? as u64;
        let proxies = ckpt.require_as::<T>("memory.proxies")?;
        let initialized = ckpt.require("memory.initialized")?.iter().map(|&v| v != 0.0).collect();
        t.bank = ProxyBank::from_parts(
            proxies,
            initialized,
            t.config.proxies_per_identity,
            T::lit(t.config.memory_momentum),
            T::lit(t.config.memory_temperature),
        )?;
        t.epoch = ckpt.scalar("train.epoch")? as usize;
        t.global_iter = ckpt.scalar("train.global_iter")? as usize;
        Ok(t)
    }

    pub fn embeddings(&self, data: &Dataset) -> Result<Vec<Embedding<T>>> {
        embed_dataset(&self.model, &self.store, data)
    }

    pub fn embedding_set(&self, data: &Dataset) -> Result<EmbeddingSet> {
        embedding_set(&self.model, &self.store, data)
    }
}

/// Number of training identities recorded in a checkpoint.
pub fn num_identities_in(ckpt: &Checkpoint) -> Result<usize> {
    Ok(ckpt.require("classifier.temporal.weight")?.ncols())
}

/// Loads inference parameters from a checkpoint into a model built from `config`.
pub fn load_model<T: Scalar>(config: &TrainConfig, ckpt: &Checkpoint) -> Result<(Model, ParamStore<T>)> {
    let y = num_identities_in(ckpt)?;
    let (model, mut store) = Model::build::<T>(config.model(y), config.seed)?;
    ckpt.load_params("", &mut store)?;
    Ok((model, store))
}

pub fn checkpoint_path(dir: &Path, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("epoch{e:03}.ckpt")),
        None => dir.join("final.ckpt"),
    }
}

/// Embeddings of every tracklet (evenly spaced frames, no augmentation).
pub fn embed_dataset<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<Vec<Embedding<T>>> {
    let len = model.config.frames;
    let clips: Vec<Vec<Frame>> = data
        .frames
        .iter()
        .map(|f| {
            if f.is_empty() {
                return Err(Error::Empty("tracklet without frames".into()));
            }
            Ok(even_frame_indices(f.len(), len)
                .into_iter()
                .map(|i| f[i].clone())
                .collect())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[Frame]> = clips.iter().map(Vec::as_slice).collect();
    model.embed(store, &refs)
}

/// Fused descriptors in manifest order, ready to be written or evaluated.
pub fn embedding_set<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<EmbeddingSet> {
    let emb = embed_dataset(model, store, data)?;
    let dim = model.config.descriptor_dim();
    let mut values = Vec::with_capacity(emb.len() * dim);
    for e in &emb {
        values.extend(e.fused()?.into_iter().map(|v| v.as_f64() as f32));
    }
    Ok(EmbeddingSet {
        descriptors: Mat::from_shape_vec((emb.len(), dim), values).expect("descriptor matrix"),
        meta: data.records.iter().map(DescriptorMeta::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn schedule() -> Schedule {
        Schedule::from_config(&TrainConfig::default())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn schedule_probes() {
        let s = schedule();
        let h = ParamGroup::Head;
        let b = ParamGroup::Backbone;
        assert_eq!(s.lr_at(0, 0, h), 3.5e-5);
        assert!(close(s.lr_at(0, 0, b), 5e-7));
        assert_eq!(s.lr_at(200, 5, h), 3.5e-4);
        assert!(close(s.lr_at(2000, 15, h), 3.5e-5));
        assert!(close(s.lr_at(3000, 25, h), 3.5e-6));
        assert!(close(s.lr_at(4000, 35, h), 3.5e-7));
        assert!(close(s.lr_at(4000, 35, b), 5e-9));
        for (i, e) in [(10, 0), (50, 3), (500, 12), (900, 27), (1500, 39)] {
            assert!(close(s.lr_at(i, e, h) / s.lr_at(i, e, b), 70.0));
        }
        assert!(parse_group("decoder").is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = schedule();
        let h = ParamGroup::Head;
        for i in 1..10 {
            assert!(s.lr_at(i, 0, h) > s.lr_at(i - 1, 0, h));
        }
        let mut prev = f64::INFINITY;
        for e in 0..40 {
            let lr = s.lr_at(10 + e * 100, e, h);
            assert!(lr <= prev);
            prev = lr;
        }
        let mut uniform = s.clone();
        uniform.differential = false;
        assert_eq!(uniform.lr_at(400, 3, ParamGroup::Backbone), 3.5e-4);
    }

    fn labels(ids: usize, per: usize) -> Vec<usize> {
        (0..ids).flat_map(|y| std::iter::repeat_n(y, per)).collect()
    }

    #[test]
    fn sampler_exact_cover() {
        let s = PkSampler::new(&labels(4, 4), 4, 4).unwrap();
        let batches = s.epoch(&mut stream(1, &[]));
        assert_eq!(batches.len(), 1);
        let mut seen = batches[0].clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_replacement() {
        let mut l = labels(3, 4);
        l.push(3);
        let s = PkSampler::new(&l, 4, 4).unwrap();
        let b = &s.epoch(&mut stream(2, &[]))[0];
        assert_eq!(b.iter().filter(|&&i| i == 12).count(), 4);
        assert!(PkSampler::new(&labels(3, 4), 4, 4).is_err());
    }

    #[test]
    fn sampler_identity_frequencies() {
        let ids = 10;
        let s = PkSampler::new(&labels(ids, 6), 4, 4).unwrap();
        let mut rng = stream(3, &[]);
        let mut counts = vec![0usize; ids];
        let mut n = 0usize;
        while n < 10_000 {
            for b in s.epoch(&mut rng) {
                for chunk in b.chunks(4) {
                    counts[chunk[0] / 6] += 1;
                }
                n += 1;
                if n == 10_000 {
                    break;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let p = 1.0 / ids as f64;
        let mean = total as f64 * p;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn batches_have_distinct_identities() {
        let s = PkSampler::new(&labels(9, 5), 4, 4).unwrap();
        for b in s.epoch(&mut stream(4, &[])) {
            let mut ids: Vec<usize> = b.chunks(4).map(|c| c[0] / 5).collect();
            for c in b.chunks(4) {
                assert!(c.iter().all(|&i| i / 5 == c[0] / 5));
            }
            ids.dedup();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 4);
        }
    }

    #[test]
    fn frame_indices() {
        let mut rng = stream(5, &[]);
        assert_eq!(sample_frame_indices(8, 8, &mut rng), (0..8).collect::<Vec<_>>());
        for _ in 0..100 {
            let idx = sample_frame_indices(20, 8, &mut rng);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(*idx.last().unwrap() < 20);
        }
        let short = sample_frame_indices(3, 8, &mut rng);
        assert!(short.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(even_frame_indices(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn metrics_record_round_trip() {
        let r = MetricsRecord {
            epoch: 2,
            iter: 7,
            total: 3.25,
            parts: LossParts {
                triplet: 1.0,
                id: 1.0,
                memory: 1.0,
                alpha: 1.0,
            },
            lr_head: 3.5e-4,
            lr_backbone: 5e-6,
        };
        let back: MetricsRecord = r.to_string().parse().unwrap();
        assert_eq!(back, r);
    }
}
