//! Central finite-difference checks of every hand-written gradient, run in
//! 64-bit precision.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::encoder::EncoderConfig;
use crate::losses::LossWeights;
use crate::memory::{memory_loss_graph, ProxyBank};
use crate::model::{Model, ModelConfig, Toggles};
use crate::nn::{ParamId, ParamStore};
use crate::rng::{stream, StreamRng};
use crate::shape::{shape_prior_loss_graph, ShapePrior};
use crate::temporal::fuse;
use crate::Result;

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Memory,
    Id,
    Triplet,
    ShapePrior,
    Fusion,
    Mixer,
    Encoder,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Memory,
        Component::Id,
        Component::Triplet,
        Component::ShapePrior,
        Component::Fusion,
        Component::Mixer,
        Component::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Memory => "memory",
            Component::Id => "id",
            Component::Triplet => "triplet",
            Component::ShapePrior => "shape_prior",
            Component::Fusion => "fusion",
            Component::Mixer => "mixer",
            Component::Encoder => "encoder",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Negates the analytic shape-prior gradient (fault injection).
    pub flip_shape_prior_sign: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub component: Component,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return (analytic - numeric).abs();
    }
    (analytic - numeric).abs() / scale
}

fn random(rng: &mut StreamRng, shape: (usize, usize), scale: f64) -> Mat<f64> {
    Mat::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Checks `∂loss/∂x` for every entry of `x0`.
fn check_input(x0: &Mat<f64>, sign: f64, loss: impl Fn(&mut Graph<f64>, Var) -> Var) -> (f64, usize) {
    let eval = |x: &Mat<f64>| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = loss(&mut g, v);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let v = g.variable(x0.clone());
    let l = loss(&mut g, v);
    let grad = g.backward(l).get_or_zeros(v, x0.dim()) * sign;
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x0.dim()) {
        let (i, j) = idx;
        let mut xp = x0.clone();
        xp[[i, j]] += STEP;
        let mut xm = x0.clone();
        xm[[i, j]] -= STEP;
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * STEP);
        worst = worst.max(rel_error(grad[[i, j]], numeric));
    }
    (worst, x0.len())
}

/// Checks the total training loss of a small model against sampled entries
/// of parameter `target`.
fn check_param(
    model: &Model,
    store: &ParamStore<f64>,
    bank: &ProxyBank<f64>,
    patches: &Mat<f64>,
    labels: &[usize],
    target: ParamId,
    entries: usize,
    rng: &mut StreamRng,
) -> Result<(f64, usize)> {
    let weights = LossWeights::default();
    let batch = labels.len();
    let len = model.config.frames;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = s.graph();
        let x = g.constant(patches.clone());
        let out = model.forward(&mut g, x, batch, len)?;
        let nodes = model.losses(&mut g, &out, labels, bank, &weights)?;
        let t = nodes.total(&mut g, &weights);
        Ok(g.scalar(t))
    };
    let mut g = store.graph();
    let x = g.constant(patches.clone());
    let out = model.forward(&mut g, x, batch, len)?;
    let nodes = model.losses(&mut g, &out, labels, bank, &weights)?;
    let t = nodes.total(&mut g, &weights);
    let pv = g.p(target);
    let shape = store.get(target).value.dim();
    let grad = g.backward(t).get_or_zeros(pv, shape);
    let mut worst: f64 = 0.0;
    let mut s = store.clone();
    for _ in 0..entries {
        let (i, j) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let orig = s.get(target).value[[i, j]];
        s.get_mut(target).value[[i, j]] = orig + STEP;
        let lp = eval(&s)?;
        s.get_mut(target).value[[i, j]] = orig - STEP;
        let lm = eval(&s)?;
        s.get_mut(target).value[[i, j]] = orig;
        worst = worst.max(rel_error(grad[[i, j]], (lp - lm) / (2.0 * STEP)));
    }
    Ok((worst, entries))
}

struct ModelFixture {
    model: Model,
    store: ParamStore<f64>,
    bank: ProxyBank<f64>,
    patches: Mat<f64>,
    labels: Vec<usize>,
}

fn model_fixture(seed: u64) -> Result<ModelFixture> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        },
        strides: vec![2, 4],
        shape_width: 8,
        shape_layers: 1,
        shape_heads: 2,
        toggles: Toggles::ALL,
        ..ModelConfig::new(3, 4)
    };
    let (model, store) = Model::build::<f64>(config, seed)?;
    let mut rng = stream(seed, &[7]);
    let bank = ProxyBank::new(3, 2, 8, 0.2, 1.0, &mut rng)?;
    let labels = vec![0, 0, 1, 1, 2, 2];
    let rows = labels.len() * model.config.frames * model.config.encoder.num_patches();
    let patches = random(&mut rng, (rows, model.config.encoder.patch_dim()), 1.0);
    Ok(ModelFixture {
        model,
        store,
        bank,
        patches,
        labels,
    })
}

pub fn run_component(component: Component, opts: &GradcheckOptions) -> Result<GradcheckResult> {
    let mut rng = stream(opts.seed, &[0x6C, component as u64]);
    let (max_rel_error, checked) = match component {
        Component::Memory => {
            let bank = ProxyBank::<f64>::new(5, 2, 6, 0.2, 1.0, &mut rng)?;
            let x = random(&mut rng, (4, 6), 1.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check_input(&x, 1.0, |g, v| memory_loss_graph(g, v, &labels, &bank))
        }
        Component::Id => {
            let x = random(&mut rng, (4, 5), 2.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check_input(&x, 1.0, |g, v| g.smoothed_cross_entropy(v, &labels, 0.1))
        }
        Component::Triplet => {
            let x = random(&mut rng, (8, 4), 1.0);
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            check_input(&x, 1.0, |g, v| {
                g.batch_hard_triplet(v, &labels, 0.3).expect("valid batch")
            })
        }
        Component::ShapePrior => {
            let x = random(&mut rng, (8, 10), 1.0);
            let prior = ShapePrior::default();
            let sign = if opts.flip_shape_prior_sign { -1.0 } else { 1.0 };
            check_input(&x, sign, |g, v| {
                shape_prior_loss_graph(g, v, &prior).expect("matching dims")
            })
        }
        Component::Fusion => {
            let h: Vec<Mat<f64>> = (0..3).map(|_| random(&mut rng, (2, 4), 1.0)).collect();
            let a = random(&mut rng, (1, 3), 2.0);
            check_input(&a, 1.0, |g, logits| {
                let hs: Vec<Var> = h.iter().map(|m| g.constant(m.clone())).collect();
                let (out, _) = fuse(g, &hs, logits).expect("matching sizes");
                let sq = g.square(out);
                g.sum_all(sq)
            })
        }
        Component::Mixer | Component::Encoder => {
            let f = model_fixture(opts.seed)?;
            let target = if component == Component::Mixer {
                f.model.temporal.mixers[0].gate_a.weight
            } else {
                f.model.encoder.blocks[0].qkv.weight
            };
            check_param(&f.model, &f.store, &f.bank, &f.patches, &f.labels, target, 6, &mut rng)?
        }
    };
    Ok(GradcheckResult {
        component,
        max_rel_error,
        checked,
    })
}

pub fn run(components: &[Component], opts: &GradcheckOptions) -> Result<Vec<GradcheckResult>> {
    components.iter().map(|&c| run_component(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for r in run(&Component::ALL, &GradcheckOptions::default()).unwrap() {
            assert!(r.passed(), "{} max rel {}", r.component.name(), r.max_rel_error);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn flipped_prior_sign_fails_only_that_component() {
        let opts = GradcheckOptions {
            flip_shape_prior_sign: true,
            ..Default::default()
        };
        for r in run(&Component::ALL, &opts).unwrap() {
            assert_eq!(
                r.passed(),
                r.component != Component::ShapePrior,
                "{}",
                r.component.name()
            );
        }
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::parse(c.name()), Some(c));
        }
        assert_eq!(Component::parse("bogus"), None);
    }
}
