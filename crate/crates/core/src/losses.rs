//! Identity classification, batch-hard triplet and the weighted total
//! objective.

use crate::autograd::{batch_hard_triplet_forward, smoothed_cross_entropy_forward, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_me: f64,
    pub lambda_alpha: f64,
    pub margin: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 0.25,
            lambda_me: 1.0,
            lambda_alpha: 1.0,
            margin: 0.3,
            smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("margin {} must be ≥ 0", self.margin)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidConfig(format!(
                "smoothing {} outside [0, 1)",
                self.smoothing
            )));
        }
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_me", self.lambda_me),
            ("lambda_alpha", self.lambda_alpha),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy for one logit vector: the target puts
/// `1 − eps` on `y` and `eps / (Y − 1)` on every other class.
pub fn id_loss<T: Scalar>(logits: &[T], y: usize, eps: T) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(
            "identity loss needs at least two classes".into(),
        ));
    }
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange(format!(
            "label {y} for {} classes",
            logits.len()
        )));
    }
    let m = Mat::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row");
    Ok(smoothed_cross_entropy_forward(m.view(), &[y], eps).0)
}

/// Batch-hard triplet loss on Euclidean distances, averaged over anchors
/// that have at least one positive.
pub fn triplet_loss<T: Scalar>(embeddings: &Mat<T>, labels: &[usize], margin: T) -> Result<T> {
    Ok(batch_hard_triplet_forward(embeddings.view(), labels, margin)?.0)
}

/// Component values of one training objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub triplet: f64,
    pub id: f64,
    pub memory: f64,
    pub alpha: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("triplet", self.triplet),
            ("id", self.id),
            ("memory", self.memory),
            ("shape_prior", self.alpha),
        ]
    }
}

/// `L = L_tri + λ_id L_id + λ_me L_me + λ_α L_α`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.triplet + w.lambda_id * parts.id + w.lambda_me * parts.memory + w.lambda_alpha * parts.alpha
}

/// Graph nodes for each component (absent components contribute nothing).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossNodes {
    pub triplet: Option<Var>,
    pub id: Option<Var>,
    pub memory: Option<Var>,
    pub alpha: Option<Var>,
}

impl LossNodes {
    pub fn parts<T: Scalar>(&self, g: &Graph<T>) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).as_f64());
        LossParts {
            triplet: v(self.triplet),
            id: v(self.id),
            memory: v(self.memory),
            alpha: v(self.alpha),
        }
    }

    /// Weighted sum on the tape.
    pub fn total<T: Scalar>(&self, g: &mut Graph<T>, w: &LossWeights) -> Var {
        let terms = [
            (self.triplet, 1.0),
            (self.id, w.lambda_id),
            (self.memory, w.lambda_me),
            (self.alpha, w.lambda_alpha),
        ];
        let mut acc: Option<Var> = None;
        for (node, weight) in terms {
            let Some(node) = node else { continue };
            let term = g.scale(node, T::lit(weight));
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.unwrap_or_else(|| g.constant(Mat::zeros((1, 1))))
    }
}

/// Adds two optional scalar nodes.
pub(crate) fn add_opt<T: Scalar>(g: &mut Graph<T>, a: Option<Var>, b: Var) -> Var {
    match a {
        None => b,
        Some(a) => g.add(a, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    /// Smoothed cross-entropy written out term by term.
    fn ce_oracle(z: &[f64], y: usize, eps: f64) -> f64 {
        let k = z.len() as f64;
        let den: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter()
            .enumerate()
            .map(|(j, &v)| {
                let t = if j == y { 1.0 - eps } else { eps / (k - 1.0) };
                -t * (v.exp() / den).ln()
            })
            .sum()
    }

    /// Exhaustive hardest-pair search over every (anchor, positive, negative).
    fn triplet_oracle(x: &Mat<f64>, labels: &[usize], m: f64) -> f64 {
        let n = x.nrows();
        let d = |i: usize, j: usize| -> f64 {
            (0..x.ncols())
                .map(|c| (x[[i, c]] - x[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..n {
            let mut hp: Option<f64> = None;
            let mut hn: Option<f64> = None;
            for p in 0..n {
                for q in 0..n {
                    if p == a || labels[p] != labels[a] || q == a || labels[q] == labels[a] {
                        continue;
                    }
                    hp = Some(hp.map_or(d(a, p), |v: f64| v.max(d(a, p))));
                    hn = Some(hn.map_or(d(a, q), |v: f64| v.min(d(a, q))));
                }
            }
            if let (Some(p), Some(q)) = (hp, hn) {
                total += (m + p - q).max(0.0);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn id_loss_cases() {
        assert!(id_loss(&[50.0, 0.0, 0.0], 0, 0.0).unwrap() < 1e-20);
        assert!((id_loss(&[0.3; 4], 2, 0.0).unwrap() - 4f64.ln()).abs() < 1e-12);
        let got = id_loss(&[2.0, 0.0, 0.0], 0, 0.1).unwrap();
        assert!((got - ce_oracle(&[2.0, 0.0, 0.0], 0, 0.1)).abs() < 1e-6);
        assert!(id_loss(&[1.0, 2.0], 2, 0.1).is_err());
        assert!(id_loss(&[1.0], 0, 0.1).is_err());
    }

    #[test]
    fn id_loss_minimum_is_target_entropy() {
        let eps = 0.1;
        let mut z = vec![0.0f64; 4];
        for _ in 0..5000 {
            let mut g = Graph::new();
            let v = g.variable(Mat::from_shape_vec((1, 4), z.clone()).unwrap());
            let l = g.smoothed_cross_entropy(v, &[1], eps);
            let grad = g.backward(l).get(v).unwrap().clone();
            for j in 0..4 {
                z[j] -= 1.0 * grad[[0, j]];
            }
        }
        let off = eps / 3.0;
        let entropy = -(1.0 - eps) * (1.0f64 - eps).ln() - 3.0 * off * off.ln();
        let got = id_loss(&z, 1, eps).unwrap();
        assert!(got >= entropy - 1e-12);
        assert!((got - entropy).abs() < 1e-6, "{got} vs {entropy}");
    }

    #[test]
    fn triplet_cases() {
        let x = Mat::from_shape_vec((3, 2), vec![0.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let (_, mined) = crate::autograd::mine_batch_hard(x.view(), &[0, 0, 1], 0.3).unwrap();
        assert_eq!(mined[0].term, 0.0);

        let x = Mat::from_shape_vec((3, 1), vec![0.0f64, 1.0, -1.1]).unwrap();
        let (_, mined) = crate::autograd::mine_batch_hard(x.view(), &[0, 0, 1], 0.3).unwrap();
        assert!((mined[0].term - 0.2).abs() < 1e-12);

        let one_id = Mat::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        assert!(triplet_loss(&one_id, &[3, 3], 0.3).is_err());
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = stream(5, &[]);
        let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
        for _ in 0..20 {
            let x = Mat::from_shape_simple_fn((16, 6), || rng.random_range(-1.0..1.0));
            let got = triplet_loss(&x, &labels, 0.3).unwrap();
            assert!((got - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let ones = LossParts {
            triplet: 1.0,
            id: 1.0,
            memory: 1.0,
            alpha: 1.0,
        };
        assert_eq!(total_loss(&ones, &w), 3.25);

        let mut rng = stream(6, &[]);
        for _ in 0..20 {
            let p = LossParts {
                triplet: rng.random(),
                id: rng.random(),
                memory: rng.random(),
                alpha: rng.random(),
            };
            let w = LossWeights {
                lambda_id: rng.random(),
                lambda_me: rng.random(),
                lambda_alpha: rng.random(),
                ..LossWeights::default()
            };
            let want = p.triplet + w.lambda_id * p.id + w.lambda_me * p.memory + w.lambda_alpha * p.alpha;
            assert_eq!(total_loss(&p, &w), want);

            let mut g = Graph::<f64>::new();
            let nodes = LossNodes {
                triplet: Some(g.constant(Mat::from_elem((1, 1), p.triplet))),
                id: Some(g.constant(Mat::from_elem((1, 1), p.id))),
                memory: Some(g.constant(Mat::from_elem((1, 1), p.memory))),
                alpha: Some(g.constant(Mat::from_elem((1, 1), p.alpha))),
            };
            let t = nodes.total(&mut g, &w);
            assert!((g.scalar(t) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            margin: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            smoothing: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn triplet_is_rotation_invariant(seed in 0u64..300, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = stream(seed, &[]);
            let x = Mat::from_shape_simple_fn((8, 3), || rng.random_range(-1.0..1.0));
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            let (c, s) = (angle.cos(), angle.sin());
            let rot = Mat::from_shape_vec((3, 3), vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
            let xr = x.dot(&rot);
            let a = triplet_loss(&x, &labels, 0.3).unwrap();
            let b = triplet_loss(&xr, &labels, 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn id_loss_is_nonnegative(z in proptest::collection::vec(-20.0f64..20.0, 2..8), y in 0usize..8) {
            prop_assume!(y < z.len());
            prop_assert!(id_loss(&z, y, 0.0).unwrap() >= 0.0);
        }
    }
}
