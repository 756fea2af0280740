//! Multi-proxy identity memory and the memory-based contrastive objective.
//!
//! Each identity owns `P` unit-norm proxies. Proxy 0 tracks the batch mean of
//! the identity's sequence features, proxy 1 tracks its hardest feature (the
//! one least similar to proxy 0). The bank is updated after each optimizer
//! step and never receives gradients.

use ndarray::ArrayView1;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{log_sum_exp, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Temporal average `v = (1/T) Σ f_t` of the rows of `frames`.
pub fn sequence_embed<T: Scalar>(frames: &Mat<T>) -> Result<Vec<T>> {
    if frames.nrows() == 0 {
        return Err(Error::Empty("sequence has no frames".into()));
    }
    let n = T::from_count(frames.nrows());
    Ok((0..frames.ncols())
        .map(|c| frames.column(c).iter().copied().sum::<T>() / n)
        .collect())
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn normalized<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = l2_norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::ZeroNorm("cannot normalize".into()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank<T> {
    /// `(Y · P) × d`; row `y · P + p` is proxy `p` of identity `y`.
    proxies: Mat<T>,
    initialized: Vec<bool>,
    num_identities: usize,
    per_identity: usize,
    momentum: T,
    temperature: T,
}

impl<T: Scalar> ProxyBank<T> {
    /// Bank with every proxy set to an independent random unit vector.
    pub fn new<R: Rng>(
        num_identities: usize,
        per_identity: usize,
        dim: usize,
        momentum: T,
        temperature: T,
        rng: &mut R,
    ) -> Result<Self> {
        if num_identities == 0 || per_identity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "proxy bank needs at least one identity, proxy and dimension".into(),
            ));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let mut proxies = Mat::zeros((num_identities * per_identity, dim));
        for mut row in proxies.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    let x: f64 = StandardNormal.sample(rng);
                    *v = T::lit(x);
                }
                let n = row.dot(&row).sqrt();
                if n > T::lit(1e-6) {
                    row.mapv_inplace(|v| v / n);
                    break;
                }
            }
        }
        Ok(Self {
            proxies,
            initialized: vec![false; num_identities],
            num_identities,
            per_identity,
            momentum,
            temperature,
        })
    }

    /// Rebuilds a bank from stored proxies (e.g. a checkpoint).
    pub fn from_parts(
        proxies: Mat<T>,
        initialized: Vec<bool>,
        per_identity: usize,
        momentum: T,
        temperature: T,
    ) -> Result<Self> {
        let num_identities = initialized.len();
        if per_identity == 0 || proxies.nrows() != num_identities * per_identity {
            return Err(Error::DimensionMismatch(format!(
                "{} proxy rows for {} identities × {} proxies",
                proxies.nrows(),
                num_identities,
                per_identity
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) || !(temperature > T::zero()) {
            return Err(Error::InvalidArgument("bad momentum or temperature".into()));
        }
        Ok(Self {
            proxies,
            initialized,
            num_identities,
            per_identity,
            momentum,
            temperature,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn per_identity(&self) -> usize {
        self.per_identity
    }

    pub fn dim(&self) -> usize {
        self.proxies.ncols()
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.proxies
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn is_initialized(&self, y: usize) -> bool {
        self.initialized[y]
    }

    fn check_identity(&self, y: usize) -> Result<()> {
        if y >= self.num_identities {
            return Err(Error::IndexOutOfRange(format!(
                "identity {y} (bank holds {})",
                self.num_identities
            )));
        }
        Ok(())
    }

    pub fn proxy(&self, y: usize, p: usize) -> ArrayView1<'_, T> {
        self.proxies.row(y * self.per_identity + p)
    }

    /// Sets every proxy of identity `y` to `normalize(v)`.
    pub fn initialize_identity(&mut self, y: usize, v: &[T]) -> Result<()> {
        self.check_identity(y)?;
        let u = normalized(v)?;
        for p in 0..self.per_identity {
            let r = y * self.per_identity + p;
            self.proxies.row_mut(r).assign(&ArrayView1::from(&u[..]));
        }
        self.initialized[y] = true;
        Ok(())
    }

    /// `M ← normalize(μ M + (1 − μ) v*)` for proxy `p` of identity `y`.
    pub fn update(&mut self, y: usize, p: usize, v_star: &[T]) -> Result<()> {
        self.check_identity(y)?;
        if p >= self.per_identity {
            return Err(Error::IndexOutOfRange(format!(
                "proxy {p} (bank holds {} per identity)",
                self.per_identity
            )));
        }
        if v_star.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "representative has {} entries, bank dim {}",
                v_star.len(),
                self.dim()
            )));
        }
        let n = l2_norm(v_star);
        if (n - T::one()).abs() > T::lit(1e-3) {
            return Err(Error::InvalidArgument(format!("representative norm {n} is not 1")));
        }
        let mu = self.momentum;
        let r = y * self.per_identity + p;
        let mut row = self.proxies.row_mut(r);
        for (m, &v) in row.iter_mut().zip(v_star) {
            *m = mu * *m + (T::one() - mu) * v;
        }
        let norm = row.dot(&row).sqrt();
        if norm > T::zero() {
            row.mapv_inplace(|v| v / norm);
        }
        Ok(())
    }

    /// Column indices of identity `y`'s proxies in the similarity matrix.
    pub fn proxy_columns(&self, y: usize) -> Vec<usize> {
        (y * self.per_identity..(y + 1) * self.per_identity).collect()
    }
}

/// Mean and hard representatives of one identity's batch features.
#[derive(Clone, Debug, PartialEq)]
pub struct Representatives<T> {
    pub mean: Vec<T>,
    pub hard: Vec<T>,
    pub hard_index: usize,
}

/// `mean` is the normalized average of `features`; `hard` is the normalized
/// feature least similar to identity `y`'s mean proxy (lowest index on ties).
pub fn select_representatives<T: Scalar>(
    features: &[Vec<T>],
    y: usize,
    bank: &ProxyBank<T>,
) -> Result<Representatives<T>> {
    if features.is_empty() {
        return Err(Error::Empty(format!("no features for identity {y}")));
    }
    bank.check_identity(y)?;
    let d = bank.dim();
    let mut mean = vec![T::zero(); d];
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} entries, bank dim {d}",
                f.len()
            )));
        }
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let mean = normalized(&mean)?;
    let anchor = bank.proxy(y, 0).to_vec();
    let mut hard_index = 0;
    let mut lowest = T::infinity();
    for (i, f) in features.iter().enumerate() {
        let c = cosine(f, &anchor);
        if c < lowest {
            lowest = c;
            hard_index = i;
        }
    }
    Ok(Representatives {
        mean,
        hard: normalized(&features[hard_index])?,
        hard_index,
    })
}

/// Memory-contrastive loss for one sequence feature:
/// `−log Σ_p exp(cos(v, M_y^p)/τ) / Σ_{y',p} exp(cos(v, M_{y'}^p)/τ)`.
pub fn memory_loss<T: Scalar>(v: &[T], y: usize, bank: &ProxyBank<T>) -> Result<T> {
    bank.check_identity(y)?;
    if v.len() != bank.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature has {} entries, bank dim {}",
            v.len(),
            bank.dim()
        )));
    }
    let u = normalized(v).map_err(|_| Error::ZeroNorm("memory loss input".into()))?;
    let tau = bank.temperature();
    let sims: Vec<T> = bank
        .matrix()
        .rows()
        .into_iter()
        .map(|m| {
            let dot: T = m.iter().zip(&u).map(|(&a, &b)| a * b).sum();
            dot / m.dot(&m).sqrt() / tau
        })
        .collect();
    let cols = bank.proxy_columns(y);
    let loss = log_sum_exp(sims.iter().copied()) - log_sum_exp(cols.iter().map(|&c| sims[c]));
    Ok(loss.max(T::zero()))
}

/// Batched memory loss on the tape. `v` is `B × d`; `labels` are zero-based.
pub fn memory_loss_graph<T: Scalar>(g: &mut Graph<T>, v: Var, labels: &[usize], bank: &ProxyBank<T>) -> Var {
    let u = g.l2_normalize_rows(v);
    let m = g.constant(bank.matrix().clone());
    let sims = g.matmul_bt(u, m);
    let sims = g.scale(sims, T::one() / bank.temperature());
    let positives: Vec<Vec<usize>> = labels.iter().map(|&y| bank.proxy_columns(y)).collect();
    g.multi_positive_nce(sims, &positives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn bank(y: usize, p: usize, d: usize, seed: u64) -> ProxyBank<f64> {
        ProxyBank::new(y, p, d, 0.2, 1.0, &mut stream(seed, &[])).unwrap()
    }

    /// Direct evaluation of the contrastive objective with plain exponentials.
    fn oracle_loss(v: &[f64], y: usize, proxies: &[Vec<Vec<f64>>], tau: f64) -> f64 {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |m: &Vec<f64>| {
            let nm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (nv * nm)
        };
        let num: f64 = proxies[y].iter().map(|m| (cos(m) / tau).exp()).sum();
        let den: f64 = proxies.iter().flatten().map(|m| (cos(m) / tau).exp()).sum();
        -(num / den).ln()
    }

    fn as_nested(b: &ProxyBank<f64>) -> Vec<Vec<Vec<f64>>> {
        (0..b.num_identities())
            .map(|y| (0..b.per_identity()).map(|p| b.proxy(y, p).to_vec()).collect())
            .collect()
    }

    #[test]
    fn sequence_embedding_cases() {
        let one = Mat::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(sequence_embed(&one).unwrap(), vec![1.0, -2.0, 0.5]);
        let two = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(sequence_embed(&two).unwrap(), vec![0.5, 0.5]);
        assert!(sequence_embed(&Mat::<f64>::zeros((0, 3))).is_err());

        let mut rng = stream(1, &[]);
        let m = Mat::from_shape_simple_fn((8, 5), || rng.random_range(-1.0f64..1.0));
        let v = sequence_embed(&m).unwrap();
        for c in 0..5 {
            let mut s = 0.0;
            for r in 0..8 {
                s += m[[r, c]];
            }
            assert!((s / 8.0 - v[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn representatives() {
        let mut b = bank(3, 2, 2, 0);
        b.initialize_identity(1, &[1.0, 0.0]).unwrap();
        let single = select_representatives(&[vec![3.0, 4.0]], 1, &b).unwrap();
        assert_eq!(single.mean, vec![0.6, 0.8]);
        assert_eq!(single.hard, single.mean);

        let r = select_representatives(&[vec![2.0, 0.0], vec![0.0, 1.0]], 1, &b).unwrap();
        assert_eq!(r.hard_index, 1);
        assert_eq!(r.hard, vec![0.0, 1.0]);

        assert!(select_representatives::<f64>(&[], 1, &b).is_err());
        assert!(select_representatives(&[vec![1.0, 0.0]], 3, &b).is_err());

        let mut rng = stream(2, &[]);
        let b = bank(2, 2, 6, 1);
        for _ in 0..50 {
            let feats: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let r = select_representatives(&feats, 0, &b).unwrap();
            let anchor = b.proxy(0, 0).to_vec();
            let mut best = 0;
            for i in 1..4 {
                let ci: f64 = feats[i].iter().zip(&anchor).map(|(a, b)| a * b).sum::<f64>() / l2_norm(&feats[i]);
                let cb: f64 = feats[best].iter().zip(&anchor).map(|(a, b)| a * b).sum::<f64>() / l2_norm(&feats[best]);
                if ci < cb {
                    best = i;
                }
            }
            assert_eq!(r.hard_index, best);
        }
    }

    #[test]
    fn momentum_update_cases() {
        let mut b = ProxyBank::<f64>::new(1, 1, 2, 0.0, 1.0, &mut stream(0, &[])).unwrap();
        b.update(0, 0, &[0.6, 0.8]).unwrap();
        assert_eq!(b.proxy(0, 0).to_vec(), vec![0.6, 0.8]);

        let mut b = ProxyBank::<f64>::new(1, 2, 2, 0.2, 1.0, &mut stream(0, &[])).unwrap();
        b.initialize_identity(0, &[1.0, 0.0]).unwrap();
        let untouched = b.proxy(0, 1).to_vec();
        b.update(0, 0, &[0.0, 1.0]).unwrap();
        let n = (0.2f64 * 0.2 + 0.8 * 0.8).sqrt();
        let got = b.proxy(0, 0).to_vec();
        assert!((got[0] - 0.2 / n).abs() < 1e-12 && (got[1] - 0.8 / n).abs() < 1e-12);
        assert!((got[0] - 0.242_535_6).abs() < 1e-6 && (got[1] - 0.970_142_5).abs() < 1e-6);
        assert_eq!(b.proxy(0, 1).to_vec(), untouched);

        assert!(ProxyBank::<f64>::new(1, 1, 2, 1.0, 1.0, &mut stream(0, &[])).is_err());
        assert!(b.update(0, 2, &[1.0, 0.0]).is_err());
        assert!(b.update(1, 0, &[1.0, 0.0]).is_err());
        assert!(b.update(0, 0, &[2.0, 0.0]).is_err());
    }

    #[test]
    fn update_is_fixed_at_its_own_proxy() {
        let mut b = bank(2, 2, 5, 7);
        let before = b.proxy(1, 1).to_vec();
        b.update(1, 1, &before).unwrap();
        for (x, y) in b.proxy(1, 1).iter().zip(&before) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_losses() {
        let b = bank(1, 3, 4, 2);
        assert_eq!(memory_loss(&[0.3, -1.0, 2.0, 0.1], 0, &b).unwrap(), 0.0);

        let m = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = ProxyBank::from_parts(m, vec![true, true], 1, 0.2, 1.0).unwrap();
        let l = memory_loss(&[1.0, 0.0], 0, &b).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);

        assert!(matches!(memory_loss(&[0.0, 0.0], 0, &b), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn matches_oracle_and_finite_differences() {
        let b = bank(5, 2, 6, 3);
        let nested = as_nested(&b);
        let mut rng = stream(4, &[]);
        for _ in 0..20 {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..5);
            let l = memory_loss(&v, y, &b).unwrap();
            assert!((l - oracle_loss(&v, y, &nested, 1.0)).abs() < 1e-6);

            let mut g = Graph::new();
            let x = g.variable(Mat::from_shape_vec((1, 6), v.clone()).unwrap());
            let loss = memory_loss_graph(&mut g, x, &[y], &b);
            assert!((g.scalar(loss) - l).abs() < 1e-12);
            let grad = g.backward(loss).get(x).unwrap().clone();
            for k in 0..6 {
                let h = 1e-6;
                let mut vp = v.clone();
                vp[k] += h;
                let mut vm = v.clone();
                vm[k] -= h;
                let fd = (oracle_loss(&vp, y, &nested, 1.0) - oracle_loss(&vm, y, &nested, 1.0)) / (2.0 * h);
                let err = (fd - grad[[0, k]]).abs() / fd.abs().max(grad[[0, k]].abs()).max(1e-8);
                assert!(err < 1e-3, "component {k}: {fd} vs {}", grad[[0, k]]);
            }
        }
    }

    #[test]
    fn small_temperature_is_stable() {
        let b = ProxyBank::<f64>::new(4, 2, 3, 0.2, 1e-3, &mut stream(8, &[])).unwrap();
        let l = memory_loss(&[0.2, -0.4, 0.9], 2, &b).unwrap();
        assert!(l.is_finite());
    }

    proptest! {
        #[test]
        fn loss_is_bounded(seed in 0u64..500, y in 0usize..4, tau in 0.05f64..2.0) {
            let b = ProxyBank::<f64>::new(4, 2, 5, 0.2, tau, &mut stream(seed, &[1])).unwrap();
            let mut rng = stream(seed, &[2]);
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = memory_loss(&v, y, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(l <= (8.0f64).ln() + 2.0 / tau + 1e-9);
        }

        #[test]
        fn proxies_stay_unit_norm(seed in 0u64..500, mu in 0.0f64..0.99) {
            let mut b = ProxyBank::<f64>::new(3, 2, 4, mu, 1.0, &mut stream(seed, &[5])).unwrap();
            let mut rng = stream(seed, &[6]);
            for _ in 0..10 {
                let v = normalized(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
                let y = rng.random_range(0..3);
                let p = rng.random_range(0..2);
                b.update(y, p, &v).unwrap();
                for row in b.matrix().rows() {
                    prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
