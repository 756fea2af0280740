//! Training-time augmentation: tracklet-consistent hue jitter, consistent
//! horizontal flip and per-frame random erasing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::Frame;

/// One hue-jitter draw for a whole tracklet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    /// Hue shift as a fraction of the full hue circle.
    pub phi: f32,
    pub applied: bool,
}

impl JitterParams {
    pub const NONE: JitterParams = JitterParams {
        phi: 0.0,
        applied: false,
    };
}

/// Draws the per-tracklet hue shift `phi ~ U(-h, h)`, applied with
/// probability `p_c`.
pub fn sample_jitter<R: Rng + ?Sized>(rng: &mut R, h: f32, p_c: f32) -> Result<JitterParams> {
    if !(0.0..=0.5).contains(&h) {
        return Err(Error::InvalidArgument(format!("hue bound {h} outside [0, 0.5]")));
    }
    if !(0.0..=1.0).contains(&p_c) {
        return Err(Error::InvalidArgument(format!(
            "jitter probability {p_c} outside [0, 1]"
        )));
    }
    // both draws always happen so the stream position does not depend on p_c
    let u: f32 = rng.random();
    let w: f32 = rng.random();
    let phi = (2.0 * w - 1.0) * h;
    Ok(JitterParams { phi, applied: u < p_c })
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let v = maxc;
    if maxc == minc {
        return [0.0, 0.0, v];
    }
    let span = maxc - minc;
    let s = span / maxc;
    let rc = (maxc - r) / span;
    let gc = (maxc - g) / span;
    let bc = (maxc - b) / span;
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    [(h / 6.0).rem_euclid(1.0), s, v]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates the hue of every pixel by `phi` (fraction of the hue circle).
/// Saturation and value are preserved.
pub fn adjust_hue(frame: &Frame, phi: f32) -> Frame {
    if phi.fract() == 0.0 {
        return frame.clone();
    }
    let mut out = frame.clone();
    for px in out.data.chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        if s == 0.0 {
            continue;
        }
        let rgb = hsv_to_rgb([(h + phi).rem_euclid(1.0), s, v]);
        px.copy_from_slice(&rgb);
    }
    out
}

/// Applies one jitter draw to every frame of a tracklet.
pub fn apply_tracklet(frames: &[Frame], params: JitterParams) -> Vec<Frame> {
    if !params.applied {
        return frames.to_vec();
    }
    frames.iter().map(|f| adjust_hue(f, params.phi)).collect()
}

pub fn flip_horizontal(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            out.set_pixel(y, x, frame.pixel(y, frame.width - 1 - x));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EraseConfig {
    pub flip_prob: f32,
    pub erase_prob: f32,
    pub min_area: f32,
    pub max_area: f32,
    pub min_aspect: f32,
    pub fill: [f32; 3],
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            erase_prob: 0.5,
            min_area: 0.02,
            max_area: 0.2,
            min_aspect: 0.3,
            fill: [0.5, 0.5, 0.5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples an erasing rectangle covering an area fraction within
/// `[min_area, max_area]` that fits inside a `height × width` image.
/// Returns `None` when no fitting rectangle is found within the attempt budget.
pub fn sample_erase_rect<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    config: &EraseConfig,
) -> Option<Rect> {
    let area = (height * width) as f32;
    let log_lo = config.min_aspect.ln();
    let log_hi = (1.0 / config.min_aspect).ln();
    for _ in 0..50 {
        let target = area * rng.random_range(config.min_area..=config.max_area);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= height || w >= width {
            continue;
        }
        let frac = (h * w) as f32 / area;
        if frac < config.min_area || frac > config.max_area {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        return Some(Rect {
            top,
            left,
            height: h,
            width: w,
        });
    }
    None
}

pub fn erase(frame: &Frame, rect: Rect, fill: [f32; 3]) -> Frame {
    let mut out = frame.clone();
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            out.set_pixel(y, x, fill);
        }
    }
    out
}

/// Flip decided once for the tracklet; erasing decided per frame.
pub fn flip_and_erase<R: Rng + ?Sized>(frames: &[Frame], rng: &mut R, config: &EraseConfig) -> Vec<Frame> {
    let flip = rng.random::<f32>() < config.flip_prob;
    frames
        .iter()
        .map(|f| {
            let f = if flip { flip_horizontal(f) } else { f.clone() };
            if rng.random::<f32>() < config.erase_prob {
                if let Some(rect) = sample_erase_rect(rng, f.height, f.width, config) {
                    return erase(&f, rect, config.fill);
                }
            }
            f
        })
        .collect()
}

/// Per-channel mean color over a set of frames.
pub fn mean_color<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> [f32; 3] {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for f in frames {
        for px in f.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += f64::from(px[c]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0.5; 3];
    }
    sum.map(|s| (s / n as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Frame::new(h, w);
        for v in f.data.iter_mut() {
            *v = rng.random();
        }
        f
    }

    /// Hue rotation oracle written against the textbook sector formulas in
    /// degrees, independent of the module's conversion code.
    fn oracle_hue_shift(rgb: [f64; 3], phi: f64) -> [f64; 3] {
        let [r, g, b] = rgb;
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let c = max - min;
        if c == 0.0 {
            return rgb;
        }
        let mut hdeg = if max == r {
            60.0 * (((g - b) / c).rem_euclid(6.0))
        } else if max == g {
            60.0 * ((b - r) / c + 2.0)
        } else {
            60.0 * ((r - g) / c + 4.0)
        };
        hdeg = (hdeg + phi * 360.0).rem_euclid(360.0);
        let x = c * (1.0 - ((hdeg / 60.0).rem_euclid(2.0) - 1.0).abs());
        let (r1, g1, b1) = match (hdeg / 60.0) as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = max - c;
        [r1 + m, g1 + m, b1 + m]
    }

    #[test]
    fn jitter_argument_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_jitter(&mut rng, 0.6, 0.5).is_err());
        assert!(sample_jitter(&mut rng, 0.3, 1.5).is_err());
        for _ in 0..100 {
            assert!(!sample_jitter(&mut rng, 0.3, 0.0).unwrap().applied);
            let p = sample_jitter(&mut rng, 0.0, 1.0).unwrap();
            assert!(p.applied);
            assert_eq!(p.phi, 0.0);
        }
    }

    #[test]
    fn jitter_rate_and_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let draws: Vec<_> = (0..n).map(|_| sample_jitter(&mut rng, 0.3, 0.5).unwrap()).collect();
        let rate = draws.iter().filter(|d| d.applied).count() as f64 / n as f64;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
        // Kolmogorov-Smirnov against U(-0.3, 0.3); 1% critical value 1.63/sqrt(n)
        let mut phis: Vec<f64> = draws.iter().map(|d| f64::from(d.phi)).collect();
        phis.sort_by(f64::total_cmp);
        let ks = phis
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = ((x + 0.3) / 0.6).clamp(0.0, 1.0);
                (cdf - i as f64 / n as f64)
                    .abs()
                    .max((cdf - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
        assert!(phis.iter().all(|p| p.abs() <= 0.3 + 1e-7));
    }

    #[test]
    fn red_rotates_to_green() {
        let f = Frame::filled(1, 1, [1.0, 0.0, 0.0]);
        let out = adjust_hue(&f, 1.0 / 3.0);
        let expect = oracle_hue_shift([1.0, 0.0, 0.0], 1.0 / 3.0);
        for c in 0..3 {
            assert!((f64::from(out.data[c]) - expect[c]).abs() < 1e-6);
        }
        assert!((out.data[1] - 1.0).abs() < 1e-6 && out.data[0].abs() < 1e-6 && out.data[2].abs() < 1e-6);
    }

    #[test]
    fn zero_shift_and_grayscale_are_identity() {
        let f = textured(6, 5, 1);
        assert_eq!(adjust_hue(&f, 0.0), f);
        let mut gray = Frame::new(6, 5);
        for (i, px) in gray.data.chunks_exact_mut(3).enumerate() {
            let v = i as f32 / 30.0;
            px.copy_from_slice(&[v, v, v]);
        }
        for phi in [0.1, -0.27, 0.5] {
            assert_eq!(adjust_hue(&gray, phi), gray);
        }
    }

    #[test]
    fn hue_shift_matches_oracle_on_random_pixels() {
        let f = textured(7, 9, 5);
        for phi in [0.2f32, -0.13, 0.45] {
            let out = adjust_hue(&f, phi);
            for (a, b) in f.data.chunks_exact(3).zip(out.data.chunks_exact(3)) {
                let e = oracle_hue_shift([a[0].into(), a[1].into(), a[2].into()], phi.into());
                for c in 0..3 {
                    assert!((f64::from(b[c]) - e[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn tracklet_application_is_consistent() {
        let frames: Vec<Frame> = (0..8).map(|i| textured(6, 4, 100 + i)).collect();
        assert_eq!(
            apply_tracklet(
                &frames,
                JitterParams {
                    phi: 0.2,
                    applied: false
                }
            ),
            frames
        );

        let params = JitterParams {
            phi: 0.2,
            applied: true,
        };
        let out = apply_tracklet(&frames, params);
        for (o, f) in out.iter().zip(&frames) {
            assert_eq!(o, &adjust_hue(f, 0.2));
        }

        let same = vec![textured(6, 4, 9); 8];
        let out = apply_tracklet(&same, params);
        assert!(out.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn flip_is_an_involution_and_consistent() {
        let f = textured(5, 4, 2);
        assert_eq!(flip_horizontal(&flip_horizontal(&f)), f);

        let cfg = EraseConfig {
            erase_prob: 0.0,
            ..EraseConfig::default()
        };
        let frames = vec![f.clone(); 6];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = flip_and_erase(&frames, &mut rng, &cfg);
            let flipped = out[0] != f;
            assert!(out.iter().all(|o| o == &out[0]));
            if flipped {
                assert_eq!(out[0], flip_horizontal(&f));
            }
        }
    }

    #[test]
    fn erase_rects_stay_in_bounds() {
        let cfg = EraseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut found = 0;
        for _ in 0..10_000 {
            if let Some(r) = sample_erase_rect(&mut rng, 56, 28, &cfg) {
                found += 1;
                assert!(r.top + r.height <= 56 && r.left + r.width <= 28);
                let frac = (r.height * r.width) as f32 / (56.0 * 28.0);
                assert!((cfg.min_area..=cfg.max_area).contains(&frac));
            }
        }
        assert!(found > 9_000);
    }

    proptest! {
        #[test]
        fn hue_shifts_compose(a in -0.5f32..0.5, b in -0.5f32..0.5, seed in 0u64..1000) {
            let f = textured(3, 3, seed);
            let lhs = adjust_hue(&adjust_hue(&f, a), b);
            let rhs = adjust_hue(&f, (a + b).rem_euclid(1.0));
            for (x, y) in lhs.data.iter().zip(&rhs.data) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
            prop_assert!(lhs.data.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        }
    }
}
