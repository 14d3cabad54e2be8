//! Photometric and depth objectives with pixel-space gradients.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied as a separable,
//! zero-padded convolution with output the size of the input.

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarImage};
use crate::rasterizer::RenderOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Rendered opacity a depth sample's pixel needs to be supervised.
pub const DEPTH_MIN_OPACITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Mix between L1 (1.0) and SSIM (0.0).
    pub lambda_r: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.8,
            lambda_d: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_r: f64, lambda_d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_r) {
            return Err(Error::invalid("lambda_r", format!("must lie in [0, 1], got {lambda_r}")));
        }
        if !(lambda_d >= 0.0) || !lambda_d.is_finite() {
            return Err(Error::invalid("lambda_d", format!("must be non-negative, got {lambda_d}")));
        }
        Ok(Self { lambda_r, lambda_d })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthSample {
    pub x: usize,
    pub y: usize,
    pub depth: f64,
    pub valid: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseDepth {
    pub samples: Vec<DepthSample>,
}

impl SparseDepth {
    pub fn new(samples: Vec<DepthSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A scalar loss with its gradients with respect to the rendered color and
/// depth images.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub d_color: RgbImage,
    pub d_depth: ScalarImage,
}

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    a.same_shape(b)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over pixels and channels, and its gradient with
/// respect to `rendered`.
pub fn l1_loss(rendered: &RgbImage, target: &RgbImage) -> Result<(f64, RgbImage)> {
    same_shape(rendered, target)?;
    let n = rendered.data.len().max(1) as f64;
    let mut grad = RgbImage::new(rendered.width, rendered.height);
    let mut sum = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = a - b;
        sum += d.abs();
        *g = sign(d) / n;
    }
    Ok((sum / n, grad))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Zero-padded separable blur with the SSIM window. Self-adjoint because
/// the kernel is symmetric.
fn blur(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel, per-channel SSIM values, interleaved like [`RgbImage`].
pub fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<RgbImage> {
    Ok(ssim_core(a, b, None)?.0)
}

/// Channel-averaged SSIM and its gradient with respect to `a`.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage)> {
    let n = a.data.len().max(1) as f64;
    let weights = vec![1.0 / n; a.data.len()];
    let (map, grad) = ssim_core(a, b, Some(&weights))?;
    let value = map.data.iter().sum::<f64>() / n;
    Ok((value, grad.expect("weights given")))
}

/// SSIM map and, if `weights` (one per pixel and channel) are given, the
/// gradient of `Σ weights · S` with respect to `a`.
fn ssim_core(a: &RgbImage, b: &RgbImage, weights: Option<&[f64]>) -> Result<(RgbImage, Option<RgbImage>)> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "image",
            format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"),
        ));
    }
    let taps = gaussian_taps();
    let n = w * h;
    let mut map = RgbImage::new(w, h);
    let mut grad = weights.map(|_| RgbImage::new(w, h));
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let exx = blur(&sq(&x, &x), w, h, &taps);
        let eyy = blur(&sq(&y, &y), w, h, &taps);
        let exy = blur(&sq(&x, &y), w, h, &taps);
        let mut p_mu = vec![0.0; n];
        let mut p_var = vec![0.0; n];
        let mut p_cov = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            map.data[3 * p + ch] = s;
            if let Some(wt) = weights {
                let g = wt[3 * p + ch];
                let ds_dmu = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dvar = -s / b2;
                let ds_dcov = 2.0 * a1 / (b1 * b2);
                p_var[p] = g * ds_dvar;
                p_cov[p] = g * ds_dcov;
                p_mu[p] = g * ds_dmu - 2.0 * ux * p_var[p] - uy * p_cov[p];
            }
        }
        if let Some(gimg) = grad.as_mut() {
            let bmu = blur(&p_mu, w, h, &taps);
            let bvar = blur(&p_var, w, h, &taps);
            let bcov = blur(&p_cov, w, h, &taps);
            for p in 0..n {
                gimg.data[3 * p + ch] = bmu[p] + 2.0 * x[p] * bvar[p] + y[p] * bcov[p];
            }
        }
    }
    Ok((map, grad))
}

/// Mean absolute depth error over valid samples whose pixel has rendered
/// opacity ≥ 0.5, with its gradient with respect to the rendered depth.
pub fn depth_loss(depth: &ScalarImage, opacity: &ScalarImage, sparse: &SparseDepth) -> (f64, ScalarImage) {
    let mut grad = ScalarImage::new(depth.width, depth.height);
    let used: Vec<&DepthSample> = sparse
        .samples
        .iter()
        .filter(|s| {
            s.valid && s.x < depth.width && s.y < depth.height && opacity.get(s.x, s.y) >= DEPTH_MIN_OPACITY
        })
        .collect();
    if used.is_empty() {
        return (0.0, grad);
    }
    let n = used.len() as f64;
    let mut sum = 0.0;
    for s in used {
        let d = depth.get(s.x, s.y) - s.depth;
        sum += d.abs();
        let p = s.y * depth.width + s.x;
        grad.data[p] += sign(d) / n;
    }
    (sum / n, grad)
}

/// `λ_r · L1 + (1 − λ_r) · (1 − SSIM) + λ_d · depth`.
pub fn loss_original(render: &RenderOutput, target: &RgbImage, sparse: &SparseDepth, w: LossWeights) -> Result<Loss> {
    let (l1, g_l1) = l1_loss(&render.color, target)?;
    let mut value = w.lambda_r * l1;
    let mut d_color = g_l1;
    for g in d_color.data.iter_mut() {
        *g *= w.lambda_r;
    }
    if w.lambda_r < 1.0 {
        let (s, g_s) = ssim(&render.color, target)?;
        value += (1.0 - w.lambda_r) * (1.0 - s);
        for (g, gs) in d_color.data.iter_mut().zip(&g_s.data) {
            *g -= (1.0 - w.lambda_r) * gs;
        }
    }
    let (dl, mut d_depth) = depth_loss(&render.depth, &render.opacity, sparse);
    value += w.lambda_d * dl;
    for g in d_depth.data.iter_mut() {
        *g *= w.lambda_d;
    }
    Ok(Loss {
        value,
        d_color,
        d_depth,
    })
}

/// EIG-weighted image loss plus the unweighted depth term:
/// `mean_p λ_EIG(p) · (λ_r · |Δ|(p) + (1 − λ_r) · (1 − S)(p)) + λ_d · depth`,
/// where `|Δ|(p)` and `(1 − S)(p)` are channel means. The weight map is
/// treated as a constant.
pub fn loss_novel(
    render: &RenderOutput,
    restored: &RgbImage,
    eig_weight: &ScalarImage,
    sparse: &SparseDepth,
    w: LossWeights,
) -> Result<Loss> {
    let a = &render.color;
    same_shape(a, restored)?;
    if eig_weight.width != a.width || eig_weight.height != a.height {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", eig_weight.width, eig_weight.height),
        ));
    }
    let npix = a.pixel_count().max(1) as f64;
    let mut d_color = RgbImage::new(a.width, a.height);
    let mut value = 0.0;
    for p in 0..a.pixel_count() {
        let m = eig_weight.data[p];
        for ch in 0..3 {
            let d = a.data[3 * p + ch] - restored.data[3 * p + ch];
            value += m * w.lambda_r * d.abs() / 3.0;
            d_color.data[3 * p + ch] = m * w.lambda_r * sign(d) / (3.0 * npix);
        }
    }
    if w.lambda_r < 1.0 {
        let weights: Vec<f64> = (0..3 * a.pixel_count())
            .map(|i| -(1.0 - w.lambda_r) * eig_weight.data[i / 3] / (3.0 * npix))
            .collect();
        let (map, grad) = ssim_core(a, restored, Some(&weights))?;
        for p in 0..a.pixel_count() {
            let pen: f64 = (0..3).map(|ch| 1.0 - map.data[3 * p + ch]).sum::<f64>() / 3.0;
            value += eig_weight.data[p] * (1.0 - w.lambda_r) * pen;
        }
        for (g, gs) in d_color.data.iter_mut().zip(&grad.expect("weights given").data) {
            *g += gs;
        }
    }
    value /= npix;
    let (dl, mut d_depth) = depth_loss(&render.depth, &render.opacity, sparse);
    value += w.lambda_d * dl;
    for g in d_depth.data.iter_mut() {
        *g *= w.lambda_d;
    }
    Ok(Loss {
        value,
        d_color,
        d_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        RgbImage::from_vec(w, h, (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn render_of(color: RgbImage, depth: ScalarImage, opacity: ScalarImage) -> RenderOutput {
        RenderOutput {
            color,
            depth,
            opacity,
            contributors: None,
        }
    }

    /// Direct 2D windowed SSIM for one pixel and channel.
    fn naive_ssim(a: &RgbImage, b: &RgbImage, px: usize, py: usize, ch: usize) -> f64 {
        let taps = gaussian_taps();
        let r = (SSIM_WINDOW / 2) as isize;
        let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..SSIM_WINDOW {
            for i in 0..SSIM_WINDOW {
                let (x, y) = (px as isize + i as isize - r, py as isize + j as isize - r);
                if x < 0 || y < 0 || x >= a.width as isize || y >= a.height as isize {
                    continue;
                }
                let wgt = taps[i] * taps[j];
                let va = a.get(x as usize, y as usize)[ch];
                let vb = b.get(x as usize, y as usize)[ch];
                ux += wgt * va;
                uy += wgt * vb;
                xx += wgt * va * va;
                yy += wgt * vb * vb;
                xy += wgt * va * vb;
            }
        }
        let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
        ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
    }

    #[test]
    fn l1_examples() {
        let z = RgbImage::new(4, 3);
        let o = RgbImage::filled(4, 3, [1.0; 3]);
        assert_eq!(l1_loss(&z, &z).unwrap().0, 0.0);
        assert_eq!(l1_loss(&z, &o).unwrap().0, 1.0);
        assert!(l1_loss(&z, &RgbImage::new(3, 3)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_image(&mut rng, 5, 4), random_image(&mut rng, 5, 4));
        let oracle: f64 = (0..60).map(|i| (a.data[i] - b.data[i]).abs()).sum::<f64>() / 60.0;
        assert!((l1_loss(&a, &b).unwrap().0 - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_naive_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_image(&mut rng, 14, 12), random_image(&mut rng, 14, 12));
        let map = ssim_map(&a, &b).unwrap();
        let mut total = 0.0;
        for py in 0..12 {
            for px in 0..14 {
                for ch in 0..3 {
                    let n = naive_ssim(&a, &b, px, py, ch);
                    assert!((map.get(px, py)[ch] - n).abs() < 1e-9);
                    total += n;
                }
            }
        }
        assert!((ssim(&a, &b).unwrap().0 - total / (14.0 * 12.0 * 3.0)).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_symmetry_and_negative_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
        assert_eq!(ssim(&a, &a).unwrap().0, 1.0);
        assert!((ssim(&a, &b).unwrap().0 - ssim(&b, &a).unwrap().0).abs() < 1e-9);
        // stripes and their 0.5-centered flip
        let mut s = RgbImage::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x / 2) % 2 == 0 { 0.9 } else { 0.1 };
                s.set(x, y, [v; 3]);
            }
        }
        let mut f = s.clone();
        for v in f.data.iter_mut() {
            *v = 1.0 - *v;
        }
        assert!(ssim(&s, &f).unwrap().0 < 0.0);
        assert!(ssim(&RgbImage::new(10, 12), &RgbImage::new(10, 12)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random_image(&mut rng, 12, 11), random_image(&mut rng, 12, 11));
        let (_, g) = ssim(&a, &b).unwrap();
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut ap = a.clone();
            ap.data[i] += h;
            let mut am = a.clone();
            am.data[i] -= h;
            let fd = (ssim(&ap, &b).unwrap().0 - ssim(&am, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn depth_loss_examples() {
        let depth = ScalarImage::filled(4, 4, 2.0);
        let mut op = ScalarImage::filled(4, 4, 1.0);
        assert_eq!(depth_loss(&depth, &op, &SparseDepth::default()).0, 0.0);
        let exact = SparseDepth::new(vec![DepthSample {
            x: 1,
            y: 1,
            depth: 2.0,
            valid: true,
        }]);
        assert_eq!(depth_loss(&depth, &op, &exact).0, 0.0);
        let samples = SparseDepth::new(vec![
            DepthSample { x: 0, y: 0, depth: 3.0, valid: true },
            DepthSample { x: 1, y: 0, depth: 1.5, valid: true },
            DepthSample { x: 2, y: 0, depth: 9.0, valid: false },
            DepthSample { x: 3, y: 0, depth: 9.0, valid: true },
        ]);
        op.set(3, 0, 0.4);
        let (v, g) = depth_loss(&depth, &op, &samples);
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(g.get(0, 0), -0.5);
        assert_eq!(g.get(1, 0), 0.5);
        assert_eq!(g.get(3, 0), 0.0);
    }

    fn setup(seed: u64) -> (RenderOutput, RgbImage, SparseDepth, ScalarImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (13, 12);
        let a = random_image(&mut rng, w, h);
        let t = random_image(&mut rng, w, h);
        let depth = ScalarImage::from_vec(w, h, (0..w * h).map(|_| rng.random_range(1.0..5.0)).collect()).unwrap();
        let op = ScalarImage::from_vec(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let sparse = SparseDepth::new(
            (0..20)
                .map(|_| DepthSample {
                    x: rng.random_range(0..w),
                    y: rng.random_range(0..h),
                    depth: rng.random_range(1.0..5.0),
                    valid: true,
                })
                .collect(),
        );
        let mask = ScalarImage::from_vec(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (render_of(a, depth, op), t, sparse, mask)
    }

    #[test]
    fn composites_match_hand_assembly() {
        let (r, t, sparse, _) = setup(5);
        let w = LossWeights::new(0.7, 0.1).unwrap();
        let l = loss_original(&r, &t, &sparse, w).unwrap();
        let hand = 0.7 * l1_loss(&r.color, &t).unwrap().0
            + 0.3 * (1.0 - ssim(&r.color, &t).unwrap().0)
            + 0.1 * depth_loss(&r.depth, &r.opacity, &sparse).0;
        assert!((l.value - hand).abs() < 1e-9);
        let only_l1 = loss_original(&r, &t, &sparse, LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(only_l1.value, l1_loss(&r.color, &t).unwrap().0);
        let same = render_of(t.clone(), r.depth.clone(), r.opacity.clone());
        let exact = SparseDepth::default();
        assert!(loss_original(&same, &t, &exact, w).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn novel_loss_degeneracies_and_oracle() {
        let (r, t, sparse, mask) = setup(6);
        let w = LossWeights::default();
        let ones = ScalarImage::filled(r.color.width, r.color.height, 1.0);
        let unit = loss_novel(&r, &t, &ones, &sparse, w).unwrap();
        let orig = loss_original(&r, &t, &sparse, w).unwrap();
        assert!((unit.value - orig.value).abs() < 1e-9);
        for (a, b) in unit.d_color.data.iter().zip(&orig.d_color.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let zeros = ScalarImage::new(r.color.width, r.color.height);
        let z = loss_novel(&r, &t, &zeros, &sparse, w).unwrap();
        assert!((z.value - w.lambda_d * depth_loss(&r.depth, &r.opacity, &sparse).0).abs() < 1e-12);
        let l = loss_novel(&r, &t, &mask, &SparseDepth::default(), w).unwrap();
        let smap = ssim_map(&r.color, &t).unwrap();
        let n = r.color.pixel_count();
        let mut oracle = 0.0;
        for p in 0..n {
            let mut l1 = 0.0;
            let mut pen = 0.0;
            for ch in 0..3 {
                l1 += (r.color.data[3 * p + ch] - t.data[3 * p + ch]).abs() / 3.0;
                pen += (1.0 - smap.data[3 * p + ch]) / 3.0;
            }
            oracle += mask.data[p] * (w.lambda_r * l1 + (1.0 - w.lambda_r) * pen);
        }
        assert!((l.value - oracle / n as f64).abs() < 1e-9);
    }

    #[test]
    fn novel_loss_gradient_matches_finite_differences() {
        let (r, t, sparse, mask) = setup(7);
        let w = LossWeights::default();
        let l = loss_novel(&r, &t, &mask, &sparse, w).unwrap();
        let h = 1e-7;
        for i in (0..r.color.data.len()).step_by(11) {
            let mut rp = r.clone();
            rp.color.data[i] += h;
            let mut rm = r.clone();
            rm.color.data[i] -= h;
            let fd = (loss_novel(&rp, &t, &mask, &sparse, w).unwrap().value
                - loss_novel(&rm, &t, &mask, &sparse, w).unwrap().value)
                / (2.0 * h);
            assert!((fd - l.d_color.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights::new(1.2, 0.0).is_err());
        assert!(LossWeights::new(0.5, -1.0).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000, lr in 0.0f64..1.0, ld in 0.0f64..1.0) {
            let (r, t, sparse, mask) = setup(seed);
            let w = LossWeights::new(lr, ld).unwrap();
            proptest::prop_assert!(loss_original(&r, &t, &sparse, w).unwrap().value >= -1e-9);
            proptest::prop_assert!(loss_novel(&r, &t, &mask, &sparse, w).unwrap().value >= -1e-9);
        }
    }
}
