//! Image quality metrics and EIG-based evaluation protocols.

use crate::error::{Error, Result};
use crate::fisher::{EigMap, Partition};
use crate::image::{Mask, RgbImage};
use crate::losses::ssim_map;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;
/// Non-sky pixels required for a rank correlation.
pub const MIN_CORRELATION_PIXELS: usize = 100;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.same_shape(b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn check_mask(a: &RgbImage, mask: &Mask) -> Result<()> {
    if mask.width != a.width || mask.height != a.height {
        return Err(Error::shape(
            format!("{}x{} mask", a.width, a.height),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    Ok(())
}

/// PSNR over the pixels selected by `mask`.
pub fn masked_psnr(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    a.same_shape(b)?;
    check_mask(a, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::invalid("mask", "mask selects no pixels"));
    }
    let mut sum = 0.0;
    for p in (0..a.pixel_count()).filter(|&p| mask.data[p]) {
        for ch in 0..3 {
            let d = a.data[3 * p + ch] - b.data[3 * p + ch];
            sum += d * d;
        }
    }
    Ok(psnr_from_mse(sum / (3 * n) as f64))
}

/// Mean SSIM over the pixels selected by `mask`.
pub fn masked_ssim(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    check_mask(a, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::invalid("mask", "mask selects no pixels"));
    }
    let map = ssim_map(a, b)?;
    let sum: f64 = (0..a.pixel_count())
        .filter(|&p| mask.data[p])
        .map(|p| map.data[3 * p..3 * p + 3].iter().sum::<f64>())
        .sum();
    Ok(sum / (3 * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    /// Retained pixels over non-sky pixels.
    pub retained_fraction: f64,
    pub retained: usize,
    /// Absent when nothing is retained.
    pub psnr: Option<f64>,
}

/// For each threshold, PSNR over the non-sky pixels whose normalized EIG is
/// at most `τ`. Thresholds must be sorted ascending.
pub fn threshold_sweep(render: &RgbImage, gt: &RgbImage, eig: &EigMap, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    render.same_shape(gt)?;
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds", "must be sorted ascending"));
    }
    let non_sky = eig.sky.data.iter().filter(|s| !**s).count();
    thresholds
        .iter()
        .map(|&tau| {
            let mask = Mask::from_fn(render.width, render.height, |p| {
                !eig.sky.data[p] && eig.normalized.data[p] <= tau
            });
            let retained = mask.count();
            Ok(SweepRow {
                tau,
                retained_fraction: if non_sky == 0 { 0.0 } else { retained as f64 / non_sky as f64 },
                retained,
                psnr: if retained == 0 { None } else { Some(masked_psnr(render, gt, &mask)?) },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScore {
    pub psnr: f64,
    pub ssim: f64,
    pub pixels: usize,
}

/// Scores for the uncertain and high-confidence regions; `None` when a
/// region is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub ucr: Option<RegionScore>,
    pub hpr: Option<RegionScore>,
}

/// Score one region. Outside the region the reference is replaced by the
/// render itself, so pixels of other regions cannot influence the result.
fn region_score(render: &RgbImage, gt: &RgbImage, region: &Mask) -> Result<Option<RegionScore>> {
    if region.count() == 0 {
        return Ok(None);
    }
    let mut filled = render.clone();
    for p in (0..render.pixel_count()).filter(|&p| region.data[p]) {
        filled.data[3 * p..3 * p + 3].copy_from_slice(&gt.data[3 * p..3 * p + 3]);
    }
    Ok(Some(RegionScore {
        psnr: masked_psnr(render, &filled, region)?,
        ssim: masked_ssim(render, &filled, region)?,
        pixels: region.count(),
    }))
}

pub fn region_metrics(render: &RgbImage, gt: &RgbImage, masks: &Partition) -> Result<RegionMetrics> {
    render.same_shape(gt)?;
    check_mask(render, &masks.ucr)?;
    Ok(RegionMetrics {
        ucr: region_score(render, gt, &masks.ucr)?,
        hpr: region_score(render, gt, &masks.hpr)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
    pub pixels: usize,
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Constant inputs give `(0, degenerate)`.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Ok(Correlation {
            rho: 0.0,
            degenerate: true,
            pixels: a.len(),
        });
    }
    Ok(Correlation {
        rho: cov / (va * vb).sqrt(),
        degenerate: false,
        pixels: a.len(),
    })
}

/// Per-pixel squared error, averaged over channels.
pub fn squared_error_map(render: &RgbImage, gt: &RgbImage) -> Result<Vec<f64>> {
    render.same_shape(gt)?;
    Ok((0..render.pixel_count())
        .map(|p| (0..3).map(|c| (render.data[3 * p + c] - gt.data[3 * p + c]).powi(2)).sum::<f64>() / 3.0)
        .collect())
}

/// Spearman correlation between raw EIG and squared error over non-sky pixels.
pub fn eig_error_correlation(render: &RgbImage, gt: &RgbImage, eig: &EigMap) -> Result<Correlation> {
    let err = squared_error_map(render, gt)?;
    let keep: Vec<usize> = (0..render.pixel_count()).filter(|&p| !eig.sky.data[p]).collect();
    if keep.len() < MIN_CORRELATION_PIXELS {
        return Err(Error::invalid(
            "eig",
            format!("need at least {MIN_CORRELATION_PIXELS} non-sky pixels, got {}", keep.len()),
        ));
    }
    let a: Vec<f64> = keep.iter().map(|&p| eig.raw.data[p]).collect();
    let b: Vec<f64> = keep.iter().map(|&p| err[p]).collect();
    spearman(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{normalize, partition};
    use crate::image::ScalarImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        RgbImage::from_vec(w, h, (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::new(4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &RgbImage::filled(4, 4, [1.0; 3])).unwrap()).abs() < 1e-12);
        assert!((psnr(&a, &RgbImage::filled(4, 4, [0.1; 3])).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &RgbImage::new(3, 4)).is_err());
    }

    #[test]
    fn masked_psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_image(&mut rng, 8, 6), random_image(&mut rng, 8, 6));
        let full = Mask::new(8, 6, true);
        assert_eq!(masked_psnr(&a, &b, &full).unwrap(), psnr(&a, &b).unwrap());
        assert!(masked_psnr(&a, &b, &Mask::new(8, 6, false)).is_err());
        let mut c = b.clone();
        c.set(0, 0, a.get(0, 0));
        let one = Mask::from_fn(8, 6, |p| p == 0);
        assert_eq!(masked_psnr(&a, &c, &one).unwrap(), PSNR_CAP);
        let mask = Mask::from_fn(8, 6, |p| p % 3 == 1);
        let sel: Vec<usize> = (0..48).filter(|p| p % 3 == 1).collect();
        let m: f64 = sel
            .iter()
            .flat_map(|&p| (0..3).map(move |c| (p, c)))
            .map(|(p, c)| (a.data[3 * p + c] - b.data[3 * p + c]).powi(2))
            .sum::<f64>()
            / (3 * sel.len()) as f64;
        assert!((masked_psnr(&a, &b, &mask).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    fn map_from(values: Vec<f64>, w: usize, h: usize, sky: impl Fn(usize) -> bool) -> EigMap {
        normalize(ScalarImage::from_vec(w, h, values).unwrap(), Mask::from_fn(w, h, sky), 0)
    }

    #[test]
    fn sweep_boundaries_and_monotone_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (12, 12);
        let (a, b) = (random_image(&mut rng, w, h), random_image(&mut rng, w, h));
        let eig = map_from((0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(), w, h, |p| p < 10);
        let rows = threshold_sweep(&a, &b, &eig, &[0.0, 0.2, 0.5, 1.0]).unwrap();
        assert!(rows.windows(2).all(|r| r[0].retained_fraction <= r[1].retained_fraction));
        assert_eq!(rows[3].retained_fraction, 1.0);
        let non_sky = Mask::from_fn(w, h, |p| p >= 10);
        assert_eq!(rows[3].psnr.unwrap(), masked_psnr(&a, &b, &non_sky).unwrap());
        assert!(rows[0].retained <= 1);
        assert!(threshold_sweep(&a, &b, &eig, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn regions_are_disjoint_in_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (16, 16);
        let render = random_image(&mut rng, w, h);
        let eig = map_from((0..w * h).map(|p| if p % 16 < 8 { 1.0 } else { 0.1 }).collect(), w, h, |_| false);
        let part = partition(&eig, 0.4).unwrap();
        let same = region_metrics(&render, &render, &part).unwrap();
        assert_eq!(same.ucr.unwrap().psnr, PSNR_CAP);
        assert_eq!(same.hpr.unwrap().psnr, PSNR_CAP);
        let mut gt = render.clone();
        for p in (0..w * h).filter(|&p| part.ucr.data[p]) {
            gt.set(p % w, p / w, [0.0, 1.0, 0.5]);
        }
        let m = region_metrics(&render, &gt, &part).unwrap();
        assert_eq!(m.hpr.unwrap().psnr, PSNR_CAP);
        assert_eq!(m.hpr.unwrap().ssim, same.hpr.unwrap().ssim);
        assert!(m.ucr.unwrap().psnr < 30.0);
        let empty = partition(&eig, 1.0).unwrap();
        assert!(region_metrics(&render, &gt, &empty).unwrap().ucr.is_none());
    }

    #[test]
    fn spearman_cases() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let c = spearman(&a, &a).unwrap();
        assert!((c.rho - 1.0).abs() < 1e-12 && !c.degenerate);
        let c = spearman(&a, &vec![1.0; 200]).unwrap();
        assert!(c.degenerate && c.rho == 0.0);
    }

    #[test]
    fn eig_equal_to_error_correlates_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (12, 12);
        let (a, b) = (random_image(&mut rng, w, h), random_image(&mut rng, w, h));
        let err = squared_error_map(&a, &b).unwrap();
        let eig = map_from(err.clone(), w, h, |_| false);
        let c = eig_error_correlation(&a, &b, &eig).unwrap();
        assert!((c.rho - 1.0).abs() < 1e-12);
        let small = map_from(err[..16].to_vec(), 4, 4, |_| false);
        let (a4, b4) = (random_image(&mut rng, 4, 4), random_image(&mut rng, 4, 4));
        assert!(eig_error_correlation(&a4, &b4, &small).is_err());
    }

    proptest::proptest! {
        #[test]
        fn spearman_invariant_under_monotone_transform(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..150).map(|_| rng.random_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..150).map(|_| rng.random_range(0.0..1.0)).collect();
            let sq: Vec<f64> = a.iter().map(|x| x * x).collect();
            let r1 = spearman(&a, &b).unwrap().rho;
            let r2 = spearman(&sq, &b).unwrap().rho;
            proptest::prop_assert!((r1 - r2).abs() < 1e-12);
        }
    }
}
