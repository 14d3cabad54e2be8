//! Diagonal Fisher ledger over training views and expected information gain
//! of novel views.
//!
//! With a diagonal Fisher approximation `H`, the information a novel view adds
//! to the posterior is `½ log det(I + H_prior⁻¹ H_novel)`. This is bounded by
//! its trace `½ tr(H_prior⁻¹ H_novel)`, which for diagonal matrices is
//! `½ Σ_k h_novel,k / (h_prior,k + λ)`. The bound is what gets rendered.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradients::{per_gaussian_gradsq, per_param_gradsq};
use crate::image::{Mask, ScalarImage};
use crate::rasterizer::{render, render_scalar_field};
use crate::scene::{Camera, Scene};

/// Ratio between the default regularizer and the mean positive ledger entry.
pub const DEFAULT_LAMBDA_RATIO: f64 = 1e-2;
/// Pixels with accumulated opacity below this count as sky.
pub const SKY_OPACITY: f64 = 0.05;
/// Default UCR threshold on the normalized map.
pub const DEFAULT_TAU: f64 = 0.4;
const LAMBDA_FLOOR: f64 = 1e-12;

/// Per-Gaussian accumulated squared gradients over the training views, with
/// the regularizer `λ_reg` frozen at the first [`FisherLedger::finalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherLedger {
    entries: Vec<f64>,
    lambda_reg: Option<f64>,
    views: u64,
}

impl FisherLedger {
    pub fn new(len: usize) -> Self {
        Self {
            entries: vec![0.0; len],
            lambda_reg: None,
            views: 0,
        }
    }

    pub fn from_parts(entries: Vec<f64>, lambda_reg: Option<f64>, views: u64) -> Result<Self> {
        if entries.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("ledger", "entries must be finite and non-negative"));
        }
        if let Some(l) = lambda_reg {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::invalid("lambda_reg", format!("must be positive, got {l}")));
            }
        }
        Ok(Self {
            entries,
            lambda_reg,
            views,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of views accumulated so far.
    pub fn views(&self) -> u64 {
        self.views
    }

    /// The frozen regularizer, if finalized.
    pub fn lambda_reg(&self) -> Option<f64> {
        self.lambda_reg
    }

    /// Add one view's per-Gaussian squared gradients.
    pub fn accumulate(&mut self, gradsq: &[f64]) -> Result<()> {
        if gradsq.len() != self.entries.len() {
            return Err(Error::shape(self.entries.len(), gradsq.len()));
        }
        for (e, g) in self.entries.iter_mut().zip(gradsq) {
            *e += g;
        }
        self.views += 1;
        Ok(())
    }

    /// Default regularizer for the current entries.
    pub fn default_lambda(&self) -> f64 {
        let (sum, n) = self
            .entries
            .iter()
            .filter(|v| **v > 0.0)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            return LAMBDA_FLOOR;
        }
        (DEFAULT_LAMBDA_RATIO * sum / n as f64).max(LAMBDA_FLOOR)
    }

    /// Freeze `λ_reg` (to the default unless already set) and return it.
    /// Later accumulation leaves it unchanged.
    pub fn finalize(&mut self) -> f64 {
        let lambda = self.effective_lambda();
        *self.lambda_reg.get_or_insert(lambda)
    }

    /// Freeze `λ_reg` to an explicit value.
    pub fn set_lambda_reg(&mut self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda_reg", format!("must be positive, got {lambda}")));
        }
        self.lambda_reg = Some(lambda);
        Ok(())
    }

    /// The frozen regularizer, or the default for the current entries.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda_reg.unwrap_or_else(|| self.default_lambda())
    }

    /// Keep entries where `keep` is true, then append `extra` new entries
    /// (e.g. for Gaussians added by densification).
    pub fn remap(&mut self, keep: &[bool], extra: &[f64]) -> Result<()> {
        if keep.len() != self.entries.len() {
            return Err(Error::shape(self.entries.len(), keep.len()));
        }
        let mut out: Vec<f64> = self.entries.iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
        out.extend_from_slice(extra);
        self.entries = out;
        Ok(())
    }

    /// Reset entries and view count, keeping `λ_reg`.
    pub fn clear(&mut self, len: usize) {
        self.entries = vec![0.0; len];
        self.views = 0;
    }
}

/// Accumulate every camera (at its own timestamp) into `ledger`.
pub fn accumulate_views(ledger: &mut FisherLedger, scene: &Scene, cams: &[Camera]) -> Result<()> {
    if ledger.len() != scene.cloud.len() {
        return Err(Error::shape(scene.cloud.len(), ledger.len()));
    }
    for cam in cams {
        ledger.accumulate(&per_gaussian_gradsq(scene, cam, cam.timestamp)?)?;
    }
    Ok(())
}

/// Build a finalized ledger from the training cameras.
pub fn build_ledger(scene: &Scene, cams: &[Camera]) -> Result<FisherLedger> {
    let mut ledger = FisherLedger::new(scene.cloud.len());
    accumulate_views(&mut ledger, scene, cams)?;
    ledger.finalize();
    Ok(ledger)
}

/// Per-Gaussian information gain of rendering `cam`:
/// `½ h_novel / (h_prior + λ_reg)`.
pub fn per_gaussian_eig(scene: &Scene, ledger: &FisherLedger, cam: &Camera) -> Result<Vec<f64>> {
    if ledger.len() != scene.cloud.len() {
        return Err(Error::shape(scene.cloud.len(), ledger.len()));
    }
    let lambda = ledger.effective_lambda();
    let novel = per_gaussian_gradsq(scene, cam, cam.timestamp)?;
    Ok(novel
        .iter()
        .zip(ledger.entries())
        .map(|(h, p)| 0.5 * h / (p + lambda))
        .collect())
}

/// Per-parameter information gain from per-parameter prior and novel
/// squared-gradient sums. Diagnostic counterpart of [`per_gaussian_eig`].
pub fn per_param_eig(prior: &[f64], novel: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if prior.len() != novel.len() {
        return Err(Error::shape(prior.len(), novel.len()));
    }
    Ok(novel.iter().zip(prior).map(|(h, p)| 0.5 * h / (p + lambda)).collect())
}

/// Per-parameter prior over several views, for use with [`per_param_eig`].
pub fn per_param_prior(scene: &Scene, cams: &[Camera]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; scene.cloud.params().len()];
    for cam in cams {
        for (a, g) in acc.iter_mut().zip(per_param_gradsq(scene, cam, cam.timestamp)?) {
            *a += g;
        }
    }
    Ok(acc)
}

/// Percentile of positive raw values used as the normalizer.
pub const NORMALIZE_PERCENTILE: f64 = 0.99;

/// A rendered information-gain map for one view.
#[derive(Clone, Debug)]
pub struct EigMap {
    /// Blended per-Gaussian EIG.
    pub raw: ScalarImage,
    /// `raw` divided by `scale`, clipped to `[0, 1]`; sky pixels are 0.
    pub normalized: ScalarImage,
    /// Pixels whose accumulated opacity is below [`SKY_OPACITY`].
    pub sky: Mask,
    /// Percentile of the positive raw values used as normalizer.
    pub percentile: f64,
    /// The normalizer; 0 when no pixel has positive EIG.
    pub scale: f64,
    pub raw_max: f64,
    /// Timestamp of the source camera.
    pub timestamp: usize,
}

pub fn eig_map(scene: &Scene, ledger: &FisherLedger, cam: &Camera) -> Result<EigMap> {
    let per_g = per_gaussian_eig(scene, ledger, cam)?;
    eig_map_from_values(scene, &per_g, cam)
}

/// Render and normalize a map from precomputed per-Gaussian EIG values.
pub fn eig_map_from_values(scene: &Scene, per_gaussian: &[f64], cam: &Camera) -> Result<EigMap> {
    let raw = render_scalar_field(scene, per_gaussian, cam, cam.timestamp)?;
    let opacity = render(scene, cam, cam.timestamp)?.opacity;
    let sky = Mask::from_fn(cam.width, cam.height, |p| opacity.data[p] < SKY_OPACITY);
    Ok(normalize(raw, sky, cam.timestamp))
}

/// Normalize a raw map given its sky mask.
pub fn normalize(raw: ScalarImage, sky: Mask, timestamp: usize) -> EigMap {
    let mut positive: Vec<f64> = raw.data.iter().copied().filter(|v| *v > 0.0).collect();
    let scale = percentile(&mut positive, NORMALIZE_PERCENTILE);
    let normalized = ScalarImage {
        width: raw.width,
        height: raw.height,
        data: raw
            .data
            .iter()
            .zip(&sky.data)
            .map(|(v, s)| if *s || scale <= 0.0 { 0.0 } else { (v / scale).clamp(0.0, 1.0) })
            .collect(),
    };
    EigMap {
        raw_max: raw.max(),
        raw,
        normalized,
        sky,
        percentile: NORMALIZE_PERCENTILE,
        scale,
        timestamp,
    }
}

/// Nearest-rank percentile; 0 for an empty slice.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Split of non-sky pixels into uncertain (UCR) and high-precision (HPR)
/// regions.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub ucr: Mask,
    pub hpr: Mask,
    pub tau: f64,
}

/// UCR: normalized EIG strictly above `tau`; HPR: the remaining non-sky pixels.
pub fn partition(map: &EigMap, tau: f64) -> Result<Partition> {
    check_tau(tau)?;
    let (w, h) = (map.normalized.width, map.normalized.height);
    let ucr = Mask::from_fn(w, h, |p| !map.sky.data[p] && map.normalized.data[p] > tau);
    let hpr = Mask::from_fn(w, h, |p| !map.sky.data[p] && !ucr.data[p]);
    Ok(Partition { ucr, hpr, tau })
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("tau", format!("threshold must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// Extremes of `tr(A) - log det(I + A)` over random PSD matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceBoundReport {
    pub matrices: usize,
    pub min_slack: f64,
    pub max_slack: f64,
    /// Matrices where the slack fell below `-1e-9 · max(1, tr A)`.
    pub violations: usize,
}

/// `log det(I + A)` of a symmetric PSD matrix via its eigenvalues.
pub fn logdet_identity_plus(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.iter().map(|l| l.max(0.0).ln_1p()).sum()
}

/// Check `log det(I + A) ≤ tr(A)` on `count` random PSD matrices
/// `A = B Bᵀ` with dimensions in `1..=max_dim`.
pub fn trace_bound_check(seed: u64, count: usize, max_dim: usize) -> TraceBoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TraceBoundReport {
        matrices: count,
        min_slack: f64::INFINITY,
        max_slack: f64::NEG_INFINITY,
        violations: 0,
    };
    for _ in 0..count {
        let n = rng.random_range(1..=max_dim.max(1));
        let k = rng.random_range(1..=n);
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let b = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0) * scale);
        let a = &b * b.transpose();
        let slack = a.trace() - logdet_identity_plus(&a);
        report.min_slack = report.min_slack.min(slack);
        report.max_slack = report.max_slack.max(slack);
        if slack < -1e-9 * a.trace().max(1.0) {
            report.violations += 1;
        }
    }
    report
}
