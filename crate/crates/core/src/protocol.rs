//! Cross-camera evaluation: a model trained on the forward trajectory is
//! scored on laterally shifted cameras of a synthetic dataset.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fisher::{check_tau, eig_map, partition, EigMap, FisherLedger};
use crate::formats::{csv_float, csv_opt};
use crate::image::RgbImage;
use crate::losses::ssim;
use crate::metrics::{eig_error_correlation, psnr, region_metrics, spearman, squared_error_map, Correlation, PSNR_CAP};
use crate::rasterizer::render;
use crate::scene::{Camera, Scene};
use crate::synth::Dataset;

/// Camera and reference image of a training frame at a lateral offset.
/// Offset 0 uses the training image, stored eval images are used when
/// present, and otherwise the ground-truth scene is rendered.
pub fn reference_view(data: &Dataset, frame: usize, offset: f64) -> Result<(Camera, RgbImage)> {
    let train = data
        .train
        .get(frame)
        .ok_or_else(|| Error::invalid("frame", format!("{frame} out of range 0..{}", data.train.len())))?;
    if offset == 0.0 {
        return Ok((train.camera, train.image.clone()));
    }
    if let Some(e) = data.eval.iter().find(|e| e.frame == frame && e.offset == offset) {
        return Ok((e.camera, e.image.clone()));
    }
    let cam = train.camera.shifted_laterally(offset);
    Ok((cam, render(&data.ground_truth, &cam, cam.timestamp)?.color))
}

/// Render, reference and EIG map of one evaluated view.
#[derive(Clone, Debug)]
pub struct ScoredView {
    pub frame: usize,
    pub offset: f64,
    pub render: RgbImage,
    pub reference: RgbImage,
    pub eig: EigMap,
}

pub fn score_view(scene: &Scene, ledger: &FisherLedger, data: &Dataset, frame: usize, offset: f64) -> Result<ScoredView> {
    let (cam, reference) = reference_view(data, frame, offset)?;
    Ok(ScoredView {
        frame,
        offset,
        render: render(scene, &cam, cam.timestamp)?.color,
        reference,
        eig: eig_map(scene, ledger, &cam)?,
    })
}

/// Score every `(frame, offset)` pair, frames in steps of `frame_stride`.
pub fn score_views(
    scene: &Scene,
    ledger: &FisherLedger,
    data: &Dataset,
    offsets: &[f64],
    frame_stride: usize,
) -> Result<Vec<ScoredView>> {
    if frame_stride == 0 {
        return Err(Error::invalid("frame_stride", "must be positive"));
    }
    if let Some(o) = offsets.iter().find(|o| !o.is_finite()) {
        return Err(Error::invalid("offsets", format!("offset {o} is not finite")));
    }
    let pairs: Vec<(usize, f64)> = offsets
        .iter()
        .flat_map(|&o| (0..data.train.len()).step_by(frame_stride).map(move |f| (f, o)))
        .collect();
    pairs
        .par_iter()
        .map(|&(f, o)| score_view(scene, ledger, data, f, o))
        .collect()
}

/// One row of the evaluation table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub frame: usize,
    pub offset: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ucr_fraction: f64,
    pub ucr_psnr: Option<f64>,
    pub ucr_ssim: Option<f64>,
    pub hpr_psnr: Option<f64>,
    pub hpr_ssim: Option<f64>,
    pub mean_eig: f64,
    /// EIG/error rank correlation; absent with fewer than 100 non-sky pixels.
    pub rho: Option<f64>,
}

pub const EVAL_HEADER: &str =
    "frame,offset,psnr,ssim,ucr_fraction,ucr_psnr,ucr_ssim,hpr_psnr,hpr_ssim,mean_eig,rho";

pub fn eval_row(view: &ScoredView, tau: f64) -> Result<EvalRow> {
    let part = partition(&view.eig, tau)?;
    let regions = region_metrics(&view.render, &view.reference, &part)?;
    let non_sky = view.eig.sky.data.iter().filter(|s| !**s).count();
    let rho = match eig_error_correlation(&view.render, &view.reference, &view.eig) {
        Ok(c) => Some(c.rho),
        Err(Error::InvalidArgument { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRow {
        frame: view.frame,
        offset: view.offset,
        psnr: psnr(&view.render, &view.reference)?,
        ssim: ssim(&view.render, &view.reference)?.0,
        ucr_fraction: if non_sky == 0 { 0.0 } else { part.ucr.count() as f64 / non_sky as f64 },
        ucr_psnr: regions.ucr.map(|r| r.psnr),
        ucr_ssim: regions.ucr.map(|r| r.ssim),
        hpr_psnr: regions.hpr.map(|r| r.psnr),
        hpr_ssim: regions.hpr.map(|r| r.ssim),
        mean_eig: view.eig.raw.mean(),
        rho,
    })
}

/// Evaluation table: one row per `(frame, offset)`.
pub fn evaluate(
    scene: &Scene,
    ledger: &FisherLedger,
    data: &Dataset,
    offsets: &[f64],
    tau: f64,
) -> Result<Vec<EvalRow>> {
    check_tau(tau)?;
    score_views(scene, ledger, data, offsets, 1)?
        .iter()
        .map(|v| eval_row(v, tau))
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            csv_float(r.offset),
            csv_float(r.psnr),
            csv_float(r.ssim),
            csv_float(r.ucr_fraction),
            csv_opt(r.ucr_psnr),
            csv_opt(r.ucr_ssim),
            csv_opt(r.hpr_psnr),
            csv_opt(r.hpr_ssim),
            format!("{:.6e}", r.mean_eig),
            csv_opt(r.rho),
        );
    }
    s
}

/// Threshold sweep pooled over several views: for each `τ`, PSNR over all
/// retained pixels (non-sky, normalized EIG ≤ τ) of all views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledSweepRow {
    pub tau: f64,
    pub retained_fraction: f64,
    pub retained: usize,
    pub psnr: Option<f64>,
}

pub fn pooled_sweep(views: &[ScoredView], thresholds: &[f64]) -> Result<Vec<PooledSweepRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds", "must be sorted ascending"));
    }
    let mut non_sky = 0usize;
    let errs: Vec<Vec<f64>> = views
        .iter()
        .map(|v| {
            non_sky += v.eig.sky.data.iter().filter(|s| !**s).count();
            squared_error_map(&v.render, &v.reference)
        })
        .collect::<Result<_>>()?;
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let (mut sum, mut n) = (0.0, 0usize);
            for (v, e) in views.iter().zip(&errs) {
                for p in 0..e.len() {
                    if !v.eig.sky.data[p] && v.eig.normalized.data[p] <= tau {
                        sum += e[p];
                        n += 1;
                    }
                }
            }
            PooledSweepRow {
                tau,
                retained_fraction: if non_sky == 0 { 0.0 } else { n as f64 / non_sky as f64 },
                retained: n,
                psnr: (n > 0).then(|| {
                    let mse = sum / n as f64;
                    if mse <= 0.0 {
                        PSNR_CAP
                    } else {
                        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
                    }
                }),
            }
        })
        .collect())
}

/// Spearman correlation between raw EIG and squared error over the non-sky
/// pixels of all views together.
pub fn pooled_correlation(views: &[ScoredView]) -> Result<Correlation> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for v in views {
        let e = squared_error_map(&v.render, &v.reference)?;
        for p in (0..e.len()).filter(|&p| !v.eig.sky.data[p]) {
            a.push(v.eig.raw.data[p]);
            b.push(e[p]);
        }
    }
    if a.len() < crate::metrics::MIN_CORRELATION_PIXELS {
        return Err(Error::invalid("views", format!("only {} non-sky pixels", a.len())));
    }
    spearman(&a, &b)
}

pub const SWEEP_HEADER: &str = "frame,offset,tau,retained_fraction,retained,psnr";

/// Sweep table: per-frame rows followed by pooled rows with frame `all`.
pub fn sweep_csv(views: &[ScoredView], thresholds: &[f64]) -> Result<String> {
    let mut s = format!("{SWEEP_HEADER}\n");
    for v in views {
        for r in crate::metrics::threshold_sweep(&v.render, &v.reference, &v.eig, thresholds)? {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                v.frame,
                csv_float(v.offset),
                csv_float(r.tau),
                csv_float(r.retained_fraction),
                r.retained,
                csv_opt(r.psnr)
            );
        }
    }
    let offset = views.first().map(|v| v.offset).unwrap_or(0.0);
    for r in pooled_sweep(views, thresholds)? {
        let _ = writeln!(
            s,
            "all,{},{},{},{},{}",
            csv_float(offset),
            csv_float(r.tau),
            csv_float(r.retained_fraction),
            r.retained,
            csv_opt(r.psnr)
        );
    }
    Ok(s)
}
