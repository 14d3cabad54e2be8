//! Restorers: components that edit a novel-view render inside its high-EIG
//! region and leave every other pixel untouched.
//!
//! The edit mask `M` is the UCR of the view's EIG map at the restorer's
//! threshold. Outside `M` every built-in restorer returns the input bits
//! unchanged.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fisher::{partition, EigMap, DEFAULT_TAU};
use crate::image::{Mask, RgbImage, ScalarImage};

/// Restoration stage: early rounds operate on frame windows with temporal
/// smoothing, late rounds on single frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Video,
    Frame,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Video => "video_stage",
            Stage::Frame => "frame_stage",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video_stage" => Ok(Stage::Video),
            "frame_stage" => Ok(Stage::Frame),
            other => Err(Error::invalid("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// One frame handed to a restorer.
#[derive(Clone, Copy, Debug)]
pub struct RestoreInput<'a> {
    pub image: &'a RgbImage,
    pub eig: &'a EigMap,
    /// Reference image, when the protocol has one.
    pub ground_truth: Option<&'a RgbImage>,
    /// Per-frame seed for stochastic restorers.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RestoredView {
    pub image: RgbImage,
    /// Edit mask `M`.
    pub mask: Mask,
    /// Normalized EIG used as blend weight.
    pub weight: ScalarImage,
    pub restorer: String,
    pub stage: Stage,
    pub tau: f64,
    pub seed: u64,
}

pub trait Restorer: Send + Sync {
    fn name(&self) -> &str;

    /// Edit threshold on the normalized EIG map.
    fn tau(&self) -> f64;

    /// Restore a temporally ordered window of frames.
    fn restore_window(&self, frames: &[RestoreInput<'_>], stage: Stage) -> Result<Vec<RestoredView>>;

    fn restore(&self, frame: RestoreInput<'_>, stage: Stage) -> Result<RestoredView> {
        Ok(self.restore_window(std::slice::from_ref(&frame), stage)?.remove(0))
    }
}

fn edit_mask(input: &RestoreInput<'_>, tau: f64) -> Result<Mask> {
    let (w, h) = (input.image.width, input.image.height);
    if input.eig.normalized.width != w || input.eig.normalized.height != h {
        return Err(Error::shape(
            format!("{w}x{h} EIG map"),
            format!("{}x{}", input.eig.normalized.width, input.eig.normalized.height),
        ));
    }
    Ok(partition(input.eig, tau)?.ucr)
}

fn view(
    image: RgbImage,
    mask: Mask,
    input: &RestoreInput<'_>,
    name: &str,
    stage: Stage,
    tau: f64,
) -> RestoredView {
    RestoredView {
        image,
        mask,
        weight: input.eig.normalized.clone(),
        restorer: name.to_string(),
        stage,
        tau,
        seed: input.seed,
    }
}

fn check_tau(tau: f64) -> Result<f64> {
    crate::fisher::check_tau(tau)?;
    Ok(tau)
}

/// Returns its input.
#[derive(Clone, Copy, Debug)]
pub struct IdentityRestorer {
    pub tau: f64,
}

impl Default for IdentityRestorer {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl Restorer for IdentityRestorer {
    fn name(&self) -> &str {
        "identity"
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn restore_window(&self, frames: &[RestoreInput<'_>], stage: Stage) -> Result<Vec<RestoredView>> {
        frames
            .iter()
            .map(|f| Ok(view(f.image.clone(), edit_mask(f, self.tau)?, f, self.name(), stage, self.tau)))
            .collect()
    }
}

/// Blends toward the ground truth: `in + M·λ_EIG·(gt − in)`. In the video
/// stage the injected residual is box-filtered over neighbouring frames
/// (radius 1) before being masked.
#[derive(Clone, Copy, Debug)]
pub struct OracleRestorer {
    pub tau: f64,
}

impl Default for OracleRestorer {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl OracleRestorer {
    pub fn new(tau: f64) -> Result<Self> {
        Ok(Self { tau: check_tau(tau)? })
    }
}

impl Restorer for OracleRestorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn restore_window(&self, frames: &[RestoreInput<'_>], stage: Stage) -> Result<Vec<RestoredView>> {
        let mut residuals = Vec::with_capacity(frames.len());
        let mut masks = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let gt = f.ground_truth.ok_or_else(|| Error::Restorer {
                restorer: self.name().into(),
                message: format!("frame {i} has no ground truth"),
            })?;
            f.image.same_shape(gt)?;
            let mask = edit_mask(f, self.tau)?;
            let mut r = vec![0.0; f.image.data.len()];
            for p in (0..f.image.pixel_count()).filter(|&p| mask.data[p]) {
                let l = f.eig.normalized.data[p];
                for ch in 0..3 {
                    let k = 3 * p + ch;
                    r[k] = l * (gt.data[k] - f.image.data[k]);
                }
            }
            residuals.push(r);
            masks.push(mask);
        }
        let mut out = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let lo = if stage == Stage::Video { i.saturating_sub(1) } else { i };
            let hi = if stage == Stage::Video { (i + 1).min(frames.len() - 1) } else { i };
            let shapes_match = (lo..=hi).all(|j| residuals[j].len() == residuals[i].len());
            let mask = &masks[i];
            let mut img = f.image.clone();
            for p in (0..img.pixel_count()).filter(|&p| mask.data[p]) {
                for ch in 0..3 {
                    let k = 3 * p + ch;
                    let r = if shapes_match {
                        (lo..=hi).map(|j| residuals[j][k]).sum::<f64>() / (hi - lo + 1) as f64
                    } else {
                        residuals[i][k]
                    };
                    img.data[k] += r;
                }
            }
            out.push(view(img, mask.clone(), f, self.name(), stage, self.tau));
        }
        Ok(out)
    }
}

/// Adds seeded uniform noise in `[-noise, noise]` inside `M`, clamped to
/// `[0, 1]`. Models a restorer that hallucinates wrong content.
#[derive(Clone, Copy, Debug)]
pub struct DegradeRestorer {
    pub tau: f64,
    pub noise: f64,
}

impl DegradeRestorer {
    pub fn new(tau: f64, noise: f64) -> Result<Self> {
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::invalid("noise", format!("must be non-negative, got {noise}")));
        }
        Ok(Self {
            tau: check_tau(tau)?,
            noise,
        })
    }
}

impl Restorer for DegradeRestorer {
    fn name(&self) -> &str {
        "degrade"
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn restore_window(&self, frames: &[RestoreInput<'_>], stage: Stage) -> Result<Vec<RestoredView>> {
        frames
            .iter()
            .map(|f| {
                let mask = edit_mask(f, self.tau)?;
                let mut img = f.image.clone();
                if self.noise > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
                    for p in (0..img.pixel_count()).filter(|&p| mask.data[p]) {
                        for ch in 0..3 {
                            let k = 3 * p + ch;
                            let n = rng.random_range(-self.noise..=self.noise);
                            img.data[k] = (img.data[k] + n).clamp(0.0, 1.0);
                        }
                    }
                }
                Ok(view(img, mask, f, self.name(), stage, self.tau))
            })
            .collect()
    }
}

pub const RESTORER_NAMES: [&str; 3] = ["identity", "oracle", "degrade"];

/// Build a built-in restorer by name.
pub fn restorer_by_name(name: &str, tau: f64, noise: f64) -> Result<Box<dyn Restorer>> {
    check_tau(tau)?;
    match name {
        "identity" => Ok(Box::new(IdentityRestorer { tau })),
        "oracle" => Ok(Box::new(OracleRestorer::new(tau)?)),
        "degrade" => Ok(Box::new(DegradeRestorer::new(tau, noise)?)),
        other => Err(Error::invalid(
            "restorer",
            format!("unknown restorer `{other}`; valid names: {}", RESTORER_NAMES.join(", ")),
        )),
    }
}

/// Text manifest written next to a restored PPM.
pub fn manifest(view: &RestoredView) -> String {
    format!(
        "restorer = {}\nstage = {}\ntau = {}\nseed = {}\nedited_pixels = {}\n",
        view.restorer,
        view.stage,
        view.tau,
        view.seed,
        view.mask.count()
    )
}
