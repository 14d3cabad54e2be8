//! Forward rendering: projection to screen space, global depth sort, tile
//! binning and front-to-back alpha blending with sky compositing.
//!
//! Each splat's footprint is a Gaussian kernel truncated at a Mahalanobis
//! radius of 3. The truncation is C¹: the kernel is shifted by its first-order
//! Taylor expansion at the cutoff so both value and slope vanish there, then
//! renormalized to peak at 1. Without this the cutoff would be a step and the
//! rendered image would not be differentiable at the support boundary.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarImage};
use crate::scene::{rotation_matrix, sigmoid, Camera, GaussianCloud, Scene, LOG_SCALE, OPACITY, ROTATION, SH};
use crate::sh::ShBasis;

pub const TILE_SIZE: usize = 16;
/// Gaussians whose view-space depth is at or below this are culled.
pub const NEAR_PLANE: f64 = 0.2;
/// Low-pass dilation added to the screen-space covariance diagonal (px²).
pub const COV_DILATION: f64 = 0.3;
/// Squared Mahalanobis radius of the splat support.
pub const CUTOFF_SQ: f64 = 9.0;
/// Blending stops before a splat would push transmittance below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const MAX_ALPHA: f64 = 0.99;
/// Pixels whose accumulated opacity is below this report depth 0.
pub const DEPTH_OPACITY_EPS: f64 = 1e-6;
const FRUSTUM_GUARD: f64 = 1.3;

// exp(-CUTOFF_SQ / 2)
const EXP_CUTOFF: f64 = 0.011_108_996_538_242_306;
const KERNEL_NORM: f64 = 1.0 - EXP_CUTOFF * (1.0 + CUTOFF_SQ / 2.0);

/// Truncated kernel value and its derivative with respect to the squared
/// Mahalanobis distance `u`.
#[inline]
pub fn kernel(u: f64) -> (f64, f64) {
    if u >= CUTOFF_SQ {
        return (0.0, 0.0);
    }
    let e = (-0.5 * u).exp();
    let k = (e - EXP_CUTOFF * (1.0 + 0.5 * (CUTOFF_SQ - u))) / KERNEL_NORM;
    let dk = (-0.5 * e + 0.5 * EXP_CUTOFF) / KERNEL_NORM;
    (k, dk)
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in the cloud.
    pub index: usize,
    /// Pixel-space mean.
    pub mean: [f64; 2],
    /// Dilated screen covariance `[xx, xy, yy]` (px²).
    pub cov: [f64; 3],
    /// Inverse covariance `[a, b, c]`, evaluated as `a dx² + 2 b dx dy + c dy²`.
    pub conic: [f64; 3],
    /// View-space depth of the mean.
    pub depth: f64,
    /// Activated opacity.
    pub opacity: f64,
    /// Activated, clamped color.
    pub color: [f64; 3],
    /// Support radius (px) bounding the 3σ ellipse.
    pub radius: f64,
}

impl Splat2D {
    /// Squared Mahalanobis distance of the pixel center `(x, y)`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let [a, b, c] = self.conic;
        (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, dx, dy)
    }

    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let (u, _, _) = self.mahalanobis_sq(x, y);
        let (k, _) = kernel(u);
        (self.opacity * k).min(MAX_ALPHA)
    }
}

/// All intermediates of projecting one Gaussian; the backward pass replays
/// these to chain screen-space gradients to parameters.
#[derive(Clone, Debug)]
pub(crate) struct Projection {
    pub p_cam: Vector3<f64>,
    /// Clamped `x/z` and `y/z` used in the Jacobian, and whether clamping hit.
    pub tx: f64,
    pub ty: f64,
    pub tx_clamped: bool,
    pub ty_clamped: bool,
    pub jac: Matrix2x3<f64>,
    pub qhat: [f64; 4],
    pub qnorm: f64,
    pub rot: Matrix3<f64>,
    pub scales: Vector3<f64>,
    pub m: Matrix3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub dir: Vector3<f64>,
    pub dir_len: f64,
    pub basis: ShBasis,
    pub color_raw: [f64; 3],
    pub splat: Splat2D,
}

/// Project one world-space Gaussian parameter block. Returns `None` when the
/// Gaussian is behind the near plane or its support covers no pixel center.
pub(crate) fn project_block(index: usize, block: &[f64], degree: u8, cam: &Camera) -> Option<Projection> {
    let mu = Vector3::new(block[0], block[1], block[2]);
    let p_cam = cam.world_to_camera(&mu);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let z = p_cam.z;
    let lim_x = FRUSTUM_GUARD * cam.width as f64 / (2.0 * cam.fx);
    let lim_y = FRUSTUM_GUARD * cam.height as f64 / (2.0 * cam.fy);
    let (rx, ry) = (p_cam.x / z, p_cam.y / z);
    let tx = rx.clamp(-lim_x, lim_x);
    let ty = ry.clamp(-lim_y, lim_y);
    let jac = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * tx / z, 0.0, cam.fy / z, -cam.fy * ty / z);

    let q = [block[ROTATION], block[ROTATION + 1], block[ROTATION + 2], block[ROTATION + 3]];
    let qnorm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let qhat = q.map(|v| v / qnorm);
    let rot = rotation_matrix(qhat);
    let scales = Vector3::new(block[LOG_SCALE].exp(), block[LOG_SCALE + 1].exp(), block[LOG_SCALE + 2].exp());
    let m = rot * Matrix3::from_diagonal(&scales);
    let cov3 = m * m.transpose();
    let cov_cam = cam.rotation * cov3 * cam.rotation.transpose();
    let mut cov2 = jac * cov_cam * jac.transpose();
    cov2[(0, 0)] += COV_DILATION;
    cov2[(1, 1)] += COV_DILATION;
    // keep exact symmetry
    let off = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    cov2[(0, 1)] = off;
    cov2[(1, 0)] = off;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - off * off;
    let conic = Matrix2::new(cov2[(1, 1)] / det, -off / det, -off / det, cov2[(0, 0)] / det);

    let mean2 = Vector2::new(cam.fx * p_cam.x / z + cam.cx, cam.fy * p_cam.y / z + cam.cy);
    let half = 0.5 * (cov2[(0, 0)] - cov2[(1, 1)]);
    let lambda_max = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]) + (half * half + off * off).sqrt();
    let radius = CUTOFF_SQ.sqrt() * lambda_max.sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2.x + radius < 0.5 || mean2.x - radius > w - 0.5 || mean2.y + radius < 0.5 || mean2.y - radius > h - 0.5 {
        return None;
    }

    let view = mu - cam.center();
    let dir_len = view.norm().max(1e-12);
    let dir = view / dir_len;
    let basis = ShBasis::eval(degree, &dir);
    let color_raw = basis.color(&block[SH..]);
    let opacity = sigmoid(block[OPACITY]);

    let splat = Splat2D {
        index,
        mean: [mean2.x, mean2.y],
        cov: [cov2[(0, 0)], off, cov2[(1, 1)]],
        conic: [conic[(0, 0)], conic[(0, 1)], conic[(1, 1)]],
        depth: z,
        opacity,
        color: color_raw.map(|c| c.clamp(0.0, 1.0)),
        radius,
    };
    Some(Projection {
        p_cam,
        tx,
        ty,
        tx_clamped: tx != rx,
        ty_clamped: ty != ry,
        jac,
        qhat,
        qnorm,
        rot,
        scales,
        m,
        cov_cam,
        conic,
        opacity,
        dir,
        dir_len,
        basis,
        color_raw,
        splat,
    })
}

/// Project every Gaussian of a world-space cloud; culled ones are absent.
/// Output order follows the cloud.
pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Vec<Splat2D> {
    (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project_block(i, cloud.block(i), cloud.sh_degree(), cam).map(|p| p.splat))
        .collect()
}

/// Sorted and binned splats for one view, shared by every per-pixel pass.
#[derive(Clone, Debug)]
pub struct ProjectedFrame {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Splats sorted by ascending depth, ties by source index.
    pub splats: Vec<Splat2D>,
    /// Positions into `splats` touching each tile, ascending.
    pub tile_lists: Vec<Vec<u32>>,
}

impl ProjectedFrame {
    pub fn build(world: &GaussianCloud, cam: &Camera) -> Self {
        let mut splats = project(world, cam);
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        Self::bin(splats, cam.width, cam.height)
    }

    /// Like [`ProjectedFrame::build`] but also returns the projection
    /// intermediates, aligned with `splats`.
    pub(crate) fn build_with_projections(world: &GaussianCloud, cam: &Camera) -> (Self, Vec<Projection>) {
        let mut projs: Vec<Projection> = (0..world.len())
            .into_par_iter()
            .filter_map(|i| project_block(i, world.block(i), world.sh_degree(), cam))
            .collect();
        projs.sort_by(|a, b| a.splat.depth.total_cmp(&b.splat.depth).then(a.splat.index.cmp(&b.splat.index)));
        let splats = projs.iter().map(|p| p.splat).collect();
        (Self::bin(splats, cam.width, cam.height), projs)
    }

    pub(crate) fn bin(splats: Vec<Splat2D>, width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let Some((x0, x1, y0, y1)) = pixel_range(s, width, height) else {
                continue;
            };
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tile_lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self {
            width,
            height,
            tiles_x,
            tiles_y,
            splats,
            tile_lists,
        }
    }

    /// Pixel bounds `(x0, x1, y0, y1)` (inclusive) of tile `t`.
    pub fn tile_bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(self.width) - 1, y0, (y0 + TILE_SIZE).min(self.height) - 1)
    }

    pub fn tile_count(&self) -> usize {
        self.tile_lists.len()
    }
}

/// Inclusive pixel-index bounds whose centers fall inside the splat's box.
fn pixel_range(s: &Splat2D, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = (s.mean[0] - s.radius - 0.5).ceil().max(0.0);
    let x1 = (s.mean[0] + s.radius - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (s.mean[1] - s.radius - 0.5).ceil().max(0.0);
    let y1 = (s.mean[1] + s.radius - 0.5).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// One blending step: the splat's position in the frame, its alpha and the
/// transmittance in front of it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlendStep {
    /// Index into the tile list.
    pub slot: usize,
    pub pos: u32,
    pub alpha: f64,
    pub transmittance: f64,
    pub u: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Front-to-back blend of `list` at pixel `(px, py)`. Calls `visit` for each
/// contributing splat and returns the final transmittance.
#[inline]
pub(crate) fn blend_pixel(
    splats: &[Splat2D],
    list: &[u32],
    px: usize,
    py: usize,
    mut visit: impl FnMut(BlendStep),
) -> f64 {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    for (slot, &pos) in list.iter().enumerate() {
        let s = &splats[pos as usize];
        let (u, dx, dy) = s.mahalanobis_sq(x, y);
        if u >= CUTOFF_SQ {
            continue;
        }
        let (k, _) = kernel(u);
        let alpha = (s.opacity * k).min(MAX_ALPHA);
        if alpha <= 0.0 {
            continue;
        }
        let next = t * (1.0 - alpha);
        if next < MIN_TRANSMITTANCE {
            break;
        }
        visit(BlendStep {
            slot,
            pos,
            alpha,
            transmittance: t,
            u,
            dx,
            dy,
        });
        t = next;
    }
    t
}

/// Rendered images for one view.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    /// Opacity-normalized expected depth; 0 where opacity ≤ 1e-6.
    pub depth: ScalarImage,
    /// Accumulated opacity `O_G`.
    pub opacity: ScalarImage,
    /// Per pixel `(gaussian index, blend weight)` in blend order, when requested.
    pub contributors: Option<Vec<Vec<(usize, f64)>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderOptions {
    pub record_contributors: bool,
}

struct TileOut {
    color: Vec<f64>,
    depth: Vec<f64>,
    opacity: Vec<f64>,
    contributors: Vec<Vec<(usize, f64)>>,
}

/// Tiled blending of a prepared frame.
pub fn rasterize(frame: &ProjectedFrame, sky: [f64; 3], options: RenderOptions) -> RenderOutput {
    let tiles: Vec<TileOut> = (0..frame.tile_count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = frame.tile_bounds(t);
            let n = (x1 - x0 + 1) * (y1 - y0 + 1);
            let mut out = TileOut {
                color: Vec::with_capacity(3 * n),
                depth: Vec::with_capacity(n),
                opacity: Vec::with_capacity(n),
                contributors: Vec::new(),
            };
            let list = &frame.tile_lists[t];
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    let mut o = 0.0;
                    let mut contrib = Vec::new();
                    blend_pixel(&frame.splats, list, px, py, |step| {
                        let s = &frame.splats[step.pos as usize];
                        let w = step.alpha * step.transmittance;
                        for k in 0..3 {
                            c[k] += w * s.color[k];
                        }
                        d += w * s.depth;
                        o += w;
                        if options.record_contributors {
                            contrib.push((s.index, w));
                        }
                    });
                    for k in 0..3 {
                        c[k] += (1.0 - o) * sky[k];
                    }
                    out.color.extend_from_slice(&c);
                    out.depth.push(if o > DEPTH_OPACITY_EPS { d / o } else { 0.0 });
                    out.opacity.push(o);
                    if options.record_contributors {
                        out.contributors.push(contrib);
                    }
                }
            }
            out
        })
        .collect();

    let (w, h) = (frame.width, frame.height);
    let mut color = RgbImage::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut opacity = ScalarImage::new(w, h);
    let mut contributors = options.record_contributors.then(|| vec![Vec::new(); w * h]);
    for (t, mut tile) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = frame.tile_bounds(t);
        let mut i = 0;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = py * w + px;
                color.data[3 * p..3 * p + 3].copy_from_slice(&tile.color[3 * i..3 * i + 3]);
                depth.data[p] = tile.depth[i];
                opacity.data[p] = tile.opacity[i];
                if let Some(all) = contributors.as_mut() {
                    all[p] = std::mem::take(&mut tile.contributors[i]);
                }
                i += 1;
            }
        }
    }
    RenderOutput {
        color,
        depth,
        opacity,
        contributors,
    }
}

/// Render a scene at timestamp `t` from `cam`.
pub fn render(scene: &Scene, cam: &Camera, t: usize) -> Result<RenderOutput> {
    render_with(scene, cam, t, RenderOptions::default())
}

pub fn render_with(scene: &Scene, cam: &Camera, t: usize, options: RenderOptions) -> Result<RenderOutput> {
    cam.validate()?;
    let world = scene.world_at(t)?;
    let frame = ProjectedFrame::build(&world, cam);
    Ok(rasterize(&frame, scene.sky.color, options))
}

/// Blend a per-Gaussian non-negative scalar with the same weights as
/// [`render`]. No sky term.
pub fn render_scalar_field(scene: &Scene, values: &[f64], cam: &Camera, t: usize) -> Result<ScalarImage> {
    if values.len() != scene.cloud.len() {
        return Err(Error::shape(
            format!("{} per-Gaussian values", scene.cloud.len()),
            values.len(),
        ));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid("values", format!("per-Gaussian values must be non-negative, got {v}")));
    }
    cam.validate()?;
    let world = scene.world_at(t)?;
    let frame = ProjectedFrame::build(&world, cam);
    Ok(scalar_field_on_frame(&frame, values))
}

pub(crate) fn scalar_field_on_frame(frame: &ProjectedFrame, values: &[f64]) -> ScalarImage {
    let tiles: Vec<Vec<f64>> = (0..frame.tile_count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = frame.tile_bounds(t);
            let list = &frame.tile_lists[t];
            let mut out = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let mut acc = 0.0;
                    blend_pixel(&frame.splats, list, px, py, |step| {
                        let s = &frame.splats[step.pos as usize];
                        acc += step.alpha * step.transmittance * values[s.index];
                    });
                    out.push(acc);
                }
            }
            out
        })
        .collect();
    let mut img = ScalarImage::new(frame.width, frame.height);
    for (t, tile) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = frame.tile_bounds(t);
        let mut i = 0;
        for py in y0..=y1 {
            for px in x0..=x1 {
                img.data[py * frame.width + px] = tile[i];
                i += 1;
            }
        }
    }
    img
}

/// Straight per-pixel reference: no tiling; each pixel gathers every splat
/// covering it, sorts by depth and blends.
pub fn render_reference(scene: &Scene, cam: &Camera, t: usize) -> Result<RenderOutput> {
    let world = scene.world_at(t)?;
    let splats = project(&world, cam);
    let (w, h) = (cam.width, cam.height);
    let mut color = RgbImage::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut opacity = ScalarImage::new(w, h);
    let mut contributors = vec![Vec::new(); w * h];
    let mut hits: Vec<(f64, usize, f64)> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            hits.clear();
            for (i, s) in splats.iter().enumerate() {
                let (u, _, _) = s.mahalanobis_sq(x, y);
                if u < CUTOFF_SQ {
                    hits.push((s.depth, s.index, s.alpha_at(x, y)));
                }
                let _ = i;
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut tr = 1.0;
            let (mut c, mut d, mut o) = ([0.0; 3], 0.0, 0.0);
            for &(z, idx, alpha) in &hits {
                if alpha <= 0.0 {
                    continue;
                }
                if tr * (1.0 - alpha) < MIN_TRANSMITTANCE {
                    break;
                }
                let s = splats.iter().find(|s| s.index == idx).unwrap();
                let wgt = alpha * tr;
                for k in 0..3 {
                    c[k] += wgt * s.color[k];
                }
                d += wgt * z;
                o += wgt;
                contributors[py * w + px].push((idx, wgt));
                tr *= 1.0 - alpha;
            }
            for k in 0..3 {
                c[k] += (1.0 - o) * scene.sky.color[k];
            }
            color.set(px, py, c);
            depth.set(px, py, if o > DEPTH_OPACITY_EPS { d / o } else { 0.0 });
            opacity.set(px, py, o);
        }
    }
    Ok(RenderOutput {
        color,
        depth,
        opacity,
        contributors: Some(contributors),
    })
}
