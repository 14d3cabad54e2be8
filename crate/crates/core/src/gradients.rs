//! Analytic reverse-mode gradients of the rendered color and depth, and the
//! per-parameter squared-gradient sums that feed the Fisher ledger.
//!
//! Both passes replay the forward blend per pixel and walk the contributor
//! list back to front, so no division by `1 - α` is needed. Pixel gradients
//! are first reduced to a 10-dim screen-space vector per splat
//! (mean2, conic, opacity, rgb, depth), then chained to parameters once per
//! Gaussian.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarImage};
use crate::rasterizer::{
    blend_pixel, kernel, BlendStep, ProjectedFrame, Projection, RenderOutput, DEPTH_OPACITY_EPS, MAX_ALPHA,
};
use crate::scene::{poses_at, quat_left_matrix, Camera, Group, Scene, LOG_SCALE, MEAN, OPACITY, ROTATION, SH};

/// Length of the per-splat screen-space gradient vector.
pub const SCREEN_DIM: usize = 10;
const S_MEAN: usize = 0;
const S_CONIC: usize = 2;
const S_OPACITY: usize = 5;
const S_COLOR: usize = 6;
const S_DEPTH: usize = 9;
/// Screen slots that affect color; depth is excluded.
const COLOR_DIM: usize = 9;

/// Gradient of a scalar objective with respect to all scene parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradient {
    /// Flat, laid out like [`crate::scene::GaussianCloud::params`].
    pub params: Vec<f64>,
    pub sky: [f64; 3],
}

/// Partial derivatives of α with respect to (mean2, conic, opacity), or
/// `None` when α is saturated at the cap.
#[inline]
fn alpha_partials(step: &BlendStep, conic: [f64; 3], opacity: f64) -> Option<[f64; 6]> {
    let (k, dk) = kernel(step.u);
    if opacity * k >= MAX_ALPHA {
        return None;
    }
    let [a, b, c] = conic;
    let (dx, dy) = (step.dx, step.dy);
    let du = opacity * dk;
    Some([
        du * -2.0 * (a * dx + b * dy),
        du * -2.0 * (b * dx + c * dy),
        du * dx * dx,
        du * 2.0 * dx * dy,
        du * dy * dy,
        k,
    ])
}

/// Chain a screen-space gradient of one splat to its world-space parameter
/// block. `sh` is the Gaussian's SH coefficient slice.
pub(crate) fn chain_to_params(pr: &Projection, cam: &Camera, sh: &[f64], g: &[f64; SCREEN_DIM], out: &mut [f64]) {
    let (x, y, z) = (pr.p_cam.x, pr.p_cam.y, pr.p_cam.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let mut dp = Vector3::new(g[S_MEAN] * fx / z, g[S_MEAN + 1] * fy / z, 0.0);
    dp.z -= (g[S_MEAN] * fx * x + g[S_MEAN + 1] * fy * y) / z2;
    dp.z += g[S_DEPTH];

    let dg = Matrix2::new(g[S_CONIC], 0.5 * g[S_CONIC + 1], 0.5 * g[S_CONIC + 1], g[S_CONIC + 2]);
    let d_cov2 = -(pr.conic * dg * pr.conic);
    let j = pr.jac;
    let d_cov_cam = j.transpose() * d_cov2 * j;
    let d_j = 2.0 * d_cov2 * j * pr.cov_cam;
    dp.z -= d_j[(0, 0)] * fx / z2 + d_j[(1, 1)] * fy / z2;
    if pr.tx_clamped {
        dp.z += d_j[(0, 2)] * fx * pr.tx / z2;
    } else {
        dp.x -= d_j[(0, 2)] * fx / z2;
        dp.z += d_j[(0, 2)] * 2.0 * fx * x / (z2 * z);
    }
    if pr.ty_clamped {
        dp.z += d_j[(1, 2)] * fy * pr.ty / z2;
    } else {
        dp.y -= d_j[(1, 2)] * fy / z2;
        dp.z += d_j[(1, 2)] * 2.0 * fy * y / (z2 * z);
    }

    let d_cov3 = cam.rotation.transpose() * d_cov_cam * cam.rotation;
    let d_m = 2.0 * d_cov3 * pr.m;
    let mut d_r = Matrix3::zeros();
    for c in 0..3 {
        let s = pr.scales[c];
        let mut ds = 0.0;
        for r in 0..3 {
            d_r[(r, c)] = d_m[(r, c)] * s;
            ds += d_m[(r, c)] * pr.rot[(r, c)];
        }
        out[LOG_SCALE + c] = ds * s;
    }
    let dq_hat = rotation_vjp(pr.qhat, &d_r);
    let dot: f64 = (0..4).map(|i| pr.qhat[i] * dq_hat[i]).sum();
    for i in 0..4 {
        out[ROTATION + i] = (dq_hat[i] - pr.qhat[i] * dot) / pr.qnorm;
    }

    out[OPACITY] = g[S_OPACITY] * pr.opacity * (1.0 - pr.opacity);

    let mut gc = [g[S_COLOR], g[S_COLOR + 1], g[S_COLOR + 2]];
    for (ch, v) in gc.iter_mut().enumerate() {
        if !(0.0..=1.0).contains(&pr.color_raw[ch]) {
            *v = 0.0;
        }
    }
    let basis = &pr.basis;
    for k in 0..basis.count {
        for ch in 0..3 {
            out[SH + 3 * k + ch] = basis.values[k] * gc[ch];
        }
    }
    for v in out[SH + 3 * basis.count..].iter_mut() {
        *v = 0.0;
    }
    let ddir = basis.direction_grad(sh, &gc);
    let dmu = cam.rotation.transpose() * dp + (ddir - pr.dir * pr.dir.dot(&ddir)) / pr.dir_len;
    out[MEAN..MEAN + 3].copy_from_slice(dmu.as_slice());
}

/// Vector-Jacobian product of the unit-quaternion rotation matrix.
fn rotation_vjp(q: [f64; 4], d: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| d[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0)
        + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Map world-space gradients of rigid Gaussians back to their canonical
/// frame. Only mean and rotation are affected.
fn to_canonical(scene: &Scene, t: usize, params: &mut [f64]) -> Result<()> {
    let poses = poses_at(&scene.cloud, &scene.tracks, t)?;
    if poses.is_empty() {
        return Ok(());
    }
    let p = scene.cloud.param_dim();
    for (i, group) in scene.cloud.groups().iter().enumerate() {
        if let Group::Rigid(id) = group {
            let pose = poses[id];
            let block = &mut params[i * p..(i + 1) * p];
            canonical_block(pose.rotation, pose.quaternion(), block);
        }
    }
    Ok(())
}

fn canonical_block(rot: Matrix3<f64>, q_pose: [f64; 4], block: &mut [f64]) {
    let dmu = rot.transpose() * Vector3::new(block[MEAN], block[MEAN + 1], block[MEAN + 2]);
    block[MEAN..MEAN + 3].copy_from_slice(dmu.as_slice());
    let l = quat_left_matrix(q_pose);
    let dq = [block[ROTATION], block[ROTATION + 1], block[ROTATION + 2], block[ROTATION + 3]];
    for c in 0..4 {
        block[ROTATION + c] = (0..4).map(|r| l[r][c] * dq[r]).sum();
    }
}

fn check_image_shape(cam: &Camera, w: usize, h: usize, what: &str) -> Result<()> {
    if w != cam.width || h != cam.height {
        return Err(Error::shape(format!("{what} of {}x{}", cam.width, cam.height), format!("{w}x{h}")));
    }
    Ok(())
}

/// Gradients of `Σ d_color · C + Σ d_depth · D` with respect to every
/// parameter and the sky color, for the view `cam` at timestamp `t`.
pub fn backward(
    scene: &Scene,
    cam: &Camera,
    t: usize,
    d_color: &RgbImage,
    d_depth: Option<&ScalarImage>,
) -> Result<SceneGradient> {
    cam.validate()?;
    check_image_shape(cam, d_color.width, d_color.height, "color gradient")?;
    if let Some(d) = d_depth {
        check_image_shape(cam, d.width, d.height, "depth gradient")?;
    }
    let world = scene.world_at(t)?;
    let (frame, projs) = ProjectedFrame::build_with_projections(&world, cam);
    let sky = scene.sky.color;

    let tiles: Vec<(Vec<[f64; SCREEN_DIM]>, [f64; 3])> = (0..frame.tile_count())
        .into_par_iter()
        .map(|tile| {
            let list = &frame.tile_lists[tile];
            let mut acc = vec![[0.0; SCREEN_DIM]; list.len()];
            let mut sky_grad = [0.0; 3];
            let mut steps = Vec::new();
            let (x0, x1, y0, y1) = frame.tile_bounds(tile);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let p = py * frame.width + px;
                    let gc = d_color.pixel(p);
                    let gd = d_depth.map_or(0.0, |d| d.data[p]);
                    steps.clear();
                    let t_final = blend_pixel(&frame.splats, list, px, py, |s| steps.push(s));
                    for k in 0..3 {
                        sky_grad[k] += gc[k] * t_final;
                    }
                    let (mut g_n, mut g_o) = (0.0, 0.0);
                    if gd != 0.0 {
                        let (mut n, mut o) = (0.0, 0.0);
                        for s in &steps {
                            let w = s.alpha * s.transmittance;
                            n += w * frame.splats[s.pos as usize].depth;
                            o += w;
                        }
                        if o > DEPTH_OPACITY_EPS {
                            g_n = gd / o;
                            g_o = -gd * (n / o) / o;
                        }
                    }
                    let mut behind = sky;
                    let (mut behind_n, mut behind_o) = (0.0, 0.0);
                    for s in steps.iter().rev() {
                        let sp = &frame.splats[s.pos as usize];
                        let tr = s.transmittance;
                        let w = s.alpha * tr;
                        let mut g_alpha = g_n * tr * (sp.depth - behind_n) + g_o * tr * (1.0 - behind_o);
                        for k in 0..3 {
                            g_alpha += gc[k] * tr * (sp.color[k] - behind[k]);
                            behind[k] = s.alpha * sp.color[k] + (1.0 - s.alpha) * behind[k];
                        }
                        behind_n = s.alpha * sp.depth + (1.0 - s.alpha) * behind_n;
                        behind_o = s.alpha + (1.0 - s.alpha) * behind_o;
                        let a = &mut acc[s.slot];
                        for k in 0..3 {
                            a[S_COLOR + k] += gc[k] * w;
                        }
                        a[S_DEPTH] += g_n * w;
                        if let Some(d) = alpha_partials(s, sp.conic, sp.opacity) {
                            for k in 0..6 {
                                a[k] += g_alpha * d[k];
                            }
                        }
                    }
                }
            }
            (acc, sky_grad)
        })
        .collect();

    let mut screen = vec![[0.0; SCREEN_DIM]; frame.splats.len()];
    let mut sky_grad = [0.0; 3];
    for (tile, (acc, sg)) in tiles.into_iter().enumerate() {
        for (slot, &pos) in frame.tile_lists[tile].iter().enumerate() {
            let dst = &mut screen[pos as usize];
            for k in 0..SCREEN_DIM {
                dst[k] += acc[slot][k];
            }
        }
        for k in 0..3 {
            sky_grad[k] += sg[k];
        }
    }

    let p = world.param_dim();
    let blocks: Vec<(usize, Vec<f64>)> = projs
        .par_iter()
        .zip(screen.par_iter())
        .map(|(pr, g)| {
            let i = pr.splat.index;
            let mut out = vec![0.0; p];
            chain_to_params(pr, cam, &world.block(i)[SH..], g, &mut out);
            (i, out)
        })
        .collect();
    let mut params = vec![0.0; world.params().len()];
    for (i, block) in blocks {
        params[i * p..(i + 1) * p].copy_from_slice(&block);
    }
    to_canonical(scene, t, &mut params)?;
    Ok(SceneGradient { params, sky: sky_grad })
}

/// Per-parameter sums of squared color gradients over all pixels and
/// channels of one view: `Σ_{pixel, ch} (∂C_ch / ∂θ_k)²`, laid out like the
/// cloud's parameters (canonical frame for rigid Gaussians).
///
/// Tiles are reduced in a fixed order, so the result does not depend on the
/// thread count.
pub fn per_param_gradsq(scene: &Scene, cam: &Camera, t: usize) -> Result<Vec<f64>> {
    cam.validate()?;
    let world = scene.world_at(t)?;
    let (frame, projs) = ProjectedFrame::build_with_projections(&world, cam);
    let sky = scene.sky.color;
    type Outer = [[f64; COLOR_DIM]; COLOR_DIM];

    let tiles: Vec<Vec<Outer>> = (0..frame.tile_count())
        .into_par_iter()
        .map(|tile| {
            let list = &frame.tile_lists[tile];
            let mut acc = vec![[[0.0; COLOR_DIM]; COLOR_DIM]; list.len()];
            let mut steps = Vec::new();
            let (x0, x1, y0, y1) = frame.tile_bounds(tile);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    steps.clear();
                    blend_pixel(&frame.splats, list, px, py, |s| steps.push(s));
                    let mut behind = sky;
                    for s in steps.iter().rev() {
                        let sp = &frame.splats[s.pos as usize];
                        let tr = s.transmittance;
                        let w = s.alpha * tr;
                        let partials = alpha_partials(s, sp.conic, sp.opacity);
                        let a = &mut acc[s.slot];
                        for ch in 0..3 {
                            let g_alpha = tr * (sp.color[ch] - behind[ch]);
                            let mut v = [0.0; COLOR_DIM];
                            if let Some(d) = partials {
                                for k in 0..6 {
                                    v[k] = g_alpha * d[k];
                                }
                            }
                            v[S_COLOR + ch] = w;
                            for r in 0..COLOR_DIM {
                                if v[r] == 0.0 {
                                    continue;
                                }
                                for c in 0..COLOR_DIM {
                                    a[r][c] += v[r] * v[c];
                                }
                            }
                        }
                        for ch in 0..3 {
                            behind[ch] = s.alpha * sp.color[ch] + (1.0 - s.alpha) * behind[ch];
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut outer = vec![[[0.0; COLOR_DIM]; COLOR_DIM]; frame.splats.len()];
    for (tile, acc) in tiles.into_iter().enumerate() {
        for (slot, &pos) in frame.tile_lists[tile].iter().enumerate() {
            let dst = &mut outer[pos as usize];
            for r in 0..COLOR_DIM {
                for c in 0..COLOR_DIM {
                    dst[r][c] += acc[slot][r][c];
                }
            }
        }
    }

    let p = world.param_dim();
    let poses = poses_at(&scene.cloud, &scene.tracks, t)?;
    let blocks: Vec<(usize, Vec<f64>)> = projs
        .par_iter()
        .zip(outer.par_iter())
        .map(|(pr, a)| {
            let i = pr.splat.index;
            let sh = &world.block(i)[SH..];
            // rows of the screen-to-parameter Jacobian
            let rows: Vec<Vec<f64>> = (0..COLOR_DIM)
                .map(|j| {
                    let mut e = [0.0; SCREEN_DIM];
                    e[j] = 1.0;
                    let mut row = vec![0.0; p];
                    chain_to_params(pr, cam, sh, &e, &mut row);
                    if let Group::Rigid(id) = world.groups()[i] {
                        let pose = poses[&id];
                        canonical_block(pose.rotation, pose.quaternion(), &mut row);
                    }
                    row
                })
                .collect();
            let mut out = vec![0.0; p];
            for (k, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..COLOR_DIM {
                    let mr = rows[r][k];
                    if mr == 0.0 {
                        continue;
                    }
                    for c in 0..COLOR_DIM {
                        s += mr * a[r][c] * rows[c][k];
                    }
                }
                *o = s;
            }
            (i, out)
        })
        .collect();
    let mut out = vec![0.0; world.params().len()];
    for (i, block) in blocks {
        out[i * p..(i + 1) * p].copy_from_slice(&block);
    }
    Ok(out)
}

/// Per-Gaussian squared-gradient sum: [`per_param_gradsq`] reduced over each
/// Gaussian's parameters.
pub fn per_gaussian_gradsq(scene: &Scene, cam: &Camera, t: usize) -> Result<Vec<f64>> {
    let p = scene.cloud.param_dim();
    Ok(per_param_gradsq(scene, cam, t)?.chunks(p).map(|b| b.iter().sum()).collect())
}

/// Central finite differences of `objective(render(scene))` for every
/// parameter and the sky. Slow; for verification only.
pub fn finite_difference(
    scene: &Scene,
    cam: &Camera,
    t: usize,
    step: f64,
    objective: impl Fn(&RenderOutput) -> f64,
) -> Result<SceneGradient> {
    let eval = |s: &Scene| -> Result<f64> { Ok(objective(&crate::rasterizer::render(s, cam, t)?)) };
    let mut work = scene.clone();
    let mut params = vec![0.0; scene.cloud.params().len()];
    for (k, g) in params.iter_mut().enumerate() {
        let orig = work.cloud.params()[k];
        work.cloud.params_mut()[k] = orig + step;
        let fp = eval(&work)?;
        work.cloud.params_mut()[k] = orig - step;
        let fm = eval(&work)?;
        work.cloud.params_mut()[k] = orig;
        *g = (fp - fm) / (2.0 * step);
    }
    let mut sky = [0.0; 3];
    for (k, g) in sky.iter_mut().enumerate() {
        let orig = work.sky.color[k];
        work.sky.color[k] = orig + step;
        let fp = eval(&work)?;
        work.sky.color[k] = orig - step;
        let fm = eval(&work)?;
        work.sky.color[k] = orig;
        *g = (fp - fm) / (2.0 * step);
    }
    Ok(SceneGradient { params, sky })
}

/// Fraction of entries whose relative error
/// `|a - b| / max(|a|, |b|, floor)` is within `tol`.
pub fn agreement(analytic: &[f64], reference: &[f64], tol: f64, floor: f64) -> f64 {
    if analytic.is_empty() {
        return 1.0;
    }
    let ok = analytic
        .iter()
        .zip(reference)
        .filter(|(a, b)| (*a - *b).abs() / a.abs().max(b.abs()).max(floor) <= tol)
        .count();
    ok as f64 / analytic.len() as f64
}
