//! Seeded random scenes for tests and benchmarks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{logit, param_dim, sh_basis_count, Camera, GaussianCloud, Group, Scene, SkyModel, SH};

/// A random background-only scene of `n` Gaussians in front of a forward
/// camera of `width`×`height` pixels. Gaussians stay inside the view, have
/// moderate opacity (0.1–0.8) and colors well inside `[0, 1]`.
pub fn random_scene(seed: u64, n: usize, width: usize, height: usize, sh_degree: u8) -> (Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = width.max(height) as f64;
    let cam = Camera::looking_forward(width, height, focal);
    let half_x = width as f64 / (2.0 * focal);
    let half_y = height as f64 / (2.0 * focal);
    let mut cloud = GaussianCloud::new(sh_degree);
    let p = param_dim(sh_degree);
    for _ in 0..n {
        let z = rng.random_range(2.0..6.0);
        let x = rng.random_range(-0.8..0.8) * half_x * z;
        let y = rng.random_range(-0.8..0.8) * half_y * z;
        let mut block = vec![0.0; p];
        block[0] = x;
        block[1] = y;
        block[2] = z;
        let q = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        block[3] = rng.random_range(0.3..1.0);
        block[4] = q.x;
        block[5] = q.y;
        block[6] = q.z;
        // screen footprint of roughly 1 to 4 px standard deviation
        for k in 0..3 {
            let px = rng.random_range(1.0..4.0);
            block[7 + k] = (px * z / focal).ln();
        }
        block[10] = logit(rng.random_range(0.1..0.8));
        for k in 0..sh_basis_count(sh_degree) {
            let amp = if k == 0 { 0.8 } else { 0.15 };
            for ch in 0..3 {
                block[SH + 3 * k + ch] = rng.random_range(-amp..amp);
            }
        }
        cloud.push_block(&block, Group::Background);
    }
    let sky = SkyModel::new([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
    (Scene::new(cloud, vec![], sky), cam)
}
