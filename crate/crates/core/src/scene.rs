//! Decomposed scene representation: static background Gaussians, rigid
//! objects expressed in their own canonical frames, and a constant sky.
//!
//! Gaussian parameters are stored flat, one fixed-width block per Gaussian,
//! in the order `mean(3) | rotation(4, w x y z) | log_scale(3) |
//! opacity_logit(1) | sh(3·(D+1)²)`. SH coefficients are grouped by basis
//! function, each basis function holding an RGB triple. Opacity is stored as
//! a logit and scales as natural logs; activations happen at render time.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub const MEAN: usize = 0;
pub const ROTATION: usize = 3;
pub const LOG_SCALE: usize = 7;
pub const OPACITY: usize = 10;
pub const SH: usize = 11;

/// Number of SH basis functions for a degree.
pub fn sh_basis_count(degree: u8) -> usize {
    let d = degree as usize + 1;
    d * d
}

/// Per-Gaussian parameter dimension for an SH degree.
pub fn param_dim(degree: u8) -> usize {
    SH + 3 * sh_basis_count(degree)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Which part of the decomposed scene a Gaussian belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Background,
    Rigid(u32),
}

/// One Gaussian, unpacked. The cloud itself stores flat parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    /// Raw quaternion `(w, x, y, z)`; normalized when used.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
    pub group: Group,
}

impl Gaussian {
    /// An isotropic Gaussian with a constant (degree-0) color.
    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3], degree: u8) -> Self {
        let mut sh = vec![0.0; 3 * sh_basis_count(degree)];
        sh[..3].copy_from_slice(&rgb_to_sh0(rgb));
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            sh,
            group: Group::Background,
        }
    }

    pub fn with_group(mut self, group: Group) -> Self {
        self.group = group;
        self
    }
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// DC coefficients that render as `rgb` under the `0.5`-offset convention.
pub fn rgb_to_sh0(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Optimizable scene parameters plus per-Gaussian group tags.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    sh_degree: u8,
    params: Vec<f64>,
    groups: Vec<Group>,
}

impl GaussianCloud {
    pub fn new(sh_degree: u8) -> Self {
        assert!(sh_degree <= 2, "SH degree must be 0, 1 or 2");
        Self {
            sh_degree,
            params: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn from_parts(sh_degree: u8, params: Vec<f64>, groups: Vec<Group>) -> Result<Self> {
        if sh_degree > 2 {
            return Err(Error::invalid("sh_degree", format!("{sh_degree} not in 0..=2")));
        }
        let p = param_dim(sh_degree);
        if params.len() != groups.len() * p {
            return Err(Error::shape(groups.len() * p, params.len()));
        }
        Ok(Self {
            sh_degree,
            params,
            groups,
        })
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    /// Per-Gaussian parameter dimension `P`.
    pub fn param_dim(&self) -> usize {
        param_dim(self.sh_degree)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    #[inline]
    pub fn block(&self, i: usize) -> &[f64] {
        let p = self.param_dim();
        &self.params[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let p = self.param_dim();
        &mut self.params[i * p..(i + 1) * p]
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.sh.len(), 3 * sh_basis_count(self.sh_degree), "SH block size");
        self.params.extend_from_slice(&g.mean);
        self.params.extend_from_slice(&g.rotation);
        self.params.extend_from_slice(&g.log_scale);
        self.params.push(g.opacity_logit);
        self.params.extend_from_slice(&g.sh);
        self.groups.push(g.group);
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        let b = self.block(i);
        Gaussian {
            mean: [b[0], b[1], b[2]],
            rotation: [b[3], b[4], b[5], b[6]],
            log_scale: [b[7], b[8], b[9]],
            opacity_logit: b[OPACITY],
            sh: b[SH..].to_vec(),
            group: self.groups[i],
        }
    }

    #[inline]
    pub fn mean(&self, i: usize) -> Vector3<f64> {
        let b = self.block(i);
        Vector3::new(b[0], b[1], b[2])
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.block(i)[OPACITY])
    }

    #[inline]
    pub fn scales(&self, i: usize) -> Vector3<f64> {
        let b = self.block(i);
        Vector3::new(b[7].exp(), b[8].exp(), b[9].exp())
    }

    /// Keep only the Gaussians for which `keep` is true, preserving order.
    pub fn retain_indices(&self, keep: &[bool]) -> GaussianCloud {
        let p = self.param_dim();
        let mut out = GaussianCloud::new(self.sh_degree);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.params.extend_from_slice(&self.params[i * p..(i + 1) * p]);
                out.groups.push(self.groups[i]);
            }
        }
        out
    }

    /// Append a raw parameter block.
    pub fn push_block(&mut self, block: &[f64], group: Group) {
        assert_eq!(block.len(), self.param_dim());
        self.params.extend_from_slice(block);
        self.groups.push(group);
    }

    /// Rigid object ids referenced by this cloud, sorted.
    pub fn rigid_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .groups
            .iter()
            .filter_map(|g| match g {
                Group::Rigid(id) => Some(*id),
                Group::Background => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// SE(3) pose of a rigid object at one timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation as a unit quaternion `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() < tol && (r.determinant() - 1.0).abs() < tol
    }
}

/// Poses of one rigid object, keyed by timestamp index.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidPoseTrack {
    pub object: u32,
    pub poses: BTreeMap<usize, RigidPose>,
}

impl RigidPoseTrack {
    pub fn new(object: u32) -> Self {
        Self {
            object,
            poses: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, t: usize, pose: RigidPose) {
        self.poses.insert(t, pose);
    }

    pub fn pose(&self, t: usize) -> Option<&RigidPose> {
        self.poses.get(&t)
    }
}

/// Constant sky color composited behind all Gaussians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkyModel {
    pub color: [f64; 3],
}

impl SkyModel {
    pub fn new(color: [f64; 3]) -> Self {
        let mut s = Self { color };
        s.clamp();
        s
    }

    pub fn black() -> Self {
        Self { color: [0.0; 3] }
    }

    pub fn clamp(&mut self) {
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// A cloud bound to its rigid-object tracks and sky.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: GaussianCloud,
    pub tracks: Vec<RigidPoseTrack>,
    pub sky: SkyModel,
}

impl Scene {
    pub fn new(cloud: GaussianCloud, tracks: Vec<RigidPoseTrack>, sky: SkyModel) -> Self {
        Self { cloud, tracks, sky }
    }

    /// The cloud in world space at timestamp `t`.
    pub fn world_at(&self, t: usize) -> Result<GaussianCloud> {
        compose_world(&self.cloud, &self.tracks, t)
    }
}

/// Pinhole camera. Camera frame: +x right, +y down, +z forward.
/// Pixel `(px, py)` has its center at `(px + 0.5, py + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub timestamp: usize,
}

impl Camera {
    /// Camera at the origin looking down +z with a centered principal point.
    pub fn looking_forward(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "resolution must be at least 1x1"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Move the camera center to `center`, keeping orientation.
    pub fn with_center(mut self, center: Vector3<f64>) -> Self {
        self.translation = -(self.rotation * center);
        self
    }

    /// Translate along the camera's own +x (right) axis.
    pub fn shifted_laterally(mut self, offset: f64) -> Self {
        self.translation.x -= offset;
        self
    }

    pub fn with_timestamp(mut self, t: usize) -> Self {
        self.timestamp = t;
        self
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Hamilton product matrix `L(p)` such that `p ⊗ q = L(p) q`.
pub(crate) fn quat_left_matrix(p: [f64; 4]) -> [[f64; 4]; 4] {
    let [w, x, y, z] = p;
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

pub(crate) fn quat_mul(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let l = quat_left_matrix(p);
    let mut out = [0.0; 4];
    for (r, row) in l.iter().enumerate() {
        out[r] = row.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
    }
    out
}

/// Rotation matrix of a raw (not necessarily unit) quaternion.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix().into_inner()
}

/// Resolve the pose applied to each group at timestamp `t`.
pub(crate) fn poses_at<'a>(
    cloud: &GaussianCloud,
    tracks: &'a [RigidPoseTrack],
    t: usize,
) -> Result<BTreeMap<u32, &'a RigidPose>> {
    let mut out = BTreeMap::new();
    for id in cloud.rigid_ids() {
        let pose = tracks
            .iter()
            .find(|tr| tr.object == id)
            .and_then(|tr| tr.pose(t))
            .ok_or(Error::MissingPose {
                object: id,
                timestamp: t,
            })?;
        out.insert(id, pose);
    }
    Ok(out)
}

/// Move rigid-object Gaussians from their canonical frames into the world at
/// timestamp `t`. Background Gaussians pass through untouched; for rigid
/// ones only the mean and rotation change.
pub fn compose_world(cloud: &GaussianCloud, tracks: &[RigidPoseTrack], t: usize) -> Result<GaussianCloud> {
    let poses = poses_at(cloud, tracks, t)?;
    let mut out = cloud.clone();
    if poses.is_empty() {
        return Ok(out);
    }
    let quats: BTreeMap<u32, [f64; 4]> = poses.iter().map(|(&id, p)| (id, p.quaternion())).collect();
    for i in 0..cloud.len() {
        let Group::Rigid(id) = cloud.groups[i] else {
            continue;
        };
        let pose = poses[&id];
        let b = out.block_mut(i);
        let mu = pose.rotation * Vector3::new(b[0], b[1], b[2]) + pose.translation;
        b[0] = mu.x;
        b[1] = mu.y;
        b[2] = mu.z;
        let q = quat_mul(quats[&id], [b[3], b[4], b[5], b[6]]);
        b[3..7].copy_from_slice(&q);
    }
    Ok(out)
}

/// Clamp every activated scale component to at most `max_scale`.
pub fn clamp_scales(cloud: &GaussianCloud, max_scale: f64) -> GaussianCloud {
    assert!(max_scale > 0.0, "max_scale must be positive");
    let bound = max_scale.ln();
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let b = out.block_mut(i);
        for s in &mut b[LOG_SCALE..LOG_SCALE + 3] {
            if *s > bound {
                *s = bound;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        q.to_rotation_matrix().into_inner()
    }

    fn rigid_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
        let mut cloud = GaussianCloud::new(1);
        for i in 0..n {
            let mut g = Gaussian::isotropic(
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                0.1,
                0.5,
                [0.3, 0.4, 0.5],
                1,
            );
            g.rotation = [rng.random(), rng.random(), rng.random(), rng.random()];
            cloud.push(g.with_group(if i % 2 == 0 { Group::Rigid(7) } else { Group::Background }));
        }
        cloud
    }

    #[test]
    fn identity_pose_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = rigid_cloud(&mut rng, 10);
        let mut track = RigidPoseTrack::new(7);
        track.insert(3, RigidPose::identity());
        let out = compose_world(&cloud, &[track], 3).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn pure_translation_moves_mean_only() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(Gaussian::isotropic([0.0; 3], 0.1, 0.5, [1.0, 0.0, 0.0], 0).with_group(Group::Rigid(1)));
        let mut track = RigidPoseTrack::new(1);
        track.insert(0, RigidPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)));
        let out = compose_world(&cloud, &[track], 0).unwrap();
        let g = out.gaussian(0);
        assert_eq!(g.mean, [1.0, 0.0, 0.0]);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_pose_names_object_and_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = rigid_cloud(&mut rng, 4);
        let mut track = RigidPoseTrack::new(7);
        track.insert(0, RigidPose::identity());
        match compose_world(&cloud, &[track], 5) {
            Err(Error::MissingPose { object, timestamp }) => {
                assert_eq!((object, timestamp), (7, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_pose_matches_homogeneous_matrix_and_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let cloud = rigid_cloud(&mut rng, 12);
            let r = random_rotation(&mut rng);
            let tr = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mut track = RigidPoseTrack::new(7);
            track.insert(0, RigidPose::new(r, tr));
            let out = compose_world(&cloud, &[track], 0).unwrap();

            // 4x4 homogeneous oracle
            let mut h = nalgebra::Matrix4::<f64>::identity();
            h.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            h.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
            let rigid: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.groups()[i] == Group::Rigid(7)).collect();
            for &i in &rigid {
                let m = cloud.mean(i);
                let expect = h * nalgebra::Vector4::new(m.x, m.y, m.z, 1.0);
                let got = out.mean(i);
                for k in 0..3 {
                    assert!((got[k] - expect[k]).abs() < 1e-9);
                }
                // orientation composes: R_world = R_pose * R_canonical
                let rc = rotation_matrix(cloud.gaussian(i).rotation);
                let rw = rotation_matrix(out.gaussian(i).rotation);
                assert!((rw - r * rc).abs().max() < 1e-9);
            }
            for &i in &rigid {
                for &j in &rigid {
                    let d0 = (cloud.mean(i) - cloud.mean(j)).norm();
                    let d1 = (out.mean(i) - out.mean(j)).norm();
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
            for i in (0..cloud.len()).filter(|&i| cloud.groups()[i] == Group::Background) {
                assert_eq!(cloud.block(i), out.block(i));
            }
        }
    }

    #[test]
    fn clamp_scales_examples() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(Gaussian::isotropic([0.0; 3], 5.0, 0.5, [0.5; 3], 0));
        cloud.push(Gaussian::isotropic([0.0; 3], 0.2, 0.5, [0.5; 3], 0));
        let out = clamp_scales(&cloud, 1.0);
        let s = out.scales(0);
        for k in 0..3 {
            assert!((s[k] - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.block(1), cloud.block(1));
    }

    proptest::proptest! {
        #[test]
        fn clamp_scales_bounded_idempotent_monotone(
            logs in proptest::collection::vec(-4.0f64..4.0, 3..60),
            max_scale in 0.05f64..10.0,
        ) {
            let mut cloud = GaussianCloud::new(0);
            for chunk in logs.chunks_exact(3) {
                let mut g = Gaussian::isotropic([0.0; 3], 1.0, 0.5, [0.5; 3], 0);
                g.log_scale = [chunk[0], chunk[1], chunk[2]];
                cloud.push(g);
            }
            let once = clamp_scales(&cloud, max_scale);
            let twice = clamp_scales(&once, max_scale);
            proptest::prop_assert_eq!(&once, &twice);
            for i in 0..cloud.len() {
                let (a, b) = (cloud.scales(i), once.scales(i));
                for k in 0..3 {
                    proptest::prop_assert!(b[k] <= max_scale * (1.0 + 1e-12));
                    proptest::prop_assert!(b[k] <= a[k]);
                }
            }
        }
    }
}
