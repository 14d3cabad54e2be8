//! Procedural street scenes with exact ground truth.
//!
//! The street runs along +z. The ground lies at `y = camera_height` (camera
//! frame is y-down), building facades line both sides at
//! `x = ±ground_half_width`, and cars are rigid objects: some drive along a
//! lane to the right of the camera path, some are parked. The ground truth
//! is itself a Gaussian cloud rendered with [`crate::rasterizer`].
//!
//! A dataset directory holds:
//!
//! ```text
//! spec.txt            the scene spec, all keys
//! cameras.txt         training cameras (offset 0) and lateral eval cameras
//! frames/NNN.ppm      training images
//! depth/NNN.eigf      dense ground-truth depth of the training views
//! sparse/NNN.txt      sparse depth samples `x y depth`
//! eval/oOFF/NNN.ppm   ground truth at each lateral offset
//! tracks.txt          rigid-object poses
//! lidar.txt           LiDAR-like points
//! gt_scene.fsplat     the ground-truth cloud
//! overlap.csv         frustum overlap of each eval camera with its train camera
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{self, bad_value, parse_list, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::formats::{self, CameraEntry, LidarPoint};
use crate::image::{RgbImage, ScalarImage};
use crate::losses::{DepthSample, SparseDepth, DEPTH_MIN_OPACITY};
use crate::persist::{self, CloudFormat};
use crate::rasterizer::{render, RenderOutput};
use crate::scene::{
    logit, param_dim, rgb_to_sh0, Camera, GaussianCloud, Group, RigidPose, RigidPoseTrack, Scene, SkyModel, LOG_SCALE,
    OPACITY, ROTATION, SH,
};

/// Street scene and camera rig parameters. Lengths are in scene units.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Forward distance travelled by the camera per frame.
    pub frame_step: f64,
    /// Lateral position of the training camera path.
    pub camera_x: f64,
    /// Height of the camera above the ground.
    pub camera_height: f64,
    pub ground_half_width: f64,
    /// Ground extent beyond the last camera position.
    pub ground_ahead: f64,
    pub ground_spacing: f64,
    pub buildings_per_side: usize,
    pub building_length: (f64, f64),
    pub building_height: (f64, f64),
    pub building_gap: (f64, f64),
    pub facade_spacing: f64,
    pub movers: usize,
    /// Forward distance per frame of moving cars.
    pub mover_speed: f64,
    pub parked: usize,
    pub car_spacing: f64,
    pub palette: Vec<[f64; 3]>,
    pub sky: [f64; 3],
    pub texture_noise: f64,
    pub eval_offsets: Vec<f64>,
    pub sparse_rate: f64,
    pub lidar_rate: f64,
    pub lidar_noise: f64,
}

// Colors are stored as 8-bit hex so that specs round-trip through text.
const DEFAULT_PALETTE: [&str; 6] = ["b04a3d", "d9c9a3", "5c7394", "8c9e61", "c78c4d", "735c80"];
const DEFAULT_SKY: &str = "8cb3e6";

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 40,
            width: 160,
            height: 120,
            focal: 100.0,
            frame_step: 0.5,
            camera_x: -2.0,
            camera_height: 1.5,
            ground_half_width: 8.0,
            ground_ahead: 25.0,
            ground_spacing: 0.5,
            buildings_per_side: 5,
            building_length: (4.0, 9.0),
            building_height: (3.0, 7.0),
            building_gap: (0.5, 2.0),
            facade_spacing: 0.6,
            movers: 2,
            mover_speed: 0.3,
            parked: 1,
            car_spacing: 0.35,
            palette: DEFAULT_PALETTE.iter().map(|h| parse_hex_color("palette", h).unwrap()).collect(),
            sky: parse_hex_color("sky", DEFAULT_SKY).unwrap(),
            texture_noise: 0.05,
            eval_offsets: vec![1.0, 2.0, 3.0, 6.0],
            sparse_rate: 0.01,
            lidar_rate: 0.5,
            lidar_noise: 0.02,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "seed",
    "frames",
    "width",
    "height",
    "focal",
    "frame_step",
    "camera_x",
    "camera_height",
    "ground_half_width",
    "ground_ahead",
    "ground_spacing",
    "buildings_per_side",
    "building_length_min",
    "building_length_max",
    "building_height_min",
    "building_height_max",
    "building_gap_min",
    "building_gap_max",
    "facade_spacing",
    "movers",
    "mover_speed",
    "parked",
    "car_spacing",
    "palette",
    "sky",
    "texture_noise",
    "eval_offsets",
    "sparse_rate",
    "lidar_rate",
    "lidar_noise",
];

fn parse_hex_color(key: &str, s: &str) -> Result<[f64; 3]> {
    let h = s.trim().trim_start_matches('#');
    if h.len() != 6 {
        return Err(bad_value(key, format!("`{s}` is not a 6-digit hex color")));
    }
    let mut out = [0.0; 3];
    for (k, c) in out.iter_mut().enumerate() {
        let v = u8::from_str_radix(&h[2 * k..2 * k + 2], 16).map_err(|_| bad_value(key, format!("`{s}` is not hex")))?;
        *c = v as f64 / 255.0;
    }
    Ok(out)
}

fn hex_color(c: [f64; 3]) -> String {
    let q = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    format!("{:02x}{:02x}{:02x}", q[0], q[1], q[2])
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl SceneSpec {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(SPEC_KEYS)?;
        let mut s = Self::default();
        for (k, v) in kv.iter() {
            match k {
                "seed" => s.seed = parse_value(k, v)?,
                "frames" => s.frames = parse_value(k, v)?,
                "width" => s.width = parse_value(k, v)?,
                "height" => s.height = parse_value(k, v)?,
                "focal" => s.focal = parse_value(k, v)?,
                "frame_step" => s.frame_step = parse_value(k, v)?,
                "camera_x" => s.camera_x = parse_value(k, v)?,
                "camera_height" => s.camera_height = parse_value(k, v)?,
                "ground_half_width" => s.ground_half_width = parse_value(k, v)?,
                "ground_ahead" => s.ground_ahead = parse_value(k, v)?,
                "ground_spacing" => s.ground_spacing = parse_value(k, v)?,
                "buildings_per_side" => s.buildings_per_side = parse_value(k, v)?,
                "building_length_min" => s.building_length.0 = parse_value(k, v)?,
                "building_length_max" => s.building_length.1 = parse_value(k, v)?,
                "building_height_min" => s.building_height.0 = parse_value(k, v)?,
                "building_height_max" => s.building_height.1 = parse_value(k, v)?,
                "building_gap_min" => s.building_gap.0 = parse_value(k, v)?,
                "building_gap_max" => s.building_gap.1 = parse_value(k, v)?,
                "facade_spacing" => s.facade_spacing = parse_value(k, v)?,
                "movers" => s.movers = parse_value(k, v)?,
                "mover_speed" => s.mover_speed = parse_value(k, v)?,
                "parked" => s.parked = parse_value(k, v)?,
                "car_spacing" => s.car_spacing = parse_value(k, v)?,
                "palette" => {
                    s.palette = v.split(',').map(|c| parse_hex_color(k, c)).collect::<Result<_>>()?;
                }
                "sky" => {
                    s.sky = parse_hex_color(k, v)?;
                }
                "texture_noise" => s.texture_noise = parse_value(k, v)?,
                "eval_offsets" => s.eval_offsets = parse_list(k, v)?,
                "sparse_rate" => s.sparse_rate = parse_value(k, v)?,
                "lidar_rate" => s.lidar_rate = parse_value(k, v)?,
                "lidar_noise" => s.lidar_noise = parse_value(k, v)?,
                _ => unreachable!("checked above"),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("frames", self.frames.to_string());
        m.insert("width", self.width.to_string());
        m.insert("height", self.height.to_string());
        m.insert("focal", format!("{:?}", self.focal));
        m.insert("frame_step", format!("{:?}", self.frame_step));
        m.insert("camera_x", format!("{:?}", self.camera_x));
        m.insert("camera_height", format!("{:?}", self.camera_height));
        m.insert("ground_half_width", format!("{:?}", self.ground_half_width));
        m.insert("ground_ahead", format!("{:?}", self.ground_ahead));
        m.insert("ground_spacing", format!("{:?}", self.ground_spacing));
        m.insert("buildings_per_side", self.buildings_per_side.to_string());
        m.insert("building_length_min", format!("{:?}", self.building_length.0));
        m.insert("building_length_max", format!("{:?}", self.building_length.1));
        m.insert("building_height_min", format!("{:?}", self.building_height.0));
        m.insert("building_height_max", format!("{:?}", self.building_height.1));
        m.insert("building_gap_min", format!("{:?}", self.building_gap.0));
        m.insert("building_gap_max", format!("{:?}", self.building_gap.1));
        m.insert("facade_spacing", format!("{:?}", self.facade_spacing));
        m.insert("movers", self.movers.to_string());
        m.insert("mover_speed", format!("{:?}", self.mover_speed));
        m.insert("parked", self.parked.to_string());
        m.insert("car_spacing", format!("{:?}", self.car_spacing));
        m.insert("palette", self.palette.iter().map(|c| hex_color(*c)).collect::<Vec<_>>().join(", "));
        m.insert("sky", hex_color(self.sky));
        m.insert("texture_noise", format!("{:?}", self.texture_noise));
        m.insert("eval_offsets", join(&self.eval_offsets));
        m.insert("sparse_rate", format!("{:?}", self.sparse_rate));
        m.insert("lidar_rate", format!("{:?}", self.lidar_rate));
        m.insert("lidar_noise", format!("{:?}", self.lidar_noise));
        config::render(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(bad_value("frames", "at least 2 frames are required"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad_value("width", "resolution must be at least 1x1"));
        }
        let positive = [
            ("focal", self.focal),
            ("camera_height", self.camera_height),
            ("ground_half_width", self.ground_half_width),
            ("ground_spacing", self.ground_spacing),
            ("facade_spacing", self.facade_spacing),
            ("car_spacing", self.car_spacing),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad_value(k, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("frame_step", self.frame_step),
            ("ground_ahead", self.ground_ahead),
            ("mover_speed", self.mover_speed),
            ("texture_noise", self.texture_noise),
            ("lidar_noise", self.lidar_noise),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad_value(k, format!("must be non-negative, got {v}")));
            }
        }
        if !self.camera_x.is_finite() {
            return Err(bad_value("camera_x", "must be finite"));
        }
        for (k, (lo, hi)) in [
            ("building_length", self.building_length),
            ("building_height", self.building_height),
            ("building_gap", self.building_gap),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(bad_value(&format!("{k}_min"), format!("range {lo}..{hi} must satisfy 0 < min <= max")));
            }
        }
        if self.palette.is_empty() {
            return Err(bad_value("palette", "needs at least one color"));
        }
        if let Some(o) = self.eval_offsets.iter().find(|o| !o.is_finite()) {
            return Err(bad_value("eval_offsets", format!("offset {o} is not finite")));
        }
        for (k, v) in [("sparse_rate", self.sparse_rate), ("lidar_rate", self.lidar_rate)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad_value(k, format!("rate must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Forward position of the camera at frame `t`.
    pub fn camera_z(&self, t: usize) -> f64 {
        self.frame_step * t as f64
    }

    fn ground_y(&self) -> f64 {
        self.camera_height
    }

    fn street_end(&self) -> f64 {
        self.camera_z(self.frames - 1) + self.ground_ahead
    }
}

const STREET_START: f64 = -3.0;
const SOLID_OPACITY: f64 = 0.97;
const THIN_SCALE: f64 = 0.03;
const CAR_SIZE: [f64; 3] = [1.8, 1.4, 4.0];
const CAR_CLEARANCE: f64 = 0.05;

/// Ground-truth scene plus the rig derived from a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub rig: Rig,
}

/// Training cameras along the street and lateral eval cameras per offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub train: Vec<Camera>,
    /// `(offset, cameras)` in offset order; cameras are indexed by frame.
    pub eval: Vec<(f64, Vec<Camera>)>,
}

impl Rig {
    pub fn entries(&self) -> Vec<CameraEntry> {
        let mut out: Vec<CameraEntry> = self
            .train
            .iter()
            .enumerate()
            .map(|(frame, c)| CameraEntry {
                frame,
                offset: 0.0,
                camera: *c,
            })
            .collect();
        for (offset, cams) in &self.eval {
            out.extend(cams.iter().enumerate().map(|(frame, c)| CameraEntry {
                frame,
                offset: *offset,
                camera: *c,
            }));
        }
        out
    }
}

/// Forward training cameras and, per eval offset, the same cameras shifted
/// along their right axis.
pub fn make_rig(spec: &SceneSpec) -> Rig {
    let train: Vec<Camera> = (0..spec.frames)
        .map(|t| {
            Camera::looking_forward(spec.width, spec.height, spec.focal)
                .with_center(Vector3::new(spec.camera_x, 0.0, spec.camera_z(t)))
                .with_timestamp(t)
        })
        .collect();
    let mut offsets = spec.eval_offsets.clone();
    offsets.sort_by(f64::total_cmp);
    offsets.dedup();
    let eval = offsets
        .into_iter()
        .map(|o| (o, train.iter().map(|c| c.shifted_laterally(o)).collect()))
        .collect();
    Rig { train, eval }
}

struct Builder<'a> {
    cloud: GaussianCloud,
    rng: &'a mut ChaCha8Rng,
    noise: f64,
}

impl Builder<'_> {
    fn jitter(&mut self, c: [f64; 3]) -> [f64; 3] {
        if self.noise == 0.0 {
            return c;
        }
        let d = self.rng.random_range(-self.noise..=self.noise);
        c.map(|v| (v + d).clamp(0.02, 0.98))
    }

    fn push(&mut self, mean: Vector3<f64>, scales: [f64; 3], rgb: [f64; 3], group: Group) {
        let mut block = vec![0.0; param_dim(0)];
        block[..3].copy_from_slice(mean.as_slice());
        block[ROTATION] = 1.0;
        for k in 0..3 {
            block[LOG_SCALE + k] = scales[k].ln();
        }
        block[OPACITY] = logit(SOLID_OPACITY);
        let rgb = self.jitter(rgb);
        block[SH..SH + 3].copy_from_slice(&rgb_to_sh0(rgb));
        self.cloud.push_block(&block, group);
    }

    /// Cover an axis-aligned rectangle with flat Gaussians. The rectangle
    /// spans `len_u` along axis `u` and `len_v` along axis `v` from `origin`;
    /// `color` receives the local `(u, v)` coordinates of each center.
    #[allow(clippy::too_many_arguments)]
    fn patch(
        &mut self,
        origin: Vector3<f64>,
        (u, len_u): (usize, f64),
        (v, len_v): (usize, f64),
        spacing: f64,
        group: Group,
        color: impl Fn(f64, f64) -> [f64; 3],
    ) {
        let nu = (len_u / spacing).ceil().max(1.0) as usize;
        let nv = (len_v / spacing).ceil().max(1.0) as usize;
        let (su, sv) = (len_u / nu as f64, len_v / nv as f64);
        let mut scales = [THIN_SCALE; 3];
        scales[u] = 0.6 * su;
        scales[v] = 0.6 * sv;
        for i in 0..nu {
            for j in 0..nv {
                let (a, b) = ((i as f64 + 0.5) * su, (j as f64 + 0.5) * sv);
                let mut p = origin;
                p[u] += a;
                p[v] += b;
                self.push(p, scales, color(a, b), group);
            }
        }
    }
}

const ROAD_HALF_WIDTH: f64 = 5.0;
const ROAD: [f64; 3] = [0.30, 0.30, 0.32];
const SIDEWALK: [f64; 3] = [0.62, 0.60, 0.56];
const MARKING: [f64; 3] = [0.92, 0.92, 0.88];
const WINDOW: [f64; 3] = [0.16, 0.19, 0.24];
const TIRE: [f64; 3] = [0.08, 0.08, 0.08];

fn ground_color(spec: &SceneSpec, x: f64, z: f64) -> [f64; 3] {
    let marking_x = spec.camera_x + 2.25;
    if x.abs() > ROAD_HALF_WIDTH {
        SIDEWALK
    } else if (x - marking_x).abs() < 0.5 * spec.ground_spacing && z.rem_euclid(4.0) < 2.0 {
        MARKING
    } else {
        ROAD
    }
}

fn window_at(a: f64, b: f64) -> bool {
    let row = b / 1.2;
    let col = a / 1.5;
    row >= 1.0 && (0.3..0.8).contains(&row.fract()) && (0.25..0.75).contains(&col.fract())
}

/// Box-surface Gaussians of a car in its canonical frame (center at the
/// origin, length along z), without the bottom face.
fn add_car(b: &mut Builder<'_>, spacing: f64, body: [f64; 3], group: Group) {
    let [w, h, l] = CAR_SIZE;
    let o = Vector3::new(-w / 2.0, -h / 2.0, -l / 2.0);
    // sides, with a window band on the upper third
    for x in [-w / 2.0, w / 2.0] {
        b.patch(Vector3::new(x, o.y, o.z), (2, l), (1, h), spacing, group, |z, y| {
            if y < h / 3.0 && z > 0.6 && z < l - 0.6 {
                WINDOW
            } else if y > 0.8 * h {
                TIRE
            } else {
                body
            }
        });
    }
    // front and back
    for z in [-l / 2.0, l / 2.0] {
        b.patch(Vector3::new(o.x, o.y, z), (0, w), (1, h), spacing, group, |_, y| {
            if y < h / 3.0 {
                WINDOW
            } else {
                body
            }
        });
    }
    b.patch(o, (0, w), (2, l), spacing, group, |_, _| body);
}

/// Deterministic ground-truth scene and rig for a spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ground_y = spec.ground_y();
    let end = spec.street_end();
    let mut b = Builder {
        cloud: GaussianCloud::new(0),
        rng: &mut rng,
        noise: spec.texture_noise,
    };

    let half = spec.ground_half_width;
    b.patch(
        Vector3::new(-half, ground_y, STREET_START),
        (0, 2.0 * half),
        (2, end - STREET_START),
        spec.ground_spacing,
        Group::Background,
        |x, z| ground_color(spec, x - half, z + STREET_START),
    );

    for side in [-1.0, 1.0] {
        let mut z = STREET_START;
        for _ in 0..spec.buildings_per_side {
            let length = b.rng.random_range(spec.building_length.0..=spec.building_length.1);
            let height = b.rng.random_range(spec.building_height.0..=spec.building_height.1);
            let color = spec.palette[b.rng.random_range(0..spec.palette.len())];
            let top = ground_y - height;
            b.patch(
                Vector3::new(side * half, top, z),
                (2, length),
                (1, height),
                spec.facade_spacing,
                Group::Background,
                |a, y| if window_at(a, height - y) { WINDOW } else { color },
            );
            z += length + b.rng.random_range(spec.building_gap.0..=spec.building_gap.1);
        }
    }

    let car_y = ground_y - CAR_SIZE[1] / 2.0 - CAR_CLEARANCE;
    let mut tracks = Vec::new();
    let lane_x = spec.camera_x + 4.5;
    for k in 0..spec.movers + spec.parked {
        let id = k as u32;
        let group = Group::Rigid(id);
        let body = spec.palette[b.rng.random_range(0..spec.palette.len())];
        add_car(&mut b, spec.car_spacing, body, group);
        let mut track = RigidPoseTrack::new(id);
        if k < spec.movers {
            let z0 = 6.0 + 6.0 * k as f64;
            for t in 0..spec.frames {
                let pose = RigidPose::new(
                    Matrix3::identity(),
                    Vector3::new(lane_x, car_y, z0 + spec.mover_speed * t as f64),
                );
                track.insert(t, pose);
            }
        } else {
            let j = k - spec.movers;
            let side = if j % 2 == 0 { 1.0 } else { -1.0 };
            let yaw = b.rng.random_range(-0.15..0.15);
            let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
            let pos = Vector3::new(side * (ROAD_HALF_WIDTH - CAR_SIZE[0] / 2.0 - 0.1), car_y, 8.0 + 9.0 * j as f64);
            for t in 0..spec.frames {
                track.insert(t, RigidPose::new(rot, pos));
            }
        }
        tracks.push(track);
    }

    let scene = Scene::new(b.cloud, tracks, SkyModel::new(spec.sky));
    Ok(GeneratedScene {
        scene,
        rig: make_rig(spec),
    })
}

/// Render the ground truth (color, dense depth, opacity) from a camera at
/// its timestamp.
pub fn render_ground_truth(scene: &Scene, cam: &Camera) -> Result<RenderOutput> {
    render(scene, cam, cam.timestamp)
}

/// Seeded Bernoulli subsample of pixels with opacity above
/// [`DEPTH_MIN_OPACITY`]. A rate of 1 keeps every valid pixel.
pub fn sample_sparse_depth(depth: &ScalarImage, opacity: &ScalarImage, rate: f64, seed: u64) -> Result<SparseDepth> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid("rate", format!("must lie in (0, 1], got {rate}")));
    }
    if depth.width != opacity.width || depth.height != opacity.height {
        return Err(Error::shape(
            format!("{}x{}", depth.width, depth.height),
            format!("{}x{}", opacity.width, opacity.height),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let keep = rng.random::<f64>() < rate;
            if keep && opacity.get(x, y) > DEPTH_MIN_OPACITY {
                samples.push(DepthSample {
                    x,
                    y,
                    depth: depth.get(x, y),
                    valid: true,
                });
            }
        }
    }
    Ok(SparseDepth::new(samples))
}

/// Fraction of frustum-`a` volume (between `near` and `far`) also inside
/// frustum `b`, estimated on a fixed stratified grid so that results are
/// comparable across camera pairs.
pub fn overlap(a: &Camera, b: &Camera, near: f64, far: f64) -> f64 {
    const NU: usize = 32;
    const NV: usize = 24;
    const ND: usize = 32;
    let rot_inv = a.rotation.transpose();
    let (n3, f3) = (near.powi(3), far.powi(3));
    let mut inside = 0usize;
    for k in 0..ND {
        // depth stratified by volume
        let s = (k as f64 + 0.5) / ND as f64;
        let z = (n3 + s * (f3 - n3)).cbrt();
        for j in 0..NV {
            let v = (j as f64 + 0.5) / NV as f64 * a.height as f64;
            for i in 0..NU {
                let u = (i as f64 + 0.5) / NU as f64 * a.width as f64;
                let pc = Vector3::new((u - a.cx) / a.fx * z, (v - a.cy) / a.fy * z, z);
                let pw = rot_inv * (pc - a.translation);
                let q = b.world_to_camera(&pw);
                if q.z >= near && q.z <= far {
                    let (pu, pv) = (b.fx * q.x / q.z + b.cx, b.fy * q.y / q.z + b.cy);
                    if pu >= 0.0 && pu <= b.width as f64 && pv >= 0.0 && pv <= b.height as f64 {
                        inside += 1;
                    }
                }
            }
        }
    }
    inside as f64 / (NU * NV * ND) as f64
}

pub const OVERLAP_NEAR: f64 = 0.5;
pub const OVERLAP_FAR: f64 = 30.0;

/// LiDAR-like points: a seeded subsample of ground-truth centers in their
/// canonical frames, with uniform noise of `±noise` per axis.
pub fn lidar_points(scene: &Scene, rate: f64, noise: f64, seed: u64) -> Vec<LidarPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = &scene.cloud;
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        if rng.random::<f64>() >= rate {
            continue;
        }
        let m = cloud.mean(i);
        let mut p = [m.x, m.y, m.z];
        if noise > 0.0 {
            for c in &mut p {
                *c += rng.random_range(-noise..=noise);
            }
        }
        out.push(LidarPoint {
            position: p,
            group: cloud.groups()[i],
        });
    }
    out
}

/// Initial cloud from LiDAR points: gray isotropic Gaussians at half
/// opacity, sized by the mean distance to the three nearest points of the
/// same group.
pub fn init_from_lidar(points: &[LidarPoint], sh_degree: u8) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(sh_degree);
    let p = param_dim(sh_degree);
    let dist: Vec<f64> = points
        .par_iter()
        .map(|a| {
            let mut best = [f64::INFINITY; 3];
            for b in points {
                if std::ptr::eq(a, b) || a.group != b.group {
                    continue;
                }
                let d = (0..3).map(|k| (a.position[k] - b.position[k]).powi(2)).sum::<f64>();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.iter().filter(|d| d.is_finite()).map(|d| d.sqrt()).collect();
            if found.is_empty() {
                0.1
            } else {
                found.iter().sum::<f64>() / found.len() as f64
            }
        })
        .collect();
    for (pt, d) in points.iter().zip(dist) {
        let mut block = vec![0.0; p];
        block[..3].copy_from_slice(&pt.position);
        block[ROTATION] = 1.0;
        let s = (0.5 * d).clamp(0.01, 1.0).ln();
        block[LOG_SCALE..LOG_SCALE + 3].fill(s);
        block[OPACITY] = 0.0;
        cloud.push_block(&block, pt.group);
    }
    cloud
}

/// One training view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub image: RgbImage,
    pub sparse: SparseDepth,
}

/// Ground truth for one lateral eval camera.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalView {
    pub frame: usize,
    pub offset: f64,
    pub camera: Camera,
    pub image: RgbImage,
}

/// A synthetic dataset in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<TrainView>,
    pub eval: Vec<EvalView>,
    pub tracks: Vec<RigidPoseTrack>,
    pub lidar: Vec<LidarPoint>,
    pub ground_truth: Scene,
}

impl Dataset {
    pub fn offsets(&self) -> Vec<f64> {
        let mut o: Vec<f64> = self.eval.iter().map(|e| e.offset).collect();
        o.sort_by(f64::total_cmp);
        o.dedup();
        o
    }

    pub fn eval_at(&self, offset: f64) -> impl Iterator<Item = &EvalView> {
        self.eval.iter().filter(move |e| e.offset == offset)
    }

    pub fn train_cameras(&self) -> Vec<Camera> {
        self.train.iter().map(|v| v.camera).collect()
    }
}

fn sparse_seed(spec: &SceneSpec, frame: usize) -> u64 {
    spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(frame as u64 + 1)
}

/// Generate the scene and render every view of its rig.
pub fn generate_dataset(spec: &SceneSpec) -> Result<(Dataset, Vec<ScalarImage>)> {
    let gen = generate_scene(spec)?;
    let scene = &gen.scene;
    let train_out: Vec<(TrainView, ScalarImage)> = gen
        .rig
        .train
        .par_iter()
        .enumerate()
        .map(|(t, cam)| {
            let out = render_ground_truth(scene, cam)?;
            let sparse = sample_sparse_depth(&out.depth, &out.opacity, spec.sparse_rate, sparse_seed(spec, t))?;
            Ok((
                TrainView {
                    camera: *cam,
                    image: out.color,
                    sparse,
                },
                out.depth,
            ))
        })
        .collect::<Result<_>>()?;
    let (train, depths) = train_out.into_iter().unzip();
    let eval = gen
        .rig
        .eval
        .iter()
        .flat_map(|(o, cams)| cams.iter().enumerate().map(move |(f, c)| (*o, f, c)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(offset, frame, cam)| {
            Ok(EvalView {
                frame: *frame,
                offset: *offset,
                camera: **cam,
                image: render_ground_truth(scene, cam)?.color,
            })
        })
        .collect::<Result<_>>()?;
    let lidar = lidar_points(scene, spec.lidar_rate, spec.lidar_noise, spec.seed ^ 0x5eed);
    Ok((
        Dataset {
            spec: spec.clone(),
            train,
            eval,
            tracks: scene.tracks.clone(),
            lidar,
            ground_truth: scene.clone(),
        },
        depths,
    ))
}

fn frame_name(t: usize) -> String {
    format!("{t:03}")
}

fn offset_dir(offset: f64) -> String {
    format!("o{offset}")
}

fn create_dir(path: &Path) -> Result<()> {
    match std::fs::create_dir(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && path.is_dir() => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn encode_sparse(sparse: &SparseDepth) -> String {
    let mut s = String::from("# x y depth\n");
    for d in sparse.samples.iter().filter(|d| d.valid) {
        let _ = writeln!(s, "{} {} {:?}", d.x, d.y, d.depth);
    }
    s
}

pub fn decode_sparse(text: &str) -> Result<SparseDepth> {
    let mut samples = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let l = line.trim();
        if !l.is_empty() && !l.starts_with('#') {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::parse(offset, format!("bad sparse depth line `{l}`"));
            if parts.len() != 3 {
                return Err(bad());
            }
            samples.push(DepthSample {
                x: parts[0].parse().map_err(|_| bad())?,
                y: parts[1].parse().map_err(|_| bad())?,
                depth: parts[2].parse().map_err(|_| bad())?,
                valid: true,
            });
        }
        offset += line.len() as u64;
    }
    Ok(SparseDepth::new(samples))
}

/// Write a dataset directory. The parent of `dir` must exist.
pub fn write_dataset(data: &Dataset, depths: &[ScalarImage], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for sub in ["frames", "depth", "sparse", "eval"] {
        create_dir(&dir.join(sub))?;
    }
    write_text(&dir.join("spec.txt"), &data.spec.to_text())?;
    let mut entries: Vec<CameraEntry> = data
        .train
        .iter()
        .enumerate()
        .map(|(frame, v)| CameraEntry {
            frame,
            offset: 0.0,
            camera: v.camera,
        })
        .collect();
    entries.extend(data.eval.iter().map(|e| CameraEntry {
        frame: e.frame,
        offset: e.offset,
        camera: e.camera,
    }));
    formats::save_cameras(&entries, &dir.join("cameras.txt"))?;
    for (t, v) in data.train.iter().enumerate() {
        formats::save_ppm(&v.image, &dir.join("frames").join(format!("{}.ppm", frame_name(t))))?;
        write_text(&dir.join("sparse").join(format!("{}.txt", frame_name(t))), &encode_sparse(&v.sparse))?;
    }
    for (t, d) in depths.iter().enumerate() {
        formats::save_eigf(d, &dir.join("depth").join(format!("{}.eigf", frame_name(t))))?;
    }
    for offset in data.offsets() {
        create_dir(&dir.join("eval").join(offset_dir(offset)))?;
    }
    let mut overlap_csv = String::from("frame,offset,overlap\n");
    for e in &data.eval {
        let path = dir.join("eval").join(offset_dir(e.offset)).join(format!("{}.ppm", frame_name(e.frame)));
        formats::save_ppm(&e.image, &path)?;
        let o = overlap(&data.train[e.frame].camera, &e.camera, OVERLAP_NEAR, OVERLAP_FAR);
        let _ = writeln!(overlap_csv, "{},{},{}", e.frame, e.offset, formats::csv_float(o));
    }
    write_text(&dir.join("overlap.csv"), &overlap_csv)?;
    write_text(&dir.join("tracks.txt"), &formats::encode_tracks(&data.tracks))?;
    write_text(&dir.join("lidar.txt"), &formats::encode_lidar(&data.lidar))?;
    let gt = &data.ground_truth;
    persist::save_cloud(&gt.cloud, &gt.tracks, &gt.sky, &dir.join("gt_scene.fsplat"), CloudFormat::Binary)
}

/// Read a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec = SceneSpec::load(&dir.join("spec.txt"))?;
    let entries = formats::load_cameras(&dir.join("cameras.txt"))?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for e in entries {
        if e.offset == 0.0 && train.len() == e.frame {
            let name = frame_name(e.frame);
            train.push(TrainView {
                camera: e.camera,
                image: formats::load_ppm(&dir.join("frames").join(format!("{name}.ppm")))?,
                sparse: decode_sparse(&read_text(&dir.join("sparse").join(format!("{name}.txt")))?)?,
            });
        } else {
            let path: PathBuf =
                dir.join("eval").join(offset_dir(e.offset)).join(format!("{}.ppm", frame_name(e.frame)));
            eval.push(EvalView {
                frame: e.frame,
                offset: e.offset,
                camera: e.camera,
                image: formats::load_ppm(&path)?,
            });
        }
    }
    if train.is_empty() {
        return Err(Error::invalid("data", format!("{} has no training cameras", dir.display())));
    }
    let tracks = formats::decode_tracks(&read_text(&dir.join("tracks.txt"))?)?;
    let lidar = formats::decode_lidar(&read_text(&dir.join("lidar.txt"))?)?;
    let ground_truth = persist::load_cloud(&dir.join("gt_scene.fsplat"))?;
    Ok(Dataset {
        spec,
        train,
        eval,
        tracks,
        lidar,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            frames: 4,
            width: 64,
            height: 48,
            focal: 40.0,
            ground_ahead: 12.0,
            buildings_per_side: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let s = SceneSpec::default();
        assert_eq!(SceneSpec::parse(&s.to_text()).unwrap(), s);
        assert!(matches!(SceneSpec::parse("colour = 1\n"), Err(Error::UnknownKey(k)) if k == "colour"));
        assert!(matches!(SceneSpec::parse("frames = 1\n"), Err(Error::BadValue { key, .. }) if key == "frames"));
        assert!(matches!(SceneSpec::parse("eval_offsets = 1, inf\n"), Err(Error::BadValue { .. })));
        assert!(matches!(SceneSpec::parse("palette = zz0000\n"), Err(Error::BadValue { .. })));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small_spec();
        assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
        let other = SceneSpec { seed: 8, ..s };
        assert_ne!(generate_scene(&other).unwrap().scene, generate_scene(&small_spec()).unwrap().scene);
    }

    #[test]
    fn empty_street_is_ground_and_sky() {
        let s = SceneSpec {
            buildings_per_side: 0,
            movers: 0,
            parked: 0,
            ..small_spec()
        };
        let g = generate_scene(&s).unwrap();
        assert!(g.scene.tracks.is_empty());
        assert!(g.scene.cloud.groups().iter().all(|g| *g == Group::Background));
        let ground = s.ground_y();
        assert!((0..g.scene.cloud.len()).all(|i| (g.scene.cloud.mean(i).y - ground).abs() < 1e-12));
        // the top row looks at the sky
        let out = render_ground_truth(&g.scene, &g.rig.train[0]).unwrap();
        let c = out.color.get(s.width / 2, 0);
        for k in 0..3 {
            assert!((c[k] - s.sky[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn default_frames_are_mostly_covered() {
        let s = SceneSpec::default();
        let g = generate_scene(&s).unwrap();
        for t in [0, s.frames / 2, s.frames - 1] {
            let out = render_ground_truth(&g.scene, &g.rig.train[t]).unwrap();
            let covered = out.opacity.data.iter().filter(|o| **o > 0.5).count();
            assert!(covered as f64 >= 0.3 * out.opacity.data.len() as f64, "frame {t}: {covered}");
        }
    }

    #[test]
    fn movers_follow_their_tracks() {
        let s = small_spec();
        let g = generate_scene(&s).unwrap();
        let tr = &g.scene.tracks[0];
        let dz = tr.pose(1).unwrap().translation.z - tr.pose(0).unwrap().translation.z;
        assert!((dz - s.mover_speed).abs() < 1e-12);
        let w0 = g.scene.world_at(0).unwrap();
        let w1 = g.scene.world_at(1).unwrap();
        let i = g.scene.cloud.groups().iter().position(|g| *g == Group::Rigid(0)).unwrap();
        assert!((w1.mean(i).z - w0.mean(i).z - s.mover_speed).abs() < 1e-12);
    }

    #[test]
    fn lateral_view_differs_but_overlaps() {
        let s = small_spec();
        let g = generate_scene(&s).unwrap();
        let rig = &g.rig;
        let (_, cams3) = rig.eval.iter().find(|(o, _)| *o == 3.0).unwrap();
        let a = render_ground_truth(&g.scene, &rig.train[1]).unwrap();
        let b = render_ground_truth(&g.scene, &cams3[1]).unwrap();
        assert_ne!(a.color, b.color);
        let o = overlap(&rig.train[1], &cams3[1], OVERLAP_NEAR, OVERLAP_FAR);
        assert!(o > 0.0 && o < 1.0, "{o}");
        assert_eq!(overlap(&rig.train[1], &rig.train[1], OVERLAP_NEAR, OVERLAP_FAR), 1.0);
    }

    #[test]
    fn zero_offset_eval_equals_train() {
        let s = SceneSpec {
            eval_offsets: vec![0.0, 3.0],
            ..small_spec()
        };
        let rig = make_rig(&s);
        assert_eq!(rig.eval[0].1, rig.train);
    }

    #[test]
    fn overlap_shrinks_with_offset() {
        let s = small_spec();
        let rig = make_rig(&s);
        let mut prev = 1.0;
        for o in [0.0, 0.5, 1.0, 2.0, 3.0, 6.0, 12.0] {
            let v = overlap(&rig.train[0], &rig.train[0].shifted_laterally(o), OVERLAP_NEAR, OVERLAP_FAR);
            assert!(v <= prev, "offset {o}: {v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn sparse_depth_sampling() {
        let depth = ScalarImage::filled(160, 120, 4.0);
        let opacity = ScalarImage::filled(160, 120, 1.0);
        assert_eq!(sample_sparse_depth(&depth, &opacity, 1.0, 3).unwrap().len(), 160 * 120);
        let a = sample_sparse_depth(&depth, &opacity, 0.01, 3).unwrap();
        // binomial(19200, 0.01): sd ≈ 13.8, allow 5 sd
        assert!((a.len() as f64 - 192.0).abs() < 70.0, "{}", a.len());
        assert_eq!(a, sample_sparse_depth(&depth, &opacity, 0.01, 3).unwrap());
        let half = ScalarImage::from_vec(2, 1, vec![0.9, 0.4]).unwrap();
        let s = sample_sparse_depth(&ScalarImage::filled(2, 1, 1.0), &half, 1.0, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert!(sample_sparse_depth(&depth, &opacity, 0.0, 3).is_err());
    }

    #[test]
    fn lidar_init_matches_groups() {
        let g = generate_scene(&small_spec()).unwrap();
        let pts = lidar_points(&g.scene, 0.5, 0.02, 1);
        let n = g.scene.cloud.len() as f64;
        assert!((pts.len() as f64 - 0.5 * n).abs() < 0.1 * n);
        let init = init_from_lidar(&pts, 0);
        assert_eq!(init.len(), pts.len());
        assert_eq!(init.groups()[0], pts[0].group);
        assert!((0..init.len()).all(|i| init.scales(i).x <= 1.0 && init.scales(i).x >= 0.01));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let s = SceneSpec {
            frames: 2,
            width: 32,
            height: 24,
            focal: 20.0,
            eval_offsets: vec![3.0],
            ..small_spec()
        };
        let (data, depths) = generate_dataset(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        write_dataset(&data, &depths, &out).unwrap();
        let back = load_dataset(&out).unwrap();
        assert_eq!(back.spec, data.spec);
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.eval.len(), 2);
        assert_eq!(back.tracks, data.tracks);
        assert_eq!(back.ground_truth, data.ground_truth);
        for (a, b) in back.train.iter().zip(&data.train) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.sparse.len(), b.sparse.len());
            assert!(a.image.data.iter().zip(&b.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        assert!(out.join("overlap.csv").exists());
        assert!(write_dataset(&data, &depths, &dir.path().join("missing/data")).is_err());
    }
}
