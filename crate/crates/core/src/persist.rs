//! `FSPLAT1` scene persistence.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic     "FSPLAT1"            7 bytes
//! version   u32                  currently 1
//! count     u64                  number of Gaussians
//! degree    u8                   SH degree
//! records   count × (group u32, P × f64)
//!           group 0xFFFF_FFFF = background, otherwise rigid object id
//! sky       3 × f64
//! tracks    u32 track count, then per track:
//!           object u32, poses u64, then per pose:
//!           timestamp u64, rotation 9 × f64 (row-major), translation 3 × f64
//! ```
//!
//! The text variant carries the same content, one item per line:
//!
//! ```text
//! # comments start with '#'
//! FSPLAT1 <version> <count> <degree>
//! sky <r> <g> <b>
//! g <bg|rigid:ID> <P values in flattening order>
//! pose <object> <timestamp> <r00 .. r22> <tx ty tz>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{param_dim, GaussianCloud, Group, RigidPose, RigidPoseTrack, Scene, SkyModel};

pub const MAGIC: &[u8; 7] = b"FSPLAT1";
pub const VERSION: u32 = 1;
const BACKGROUND_TAG: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Binary,
    Text,
}

pub fn save_cloud(
    cloud: &GaussianCloud,
    tracks: &[RigidPoseTrack],
    sky: &SkyModel,
    path: &Path,
    format: CloudFormat,
) -> Result<()> {
    let bytes = match format {
        CloudFormat::Binary => encode_binary(cloud, tracks, sky),
        CloudFormat::Text => encode_text(cloud, tracks, sky).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load either format; the variant is detected from the header.
pub fn load_cloud(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Scene> {
    let is_text = bytes.first() == Some(&b'#')
        || (bytes.starts_with(MAGIC) && bytes.get(7).is_some_and(|b| b.is_ascii_whitespace()));
    if is_text {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(e.valid_up_to() as u64, "invalid UTF-8"))?;
        decode_text(text)
    } else {
        decode_binary(bytes)
    }
}

pub fn encode_binary(cloud: &GaussianCloud, tracks: &[RigidPoseTrack], sky: &SkyModel) -> Vec<u8> {
    let p = cloud.param_dim();
    let mut out = Vec::with_capacity(24 + cloud.len() * (4 + 8 * p));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.push(cloud.sh_degree());
    for i in 0..cloud.len() {
        let tag = match cloud.groups()[i] {
            Group::Background => BACKGROUND_TAG,
            Group::Rigid(id) => id,
        };
        out.extend_from_slice(&tag.to_le_bytes());
        for v in cloud.block(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for c in sky.color {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(tracks.len() as u32).to_le_bytes());
    for tr in tracks {
        out.extend_from_slice(&tr.object.to_le_bytes());
        out.extend_from_slice(&(tr.poses.len() as u64).to_le_bytes());
        for (&t, pose) in &tr.poses {
            out.extend_from_slice(&(t as u64).to_le_bytes());
            for r in 0..3 {
                for c in 0..3 {
                    out.extend_from_slice(&pose.rotation[(r, c)].to_le_bytes());
                }
            }
            for k in 0..3 {
                out.extend_from_slice(&pose.translation[k].to_le_bytes());
            }
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(7, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(0, "bad magic, expected FSPLAT1"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u64("count")?;
    let degree_at = r.pos;
    let degree = r.u8("sh degree")?;
    if degree > 2 {
        return Err(Error::parse(degree_at as u64, format!("SH degree {degree} not in 0..=2")));
    }
    let p = param_dim(degree);
    let record = 4 + 8 * p;
    let remaining = (bytes.len() - r.pos) as u64;
    if count.saturating_mul(record as u64) > remaining {
        return Err(Error::parse(
            r.pos as u64,
            format!("truncated record: header declares {count} Gaussians, data holds fewer"),
        ));
    }
    let count = count as usize;
    let mut params = Vec::with_capacity(count * p);
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u32("record")?;
        groups.push(if tag == BACKGROUND_TAG {
            Group::Background
        } else {
            Group::Rigid(tag)
        });
        for _ in 0..p {
            params.push(r.f64("record")?);
        }
    }
    let sky = SkyModel {
        color: [r.f64("sky")?, r.f64("sky")?, r.f64("sky")?],
    };
    let ntracks = r.u32("track count")?;
    let mut tracks = Vec::with_capacity(ntracks as usize);
    for _ in 0..ntracks {
        let mut tr = RigidPoseTrack::new(r.u32("track")?);
        let nposes = r.u64("track")?;
        for _ in 0..nposes {
            let t = r.u64("pose")? as usize;
            let mut m = [0.0; 9];
            for v in &mut m {
                *v = r.f64("pose")?;
            }
            let tv = Vector3::new(r.f64("pose")?, r.f64("pose")?, r.f64("pose")?);
            tr.insert(t, RigidPose::new(Matrix3::from_row_slice(&m), tv));
        }
        tracks.push(tr);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes after track section"));
    }
    Ok(Scene {
        cloud: GaussianCloud::from_parts(degree, params, groups)?,
        tracks,
        sky,
    })
}

pub fn encode_text(cloud: &GaussianCloud, tracks: &[RigidPoseTrack], sky: &SkyModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# faithsplat scene: mean(3) rotation(4) log_scale(3) opacity_logit(1) sh(...)");
    let _ = writeln!(s, "FSPLAT1 {VERSION} {} {}", cloud.len(), cloud.sh_degree());
    let _ = writeln!(s, "sky {:e} {:e} {:e}", sky.color[0], sky.color[1], sky.color[2]);
    for i in 0..cloud.len() {
        match cloud.groups()[i] {
            Group::Background => s.push_str("g bg"),
            Group::Rigid(id) => {
                let _ = write!(s, "g rigid:{id}");
            }
        }
        for v in cloud.block(i) {
            let _ = write!(s, " {v:e}");
        }
        s.push('\n');
    }
    for tr in tracks {
        for (&t, pose) in &tr.poses {
            let _ = write!(s, "pose {} {t}", tr.object);
            for r in 0..3 {
                for c in 0..3 {
                    let _ = write!(s, " {:e}", pose.rotation[(r, c)]);
                }
            }
            for k in 0..3 {
                let _ = write!(s, " {:e}", pose.translation[k]);
            }
            s.push('\n');
        }
    }
    s
}

pub fn decode_text(text: &str) -> Result<Scene> {
    let mut header: Option<(usize, u8)> = None;
    let mut sky = SkyModel::black();
    let mut params = Vec::new();
    let mut groups = Vec::new();
    let mut tracks: Vec<RigidPoseTrack> = Vec::new();
    let mut offset = 0u64;

    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let kind = fields.next().unwrap();
        let nums = |fields: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            fields
                .map(|f| f.parse::<f64>().map_err(|_| Error::parse(at, format!("bad number `{f}`"))))
                .collect()
        };
        match kind {
            "FSPLAT1" => {
                let v: Vec<&str> = fields.collect();
                if v.len() != 3 {
                    return Err(Error::parse(at, "header needs: version count degree"));
                }
                let version: u32 = v[0].parse().map_err(|_| Error::parse(at, "bad version"))?;
                if version != VERSION {
                    return Err(Error::Version {
                        found: version,
                        expected: VERSION,
                    });
                }
                let count = v[1].parse().map_err(|_| Error::parse(at, "bad count"))?;
                let degree: u8 = v[2].parse().map_err(|_| Error::parse(at, "bad degree"))?;
                if degree > 2 {
                    return Err(Error::parse(at, format!("SH degree {degree} not in 0..=2")));
                }
                header = Some((count, degree));
            }
            _ if header.is_none() => return Err(Error::parse(at, "missing FSPLAT1 header line")),
            "sky" => {
                let v = nums(fields)?;
                if v.len() != 3 {
                    return Err(Error::parse(at, "sky needs 3 values"));
                }
                sky = SkyModel {
                    color: [v[0], v[1], v[2]],
                };
            }
            "g" => {
                let (_, degree) = header.unwrap();
                let tag = fields.next().ok_or_else(|| Error::parse(at, "missing group"))?;
                let group = if tag == "bg" {
                    Group::Background
                } else if let Some(id) = tag.strip_prefix("rigid:") {
                    Group::Rigid(id.parse().map_err(|_| Error::parse(at, format!("bad group `{tag}`")))?)
                } else {
                    return Err(Error::parse(at, format!("bad group `{tag}`")));
                };
                let v = nums(fields)?;
                if v.len() != param_dim(degree) {
                    return Err(Error::parse(
                        at,
                        format!("truncated record: {} values, expected {}", v.len(), param_dim(degree)),
                    ));
                }
                params.extend(v);
                groups.push(group);
            }
            "pose" => {
                let object: u32 = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| Error::parse(at, "bad pose object id"))?;
                let t: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| Error::parse(at, "bad pose timestamp"))?;
                let v = nums(fields)?;
                if v.len() != 12 {
                    return Err(Error::parse(at, "pose needs 9 rotation + 3 translation values"));
                }
                let pose = RigidPose::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]));
                match tracks.iter_mut().find(|tr| tr.object == object) {
                    Some(tr) => tr.insert(t, pose),
                    None => {
                        let mut tr = RigidPoseTrack::new(object);
                        tr.insert(t, pose);
                        tracks.push(tr);
                    }
                }
            }
            other => return Err(Error::parse(at, format!("unknown line kind `{other}`"))),
        }
    }
    let (count, degree) = header.ok_or_else(|| Error::parse(0, "missing FSPLAT1 header line"))?;
    if groups.len() != count {
        return Err(Error::parse(
            offset,
            format!("header declares {count} Gaussians, found {}", groups.len()),
        ));
    }
    Ok(Scene {
        cloud: GaussianCloud::from_parts(degree, params, groups)?,
        tracks,
        sky,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(seed: u64, n: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let degree = 1;
        let p = param_dim(degree);
        let mut cloud = GaussianCloud::new(degree);
        for i in 0..n {
            let block: Vec<f64> = (0..p).map(|_| rng.random_range(-10.0..10.0) * rng.random::<f64>()).collect();
            let group = match i % 3 {
                0 => Group::Background,
                1 => Group::Rigid(1),
                _ => Group::Rigid(2),
            };
            cloud.push_block(&block, group);
        }
        let mut tracks = Vec::new();
        for id in [1u32, 2] {
            let mut tr = RigidPoseTrack::new(id);
            for t in 0..5 {
                let m: Vec<f64> = (0..9).map(|_| rng.random()).collect();
                tr.insert(
                    t,
                    RigidPose::new(Matrix3::from_row_slice(&m), Vector3::new(rng.random(), rng.random(), rng.random())),
                );
            }
            tracks.push(tr);
        }
        Scene {
            cloud,
            tracks,
            sky: SkyModel::new([0.5, 0.6, 0.7]),
        }
    }

    #[test]
    fn empty_cloud_round_trips() {
        let cloud = GaussianCloud::new(1);
        let bytes = encode_binary(&cloud, &[], &SkyModel::black());
        assert_eq!(bytes.len(), 7 + 4 + 8 + 1 + 24 + 4);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.cloud, cloud);
        let text = encode_text(&cloud, &[], &SkyModel::black());
        assert_eq!(decode(text.as_bytes()).unwrap().cloud, cloud);
    }

    #[test]
    fn single_gaussian_round_trips() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(Gaussian::isotropic([1.0, 2.0, 3.0], 0.3, 0.7, [0.2, 0.4, 0.9], 0));
        let sky = SkyModel::new([0.1, 0.2, 0.3]);
        let back = decode(&encode_binary(&cloud, &[], &sky)).unwrap();
        assert_eq!(back.cloud, cloud);
        assert_eq!(back.sky, sky);
    }

    #[test]
    fn large_random_scene_binary_bit_exact() {
        let scene = random_scene(11, 1000);
        let bytes = encode_binary(&scene.cloud, &scene.tracks, &scene.sky);
        let back = decode(&bytes).unwrap();
        let a: Vec<u64> = scene.cloud.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.cloud.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back, scene);
    }

    #[test]
    fn text_round_trip_within_tolerance() {
        let scene = random_scene(12, 200);
        let text = encode_text(&scene.cloud, &scene.tracks, &scene.sky);
        let back = decode(text.as_bytes()).unwrap();
        for (a, b) in scene.cloud.params().iter().zip(back.cloud.params()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
        assert_eq!(back.tracks.len(), 2);
        assert_eq!(back.cloud.groups(), scene.cloud.groups());
    }

    #[test]
    fn file_round_trip() {
        let scene = random_scene(13, 20);
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.fsplat", CloudFormat::Binary), ("a.txt", CloudFormat::Text)] {
            let path = dir.path().join(name);
            save_cloud(&scene.cloud, &scene.tracks, &scene.sky, &path, fmt).unwrap();
            let back = load_cloud(&path).unwrap();
            assert_eq!(back.cloud.len(), 20);
        }
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(decode_binary(b"NOTSPLAT...."), Err(Error::Parse { offset: 0, .. })));

        let scene = random_scene(14, 3);
        let mut bytes = encode_binary(&scene.cloud, &scene.tracks, &scene.sky);
        bytes[7] = 9;
        assert!(matches!(decode_binary(&bytes), Err(Error::Version { found: 9, .. })));

        let bytes = encode_binary(&scene.cloud, &scene.tracks, &scene.sky);
        let cut = &bytes[..20 + 50];
        match decode_binary(cut) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 20);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let text = "FSPLAT1 1 1 0\ng bg 1 2 3\n";
        match decode_text(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn binary_round_trip_is_lossless(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 0..(3 * 23)),
        ) {
            let p = param_dim(1);
            let n = vals.len() / p;
            let cloud = GaussianCloud::from_parts(1, vals[..n * p].to_vec(), vec![Group::Rigid(3); n]).unwrap();
            let bytes = encode_binary(&cloud, &[], &SkyModel::black());
            let back = decode_binary(&bytes).unwrap();
            let a: Vec<u64> = cloud.params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.cloud.params().iter().map(|v| v.to_bits()).collect();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
