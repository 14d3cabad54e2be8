//! Image, map, ledger and manifest file formats.
//!
//! - PPM `P6`, 8-bit RGB.
//! - PGM `P5`, 16-bit big-endian or 8-bit.
//! - `EIGF1` scalar fields: magic, width u32, height u32, row-major f32
//!   (little-endian).
//! - `FLEDG1` ledgers: magic, N u64, N × f64 entries, λ_reg f64 (0 when not
//!   finalized), view count u64 (little-endian).
//! - Camera manifests: one camera per line,
//!   `frame offset fx fy cx cy width height r00..r22 t0 t1 t2 timestamp`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fisher::{EigMap, FisherLedger};
use crate::image::{Mask, RgbImage, ScalarImage};
use crate::persist::Reader;
use crate::scene::{Camera, Group, RigidPose, RigidPoseTrack};

pub const EIGF_MAGIC: &[u8; 5] = b"EIGF1";
pub const LEDGER_MAGIC: &[u8; 6] = b"FLEDG1";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[inline]
fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| quantize8(*v)));
    out
}

/// Parse the whitespace-separated header fields of a netpbm file, skipping
/// `#` comments. Returns the fields and the offset of the raster.
fn netpbm_header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(i as u64, "truncated header"));
        }
        out.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(Error::parse(i as u64, "missing raster"));
    }
    Ok((out, i + 1))
}

fn header_number(fields: &[String], k: usize) -> Result<usize> {
    fields[k]
        .parse()
        .map_err(|_| Error::parse(0, format!("bad header field `{}`", fields[k])))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (h, start) = netpbm_header(bytes, 4)?;
    if h[0] != "P6" {
        return Err(Error::parse(0, format!("expected P6, got {}", h[0])));
    }
    let (w, hh, max) = (header_number(&h, 1)?, header_number(&h, 2)?, header_number(&h, 3)?);
    if max != 255 {
        return Err(Error::parse(0, format!("unsupported maxval {max}")));
    }
    let n = 3 * w * hh;
    if bytes.len() - start != n {
        return Err(Error::parse(start as u64, format!("expected {n} raster bytes, got {}", bytes.len() - start)));
    }
    RgbImage::from_vec(w, hh, bytes[start..].iter().map(|b| *b as f64 / 255.0).collect())
}

pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?)
}

/// 16-bit PGM of `v / scale` clamped to `[0, 1]`.
pub fn encode_pgm16(img: &ScalarImage, scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        let q = if scale > 0.0 { ((v / scale).clamp(0.0, 1.0) * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// 8-bit PGM of `v / scale` clamped to `[0, 1]`.
pub fn encode_pgm8(img: &ScalarImage, scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| if scale > 0.0 { quantize8(v / scale) } else { 0 }));
    out
}

pub fn encode_mask_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|b| if *b { 255 } else { 0 }));
    out
}

/// Decode an 8- or 16-bit PGM to values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<ScalarImage> {
    let (h, start) = netpbm_header(bytes, 4)?;
    if h[0] != "P5" {
        return Err(Error::parse(0, format!("expected P5, got {}", h[0])));
    }
    let (w, hh, max) = (header_number(&h, 1)?, header_number(&h, 2)?, header_number(&h, 3)?);
    let raster = &bytes[start..];
    let data: Vec<f64> = match max {
        255 if raster.len() == w * hh => raster.iter().map(|b| *b as f64 / 255.0).collect(),
        65535 if raster.len() == 2 * w * hh => raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        255 | 65535 => return Err(Error::parse(start as u64, "raster length does not match header")),
        m => return Err(Error::parse(0, format!("unsupported maxval {m}"))),
    };
    ScalarImage::from_vec(w, hh, data)
}

pub fn encode_eigf(img: &ScalarImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * img.data.len());
    out.extend_from_slice(EIGF_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_eigf(bytes: &[u8]) -> Result<ScalarImage> {
    let mut r = Reader::new(bytes);
    if r.take(5, "magic")? != EIGF_MAGIC {
        return Err(Error::parse(0, "bad magic, expected EIGF1"));
    }
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(r.f32("value")? as f64);
    }
    if r.remaining() != 0 {
        return Err(Error::parse(r.position() as u64, "trailing bytes"));
    }
    ScalarImage::from_vec(w, h, data)
}

pub fn save_eigf(img: &ScalarImage, path: &Path) -> Result<()> {
    write(path, &encode_eigf(img))
}

pub fn load_eigf(path: &Path) -> Result<ScalarImage> {
    decode_eigf(&read(path)?)
}

/// Sidecar text describing how an EIG map preview was normalized.
pub fn eig_sidecar(map: &EigMap, camera: &str) -> String {
    format!(
        "camera = {camera}\ntimestamp = {}\npercentile = {}\nscale = {:?}\nraw_max = {:?}\nsky_pixels = {}\n",
        map.timestamp,
        map.percentile,
        map.scale,
        map.raw_max,
        map.sky.count()
    )
}

pub fn encode_ledger(ledger: &FisherLedger) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * (ledger.len() + 3));
    out.extend_from_slice(LEDGER_MAGIC);
    out.extend_from_slice(&(ledger.len() as u64).to_le_bytes());
    for v in ledger.entries() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ledger.lambda_reg().unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&ledger.views().to_le_bytes());
    out
}

pub fn decode_ledger(bytes: &[u8]) -> Result<FisherLedger> {
    let mut r = Reader::new(bytes);
    if r.take(6, "magic")? != LEDGER_MAGIC {
        return Err(Error::parse(0, "bad magic, expected FLEDG1"));
    }
    let n = r.u64("entry count")?;
    if n.saturating_mul(8) > r.remaining() as u64 {
        return Err(Error::parse(r.position() as u64, format!("truncated entries: need {n}")));
    }
    let mut entries = Vec::with_capacity(n as usize);
    for _ in 0..n {
        entries.push(r.f64("entry")?);
    }
    let lambda = r.f64("lambda_reg")?;
    let views = r.u64("view count")?;
    if r.remaining() != 0 {
        return Err(Error::parse(r.position() as u64, "trailing bytes"));
    }
    FisherLedger::from_parts(entries, (lambda > 0.0).then_some(lambda), views)
}

pub fn save_ledger(ledger: &FisherLedger, path: &Path) -> Result<()> {
    write(path, &encode_ledger(ledger))
}

pub fn load_ledger(path: &Path) -> Result<FisherLedger> {
    decode_ledger(&read(path)?)
}

/// A camera in a manifest, tagged with its frame and lateral offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraEntry {
    pub frame: usize,
    pub offset: f64,
    pub camera: Camera,
}

pub fn encode_cameras(entries: &[CameraEntry]) -> String {
    let mut s = String::from("# frame offset fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 timestamp\n");
    for e in entries {
        let c = &e.camera;
        let _ = write!(s, "{} {:?} {:?} {:?} {:?} {:?} {} {}", e.frame, e.offset, c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for r in 0..3 {
            for k in 0..3 {
                let _ = write!(s, " {:?}", c.rotation[(r, k)]);
            }
        }
        for k in 0..3 {
            let _ = write!(s, " {:?}", c.translation[k]);
        }
        let _ = writeln!(s, " {}", c.timestamp);
    }
    s
}

/// Byte offset of each line start, for error reporting.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').map(move |l| {
        let o = offset;
        offset += l.len() as u64;
        (o, l.trim())
    })
}

fn fields<T: std::str::FromStr>(offset: u64, parts: &[&str]) -> Result<Vec<T>> {
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| Error::parse(offset, format!("bad number `{p}`"))))
        .collect()
}

pub fn decode_cameras(text: &str) -> Result<Vec<CameraEntry>> {
    let mut out = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 21 {
            return Err(Error::parse(offset, format!("expected 21 fields, got {}", parts.len())));
        }
        let ints: Vec<usize> = fields(offset, &[parts[0], parts[6], parts[7], parts[20]])?;
        let f: Vec<f64> = fields(offset, &parts[1..6])?;
        let m: Vec<f64> = fields(offset, &parts[8..20])?;
        let camera = Camera {
            fx: f[1],
            fy: f[2],
            cx: f[3],
            cy: f[4],
            width: ints[1],
            height: ints[2],
            rotation: Matrix3::from_row_slice(&m[..9]),
            translation: Vector3::new(m[9], m[10], m[11]),
            timestamp: ints[3],
        };
        camera.validate()?;
        out.push(CameraEntry {
            frame: ints[0],
            offset: f[0],
            camera,
        });
    }
    Ok(out)
}

pub fn save_cameras(entries: &[CameraEntry], path: &Path) -> Result<()> {
    write(path, encode_cameras(entries).as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraEntry>> {
    decode_cameras(&read_text(path)?)
}

pub fn encode_tracks(tracks: &[RigidPoseTrack]) -> String {
    let mut s = String::from("# object timestamp r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for tr in tracks {
        for (t, pose) in &tr.poses {
            let _ = write!(s, "{} {}", tr.object, t);
            for r in 0..3 {
                for k in 0..3 {
                    let _ = write!(s, " {:?}", pose.rotation[(r, k)]);
                }
            }
            let _ = writeln!(s, " {:?} {:?} {:?}", pose.translation.x, pose.translation.y, pose.translation.z);
        }
    }
    s
}

pub fn decode_tracks(text: &str) -> Result<Vec<RigidPoseTrack>> {
    let mut tracks: Vec<RigidPoseTrack> = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 14 {
            return Err(Error::parse(offset, format!("expected 14 fields, got {}", parts.len())));
        }
        let object: u32 = fields(offset, &parts[..1])?[0];
        let t: usize = fields(offset, &parts[1..2])?[0];
        let m: Vec<f64> = fields(offset, &parts[2..])?;
        let pose = RigidPose::new(Matrix3::from_row_slice(&m[..9]), Vector3::new(m[9], m[10], m[11]));
        match tracks.iter_mut().find(|tr| tr.object == object) {
            Some(tr) => tr.insert(t, pose),
            None => {
                let mut tr = RigidPoseTrack::new(object);
                tr.insert(t, pose);
                tracks.push(tr);
            }
        }
    }
    Ok(tracks)
}

/// A LiDAR-like point in its group's canonical frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub group: Group,
}

fn group_tag(g: Group) -> String {
    match g {
        Group::Background => "bg".into(),
        Group::Rigid(id) => format!("rigid:{id}"),
    }
}

fn parse_group(offset: u64, s: &str) -> Result<Group> {
    if s == "bg" {
        return Ok(Group::Background);
    }
    s.strip_prefix("rigid:")
        .and_then(|v| v.parse().ok())
        .map(Group::Rigid)
        .ok_or_else(|| Error::parse(offset, format!("bad group `{s}`")))
}

pub fn encode_lidar(points: &[LidarPoint]) -> String {
    let mut s = String::from("# x y z group\n");
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?} {}", p.position[0], p.position[1], p.position[2], group_tag(p.group));
    }
    s
}

pub fn decode_lidar(text: &str) -> Result<Vec<LidarPoint>> {
    let mut out = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::parse(offset, format!("expected 4 fields, got {}", parts.len())));
        }
        let v: Vec<f64> = fields(offset, &parts[..3])?;
        out.push(LidarPoint {
            position: [v[0], v[1], v[2]],
            group: parse_group(offset, parts[3])?,
        });
    }
    Ok(out)
}

/// Format a float for CSV output with fixed precision.
pub fn csv_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Format an optional float; absent values are written as an empty field.
pub fn csv_opt(v: Option<f64>) -> String {
    v.map(csv_float).unwrap_or_default()
}
