//! Little-endian binary containers for bulk data.
//!
//! Every file starts with a 16-byte header: an 8-byte magic, a `u32`
//! format version and a `u32` whose meaning depends on the file kind
//! (feature dimension for query sets, zero otherwise).

use crate::geom::{Pose, Ray, Vec3};
use crate::query::EncoderInput;
use crate::scene::{FeatureImage, Intrinsics, LidarScan};
use nalgebra::Matrix3;
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
pub const QUERYSET_MAGIC: [u8; 8] = *b"OCC4DQRY";
pub const PCA_MAGIC: [u8; 8] = *b"OCC4DPCA";
pub const SCAN_MAGIC: [u8; 8] = *b"OCC4DSCN";
pub const IMAGE_MAGIC: [u8; 8] = *b"OCC4DIMG";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"OCC4DCKP";
pub const INPUT_MAGIC: [u8; 8] = *b"OCC4DINP";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unexpected end of data")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("corrupt data: {0}")]
    Corrupt(String),
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_header(magic: [u8; 8], extra: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&extra.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    pub fn vec3(&mut self, v: &Vec3) {
        self.f64s(v.as_slice());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    pub fn pose(&mut self, p: &Pose) {
        let r = p.rotation();
        for i in 0..3 {
            for j in 0..3 {
                self.f64(r[(i, j)]);
            }
        }
        self.vec3(p.translation());
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn with_header(data: &'a [u8], magic: [u8; 8]) -> Result<(Self, u32), FormatError> {
        if data.len() < 16 {
            return Err(FormatError::Truncated);
        }
        if data[..8] != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut r = Reader { data, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let extra = r.u32()?;
        Ok((r, extra))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.data.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(FormatError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn vec3(&mut self) -> Result<Vec3, FormatError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    pub fn bytes(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    pub fn pose(&mut self) -> Result<Pose, FormatError> {
        let v = self.f64s(9)?;
        let r = Matrix3::from_row_slice(&v);
        let t = self.vec3()?;
        Pose::new(r, t).map_err(|e| FormatError::Corrupt(e.to_string()))
    }
    pub fn expect_end(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scan_to_bytes(scan: &LidarScan) -> Vec<u8> {
    let mut w = Writer::with_header(SCAN_MAGIC, 0);
    w.u64(scan.rows as u64);
    w.u64(scan.cols as u64);
    w.f64(scan.max_range);
    w.u64(scan.rays.len() as u64);
    for r in &scan.rays {
        w.vec3(&r.origin);
        w.vec3(&r.endpoint);
        w.vec3(&r.direction);
        w.f64(r.time);
        w.u8(r.miss as u8);
    }
    w.finish()
}

pub fn scan_from_bytes(bytes: &[u8]) -> Result<LidarScan, FormatError> {
    let (mut r, _) = Reader::with_header(bytes, SCAN_MAGIC)?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let max_range = r.f64()?;
    let n = r.u64()? as usize;
    if n != rows.saturating_mul(cols) || n.saturating_mul(81) > r.remaining() {
        return Err(FormatError::Corrupt("ray count does not match pattern".into()));
    }
    let mut rays = Vec::with_capacity(n);
    for _ in 0..n {
        let origin = r.vec3()?;
        let endpoint = r.vec3()?;
        let direction = r.vec3()?;
        let time = r.f64()?;
        let miss = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(FormatError::Corrupt(format!("miss flag {v}"))),
        };
        rays.push(Ray {
            origin,
            endpoint,
            direction,
            miss,
            time,
        });
    }
    r.expect_end()?;
    Ok(LidarScan {
        rows,
        cols,
        max_range,
        rays,
    })
}

/// Past returns, one point list per scan.
pub fn input_to_bytes(input: &EncoderInput) -> Vec<u8> {
    let mut w = Writer::with_header(INPUT_MAGIC, 0);
    w.u64(input.scans.len() as u64);
    for pts in &input.scans {
        w.u64(pts.len() as u64);
        for p in pts {
            w.vec3(p);
        }
    }
    w.finish()
}

pub fn input_from_bytes(bytes: &[u8]) -> Result<EncoderInput, FormatError> {
    let (mut r, _) = Reader::with_header(bytes, INPUT_MAGIC)?;
    let k = r.u64()? as usize;
    let mut scans = Vec::new();
    for _ in 0..k {
        let n = r.u64()? as usize;
        if n.saturating_mul(24) > r.remaining() {
            return Err(FormatError::Truncated);
        }
        scans.push((0..n).map(|_| r.vec3()).collect::<Result<Vec<_>, _>>()?);
    }
    r.expect_end()?;
    Ok(EncoderInput { scans })
}

pub fn image_to_bytes(img: &FeatureImage) -> Vec<u8> {
    let mut w = Writer::with_header(IMAGE_MAGIC, 0);
    w.u64(img.width as u64);
    w.u64(img.height as u64);
    w.u64(img.dim as u64);
    let i = &img.intrinsics;
    w.f64s(&[i.fx, i.fy, i.cx, i.cy]);
    w.pose(&img.camera_pose);
    w.f64(img.time);
    w.f64s(&img.features);
    w.f64s(&img.depth);
    for &p in &img.proto {
        w.u16(p);
    }
    w.finish()
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<FeatureImage, FormatError> {
    let (mut r, _) = Reader::with_header(bytes, IMAGE_MAGIC)?;
    let width = r.u64()? as usize;
    let height = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let k = r.f64s(4)?;
    let camera_pose = r.pose()?;
    let time = r.f64()?;
    let n = width.checked_mul(height).ok_or(FormatError::Truncated)?;
    let features = r.f64s(n.checked_mul(dim).ok_or(FormatError::Truncated)?)?;
    let depth = r.f64s(n)?;
    let proto = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
    r.expect_end()?;
    Ok(FeatureImage {
        width,
        height,
        dim,
        features,
        depth,
        proto,
        camera_pose,
        intrinsics: Intrinsics {
            width,
            height,
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
        },
        time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render_feature_image, SceneKnobs};

    #[test]
    fn scan_and_image_round_trip() {
        let s = generate_scene(1, 0, &SceneKnobs::default());
        let pose = s.lidar_pose_at(1.0).unwrap();
        let mut pattern = s.sensors.lidar.pattern;
        pattern.azimuth_count = 36;
        pattern.elevation_count = 4;
        let scan = crate::scene::cast_lidar_scan(&s, &pose, &pattern, 1.0);
        assert_eq!(scan_from_bytes(&scan_to_bytes(&scan)).unwrap(), scan);
        let mut intr = s.sensors.camera.intrinsics;
        intr.width = 8;
        intr.height = 6;
        intr.cx = 4.0;
        intr.cy = 3.0;
        let img = render_feature_image(&s, &s.camera_pose_at(1.0).unwrap(), &intr, 1.0, 4);
        assert_eq!(image_from_bytes(&image_to_bytes(&img)).unwrap(), img);
    }

    #[test]
    fn header_checks() {
        let w = Writer::with_header(SCAN_MAGIC, 0).finish();
        assert_eq!(w.len(), 16);
        assert!(matches!(Reader::with_header(&w, PCA_MAGIC), Err(FormatError::BadMagic { .. })));
        let mut v = w.clone();
        v[8] = 9;
        assert!(matches!(Reader::with_header(&v, SCAN_MAGIC), Err(FormatError::Version(9))));
        assert!(matches!(scan_from_bytes(&w), Err(FormatError::Truncated)));
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
