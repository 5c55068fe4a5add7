//! `SFM1` float map container.
//!
//! Layout: magic `SFM1`, u32 LE width, height, channels, f32 LE band center
//! in nm (0 for RGB composites), then `channels` row-major planes of f32 LE.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::image::RgbImage;

pub const MAGIC: &[u8; 4] = b"SFM1";
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SfmMap {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub band_center_nm: f32,
    /// Planar: `data[c * w * h + y * w + x]`.
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfmHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub band_center_nm: f32,
}

impl SfmHeader {
    pub fn payload_len(&self) -> usize {
        4 * self.width as usize * self.height as usize * self.channels as usize
    }
}

impl SfmMap {
    pub fn new(width: u32, height: u32, channels: u32, band_center_nm: f32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument("SFM dims must be positive".into()));
        }
        if data.len() != (width * height * channels) as usize {
            return Err(shape_err(format!(
                "SFM {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            band_center_nm,
            data,
        })
    }

    pub fn header(&self) -> SfmHeader {
        SfmHeader {
            width: self.width,
            height: self.height,
            channels: self.channels,
            band_center_nm: self.band_center_nm,
        }
    }

    /// RGB image as a 3-channel map; values are rounded to f32.
    pub fn from_rgb(img: &RgbImage, band_center_nm: f32) -> Result<Self> {
        let data = img.to_planar().into_iter().map(|v| v as f32).collect();
        Self::new(img.width as u32, img.height as u32, 3, band_center_nm, data)
    }

    pub fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(shape_err(format!("expected 3 channels, got {}", self.channels)));
        }
        let planar: Vec<f64> = self.data.iter().map(|v| f64::from(*v)).collect();
        RgbImage::from_planar(self.width as usize, self.height as usize, &planar)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.band_center_nm.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8], origin: &str) -> Result<Self> {
        let h = decode_header(buf, origin)?;
        let payload = &buf[HEADER_LEN..];
        if payload.len() < h.payload_len() {
            return Err(Error::TruncatedFile(format!(
                "{origin}: {} payload bytes, header declares {}",
                payload.len(),
                h.payload_len()
            )));
        }
        if payload.len() > h.payload_len() {
            return Err(Error::DimMismatch {
                path: origin.into(),
                detail: format!(
                    "{} trailing bytes after {}x{}x{} payload",
                    payload.len() - h.payload_len(),
                    h.width,
                    h.height,
                    h.channels
                ),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h.width, h.height, h.channels, h.band_center_nm, data)
    }
}

pub fn decode_header(buf: &[u8], origin: &str) -> Result<SfmHeader> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic(origin.into()));
    }
    if buf.len() < HEADER_LEN {
        return Err(Error::TruncatedFile(format!("{origin}: header cut short")));
    }
    let u = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
    let h = SfmHeader {
        width: u(4),
        height: u(8),
        channels: u(12),
        band_center_nm: f32::from_le_bytes([buf[16], buf[17], buf[18], buf[19]]),
    };
    if h.width == 0 || h.height == 0 || h.channels == 0 {
        return Err(Error::DimMismatch {
            path: origin.into(),
            detail: "zero dimension".into(),
        });
    }
    Ok(h)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn sfm_write(path: impl AsRef<Path>, map: &SfmMap) -> Result<()> {
    std::fs::write(path, map.encode())?;
    Ok(())
}

pub fn sfm_read(path: impl AsRef<Path>) -> Result<SfmMap> {
    let path = path.as_ref();
    SfmMap::decode(&read_file(path)?, &path.display().to_string())
}

/// Header only, plus a check that the file length matches it.
pub fn sfm_read_header(path: impl AsRef<Path>) -> Result<SfmHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let len = f.metadata()?.len() as usize;
    let mut head = [0u8; HEADER_LEN];
    let n = f.read(&mut head)?;
    let h = decode_header(&head[..n], &origin)?;
    if len < HEADER_LEN + h.payload_len() {
        return Err(Error::TruncatedFile(origin));
    }
    if len > HEADER_LEN + h.payload_len() {
        return Err(Error::DimMismatch {
            path: origin,
            detail: "file longer than declared payload".into(),
        });
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            w in 1u32..6, h in 1u32..6, c in 1u32..5,
            center in 0f32..800.0,
            seed in proptest::collection::vec(proptest::num::f32::ANY, 1..8),
        ) {
            let n = (w * h * c) as usize;
            let data: Vec<f32> = (0..n).map(|i| seed[i % seed.len()]).collect();
            let map = SfmMap::new(w, h, c, center, data).unwrap();
            let bytes = map.encode();
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * n);
            let back = SfmMap::decode(&bytes, "mem").unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sfm");
        let m = SfmMap::new(2, 3, 3, 555.5, (0..18).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        sfm_write(&p, &m).unwrap();
        let back = sfm_read(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(sfm_read_header(&p).unwrap(), m.header());
        assert_eq!(std::fs::read(&p).unwrap(), m.encode());
    }

    #[test]
    fn corrupted_magic() {
        let mut b = SfmMap::new(1, 1, 1, 0.0, vec![1.0]).unwrap().encode();
        b[0] = b'X';
        assert!(matches!(SfmMap::decode(&b, "x"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn truncated_payload() {
        let m = SfmMap::new(2, 2, 2, 0.0, vec![0.5; 8]).unwrap();
        let mut b = m.encode();
        // Declare three channels over a two-channel payload.
        b[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(SfmMap::decode(&b, "x"), Err(Error::TruncatedFile(_))));
        b.extend_from_slice(&[0u8; 20]);
        assert!(matches!(SfmMap::decode(&b, "x"), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.sfm");
        assert!(matches!(sfm_read(&p), Err(Error::MissingFile(q)) if q == p));
    }

    #[test]
    fn rgb_conversion() {
        let img = RgbImage::from_data(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let m = SfmMap::from_rgb(&img, 0.0).unwrap();
        assert_eq!(m.data, vec![0.1f32, 0.4, 0.2, 0.5, 0.3, 0.6]);
        let back = m.to_rgb().unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
