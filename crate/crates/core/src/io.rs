//! MVOL1 / MDVF1 volume and field files, and 16-bit PGM slice export.
//!
//! A file at `path` holds a JSON header; the payload of little-endian `f32`
//! samples (x fastest) lives next to it at `path` + `.raw`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Grid3, Volume};

pub const VOLUME_MAGIC: &str = "MVOL1";
pub const FIELD_MAGIC: &str = "MDVF1";
const DTYPE: &str = "f32le";

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

/// Path of the raw payload belonging to a header file.
pub fn payload_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".raw");
    PathBuf::from(s)
}

fn write_any(path: &Path, magic: &str, grid: &Grid3, data: &[f32]) -> Result<()> {
    let header = Header {
        magic: magic.into(),
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        dtype: DTYPE.into(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::with_capacity(4 * data.len());
    for v in data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let pp = payload_path(path);
    std::fs::write(&pp, raw).map_err(|e| Error::io(&pp, e))
}

fn read_any(path: &Path, magic: &str, channels: usize) -> Result<(Grid3, Vec<f32>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.magic != magic {
        return Err(Error::format(
            path,
            format!("magic {:?}, expected {magic:?}", header.magic),
        ));
    }
    if header.dtype != DTYPE {
        return Err(Error::format(
            path,
            format!("dtype {:?}, expected {DTYPE:?}", header.dtype),
        ));
    }
    let grid = Grid3::new(header.dims, header.spacing_mm)?;
    let pp = payload_path(path);
    let raw = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let expect = 4 * channels * grid.len();
    if raw.len() != expect {
        return Err(Error::format(
            &pp,
            format!(
                "payload has {} bytes, dims {:?} need {expect}",
                raw.len(),
                header.dims
            ),
        ));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            &pp,
            format!("non-finite sample at index {i}"),
        ));
    }
    Ok((grid, data))
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_any(path, VOLUME_MAGIC, v.grid(), v.data())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (grid, data) = read_any(path, VOLUME_MAGIC, 1)?;
    Volume::new(grid, data)
}

pub fn write_dvf(f: &DisplacementField, path: &Path) -> Result<()> {
    write_any(path, FIELD_MAGIC, f.grid(), f.data())
}

pub fn read_dvf(path: &Path) -> Result<DisplacementField> {
    let (grid, data) = read_any(path, FIELD_MAGIC, 3)?;
    DisplacementField::new(grid, data)
}

/// Slicing axis for [`export_slice`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::InvalidArgument(format!(
                "axis must be x, y or z, got {s:?}"
            ))),
        }
    }
}

/// Grayscale window `(center, width)` mapped onto the 16-bit range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            center: 0.4,
            width: 0.8,
        }
    }
}

impl Window {
    /// Pixel value: nearest integer to `clamp((t - (C - W/2)) / W, 0, 1) * 65535`, ties up.
    pub fn map(&self, t: f32) -> u16 {
        let u = ((t as f64 - (self.center - self.width / 2.0)) / self.width).clamp(0.0, 1.0);
        (u * 65535.0 + 0.5).floor() as u16
    }
}

/// Extracts one slice as rows of pixels. For axis z rows run along y, for
/// axis y along z, for axis x along z (columns along the remaining axis).
pub fn slice_pixels(
    v: &Volume,
    axis: Axis,
    index: usize,
    window: Window,
) -> Result<(usize, usize, Vec<u16>)> {
    if !(window.width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window width must be positive, got {}",
            window.width
        )));
    }
    let [nx, ny, nz] = v.grid().dims();
    let n_axis = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= n_axis {
        return Err(Error::InvalidArgument(format!(
            "slice index {index} out of range for axis of length {n_axis}"
        )));
    }
    let (w, h) = match axis {
        Axis::Z => (nx, ny),
        Axis::Y => (nx, nz),
        Axis::X => (ny, nz),
    };
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let t = match axis {
                Axis::Z => v.at(c, r, index),
                Axis::Y => v.at(c, index, r),
                Axis::X => v.at(index, c, r),
            };
            px.push(window.map(t));
        }
    }
    Ok((w, h, px))
}

/// Writes a binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn export_slice(
    v: &Volume,
    axis: Axis,
    index: usize,
    window: Window,
    path: &Path,
) -> Result<()> {
    let (w, h, px) = slice_pixels(v, axis, index, window)?;
    let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for p in px {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid3 {
        Grid3::new([n, n, n], [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_volume_payload_is_32_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        write_volume(&Volume::zeros(grid(2)), &p).unwrap();
        let raw = std::fs::read(payload_path(&p)).unwrap();
        assert_eq!(raw, vec![0u8; 32]);
    }

    #[test]
    fn size_mismatch_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        write_volume(&Volume::zeros(grid(4)), &p).unwrap();
        std::fs::write(payload_path(&p), vec![0u8; 400]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        write_volume(&Volume::zeros(grid(4)), &p).unwrap();
        assert!(matches!(read_dvf(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn constant_field_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mdvf");
        write_dvf(&DisplacementField::constant(grid(4), [1.0, 0.0, 0.0]), &p).unwrap();
        let raw = std::fs::read(payload_path(&p)).unwrap();
        assert_eq!(raw.len(), 4 * 192);
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert!(vals.chunks(3).all(|t| t == [1.0, 0.0, 0.0]));
        let raw_trunc = &raw[..raw.len() - 4];
        std::fs::write(payload_path(&p), raw_trunc).unwrap();
        assert!(read_dvf(&p).is_err());
    }

    #[test]
    fn window_examples() {
        let w = Window::default();
        assert_eq!(w.map(0.4), 32768);
        assert_eq!(w.map(0.0), 0);
        assert_eq!(
            Window {
                center: 0.35,
                width: 0.70
            }
            .map(1.0),
            65535
        );
    }

    #[test]
    fn pgm_header_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::filled(Grid3::new([3, 2, 2], [1.0; 3]).unwrap(), 0.4);
        let p = dir.path().join("s.pgm");
        export_slice(&v, Axis::Z, 1, Window::default(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0x80, 0x00]);
        assert!(export_slice(&v, Axis::Z, 2, Window::default(), &p).is_err());
    }
}
