//! Dense floating-point image grids and their on-disk format.
//!
//! A [`Raster`] stores `height × width × channels` samples row-major with
//! channels interleaved. On disk a raster is a flat little-endian `f32`
//! payload next to a JSON sidecar carrying the shape:
//!
//! ```text
//! scene.f32   height*width*channels little-endian f32 values
//! scene.json  {"height": 128, "width": 128, "channels": 1, "pixel_size_m": 180.0}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {bad}")));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a raster by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Raster {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Sample with coordinates clamped to the grid.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn channel(&self, c: usize) -> Raster {
        Raster::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// Stacks single-channel rasters into one multiband raster.
    pub fn stack(bands: &[Raster]) -> Result<Raster> {
        let first = bands
            .first()
            .ok_or_else(|| Error::EmptyInput("no bands to stack".into()))?;
        let (h, w) = (first.height, first.width);
        let channels: usize = bands.iter().map(|b| b.channels).sum();
        if bands.iter().any(|b| b.height != h || b.width != w) {
            return Err(Error::invalid("bands differ in spatial shape"));
        }
        let mut out = Raster::zeros(h, w, channels);
        for y in 0..h {
            for x in 0..w {
                let mut c0 = 0;
                for b in bands {
                    for c in 0..b.channels {
                        out.set(y, x, c0 + c, b.get(y, x, c));
                    }
                    c0 += b.channels;
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Raster {
        let n = self.channels as f64;
        Raster::from_fn(self.height, self.width, 1, |y, x, _| {
            (0..self.channels).map(|c| self.get(y, x, c)).sum::<f64>() / n
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the `h × w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Raster> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid("crop window exceeds raster"));
        }
        Ok(Raster::from_fn(h, w, self.channels, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    /// Writes the `f32` payload to `path` and the JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>, pixel_size_m: Option<f64>) -> Result<()> {
        let path = path.as_ref();
        let header = RasterHeader {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixel_size_m,
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        write_atomic(&sidecar_path(path), json.as_bytes())?;
        write_atomic(path, &self.to_le_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Raster, RasterHeader)> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let header: RasterHeader =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = header.height * header.width * header.channels;
        if bytes.len() != n * 4 {
            return Err(Error::format(
                path,
                format!("expected {} bytes, found {}", n * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let raster = Raster::from_vec(header.height, header.width, header.channels, data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok((raster, header))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Rounds every sample through `f32`, matching what a save/load cycle yields.
    pub fn quantized_f32(&self) -> Raster {
        self.map(|v| v as f32 as f64)
    }

    /// Binary PGM (P5) of one channel, linearly mapped from `[lo, hi]`.
    /// Visualization only; the mapping is lossy.
    pub fn write_pgm(
        &self,
        path: impl AsRef<Path>,
        channel: usize,
        lo: f64,
        hi: f64,
        sixteen_bit: bool,
    ) -> Result<()> {
        let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
        let mut buf = format!("P5\n{} {}\n{}\n", self.width, self.height, maxval).into_bytes();
        let span = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..self.height {
            for x in 0..self.width {
                let t = ((self.get(y, x, channel) - lo) / span).clamp(0.0, 1.0);
                let q = (t * maxval as f64).round() as u32;
                if sixteen_bit {
                    buf.extend_from_slice(&(q as u16).to_be_bytes());
                } else {
                    buf.push(q as u8);
                }
            }
        }
        write_atomic(path.as_ref(), &buf)
    }
}

/// JSON sidecar describing a raster payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size_m: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Per-pixel displacement `(u, v)` in LR pixels mapping a frame into
/// reference-frame coordinates: pixel `p` of the frame sits at `p + flow(p)`
/// in the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField {
            height,
            width,
            data: vec![[u, v]; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("flow data length does not match shape"));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite flow vector"));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, uv: [f64; 2]) {
        self.data[y * self.width + x] = uv;
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&[u, v]| u == 0.0 && v == 0.0)
    }

    pub fn scaled(&self, k: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&[u, v]| [u * k, v * k]).collect(),
        }
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.data.len().max(1) as f64;
        let (su, sv) = self
            .data
            .iter()
            .fold((0.0, 0.0), |(a, b), &[u, v]| (a + u, b + v));
        [su / n, sv / n]
    }

    /// Mean endpoint error against a constant displacement.
    pub fn mean_epe(&self, u: f64, v: f64) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .map(|&[a, b]| ((a - u).powi(2) + (b - v).powi(2)).sqrt())
            .sum::<f64>()
            / n
    }

    pub fn as_raster(&self) -> Raster {
        Raster::from_fn(self.height, self.width, 2, |y, x, c| self.get(y, x)[c])
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels() != 2 {
            return Err(Error::invalid("flow raster must have 2 channels"));
        }
        let data = (0..r.height() * r.width())
            .map(|i| [r.data()[2 * i], r.data()[2 * i + 1]])
            .collect();
        FlowField::from_vec(r.height(), r.width(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Raster::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Raster::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn save_load_preserves_f32_payload() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(3, 5, 2, |y, x, c| (y * 10 + x) as f64 * 0.1 + c as f64);
        let p = dir.path().join("img.f32");
        r.save(&p, Some(360.0)).unwrap();
        let (back, header) = Raster::load(&p).unwrap();
        assert_eq!(back, r.quantized_f32());
        assert_eq!(header.pixel_size_m, Some(360.0));
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 3 * 5 * 2 * 4);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        Raster::zeros(4, 4, 1).save(&p, None).unwrap();
        std::fs::write(&p, [0u8; 7]).unwrap();
        assert!(matches!(Raster::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.pgm");
        Raster::filled(2, 3, 1, 0.5)
            .write_pgm(&p, 0, 0.0, 1.0, false)
            .unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
