use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{PlacedShape, Quadrant, SceneSpec, ShapeKind, ShapeSize};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
}

impl Default for ImageDims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
        }
    }
}

/// Channels-last pixel buffer with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: ImageDims,
    pixels: Vec<f64>,
}

const HEADER_LEN: usize = 8;

impl Image {
    pub fn new(dims: ImageDims, pixels: Vec<f64>) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.channels == 0 {
            return Err(Error::Config(format!("empty image dimensions {dims:?}")));
        }
        if pixels.len() != dims.height * dims.width * dims.channels {
            return Err(Error::dim(
                "image",
                &[dims.height, dims.width, dims.channels],
                &[pixels.len()],
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invariant(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { dims, pixels })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.dims.width + x) * self.dims.channels + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.dims.height, self.dims.width, self.dims.channels],
            self.pixels.clone(),
        )
        .expect("validated dims")
    }

    /// 8-byte header (`u16` H, W, C and a zero pad, little endian) then
    /// little-endian `f64` pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() * 8);
        for v in [self.dims.height, self.dims.width, self.dims.channels, 0] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Contract("image file shorter than its header".into()));
        }
        let word = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
        let dims = ImageDims {
            height: word(0),
            width: word(1),
            channels: word(2),
        };
        let body = &bytes[HEADER_LEN..];
        if body.len() != dims.height * dims.width * dims.channels * 8 {
            return Err(Error::dim(
                "image file",
                &[dims.height, dims.width, dims.channels],
                &[body.len() / 8],
            ));
        }
        let pixels = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(dims, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

const SUPERSAMPLE: usize = 4;

/// Half-extent of a shape as a fraction of the quadrant side.
fn extent(size: ShapeSize) -> f64 {
    match size {
        ShapeSize::Small => 0.2,
        ShapeSize::Large => 0.4,
    }
}

fn inside(shape: &PlacedShape, dx: f64, dy: f64, e: f64) -> bool {
    match shape.kind {
        ShapeKind::Circle => dx * dx + dy * dy <= e * e,
        ShapeKind::Square => dx.abs() <= 0.85 * e && dy.abs() <= 0.85 * e,
        // apex up at (0, -e), base from (-e, e) to (e, e)
        ShapeKind::Triangle => dy <= e && dy >= -e && dx.abs() <= (dy + e) / 2.0,
    }
}

/// Rasterizes a scene to a single-channel image. Each shape is centered in its
/// quadrant; edge pixels carry fractional coverage from 4×4 supersampling.
pub fn render(scene: &SceneSpec, height: usize, width: usize) -> Result<Image> {
    if height < 16 || width < 16 {
        return Err(Error::Config(format!("render needs at least 16×16, got {height}×{width}")));
    }
    scene.validate()?;
    let mut pixels = vec![0.0f64; height * width];
    let (qh, qw) = (height as f64 / 2.0, width as f64 / 2.0);
    for shape in &scene.shapes {
        let cy = if shape.quadrant.is_upper() { qh / 2.0 } else { 1.5 * qh };
        let cx = if shape.quadrant.is_left() { qw / 2.0 } else { 1.5 * qw };
        let e = extent(shape.size) * qh.min(qw);
        let (y0, y1) = ((cy - e).floor().max(0.0) as usize, ((cy + e).ceil() as usize).min(height));
        let (x0, x1) = ((cx - e).floor().max(0.0) as usize, ((cx + e).ceil() as usize).min(width));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        if inside(shape, px - cx, py - cy, e) {
                            hits += 1;
                        }
                    }
                }
                let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let p = &mut pixels[y * width + x];
                *p = p.max(coverage);
            }
        }
    }
    Image::new(
        ImageDims {
            height,
            width,
            channels: 1,
        },
        pixels,
    )
}

/// Total pixel mass per quadrant, in [`Quadrant::ALL`] order.
pub fn quadrant_mass(image: &Image) -> [f64; 4] {
    let d = image.dims();
    let mut mass = [0.0; 4];
    for y in 0..d.height {
        for x in 0..d.width {
            let q = match (y < d.height / 2, x < d.width / 2) {
                (true, true) => Quadrant::UpperLeft,
                (true, false) => Quadrant::UpperRight,
                (false, true) => Quadrant::LowerLeft,
                (false, false) => Quadrant::LowerRight,
            };
            for c in 0..d.channels {
                mass[q as usize] += image.at(y, x, c);
            }
        }
    }
    mass
}
