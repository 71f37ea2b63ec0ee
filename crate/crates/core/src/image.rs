//! Single-channel images and binary masks, plus 8-bit binary PGM (P5) I/O.

use std::fs;
use std::path::Path;

use crate::autodiff::resize_plane;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image {width}×{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Side length of a square image.
    pub fn side(&self) -> Result<usize> {
        if self.width != self.height {
            return Err(Error::InvalidArgument(format!(
                "expected a square image, got {}×{}",
                self.width, self.height
            )));
        }
        Ok(self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    /// Bilinear resize with half-pixel centers. Same size is an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            pixels: resize_plane(&self.pixels, self.height, self.width, height, width),
        }
    }

    /// Rectangular sub-image; rows and cols are half-open ranges.
    pub fn crop(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Image {
        let mut pixels = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            pixels.extend_from_slice(&self.pixels[r * self.width + cols.start..r * self.width + cols.end]);
        }
        Image {
            width: cols.len(),
            height: rows.len(),
            pixels,
        }
    }

    /// Copies `self` into a zero canvas of the given size at `(top, left)`.
    pub fn embed(&self, width: usize, height: usize, top: usize, left: usize) -> Image {
        let mut out = Image::filled(width, height, 0.0);
        for r in 0..self.height {
            let dst = (top + r) * width + left;
            out.pixels[dst..dst + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        out
    }

    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.clone()).expect("valid dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image> {
        let [b, c, h, w] = t.dims4("image")?;
        if b != 1 || c != 1 {
            return Err(Error::shape("image", format!("expected 1×1×H×W, got {:?}", t.dims())));
        }
        Image::new(w, h, t.data().to_vec())
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pgm(&bytes).map_err(|msg| Error::Format {
            path: path.display().to_string(),
            msg,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_pgm(self)).map_err(|e| Error::io(path, e))
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask {width}×{height} with {} pixels",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixels `>= 0.5` are set.
    pub fn from_image(image: &Image) -> Mask {
        Self::threshold(image, 0.5)
    }

    pub fn threshold(image: &Image, level: f32) -> Mask {
        Mask {
            width: image.width,
            height: image.height,
            bits: image.pixels.iter().map(|&v| v >= level).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn read_pgm(path: &Path) -> Result<Mask> {
        Image::read_pgm(path).map(|img| Mask::from_image(&img))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.to_image().write_pgm(path)
    }
}

/// Encodes as `P5\n<w> <h>\n255\n` followed by one byte per pixel,
/// `round(clamp(v, 0, 1) * 255)`.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?);
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic `{}`", fields[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit maxval supported, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < width * height {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        ));
    }
    let scale = maxval as f32;
    let pixels = raster[..width * height]
        .iter()
        .map(|&b| b as f32 / scale)
        .collect();
    Image::new(width, height, pixels).map_err(|e| e.to_string())
}
