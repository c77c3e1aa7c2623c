//! Float RGB images with PNG and lossless raw (`BIMG`) containers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::Rgb;

const RAW_MAGIC: &[u8; 4] = b"BIMG";
const RAW_VERSION: u32 = 1;

/// Interleaved RGB image of `f64` samples, row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[Rgb]) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: pixels.iter().flatten().copied().collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Pixel by linear index `y * width + x`.
    #[inline]
    pub fn pixel(&self, i: usize) -> Rgb {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, Rgb) -> Rgb) -> Self {
        Self::from_fn(self.width, self.height, |x, y| f(x, y, self.get(x, y)))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// 8-bit quantization, clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Round-trips through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.to_rgb8().into_iter().map(|v| v as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    /// `BIMG`, version, width, height (u32 LE), then the R, G and B planes as
    /// f32 LE.
    pub fn write_raw<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(RAW_MAGIC)?;
        io::write_u32(w, RAW_VERSION)?;
        io::write_u32(w, self.width as u32)?;
        io::write_u32(w, self.height as u32)?;
        for ch in 0..3 {
            io::write_f32s(w, self.data.iter().skip(ch).step_by(3).copied())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, RAW_MAGIC)?;
        io::expect_version(r, RAW_VERSION)?;
        let width = io::dim(io::read_u32(r)?, "width")?;
        let height = io::dim(io::read_u32(r)?, "height")?;
        let n = width * height;
        let mut img = Self::new(width, height);
        for ch in 0..3 {
            let plane = io::read_f32s(r, n)?;
            for (i, v) in plane.into_iter().enumerate() {
                img.data[3 * i + ch] = v;
            }
        }
        io::expect_eof(r)?;
        Ok(img)
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_raw(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_raw(&mut BufReader::new(File::open(path)?))
    }

    /// Loads by extension: `.bimg` raw, anything else through the PNG decoder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("bimg") => Self::load_raw(path),
            _ => Self::load_png(path),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("bimg") => self.save_raw(path),
            _ => self.save_png(path),
        }
    }
}
