//! Grayscale float images and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, GrayImage, ImageFormat, Luma};

use crate::error::{CompassError, Result};
use crate::geometry::Box2D;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CompassError::Input(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CompassError::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    /// Writes a PNG atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CompassError::io(dir, e))?;
        }
        compass_autograd::write_atomic(path, &self.png_bytes()?).map_err(|e| CompassError::io(path, e))
    }

    /// Bilinear resize.
    pub fn resize(&self, width: usize, height: usize) -> Canvas {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let img = self.to_float_image();
        let out = imageops::resize(&img, width as u32, height as u32, imageops::FilterType::Triangle);
        Canvas {
            width,
            height,
            data: out.pixels().map(|p| p.0[0] as f64).collect(),
        }
    }

    fn to_float_image(&self) -> image::ImageBuffer<Luma<f32>, Vec<f32>> {
        image::ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize) as f32])
        })
    }

    /// Pixels whose centres fall inside `b`, as a new canvas.
    pub fn crop(&self, b: &Box2D) -> Result<Canvas> {
        let x0 = b.x0.floor().max(0.0) as usize;
        let y0 = b.y0.floor().max(0.0) as usize;
        let x1 = (b.x1.ceil() as usize).min(self.width);
        let y1 = (b.y1.ceil() as usize).min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(CompassError::Input(format!("crop {b:?} is outside the image")));
        }
        let mut out = Canvas::new(x1 - x0, y1 - y0);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(x - x0, y - y0, self.get(x, y));
            }
        }
        Ok(out)
    }
}
