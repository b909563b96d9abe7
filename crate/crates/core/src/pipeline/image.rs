use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, row-major `height × width × 3`, values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor({}x{})", self.width, self.height)
    }
}

impl ImageTensor {
    /// Values are clamped into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must have at least one pixel, got {width}x{height}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        ImageTensor::new(height, width, data).expect("valid dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn map_pixels(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> ImageTensor {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks(3) {
            data.extend(f([px[0], px[1], px[2]]).map(|v| v.clamp(0.0, 1.0)));
        }
        ImageTensor { height: self.height, width: self.width, data }
    }

    /// Mirror columns.
    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("cannot resize to {width}x{height}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let (a, b) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (c, d) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * tx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                    data.push(top + (bottom - top) * ty);
                }
            }
        }
        ImageTensor::new(height, width, data)
    }

    /// Sub-image with top-left `(x, y)` and the given size.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<ImageTensor> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        ImageTensor::new(height, width, data)
    }
}

/// Reads a binary `P6` pixmap.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Writes a binary `P6` pixmap with max value 255. Values are quantized to
/// the nearest of 256 levels.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported format {:?}, expected binary P6 pixmap", fields[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "max value")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("max value {maxval} unsupported, need 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!("truncated raster: need {need} bytes, found {}", bytes.len().saturating_sub(pos)));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / maxval as f32).collect();
    ImageTensor::new(height, width, data).map_err(|e| e.to_string())
}
