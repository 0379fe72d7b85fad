//! RGB images in `[0,1]`, binary masks, PNG I/O and the pixel ↔ latent map
//! used by the surrogate denoiser.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, [1.0; 3])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err(format!("{} values for a {width}x{height} RGB image", data.len())));
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

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut out = Self::white(width, height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    /// Average-pool by an integer factor.
    pub fn downsample_box(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(shape_err(format!(
                "{}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f64;
        let mut out = Self::white(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set(x, y, acc.map(|v| v / norm));
            }
        }
        Ok(out)
    }

    /// Box-downsamples when the size is an integer multiple of the target,
    /// otherwise resizes nearest-neighbour.
    pub fn fit_to(&self, width: usize, height: usize) -> Result<Self> {
        if (self.width, self.height) == (width, height) {
            return Ok(self.clone());
        }
        let f = self.width / width.max(1);
        if f > 0 && self.width == f * width && self.height == f * height {
            return self.downsample_box(f);
        }
        Ok(self.resize_nearest(width, height))
    }

    /// Background (mask = false) replaced by white, the top of the `[0,1]` range.
    pub fn composite_white(&self, mask: &Mask) -> Result<Self> {
        if mask.width != self.width || mask.height != self.height {
            return Err(shape_err("mask and image sizes differ"));
        }
        let mut out = self.clone();
        for (i, &fg) in mask.data.iter().enumerate() {
            if !fg {
                out.data[i * 3..i * 3 + 3].copy_from_slice(&[1.0; 3]);
            }
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, channels, bytes) = read_png(path)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for px in bytes.chunks(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0] as f64 / 255.0; 3]),
                _ => data.extend(px[..3].iter().map(|&b| b as f64 / 255.0)),
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| self.get(x * self.width / width, y * self.height / height))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, channels, bytes) = read_png(path)?;
        let data = bytes.chunks(channels).map(|px| px[0] >= 128).collect();
        Ok(Self { width, height, data })
    }

    /// Stored as a 1-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let stride = self.width.div_ceil(8);
        let mut bytes = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
    }
}

fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Patchify into a `(H/p·W/p) × (3p²)` latent with values in `[-1, 1]`.
pub fn image_to_latent(img: &RgbImage, patch: usize) -> Result<Mat> {
    if img.width % patch != 0 || img.height % patch != 0 {
        return Err(shape_err("image not divisible by latent patch"));
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let mut lat = Mat::zeros((gw * gh, 3 * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = img.get(gx * patch + dx, gy * patch + dy);
                    for c in 0..3 {
                        lat[[row, (dy * patch + dx) * 3 + c]] = 2.0 * px[c] - 1.0;
                    }
                }
            }
        }
    }
    Ok(lat)
}

pub fn latent_to_image(lat: &Mat, width: usize, height: usize, patch: usize) -> Result<RgbImage> {
    let (gw, gh) = (width / patch, height / patch);
    if lat.nrows() != gw * gh || lat.ncols() != 3 * patch * patch {
        return Err(shape_err(format!("latent {:?} for {width}x{height}/{patch}", lat.dim())));
    }
    let mut img = RgbImage::white(width, height);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for dy in 0..patch {
                for dx in 0..patch {
                    let base = (dy * patch + dx) * 3;
                    let rgb = [0, 1, 2].map(|c| ((lat[[row, base + c]] + 1.0) / 2.0).clamp(0.0, 1.0));
                    img.set(gx * patch + dx, gy * patch + dy, rgb);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> RgbImage {
        let mut img = RgbImage::white(8, 4);
        for y in 0..4 {
            for x in 0..8 {
                img.set(x, y, [x as f64 / 8.0, y as f64 / 4.0, 0.5]);
            }
        }
        img
    }

    #[test]
    fn latent_round_trip() {
        let img = gradient_image();
        let lat = image_to_latent(&img, 2).unwrap();
        assert_eq!(lat.dim(), (8, 12));
        let back = latent_to_image(&lat, 8, 4, 2).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = RgbImage::load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = Mask::from_fn(11, 3, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), mask);
    }

    #[test]
    fn composite_whitens_background_only() {
        let img = RgbImage::filled(2, 1, [0.2, 0.3, 0.4]);
        let mask = Mask::from_fn(2, 1, |x, _| x == 0);
        let out = img.composite_white(&mask).unwrap();
        assert_eq!(out.get(0, 0), [0.2, 0.3, 0.4]);
        assert_eq!(out.get(1, 0), [1.0; 3]);
    }

    #[test]
    fn box_downsample_averages() {
        let mut img = RgbImage::white(2, 2);
        img.set(0, 0, [0.0; 3]);
        let small = img.downsample_box(2).unwrap();
        assert_eq!(small.get(0, 0), [0.75; 3]);
        assert!(img.downsample_box(3).is_err());
    }
}
