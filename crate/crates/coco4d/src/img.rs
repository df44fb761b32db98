//! Image, mask, and depth-map containers plus the small amount of image I/O
//! the pipeline needs (8-bit PNG and a lossless 32-bit float container).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CocoError, Result};

/// Dense RGB image, row-major, channels interleaved, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` values.
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (x = column, y = row),
    /// where integer coordinates land on pixel centers. Clamps at borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (w, h) = (self.width as f64, self.height as f64);
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 3];
        for c in 0..3 {
            let p00 = self.data[(y0 * self.width + x0) * 3 + c];
            let p01 = self.data[(y0 * self.width + x1) * 3 + c];
            let p10 = self.data[(y1 * self.width + x0) * 3 + c];
            let p11 = self.data[(y1 * self.width + x1) * 3 + c];
            out[c] = p00 * (1.0 - fx) * (1.0 - fy)
                + p01 * fx * (1.0 - fy)
                + p10 * (1.0 - fx) * fy
                + p11 * fx * fy;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = self.pixel(r, c);
                buf.put_pixel(
                    c as u32,
                    r as u32,
                    image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for p in img.pixels() {
            data.push(p.0[0] as f64 / 255.0);
            data.push(p.0[1] as f64 / 255.0);
            data.push(p.0[2] as f64 / 255.0);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    pub fn save_f32(&self, path: &Path) -> Result<()> {
        write_f32_container(path, &[self.height, self.width, 3], &self.data)
    }

    pub fn load_f32(path: &Path) -> Result<Image> {
        let (shape, data) = read_f32_container(path)?;
        if shape.len() != 3 || shape[2] != 3 {
            return Err(CocoError::Load(format!(
                "{}: expected HxWx3 container, got shape {:?}",
                path.display(),
                shape
            )));
        }
        Ok(Image {
            height: shape[0],
            width: shape[1],
            data,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask sharing the Image layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn invert(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Tight bounding box `(min_row, min_col, max_row, max_col)`, inclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out = Some(match out {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        out
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            if *a && *b {
                inter += 1;
            }
            if *a || *b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for r in 0..self.height {
            for c in 0..self.width {
                buf.put_pixel(c as u32, r as u32, image::Luma([if self.get(r, c) { 255 } else { 0 }]));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] >= 128).collect();
        Ok(Mask {
            height: h,
            width: w,
            data,
        })
    }
}

/// Per-pixel positive depths with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        DepthMap {
            height,
            width,
            values: vec![depth; height * width],
            valid: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Checks the type invariant: every valid value positive and finite.
    pub fn check(&self) -> Result<()> {
        for (v, ok) in self.values.iter().zip(&self.valid) {
            if *ok && !(v.is_finite() && *v > 0.0) {
                return Err(CocoError::Validation(format!(
                    "depth map contains invalid value {v}"
                )));
            }
        }
        Ok(())
    }

    /// Min over valid pixels.
    pub fn min_valid(&self) -> Option<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
    }

    pub fn save_f32(&self, path: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(self.values.len() * 2);
        data.extend_from_slice(&self.values);
        data.extend(self.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        write_f32_container(path, &[2, self.height, self.width], &data)
    }

    pub fn load_f32(path: &Path) -> Result<DepthMap> {
        let (shape, data) = read_f32_container(path)?;
        if shape.len() != 3 || shape[0] != 2 {
            return Err(CocoError::Load(format!(
                "{}: expected 2xHxW depth container, got {:?}",
                path.display(),
                shape
            )));
        }
        let n = shape[1] * shape[2];
        Ok(DepthMap {
            height: shape[1],
            width: shape[2],
            values: data[..n].to_vec(),
            valid: data[n..].iter().map(|&v| v > 0.5).collect(),
        })
    }
}

/// Aligned frame sequence with optional per-frame masks and depths.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBundle {
    pub frames: Vec<Image>,
    pub masks: Option<Vec<Mask>>,
    pub depth: Option<Vec<DepthMap>>,
}

impl VideoBundle {
    pub fn from_frames(frames: Vec<Image>) -> Self {
        VideoBundle {
            frames,
            masks: None,
            depth: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn check_aligned(&self) -> Result<()> {
        let n = self.frames.len();
        if let Some(m) = &self.masks {
            if m.len() != n {
                return Err(CocoError::InvalidArgument(format!(
                    "mask count {} != frame count {}",
                    m.len(),
                    n
                )));
            }
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return Err(CocoError::InvalidArgument(format!(
                    "depth count {} != frame count {}",
                    d.len(),
                    n
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "image size mismatch");
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// PSNR in dB for images in `[0,1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let e = mse(a, b);
    if e <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * e.log10()
    }
}

const F32_MAGIC: &[u8; 8] = b"COCO4DF0";

/// Lossless float container: magic, ndim, dims (u32 LE each), f32 LE payload.
pub fn write_f32_container(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    assert_eq!(n, data.len(), "shape/data mismatch");
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(F32_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_f32_container(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != F32_MAGIC {
        return Err(CocoError::Load(format!(
            "{}: not a float container",
            path.display()
        )));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let n: usize = shape.iter().product();
    if bytes.len() != off + 4 * n {
        return Err(CocoError::Load(format!(
            "{}: truncated container",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let b = &bytes[off + 4 * i..off + 4 * i + 4];
        data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    Ok((shape, data))
}

/// Write bytes atomically enough for our purposes (single process).
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Image::constant(4, 4, [0.3, 0.5, 0.7]);
        assert!(psnr(&a, &a).is_infinite());
    }

    #[test]
    fn f32_container_round_trip() {
        let dir = std::env::temp_dir().join("coco4d_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.f32");
        let img = Image::constant(3, 5, [0.25, 0.5, 0.125]);
        img.save_f32(&p).unwrap();
        let back = Image::load_f32(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_bbox_and_iou() {
        let mut m = Mask::filled(8, 8, false);
        m.set(2, 3, true);
        m.set(5, 6, true);
        assert_eq!(m.bbox(), Some((2, 3, 5, 6)));
        assert_eq!(m.iou(&m), 1.0);
        let empty = Mask::filled(8, 8, false);
        assert_eq!(m.iou(&empty), 0.0);
    }

    #[test]
    fn bilinear_sample_matches_pixels_at_centers() {
        let mut img = Image::zeros(2, 2);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(1, 1, [0.0, 1.0, 0.0]);
        assert_eq!(img.sample_bilinear(0.0, 0.0), [1.0, 0.0, 0.0]);
        let mid = img.sample_bilinear(0.5, 0.5);
        assert!((mid[0] - 0.25).abs() < 1e-12);
        assert!((mid[1] - 0.25).abs() < 1e-12);
    }
}
