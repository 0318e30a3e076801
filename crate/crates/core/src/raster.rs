//! Pixel-space images and binary masks, plus their lossless PNG encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use maskctl_tensor::Tensor;

use crate::error::{CoreError, Result};

/// RGB image stored planar (channel-major), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Binary mask, 1 = foreground object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

fn check_same(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(CoreError::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// `[1, 3, H, W]`
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).expect("consistent")
    }

    /// Item `i` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, i: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || i >= s[0] {
            return Err(CoreError::Shape(format!("expected [N,3,H,W] image batch, got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        Self::new(s[3], s[2], t.data()[i * per..(i + 1) * per].to_vec())
    }

    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| CoreError::Argument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            check_same("Image::batch", im.size(), first.size())?;
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(&[images.len(), 3, first.height, first.width], data)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(3 * self.width * self.height);
        let plane = self.width * self.height;
        for i in 0..plane {
            for c in 0..3 {
                bytes.push((self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        write_png(path.as_ref(), self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, color, bytes) = read_png(path.as_ref())?;
        if color != png::ColorType::Rgb {
            return Err(CoreError::InvalidData(format!(
                "{}: expected 8-bit RGB, got {color:?}",
                path.as_ref().display()
            )));
        }
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[3 * i + c] as f32 / 255.0;
            }
        }
        Self::new(w, h, data)
    }
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(CoreError::InvalidData("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, on: bool) -> Self {
        Self {
            width,
            height,
            data: vec![on as u8; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn invert(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Tight `(x0, y0, x1, y1)` bounds of the foreground, end-exclusive.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => [x, y, x + 1, y + 1],
                        Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                    });
                }
            }
        }
        b
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        write_png(path.as_ref(), self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    /// Loads a single-channel 8-bit mask whose values are exactly 0 or 255.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (w, h, color, bytes) = read_png(path)?;
        if color != png::ColorType::Grayscale {
            return Err(CoreError::InvalidData(format!(
                "{}: mask must be single-channel, got {color:?}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(bytes.len());
        for b in bytes {
            data.push(match b {
                0 => 0,
                255 => 1,
                v => {
                    return Err(CoreError::InvalidData(format!(
                        "{}: mask value {v} is not 0 or 255",
                        path.display()
                    )))
                }
            });
        }
        Self::new(w, h, data)
    }
}

/// `image * mask`, broadcast over channels; background becomes exactly 0.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    check_same("apply_mask", image.size(), mask.size())?;
    let plane = image.width * image.height;
    let mut out = image.clone();
    for c in 0..3 {
        for (v, &m) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(&mask.data) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Lays equally sized images out row-major, `columns` per row, with a
/// one-pixel white gutter.
pub fn tile(images: &[&Image], columns: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Argument("tile needs at least one image".into()))?;
    let (w, h) = first.size();
    for im in images {
        check_same("tile", (w, h), im.size())?;
    }
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let (tw, th) = (columns * (w + 1) - 1, rows * (h + 1) - 1);
    let mut out = Image::filled(tw, th, [1.0; 3]);
    for (i, im) in images.iter().enumerate() {
        let (ox, oy) = ((i % columns) * (w + 1), (i / columns) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(ox + x, oy + y, im.pixel(x, y));
            }
        }
    }
    Ok(out)
}

pub(crate) fn ensure_same_size(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    check_same(op, a, b)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = BufReader::new(File::open(path)?);
    let mut reader = png::Decoder::new(file).read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CoreError::InvalidData(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::InvalidData(format!(
            "{}: expected 8-bit samples, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_mask_identity_and_annihilation() {
        let mut im = Image::filled(4, 3, [0.2, 0.4, 0.6]);
        im.set_pixel(1, 1, [0.9, 0.1, 0.3]);
        assert_eq!(apply_mask(&im, &Mask::filled(4, 3, true)).unwrap(), im);
        let zero = apply_mask(&im, &Mask::filled(4, 3, false)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_left_half_pixelwise() {
        let (w, h) = (6, 4);
        let data: Vec<f32> = (0..3 * w * h).map(|i| (i % 17) as f32 / 17.0).collect();
        let im = Image::new(w, h, data).unwrap();
        let mask = Mask::from_fn(w, h, |x, _| x < w / 2);
        let out = apply_mask(&im, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want = if x < w / 2 { im.pixel(x, y) } else { [0.0; 3] };
                assert_eq!(out.pixel(x, y), want);
            }
        }
    }

    #[test]
    fn apply_mask_rejects_size_mismatch() {
        let im = Image::filled(4, 4, [0.0; 3]);
        assert!(matches!(
            apply_mask(&im, &Mask::filled(4, 3, true)),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn png_roundtrip_and_mask_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(5, 3, (0..45).map(|i| i as f32 / 44.0).collect()).unwrap();
        im.quantize();
        im.save_png(dir.path().join("a.png")).unwrap();
        assert_eq!(Image::load_png(dir.path().join("a.png")).unwrap(), im);

        let m = Mask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        m.save_png(dir.path().join("m.png")).unwrap();
        assert_eq!(Mask::load_png(dir.path().join("m.png")).unwrap(), m);

        // grey levels other than 0/255 are rejected
        write_png(&dir.path().join("bad.png"), 2, 1, png::ColorType::Grayscale, &[0, 128]).unwrap();
        assert!(matches!(
            Mask::load_png(dir.path().join("bad.png")),
            Err(CoreError::InvalidData(_))
        ));
        // RGB files are not masks
        assert!(matches!(
            Mask::load_png(dir.path().join("a.png")),
            Err(CoreError::InvalidData(_))
        ));
    }

    #[test]
    fn bbox_is_tight() {
        let m = Mask::from_fn(8, 8, |x, y| (2..5).contains(&x) && (3..7).contains(&y));
        assert_eq!(m.bbox(), Some([2, 3, 5, 7]));
        assert_eq!(Mask::filled(3, 3, false).bbox(), None);
    }
}
