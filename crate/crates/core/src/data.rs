//! Image files to `[H, W, 3]` tensors in `[-1, 1]` and back.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer matches extents")
}

/// Maps `[-1, 1]` to bytes, clamping anything outside.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

fn decode(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// Decodes an image at its native size.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(to_tensor(&decode(path)?))
}

/// Decodes an image and resizes it to `size x size` when needed.
pub fn load_image_resized(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode(path)?;
    let s = size as u32;
    if img.dimensions() == (s, s) {
        return Ok(to_tensor(&img));
    }
    Ok(to_tensor(&imageops::resize(&img, s, s, FilterType::Triangle)))
}

/// Writes an `[H, W, 3]` tensor. `.ppm`/`.pnm` paths get binary P6,
/// everything else is encoded by extension.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    if c != 3 {
        return Err(Error::dim("save_image", t.shape(), &[h, w, 3]));
    }
    let bytes = to_bytes(t);
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("ppm" | "pnm")) {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    } else {
        let img = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
        img.save(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// Writes a binary P5 graymap.
pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Pads `[H, W, C]` on the bottom and right by repeating the edge so both
/// extents become multiples of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    Ok(Tensor::from_fn([ph, pw, c], |i| {
        let (y, x, ch) = (i / (pw * c), (i / c) % pw, i % c);
        src[(y.min(h - 1) * w + x.min(w - 1)) * c + ch]
    }))
}

/// Top-left `h x w` window of `[H, W, C]`.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (th, tw, c) = t.hwc()?;
    if h > th || w > tw {
        return Err(Error::dim("crop", t.shape(), &[h, w, c]));
    }
    let src = t.data();
    Ok(Tensor::from_fn([h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        src[(y * tw + x) * c + ch]
    }))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Decoded square images of one common size.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Tensor>,
}

impl Dataset {
    pub fn from_images(images: Vec<Tensor>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Data(format!("images must be [H, W, 3], got {shape:?}")));
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Data(format!(
                "images must share extents: {shape:?} vs {:?}",
                bad.shape()
            )));
        }
        Ok(Self { images })
    }

    pub fn from_dir(dir: &Path, size: usize) -> Result<Self> {
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Data(format!("no images in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| load_image_resized(p, size))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1])
    }
}
