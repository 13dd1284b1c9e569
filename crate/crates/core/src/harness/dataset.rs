use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;

use crate::error::{bail, Result, StegoError};
use crate::train::metrics::quantize_value;
use crate::tensor::Tensor;

/// Which files of a directory form a dataset and how they are cropped.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub dir: PathBuf,
    /// Side of the square center crop.
    pub crop: usize,
    /// File-name glob relative to `dir`.
    pub pattern: String,
}

impl DatasetSpec {
    pub fn new(dir: impl Into<PathBuf>, crop: usize) -> Self {
        DatasetSpec { dir: dir.into(), crop, pattern: "*".into() }
    }
}

/// Decoded covers in lexicographic file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `ceil(len * fraction)` images as a held-out set,
    /// keeping at least one training image.
    pub fn split(&self, fraction: f64) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
        let n = self.images.len();
        let held = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
        let (a, b) = self.images.split_at(n - held);
        (a.to_vec(), b.to_vec())
    }
}

/// Top-left corner `(x0, y0)` of a centered `crop x crop` window, rounding down.
pub fn center_crop_origin(width: usize, height: usize, crop: usize) -> Option<(usize, usize)> {
    (crop > 0 && crop <= width && crop <= height).then(|| ((width - crop) / 2, (height - crop) / 2))
}

/// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    rgb_bytes_to_tensor(img.as_raw(), img.height() as usize, img.width() as usize).expect("buffer matches image size")
}

/// Interleaved 8-bit RGB rows to a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn rgb_bytes_to_tensor(raw: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    if raw.len() != h * w * 3 {
        bail!(Dimension, "{} bytes do not hold a {h}x{w} RGB image", raw.len());
    }
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Quantizes a `[1, 3, H, W]` tensor with `round(clamp(x, 0, 1) * 255)`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        bail!(Dimension, "expected a [1, 3, H, W] image, got {s:?}");
    }
    let (h, w) = (s[2], s[3]);
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + c] = quantize_value(d[c * h * w + p]);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

/// Decodes any supported file to 8-bit RGB, optionally center-cropping.
pub fn load_image(path: &Path, crop: Option<usize>) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| StegoError::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let img = match crop {
        Some(c) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let Some((x0, y0)) = center_crop_origin(w, h, c) else {
                bail!(Image, "{}: {w}x{h} image is smaller than the {c}x{c} crop", path.display());
            };
            image::imageops::crop_imm(&img, x0 as u32, y0 as u32, c as u32, c as u32).to_image()
        }
        None => img,
    };
    Ok(rgb_to_tensor(&img))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => StegoError::Io(io),
            other => StegoError::Image(format!("{}: {other}", path.display())),
        })
}

/// Loads every matching file in lexicographic order. Files that cannot be
/// decoded or are smaller than the crop are skipped with a warning.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let pattern = spec.dir.join(&spec.pattern);
    let pattern = pattern.to_str().ok_or_else(|| StegoError::Data("dataset path is not UTF-8".into()))?;
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| StegoError::Config(format!("bad dataset glob: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Dataset { paths: Vec::new(), images: Vec::new() };
    for p in paths {
        match load_image(&p, Some(spec.crop)) {
            Ok(t) => {
                out.paths.push(p);
                out.images.push(t);
            }
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        bail!(Data, "no decodable images in {}", spec.dir.display());
    }
    Ok(out)
}
