//! Image loading, preprocessing, and patch-grid geometry.
//!
//! Preprocessing is: resize the shorter side to the target resolution with
//! bicubic interpolation, center-crop to a square, then channel-normalize
//! `(raw/255 - mean) / std`. Everything is pure and deterministic.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{real, Real};

/// Default per-channel normalization constants, stored in checkpoints so
/// evaluation is self-describing.
pub const DEFAULT_MEAN: [f64; 3] = [0.481, 0.458, 0.408];
pub const DEFAULT_STD: [f64; 3] = [0.269, 0.261, 0.276];

/// Square input geometry plus normalization constants for one preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub resolution: usize,
    pub patch_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImageSpec {
    pub fn new(resolution: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || resolution % patch_size != 0 {
            return Err(Error::ResolutionPatchMismatch {
                resolution,
                patch_size,
            });
        }
        Ok(ImageSpec {
            resolution,
            patch_size,
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        })
    }

    pub fn channels(&self) -> usize {
        3
    }

    /// Flattened feature length of one patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Patch-grid geometry derived from an [`ImageSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patches_per_side: usize,
    pub num_patches: usize,
    /// Patches plus the class token.
    pub sequence_length: usize,
}

pub fn patch_grid(spec: &ImageSpec) -> Result<PatchGrid> {
    if spec.patch_size == 0 || spec.resolution % spec.patch_size != 0 {
        return Err(Error::ResolutionPatchMismatch {
            resolution: spec.resolution,
            patch_size: spec.patch_size,
        });
    }
    let per_side = spec.resolution / spec.patch_size;
    Ok(PatchGrid {
        patches_per_side: per_side,
        num_patches: per_side * per_side,
        sequence_length: per_side * per_side + 1,
    })
}

/// A decoded 8-bit raster: interleaved channels, row-major.
#[derive(Debug, Clone)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimImage {
                width: width as u32,
                height: height as u32,
            });
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::UnsupportedChannels(channels as u8));
        }
        assert_eq!(data.len(), width * height * channels, "raster extent");
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// RGB planes as 0..255 values. Grayscale is replicated, alpha dropped.
    fn to_rgb_planes(&self) -> [Array2<f64>; 3] {
        let mut planes =
            [(); 3].map(|_| Array2::<f64>::zeros((self.height, self.width)));
        for y in 0..self.height {
            for x in 0..self.width {
                for (c, plane) in planes.iter_mut().enumerate() {
                    let src_c = if self.channels == 1 { 0 } else { c };
                    plane[[y, x]] = f64::from(self.sample(x, y, src_c));
                }
            }
        }
        planes
    }
}

/// Decode PNG/JPEG/PPM from disk into a raster.
pub fn decode_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => RasterImage::new(w, h, 1, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => RasterImage::new(w, h, 3, buf.into_raw()),
        image::DynamicImage::ImageRgba8(buf) => RasterImage::new(w, h, 4, buf.into_raw()),
        other => {
            let buf = other.to_rgb8();
            RasterImage::new(w, h, 3, buf.into_raw())
        }
    }
}

/// Write a binary PPM (P6). The test suites use uncompressed PPM to avoid
/// codec variance.
pub fn write_ppm(path: &Path, img: &RasterImage) -> Result<()> {
    assert_eq!(img.channels, 3, "PPM is RGB");
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    std::fs::write(path, out)?;
    Ok(())
}

/// Resize-then-crop geometry: resized width/height (shorter side scaled to
/// `target`), and the top-left crop offset `(ox, oy)`.
pub fn resize_crop_geometry(width: usize, height: usize, target: usize) -> (usize, usize, usize, usize) {
    let (rw, rh) = if width <= height {
        let rh = ((height as f64) * (target as f64) / (width as f64)).round() as usize;
        (target, rh.max(target))
    } else {
        let rw = ((width as f64) * (target as f64) / (height as f64)).round() as usize;
        (rw.max(target), target)
    };
    ((rw), (rh), (rw - target) / 2, (rh - target) / 2)
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resample one plane along rows (horizontal pass).
fn resample_rows(src: &ArrayView2<f64>, new_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((h, new_w));
    let scale = w as f64 / new_w as f64;
    for dx in 0..new_w {
        let sx = (dx as f64 + 0.5) * scale - 0.5;
        let x0 = sx.floor() as isize;
        let mut weights = [0.0; 4];
        let mut wsum = 0.0;
        for (k, wk) in weights.iter_mut().enumerate() {
            *wk = cubic_weight(sx - (x0 + k as isize - 1) as f64);
            wsum += *wk;
        }
        for y in 0..h {
            let mut acc = 0.0;
            for (k, &wk) in weights.iter().enumerate() {
                let x = (x0 + k as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += wk * src[[y, x]];
            }
            out[[y, dx]] = acc / wsum;
        }
    }
    out
}

/// Separable bicubic resample of a single plane to `(new_h, new_w)`.
/// Identity when the size is unchanged.
pub fn bicubic_resize_plane(src: &ArrayView2<f64>, new_h: usize, new_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (new_h, new_w) {
        return src.to_owned();
    }
    let horiz = resample_rows(src, new_w);
    let vert = resample_rows(&horiz.t(), new_h);
    vert.t().to_owned()
}

/// Preprocess one decoded raster to a normalized `[3, R, R]` tensor.
pub fn preprocess<F: Real>(img: &RasterImage, spec: &ImageSpec) -> Result<Array3<F>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::ZeroDimImage {
            width: img.width as u32,
            height: img.height as u32,
        });
    }
    if !matches!(img.channels, 1 | 3 | 4) {
        return Err(Error::UnsupportedChannels(img.channels as u8));
    }
    let r = spec.resolution;
    let (rw, rh, ox, oy) = resize_crop_geometry(img.width, img.height, r);
    let planes = img.to_rgb_planes();
    let mut out = Array3::zeros((3, r, r));
    for (c, plane) in planes.iter().enumerate() {
        let resized = bicubic_resize_plane(&plane.view(), rh, rw);
        for y in 0..r {
            for x in 0..r {
                // Bicubic overshoot is clamped back to the 8-bit range.
                let v = resized[[oy + y, ox + x]].clamp(0.0, 255.0);
                let norm = (v / 255.0 - spec.mean[c]) / spec.std[c];
                out[[c, y, x]] = real(norm);
            }
        }
    }
    Ok(out)
}

/// Preprocessed pixel batch at one spec.
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    /// `[batch, 3, R, R]`
    pub pixels: Array4<F>,
    pub spec: ImageSpec,
}

impl<F: Real> ImageBatch<F> {
    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Preprocess a set of rasters; output order matches input order even
    /// when images are processed in parallel.
    pub fn preprocess(images: &[RasterImage], spec: &ImageSpec) -> Result<Self> {
        let results = crate::util::indexed_map(images.len(), |i| preprocess::<F>(&images[i], spec));
        let mut pixels = Array4::zeros((images.len(), 3, spec.resolution, spec.resolution));
        for (i, r) in results.into_iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), i).assign(&r?);
        }
        Ok(ImageBatch {
            pixels,
            spec: spec.clone(),
        })
    }

    /// Wrap already-normalized pixels (synthetic data paths).
    pub fn from_pixels(pixels: Array4<F>, spec: ImageSpec) -> Self {
        assert_eq!(pixels.shape()[1], 3);
        assert_eq!(pixels.shape()[2], spec.resolution);
        assert_eq!(pixels.shape()[3], spec.resolution);
        ImageBatch {
            pixels,
            spec,
        }
    }
}
