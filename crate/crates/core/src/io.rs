//! Image files, noise injection and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageError, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::Image;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat(path.display().to_string())),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat(path.display().to_string()));
    }
    reader.decode().map_err(|e| match e {
        ImageError::Unsupported(u) => Error::UnsupportedFormat(u.to_string()),
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode(other.to_string()),
    })
}

fn is_16bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    )
}

/// RGB planes on the [0, 255] scale (16-bit files are rescaled).
fn rgb_planes(img: &DynamicImage) -> (usize, usize, [Vec<f64>; 3]) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    if is_16bit(img) {
        for (i, p) in img.to_rgb16().pixels().enumerate() {
            for k in 0..3 {
                planes[k][i] = p.0[k] as f64 / 257.0;
            }
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for k in 0..3 {
                planes[k][i] = p.0[k] as f64;
            }
        }
    }
    (h, w, planes)
}

/// Loads a PNG or PGM/PPM file as a single grayscale channel. Colour inputs
/// are converted with the 0.299/0.587/0.114 luminance weights.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = decode(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let (h, w, [r, g, b]) = rgb_planes(&img);
        let data = (0..h * w)
            .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
            .collect();
        return Image::from_vec(h, w, data);
    }
    let data = if is_16bit(&img) {
        img.to_luma16().pixels().map(|p| p.0[0] as f64 / 257.0).collect()
    } else {
        img.to_luma8().pixels().map(|p| p.0[0] as f64).collect()
    };
    Image::from_vec(h, w, data)
}

/// Loads a file keeping colour: three channels for colour files, one for grayscale.
pub fn load_image_channels(path: impl AsRef<Path>) -> Result<Image> {
    let img = decode(path.as_ref())?;
    if !img.color().has_color() {
        return load_image(path);
    }
    let (h, w, [r, g, b]) = rgb_planes(&img);
    Image::new(h, w, 3, [r, g, b].concat())
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel image, clamping to [0, 255] and rounding.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let (h, w) = img.dims();
    let (wu, hu) = (w as u32, h as u32);
    let result = match img.channels() {
        1 => {
            let buf: Vec<u8> = img.as_slice().iter().map(|&v| to_u8(v)).collect();
            GrayImage::from_raw(wu, hu, buf)
                .expect("buffer length matches")
                .save_with_format(path, format)
        }
        3 => {
            let n = h * w;
            let s = img.as_slice();
            let buf: Vec<u8> = (0..n)
                .flat_map(|i| [to_u8(s[i]), to_u8(s[n + i]), to_u8(s[2 * n + i])])
                .collect();
            RgbImage::from_raw(wu, hu, buf)
                .expect("buffer length matches")
                .save_with_format(path, format)
        }
        c => {
            return Err(invalid(
                "image",
                format!("cannot save {c} channels; expected 1 or 3"),
            ))
        }
    };
    result.map_err(|e| match e {
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode(other.to_string()),
    })
}

/// PNG/PGM/PPM files in a directory, sorted by name.
pub fn image_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.exists() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && format_for(p).is_ok())
        .collect();
    files.sort();
    Ok(files)
}

/// Additive `N(0, sigma^2)` noise, no clamping.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("{sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(
        img.height(),
        img.width(),
        img.channels(),
        img.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub train: Vec<Image>,
    pub validation: Vec<Image>,
    /// Crop origins in draw order (training patches first).
    pub origins: Vec<PatchOrigin>,
}

/// Fraction of patches assigned to training; the rest are held out.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Uniform random square crops. The first `floor(0.8 * count)` patches in
/// draw order form the training set.
pub fn crop_patches(images: &[Image], patch: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if patch == 0 {
        return Err(invalid("patch size", "must be >= 1"));
    }
    for (i, img) in images.iter().enumerate() {
        if img.height() < patch || img.width() < patch {
            return Err(invalid(
                "patch size",
                format!("image {i} ({}) is smaller than {patch}x{patch}", img.shape_str()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let image = rng.random_range(0..images.len());
        let src = &images[image];
        let row = rng.random_range(0..=src.height() - patch);
        let col = rng.random_range(0..=src.width() - patch);
        patches.push(src.crop(row, col, patch, patch)?);
        origins.push(PatchOrigin { image, row, col });
    }
    let n_train = (TRAIN_FRACTION * count as f64).floor() as usize;
    let validation = patches.split_off(n_train);
    Ok(PatchSet {
        train: patches,
        validation,
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::piecewise_constant;

    fn byte_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(0..=255u8) as f64)
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = byte_image(13, 17, 1);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
        let rgb = Image::from_channels(&[byte_image(5, 4, 2), byte_image(5, 4, 3), byte_image(5, 4, 4)]).unwrap();
        let p = dir.path().join("c.png");
        save_image(&rgb, &p).unwrap();
        assert_eq!(load_image_channels(&p).unwrap(), rgb);
    }

    #[test]
    fn equal_rgb_is_that_gray() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        RgbImage::from_pixel(3, 2, image::Rgb([100, 100, 100])).save(&p).unwrap();
        let g = load_image(&p).unwrap();
        assert!(g.as_slice().iter().all(|v| (v - 100.0).abs() < 1e-12));
    }

    #[test]
    fn missing_and_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::MissingFile(_))));
        let bad = dir.path().join("x.png");
        fs::write(&bad, b"not an image at all").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::UnsupportedFormat(_) | Error::Decode(_))));
        let truncated = dir.path().join("t.pgm");
        fs::write(&truncated, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(load_image(&truncated).is_err());
        assert!(matches!(
            save_image(&Image::zeros(2, 2), dir.path().join("x.bmp")),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn save_clamps_and_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_image(&Image::from_vec(1, 3, vec![-20.0, 100.4, 300.0]).unwrap(), &p).unwrap();
        assert_eq!(load_image(&p).unwrap().as_slice(), &[0.0, 100.0, 255.0]);
    }

    #[test]
    fn noise_cases() {
        let img = piecewise_constant(256, 256, 1);
        assert_eq!(add_gaussian_noise(&img, 0.0, 5).unwrap(), img);
        let a = add_gaussian_noise(&img, 15.0, 5).unwrap();
        assert_eq!(a, add_gaussian_noise(&img, 15.0, 5).unwrap());
        let diffs: Vec<f64> = a.as_slice().iter().zip(img.as_slice()).map(|(x, y)| x - y).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 15.0).abs() <= 0.05 * 15.0, "{std}");
        assert!(add_gaussian_noise(&img, -1.0, 0).is_err());
    }

    #[test]
    fn patch_cases() {
        let src = vec![piecewise_constant(40, 40, 2), piecewise_constant(50, 45, 3)];
        let one = crop_patches(&src, 8, 1, 7).unwrap();
        assert_eq!(one.origins, crop_patches(&src, 8, 1, 7).unwrap().origins);
        let ten = crop_patches(&src, 8, 10, 7).unwrap();
        assert_eq!((ten.train.len(), ten.validation.len()), (8, 2));
        let flat = crop_patches(&[Image::filled(20, 20, 9.0)], 5, 6, 1).unwrap();
        assert!(flat.train.iter().chain(&flat.validation).all(|p| p.as_slice().iter().all(|&v| v == 9.0)));
        assert!(crop_patches(&src, 41, 3, 0).is_err());
        assert!(matches!(crop_patches(&[], 4, 3, 0), Err(Error::EmptyDataset)));
        let o = ten.origins[3];
        assert_eq!(ten.train[3], src[o.image].crop(o.row, o.col, 8, 8).unwrap());
    }
}
