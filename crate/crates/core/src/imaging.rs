//! Grayscale image I/O, seeded Gaussian corruption and PSNR.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image tensor must have shape [1, 1, h, w], got {0:?}")]
    NotGray(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale image: a `[1, 1, h, w]` tensor on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn from_tensor(t: Tensor) -> Result<Self, ImageError> {
        match t.shape() {
            [1, 1, _, _] => Ok(Self(t)),
            s => Err(ImageError::NotGray(s.to_vec())),
        }
    }

    pub fn from_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Self, ImageError> {
        let data = pixels.iter().map(|&p| p as f32).collect();
        Ok(Self(Tensor::new(vec![1, 1, height, width], data)?))
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self, ImageError> {
        Ok(Self(Tensor::full(&[1, 1, height, width], value)?))
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn pixels(&self) -> &[f32] {
        self.0.data()
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(0.0, 255.0)))
    }

    /// Clamps to 0..=255 and rounds half to even.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.0
            .data()
            .iter()
            .map(|v| v.clamp(0.0, 255.0).round_ties_even() as u8)
            .collect()
    }
}

/// Additive Gaussian corruption: standard deviation `sigma` in 8-bit
/// intensity units, noise field fixed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f32,
    pub seed: u64,
}

/// `img + sigma * g`, `g` standard normal per pixel in row-major order from
/// `Rng::new(seed)`. Not clamped.
pub fn add_noise(img: &Image, nm: NoiseModel) -> Image {
    if nm.sigma == 0.0 {
        return img.clone();
    }
    let mut rng = Rng::new(nm.seed);
    let sigma = nm.sigma as f64;
    let data = img
        .pixels()
        .iter()
        .map(|&v| (v as f64 + sigma * rng.normal()) as f32)
        .collect();
    Image(Tensor::new(img.0.shape().to_vec(), data).expect("shape unchanged"))
}

/// Peak signal-to-noise ratio in dB over the 0..=255 range, MSE accumulated
/// in `f64`. Identical images give `f64::INFINITY`.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64, ImageError> {
    if reference.0.shape() != test.0.shape() {
        return Err(ImageError::ShapeMismatch(
            reference.0.shape().to_vec(),
            test.0.shape().to_vec(),
        ));
    }
    let mse = reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / reference.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// ITU-R BT.601 luma, rounded half to even.
pub fn bt601_luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round_ties_even().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit PNG (any color type; color converted to luma) or a
/// binary PGM (P5).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err(ImageError::Unsupported(
            "expected PNG or binary PGM (P5)".into(),
        ))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::Corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Corrupt("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Corrupt(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let gray: Vec<u8> = match info.color_type {
        png::ColorType::Grayscale => buf.to_vec(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).map(|p| p[0]).collect(),
        png::ColorType::Rgb => buf.chunks_exact(3).map(|p| bt601_luma(p[0], p[1], p[2])).collect(),
        png::ColorType::Rgba => buf.chunks_exact(4).map(|p| bt601_luma(p[0], p[1], p[2])).collect(),
        png::ColorType::Indexed => {
            return Err(ImageError::Unsupported("palette PNG after expansion".into()))
        }
    };
    if gray.len() != w * h {
        return Err(ImageError::Corrupt("pixel count does not match size".into()));
    }
    Image::from_gray8(w, h, &gray)
}

fn decode_pgm(bytes: &[u8]) -> Result<Image, ImageError> {
    // header: "P5" ws width ws height ws maxval single-ws, '#' comments allowed
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::Corrupt("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Corrupt("bad PGM header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Corrupt("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(ImageError::Corrupt(format!("bad PGM dimensions {w}x{h}/{maxval}")));
    }
    let raster = &bytes[pos..];
    let data: Vec<f32> = if maxval < 256 {
        if raster.len() < w * h {
            return Err(ImageError::Corrupt("truncated PGM raster".into()));
        }
        raster[..w * h]
            .iter()
            .map(|&v| scale_to_255(v as f32, maxval))
            .collect()
    } else {
        if raster.len() < 2 * w * h {
            return Err(ImageError::Corrupt("truncated PGM raster".into()));
        }
        raster[..2 * w * h]
            .chunks_exact(2)
            .map(|c| scale_to_255(u16::from_be_bytes([c[0], c[1]]) as f32, maxval))
            .collect()
    };
    Ok(Image(Tensor::new(vec![1, 1, h, w], data)?))
}

fn scale_to_255(v: f32, maxval: usize) -> f32 {
    if maxval == 255 {
        v
    } else {
        (v * 255.0 / maxval as f32).round_ties_even()
    }
}

/// Writes an 8-bit grayscale PNG or PGM (P5), chosen by extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("pgm") => encode_pgm(img),
        _ => {
            return Err(ImageError::Unsupported(format!(
                "cannot infer format from {}",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(
            BufWriter::new(&mut out),
            img.width() as u32,
            img.height() as u32,
        );
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImageError::Corrupt(e.to_string()))?;
        writer
            .write_image_data(&img.to_gray8())
            .map_err(|e| ImageError::Corrupt(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_gray8());
    out
}

/// Reads a manifest: one image path per line, `#` starts a comment, blank
/// lines ignored. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>, ImageError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Loads every image a manifest lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Image>, ImageError> {
    read_manifest(path)?.iter().map(load_image).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let px: Vec<u8> = (0..w * h).map(|i| ((i * 7) % 256) as u8).collect();
        Image::from_gray8(w, h, &px).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = gradient(8, 8);
        assert_eq!(add_noise(&img, NoiseModel { sigma: 0.0, seed: 1 }), img);
    }

    #[test]
    fn noise_is_seeded() {
        let img = gradient(16, 16);
        let nm = NoiseModel { sigma: 25.0, seed: 99 };
        assert!(add_noise(&img, nm).tensor().bit_eq(add_noise(&img, nm).tensor()));
        let other = add_noise(&img, NoiseModel { sigma: 25.0, seed: 100 });
        assert_ne!(add_noise(&img, nm), other);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let img = Image::constant(256, 256, 128.0).unwrap();
        for sigma in [10.0f32, 20.0, 50.0] {
            let noisy = add_noise(&img, NoiseModel { sigma, seed: 3 });
            let n = noisy.pixels().len() as f64;
            let d: Vec<f64> = noisy.pixels().iter().map(|&v| v as f64 - 128.0).collect();
            let mean = d.iter().sum::<f64>() / n;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std - sigma as f64).abs() < 0.03 * sigma as f64, "sigma {sigma}: {std}");
        }
    }

    #[test]
    fn noise_is_not_clamped() {
        let img = Image::constant(32, 32, 0.0).unwrap();
        let noisy = add_noise(&img, NoiseModel { sigma: 20.0, seed: 1 });
        assert!(noisy.pixels().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn psnr_examples() {
        let a = gradient(4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let black = Image::constant(4, 4, 0.0).unwrap();
        let white = Image::constant(4, 4, 255.0).unwrap();
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        // every pixel off by 5 -> MSE 25
        let b = Image::from_tensor(a.tensor().map(|v| v + 5.0)).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (65025.0f64 / 25.0).log10()).abs() < 1e-12);
        assert!((p - 34.15).abs() < 0.005);
        assert!(matches!(
            psnr(&a, &gradient(4, 5)),
            Err(ImageError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn psnr_symmetric_and_decreasing_in_sigma() {
        let clean = gradient(64, 64);
        let mut last = f64::INFINITY;
        for sigma in [5.0f32, 10.0, 20.0, 40.0] {
            let mut mean = 0.0;
            for seed in 0..4 {
                let noisy = add_noise(&clean, NoiseModel { sigma, seed }).clamped();
                let p = psnr(&clean, &noisy).unwrap();
                assert_eq!(p, psnr(&noisy, &clean).unwrap());
                mean += p / 4.0;
            }
            assert!(mean < last);
            last = mean;
        }
    }

    #[test]
    fn luma_of_pure_red() {
        assert_eq!(bt601_luma(255, 0, 0), 76);
        assert_eq!(bt601_luma(0, 255, 0), 150);
        assert_eq!(bt601_luma(255, 255, 255), 255);
    }

    #[test]
    fn png_round_trip_is_exact() {
        let img = gradient(13, 7);
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rgb_png_is_converted_to_luma() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0, 0, 0, 0, 255]).unwrap();
        }
        let img = decode_image(&out).unwrap();
        assert_eq!(img.pixels(), &[76.0, 29.0]);
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = gradient(5, 3);
        assert_eq!(decode_image(&encode_pgm(&img)).unwrap(), img);

        let mut raw = b"P5\n# made by hand\n2 1\n# max\n255\n".to_vec();
        raw.extend([0u8, 200]);
        assert_eq!(decode_image(&raw).unwrap().pixels(), &[0.0, 200.0]);

        assert!(matches!(
            decode_image(b"P5\n2 2\n255\n\x01"),
            Err(ImageError::Corrupt(_))
        ));
        assert!(matches!(decode_image(b"GIF89a"), Err(ImageError::Unsupported(_))));
    }

    #[test]
    fn save_rounds_half_to_even_and_clamps() {
        let t = Tensor::new(vec![1, 1, 1, 5], vec![0.5, 1.5, 2.5, -3.0, 300.0]).unwrap();
        let img = Image::from_tensor(t).unwrap();
        assert_eq!(img.to_gray8(), vec![0, 2, 2, 0, 255]);
    }

    #[test]
    fn files_round_trip_and_manifest_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(9, 4);
        save_image(&img, dir.path().join("a.png")).unwrap();
        save_image(&img, dir.path().join("b.pgm")).unwrap();
        assert!(save_image(&img, dir.path().join("c.bmp")).is_err());
        fs::write(
            dir.path().join("list.txt"),
            "# two files\na.png\n\n  b.pgm  # trailing comment\n",
        )
        .unwrap();
        let paths = read_manifest(dir.path().join("list.txt")).unwrap();
        assert_eq!(paths.len(), 2);
        for loaded in load_manifest(dir.path().join("list.txt")).unwrap() {
            assert_eq!(loaded, img);
        }
    }
}
