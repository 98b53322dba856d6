//! Image file I/O: 8- and 16-bit PNG plus ASCII PPM, all mapped to and
//! from unit-interval RGB tensors of shape [H, W, 3]. Integer codes map to
//! the unit interval by division by the format's maximum code value.
//! Every write goes through a temp-file + rename so interrupted runs never
//! leave truncated images or checkpoints behind.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ImageEncoder};

use crate::error::{DtpError, Result};
use crate::numerics::{write_atomic, Tensor};

/// Output sample depth for PNG files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn image_err(path: &Path, what: impl std::fmt::Display) -> DtpError {
    DtpError::Image(format!("{}: {what}", path.display()))
}

/// Reads a PNG or ASCII-PPM image into an [H, W, 3] unit-interval tensor.
/// 16-bit PNGs keep their full precision; other color layouts are
/// converted to RGB first.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    match extension(path)? {
        Format::Png => read_png(path),
        Format::Ppm => read_ppm(path),
    }
}

/// Writes an [H, W, 3] tensor to PNG (at the requested depth) or ASCII
/// PPM (always 8-bit). Values are clamped to [0, 1] before quantization.
pub fn write_image(path: &Path, img: &Tensor<f32>, depth: BitDepth) -> Result<()> {
    let (h, w) = expect_rgb(path, img)?;
    let bytes = match extension(path)? {
        Format::Png => encode_png(img, h, w, depth)?,
        Format::Ppm => encode_ppm(img, h, w).into_bytes(),
    };
    write_atomic(path, &bytes)
}

enum Format {
    Png,
    Ppm,
}

fn extension(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        other => Err(DtpError::Image(format!(
            "{}: unsupported image extension {:?} (expected png or ppm)",
            path.display(),
            other
        ))),
    }
}

fn expect_rgb<'a>(path: &Path, img: &'a Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(image_err(
            path,
            format!("expected an H x W x 3 tensor, got shape {other:?}"),
        )),
    }
}

fn quantize(v: f32, max: f64) -> u64 {
    (v.clamp(0.0, 1.0) as f64 * max).round() as u64
}

fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let dynimg = image::open(path).map_err(|e| image_err(path, e))?;
    let tensor = match &dynimg {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let rgb = dynimg.to_rgb16();
            let (w, h) = rgb.dimensions();
            Tensor::from_fn(&[h as usize, w as usize, 3], |i| {
                rgb.as_raw()[i] as f32 / u16::MAX as f32
            })
        }
        _ => {
            let rgb = dynimg.to_rgb8();
            let (w, h) = rgb.dimensions();
            Tensor::from_fn(&[h as usize, w as usize, 3], |i| {
                rgb.as_raw()[i] as f32 / u8::MAX as f32
            })
        }
    };
    Ok(tensor)
}

fn encode_png(img: &Tensor<f32>, h: usize, w: usize, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let encoder = PngEncoder::new(&mut out);
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img
                .data()
                .iter()
                .map(|&v| quantize(v, u8::MAX as f64) as u8)
                .collect();
            encoder
                .write_image(&raw, w as u32, h as u32, ColorType::Rgb8)
                .map_err(|e| DtpError::Image(format!("png encode: {e}")))?;
        }
        BitDepth::Sixteen => {
            // The encoder takes 16-bit samples as native-endian bytes and
            // reorders to the file's byte order itself.
            let mut raw = Vec::with_capacity(img.len() * 2);
            for &v in img.data() {
                let code = quantize(v, u16::MAX as f64) as u16;
                raw.extend_from_slice(&code.to_ne_bytes());
            }
            encoder
                .write_image(&raw, w as u32, h as u32, ColorType::Rgb16)
                .map_err(|e| DtpError::Image(format!("png encode: {e}")))?;
        }
    }
    Ok(out)
}

fn encode_ppm(img: &Tensor<f32>, h: usize, w: usize) -> String {
    let mut out = String::with_capacity(img.len() * 4 + 32);
    out.push_str(&format!("P3\n{w} {h}\n255\n"));
    for row in 0..h {
        let mut line = String::new();
        for col in 0..w {
            for ch in 0..3 {
                if !line.is_empty() {
                    line.push(' ');
                }
                let v = img.data()[(row * w + col) * 3 + ch];
                line.push_str(&quantize(v, 255.0).to_string());
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let text = std::fs::read_to_string(path)?;
    // Token stream with `#` comments stripped to end of line.
    let mut tokens = Vec::new();
    for line in text.lines() {
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    let mut it = tokens.into_iter();
    let magic = it
        .next()
        .ok_or_else(|| image_err(path, "empty ppm file"))?;
    if magic != "P3" {
        return Err(image_err(path, format!("expected P3 magic, got {magic}")));
    }
    let mut next_num = |what: &str| -> Result<u64> {
        let tok = it
            .next()
            .ok_or_else(|| image_err(path, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| image_err(path, format!("bad {what} `{tok}`")))
    };
    let w = next_num("width")? as usize;
    let h = next_num("height")? as usize;
    let max = next_num("max value")?;
    if max == 0 || max > u16::MAX as u64 {
        return Err(image_err(path, format!("unsupported max value {max}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w * 3 {
        let code = next_num("pixel sample")?;
        if code > max {
            return Err(image_err(path, format!("sample {code} exceeds max {max}")));
        }
        data.push(code as f32 / max as f32);
    }
    if it.next().is_some() {
        return Err(image_err(path, "trailing data after pixel samples"));
    }
    Tensor::new(vec![h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("dtp-imageio-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn png8_round_trip_within_quantization_error() {
        let img = rand_image(1, 9, 7);
        let path = scratch("rt8.png");
        write_image(&path, &img, BitDepth::Eight).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let diff = back.max_abs_diff(&img).unwrap();
        assert!(diff <= 0.5 / 255.0 + 1e-6, "diff {diff}");
    }

    #[test]
    fn png16_round_trip_is_tighter() {
        let img = rand_image(2, 6, 11);
        let path = scratch("rt16.png");
        write_image(&path, &img, BitDepth::Sixteen).unwrap();
        let back = read_image(&path).unwrap();
        let diff = back.max_abs_diff(&img).unwrap();
        assert!(diff <= 0.5 / 65535.0 + 1e-9, "diff {diff}");
    }

    #[test]
    fn ppm_round_trip_and_comment_handling() {
        let img = rand_image(3, 4, 5);
        let path = scratch("rt.ppm");
        write_image(&path, &img, BitDepth::Eight).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
        // Hand-written file with comments and odd spacing.
        let handmade = scratch("hand.ppm");
        std::fs::write(
            &handmade,
            "P3 # magic\n# a comment line\n2 1\n255\n0 128 255   255 0 0\n",
        )
        .unwrap();
        let t = read_image(&handmade).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(t.data()[3], 1.0);
    }

    #[test]
    fn out_of_range_values_clamp_before_quantization() {
        let img = Tensor::new(vec![1, 2, 3], vec![-0.5f32, 1.5, 0.5, 0.0, 1.0, 0.25]).unwrap();
        let path = scratch("clamp.ppm");
        write_image(&path, &img, BitDepth::Eight).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let nofile = scratch("missing.png");
        assert!(read_image(&nofile).is_err());
        let bad_ext = scratch("image.tiff");
        let img = rand_image(4, 3, 3);
        assert!(write_image(&bad_ext, &img, BitDepth::Eight).is_err());
        let not_rgb = Tensor::<f32>::zeros(&[3, 3, 1]);
        assert!(write_image(&scratch("gray.png"), &not_rgb, BitDepth::Eight).is_err());
        let truncated = scratch("short.ppm");
        std::fs::write(&truncated, "P3\n2 2\n255\n0 0 0\n").unwrap();
        assert!(read_image(&truncated).is_err());
        let oversample = scratch("over.ppm");
        std::fs::write(&oversample, "P3\n1 1\n255\n300 0 0\n").unwrap();
        assert!(read_image(&oversample).is_err());
    }

    #[test]
    fn sixteen_bit_files_read_back_as_sixteen_bit() {
        // A value representable at 16 bits but not at 8 must survive.
        let v = 1000.0 / 65535.0;
        let img = Tensor::<f32>::filled(&[2, 2, 3], v);
        let path = scratch("deep.png");
        write_image(&path, &img, BitDepth::Sixteen).unwrap();
        let back = read_image(&path).unwrap();
        assert!((back.data()[0] - v).abs() < 1e-7);
    }
}
