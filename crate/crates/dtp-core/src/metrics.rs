//! Full-reference image quality metrics (PSNR, windowed structural
//! similarity) and per-channel histogram reporting.
//!
//! All accumulation happens in f64 regardless of the image element type.
//! Structural similarity is computed on RGB channels directly (channel
//! mean), not on a luma conversion, so numbers are comparable run to run.

use crate::error::{DtpError, Result};
use crate::numerics::{Real, Tensor};

/// Reported when the mean squared error is below `PSNR_MSE_FLOOR`;
/// identical images would otherwise be unbounded.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

/// Window size and Gaussian width of the structural-similarity filter.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DtpError::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images:
/// `10 * log10(1 / MSE)`, capped at [`PSNR_CAP_DB`] for (near-)identical
/// inputs.
pub fn psnr<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    check_same_shape(a, b, "psnr inputs")?;
    if a.len() == 0 {
        return Err(DtpError::InvalidArgument("psnr of empty images".into()));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Valid-region separable Gaussian filter of one channel plane.
/// Input is H*W row-major; output is (H-10)*(W-10).
fn filter_plane(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass: H x OW.
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += plane[y * w + x + k] * t;
            }
            horiz[y * ow + x] = acc;
        }
    }
    // Vertical pass: OH x OW.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += horiz[(y + k) * ow + x] * t;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale structural similarity: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over valid window
/// positions and channels. Rejects images smaller than the window.
pub fn ssim<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    check_same_shape(a, b, "ssim inputs")?;
    let (h, w, c) = match a.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(DtpError::InvalidArgument(format!(
                "ssim expects a rank-3 image, got shape {other:?}"
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DtpError::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let mut pa = vec![0.0; h * w];
        let mut pb = vec![0.0; h * w];
        for px in 0..h * w {
            pa[px] = a.data()[px * c + ch].to_f64();
            pb[px] = b.data()[px * c + ch].to_f64();
        }
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_plane(&pa, h, w, &taps);
        let mu_b = filter_plane(&pb, h, w, &taps);
        let m_aa = filter_plane(&sq(&pa), h, w, &taps);
        let m_bb = filter_plane(&sq(&pb), h, w, &taps);
        let m_ab = filter_plane(&prod, h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = m_aa[i] - ma * ma;
            let var_b = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

pub const HISTOGRAM_BINS: usize = 256;

/// Per-channel 256-bin histograms of a 3-channel unit-interval image.
/// Bin `i` covers `[i/256, (i+1)/256)`; the last bin is closed so a value
/// of exactly 1.0 lands in bin 255. Out-of-range values are clamped to the
/// boundary bins, keeping the per-channel counts summing to H*W.
pub fn rgb_histograms<F: Real>(img: &Tensor<F>) -> Result<[[u64; HISTOGRAM_BINS]; 3]> {
    let c = match img.shape() {
        [_, _, 3] => 3usize,
        other => {
            return Err(DtpError::InvalidArgument(format!(
                "histograms expect an H x W x 3 image, got shape {other:?}"
            )))
        }
    };
    let mut hist = [[0u64; HISTOGRAM_BINS]; 3];
    for (i, v) in img.data().iter().enumerate() {
        let bin = (v.to_f64() * HISTOGRAM_BINS as f64).floor();
        let bin = bin.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        hist[i % c][bin] += 1;
    }
    Ok(hist)
}

/// Renders histograms as delimiter-separated text: 256 rows of
/// `red<TAB>green<TAB>blue` counts, suitable for external plotting.
pub fn histograms_to_tsv(hist: &[[u64; HISTOGRAM_BINS]; 3]) -> String {
    let mut out = String::with_capacity(HISTOGRAM_BINS * 12);
    for bin in 0..HISTOGRAM_BINS {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            hist[0][bin], hist[1][bin], hist[2][bin]
        ));
    }
    out
}

/// Quality numbers for one prediction/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus their aggregate means. The perceptual-distance
/// column is reported as "n/a" (it would require a pretrained network) so
/// downstream tables stay well formed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn new(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(DtpError::InvalidArgument(
                "metrics report needs at least one image".into(),
            ));
        }
        let n = per_image.len() as f64;
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        Ok(MetricsReport {
            per_image,
            mean_psnr_db,
            mean_ssim,
        })
    }

    /// Plain-text rendering: one line per image, then the aggregates.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.per_image {
            out.push_str(&format!(
                "image\t{}\tpsnr_db\t{:.4}\tssim\t{:.6}\n",
                m.name, m.psnr_db, m.ssim
            ));
        }
        out.push_str(&format!("mean_psnr_db\t{:.4}\n", self.mean_psnr_db));
        out.push_str(&format!("mean_ssim\t{:.6}\n", self.mean_ssim));
        out.push_str("lpips\tn/a\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let a = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..0.9));
        let b = a.map(|v| v + 0.1);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let a = rand_image(&mut rng, 6, 7, 3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_two_pass_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        for _ in 0..50 {
            let a = rand_image(&mut rng, 5, 9, 3);
            let b = rand_image(&mut rng, 5, 9, 3);
            // Independent two-pass oracle: accumulate the raw squared
            // differences first, divide once, then convert to dB.
            let diffs: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .collect();
            let mse: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let want = -10.0 * mse.log10();
            let got = psnr(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn psnr_is_symmetric_and_monotone_in_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let a = rand_image(&mut rng, 7, 7, 3);
        let b = rand_image(&mut rng, 7, 7, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let base = Tensor::from_fn(&[7, 7, 3], |_| rng.gen_range(0.0..0.5));
        let small = base.map(|v| v + 0.05);
        let large = base.map(|v| v + 0.2);
        assert!(psnr(&base, &large).unwrap() < psnr(&base, &small).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(&[4, 4, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5, 3]);
        assert!(psnr(&a, &b).is_err());
    }

    // Independent windowed oracle: explicit 2D 11x11 weighted moments per
    // window position, no separable filtering, no shared code with ssim().
    fn ssim_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let taps = gaussian_taps();
        let mut window = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for (y, row) in window.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = taps[y] * taps[x];
            }
        }
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0usize;
            for wy in 0..=(h - SSIM_WINDOW) {
                for wx in 0..=(w - SSIM_WINDOW) {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let wgt = window[ky][kx];
                            let va = a.data()[(((wy + ky) * w) + wx + kx) * c + ch];
                            let vb = b.data()[(((wy + ky) * w) + wx + kx) * c + ch];
                            ma += wgt * va;
                            mb += wgt * vb;
                            saa += wgt * va * va;
                            sbb += wgt * vb * vb;
                            sab += wgt * va * vb;
                        }
                    }
                    let var_a = saa - ma * ma;
                    let var_b = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / c as f64
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let a = rand_image(&mut rng, 16, 16, 3);
        let got = ssim(&a, &a).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn inverted_binary_pattern_is_anticorrelated() {
        let a = Tensor::from_fn(&[16, 16, 1], |i| {
            let (y, x) = (i / 16, i % 16);
            ((y / 2 + x / 2) % 2) as f64
        });
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn fixed_pair_matches_the_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let a = rand_image(&mut rng, 16, 16, 3);
        let noise = rand_image(&mut rng, 16, 16, 3);
        let b = Tensor::from_fn(&[16, 16, 3], |i| {
            (a.data()[i] * 0.8 + noise.data()[i] * 0.2).clamp(0.0, 1.0)
        });
        let got = ssim(&a, &b).unwrap();
        let want = ssim_naive(&a, &b);
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn random_pairs_match_the_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        for trial in 0..50 {
            let (h, w) = (11 + trial % 4, 12 + trial % 5);
            let a = rand_image(&mut rng, h, w, 3);
            let b = rand_image(&mut rng, h, w, 3);
            let got = ssim(&a, &b).unwrap();
            let want = ssim_naive(&a, &b);
            assert!(
                (got - want).abs() < 1e-6,
                "trial {trial}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let a = rand_image(&mut rng, 13, 14, 3);
        let b = rand_image(&mut rng, 13, 14, 3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn undersized_image_rejected() {
        let a = Tensor::<f64>::zeros(&[10, 16, 3]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn histogram_boundary_rules() {
        let zero = Tensor::<f64>::zeros(&[4, 5, 3]);
        let hist = rgb_histograms(&zero).unwrap();
        for ch in hist.iter() {
            assert_eq!(ch[0], 20);
            assert_eq!(ch.iter().sum::<u64>(), 20);
        }
        let one = Tensor::<f64>::filled(&[4, 5, 3], 1.0);
        let hist = rgb_histograms(&one).unwrap();
        for ch in hist.iter() {
            assert_eq!(ch[255], 20);
        }
        // Just below a bin edge stays in the lower bin.
        let edge = Tensor::<f64>::filled(&[1, 1, 3], 0.5 - 1e-9);
        let hist = rgb_histograms(&edge).unwrap();
        assert_eq!(hist[0][127], 1);
    }

    #[test]
    fn histogram_counts_partition_the_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let img = rand_image(&mut rng, 9, 13, 3);
        let hist = rgb_histograms(&img).unwrap();
        for ch in hist.iter() {
            assert_eq!(ch.iter().sum::<u64>(), 9 * 13);
        }
        assert!(rgb_histograms(&Tensor::<f64>::zeros(&[3, 3, 2])).is_err());
    }

    #[test]
    fn histogram_tsv_has_256_rows() {
        let img = Tensor::<f64>::zeros(&[2, 2, 3]);
        let tsv = histograms_to_tsv(&rgb_histograms(&img).unwrap());
        assert_eq!(tsv.lines().count(), 256);
        assert_eq!(tsv.lines().next().unwrap(), "4\t4\t4");
    }

    #[test]
    fn report_aggregates_and_renders() {
        let report = MetricsReport::new(vec![
            ImageMetrics {
                name: "a".into(),
                psnr_db: 20.0,
                ssim: 0.8,
            },
            ImageMetrics {
                name: "b".into(),
                psnr_db: 30.0,
                ssim: 0.9,
            },
        ])
        .unwrap();
        assert!((report.mean_psnr_db - 25.0).abs() < 1e-12);
        assert!((report.mean_ssim - 0.85).abs() < 1e-12);
        let text = report.render();
        assert!(text.contains("lpips\tn/a"));
        assert!(text.contains("mean_psnr_db\t25.0000"));
        assert!(MetricsReport::new(vec![]).is_err());
    }
}
