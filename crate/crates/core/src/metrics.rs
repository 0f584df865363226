//! Attack success rate and image quality metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::FaceImage;
use crate::objectives::RandomFeaturePyramid;

/// Percentage of similarities strictly above `tau`.
pub fn asr(similarities: &[f64], tau: f64) -> Result<f64> {
    if similarities.is_empty() {
        return Err(Error::invalid("asr of an empty similarity list"));
    }
    let hits = similarities.iter().filter(|&&s| s > tau).count();
    Ok(100.0 * hits as f64 / similarities.len() as f64)
}

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical and `db` is the cap.
    pub identical: bool,
}

fn same_shape(x: &FaceImage, y: &FaceImage) -> Result<()> {
    if x.resolution() != y.resolution() {
        return Err(Error::dim(format!("images {:?} and {:?} differ in size", x.resolution(), y.resolution())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for pixels in `[0, 1]`.
pub fn psnr(x: &FaceImage, y: &FaceImage) -> Result<Psnr> {
    same_shape(x, y)?;
    let n = x.pixels().len() as f64;
    let mse = x.pixels().iter().zip(y.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, identical: true });
    }
    Ok(Psnr { db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB), identical: false })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5), valid
/// positions only, averaged over channels.
pub fn ssim(x: &FaceImage, y: &FaceImage) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w) = x.resolution();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let (a, b) = (x.get(oy + dy, ox + dx, ch), y.get(oy + dy, ox + dx, ch));
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

fn moments(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let data = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean = DVector::from_fn(dim, |j, _| data.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| data[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::invalid(format!("fid needs at least 2 samples per side, got {} and {}", features_a.len(), features_b.len())));
    }
    let dim = features_a[0].len();
    if dim == 0 || features_a.iter().chain(features_b).any(|f| f.len() != dim) {
        return Err(Error::dim("feature vectors must share one nonzero dimension"));
    }
    let (mu_a, cov_a) = moments(features_a, dim);
    let (mu_b, cov_b) = moments(features_b, dim);
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), which keeps the argument symmetric.
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Maps an image to a feature vector for [`fid`].
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &FaceImage) -> Vec<f64>;
}

impl FeatureExtractor for RandomFeaturePyramid {
    fn features(&self, image: &FaceImage) -> Vec<f64> {
        self.pooled_features(image)
    }
}

/// Aggregate scores of a set of adversarial faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub models: Vec<String>,
    /// Percent per model, aligned with `models`.
    pub asr: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Absent when fewer than two images were scored.
    pub fid: Option<f64>,
    pub samples: usize,
}

impl EvaluationReport {
    /// Scores `adversarial[i]` against `sources[i]`. `similarities[m][i]` is
    /// model `m`'s cosine similarity of pair `i` to its target.
    pub fn compute(
        models: &[String],
        similarities: &[Vec<f64>],
        thresholds: &[f64],
        adversarial: &[FaceImage],
        sources: &[FaceImage],
        extractor: &dyn FeatureExtractor,
    ) -> Result<Self> {
        let n = adversarial.len();
        if n == 0 {
            return Err(Error::invalid("nothing to evaluate"));
        }
        if sources.len() != n || similarities.len() != models.len() || thresholds.len() != models.len() {
            return Err(Error::dim("evaluation inputs are not aligned"));
        }
        let asr = similarities
            .iter()
            .zip(thresholds)
            .map(|(s, &tau)| {
                if s.len() != n {
                    return Err(Error::dim("similarity list length differs from image count"));
                }
                asr(s, tau)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (a, s) in adversarial.iter().zip(sources) {
            psnr_sum += psnr(a, s)?.db;
            ssim_sum += ssim(a, s)?;
        }
        let fid = if n >= 2 {
            let fa: Vec<_> = adversarial.iter().map(|x| extractor.features(x)).collect();
            let fb: Vec<_> = sources.iter().map(|x| extractor.features(x)).collect();
            Some(fid(&fa, &fb)?)
        } else {
            None
        };
        Ok(Self { models: models.to_vec(), asr, mean_psnr: psnr_sum / n as f64, mean_ssim: ssim_sum / n as f64, fid, samples: n })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// `model,asr,mean_psnr,mean_ssim,fid,samples`, one row per model.
    pub fn csv_rows(&self) -> String {
        let fid = self.fid.map(|f| f.to_string()).unwrap_or_default();
        self.models
            .iter()
            .zip(&self.asr)
            .map(|(m, a)| format!("{m},{a},{},{},{fid},{}\n", self.mean_psnr, self.mean_ssim, self.samples))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_examples() {
        assert_eq!(asr(&[0.50, 0.10, 0.35, 0.31], 0.302).unwrap(), 75.0);
        assert_eq!(asr(&[0.302], 0.302).unwrap(), 0.0);
        assert!(asr(&[], 0.3).is_err());
    }

    #[test]
    fn psnr_cap_and_shift() {
        let x = FaceImage::filled(12, 12, 0.3).unwrap();
        let y = FaceImage::filled(12, 12, 0.4).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), Psnr { db: 100.0, identical: true });
        assert!((psnr(&x, &y).unwrap().db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let x = FaceImage::new(12, 12, (0..432).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let tiny = FaceImage::filled(8, 8, 0.1).unwrap();
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn fid_needs_two_samples() {
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]).is_err());
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![2.0, 3.0]];
        assert!(fid(&a, &a).unwrap() <= 1e-9);
    }
}
