//! Target-side input diversity and the guiding softmax vector `v`.
//!
//! With probability `apply_probability` the target face is randomly shrunk,
//! dropped into a zero canvas at a random offset and resized back before the
//! recognition model classifies it; otherwise the untouched face is used.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{resize_bilinear, FaceImage};
use crate::recognition::{FrModel, SoftmaxVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadPlacement {
    /// Offsets drawn uniformly over the available slack.
    #[default]
    Random,
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub apply_probability: f64,
    /// Lower end of the resize scale, as a fraction of the final side.
    pub scale_low: f64,
    pub scale_high: f64,
    pub pad: PadPlacement,
    /// Output `[height, width]`; `None` keeps the input resolution.
    pub final_resolution: Option<[usize; 2]>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { apply_probability: 0.5, scale_low: 0.8, scale_high: 1.0, pad: PadPlacement::Random, final_resolution: None }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::invalid(format!("apply_probability {} outside [0, 1]", self.apply_probability)));
        }
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high && self.scale_high <= 1.0) {
            return Err(Error::invalid(format!("scale range ({}, {}) must satisfy 0 < low <= high <= 1", self.scale_low, self.scale_high)));
        }
        Ok(())
    }

    fn output_for(&self, x: &FaceImage) -> (usize, usize) {
        self.final_resolution.map(|[h, w]| (h, w)).unwrap_or(x.resolution())
    }
}

/// One realization of the random resize-and-pad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDraw {
    pub scale: f64,
    pub offset_y: usize,
    pub offset_x: usize,
}

/// Draws scale and offsets for an output of `(height, width)`.
pub fn draw_transform<R: Rng + ?Sized>(cfg: &AugmentationConfig, output: (usize, usize), rng: &mut R) -> Result<TransformDraw> {
    cfg.validate()?;
    let scale = if cfg.scale_low == cfg.scale_high { cfg.scale_low } else { rng.random_range(cfg.scale_low..=cfg.scale_high) };
    let (h, w) = scaled_size(scale, output)?;
    let (slack_y, slack_x) = (output.0 - h, output.1 - w);
    let (offset_y, offset_x) = match cfg.pad {
        PadPlacement::Random => (rng.random_range(0..=slack_y), rng.random_range(0..=slack_x)),
        PadPlacement::Centered => (slack_y / 2, slack_x / 2),
    };
    Ok(TransformDraw { scale, offset_y, offset_x })
}

fn scaled_size(scale: f64, output: (usize, usize)) -> Result<(usize, usize)> {
    let h = (scale * output.0 as f64).round();
    let w = (scale * output.1 as f64).round();
    if !(h >= 1.0 && w >= 1.0) {
        return Err(Error::invalid(format!("scale {scale} shrinks the image below one pixel")));
    }
    Ok(((h as usize).min(output.0), (w as usize).min(output.1)))
}

/// `Resize(RandPad(RandResize(x)))` for a fixed draw.
pub fn apply_transform(x: &FaceImage, output: (usize, usize), draw: &TransformDraw) -> Result<FaceImage> {
    let (h, w) = scaled_size(draw.scale, output)?;
    if draw.offset_y + h > output.0 || draw.offset_x + w > output.1 {
        return Err(Error::invalid(format!("offset ({}, {}) pushes a {h}x{w} patch outside {output:?}", draw.offset_y, draw.offset_x)));
    }
    let small = resize_bilinear(x.pixels(), x.height(), x.width(), h, w);
    let mut canvas = vec![0.0; output.0 * output.1 * 3];
    for y in 0..h {
        let dst = ((draw.offset_y + y) * output.1 + draw.offset_x) * 3;
        canvas[dst..dst + w * 3].copy_from_slice(&small[y * w * 3..(y + 1) * w * 3]);
    }
    // The canvas already has the output size, so the final resize is exact.
    FaceImage::new(output.0, output.1, canvas)?.resize(output.0, output.1)
}

/// Random resize-and-pad `T(x)`.
pub fn transform<R: Rng + ?Sized>(x: &FaceImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<FaceImage> {
    let output = cfg.output_for(x);
    let draw = draw_transform(cfg, output, rng)?;
    apply_transform(x, output, &draw)
}

/// Guiding softmax vector `v` for the target face under `model`, and whether
/// the transformed branch was taken.
///
/// `p` is drawn from the open interval (0, 1), so `apply_probability = 0`
/// never transforms and `1` always does.
pub fn target_representation_traced<R: Rng + ?Sized>(
    target: &FaceImage,
    model: &dyn FrModel,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(SoftmaxVector, bool)> {
    cfg.validate()?;
    let p: f64 = rng.sample(rand::distr::Open01);
    if p <= cfg.apply_probability {
        let mut local = cfg.clone();
        local.final_resolution.get_or_insert({
            let (h, w) = model.input_resolution();
            [h, w]
        });
        let t = transform(target, &local, rng)?;
        Ok((model.classify(&t)?, true))
    } else {
        Ok((model.classify(target)?, false))
    }
}

pub fn target_representation<R: Rng + ?Sized>(
    target: &FaceImage,
    model: &dyn FrModel,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<SoftmaxVector> {
    target_representation_traced(target, model, cfg, rng).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Generator, NoiseStack, StyleLatent, ToyGenerator};
    use crate::recognition::ToyFrModel;
    use crate::seeded_rng;

    fn face() -> FaceImage {
        let g = ToyGenerator::new(0);
        g.synthesize(&StyleLatent::random(4, 11), &NoiseStack::zeros(&g)).unwrap()
    }

    #[test]
    fn identity_draw_equals_plain_resize() {
        let x = face();
        let draw = TransformDraw { scale: 1.0, offset_y: 0, offset_x: 0 };
        assert_eq!(apply_transform(&x, (32, 32), &draw).unwrap(), x.resize(32, 32).unwrap());
        assert_eq!(apply_transform(&x, (24, 20), &draw).unwrap(), x.resize(24, 20).unwrap());
    }

    #[test]
    fn output_resolution_is_fixed_and_range_preserved() {
        let x = face();
        let mut rng = seeded_rng(9);
        let cfg = AugmentationConfig { final_resolution: Some([28, 30]), scale_low: 0.3, ..Default::default() };
        for _ in 0..50 {
            let t = transform(&x, &cfg, &mut rng).unwrap();
            assert_eq!(t.resolution(), (28, 30));
            assert!(t.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let x = face();
        let draw = TransformDraw { scale: 0.01, offset_y: 0, offset_x: 0 };
        assert!(matches!(apply_transform(&x, (32, 32), &draw), Err(Error::Validation(_))));
    }

    #[test]
    fn config_validation() {
        let bad = AugmentationConfig { apply_probability: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig { scale_low: 0.9, scale_high: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig { scale_low: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn never_transform_branch_is_plain_classification() {
        let x = face();
        let model = ToyFrModel::new("m", 5, (32, 32));
        let cfg = AugmentationConfig { apply_probability: 0.0, ..Default::default() };
        let direct = model.classify(&x).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..20 {
            let (v, transformed) = target_representation_traced(&x, &model, &cfg, &mut rng).unwrap();
            assert!(!transformed);
            assert_eq!(v, direct);
        }
    }

    #[test]
    fn centered_padding_splits_slack() {
        let cfg = AugmentationConfig { pad: PadPlacement::Centered, scale_low: 0.5, scale_high: 0.5, ..Default::default() };
        let d = draw_transform(&cfg, (32, 32), &mut seeded_rng(0)).unwrap();
        assert_eq!((d.offset_y, d.offset_x), (8, 8));
    }
}
