//! Text guidance, perception preservation and impersonation losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TextEmbedding;
use crate::generator::FaceImage;
use crate::graph::{cosine, Conv2d, Tensor, Var};
use crate::recognition::{check_resolution, FrModel};
use crate::{normal_vec, seeded_rng};

/// Weights of the guidance and perception terms; the adversarial term has
/// unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "lambda_guide")]
    pub guide: f64,
    #[serde(rename = "lambda_perc")]
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { guide: 0.5, perceptual: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.guide >= 0.0 && self.perceptual >= 0.0 && self.guide.is_finite() && self.perceptual.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and nonnegative (guide {}, perc {})",
                self.guide, self.perceptual
            )));
        }
        Ok(())
    }
}

/// How cosine similarities become minimization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `1 − cos`: minimizing raises similarity, which is what impersonation
    /// needs.
    #[default]
    Impersonation,
    /// Raw `cos`, as the similarity terms are written in their plain form.
    Literal,
}

impl SignConvention {
    pub fn apply(self, cos: &Var) -> Var {
        match self {
            SignConvention::Impersonation => cos.neg().offset(1.0),
            SignConvention::Literal => cos.clone(),
        }
    }

    pub fn apply_value(self, cos: f64) -> f64 {
        match self {
            SignConvention::Impersonation => 1.0 - cos,
            SignConvention::Literal => cos,
        }
    }
}

/// Perceptual distance `D`. `D(x, x) = 0`, `D ≥ 0`, differentiable in `x`.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    fn distance_graph(&self, x: &Var, y: &Var) -> Var;

    fn distance(&self, x: &FaceImage, y: &FaceImage) -> Result<f64> {
        if x.resolution() != y.resolution() {
            return Err(Error::dim(format!("images {:?} and {:?} differ in size", x.resolution(), y.resolution())));
        }
        Ok(self.distance_graph(&Var::constant(x.to_tensor()), &Var::constant(y.to_tensor())).item())
    }
}

/// Image tower of a vision-language model, mapping into the text space.
pub trait ImageTextScorer: Send + Sync {
    fn dim(&self) -> usize;

    fn image_embedding_graph(&self, image: &Var) -> Var;
}

/// Squared feature distances over a fixed random convolutional pyramid,
/// plus the raw pixel term so that zero distance means identical images.
#[derive(Debug, Clone)]
pub struct RandomFeaturePyramid {
    convs: Vec<Arc<Conv2d>>,
}

impl RandomFeaturePyramid {
    /// Channel widths of the three stages.
    pub const CHANNELS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in Self::CHANNELS.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let weight = normal_vec(&mut rng, cout * cin * 9, 1.0 / fan_in.sqrt());
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Arc::new(Conv2d::new(weight, cin, cout, 3, stride, 1)));
            cin = cout;
        }
        Self { convs }
    }

    fn stages(&self, x: &Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.offset(-0.5);
        for conv in &self.convs {
            h = h.conv(conv).tanh();
            out.push(h.clone());
        }
        out
    }

    /// Globally pooled stage activations, a compact feature vector for
    /// distribution-level metrics.
    pub fn pooled_features(&self, image: &FaceImage) -> Vec<f64> {
        let x = Var::constant(image.to_tensor());
        let mut feats = Vec::new();
        for stage in self.stages(&x) {
            let s = stage.shape();
            let (hw, c) = (s[0] * s[1], s[2]);
            let data = stage.value().data();
            feats.extend((0..c).map(|ch| (0..hw).map(|p| data[p * c + ch]).sum::<f64>() / hw as f64));
        }
        feats
    }
}

impl Default for RandomFeaturePyramid {
    fn default() -> Self {
        Self::new(0x1e71)
    }
}

impl PerceptualMetric for RandomFeaturePyramid {
    fn name(&self) -> &str {
        "random-feature-pyramid"
    }

    fn distance_graph(&self, x: &Var, y: &Var) -> Var {
        let mut total = x.sub(y).square().mean();
        for (fx, fy) in self.stages(x).iter().zip(self.stages(y)) {
            total = total.add(&fx.sub(&fy).square().mean());
        }
        total
    }
}

/// Linear image tower: a fixed Gaussian projection of the centred pixels.
#[derive(Debug, Clone)]
pub struct ToyImageTextScorer {
    projection: Arc<Tensor>,
    resolution: (usize, usize),
}

impl ToyImageTextScorer {
    pub fn new(seed: u64, dim: usize, resolution: (usize, usize)) -> Self {
        let inputs = resolution.0 * resolution.1 * 3;
        let mut rng = seeded_rng(seed);
        let w = normal_vec(&mut rng, dim * inputs, 1.0 / (inputs as f64).sqrt());
        Self { projection: Arc::new(Tensor::new(vec![dim, inputs], w)), resolution }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }
}

impl ImageTextScorer for ToyImageTextScorer {
    fn dim(&self) -> usize {
        self.projection.shape()[0]
    }

    fn image_embedding_graph(&self, image: &Var) -> Var {
        image.reshape(&[image.len()]).offset(-0.5).const_matvec(&self.projection)
    }
}

/// Graph form of [`guide_loss`] with the text embedding as a constant node.
pub fn guide_loss_graph(image: &Var, text: &Var, scorer: &dyn ImageTextScorer, sign: SignConvention) -> Var {
    sign.apply(&cosine(&scorer.image_embedding_graph(image), text))
}

/// `1 − cos(image tower(x̂), E_t)` under the default sign convention.
pub fn guide_loss(image: &FaceImage, text: &TextEmbedding, scorer: &dyn ImageTextScorer, sign: SignConvention) -> Result<f64> {
    if scorer.dim() != text.dim() {
        return Err(Error::dim(format!("scorer space has dim {}, text embedding {}", scorer.dim(), text.dim())));
    }
    let loss = guide_loss_graph(&Var::constant(image.to_tensor()), &Var::constant(text.to_tensor()), scorer, sign);
    Ok(loss.item())
}

pub fn perceptual_loss(image: &FaceImage, source: &FaceImage, metric: &dyn PerceptualMetric) -> Result<f64> {
    metric.distance(image, source)
}

/// Graph form of [`adversarial_loss`] against a cached target embedding.
pub fn adversarial_loss_graph(image: &Var, target_embedding: &Var, model: &dyn FrModel, sign: SignConvention) -> Var {
    sign.apply(&cosine(&model.embed_graph(image), target_embedding))
}

/// `1 − cos(F(x̂), F(x_t))` under the default sign convention.
pub fn adversarial_loss(image: &FaceImage, target: &FaceImage, model: &dyn FrModel, sign: SignConvention) -> Result<f64> {
    check_resolution(model, image)?;
    let target_embedding = model.embed(target)?;
    let loss = adversarial_loss_graph(
        &Var::constant(image.to_tensor()),
        &Var::constant(Tensor::vector(target_embedding.values().to_vec())),
        model,
        sign,
    );
    Ok(loss.item())
}

/// `λ_guide·guide + λ_perc·perc + adv`.
pub fn total_loss(guide: f64, perceptual: f64, adversarial: f64, weights: &LossWeights) -> Result<f64> {
    if !(guide.is_finite() && perceptual.is_finite() && adversarial.is_finite()) {
        return Err(Error::invalid(format!("non-finite loss component (guide {guide}, perc {perceptual}, adv {adversarial})")));
    }
    weights.validate()?;
    Ok(weights.guide * guide + weights.perceptual * perceptual + adversarial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Generator, NoiseStack, StyleLatent, ToyGenerator};

    fn face(seed: u64) -> FaceImage {
        let g = ToyGenerator::new(0);
        g.synthesize(&StyleLatent::random(4, seed), &NoiseStack::zeros(&g)).unwrap()
    }

    #[test]
    fn total_loss_rejects_nan_and_negative_weights() {
        let w = LossWeights::default();
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        let neg = LossWeights { guide: -1.0, perceptual: 0.0 };
        assert!(total_loss(0.0, 0.0, 0.0, &neg).is_err());
    }

    #[test]
    fn perceptual_distance_basics() {
        let metric = RandomFeaturePyramid::default();
        let (x, y) = (face(1), face(2));
        assert_eq!(metric.distance(&x, &x).unwrap(), 0.0);
        assert!(metric.distance(&x, &y).unwrap() > 0.0);
        let small = FaceImage::filled(16, 16, 0.5).unwrap();
        assert!(matches!(perceptual_loss(&x, &small, &metric), Err(Error::Dimension(_))));
    }

    #[test]
    fn guide_loss_dim_mismatch() {
        let scorer = ToyImageTextScorer::new(1, 32, (32, 32));
        let text = crate::fusion::TextEncoder::encode(&crate::fusion::StubTextEncoder::default(), "a young face.").unwrap();
        assert!(matches!(guide_loss(&face(1), &text, &scorer, SignConvention::Impersonation), Err(Error::Dimension(_))));
    }

    #[test]
    fn literal_sign_is_raw_cosine() {
        let model = crate::recognition::ToyFrModel::new("m", 3, (32, 32));
        let (x, t) = (face(5), face(6));
        let imp = adversarial_loss(&x, &t, &model, SignConvention::Impersonation).unwrap();
        let lit = adversarial_loss(&x, &t, &model, SignConvention::Literal).unwrap();
        assert!((imp + lit - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_features_have_expected_width() {
        let f = RandomFeaturePyramid::default().pooled_features(&face(1));
        assert_eq!(f.len(), RandomFeaturePyramid::CHANNELS.iter().sum::<usize>());
    }
}
