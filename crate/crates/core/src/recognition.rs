//! Face recognition models, verification, and FAR threshold calibration.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::FaceImage;
use crate::graph::{Tensor, Var};
use crate::{normal_vec, seeded_rng};

const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm identity embedding `F(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding must be nonempty and finite"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!("embedding norm is {norm}, expected 1")));
        }
        Ok(Self(values))
    }

    /// Rescales `values` to unit norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite embedding"));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Identity-class probabilities `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxVector(Vec<f64>);

impl SoftmaxVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("softmax entries must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!("softmax sums to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Elementwise mean of several vectors of the same length.
    pub fn mean(vectors: &[SoftmaxVector]) -> Result<Self> {
        let first = vectors.first().ok_or_else(|| Error::invalid("mean of no softmax vectors"))?;
        if vectors.iter().any(|v| v.dim() != first.dim()) {
            return Err(Error::dim("softmax vectors differ in class count"));
        }
        let n = vectors.len() as f64;
        let probs = (0..first.dim()).map(|c| vectors.iter().map(|v| v.0[c]).sum::<f64>() / n).collect();
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }
}

/// A face recognition encoder `F`.
///
/// Both heads take `[h, w, 3]` image nodes and must be differentiable with
/// respect to the pixels.
pub trait FrModel: Send + Sync {
    fn name(&self) -> &str;

    /// Expected `(height, width)` of inputs.
    fn input_resolution(&self) -> (usize, usize);

    fn embedding_dim(&self) -> usize;

    fn class_count(&self) -> usize;

    /// Raw identity features before L2 normalization.
    fn features_graph(&self, image: &Var) -> Var;

    /// Softmax over the model's identity classes.
    fn classify_graph(&self, image: &Var) -> Var;

    fn embed_graph(&self, image: &Var) -> Var {
        self.features_graph(image).normalize()
    }

    fn embed(&self, image: &FaceImage) -> Result<EmbeddingVector> {
        check_resolution(self, image)?;
        let e = self.embed_graph(&Var::constant(image.to_tensor()));
        EmbeddingVector::new(e.value().data().to_vec())
    }

    fn classify(&self, image: &FaceImage) -> Result<SoftmaxVector> {
        check_resolution(self, image)?;
        let v = self.classify_graph(&Var::constant(image.to_tensor()));
        SoftmaxVector::new(v.value().data().to_vec())
    }
}

pub fn check_resolution<M: FrModel + ?Sized>(model: &M, image: &FaceImage) -> Result<()> {
    if image.resolution() != model.input_resolution() {
        return Err(Error::dim(format!("{} expects {:?} inputs, got {:?}", model.name(), model.input_resolution(), image.resolution())));
    }
    Ok(())
}

/// Random-feature recognition model for desk-scale runs.
///
/// `features(x) = W₂ tanh(W₁ (x − ½) + b₁)`, followed by L2 normalization
/// for embeddings and a linear softmax head over the toy identities.
#[derive(Debug, Clone)]
pub struct ToyFrModel {
    name: String,
    resolution: (usize, usize),
    w1: Arc<Tensor>,
    b1: Tensor,
    w2: Arc<Tensor>,
    head: Arc<Tensor>,
    logit_scale: f64,
}

impl ToyFrModel {
    pub const HIDDEN: usize = 128;
    pub const EMBEDDING_DIM: usize = 64;
    pub const CLASS_COUNT: usize = 16;

    /// Names of the four stand-ins in [`ToyFrModel::zoo`].
    pub const ZOO: [(&'static str, u64); 4] = [("toy-mobileface", 101), ("toy-irse50", 202), ("toy-ir152", 303), ("toy-facenet", 404)];

    /// Weight of the family component in every zoo model.
    pub const SHARED_FRACTION: f64 = 0.7;

    const FAMILY_SEED: u64 = 0xface;

    /// A zoo member with the default family share.
    pub fn new(name: impl Into<String>, seed: u64, resolution: (usize, usize)) -> Self {
        Self::with_family(name, seed, resolution, Self::SHARED_FRACTION)
    }

    /// `shared` in `[0, 1]` sets the variance fraction of the feature weights
    /// drawn from a common family stream; the rest comes from `seed`. Models
    /// trained on the same faces learn overlapping features, and this is the
    /// toy analogue. `0` gives fully independent models.
    pub fn with_family(name: impl Into<String>, seed: u64, resolution: (usize, usize), shared: f64) -> Self {
        let shared = shared.clamp(0.0, 1.0);
        let mut own = seeded_rng(seed);
        let mut family = seeded_rng(Self::FAMILY_SEED);
        let inputs = resolution.0 * resolution.1 * 3;
        let (h, d, c) = (Self::HIDDEN, Self::EMBEDDING_DIM, Self::CLASS_COUNT);
        let (a, b) = (shared.sqrt(), (1.0 - shared).sqrt());
        let mut mixed = |n: usize, std: f64| -> Vec<f64> {
            let f = normal_vec(&mut family, n, std);
            normal_vec(&mut own, n, std).into_iter().zip(f).map(|(o, f)| a * f + b * o).collect()
        };
        let w1 = Tensor::new(vec![h, inputs], mixed(h * inputs, 3.0 / (inputs as f64).sqrt()));
        let b1 = Tensor::vector(mixed(h, 0.1));
        let w2 = Tensor::new(vec![d, h], mixed(d * h, 1.0 / (h as f64).sqrt()));
        let mut head = normal_vec(&mut own, c * d, 1.0);
        for row in head.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            name: name.into(),
            resolution,
            w1: Arc::new(w1),
            b1,
            w2: Arc::new(w2),
            head: Arc::new(Tensor::new(vec![c, d], head)),
            logit_scale: 8.0,
        }
    }

    /// Four models with distinct seeds, standing in for four architectures.
    pub fn zoo(resolution: (usize, usize)) -> Vec<ToyFrModel> {
        Self::ZOO.iter().map(|(name, seed)| Self::new(*name, *seed, resolution)).collect()
    }
}

impl FrModel for ToyFrModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn embedding_dim(&self) -> usize {
        Self::EMBEDDING_DIM
    }

    fn class_count(&self) -> usize {
        Self::CLASS_COUNT
    }

    fn features_graph(&self, image: &Var) -> Var {
        image.reshape(&[image.len()]).offset(-0.5).const_matvec(&self.w1).add(&Var::constant(self.b1.clone())).tanh().const_matvec(&self.w2)
    }

    fn classify_graph(&self, image: &Var) -> Var {
        self.embed_graph(image).const_matvec(&self.head).scale(self.logit_scale).softmax()
    }
}

/// Cosine similarity of two embeddings, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("embedding dims {} and {} differ", a.dim(), b.dim())));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Smallest observed score `s` whose strict exceedance rate is at most `far`.
pub fn calibrate_threshold(impostor_scores: &[f64], far: f64) -> Result<f64> {
    if impostor_scores.is_empty() {
        return Err(Error::invalid("no impostor scores to calibrate on"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::invalid(format!("FAR must lie in (0, 1), got {far}")));
    }
    if impostor_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("impostor scores must be finite"));
    }
    let mut sorted = impostor_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let s = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == s {
            j += 1;
        }
        // Scores at indices >= j are strictly greater than s.
        if (n - j) as f64 / n as f64 <= far {
            return Ok(s);
        }
        i = j;
    }
    unreachable!("the maximum score always has zero exceedances")
}

/// Accepts the pair when `cos(F(a), F(b)) > τ`.
pub fn verify(model: &dyn FrModel, a: &FaceImage, b: &FaceImage, threshold: f64) -> Result<bool> {
    let ea = model.embed(a)?;
    let eb = model.embed(b)?;
    Ok(cosine_similarity(&ea, &eb)? > threshold)
}

/// Verification thresholds keyed by model name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    thresholds: BTreeMap<String, f64>,
}

const DEFAULT_THRESHOLDS: &str = include_str!("../data/thresholds.toml");

impl Default for ThresholdTable {
    /// FAR 0.01 thresholds for MobileFace, IRSE50, IR152 and FaceNet.
    fn default() -> Self {
        Self::from_toml(DEFAULT_THRESHOLDS).expect("bundled threshold table parses")
    }
}

impl ThresholdTable {
    pub fn new(thresholds: BTreeMap<String, f64>) -> Result<Self> {
        for (name, tau) in &thresholds {
            if !(tau.is_finite() && *tau > -1.0 && *tau < 1.0) {
                return Err(Error::invalid(format!("threshold for {name} is {tau}, must lie in (-1, 1)")));
            }
        }
        Ok(Self { thresholds })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: ThresholdTable =
            toml::from_str(text).map_err(|e| Error::Parse { what: "threshold table".into(), message: e.to_string() })?;
        Self::new(raw.thresholds)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("threshold table serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn get(&self, model: &str) -> Result<f64> {
        self.thresholds.get(model).copied().ok_or_else(|| Error::invalid(format!("no threshold for model {model}")))
    }

    pub fn insert(&mut self, model: impl Into<String>, tau: f64) -> Result<()> {
        if !(tau.is_finite() && tau > -1.0 && tau < 1.0) {
            return Err(Error::invalid(format!("threshold {tau} must lie in (-1, 1)")));
        }
        self.thresholds.insert(model.into(), tau);
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.thresholds
    }
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
    fn cosine_extremes() {
        let u = EmbeddingVector::normalized(vec![0.3, -0.2, 0.9]).unwrap();
        let neg = EmbeddingVector::normalized(vec![-0.3, 0.2, -0.9]).unwrap();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        let short = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        assert!(matches!(cosine_similarity(&u, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn calibrate_hundredths() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(calibrate_threshold(&scores, 0.01).unwrap(), 0.98);
    }

    #[test]
    fn calibrate_rejects_bad_input() {
        assert!(calibrate_threshold(&[], 0.01).is_err());
        assert!(calibrate_threshold(&[0.1], 0.0).is_err());
        assert!(calibrate_threshold(&[0.1], 1.0).is_err());
    }

    #[test]
    fn calibrate_ties_use_strict_exceedance() {
        // Three tied maxima: only the maximum itself has zero exceedances.
        let scores = [0.1, 0.2, 0.5, 0.5, 0.5];
        assert_eq!(calibrate_threshold(&scores, 0.1).unwrap(), 0.5);
        assert_eq!(calibrate_threshold(&scores, 0.6).unwrap(), 0.2);
    }

    #[test]
    fn default_table_matches_reference_thresholds() {
        let t = ThresholdTable::default();
        assert_eq!(t.get("MobileFace").unwrap(), 0.302);
        assert_eq!(t.get("IRSE50").unwrap(), 0.241);
        assert_eq!(t.get("IR152").unwrap(), 0.167);
        assert_eq!(t.get("FaceNet").unwrap(), 0.409);
        assert_eq!(t.entries().len(), 4);
        assert_eq!(ThresholdTable::from_toml(&t.to_toml()).unwrap(), t);
        assert!(t.get("ArcFace").is_err());
    }

    #[test]
    fn threshold_range_enforced() {
        let mut t = ThresholdTable::default();
        assert!(t.insert("x", 1.0).is_err());
        assert!(ThresholdTable::from_toml("[thresholds]\na = -1.5\n").is_err());
    }

    #[test]
    fn toy_models_produce_valid_heads() {
        for model in ToyFrModel::zoo((32, 32)) {
            let x = face(3);
            let e = model.embed(&x).unwrap();
            assert_eq!(e.dim(), ToyFrModel::EMBEDDING_DIM);
            let v = model.classify(&x).unwrap();
            assert_eq!(v.dim(), ToyFrModel::CLASS_COUNT);
        }
    }

    #[test]
    fn verify_identity_and_resolution() {
        let model = ToyFrModel::new("m", 1, (32, 32));
        let x = face(4);
        assert!(verify(&model, &x, &x, 0.999).unwrap());
        let small = FaceImage::filled(16, 16, 0.5).unwrap();
        assert!(matches!(verify(&model, &x, &small, 0.3), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_mean_stays_on_simplex() {
        let a = SoftmaxVector::new(vec![0.2, 0.8]).unwrap();
        let b = SoftmaxVector::new(vec![0.6, 0.4]).unwrap();
        let m = SoftmaxVector::mean(&[a, b]).unwrap();
        assert!((m.probs()[0] - 0.4).abs() < 1e-15);
        assert!(SoftmaxVector::new(vec![0.5, 0.6]).is_err());
    }
}
