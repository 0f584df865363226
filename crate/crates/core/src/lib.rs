//! Text-guided adversarial impersonation of face recognition models.
//!
//! A fusion network edits the style latent of a face generator so that the
//! synthesized face carries an attribute described by a text prompt while
//! being recognized as a chosen target identity. Transferability to unseen
//! recognition models comes from target-side input augmentation and from
//! meta-learning over a pool of surrogate models.
//!
//! The crate ships deterministic toy stand-ins for every pretrained
//! component (generator, recognition models, text/image towers, perceptual
//! metric) so the full pipeline runs and is testable at desk scale. Real
//! networks plug in through the [`Generator`], [`FrModel`], [`TextEncoder`],
//! [`ImageTextScorer`] and [`PerceptualMetric`] traits.

pub mod augmentation;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod graph;
pub mod meta;
pub mod metrics;
pub mod objectives;
pub mod recognition;

pub use augmentation::{target_representation, transform, AugmentationConfig, PadPlacement};
pub use error::{Error, Result};
pub use fusion::{encode_text, fuse, init_fusion, FusionArch, FusionParams, PromptLibrary, StubTextEncoder, TextEmbedding, TextEncoder};
pub use generator::{FaceImage, Generator, NoiseStack, StyleLatent, ToyGenerator, STYLE_DIM};
pub use meta::{
    inner_update, inner_update_graph, load_checkpoint, meta_objective, meta_test_loss, meta_train_loss, run_attack, run_prepared,
    save_checkpoint, shuffle_split, AdamConfig, AttackProblem, AttackResult, AttackRunConfig, AttackStack, EpochRecord, MetaSplit,
    OptimizerState, Strategy, ToyStack,
};
pub use metrics::{asr, fid, psnr, ssim, EvaluationReport, FeatureExtractor, Psnr};
pub use objectives::{
    adversarial_loss, guide_loss, perceptual_loss, total_loss, ImageTextScorer, LossWeights, PerceptualMetric, RandomFeaturePyramid,
    SignConvention, ToyImageTextScorer,
};
pub use recognition::{
    calibrate_threshold, cosine_similarity, verify, EmbeddingVector, FrModel, SoftmaxVector, ThresholdTable, ToyFrModel,
};

/// Seeded random stream used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Creates the crate's random stream from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// `n` independent standard-normal draws scaled by `std`.
pub(crate) fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    use rand::Rng as _;
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect()
}
