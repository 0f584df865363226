//! Meta-learned attack loop.
//!
//! Every epoch the surrogate pool is split into meta-train models and one
//! held-out meta-test model. Each train model contributes its own loss at
//! `Θ` and, after one inner gradient step on that loss, the test model's
//! loss at the adapted parameters. One Adam step is taken on the sum of
//! those terms plus the weighted guidance and perception losses.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augmentation::{target_representation, AugmentationConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    check_fusion_inputs, encode_text, fuse, fuse_graph, init_fusion, FusionArch, FusionParams, StubTextEncoder, TextEmbedding, TextEncoder,
};
use crate::generator::{FaceImage, Generator, NoiseStack, StyleLatent, ToyGenerator};
use crate::graph::{grad, Tensor, Var};
use crate::objectives::{
    adversarial_loss_graph, guide_loss_graph, ImageTextScorer, LossWeights, PerceptualMetric, RandomFeaturePyramid, SignConvention,
    ToyImageTextScorer,
};
use crate::recognition::{check_resolution, cosine_similarity, FrModel, SoftmaxVector, ToyFrModel};
use crate::{seeded_rng, Rng};

/// Partition of the surrogate pool for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaSplit {
    train: Vec<usize>,
    test: usize,
}

impl MetaSplit {
    /// `train` and `test` must be disjoint and cover `0..model_count`.
    pub fn new(train: Vec<usize>, test: usize, model_count: usize) -> Result<Self> {
        let mut seen = vec![false; model_count];
        for &i in train.iter().chain(std::iter::once(&test)) {
            if i >= model_count || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("split {train:?}/{test} is not a partition of {model_count} models")));
            }
        }
        if train.is_empty() || seen.contains(&false) {
            return Err(Error::invalid(format!("split {train:?}/{test} is not a partition of {model_count} models")));
        }
        Ok(Self { train, test })
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> usize {
        self.test
    }
}

/// Holds out one uniformly chosen model; the rest train, in index order.
pub fn shuffle_split(rng: &mut Rng, model_count: usize) -> Result<MetaSplit> {
    if model_count < 2 {
        return Err(Error::invalid(format!("meta split needs at least 2 models, got {model_count}")));
    }
    let test = rng.random_range(0..model_count);
    let train = (0..model_count).filter(|&i| i != test).collect();
    Ok(MetaSplit { train, test })
}

/// How the surrogate pool is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Meta,
    /// Plain sum of per-model losses, no split and no inner step.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, lr: 0.01, eps: 1e-8 }
    }
}

/// Everything that parameterizes one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackRunConfig {
    pub epochs: usize,
    pub inner_lr: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    pub second_order: bool,
    pub strategy: Strategy,
    pub sign: SignConvention,
    pub fusion_hidden: usize,
}

impl Default for AttackRunConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            inner_lr: 0.01,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            augmentation: AugmentationConfig::default(),
            seed: 0,
            second_order: false,
            strategy: Strategy::Meta,
            sign: SignConvention::Impersonation,
            fusion_hidden: FusionArch::DEFAULT_HIDDEN,
        }
    }
}

impl AttackRunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("inner_lr", self.inner_lr)?;
        positive("adam.lr", self.adam.lr)?;
        positive("adam.eps", self.adam.eps)?;
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.fusion_hidden == 0 {
            return Err(Error::invalid("fusion_hidden must be positive"));
        }
        self.weights.validate()?;
        self.augmentation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse { what: "run config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Adam moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &FusionParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }

    fn check(&self, params: &FusionParams) -> Result<()> {
        let ok = self.first.len() == params.tensors().len()
            && self.second.len() == params.tensors().len()
            && params.tensors().iter().enumerate().all(|(i, t)| self.first[i].len() == t.len() && self.second[i].len() == t.len());
        if !ok {
            return Err(Error::dim("optimizer state does not mirror the parameters"));
        }
        Ok(())
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut FusionParams, gradient: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        self.check(params)?;
        if gradient.len() != params.tensors().len() || gradient.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::dim("gradient does not match parameter shapes"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(gradient).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    fusion: serde_json::Value,
    optimizer: OptimizerState,
}

/// Writes `Θ_M` and the optimizer state as one JSON document.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &FusionParams, state: &OptimizerState) -> Result<()> {
    let file =
        CheckpointFile { fusion: serde_json::from_str(&params.to_json()).expect("checkpoint is valid JSON"), optimizer: state.clone() };
    let text = serde_json::to_string(&file).expect("checkpoint serializes");
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FusionParams, OptimizerState)> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse { what: "attack checkpoint".into(), message: e.to_string() })?;
    let params = FusionParams::from_json(&file.fusion.to_string())?;
    file.optimizer.check(&params)?;
    Ok((params, file.optimizer))
}

/// The pluggable components of an attack.
#[derive(Clone, Copy)]
pub struct AttackStack<'a> {
    pub generator: &'a dyn Generator,
    /// White-box surrogate pool.
    pub models: &'a [&'a dyn FrModel],
    pub text_encoder: &'a dyn TextEncoder,
    pub scorer: &'a dyn ImageTextScorer,
    pub metric: &'a dyn PerceptualMetric,
}

/// Owned toy components for desk-scale runs.
pub struct ToyStack {
    pub generator: ToyGenerator,
    pub models: Vec<ToyFrModel>,
    pub text_encoder: StubTextEncoder,
    pub scorer: ToyImageTextScorer,
    pub metric: RandomFeaturePyramid,
}

impl ToyStack {
    /// Generator, encoders and metric with fixed seeds, plus the named zoo
    /// models.
    pub fn new(model_names: &[&str]) -> Result<Self> {
        let generator = ToyGenerator::new(0);
        let res = generator.resolution();
        let models = model_names
            .iter()
            .map(|name| {
                ToyFrModel::ZOO
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(n, seed)| ToyFrModel::new(*n, *seed, res))
                    .ok_or_else(|| Error::invalid(format!("unknown toy model {name:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            generator,
            models,
            text_encoder: StubTextEncoder::default(),
            scorer: ToyImageTextScorer::new(0x5c0e, StubTextEncoder::DEFAULT_DIM, res),
            metric: RandomFeaturePyramid::default(),
        })
    }

    pub fn model_refs(&self) -> Vec<&dyn FrModel> {
        self.models.iter().map(|m| m as &dyn FrModel).collect()
    }

    pub fn stack<'a>(&'a self, models: &'a [&'a dyn FrModel]) -> AttackStack<'a> {
        AttackStack { generator: &self.generator, models, text_encoder: &self.text_encoder, scorer: &self.scorer, metric: &self.metric }
    }
}

/// Attack inputs after inversion and encoding.
#[derive(Debug, Clone)]
pub struct AttackProblem {
    pub source: FaceImage,
    pub target: FaceImage,
    pub latent: StyleLatent,
    pub noise: NoiseStack,
    pub text: TextEmbedding,
    /// `G(Inv(x_s))`.
    pub reconstruction: FaceImage,
    target_embeddings: Vec<Tensor>,
}

impl AttackProblem {
    pub fn prepare(stack: &AttackStack, source: &FaceImage, target: &FaceImage, prompt: &str) -> Result<Self> {
        if stack.models.is_empty() {
            return Err(Error::invalid("attack needs at least one recognition model"));
        }
        let res = stack.generator.resolution();
        for (name, img) in [("source", source), ("target", target)] {
            if img.resolution() != res {
                return Err(Error::dim(format!("{name} is {:?}, generator renders {res:?}", img.resolution())));
            }
        }
        let classes = stack.models[0].class_count();
        for m in stack.models {
            check_resolution(*m, target)?;
            if m.class_count() != classes {
                return Err(Error::dim(format!("{} has {} classes, pool uses {classes}", m.name(), m.class_count())));
            }
        }
        let text = encode_text(stack.text_encoder, prompt)?;
        if stack.scorer.dim() != text.dim() {
            return Err(Error::dim(format!("scorer dim {} vs text dim {}", stack.scorer.dim(), text.dim())));
        }
        let (latent, noise) = stack.generator.invert(source)?;
        let reconstruction = stack.generator.synthesize(&latent, &noise)?;
        let target_embeddings =
            stack.models.iter().map(|m| m.embed(target).map(|e| Tensor::vector(e.values().to_vec()))).collect::<Result<_>>()?;
        Ok(Self { source: source.clone(), target: target.clone(), latent, noise, text, reconstruction, target_embeddings })
    }

    /// Fusion shape for this problem.
    pub fn arch(&self, stack: &AttackStack, hidden: usize) -> Result<FusionArch> {
        FusionArch::new(self.latent.layer_count(), self.text.dim(), stack.models[0].class_count(), hidden)
    }

    fn arch_of(&self, stack: &AttackStack, params: &[Var]) -> Result<FusionArch> {
        let hidden = params.first().map(|p| p.shape()[0]).ok_or_else(|| Error::dim("no fusion parameters"))?;
        let arch = self.arch(stack, hidden)?;
        let shapes = arch.layer_shapes();
        if params.len() != arch.layers * 4 || params.iter().enumerate().any(|(i, p)| p.shape() != shapes[i % 4].as_slice()) {
            return Err(Error::dim("fusion parameters do not fit the problem"));
        }
        Ok(arch)
    }

    /// `G(fuse(Θ, [ω_s, E_t, v]))` as a graph node.
    pub fn fused_image(&self, stack: &AttackStack, params: &[Var], v: &Var) -> Result<Var> {
        let arch = self.arch_of(stack, params)?;
        check_fusion_inputs(&arch, self.latent.layer_count(), self.text.dim(), v.len())?;
        let latent = fuse_graph(&arch, params, &Var::constant(self.latent.to_tensor()), &Var::constant(self.text.to_tensor()), v);
        stack.generator.synthesize_graph(&latent, &self.noise)
    }

    /// Target embedding of pool model `model`.
    pub fn target_embedding(&self, model: usize) -> &Tensor {
        &self.target_embeddings[model]
    }

    fn model_loss(&self, stack: &AttackStack, params: &[Var], model: usize, v: &SoftmaxVector, sign: SignConvention) -> Result<Var> {
        let m = *stack
            .models
            .get(model)
            .ok_or_else(|| Error::invalid(format!("model index {model} outside pool of {}", stack.models.len())))?;
        let image = self.fused_image(stack, params, &Var::constant(v.to_tensor()))?;
        Ok(adversarial_loss_graph(&image, &Var::constant(self.target_embeddings[model].clone()), m, sign))
    }
}

/// Adversarial loss of pool model `model` on the image fused with that
/// model's own guiding vector, drawn from `rng`.
pub fn meta_train_loss(
    stack: &AttackStack,
    problem: &AttackProblem,
    params: &[Var],
    model: usize,
    cfg: &AttackRunConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let m = *stack.models.get(model).ok_or_else(|| Error::invalid(format!("no model {model}")))?;
    let v = target_representation(&problem.target, m, &cfg.augmentation, rng)?;
    problem.model_loss(stack, params, model, &v, cfg.sign)
}

/// The held-out model's loss under adapted parameters `Θ'`.
pub fn meta_test_loss(
    stack: &AttackStack,
    problem: &AttackProblem,
    adapted: &[Var],
    test_model: usize,
    cfg: &AttackRunConfig,
    rng: &mut Rng,
) -> Result<Var> {
    meta_train_loss(stack, problem, adapted, test_model, cfg, rng)
}

/// `Θ − α·g`, leaving `params` untouched.
pub fn inner_update(params: &FusionParams, gradient: &FusionParams, alpha: f64) -> Result<FusionParams> {
    if params.arch() != gradient.arch() {
        return Err(Error::dim("gradient architecture differs from the parameters"));
    }
    let tensors = params
        .tensors()
        .iter()
        .zip(gradient.tensors())
        .map(|(p, g)| Tensor::new(p.shape().to_vec(), p.data().iter().zip(g.data()).map(|(a, b)| a - alpha * b).collect()))
        .collect();
    FusionParams::from_tensors(params.arch(), tensors)
}

/// Graph form of [`inner_update`]. Gradients are detached unless
/// `second_order` is set, in which case the step stays differentiable.
pub fn inner_update_graph(params: &[Var], gradient: &[Var], alpha: f64, second_order: bool) -> Result<Vec<Var>> {
    if params.len() != gradient.len() || params.iter().zip(gradient).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::dim("gradient does not match parameter shapes"));
    }
    Ok(params
        .iter()
        .zip(gradient)
        .map(|(p, g)| {
            let g = if second_order { g.clone() } else { g.detach() };
            p.sub(&g.scale(alpha))
        })
        .collect())
}

/// Loss values of one epoch, measured on the image fused with the mean
/// guiding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_model: Option<usize>,
    pub guide: f64,
    pub perc: f64,
    /// Adversarial loss per pool model.
    pub adv: Vec<f64>,
    /// Value of the optimized objective.
    pub total: f64,
}

struct EpochEval {
    objective: Var,
    guide: f64,
    perc: f64,
    image: Var,
}

fn evaluate(
    stack: &AttackStack,
    problem: &AttackProblem,
    params: &[Var],
    split: Option<&MetaSplit>,
    targets: &[SoftmaxVector],
    cfg: &AttackRunConfig,
) -> Result<EpochEval> {
    if targets.len() != stack.models.len() {
        return Err(Error::dim(format!("{} guiding vectors for {} models", targets.len(), stack.models.len())));
    }
    let active: Vec<usize> = match split {
        Some(s) => {
            MetaSplit::new(s.train.clone(), s.test, stack.models.len())?;
            s.train.clone()
        }
        None => (0..stack.models.len()).collect(),
    };
    let mean_v = SoftmaxVector::mean(&active.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
    let image = problem.fused_image(stack, params, &Var::constant(mean_v.to_tensor()))?;
    let guide = guide_loss_graph(&image, &Var::constant(problem.text.to_tensor()), stack.scorer, cfg.sign);
    let perc = stack.metric.distance_graph(&image, &Var::constant(problem.source.to_tensor()));
    let mut objective = guide.scale(cfg.weights.guide).add(&perc.scale(cfg.weights.perceptual));
    for &i in &active {
        let train = problem.model_loss(stack, params, i, &targets[i], cfg.sign)?;
        objective = objective.add(&train);
        if let Some(s) = split {
            let g = grad(&train, params);
            let adapted = inner_update_graph(params, &g, cfg.inner_lr, cfg.second_order)?;
            let test = problem.model_loss(stack, &adapted, s.test, &targets[s.test], cfg.sign)?;
            objective = objective.add(&test);
        }
    }
    Ok(EpochEval { objective, guide: guide.item(), perc: perc.item(), image })
}

/// `λ_guide·L_guide + λ_perc·L_perc + Σ_train (L_tr(Θ) + L_te(Θ'))`.
///
/// `targets` holds one guiding vector per pool model. The guidance and
/// perception terms use the image fused with the train models' mean vector.
pub fn meta_objective(
    stack: &AttackStack,
    problem: &AttackProblem,
    params: &[Var],
    split: &MetaSplit,
    targets: &[SoftmaxVector],
    cfg: &AttackRunConfig,
) -> Result<Var> {
    evaluate(stack, problem, params, Some(split), targets, cfg).map(|e| e.objective)
}

/// Output of [`run_attack`].
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub params: FusionParams,
    pub optimizer: OptimizerState,
    /// Fused latent `ω*` behind [`AttackResult::image`].
    pub latent: StyleLatent,
    pub image: FaceImage,
    pub reconstruction: FaceImage,
    pub deployment_v: SoftmaxVector,
    pub trace: Vec<EpochRecord>,
    pub model_names: Vec<String>,
    /// Cosine similarity of the adversarial face to the target per pool model.
    pub similarities: Vec<f64>,
}

impl AttackResult {
    /// `epoch,guide,perc,adv_<model>...,total`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,guide,perc");
        for name in &self.model_names {
            out.push_str(&format!(",adv_{name}"));
        }
        out.push_str(",total\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{}", r.epoch, r.guide, r.perc));
            for a in &r.adv {
                out.push_str(&format!(",{a}"));
            }
            out.push_str(&format!(",{}\n", r.total));
        }
        out
    }
}

/// Inverts the source, encodes the prompt and runs [`run_prepared`].
pub fn run_attack(
    stack: &AttackStack,
    source: &FaceImage,
    target: &FaceImage,
    prompt: &str,
    cfg: &AttackRunConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let problem = AttackProblem::prepare(stack, source, target, prompt)?;
    run_prepared(stack, &problem, cfg)
}

/// The attack loop on prepared inputs. Deterministic in `cfg.seed`.
pub fn run_prepared(stack: &AttackStack, problem: &AttackProblem, cfg: &AttackRunConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let n = stack.models.len();
    if cfg.strategy == Strategy::Meta && n < 2 {
        return Err(Error::invalid(format!("meta strategy needs at least 2 models, got {n}")));
    }
    let mut rng = seeded_rng(cfg.seed);
    let arch = problem.arch(stack, cfg.fusion_hidden)?;
    let mut params = init_fusion(arch, &mut rng)?;
    let mut optimizer = OptimizerState::new(&params);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let target_embeddings: Vec<Var> = problem.target_embeddings.iter().cloned().map(Var::constant).collect();

    for epoch in 0..cfg.epochs {
        let split = match cfg.strategy {
            Strategy::Meta => Some(shuffle_split(&mut rng, n)?),
            Strategy::Ensemble => None,
        };
        let targets = stack
            .models
            .iter()
            .map(|m| target_representation(&problem.target, *m, &cfg.augmentation, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let vars = params.to_vars();
        let eval = evaluate(stack, problem, &vars, split.as_ref(), &targets, cfg)?;
        let adv = stack
            .models
            .iter()
            .zip(&target_embeddings)
            .map(|(m, e)| adversarial_loss_graph(&eval.image.detach(), e, *m, cfg.sign).item())
            .collect();
        let record = EpochRecord {
            epoch,
            test_model: split.as_ref().map(MetaSplit::test),
            guide: eval.guide,
            perc: eval.perc,
            adv,
            total: eval.objective.item(),
        };
        let finite = record.total.is_finite() && record.guide.is_finite() && record.perc.is_finite();
        trace.push(record);
        if !finite {
            return Err(Error::NonFinite { epoch, detail: "objective is not finite".into(), trace });
        }
        let gradient: Vec<Tensor> = grad(&eval.objective, &vars).iter().map(|g| g.value().clone()).collect();
        optimizer.step(&mut params, &gradient, &cfg.adam)?;
        if !params.is_finite() {
            return Err(Error::NonFinite { epoch, detail: "parameters diverged after the update".into(), trace });
        }
    }

    let clean = stack.models.iter().map(|m| m.classify(&problem.target)).collect::<Result<Vec<_>>>()?;
    let deployment_v = SoftmaxVector::mean(&clean)?;
    let latent = fuse(&params, &problem.latent, &problem.text, &deployment_v)?;
    let image = stack.generator.synthesize(&latent, &problem.noise)?;
    let similarities =
        stack.models.iter().map(|m| cosine_similarity(&m.embed(&image)?, &m.embed(&problem.target)?)).collect::<Result<Vec<_>>>()?;
    Ok(AttackResult {
        params,
        optimizer,
        latent,
        image,
        reconstruction: problem.reconstruction.clone(),
        deployment_v,
        trace,
        model_names: stack.models.iter().map(|m| m.name().to_string()).collect(),
        similarities,
    })
}
