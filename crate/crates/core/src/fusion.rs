//! The multi-level fusion network and the text-encoder interface.
//!
//! Fusion maps `[ω_s, E_t, v]` to an adversarial latent. Each style layer has
//! its own residual block
//!
//! ```text
//! ω*_m = ω_m + W2_m · tanh(W1_m · [ω_m, E_t, v] + b1_m) + b2_m
//! ```
//!
//! so edits can act at the granularity of individual style layers. `W2` and
//! `b2` start at zero, which makes a freshly initialized network the exact
//! identity on `ω`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{StyleLatent, STYLE_DIM};
use crate::graph::{Tensor, Var};
use crate::recognition::SoftmaxVector;
use crate::{normal_vec, seeded_rng, Rng};

/// Text embedding `E_t` of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Vec<f64>,
    prompt: String,
}

impl TextEmbedding {
    pub fn new(values: Vec<f64>, prompt: impl Into<String>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("text embedding must be nonempty and finite"));
        }
        Ok(Self { values, prompt: prompt.into() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }
}

/// Text tower of a vision-language model. Must be deterministic.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, prompt: &str) -> Result<TextEmbedding>;
}

pub fn encode_text(encoder: &dyn TextEncoder, prompt: &str) -> Result<TextEmbedding> {
    if prompt.trim().is_empty() {
        return Err(Error::invalid("prompt is empty"));
    }
    encoder.encode(prompt)
}

/// Bag-of-words encoder: each lowercase token hashes to a seeded Gaussian
/// vector; the prompt embedding is the normalized sum.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    seed: u64,
    dim: usize,
}

impl StubTextEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl Default for StubTextEncoder {
    fn default() -> Self {
        Self::new(0x7e57, Self::DEFAULT_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let lower = prompt.to_lowercase();
        let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("prompt {prompt:?} has no tokens")));
        }
        let mut acc = vec![0.0; self.dim];
        for token in tokens {
            let mut rng = seeded_rng(self.seed ^ fnv1a(token.as_bytes()));
            for (a, v) in acc.iter_mut().zip(normal_vec(&mut rng, self.dim, 1.0)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        TextEmbedding::new(acc.into_iter().map(|v| v / norm).collect(), prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub attribute: String,
    pub text: String,
}

/// The bundled style prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLibrary {
    #[serde(rename = "prompt")]
    prompts: Vec<Prompt>,
}

const BUNDLED_PROMPTS: &str = include_str!("../data/prompts.toml");

impl Default for PromptLibrary {
    fn default() -> Self {
        toml::from_str(BUNDLED_PROMPTS).expect("bundled prompt library parses")
    }
}

impl PromptLibrary {
    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn get(&self, id: usize) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// A numeric id selects a library prompt; anything else is used verbatim.
    pub fn resolve(&self, prompt: &str) -> Result<String> {
        match prompt.trim().parse::<usize>() {
            Ok(id) => self.get(id).map(|p| p.text.clone()).ok_or_else(|| Error::invalid(format!("no prompt with id {id}"))),
            Err(_) if prompt.trim().is_empty() => Err(Error::invalid("prompt is empty")),
            Err(_) => Ok(prompt.to_string()),
        }
    }

    /// Prompt ids averaged over in evaluation grids by default.
    pub fn default_evaluation_ids() -> Vec<usize> {
        (1..=5).collect()
    }
}

/// Shape descriptor of a fusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionArch {
    pub layers: usize,
    pub text_dim: usize,
    pub class_count: usize,
    pub hidden: usize,
}

impl FusionArch {
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(layers: usize, text_dim: usize, class_count: usize, hidden: usize) -> Result<Self> {
        if layers == 0 || text_dim == 0 || class_count == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "fusion dimensions must be positive (L={layers}, d_t={text_dim}, C={class_count}, hidden={hidden})"
            )));
        }
        Ok(Self { layers, text_dim, class_count, hidden })
    }

    pub fn input_dim(&self) -> usize {
        STYLE_DIM + self.text_dim + self.class_count
    }

    /// Shapes of the four tensors of one layer block: `W1, b1, W2, b2`.
    pub fn layer_shapes(&self) -> [Vec<usize>; 4] {
        [vec![self.hidden, self.input_dim()], vec![self.hidden], vec![STYLE_DIM, self.hidden], vec![STYLE_DIM]]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers * (self.input_dim() * self.hidden + self.hidden + self.hidden * STYLE_DIM + STYLE_DIM)
    }
}

/// Learnable parameters `Θ_M`, four tensors per style layer.
///
/// The same container doubles as a gradient with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    arch: FusionArch,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: FusionArch,
    tensors: Vec<Vec<f64>>,
}

impl FusionParams {
    pub fn from_tensors(arch: FusionArch, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != arch.layers * 4 {
            return Err(Error::dim(format!("expected {} tensors, got {}", arch.layers * 4, tensors.len())));
        }
        let shapes = arch.layer_shapes();
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != shapes[i % 4].as_slice() {
                return Err(Error::dim(format!("tensor {i} has shape {:?}, expected {:?}", t.shape(), shapes[i % 4])));
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("tensor {i} has non-finite entries")));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: FusionArch) -> Self {
        let shapes = arch.layer_shapes();
        let tensors = (0..arch.layers * 4).map(|i| Tensor::zeros(shapes[i % 4].clone())).collect();
        Self { arch, tensors }
    }

    pub fn arch(&self) -> FusionArch {
        self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Graph leaves for each tensor, in storage order.
    pub fn to_vars(&self) -> Vec<Var> {
        self.tensors.iter().cloned().map(Var::param).collect()
    }

    pub fn from_vars(arch: FusionArch, vars: &[Var]) -> Result<Self> {
        Self::from_tensors(arch, vars.iter().map(|v| v.value().clone()).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint { arch: self.arch, tensors: self.tensors.iter().map(|t| t.data().to_vec()).collect() };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse { what: "fusion checkpoint".into(), message: e.to_string() })?;
        let shapes = ck.arch.layer_shapes();
        if ck.tensors.len() != ck.arch.layers * 4 {
            return Err(Error::dim("checkpoint tensor count does not match its architecture"));
        }
        let mut tensors = Vec::with_capacity(ck.tensors.len());
        for (i, data) in ck.tensors.into_iter().enumerate() {
            let shape = shapes[i % 4].clone();
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::dim(format!("checkpoint tensor {i} has {} values", data.len())));
            }
            tensors.push(Tensor::new(shape, data));
        }
        Self::from_tensors(ck.arch, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_json(&text)
    }
}

/// Fresh parameters: Gaussian `W1` with variance `1/fan_in`, zero elsewhere.
pub fn init_fusion(arch: FusionArch, rng: &mut Rng) -> Result<FusionParams> {
    let arch = FusionArch::new(arch.layers, arch.text_dim, arch.class_count, arch.hidden)?;
    let shapes = arch.layer_shapes();
    let std = 1.0 / (arch.input_dim() as f64).sqrt();
    let mut tensors = Vec::with_capacity(arch.layers * 4);
    for _ in 0..arch.layers {
        let n = shapes[0].iter().product();
        tensors.push(Tensor::new(shapes[0].clone(), normal_vec(rng, n, std)));
        tensors.push(Tensor::zeros(shapes[1].clone()));
        tensors.push(Tensor::zeros(shapes[2].clone()));
        tensors.push(Tensor::zeros(shapes[3].clone()));
    }
    Ok(FusionParams { arch, tensors })
}

/// Graph form of [`fuse`]. `params` holds the tensors in storage order.
pub fn fuse_graph(arch: &FusionArch, params: &[Var], latent: &Var, text: &Var, v: &Var) -> Var {
    let rows: Vec<Var> = (0..arch.layers)
        .map(|m| {
            let [w1, b1, w2, b2] = [&params[4 * m], &params[4 * m + 1], &params[4 * m + 2], &params[4 * m + 3]];
            let row = latent.slice(m * STYLE_DIM, &[STYLE_DIM]);
            let input = Var::concat(&[row.clone(), text.clone(), v.clone()]);
            let hidden = w1.matvec(&input).add(b1).tanh();
            row.add(&w2.matvec(&hidden).add(b2))
        })
        .collect();
    Var::concat(&rows).reshape(&[arch.layers, STYLE_DIM])
}

/// Checks latent, text and class dimensions against `arch`.
pub fn check_fusion_inputs(arch: &FusionArch, latent_layers: usize, text_dim: usize, classes: usize) -> Result<()> {
    if latent_layers != arch.layers {
        return Err(Error::dim(format!("latent has {latent_layers} layers, fusion expects {}", arch.layers)));
    }
    if text_dim != arch.text_dim {
        return Err(Error::dim(format!("text embedding has dim {text_dim}, fusion expects {}", arch.text_dim)));
    }
    if classes != arch.class_count {
        return Err(Error::dim(format!("softmax has {classes} classes, fusion expects {}", arch.class_count)));
    }
    Ok(())
}

/// `ω* = M_Θ([ω, E_t, v])`.
pub fn fuse(params: &FusionParams, latent: &StyleLatent, text: &TextEmbedding, v: &SoftmaxVector) -> Result<StyleLatent> {
    let arch = params.arch();
    check_fusion_inputs(&arch, latent.layer_count(), text.dim(), v.dim())?;
    let vars: Vec<Var> = params.tensors().iter().cloned().map(Var::constant).collect();
    let out = fuse_graph(&arch, &vars, &Var::constant(latent.to_tensor()), &Var::constant(text.to_tensor()), &Var::constant(v.to_tensor()));
    StyleLatent::from_tensor(out.value())
}
