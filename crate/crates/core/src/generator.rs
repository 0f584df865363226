//! Face images, style latents, and the generator interface.
//!
//! A style latent holds one 512-dimensional code per generator layer; shallow
//! rows steer coarse structure and deep rows fine detail. Attacks never sample
//! the generator's mapping network: they start from the inversion of a real
//! source face, so only synthesis and inversion are part of the interface.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{self, dot, Tensor, Var};
use crate::{normal_vec, seeded_rng};

/// Width of every style-latent row.
pub const STYLE_DIM: usize = 512;

const MIN_SIDE: usize = 8;

/// An RGB face image with values in `[0, 1]`, stored row-major as `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!("image is {height}x{width}; both sides must be at least {MIN_SIDE}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(format!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, pixels.len())));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel {bad} has value {} outside [0, 1]", pixels[bad])));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// Builds an image from a `[h, w, 3]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Self::new(*h, *w, t.data().to_vec()),
            other => Err(Error::dim(format!("expected [h, w, 3] tensor, got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.pixels.clone())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Bilinear resize with half-pixel centres. Resizing to the current size
    /// returns an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        Self::new(height, width, resize_bilinear(&self.pixels, self.height, self.width, height, width))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Parse { what: path.display().to_string(), message: e.to_string() })?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer length matches dimensions")
    }

    /// Writes an 8-bit PNG.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Parse { what: path.display().to_string(), message: e.to_string() })
    }

    /// The bytes [`FaceImage::save`] would write.
    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }
}

pub(crate) fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        let (y0, y1, wy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, wx) = coord(x, ow, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    out
}

/// The per-layer style code `ω`, an `L×512` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleLatent {
    layers: usize,
    codes: Vec<f64>,
}

impl StyleLatent {
    pub fn new(layers: usize, codes: Vec<f64>) -> Result<Self> {
        if layers == 0 || codes.len() != layers * STYLE_DIM {
            return Err(Error::dim(format!("latent with {layers} layers needs {} values, got {}", layers * STYLE_DIM, codes.len())));
        }
        if let Some(i) = codes.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("latent entry ({}, {}) is {}", i / STYLE_DIM, i % STYLE_DIM, codes[i])));
        }
        Ok(Self { layers, codes })
    }

    pub fn zeros(layers: usize) -> Self {
        Self { layers, codes: vec![0.0; layers * STYLE_DIM] }
    }

    /// Standard-normal latent, the usual distribution of inverted codes.
    pub fn random(layers: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self { layers, codes: normal_vec(&mut rng, layers * STYLE_DIM, 1.0) }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [l, d] if *d == STYLE_DIM => Self::new(*l, t.data().to_vec()),
            other => Err(Error::dim(format!("expected [L, {STYLE_DIM}] latent, got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.layers, STYLE_DIM], self.codes.clone())
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.codes[m * STYLE_DIM..(m + 1) * STYLE_DIM]
    }
}

/// Per-layer stochastic noise `η`. Held fixed during attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStack {
    layers: Vec<Tensor>,
}

impl NoiseStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.iter().any(|t| !t.all_finite()) {
            return Err(Error::invalid("noise contains non-finite values"));
        }
        Ok(Self { layers })
    }

    pub fn zeros(generator: &dyn Generator) -> Self {
        Self { layers: generator.noise_shapes().into_iter().map(Tensor::zeros).collect() }
    }

    pub fn random(generator: &dyn Generator, std: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let layers = generator
            .noise_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, normal_vec(&mut rng, n, std))
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Checks the stack has one correctly-shaped entry per generator layer.
    pub fn check_against(&self, generator: &dyn Generator) -> Result<()> {
        let shapes = generator.noise_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::dim(format!("noise has {} layers, generator has {}", self.layers.len(), shapes.len())));
        }
        for (m, (t, s)) in self.layers.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::dim(format!("noise layer {m} has shape {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// A style-based generator `G_L` together with its inverter.
///
/// `synthesize_graph` must be deterministic in `(ω, η)` and differentiable in
/// `ω`; its output must lie in `[0, 1]`.
pub trait Generator: Send + Sync {
    fn layer_count(&self) -> usize;

    /// Output `(height, width)`.
    fn resolution(&self) -> (usize, usize);

    fn noise_shapes(&self) -> Vec<Vec<usize>>;

    /// Synthesizes an `[h, w, 3]` image from an `[L, 512]` latent node.
    fn synthesize_graph(&self, latent: &Var, noise: &NoiseStack) -> Result<Var>;

    /// Maps an image back to a latent and the noise the generator should be
    /// driven with.
    fn invert(&self, image: &FaceImage) -> Result<(StyleLatent, NoiseStack)>;

    /// Maximum absolute pixel error of `synthesize(invert(x))` for images in
    /// the generator's range.
    fn reconstruction_bound(&self) -> f64;

    fn synthesize(&self, latent: &StyleLatent, noise: &NoiseStack) -> Result<FaceImage> {
        let out = self.synthesize_graph(&Var::constant(latent.to_tensor()), noise)?;
        FaceImage::from_tensor(out.value())
    }
}

/// Rejects latents that do not fit `generator` or hold non-finite entries.
pub fn check_latent(generator: &dyn Generator, latent: &Var) -> Result<()> {
    let l = generator.layer_count();
    if latent.shape() != [l, STYLE_DIM] {
        return Err(Error::dim(format!("latent shape {:?} does not match generator ([{l}, {STYLE_DIM}])", latent.shape())));
    }
    if !latent.value().all_finite() {
        return Err(Error::invalid("latent contains non-finite values"));
    }
    Ok(())
}

/// A small linear style generator for desk-scale runs.
///
/// Layer `m` maps `ω_m` linearly onto an `r_m × r_m × 3` grid, adds a learned
/// constant and the layer noise, and accumulates onto the nearest-neighbour
/// upsampled output of the previous layer. A final sigmoid squashes to
/// `[0, 1]`. Because everything before the sigmoid is affine in `ω`, the
/// inverse is a linear least-squares problem.
///
/// The first layer renders at half resolution. Coarser first layers cannot
/// carry a full 512-dimensional code through a 3-channel grid, which would
/// make the generator non-injective and inversion ambiguous.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    resolutions: Vec<usize>,
    maps: Vec<Arc<Tensor>>,
    /// Single-precision copy of `maps`, holding the same values.
    packed: Vec<Arc<[f32]>>,
    constants: Vec<Tensor>,
    max_iterations: usize,
    tolerance: f64,
}

impl ToyGenerator {
    pub const DEFAULT_RESOLUTIONS: [usize; 4] = [16, 32, 32, 32];

    /// The default 4-layer, 32×32 generator.
    pub fn new(seed: u64) -> Self {
        Self::with_resolutions(seed, &Self::DEFAULT_RESOLUTIONS).expect("default layout is valid")
    }

    /// Each resolution must divide the next one.
    pub fn with_resolutions(seed: u64, resolutions: &[usize]) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::invalid("generator needs at least one layer"));
        }
        for pair in resolutions.windows(2) {
            if pair[0] == 0 || pair[1] % pair[0] != 0 {
                return Err(Error::invalid(format!("layer resolutions {resolutions:?} must each divide the next")));
            }
        }
        if *resolutions.last().unwrap() < MIN_SIDE {
            return Err(Error::invalid("output resolution must be at least 8"));
        }
        let mut rng = seeded_rng(seed);
        let layers = resolutions.len() as f64;
        // Layer contributions sum to roughly unit variance for standard-normal
        // latents, which keeps the sigmoid out of saturation.
        let map_std = 1.0 / (STYLE_DIM as f64 * layers).sqrt();
        let mut maps = Vec::new();
        let mut packed = Vec::new();
        let mut constants = Vec::new();
        for &r in resolutions {
            let rows = r * r * 3;
            // Map entries are single-precision values so inversion can stream
            // half the bytes without changing the operator.
            let single: Arc<[f32]> = normal_vec(&mut rng, rows * STYLE_DIM, map_std).iter().map(|&w| w as f32).collect();
            maps.push(Arc::new(Tensor::new(vec![rows, STYLE_DIM], single.iter().map(|&w| f64::from(w)).collect())));
            packed.push(single);
            constants.push(Tensor::new(vec![r, r, 3], normal_vec(&mut rng, rows, 0.25)));
        }
        Ok(Self { resolutions: resolutions.to_vec(), maps, packed, constants, max_iterations: 2000, tolerance: 1e-13 })
    }

    /// Overrides the least-squares solver budget used by [`Generator::invert`].
    pub fn with_solver(mut self, max_iterations: usize, tolerance: f64) -> Self {
        self.max_iterations = max_iterations;
        self.tolerance = tolerance;
        self
    }

    fn output_side(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    fn factor(&self, m: usize) -> usize {
        self.output_side() / self.resolutions[m]
    }

    /// Linear part of the pre-activation: `Σ_m U_m A_m ω_m`.
    fn linear(&self, omega: &[f64]) -> Vec<f64> {
        let side = self.output_side();
        let mut out = vec![0.0; side * side * 3];
        for (m, map) in self.packed.iter().enumerate() {
            let r = self.resolutions[m];
            let grid = Tensor::new(vec![r, r, 3], graph::matvec_rows(map, &omega[m * STYLE_DIM..(m + 1) * STYLE_DIM]));
            let up = graph::upsample_nearest(&grid, self.factor(m));
            for (o, v) in out.iter_mut().zip(up.data()) {
                *o += v;
            }
        }
        out
    }

    /// Adjoint of [`Self::linear`].
    fn linear_t(&self, residual: &[f64]) -> Vec<f64> {
        let side = self.output_side();
        let r_full = Tensor::new(vec![side, side, 3], residual.to_vec());
        let mut out = Vec::with_capacity(self.maps.len() * STYLE_DIM);
        for (m, map) in self.packed.iter().enumerate() {
            let pooled = graph::sum_pool(&r_full, self.factor(m));
            out.extend(graph::matvec_t_rows(map, STYLE_DIM, pooled.data()));
        }
        out
    }

    /// Affine offset of the pre-activation from constants and noise.
    fn offset(&self, noise: &NoiseStack) -> Vec<f64> {
        let side = self.output_side();
        let mut out = vec![0.0; side * side * 3];
        for (m, (c, eta)) in self.constants.iter().zip(noise.layers()).enumerate() {
            let sum = Tensor::new(c.shape().to_vec(), c.data().iter().zip(eta.data()).map(|(a, b)| a + b).collect());
            for (o, v) in out.iter_mut().zip(graph::upsample_nearest(&sum, self.factor(m)).data()) {
                *o += v;
            }
        }
        out
    }
}

impl Generator for ToyGenerator {
    fn layer_count(&self) -> usize {
        self.resolutions.len()
    }

    fn resolution(&self) -> (usize, usize) {
        (self.output_side(), self.output_side())
    }

    fn noise_shapes(&self) -> Vec<Vec<usize>> {
        self.resolutions.iter().map(|&r| vec![r, r, 3]).collect()
    }

    fn synthesize_graph(&self, latent: &Var, noise: &NoiseStack) -> Result<Var> {
        check_latent(self, latent)?;
        noise.check_against(self)?;
        let mut h: Option<Var> = None;
        for (m, map) in self.maps.iter().enumerate() {
            let r = self.resolutions[m];
            let bias =
                Tensor::new(vec![r * r * 3], self.constants[m].data().iter().zip(noise.layers()[m].data()).map(|(a, b)| a + b).collect());
            let feat = latent.slice(m * STYLE_DIM, &[STYLE_DIM]).const_matvec(map).add(&Var::constant(bias)).reshape(&[r, r, 3]);
            h = Some(match h {
                None => feat,
                Some(prev) => prev.upsample(r / self.resolutions[m - 1]).add(&feat),
            });
        }
        Ok(h.expect("at least one layer").sigmoid())
    }

    /// Least-squares inversion with the noise frozen at zero.
    ///
    /// Solves `min ‖linear(ω) − (logit(x) − offset)‖²` by conjugate gradients
    /// on the normal equations (CGLS).
    fn invert(&self, image: &FaceImage) -> Result<(StyleLatent, NoiseStack)> {
        if image.resolution() != self.resolution() {
            return Err(Error::dim(format!("image is {:?}, generator produces {:?}", image.resolution(), self.resolution())));
        }
        let noise = NoiseStack::zeros(self);
        const EPS: f64 = 1e-9;
        let offset = self.offset(&noise);
        let b: Vec<f64> = image
            .pixels()
            .iter()
            .zip(&offset)
            .map(|(&p, o)| {
                let p = p.clamp(EPS, 1.0 - EPS);
                (p / (1.0 - p)).ln() - o
            })
            .collect();

        let n = self.maps.len() * STYLE_DIM;
        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut s = self.linear_t(&r);
        let target = dot(&s, &s).sqrt();
        if target == 0.0 {
            return Ok((StyleLatent::new(self.layer_count(), x)?, noise));
        }
        let mut p = s.clone();
        let mut gamma = dot(&s, &s);
        let mut rel = 1.0;
        for _ in 0..self.max_iterations {
            let q = self.linear(&p);
            let alpha = gamma / dot(&q, &q);
            for (xi, pi) in x.iter_mut().zip(&p) {
                *xi += alpha * pi;
            }
            for (ri, qi) in r.iter_mut().zip(&q) {
                *ri -= alpha * qi;
            }
            s = self.linear_t(&r);
            let gamma_next = dot(&s, &s);
            rel = gamma_next.sqrt() / target;
            if rel <= self.tolerance {
                return Ok((StyleLatent::new(self.layer_count(), x)?, noise));
            }
            let beta = gamma_next / gamma;
            gamma = gamma_next;
            for (pi, si) in p.iter_mut().zip(&s) {
                *pi = si + beta * *pi;
            }
        }
        Err(Error::Convergence { iterations: self.max_iterations, residual: rel })
    }

    fn reconstruction_bound(&self) -> f64 {
        1e-4
    }
}
