//! Miniature diffusion testbed.
//!
//! Generations are feature vectors in `ℝ^d_feat` standing in for images. The
//! denoiser is a four-matrix tanh MLP
//!
//! ```text
//! [x ; emb(σ) ; cond] → d_hidden → d_hidden → d_hidden → d_feat
//! ```
//!
//! that predicts the clean sample from a noised one. The two square
//! `d_hidden × d_hidden` matrices accept low-rank adapters through
//! [`fused_apply`](crate::lowrank::fused_apply), so an empty or all-zero update
//! set reproduces the bare network bit for bit.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{self, DenseMatrix, WeightedUpdateSet};
use crate::seed;

/// Width of the noise-level embedding `(σ, σ², sin 2πσ, cos 2πσ)`.
pub const SIGMA_EMBED_DIM: usize = 4;

/// Indices of the layers that accept adapters.
pub const ADAPTED_LAYERS: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_feat: usize,
    pub d_hidden: usize,
    pub d_cond: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d_feat: 16, d_hidden: 64, d_cond: 16 }
    }
}

impl Dims {
    pub fn d_input(&self) -> usize {
        self.d_feat + SIGMA_EMBED_DIM + self.d_cond
    }

    /// `(rows, cols)` of each weight matrix, first layer first.
    pub fn layer_shapes(&self) -> [(usize, usize); 4] {
        [
            (self.d_hidden, self.d_input()),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_feat, self.d_hidden),
        ]
    }
}

/// Identity distribution of one character: references are drawn as
/// `anchor + offset_j + spread·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterDistribution {
    pub character_id: String,
    anchor: Vec<f64>,
    spread: f64,
    offsets: Vec<Vec<f64>>,
}

impl CharacterDistribution {
    /// The anchor is rescaled to unit norm.
    pub fn new(character_id: impl Into<String>, anchor: Vec<f64>, spread: f64) -> Result<Self> {
        let norm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::invalid("anchor must be a finite non-zero vector"));
        }
        if !(spread.is_finite() && spread >= 0.0) {
            return Err(Error::invalid("spread must be finite and non-negative"));
        }
        Ok(Self {
            character_id: character_id.into(),
            anchor: anchor.iter().map(|v| v / norm).collect(),
            spread,
            offsets: Vec::new(),
        })
    }

    /// Cycle references through fixed offsets (poses, framings).
    pub fn with_offsets(mut self, offsets: Vec<Vec<f64>>) -> Result<Self> {
        if offsets.iter().any(|o| o.len() != self.anchor.len()) {
            return Err(Error::invalid("offset dimension does not match the anchor"));
        }
        self.offsets = offsets;
        Ok(self)
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }
}

/// A generated (or reference) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    pub scene_index: usize,
    pub characters_present: Vec<String>,
}

impl FeatureFrame {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, scene_index: 0, characters_present: Vec::new() }
    }
}

/// `k` references `anchor + offset + spread·ε`, reproducible from `seed`.
pub fn sample_reference_set(dist: &CharacterDistribution, k: usize, seed: u64) -> Vec<FeatureFrame> {
    let mut rng = seed::rng(seed);
    (0..k)
        .map(|i| {
            let offset = (!dist.offsets.is_empty()).then(|| &dist.offsets[i % dist.offsets.len()]);
            let values = dist
                .anchor
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    a + offset.map_or(0.0, |o| o[j]) + dist.spread * eps
                })
                .collect();
            FeatureFrame {
                values,
                scene_index: i,
                characters_present: vec![dist.character_id.clone()],
            }
        })
        .collect()
}

/// `y + σ·ε`, `ε ~ N(0, I)` drawn from `seed`.
pub fn forward_noise(y: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise level {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    let mut rng = seed::rng(seed);
    Ok(y.iter()
        .map(|v| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            v + sigma * eps
        })
        .collect())
}

pub fn sigma_embedding(sigma: f64) -> [f64; SIGMA_EMBED_DIM] {
    let phase = 2.0 * std::f64::consts::PI * sigma;
    [sigma, sigma * sigma, phase.sin(), phase.cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Frozen denoiser parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub dims: Dims,
    pub layers: Vec<Layer>,
}

impl BackboneParams {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        if dims.d_feat == 0 || dims.d_hidden == 0 || dims.d_cond == 0 {
            return Err(Error::invalid("backbone dimensions must be positive"));
        }
        let mut rng = seed::rng(seed);
        let layers = dims
            .layer_shapes()
            .iter()
            .map(|&(rows, cols)| {
                let std = 1.0 / (cols as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                Ok(Layer { weight: DenseMatrix::new(rows, cols, data)?, bias: vec![0.0; rows] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, layers })
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.dims.layer_shapes();
        if self.layers.len() != shapes.len() {
            return Err(Error::invalid(format!("expected {} layers, got {}", shapes.len(), self.layers.len())));
        }
        for (i, (layer, &shape)) in self.layers.iter().zip(&shapes).enumerate() {
            if layer.weight.shape() != shape || layer.bias.len() != shape.0 {
                return Err(Error::invalid(format!("layer {i} does not have shape {shape:?}")));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has a non-finite bias")));
            }
        }
        Ok(())
    }

    /// Target shape `(d_out, d_in)` of each adapted layer.
    pub fn adapted_shapes(&self) -> Vec<(usize, usize)> {
        ADAPTED_LAYERS.iter().map(|&l| self.layers[l].weight.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Copy with each adapted layer replaced by its fused weight `W*`.
    /// An empty slice returns an unchanged copy.
    pub fn merged(&self, updates: &[WeightedUpdateSet]) -> Result<BackboneParams> {
        check_updates(self, updates)?;
        let mut out = self.clone();
        for (set, &l) in updates.iter().zip(ADAPTED_LAYERS.iter()) {
            if !set.is_empty() {
                out.layers[l].weight = lowrank::fuse(&self.layers[l].weight, set)?;
            }
        }
        Ok(out)
    }

    /// Stable 64-bit digest of every parameter bit pattern.
    pub fn digest(&self) -> u64 {
        let mut h = seed::tag("backbone");
        let mut feed = |v: u64| h = seed::mix64(h ^ v);
        for l in &self.layers {
            feed(l.weight.rows() as u64);
            feed(l.weight.cols() as u64);
            l.weight.data().iter().for_each(|v| feed(v.to_bits()));
            l.bias.iter().for_each(|v| feed(v.to_bits()));
        }
        h
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Input vector of each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Post-activation of each hidden layer (tanh outputs).
    pub activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

fn check_updates(params: &BackboneParams, updates: &[WeightedUpdateSet]) -> Result<()> {
    if !updates.is_empty() && updates.len() != ADAPTED_LAYERS.len() {
        return Err(Error::invalid(format!(
            "expected {} per-layer update sets (or none), got {}",
            ADAPTED_LAYERS.len(),
            updates.len()
        )));
    }
    let _ = params;
    Ok(())
}

fn updates_for(layer: usize, updates: &[WeightedUpdateSet]) -> Option<&WeightedUpdateSet> {
    if updates.is_empty() {
        return None;
    }
    ADAPTED_LAYERS.iter().position(|&l| l == layer).map(|i| &updates[i])
}

pub(crate) fn assemble_input(params: &BackboneParams, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
    let d = &params.dims;
    if x.len() != d.d_feat {
        return Err(Error::invalid(format!("x has length {}, expected {}", x.len(), d.d_feat)));
    }
    if cond.len() != d.d_cond {
        return Err(Error::invalid(format!("cond has length {}, expected {}", cond.len(), d.d_cond)));
    }
    let mut input = Vec::with_capacity(d.d_input());
    input.extend_from_slice(x);
    input.extend_from_slice(&sigma_embedding(sigma));
    input.extend_from_slice(cond);
    Ok(input)
}

pub(crate) fn forward_trace(
    params: &BackboneParams,
    updates: &[WeightedUpdateSet],
    x: &[f64],
    sigma: f64,
    cond: &[f64],
) -> Result<Trace> {
    check_updates(params, updates)?;
    let mut h = assemble_input(params, x, sigma, cond)?;
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::with_capacity(last);
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = match updates_for(i, updates) {
            Some(set) => lowrank::fused_apply(&layer.weight, set, &h)?,
            None => layer.weight.matvec(&h)?,
        };
        for (zi, b) in z.iter_mut().zip(&layer.bias) {
            *zi += b;
        }
        inputs.push(h);
        if i < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
            activations.push(z.clone());
        }
        h = z;
    }
    Ok(Trace { inputs, activations, output: h })
}

/// Gradient of the loss with respect to each layer's pre-activation, given
/// `d_output = ∂L/∂output`. Adapters are included in the backward pass.
pub(crate) fn backward_deltas(
    params: &BackboneParams,
    updates: &[WeightedUpdateSet],
    trace: &Trace,
    d_output: &[f64],
) -> Vec<Vec<f64>> {
    let n = params.layers.len();
    let mut deltas = vec![Vec::new(); n];
    deltas[n - 1] = d_output.to_vec();
    for i in (1..n).rev() {
        let layer = &params.layers[i];
        let delta = &deltas[i];
        let mut back = layer.weight.tmatvec_unchecked(delta);
        if let Some(set) = updates_for(i, updates) {
            for e in set.entries() {
                let w = e.weight * set.scale();
                if w == 0.0 {
                    continue;
                }
                let bt = e.update.b_factor().tmatvec_unchecked(delta);
                let at = e.update.a_factor().tmatvec_unchecked(&bt);
                for (b, v) in back.iter_mut().zip(at) {
                    *b += w * v;
                }
            }
        }
        let act = &trace.activations[i - 1];
        deltas[i - 1] = back.iter().zip(act).map(|(g, a)| g * (1.0 - a * a)).collect();
    }
    deltas
}

/// Predict the clean sample from `x` at noise level `sigma` under `cond`,
/// with per-layer adapter sets (one per entry of [`ADAPTED_LAYERS`], or an
/// empty slice for the bare backbone).
pub fn denoise(
    params: &BackboneParams,
    updates: &[WeightedUpdateSet],
    x: &[f64],
    sigma: f64,
    cond: &[f64],
) -> Result<Vec<f64>> {
    Ok(forward_trace(params, updates, x, sigma, cond)?.output)
}

/// Descending noise levels visited by the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one level"));
        }
        if levels.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::invalid("noise levels must lie in (0, 1]"));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("noise levels must be strictly decreasing"));
        }
        Ok(Self { levels })
    }

    /// `K/K, (K-1)/K, …, 1/K`.
    pub fn uniform(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        let k = num_steps as f64;
        Self::new((0..num_steps).map(|i| (num_steps - i) as f64 / k).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn num_steps(&self) -> usize {
        self.levels.len()
    }

    /// Relaxation step at level `i`: `1 − σ_{i+1}/σ_i`, with `σ_K = 0` after
    /// the last level, so the final step lands exactly on the prediction.
    pub fn step(&self, i: usize) -> f64 {
        let next = self.levels.get(i + 1).copied().unwrap_or(0.0);
        1.0 - next / self.levels[i]
    }
}

/// Deterministic sampler: start from seeded `N(0, I)` and relax
/// `x ← x + (denoise(x, σ_i) − x)·step_i` down the schedule.
pub fn sample(
    params: &BackboneParams,
    updates: &[WeightedUpdateSet],
    cond: &[f64],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<FeatureFrame> {
    sample_with(|x, sigma| denoise(params, updates, x, sigma, cond), params.dims.d_feat, schedule, seed)
}

/// The sampler loop over an arbitrary denoiser.
pub fn sample_with(
    mut denoiser: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
    d_feat: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<FeatureFrame> {
    let mut x = forward_noise(&vec![0.0; d_feat], 1.0, seed)?;
    for (i, &sigma) in schedule.levels().iter().enumerate() {
        let pred = denoiser(&x, sigma)?;
        if pred.len() != d_feat {
            return Err(Error::invalid("denoiser returned a vector of the wrong length"));
        }
        let step = schedule.step(i);
        if step == 1.0 {
            x = pred;
            continue;
        }
        for (xi, p) in x.iter_mut().zip(&pred) {
            *xi += (p - *xi) * step;
        }
    }
    Ok(FeatureFrame::new(x))
}
