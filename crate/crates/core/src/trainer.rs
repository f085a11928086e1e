//! Backbone pre-training and per-character adapter training.
//!
//! Both loops minimise the reconstruction loss
//!
//! ```text
//! E ‖denoise(y + σ·ε, σ, cond) − y‖²,   σ ~ U[0, 1]
//! ```
//!
//! with plain SGD and hand-written backpropagation. Adapter training only
//! touches the `B`, `A` factors; the backbone is borrowed immutably.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneParams, Dims, FeatureFrame, ADAPTED_LAYERS};
use crate::error::{Error, Result};
use crate::lowrank::{self, InitSpec, LowRankUpdate, WeightedUpdate, WeightedUpdateSet};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, steps: 2000, batch_size: 8, rank: 4, seed: 0, init: InitSpec::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        Ok(())
    }
}

/// Loss trace of one run. `losses[i]` is the mean batch loss before update `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub updates_applied: usize,
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// `step<TAB>loss` lines.
    pub fn to_trace_text(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i}\t{l:.9e}\n"))
            .collect()
    }
}

/// One noised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: Vec<f64>,
    pub sigma: f64,
    pub target: Vec<f64>,
}

fn draw_pair(rng: &mut impl Rng, target: &[f64], noise_seed: u64) -> Result<TrainingPair> {
    let sigma: f64 = rng.gen_range(0.0..1.0);
    let x = backbone::forward_noise(target, sigma, noise_seed)?;
    Ok(TrainingPair { x, sigma, target: target.to_vec() })
}

/// Noised pairs drawn from `targets` the same way the training loops draw them.
pub fn make_pairs(targets: &[Vec<f64>], count: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    if targets.is_empty() {
        return Err(Error::invalid("no targets to draw pairs from"));
    }
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|i| {
            let t = &targets[rng.gen_range(0..targets.len())];
            draw_pair(&mut rng, t, seed::derive(seed, &[i as u64]))
        })
        .collect()
}

fn squared_error(out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    (loss, diff.into_iter().map(|d| 2.0 * d).collect())
}

// ---------------------------------------------------------------- backbone

/// Full-parameter gradient of the mean loss over `batch`.
fn backbone_grad(params: &BackboneParams, batch: &[(&[f64], TrainingPair)]) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut gw: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; l.weight.data().len()]).collect();
    let mut gb: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (cond, pair) in batch {
        let trace = backbone::forward_trace(params, &[], &pair.x, pair.sigma, cond)?;
        let (loss, d_out) = squared_error(&trace.output, &pair.target);
        total += loss * scale;
        let deltas = backbone::backward_deltas(params, &[], &trace, &d_out);
        for (l, delta) in deltas.iter().enumerate() {
            let input = &trace.inputs[l];
            let cols = input.len();
            for (r, &d) in delta.iter().enumerate() {
                let d = d * scale;
                gb[l][r] += d;
                for (g, h) in gw[l][r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *g += d * h;
                }
            }
        }
    }
    Ok((total, gw, gb))
}

/// Backbone parameters after training plus the loss trace.
#[derive(Debug, Clone)]
pub struct TrainedBackbone {
    pub params: BackboneParams,
    pub report: TrainReport,
}

/// Pre-train a backbone on `(cond, target)` pairs. Each step draws
/// `batch_size` pairs uniformly, noises the target at `σ ~ U[0,1]` and
/// takes one SGD step.
pub fn train_backbone(dims: Dims, data: &[(Vec<f64>, Vec<f64>)], config: &TrainConfig) -> Result<TrainedBackbone> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("backbone training data is empty"));
    }
    if let Some((c, t)) = data.iter().find(|(c, t)| c.len() != dims.d_cond || t.len() != dims.d_feat) {
        return Err(Error::invalid(format!(
            "training pair has cond length {} and target length {}, expected {} and {}",
            c.len(),
            t.len(),
            dims.d_cond,
            dims.d_feat
        )));
    }
    let mut params = BackboneParams::init(dims, seed::derive(config.seed, &[seed::tag("init")]))?;
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("batches")]));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|b| {
                let (cond, target) = &data[rng.gen_range(0..data.len())];
                let noise_seed = seed::derive(config.seed, &[step as u64, b as u64]);
                Ok((cond.as_slice(), draw_pair(&mut rng, target, noise_seed)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, gw, gb) = backbone_grad(&params, &batch)?;
        losses.push(loss);
        for (layer, (gw, gb)) in params.layers.iter_mut().zip(gw.iter().zip(&gb)) {
            for (w, g) in layer.weight.data_mut().iter_mut().zip(gw) {
                *w -= config.learning_rate * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= config.learning_rate * g;
            }
        }
    }
    params.validate()?;
    Ok(TrainedBackbone { params, report: TrainReport { updates_applied: config.steps, losses } })
}

// ----------------------------------------------------------------- adapter

/// Trained residual for one character, one [`LowRankUpdate`] per adapted
/// backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    pub character_id: String,
    pub layers: Vec<LowRankUpdate>,
    pub rank: usize,
    pub report: TrainReport,
}

impl AdapterWeights {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LowRankUpdate::param_count).sum()
    }

    /// Check that every layer matches the backbone's adapted shapes and rank.
    pub fn validate_against(&self, backbone: &BackboneParams) -> Result<()> {
        let shapes = backbone.adapted_shapes();
        if self.layers.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "adapter '{}' has {} layers, backbone adapts {}",
                self.character_id,
                self.layers.len(),
                shapes.len()
            )));
        }
        for (u, &(rows, cols)) in self.layers.iter().zip(&shapes) {
            if (u.d_out(), u.d_in()) != (rows, cols) || u.rank() != self.rank {
                return Err(Error::invalid(format!(
                    "adapter '{}' layer is {}x{} rank {}, expected {rows}x{cols} rank {}",
                    self.character_id,
                    u.d_out(),
                    u.d_in(),
                    u.rank(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Single-entry per-layer sets with the given fusion weight.
    pub fn as_updates(&self, weight: f64) -> Result<Vec<WeightedUpdateSet>> {
        self.layers
            .iter()
            .map(|u| {
                WeightedUpdateSet::new(vec![WeightedUpdate {
                    character_id: self.character_id.clone(),
                    update: u.clone().into(),
                    weight,
                }])
            })
            .collect()
    }

    /// Factors flattened as `B₀, A₀, B₁, A₁, …`.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_flat(&self, flat: &[f64]) -> Result<AdapterWeights> {
        let mut out = self.clone();
        unflatten_into(&mut out.layers, flat)?;
        Ok(out)
    }
}

fn flatten_layers(layers: &[LowRankUpdate]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|u| u.b_factor().data().iter().chain(u.a_factor().data()).copied())
        .collect()
}

fn unflatten_into(layers: &mut [LowRankUpdate], flat: &[f64]) -> Result<()> {
    let needed: usize = layers.iter().map(LowRankUpdate::param_count).sum();
    if flat.len() != needed {
        return Err(Error::invalid(format!("expected {needed} adapter values, got {}", flat.len())));
    }
    let mut off = 0;
    for u in layers.iter_mut() {
        let (b, a) = u.factors_mut();
        for m in [b, a] {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
    Ok(())
}

/// Mean loss over `pairs` and its gradient with respect to the flattened
/// adapter factors (order of [`AdapterWeights::flatten`]).
pub fn adapter_loss_and_grad(
    backbone: &BackboneParams,
    layers: &[LowRankUpdate],
    pairs: &[TrainingPair],
    cond: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let sets = layers
        .iter()
        .map(|u| {
            WeightedUpdateSet::new(vec![WeightedUpdate { character_id: String::new(), update: u.clone().into(), weight: 1.0 }])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
        layers.iter().map(|u| (vec![0.0; u.b_factor().data().len()], vec![0.0; u.a_factor().data().len()])).collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let trace = backbone::forward_trace(backbone, &sets, &pair.x, pair.sigma, cond)?;
        let (loss, d_out) = squared_error(&trace.output, &pair.target);
        total += loss * scale;
        let deltas = backbone::backward_deltas(backbone, &sets, &trace, &d_out);
        for ((u, (gb, ga)), &layer) in layers.iter().zip(grads.iter_mut()).zip(&ADAPTED_LAYERS) {
            let h = &trace.inputs[layer];
            let delta = &deltas[layer];
            let rank = u.rank();
            // ∂L/∂B = δ (A h)ᵀ
            let ah = u.a_factor().matvec_unchecked(h);
            for (r, &d) in delta.iter().enumerate() {
                for (g, v) in gb[r * rank..(r + 1) * rank].iter_mut().zip(&ah) {
                    *g += scale * d * v;
                }
            }
            // ∂L/∂A = (Bᵀ δ) hᵀ
            let btd = u.b_factor().tmatvec_unchecked(delta);
            let cols = h.len();
            for (k, &bk) in btd.iter().enumerate() {
                for (g, hv) in ga[k * cols..(k + 1) * cols].iter_mut().zip(h) {
                    *g += scale * bk * hv;
                }
            }
        }
    }
    let flat = grads.into_iter().flat_map(|(gb, ga)| gb.into_iter().chain(ga)).collect();
    Ok((total, flat))
}

/// Zero-initialised adapter layers for `backbone`.
pub fn init_adapter_layers(backbone: &BackboneParams, character_id: &str, config: &TrainConfig) -> Result<Vec<LowRankUpdate>> {
    backbone
        .adapted_shapes()
        .iter()
        .enumerate()
        .map(|(i, &(rows, cols))| {
            let s = seed::derive(config.seed, &[seed::tag(character_id), i as u64]);
            lowrank::make_lowrank(rows, cols, config.rank, &config.init, s)
        })
        .collect()
}

/// Train one character's adapter on its references with the backbone frozen.
pub fn train_adapter(
    backbone: &BackboneParams,
    character_id: &str,
    refs: &[FeatureFrame],
    cond: &[f64],
    config: &TrainConfig,
) -> Result<AdapterWeights> {
    config.validate()?;
    if refs.is_empty() {
        return Err(Error::invalid(format!("no references for '{character_id}'")));
    }
    if cond.len() != backbone.dims.d_cond {
        return Err(Error::invalid("condition vector has the wrong length"));
    }
    if let Some(r) = refs.iter().find(|r| r.values.len() != backbone.dims.d_feat) {
        return Err(Error::invalid(format!("reference of length {} for '{character_id}'", r.values.len())));
    }
    let mut layers = init_adapter_layers(backbone, character_id, config)?;
    let targets: Vec<&[f64]> = refs.iter().map(|r| r.values.as_slice()).collect();
    let run_seed = seed::derive(config.seed, &[seed::tag(character_id), seed::tag("adapter")]);
    let mut rng = seed::rng(run_seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|b| {
                let t = targets[rng.gen_range(0..targets.len())];
                draw_pair(&mut rng, t, seed::derive(run_seed, &[step as u64, b as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = adapter_loss_and_grad(backbone, &layers, &batch, cond)?;
        losses.push(loss);
        let mut flat = flatten_layers(&layers);
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("adapter training diverged at step {step} (parameter {i})")));
        }
        unflatten_into(&mut layers, &flat)?;
    }
    Ok(AdapterWeights {
        character_id: character_id.to_string(),
        layers,
        rank: config.rank,
        report: TrainReport { updates_applied: config.steps, losses },
    })
}

/// Mean reconstruction loss of the backbone (plus optional adapter sets) on
/// fixed pairs.
pub fn reconstruction_loss(
    backbone: &BackboneParams,
    updates: &[WeightedUpdateSet],
    pairs: &[TrainingPair],
    cond: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = backbone::denoise(backbone, updates, &p.x, p.sigma, cond)?;
        total += squared_error(&out, &p.target).0;
    }
    Ok(total / pairs.len().max(1) as f64)
}

// -------------------------------------------------------------- grad check

/// Maximum coordinate-wise relative error between the analytic gradient and
/// a central finite difference. Relative error is
/// `|g − ĝ| / max(|g|, |ĝ|, 1e-6)`.
pub fn grad_check(loss_and_grad: impl Fn(&[f64]) -> (f64, Vec<f64>), params: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let (_, analytic) = loss_and_grad(params);
    if analytic.len() != params.len() {
        return Err(Error::ContractViolation("gradient length differs from parameter length".into()));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = loss_and_grad(&probe).0;
        probe[i] = orig - epsilon;
        let minus = loss_and_grad(&probe).0;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
