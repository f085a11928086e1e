//! Prompt-relevance weighting and adapter selection.
//!
//! For a prompt `p` and a registered character `c` the relevance weight is
//!
//! ```text
//! w_c = logistic(α · cos(T(p), T(Φ_c)) + β · cos(V(p), R(I_c)))
//! ```
//!
//! where `T` is the semantic text encoder, `V` the text side of the visual
//! encoder and `R` the reference-set encoder. Characters with
//! `w_c ≥ threshold` are selected into a [`FusionPlan`]; the plan is turned
//! into per-layer [`WeightedUpdateSet`]s by [`plan_to_updates`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureFrame;
use crate::error::{Error, Result};
use crate::lowrank::{WeightedUpdate, WeightedUpdateSet};
use crate::promptc::{CharacterCard, ScenePrompt};
use crate::seed;
use crate::trainer::AdapterWeights;

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Signed feature hashing of lower-cased tokens into `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub dim: usize,
    /// Mixed into every token hash; different keys give independent encoders.
    pub key: u64,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        Self { dim: 256, key: 0x5EED_CAFE_F00D_0001 }
    }
}

/// Lower-cased alphanumeric runs.
pub fn embedding_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

impl TextEmbedder {
    pub fn with_key(dim: usize, key: u64) -> Self {
        Self { dim, key }
    }

    /// Un-normalised bag of signed token counts.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if self.dim == 0 {
            return v;
        }
        for token in embedding_tokens(text) {
            let h = seed::mix64(seed::tag(&token) ^ self.key);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }

    /// L2-normalised embedding; the zero vector for text without tokens.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        normalize(self.counts(text))
    }
}

pub fn embed_text(embedder: &TextEmbedder, text: &str) -> Vec<f64> {
    embedder.embed(text)
}

/// Reference-set encoder: each frame is zero-padded or truncated to `dim`
/// and normalised; a set embeds as the normalised mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefEmbedder {
    pub dim: usize,
}

impl Default for RefEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl RefEmbedder {
    pub fn embed_frame(&self, frame: &FeatureFrame) -> Vec<f64> {
        let mut v: Vec<f64> = frame.values.iter().copied().take(self.dim).collect();
        v.resize(self.dim, 0.0);
        normalize(v)
    }

    pub fn embed_set(&self, frames: &[FeatureFrame]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for f in frames {
            for (a, v) in acc.iter_mut().zip(self.embed_frame(f)) {
                *a += v;
            }
        }
        normalize(acc)
    }
}

/// The two text encoders plus the reference encoder used for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub semantic: TextEmbedder,
    pub visual_text: TextEmbedder,
    pub reference: RefEmbedder,
}

impl Default for DualEncoder {
    fn default() -> Self {
        Self {
            semantic: TextEmbedder::default(),
            visual_text: TextEmbedder::with_key(256, 0x5EED_CAFE_F00D_0002),
            reference: RefEmbedder::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub weight_threshold: f64,
    /// Rescale selected weights so their sum does not exceed this; off by default.
    #[serde(default)]
    pub max_total_weight: Option<f64>,
}

impl Default for FusionCoefficients {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, weight_threshold: 0.6, max_total_weight: None }
    }
}

impl FusionCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight_threshold) {
            return Err(Error::invalid(format!("weight threshold {} outside [0, 1]", self.weight_threshold)));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::invalid("fusion coefficients must be finite"));
        }
        if let Some(cap) = self.max_total_weight {
            if !(cap > 0.0) {
                return Err(Error::invalid("weight cap must be positive"));
            }
        }
        Ok(())
    }
}

/// `logistic(α·cos_text + β·cos_ref)`.
pub fn relevance_from_cosines(cos_text: f64, cos_ref: f64, coeffs: &FusionCoefficients) -> f64 {
    logistic(coeffs.alpha * cos_text + coeffs.beta * cos_ref)
}

/// Pre-computed card-side embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CardEmbedding {
    pub character_id: String,
    pub attributes: Vec<f64>,
    pub references: Vec<f64>,
}

impl CardEmbedding {
    pub fn new(card: &CharacterCard, encoders: &DualEncoder) -> Result<Self> {
        if card.references.is_empty() {
            return Err(Error::invalid(format!("character '{}' has an empty reference set", card.character_id)));
        }
        Ok(Self {
            character_id: card.character_id.clone(),
            attributes: encoders.semantic.embed(&card.attributes),
            references: encoders.reference.embed_set(&card.references),
        })
    }
}

/// Both cosine terms of the weight formula for one prompt text.
pub fn relevance_cosines(prompt_text: &str, card: &CardEmbedding, encoders: &DualEncoder) -> (f64, f64) {
    let cos_text = cosine(&encoders.semantic.embed(prompt_text), &card.attributes);
    let cos_ref = cosine(&encoders.visual_text.embed(prompt_text), &card.references);
    (cos_text, cos_ref)
}

pub fn relevance_weight(
    prompt_text: &str,
    card: &CharacterCard,
    coeffs: &FusionCoefficients,
    encoders: &DualEncoder,
) -> Result<f64> {
    let emb = CardEmbedding::new(card, encoders)?;
    let (t, r) = relevance_cosines(prompt_text, &emb, encoders);
    Ok(relevance_from_cosines(t, r, coeffs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub character_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedEntry {
    pub character_id: String,
    pub weight: f64,
    pub reason: String,
}

/// Which adapters a prompt loads, and at what weight.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionPlan {
    pub prompt_id: String,
    pub selected: Vec<PlanEntry>,
    pub excluded: Vec<ExcludedEntry>,
}

impl FusionPlan {
    pub fn empty(prompt_id: impl Into<String>) -> Self {
        Self { prompt_id: prompt_id.into(), ..Self::default() }
    }

    /// Every registered character at weight 1.
    pub fn uniform(prompt_id: impl Into<String>, registry: &[CharacterCard]) -> Self {
        let mut selected: Vec<PlanEntry> =
            registry.iter().map(|c| PlanEntry { character_id: c.character_id.clone(), weight: 1.0 }).collect();
        selected.sort_by(|a, b| a.character_id.cmp(&b.character_id));
        Self { prompt_id: prompt_id.into(), selected, excluded: Vec::new() }
    }

    /// Keep only the highest-weight selected entry (ties broken by id).
    pub fn keep_strongest(mut self) -> Self {
        if self.selected.len() <= 1 {
            return self;
        }
        let best = self
            .selected
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.weight.total_cmp(&b.weight).then_with(|| b.character_id.cmp(&a.character_id)))
            .map(|(i, _)| i)
            .expect("non-empty");
        let keep = self.selected.remove(best);
        for e in self.selected.drain(..) {
            self.excluded.push(ExcludedEntry { character_id: e.character_id, weight: e.weight, reason: "not strongest".into() });
        }
        self.excluded.sort_by(|a, b| a.character_id.cmp(&b.character_id));
        self.selected = vec![keep];
        self
    }

    pub fn total_weight(&self) -> f64 {
        self.selected.iter().map(|e| e.weight).sum()
    }

    /// One line per character: `prompt_id  character  weight  status`.
    pub fn to_record(&self) -> String {
        let mut rows: Vec<(String, f64, String)> = self
            .selected
            .iter()
            .map(|e| (e.character_id.clone(), e.weight, "selected".to_string()))
            .chain(self.excluded.iter().map(|e| (e.character_id.clone(), e.weight, format!("excluded ({})", e.reason))))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows.into_iter().map(|(id, w, s)| format!("{}\t{id}\t{w:.6}\t{s}\n", self.prompt_id)).collect()
    }
}

/// Score every card against the prompt and keep those at or above the
/// threshold.
pub fn build_plan(
    prompt_id: &str,
    prompt: &ScenePrompt,
    cards: &[CardEmbedding],
    coeffs: &FusionCoefficients,
    encoders: &DualEncoder,
) -> Result<FusionPlan> {
    coeffs.validate()?;
    let semantic = encoders.semantic.embed(&prompt.text);
    let visual = encoders.visual_text.embed(&prompt.text);
    let mut plan = FusionPlan::empty(prompt_id);
    let mut ordered: Vec<&CardEmbedding> = cards.iter().collect();
    ordered.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    for card in ordered {
        let w = relevance_from_cosines(cosine(&semantic, &card.attributes), cosine(&visual, &card.references), coeffs);
        if w >= coeffs.weight_threshold {
            plan.selected.push(PlanEntry { character_id: card.character_id.clone(), weight: w });
        } else {
            plan.excluded.push(ExcludedEntry {
                character_id: card.character_id.clone(),
                weight: w,
                reason: format!("below threshold {}", coeffs.weight_threshold),
            });
        }
    }
    if let Some(cap) = coeffs.max_total_weight {
        let total = plan.total_weight();
        if total > cap {
            plan.selected.iter_mut().for_each(|e| e.weight *= cap / total);
        }
    }
    Ok(plan)
}

/// Convenience wrapper that embeds the registry on the fly.
pub fn build_plan_for_registry(
    prompt_id: &str,
    prompt: &ScenePrompt,
    registry: &[CharacterCard],
    coeffs: &FusionCoefficients,
    encoders: &DualEncoder,
) -> Result<FusionPlan> {
    let cards = registry.iter().map(|c| CardEmbedding::new(c, encoders)).collect::<Result<Vec<_>>>()?;
    build_plan(prompt_id, prompt, &cards, coeffs, encoders)
}

/// Per-layer update sets for a plan; empty when nothing is selected.
pub fn plan_to_updates(plan: &FusionPlan, adapters: &BTreeMap<String, AdapterWeights>) -> Result<Vec<WeightedUpdateSet>> {
    if plan.selected.is_empty() {
        return Ok(Vec::new());
    }
    let chosen = plan
        .selected
        .iter()
        .map(|e| {
            adapters
                .get(&e.character_id)
                .map(|a| (e, a))
                .ok_or_else(|| Error::NotFound(format!("no adapter stored for character '{}'", e.character_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = chosen[0].1.layers.len();
    if let Some((_, a)) = chosen.iter().find(|(_, a)| a.layers.len() != layers) {
        return Err(Error::invalid(format!("adapter '{}' has a different layer count", a.character_id)));
    }
    (0..layers)
        .map(|l| {
            WeightedUpdateSet::new(
                chosen
                    .iter()
                    .map(|(e, a)| WeightedUpdate {
                        character_id: e.character_id.clone(),
                        update: a.layers[l].clone().into(),
                        weight: e.weight,
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Prompt-to-condition encoder feeding the denoiser.
///
/// Each prompt segment is hashed into `d_cond` buckets and normalised; the
/// segments are summed with weight `position_decay^k` for the `k`-th segment
/// and the result normalised again. With `position_decay = 1` the encoding
/// ignores segment order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    pub text: TextEmbedder,
    pub position_decay: f64,
}

impl ConditionEncoder {
    pub fn new(d_cond: usize) -> Self {
        Self { text: TextEmbedder::with_key(d_cond, 0x5EED_CAFE_F00D_0003), position_decay: 1.0 }
    }

    pub fn d_cond(&self) -> usize {
        self.text.dim
    }

    pub fn encode(&self, prompt: &ScenePrompt) -> Vec<f64> {
        let mut acc = vec![0.0; self.text.dim];
        let mut w = 1.0;
        for seg in &prompt.segments {
            for (a, v) in acc.iter_mut().zip(self.text.embed(&seg.text)) {
                *a += w * v;
            }
            w *= self.position_decay;
        }
        normalize(acc)
    }

    /// Encode and store the result on the prompt.
    pub fn attach(&self, prompt: &mut ScenePrompt) -> Vec<f64> {
        let cond = self.encode(prompt);
        prompt.embedding = Some(cond.clone());
        cond
    }
}
