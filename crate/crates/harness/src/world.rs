//! A trained testbed: frozen backbone, character registry and one adapter
//! per character.

use std::collections::BTreeMap;

use charcom_core::backbone::{sample_reference_set, BackboneParams, CharacterDistribution, Dims, FeatureFrame, NoiseSchedule};
use charcom_core::fusion::{CardEmbedding, ConditionEncoder, DualEncoder, FusionCoefficients};
use charcom_core::metrics::{AnchorSubspaceEmbedder, PromptTargets};
use charcom_core::promptc::{compile, CharacterCard, SceneSpec};
use charcom_core::trainer::{train_adapter, train_backbone, AdapterWeights, TrainConfig, TrainReport, TrainedBackbone};
use charcom_core::{seed, Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Character pool: `(id, trigger, attributes)`.
pub const CHARACTER_POOL: &[(&str, &str, &str)] = &[
    (
        "amara",
        "Amarazeph",
        "cheerful six-year-old girl, curly black hair in two puffs, round tortoiseshell glasses, mustard raincoat, \
         striped green leggings, red rubber boots, gap-toothed grin, bee-shaped backpack",
    ),
    (
        "bodo",
        "Bodovrin",
        "tall grandfather, silver moustache, bushy white eyebrows, brown flat cap, tweed waistcoat, cream collared shirt, \
         corduroy trousers, carved walking stick, pocket watch",
    ),
    (
        "coco",
        "Cocolune",
        "plump orange tabby cat, tiny blue bowtie, white paws, crooked left ear, long whiskers, emerald eyes, \
         fluffy striped tail, pink nose",
    ),
    (
        "dina",
        "Dinabrel",
        "young mother, long auburn braid, freckles, teal headscarf, denim overalls, lavender sweater, canvas sneakers, \
         wicker basket, silver hoop earrings, warm smile",
    ),
    (
        "emil",
        "Emilquor",
        "lanky teenage boy, spiky blond hair, skateboard under one arm, maroon hoodie, cargo shorts, mismatched socks, \
         headphones, scraped knees",
    ),
    (
        "fara",
        "Faradune",
        "small grey donkey, woven saddle blanket, crimson tassels, daisy behind one ear, brass bell, fuzzy mane, \
         sleepy eyelids",
    ),
];

/// Everything needed to build a [`World`] deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub characters: usize,
    pub references: usize,
    /// Per-coordinate reference noise.
    pub spread: f64,
    /// Number of fixed per-character pose offsets references cycle through.
    pub poses: usize,
    pub pose_scale: f64,
    /// Generic identities in the backbone pre-training pool.
    pub generic_identities: usize,
    pub samples_per_generic: usize,
    pub backbone: TrainConfig,
    pub adapter: TrainConfig,
    pub sampler_steps: usize,
    pub coefficients: FusionCoefficients,
    pub position_decay: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            characters: 4,
            references: 30,
            spread: 0.1,
            poses: 3,
            pose_scale: 0.3,
            generic_identities: 96,
            samples_per_generic: 4,
            backbone: TrainConfig { learning_rate: 2e-2, steps: 3000, ..TrainConfig::default() },
            adapter: TrainConfig::default(),
            sampler_steps: 10,
            coefficients: FusionCoefficients::default(),
            position_decay: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.characters == 0 || self.characters > CHARACTER_POOL.len() {
            return Err(Error::InvalidArgument(format!(
                "character count {} outside 1..={}",
                self.characters,
                CHARACTER_POOL.len()
            )));
        }
        if self.references == 0 {
            return Err(Error::InvalidArgument("at least one reference per character is required".into()));
        }
        if self.generic_identities == 0 || self.samples_per_generic == 0 {
            return Err(Error::InvalidArgument("the pre-training pool is empty".into()));
        }
        if !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return Err(Error::InvalidArgument("position decay must be in (0, 1]".into()));
        }
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.coefficients.validate()
    }
}

/// A trained backbone with its registered characters.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub backbone: BackboneParams,
    pub backbone_report: TrainReport,
    pub distributions: Vec<CharacterDistribution>,
    /// Cards used for fusion; references are the adapter training set.
    pub registry: Vec<CharacterCard>,
    /// Cards used for scoring; always carry the full reference set.
    pub eval_registry: Vec<CharacterCard>,
    pub adapters: BTreeMap<String, AdapterWeights>,
    pub encoders: DualEncoder,
    pub cond_encoder: ConditionEncoder,
    pub schedule: NoiseSchedule,
}

fn gaussian_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "pe", "du", "ra", "zo", "fi", "gu"];
    (0..rng.gen_range(2..4)).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

/// Characters drawn from [`CHARACTER_POOL`] with seeded anchors and poses.
pub fn make_distributions(config: &WorldConfig, dims: Dims) -> Result<Vec<CharacterDistribution>> {
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("anchors")]));
    CHARACTER_POOL[..config.characters]
        .iter()
        .map(|(id, _, _)| {
            let anchor = gaussian_unit(&mut rng, dims.d_feat);
            let offsets = (0..config.poses)
                .map(|_| gaussian_unit(&mut rng, dims.d_feat).into_iter().map(|v| v * config.pose_scale).collect())
                .collect();
            CharacterDistribution::new(*id, anchor, config.spread)?.with_offsets(offsets)
        })
        .collect()
}

fn cards(distributions: &[CharacterDistribution], refs: &[Vec<FeatureFrame>]) -> Vec<CharacterCard> {
    distributions
        .iter()
        .zip(refs)
        .zip(CHARACTER_POOL)
        .map(|((d, r), (id, trigger, attributes))| CharacterCard {
            character_id: id.to_string(),
            trigger: trigger.to_string(),
            attributes: attributes.to_string(),
            references: r.clone(),
            anchor: d.anchor().to_vec(),
        })
        .collect()
}

/// Generic `(cond, target)` pairs: captions of pseudo-words paired with
/// identities unrelated to any registered character.
pub fn pretraining_pool(config: &WorldConfig, dims: Dims, cond_encoder: &ConditionEncoder) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("generic")]));
    let mut data = Vec::new();
    for g in 0..config.generic_identities {
        let identity = gaussian_unit(&mut rng, dims.d_feat);
        let caption: Vec<String> = (0..rng.gen_range(6..14)).map(|_| pseudo_word(&mut rng)).collect();
        let scene = SceneSpec { action: caption.join(" "), style: String::new(), cast: vec![], scene_index: g };
        let cond = cond_encoder.encode(&compile(&scene, &[])?);
        let dist = CharacterDistribution::new(format!("generic{g}"), identity, config.spread)?;
        for frame in sample_reference_set(&dist, config.samples_per_generic, rng.gen()) {
            data.push((cond.clone(), frame.values));
        }
    }
    Ok(data)
}

/// Condition vector an adapter is trained under: the character's solo prompt.
pub fn solo_condition(card_id: &str, registry: &[CharacterCard], cond_encoder: &ConditionEncoder) -> Result<Vec<f64>> {
    let scene = SceneSpec { action: String::new(), style: String::new(), cast: vec![card_id.to_string()], scene_index: 0 };
    Ok(cond_encoder.encode(&compile(&scene, registry)?))
}

fn reference_sets(config: &WorldConfig, distributions: &[CharacterDistribution], k: usize) -> Vec<Vec<FeatureFrame>> {
    distributions
        .iter()
        .map(|d| sample_reference_set(d, k, seed::derive(config.seed, &[seed::tag("refs"), seed::tag(&d.character_id)])))
        .collect()
}

/// Train one adapter per card, in parallel.
pub fn train_adapters(
    backbone: &BackboneParams,
    registry: &[CharacterCard],
    cond_encoder: &ConditionEncoder,
    config: &TrainConfig,
) -> Result<BTreeMap<String, AdapterWeights>> {
    registry
        .par_iter()
        .map(|card| {
            let cond = solo_condition(&card.character_id, registry, cond_encoder)?;
            let adapter = train_adapter(backbone, &card.character_id, &card.references, &cond, config)?;
            Ok((card.character_id.clone(), adapter))
        })
        .collect()
}

/// Pre-train the world's backbone on its captioned pool.
pub fn pretrain_backbone(config: &WorldConfig) -> Result<TrainedBackbone> {
    config.validate()?;
    let dims = Dims::default();
    let cond_encoder = ConditionEncoder { position_decay: config.position_decay, ..ConditionEncoder::new(dims.d_cond) };
    let pool = pretraining_pool(config, dims, &cond_encoder)?;
    train_backbone(dims, &pool, &TrainConfig { seed: seed::derive(config.seed, &[seed::tag("backbone")]), ..config.backbone.clone() })
}

impl World {
    pub fn build(config: WorldConfig) -> Result<World> {
        let trained = pretrain_backbone(&config)?;
        Self::with_backbone(config, trained.params, trained.report)
    }

    /// Register characters and train adapters on an existing backbone.
    pub fn with_backbone(config: WorldConfig, backbone: BackboneParams, backbone_report: TrainReport) -> Result<World> {
        config.validate()?;
        let dims = backbone.dims;
        let cond_encoder = ConditionEncoder { position_decay: config.position_decay, ..ConditionEncoder::new(dims.d_cond) };
        let distributions = make_distributions(&config, dims)?;
        let full_refs = reference_sets(&config, &distributions, config.references.max(30));
        let eval_registry = cards(&distributions, &full_refs);
        let train_refs: Vec<Vec<FeatureFrame>> = full_refs.iter().map(|r| r[..config.references].to_vec()).collect();
        let registry = cards(&distributions, &train_refs);
        let adapter_config = TrainConfig { seed: seed::derive(config.seed, &[seed::tag("adapter")]), ..config.adapter.clone() };
        let adapters = train_adapters(&backbone, &registry, &cond_encoder, &adapter_config)?;
        let schedule = NoiseSchedule::uniform(config.sampler_steps)?;
        Ok(World {
            config,
            backbone,
            backbone_report,
            distributions,
            registry,
            eval_registry,
            adapters,
            encoders: DualEncoder::default(),
            cond_encoder,
            schedule,
        })
    }

    /// A world assembled from stored artifacts. The registry serves both for
    /// fusion and for scoring.
    pub fn from_parts(
        config: WorldConfig,
        backbone: BackboneParams,
        registry: Vec<CharacterCard>,
        adapters: BTreeMap<String, AdapterWeights>,
    ) -> Result<World> {
        config.validate()?;
        backbone.validate()?;
        for a in adapters.values() {
            a.validate_against(&backbone)?;
        }
        let cond_encoder = ConditionEncoder { position_decay: config.position_decay, ..ConditionEncoder::new(backbone.dims.d_cond) };
        Ok(World {
            schedule: NoiseSchedule::uniform(config.sampler_steps)?,
            config,
            backbone,
            backbone_report: TrainReport { updates_applied: 0, losses: Vec::new() },
            distributions: Vec::new(),
            eval_registry: registry.clone(),
            registry,
            adapters,
            encoders: DualEncoder::default(),
            cond_encoder,
        })
    }

    /// Same backbone and characters, adapters retrained on the first `k`
    /// references of each character.
    pub fn with_reference_count(&self, k: usize) -> Result<World> {
        let config = WorldConfig { references: k, ..self.config.clone() };
        Self::with_backbone(config, self.backbone.clone(), self.backbone_report.clone())
    }

    pub fn character_ids(&self) -> Vec<String> {
        self.registry.iter().map(|c| c.character_id.clone()).collect()
    }

    pub fn card_embeddings(&self) -> Result<Vec<CardEmbedding>> {
        self.registry.iter().map(|c| CardEmbedding::new(c, &self.encoders)).collect()
    }

    pub fn identity_embedder(&self) -> Result<AnchorSubspaceEmbedder> {
        AnchorSubspaceEmbedder::from_registry(&self.eval_registry)
    }

    pub fn prompt_targets(&self, embedder: &AnchorSubspaceEmbedder) -> Result<PromptTargets> {
        PromptTargets::new(&self.eval_registry, embedder)
    }
}
