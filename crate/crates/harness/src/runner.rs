//! Running one method over a benchmark.

use std::fmt;
use std::time::Instant;

use charcom_core::backbone::{sample, FeatureFrame};
use charcom_core::fusion::{build_plan, plan_to_updates, CardEmbedding, FusionCoefficients, FusionPlan};
use charcom_core::metrics::{score_story, AnchorSubspaceEmbedder, MetricReport, PromptTargets, ProxyTemporalJudge};
use charcom_core::promptc::{compile, flat_prompt, scramble_order, SceneSpec, ScenePrompt};
use charcom_core::{seed, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{Story, StoryBenchmark};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    StaticAll,
    Charcom,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vanilla, Method::StaticAll, Method::Charcom];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::StaticAll => "static_all",
            Method::Charcom => "charcom",
        }
    }

    /// Accepts `static_all` and `static-all`.
    pub fn parse(s: &str) -> Result<Method> {
        match s.replace('-', "_").as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "static_all" => Ok(Method::StaticAll),
            "charcom" => Ok(Method::Charcom),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    /// Replaces the world's coefficients when set.
    pub coefficients: Option<FusionCoefficients>,
    pub flat_prompt: bool,
    pub random_order: bool,
    /// Merge only the strongest selected adapter per scene.
    pub no_composition: bool,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self { method, coefficients: None, flat_prompt: false, random_order: false, no_composition: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_composition && self.method != Method::Charcom {
            return Err(Error::InvalidArgument(format!("no_composition applies to charcom only, not {}", self.method)));
        }
        if self.flat_prompt && self.random_order {
            return Err(Error::InvalidArgument("a flat prompt has no character order to randomise".into()));
        }
        if let Some(c) = &self.coefficients {
            c.validate()?;
        }
        Ok(())
    }

    /// `charcom`, `charcom+flat_prompt`, ...
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        for (on, flag) in [(self.flat_prompt, "flat_prompt"), (self.random_order, "random_order"), (self.no_composition, "no_composition")] {
            if on {
                s.push('+');
                s.push_str(flag);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSeeds {
    pub world: u64,
    pub benchmark: u64,
    pub eval: u64,
}

/// Wall-clock cost of one scene, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneTiming {
    pub merge_ns: u64,
    pub sample_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: String,
    pub story_id: usize,
    pub prompts: Vec<String>,
    pub frames: Vec<FeatureFrame>,
    pub plans: Vec<FusionPlan>,
    pub report: MetricReport,
    pub seeds: RecordSeeds,
    pub timings: Vec<SceneTiming>,
}

/// Seed of the initial noise for one scene; shared by every method.
pub fn scene_seed(eval_seed: u64, story_id: usize, scene_index: usize) -> u64 {
    seed::derive(eval_seed, &[seed::tag("scene"), story_id as u64, scene_index as u64])
}

fn prompt_for(spec: &MethodSpec, scene: &SceneSpec, world: &World, order_seed: u64) -> Result<ScenePrompt> {
    if spec.flat_prompt {
        flat_prompt(scene, &world.registry)
    } else if spec.random_order {
        scramble_order(scene, &world.registry, order_seed)
    } else {
        compile(scene, &world.registry)
    }
}

/// The method's fusion plan for one prompt.
pub fn plan_for(spec: &MethodSpec, world: &World, cards: &[CardEmbedding], prompt_id: &str, prompt: &ScenePrompt) -> Result<FusionPlan> {
    Ok(match spec.method {
        Method::Vanilla => FusionPlan::empty(prompt_id),
        Method::StaticAll => FusionPlan::uniform(prompt_id, &world.registry),
        Method::Charcom => {
            let coeffs = spec.coefficients.unwrap_or(world.config.coefficients);
            let plan = build_plan(prompt_id, prompt, cards, &coeffs, &world.encoders)?;
            if spec.no_composition {
                plan.keep_strongest()
            } else {
                plan
            }
        }
    })
}

struct Scorer<'a> {
    embedder: &'a AnchorSubspaceEmbedder,
    targets: &'a PromptTargets,
}

fn run_story(
    spec: &MethodSpec,
    world: &World,
    cards: &[CardEmbedding],
    scorer: &Scorer<'_>,
    story: &Story,
    seeds: RecordSeeds,
    cast_size: Option<usize>,
) -> Result<ExperimentRecord> {
    let mut prompts = Vec::new();
    let mut frames = Vec::new();
    let mut plans = Vec::new();
    let mut timings = Vec::new();
    let mut scored_prompts = Vec::new();
    for scene in &story.scenes {
        let order_seed = seed::derive(seeds.eval, &[seed::tag("order"), story.story_id as u64, scene.scene_index as u64]);
        let prompt = prompt_for(spec, scene, world, order_seed)?;
        let cond = world.cond_encoder.encode(&prompt);
        let prompt_id = format!("s{}p{}", story.story_id, scene.scene_index);

        let t0 = Instant::now();
        let plan = plan_for(spec, world, cards, &prompt_id, &prompt)?;
        let updates = plan_to_updates(&plan, &world.adapters)?;
        let merged = world.backbone.merged(&updates)?;
        let merge_ns = t0.elapsed().as_nanos() as u64;

        let t1 = Instant::now();
        let mut frame = sample(&merged, &[], &cond, &world.schedule, scene_seed(seeds.eval, story.story_id, scene.scene_index))?;
        let sample_ns = t1.elapsed().as_nanos() as u64;

        frame.scene_index = scene.scene_index;
        let mut cast = scene.cast.clone();
        cast.sort();
        frame.characters_present = cast;
        prompts.push(prompt.text.clone());
        scored_prompts.push(compile(scene, &world.eval_registry)?);
        frames.push(frame);
        plans.push(plan);
        timings.push(SceneTiming { merge_ns, sample_ns });
    }
    let judge = ProxyTemporalJudge { embedder: scorer.embedder };
    let report = score_story(
        &spec.label(),
        cast_size,
        &frames,
        &scored_prompts,
        &world.eval_registry,
        scorer.embedder,
        scorer.targets,
        &judge,
    )?;
    Ok(ExperimentRecord { method: spec.label(), story_id: story.story_id, prompts, frames, plans, report, seeds, timings })
}

/// Run one method over every story; stories execute in parallel and the
/// result is in story order.
pub fn run_method(bench: &StoryBenchmark, spec: &MethodSpec, world: &World, eval_seed: u64, cast_size: Option<usize>) -> Result<Vec<ExperimentRecord>> {
    spec.validate()?;
    if spec.method != Method::Vanilla {
        for card in &world.registry {
            if !world.adapters.contains_key(&card.character_id) {
                return Err(Error::NotFound(format!("no adapter stored for character '{}'", card.character_id)));
            }
        }
    }
    let cards = world.card_embeddings()?;
    let embedder = world.identity_embedder()?;
    let targets = world.prompt_targets(&embedder)?;
    let scorer = Scorer { embedder: &embedder, targets: &targets };
    let seeds = RecordSeeds { world: world.config.seed, benchmark: bench.seed, eval: eval_seed };
    bench
        .stories
        .par_iter()
        .map(|story| run_story(spec, world, &cards, &scorer, story, seeds, cast_size))
        .collect()
}
