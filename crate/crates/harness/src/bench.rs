//! Templated story benchmarks.

use charcom_core::promptc::{CharacterCard, SceneSpec};
use charcom_core::{seed, Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

const ACTIVITIES: &[&str] = &[
    "share a picnic",
    "build a sandcastle",
    "chase fireflies",
    "plant sunflower seeds",
    "read a bedtime story",
    "bake honey cookies",
    "fly a paper kite",
    "feed the ducks",
    "paint a mural",
    "search for a lost key",
    "cross a rope bridge",
    "sing around a campfire",
];

const PLACES: &[&str] = &[
    "in the orchard",
    "at the harbour",
    "beside the old windmill",
    "in a snowy forest",
    "on the rooftop garden",
    "at the village market",
    "under a starry sky",
    "by the river bank",
    "inside a cosy kitchen",
    "on a rainy street",
];

const STYLES: &[&str] = &[
    "storybook illustration, soft watercolor",
    "bright flat colors, bold outlines",
    "gentle pastel palette, warm light",
    "crayon texture, playful shapes",
    "ink and wash, muted tones",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub story_id: usize,
    pub scenes: Vec<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryBenchmark {
    pub seed: u64,
    pub stories: Vec<Story>,
}

impl StoryBenchmark {
    pub fn scene_count(&self) -> usize {
        self.stories.iter().map(|s| s.scenes.len()).sum()
    }
}

/// How many characters each scene shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CastSize {
    /// Uniform in `1..=max`.
    UpTo(usize),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub stories: usize,
    pub prompts_per_story: usize,
    pub cast: CastSize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { stories: 20, prompts_per_story: 5, cast: CastSize::UpTo(3) }
    }
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Stories of scenes whose casts always include the story's protagonist.
pub fn gen_benchmark(seed_value: u64, spec: BenchmarkSpec, pool: &[CharacterCard]) -> Result<StoryBenchmark> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("character pool is empty".into()));
    }
    let max_cast = match spec.cast {
        CastSize::UpTo(m) | CastSize::Fixed(m) => m,
    };
    if max_cast == 0 {
        return Err(Error::InvalidArgument("cast size must be at least 1".into()));
    }
    if pool.len() < max_cast {
        return Err(Error::InvalidArgument(format!("pool of {} cannot cast {max_cast} characters", pool.len())));
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::tag("benchmark")]));
    let stories = (0..spec.stories)
        .map(|story_id| {
            let protagonist = rng.gen_range(0..pool.len());
            let style = STYLES[rng.gen_range(0..STYLES.len())];
            let scenes = (0..spec.prompts_per_story)
                .map(|scene_index| {
                    let size = match spec.cast {
                        CastSize::Fixed(k) => k,
                        CastSize::UpTo(m) => rng.gen_range(1..=m),
                    };
                    let mut others: Vec<usize> = (0..pool.len()).filter(|&i| i != protagonist).collect();
                    others.shuffle(&mut rng);
                    let mut members: Vec<usize> = std::iter::once(protagonist).chain(others.into_iter().take(size - 1)).collect();
                    members.shuffle(&mut rng);
                    let names: Vec<&str> = members.iter().map(|&i| pool[i].trigger.as_str()).collect();
                    let action = format!(
                        "{} {} {}",
                        join_names(&names),
                        ACTIVITIES[rng.gen_range(0..ACTIVITIES.len())],
                        PLACES[rng.gen_range(0..PLACES.len())]
                    );
                    SceneSpec {
                        action,
                        style: style.to_string(),
                        cast: members.iter().map(|&i| pool[i].character_id.clone()).collect(),
                        scene_index,
                    }
                })
                .collect();
            Story { story_id, scenes }
        })
        .collect();
    Ok(StoryBenchmark { seed: seed_value, stories })
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    story_id: usize,
    #[serde(flatten)]
    scene: SceneSpec,
}

/// One JSON object per scene.
pub fn to_jsonl(bench: &StoryBenchmark) -> String {
    let mut out = String::new();
    for story in &bench.stories {
        for scene in &story.scenes {
            let line = SceneLine { story_id: story.story_id, scene: scene.clone() };
            out.push_str(&serde_json::to_string(&line).expect("scene serialises"));
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`to_jsonl`]; scenes are grouped by story id in file order.
pub fn from_jsonl(text: &str, seed_value: u64) -> Result<StoryBenchmark> {
    let mut stories: Vec<Story> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let parsed: SceneLine = serde_json::from_str(trimmed)
                .map_err(|e| Error::Format { offset, message: format!("benchmark line: {e}") })?;
            match stories.last_mut() {
                Some(s) if s.story_id == parsed.story_id => s.scenes.push(parsed.scene),
                _ => stories.push(Story { story_id: parsed.story_id, scenes: vec![parsed.scene] }),
            }
        }
        offset += line.len();
    }
    Ok(StoryBenchmark { seed: seed_value, stories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<CharacterCard> {
        (0..n)
            .map(|i| CharacterCard {
                character_id: format!("c{i}"),
                trigger: format!("Tok{i}"),
                attributes: "x".into(),
                references: vec![],
                anchor: vec![],
            })
            .collect()
    }

    #[test]
    fn default_counts() {
        let b = gen_benchmark(1, BenchmarkSpec::default(), &pool(4)).unwrap();
        assert_eq!(b.stories.len(), 20);
        assert_eq!(b.scene_count(), 100);
        assert!(b.stories.iter().all(|s| s.scenes.len() == 5));
    }

    #[test]
    fn deterministic() {
        let spec = BenchmarkSpec::default();
        assert_eq!(gen_benchmark(3, spec, &pool(4)).unwrap(), gen_benchmark(3, spec, &pool(4)).unwrap());
        assert_ne!(gen_benchmark(3, spec, &pool(4)).unwrap(), gen_benchmark(4, spec, &pool(4)).unwrap());
    }

    #[test]
    fn single_scene() {
        let spec = BenchmarkSpec { stories: 1, prompts_per_story: 1, cast: CastSize::UpTo(2) };
        assert_eq!(gen_benchmark(0, spec, &pool(4)).unwrap().scene_count(), 1);
    }

    #[test]
    fn casts_overlap_and_exist() {
        let p = pool(4);
        let b = gen_benchmark(7, BenchmarkSpec::default(), &p).unwrap();
        for story in &b.stories {
            let first = &story.scenes[0].cast;
            let shared: Vec<_> = first.iter().filter(|id| story.scenes.iter().all(|s| s.cast.contains(id))).collect();
            assert!(!shared.is_empty());
            for s in &story.scenes {
                assert!(s.cast.iter().all(|id| p.iter().any(|c| &c.character_id == id)));
                let mut unique = s.cast.clone();
                unique.sort();
                unique.dedup();
                assert_eq!(unique.len(), s.cast.len());
            }
        }
    }

    #[test]
    fn fixed_cast_size() {
        let spec = BenchmarkSpec { cast: CastSize::Fixed(4), ..BenchmarkSpec::default() };
        let b = gen_benchmark(2, spec, &pool(4)).unwrap();
        assert!(b.stories.iter().flat_map(|s| &s.scenes).all(|s| s.cast.len() == 4));
    }

    #[test]
    fn errors() {
        assert!(matches!(gen_benchmark(0, BenchmarkSpec::default(), &[]), Err(Error::InvalidArgument(_))));
        let spec = BenchmarkSpec { cast: CastSize::Fixed(5), ..BenchmarkSpec::default() };
        assert!(gen_benchmark(0, spec, &pool(4)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let b = gen_benchmark(9, BenchmarkSpec::default(), &pool(4)).unwrap();
        let text = to_jsonl(&b);
        assert_eq!(text.lines().count(), 100);
        assert_eq!(from_jsonl(&text, 9).unwrap(), b);
        match from_jsonl(&format!("{}{{oops\n", &text), 9) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, text.len()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
