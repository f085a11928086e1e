//! Structured prompt compiler.
//!
//! A compiled prompt follows the hierarchical template
//! `trigger + Γ(attributes)` per character, then the action, then the style:
//!
//! ```text
//! <τ_a>: <Γ(Φ_a)>; <τ_b>: <Γ(Φ_b)>. <action>. <style>
//! ```
//!
//! Characters are emitted in ascending id order regardless of how the cast or
//! the registry is ordered. `Γ` truncates attribute text to at most 25 tokens.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureFrame;
use crate::error::{Error, Result};
use crate::seed;

pub const CHARACTER_DELIMITER: &str = "; ";
pub const SECTION_DELIMITER: &str = ". ";
pub const TRIGGER_DELIMITER: &str = ": ";

/// A registered character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterCard {
    pub character_id: String,
    /// Trigger token τ_c, e.g. `"Shakoo Maku Lulu"`.
    pub trigger: String,
    /// Attribute description Φ_c.
    pub attributes: String,
    /// Reference set I_c.
    pub references: Vec<FeatureFrame>,
    pub anchor: Vec<f64>,
}

/// One scene of a story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub action: String,
    pub style: String,
    pub cast: Vec<String>,
    pub scene_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    Character { character_id: String, attribute_tokens: usize },
    Action,
    Style,
    /// Unstructured stream (ablation).
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub kind: SegmentKind,
    pub text: String,
    pub token_count: usize,
}

/// Compiled prompt text with its segments in template order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrompt {
    pub text: String,
    pub segments: Vec<PromptSegment>,
    /// Cast in emission order.
    pub cast: Vec<String>,
    /// Conditioning embedding, filled in by the fusion module.
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

/// Token budget of the attribute compressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// Advisory lower bound; shorter inputs pass through unchanged.
    pub min: usize,
    pub max: usize,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self { min: 15, max: 25 }
    }
}

fn strip_punctuation(word: &str) -> String {
    word.chars().filter(|c| c.is_alphanumeric()).collect()
}

/// Tokens: whitespace-separated runs with punctuation removed; empty runs
/// are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(strip_punctuation).filter(|t| !t.is_empty()).collect()
}

pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// Γ: keep the text verbatim when it fits `budget.max` tokens, otherwise
/// keep the leading words (earlier sentences first) up to the budget.
pub fn compress_attributes(attributes: &str, budget: TokenBudget) -> Result<String> {
    if budget.max == 0 {
        return Err(Error::invalid("token budget must be positive"));
    }
    let total = token_count(attributes);
    if total == 0 {
        return Err(Error::invalid("attribute text is empty"));
    }
    if total <= budget.max {
        return Ok(attributes.to_string());
    }
    let mut kept = Vec::new();
    let mut used = 0;
    for word in attributes.split_whitespace() {
        let n = usize::from(!strip_punctuation(word).is_empty());
        if used + n > budget.max {
            break;
        }
        used += n;
        kept.push(word);
    }
    let joined = kept.join(" ");
    Ok(joined.trim_end_matches([',', ';', ':']).to_string())
}

fn trim_sentence(text: &str) -> &str {
    text.trim().trim_end_matches('.').trim_end()
}

/// Validate a registry: unique ids and triggers, non-empty texts.
pub fn validate_registry(registry: &[CharacterCard]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut triggers = BTreeSet::new();
    for card in registry {
        if card.trigger.trim().is_empty() {
            return Err(Error::invalid(format!("character '{}' has an empty trigger", card.character_id)));
        }
        if token_count(&card.attributes) == 0 {
            return Err(Error::invalid(format!("character '{}' has empty attributes", card.character_id)));
        }
        if !ids.insert(card.character_id.as_str()) {
            return Err(Error::invalid(format!("duplicate character id '{}'", card.character_id)));
        }
        if !triggers.insert(card.trigger.as_str()) {
            return Err(Error::invalid(format!("duplicate trigger '{}'", card.trigger)));
        }
    }
    Ok(())
}

pub fn find_card<'a>(registry: &'a [CharacterCard], id: &str) -> Result<&'a CharacterCard> {
    registry
        .iter()
        .find(|c| c.character_id == id)
        .ok_or_else(|| Error::NotFound(format!("character '{id}' is not registered")))
}

fn resolve_cast<'a>(scene: &SceneSpec, registry: &'a [CharacterCard]) -> Result<Vec<&'a CharacterCard>> {
    let mut seen = BTreeSet::new();
    scene
        .cast
        .iter()
        .map(|id| {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("character '{id}' appears twice in the cast")));
            }
            find_card(registry, id)
        })
        .collect()
}

fn assemble(cards: &[&CharacterCard], scene: &SceneSpec, budget: TokenBudget) -> Result<ScenePrompt> {
    let mut segments = Vec::new();
    for card in cards {
        let attrs = compress_attributes(&card.attributes, budget)?;
        let attrs = trim_sentence(&attrs);
        let text = format!("{}{TRIGGER_DELIMITER}{attrs}", card.trigger.trim());
        segments.push(PromptSegment {
            kind: SegmentKind::Character {
                character_id: card.character_id.clone(),
                attribute_tokens: token_count(attrs),
            },
            token_count: token_count(&text),
            text,
        });
    }
    for (kind, raw) in [(SegmentKind::Action, &scene.action), (SegmentKind::Style, &scene.style)] {
        let text = trim_sentence(raw);
        if !text.is_empty() {
            segments.push(PromptSegment { kind, token_count: token_count(text), text: text.to_string() });
        }
    }
    let characters = segments
        .iter()
        .filter(|s| matches!(s.kind, SegmentKind::Character { .. }))
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(CHARACTER_DELIMITER);
    let rest = segments
        .iter()
        .filter(|s| !matches!(s.kind, SegmentKind::Character { .. }))
        .map(|s| s.text.as_str());
    let text = std::iter::once(characters.as_str())
        .filter(|s| !s.is_empty())
        .chain(rest)
        .collect::<Vec<_>>()
        .join(SECTION_DELIMITER);
    Ok(ScenePrompt {
        text,
        segments,
        cast: cards.iter().map(|c| c.character_id.clone()).collect(),
        embedding: None,
    })
}

/// Compile a scene with the canonical (ascending id) character order.
pub fn compile(scene: &SceneSpec, registry: &[CharacterCard]) -> Result<ScenePrompt> {
    compile_with_budget(scene, registry, TokenBudget::default())
}

pub fn compile_with_budget(scene: &SceneSpec, registry: &[CharacterCard], budget: TokenBudget) -> Result<ScenePrompt> {
    let mut cards = resolve_cast(scene, registry)?;
    cards.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    assemble(&cards, scene, budget)
}

/// Compile with the cast order shuffled by `seed` instead of sorted.
pub fn scramble_order(scene: &SceneSpec, registry: &[CharacterCard], seed: u64) -> Result<ScenePrompt> {
    if scene.cast.len() < 2 {
        return compile(scene, registry);
    }
    let mut cards = resolve_cast(scene, registry)?;
    cards.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    cards.shuffle(&mut seed::rng(seed));
    assemble(&cards, scene, TokenBudget::default())
}

/// Unstructured prompt: raw attribute texts, action and style in one stream,
/// with every registered trigger removed and no compression.
pub fn flat_prompt(scene: &SceneSpec, registry: &[CharacterCard]) -> Result<ScenePrompt> {
    let mut cards = resolve_cast(scene, registry)?;
    cards.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    let mut action = scene.action.clone();
    for card in registry {
        action = action.replace(card.trigger.trim(), "");
    }
    let parts: Vec<String> = cards
        .iter()
        .map(|c| c.attributes.clone())
        .chain([action, scene.style.clone()])
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect();
    let text = parts.join(" ");
    Ok(ScenePrompt {
        segments: vec![PromptSegment { kind: SegmentKind::Flat, token_count: token_count(&text), text: text.clone() }],
        text,
        cast: cards.iter().map(|c| c.character_id.clone()).collect(),
        embedding: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card(id: &str, trigger: &str, attributes: &str) -> CharacterCard {
        CharacterCard {
            character_id: id.into(),
            trigger: trigger.into(),
            attributes: attributes.into(),
            references: vec![],
            anchor: vec![],
        }
    }

    fn family() -> Vec<CharacterCard> {
        vec![
            card("lulu", "Shakoo Maku Lulu", "A little girl, likely around 5 or 6 years old, with a bright and gentle presence. She wears a yellow dress with white flowers, pink sandals and two small braids tied with red ribbons"),
            card("mama", "Shakoo Maku Mama", "A woman in her early 30s, with a warm and composed demeanor that instantly puts others at ease"),
            card("baba", "Shakoo Maku Baba", "A man with a short beard and warm eyes, wearing a red sweater, blue jeans, and brown shoes"),
        ]
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn short_attributes_pass_through() {
        let text = "a small girl with two red ribbons and a yellow dress";
        assert_eq!(token_count(text), 11);
        assert_eq!(compress_attributes(text, TokenBudget::default()).unwrap(), text);
    }

    #[test]
    fn long_attributes_truncate_to_first_tokens() {
        let text = format!("{}. {}.", words(20), (20..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "));
        assert_eq!(token_count(&text), 40);
        let out = compress_attributes(&text, TokenBudget::default()).unwrap();
        assert_eq!(tokenize(&out), tokenize(&text)[..25].to_vec());
    }

    #[test]
    fn compression_is_idempotent() {
        for text in [words(10), words(40), family()[0].attributes.clone()] {
            let once = compress_attributes(&text, TokenBudget::default()).unwrap();
            let twice = compress_attributes(&once, TokenBudget::default()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn compression_rejects_empty() {
        assert!(matches!(compress_attributes("  ,. ", TokenBudget::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_character_without_action_or_style() {
        let reg = family();
        let scene = SceneSpec { action: String::new(), style: String::new(), cast: vec!["mama".into()], scene_index: 0 };
        let p = compile(&scene, &reg).unwrap();
        assert_eq!(p.text, format!("Shakoo Maku Mama{TRIGGER_DELIMITER}{}", reg[1].attributes));
        assert_eq!(p.segments.len(), 1);
    }

    #[test]
    fn family_scene_follows_template() {
        let reg = family();
        let scene = SceneSpec {
            action: "Shakoo Maku Lulu sits beside Shakoo Maku Mama and Shakoo Maku Baba smiling".into(),
            style: "storybook style illustration, soft colors, for children aged 3-6".into(),
            cast: vec!["lulu".into(), "mama".into(), "baba".into()],
            scene_index: 0,
        };
        let p = compile(&scene, &reg).unwrap();
        let kinds: Vec<_> = p.segments.iter().map(|s| s.kind.clone()).collect();
        assert!(matches!(&kinds[0], SegmentKind::Character { character_id, .. } if character_id == "baba"));
        assert!(matches!(&kinds[1], SegmentKind::Character { character_id, .. } if character_id == "lulu"));
        assert!(matches!(&kinds[2], SegmentKind::Character { character_id, .. } if character_id == "mama"));
        assert_eq!(kinds[3], SegmentKind::Action);
        assert_eq!(kinds[4], SegmentKind::Style);
        let characters = p.segments[..3].iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(CHARACTER_DELIMITER);
        assert!(characters.starts_with("Shakoo Maku Baba: A man"));
        let rest = p.text.strip_prefix(&format!("{characters}{SECTION_DELIMITER}")).unwrap();
        assert!(rest.starts_with("Shakoo Maku Lulu sits beside"));
        assert!(p.text.ends_with("for children aged 3-6"));
        for s in &p.segments {
            if let SegmentKind::Character { attribute_tokens, .. } = s.kind {
                assert!(attribute_tokens <= 25);
            }
        }
        assert_eq!(compile(&scene, &reg).unwrap(), p);
    }

    #[test]
    fn compile_is_registry_order_invariant() {
        let reg = family();
        let mut reversed = reg.clone();
        reversed.reverse();
        let scene = SceneSpec { action: "play".into(), style: "soft".into(), cast: vec!["mama".into(), "lulu".into()], scene_index: 1 };
        assert_eq!(compile(&scene, &reg).unwrap(), compile(&scene, &reversed).unwrap());
    }

    #[test]
    fn compile_unknown_cast_names_the_id() {
        let scene = SceneSpec { action: String::new(), style: String::new(), cast: vec!["jido".into()], scene_index: 0 };
        match compile(&scene, &family()) {
            Err(Error::NotFound(msg)) => assert!(msg.contains("jido")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scramble_single_cast_is_compile() {
        let reg = family();
        let scene = SceneSpec { action: "run".into(), style: "soft".into(), cast: vec!["lulu".into()], scene_index: 0 };
        assert_eq!(scramble_order(&scene, &reg, 3).unwrap(), compile(&scene, &reg).unwrap());
    }

    #[test]
    fn scramble_is_reproducible_and_sometimes_differs() {
        let reg = family();
        let scene = SceneSpec { action: "run".into(), style: "soft".into(), cast: vec!["lulu".into(), "mama".into()], scene_index: 0 };
        let canonical = compile(&scene, &reg).unwrap();
        assert_eq!(scramble_order(&scene, &reg, 4).unwrap(), scramble_order(&scene, &reg, 4).unwrap());
        assert!((0..10).any(|s| scramble_order(&scene, &reg, s).unwrap().cast != canonical.cast));
    }

    #[test]
    fn flat_prompt_drops_triggers_and_compression() {
        let reg = family();
        let scene = SceneSpec {
            action: "Shakoo Maku Lulu hugs Shakoo Maku Mama".into(),
            style: "soft colors".into(),
            cast: vec!["lulu".into(), "mama".into()],
            scene_index: 0,
        };
        let flat = flat_prompt(&scene, &reg).unwrap();
        for c in &reg {
            assert!(!flat.text.contains(&c.trigger));
        }
        assert!(flat.text.contains(&reg[0].attributes));
        assert_eq!(flat, flat_prompt(&scene, &reg).unwrap());
    }

    #[test]
    fn flat_prompt_is_longer_for_long_attributes() {
        let reg = family();
        assert_eq!(token_count(&reg[0].attributes), 34);
        let scene = SceneSpec { action: "runs to the garden".into(), style: "soft colors".into(), cast: vec!["lulu".into()], scene_index: 0 };
        let flat = token_count(&flat_prompt(&scene, &reg).unwrap().text);
        let structured = token_count(&compile(&scene, &reg).unwrap().text);
        // 34 + 4 + 2 against 3 + 25 + 4 + 2
        assert_eq!((flat, structured), (40, 34));
    }

    #[test]
    fn registry_validation() {
        let mut reg = family();
        validate_registry(&reg).unwrap();
        reg[1].trigger = reg[0].trigger.clone();
        assert!(validate_registry(&reg).is_err());
    }
}
