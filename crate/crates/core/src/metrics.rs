//! Consistency metrics and the composite objective.
//!
//! ```text
//! ICS       = IS · PFS / 25                                  ∈ [0.04, 1]
//! T-ICS     = mean_c mean_i  judge_c(F_i, F_{i+1})           ∈ [0, 1]
//! T-ICS_Emb = mean_c mean_i  cos(emb(F_i), emb(F_{i+1}))     ∈ [-1, 1]
//! L_temp    = Σ_c Σ_i (1 − cos(emb(F_i), emb(F_{i+1})))
//! L_total   = L_id + λ·L_sem + μ·L_temp
//! ```
//!
//! IS and PFS come from pluggable judges. The defaults map a cosine in
//! identity-embedding space to `[1, 5]` with `1 + 4·max(0, cos)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureFrame;
use crate::error::{Error, Result};
use crate::fusion::{cosine, normalize};
use crate::promptc::{CharacterCard, ScenePrompt};

/// Embeds the region of a frame that shows a given character.
pub trait IdentityEmbedder {
    fn embed(&self, frame: &FeatureFrame, character_id: &str) -> Vec<f64>;
}

/// Coordinates of a frame in an orthonormal basis of the span of all
/// character anchors, L2-normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSubspaceEmbedder {
    basis: Vec<Vec<f64>>,
}

impl AnchorSubspaceEmbedder {
    pub fn new(anchors: &[Vec<f64>]) -> Result<Self> {
        let dim = anchors.first().map_or(0, Vec::len);
        if dim == 0 || anchors.iter().any(|a| a.len() != dim) {
            return Err(Error::invalid("anchors must be non-empty and share one dimension"));
        }
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for a in anchors {
            let mut v = a.clone();
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        if basis.is_empty() {
            return Err(Error::invalid("anchors span nothing"));
        }
        Ok(Self { basis })
    }

    pub fn from_registry(registry: &[CharacterCard]) -> Result<Self> {
        Self::new(&registry.iter().map(|c| c.anchor.clone()).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

impl IdentityEmbedder for AnchorSubspaceEmbedder {
    fn embed(&self, frame: &FeatureFrame, _character_id: &str) -> Vec<f64> {
        normalize(
            self.basis
                .iter()
                .map(|b| b.iter().zip(&frame.values).map(|(x, y)| x * y).sum())
                .collect(),
        )
    }
}

/// `1 + 4·max(0, cos)`.
pub fn cosine_to_score(cos: f64) -> f64 {
    1.0 + 4.0 * cos.max(0.0)
}

/// Normalised mean identity embedding of a card's references.
pub fn reference_identity(card: &CharacterCard, embedder: &dyn IdentityEmbedder) -> Result<Vec<f64>> {
    if card.references.is_empty() {
        return Err(Error::invalid(format!("character '{}' has no references", card.character_id)));
    }
    let mut acc: Vec<f64> = Vec::new();
    for r in &card.references {
        let e = embedder.embed(r, &card.character_id);
        if acc.is_empty() {
            acc = vec![0.0; e.len()];
        }
        acc.iter_mut().zip(e).for_each(|(a, v)| *a += v);
    }
    Ok(normalize(acc))
}

/// Identity score of `frame` for `card` in `[1, 5]`.
pub fn proxy_is(frame: &FeatureFrame, card: &CharacterCard, embedder: &dyn IdentityEmbedder) -> Result<f64> {
    let reference = reference_identity(card, embedder)?;
    Ok(cosine_to_score(cosine(&embedder.embed(frame, &card.character_id), &reference)))
}

/// Prompt-conditioned target: normalised sum of the reference identities of
/// the characters a prompt names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptTargets {
    identities: BTreeMap<String, Vec<f64>>,
}

impl PromptTargets {
    pub fn new(registry: &[CharacterCard], embedder: &dyn IdentityEmbedder) -> Result<Self> {
        let identities = registry
            .iter()
            .map(|c| Ok((c.character_id.clone(), reference_identity(c, embedder)?)))
            .collect::<Result<_>>()?;
        Ok(Self { identities })
    }

    pub fn identity(&self, character_id: &str) -> Option<&[f64]> {
        self.identities.get(character_id).map(Vec::as_slice)
    }

    pub fn target(&self, prompt: &ScenePrompt) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        for id in &prompt.cast {
            let v = self.identity(id).ok_or_else(|| Error::NotFound(format!("no reference identity for '{id}'")))?;
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        Ok(normalize(acc))
    }
}

/// Prompt fidelity of `frame` in `[1, 5]`.
pub fn proxy_pfs(
    frame: &FeatureFrame,
    prompt: &ScenePrompt,
    embedder: &dyn IdentityEmbedder,
    targets: &PromptTargets,
) -> Result<f64> {
    let target = targets.target(prompt)?;
    Ok(cosine_to_score(cosine(&embedder.embed(frame, ""), &target)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub is_score: f64,
    pub pfs_score: f64,
}

impl JudgeScores {
    pub fn new(is_score: f64, pfs_score: f64) -> Result<Self> {
        check_score("IS", is_score)?;
        check_score("PFS", pfs_score)?;
        Ok(Self { is_score, pfs_score })
    }
}

fn check_score(name: &str, v: f64) -> Result<()> {
    if !(1.0..=5.0).contains(&v) {
        return Err(Error::invalid(format!("{name} {v} outside [1, 5]")));
    }
    Ok(())
}

/// `IS · PFS / 25`.
pub fn ics(is_score: f64, pfs_score: f64) -> Result<f64> {
    check_score("IS", is_score)?;
    check_score("PFS", pfs_score)?;
    Ok(is_score * pfs_score / 25.0)
}

/// Frames in which one character appears, in story order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSequence {
    pub character_id: String,
    pub frames: Vec<FeatureFrame>,
}

fn check_sequences(seqs: &[CharacterSequence]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::invalid("no character sequences"));
    }
    if let Some(s) = seqs.iter().find(|s| s.frames.len() < 2) {
        return Err(Error::invalid(format!(
            "sequence for '{}' has {} frame(s); at least 2 are needed",
            s.character_id,
            s.frames.len()
        )));
    }
    Ok(())
}

/// Pairwise temporal evaluator returning values in `[0, 1]`.
pub trait TemporalJudge {
    fn score(&self, character_id: &str, previous: &FeatureFrame, next: &FeatureFrame) -> f64;

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// `clamp(cos(emb(a), emb(b)), 0, 1)`.
pub struct ProxyTemporalJudge<'a> {
    pub embedder: &'a dyn IdentityEmbedder,
}

impl TemporalJudge for ProxyTemporalJudge<'_> {
    fn score(&self, character_id: &str, previous: &FeatureFrame, next: &FeatureFrame) -> f64 {
        adjacent_cosine(self.embedder, character_id, previous, next).clamp(0.0, 1.0)
    }
}

fn adjacent_cosine(e: &dyn IdentityEmbedder, id: &str, a: &FeatureFrame, b: &FeatureFrame) -> f64 {
    cosine(&e.embed(a, id), &e.embed(b, id))
}

fn double_mean(seqs: &[CharacterSequence], mut pair: impl FnMut(&str, &FeatureFrame, &FeatureFrame) -> Result<f64>) -> Result<f64> {
    check_sequences(seqs)?;
    let mut outer = 0.0;
    for s in seqs {
        let mut inner = 0.0;
        for w in s.frames.windows(2) {
            inner += pair(&s.character_id, &w[0], &w[1])?;
        }
        outer += inner / (s.frames.len() - 1) as f64;
    }
    Ok(outer / seqs.len() as f64)
}

pub fn t_ics_emb(seqs: &[CharacterSequence], embedder: &dyn IdentityEmbedder) -> Result<f64> {
    double_mean(seqs, |id, a, b| Ok(adjacent_cosine(embedder, id, a, b)))
}

pub fn t_ics(seqs: &[CharacterSequence], judge: &dyn TemporalJudge) -> Result<f64> {
    double_mean(seqs, |id, a, b| {
        let v = judge.score(id, a, b);
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::ContractViolation(format!("temporal judge returned {v} for '{id}'")));
        }
        Ok(v)
    })
}

/// `Σ_c Σ_i (1 − cos)` over adjacent frames.
pub fn temporal_loss(seqs: &[CharacterSequence], embedder: &dyn IdentityEmbedder) -> Result<f64> {
    check_sequences(seqs)?;
    Ok(seqs
        .iter()
        .flat_map(|s| s.frames.windows(2).map(|w| 1.0 - adjacent_cosine(embedder, &s.character_id, &w[0], &w[1])))
        .sum())
}

pub fn total_objective(id_term: f64, sem_term: f64, temp_term: f64, lambda: f64, mu: f64) -> Result<f64> {
    if lambda < 0.0 || mu < 0.0 {
        return Err(Error::invalid("objective weights must be non-negative"));
    }
    Ok(id_term + lambda * sem_term + mu * temp_term)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda: 1.0, mu: 1.0 }
    }
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_index: usize,
    pub scores: JudgeScores,
    pub ics: f64,
}

/// Scores of one story under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub cast_size: Option<usize>,
    pub scenes: Vec<SceneScore>,
    /// `None` when no character appears in two or more scenes.
    pub t_ics: Option<f64>,
    pub t_ics_emb: Option<f64>,
    pub deterministic_judges: bool,
}

impl MetricReport {
    pub fn is_stats(&self) -> Stats {
        Stats::of(&self.scenes.iter().map(|s| s.scores.is_score).collect::<Vec<_>>())
    }

    pub fn pfs_stats(&self) -> Stats {
        Stats::of(&self.scenes.iter().map(|s| s.scores.pfs_score).collect::<Vec<_>>())
    }

    pub fn ics_stats(&self) -> Stats {
        Stats::of(&self.scenes.iter().map(|s| s.ics).collect::<Vec<_>>())
    }
}

/// Per-character frame sequences of a story (characters seen fewer than
/// twice are dropped).
pub fn sequences_from_frames(frames: &[FeatureFrame]) -> Vec<CharacterSequence> {
    let mut by_char: BTreeMap<&str, Vec<FeatureFrame>> = BTreeMap::new();
    for f in frames {
        for c in &f.characters_present {
            by_char.entry(c.as_str()).or_default().push(f.clone());
        }
    }
    by_char
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(id, frames)| CharacterSequence { character_id: id.to_string(), frames })
        .collect()
}

/// Score a story: one frame per prompt, in scene order.
pub fn score_story(
    method: &str,
    cast_size: Option<usize>,
    frames: &[FeatureFrame],
    prompts: &[ScenePrompt],
    registry: &[CharacterCard],
    embedder: &dyn IdentityEmbedder,
    targets: &PromptTargets,
    judge: &dyn TemporalJudge,
) -> Result<MetricReport> {
    if frames.len() != prompts.len() {
        return Err(Error::invalid("one frame per prompt is required"));
    }
    let mut scenes = Vec::new();
    for (frame, prompt) in frames.iter().zip(prompts) {
        if prompt.cast.is_empty() {
            continue;
        }
        let mut is_sum = 0.0;
        for id in &prompt.cast {
            let card = crate::promptc::find_card(registry, id)?;
            is_sum += proxy_is(frame, card, embedder)?;
        }
        let is_score = is_sum / prompt.cast.len() as f64;
        let pfs_score = proxy_pfs(frame, prompt, embedder, targets)?;
        scenes.push(SceneScore {
            scene_index: frame.scene_index,
            scores: JudgeScores::new(is_score, pfs_score)?,
            ics: ics(is_score, pfs_score)?,
        });
    }
    let seqs = sequences_from_frames(frames);
    let (t_ics, t_ics_emb) = if seqs.is_empty() {
        (None, None)
    } else {
        (Some(t_ics(&seqs, judge)?), Some(t_ics_emb(&seqs, embedder)?))
    };
    Ok(MetricReport {
        method: method.to_string(),
        cast_size,
        scenes,
        t_ics,
        t_ics_emb,
        deterministic_judges: judge.is_deterministic(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn frame(v: Vec<f64>) -> FeatureFrame {
        FeatureFrame::new(v)
    }

    fn embedder() -> AnchorSubspaceEmbedder {
        AnchorSubspaceEmbedder::new(&[e(0, 4), e(1, 4), e(2, 4)]).unwrap()
    }

    fn card(id: &str, refs: Vec<Vec<f64>>) -> CharacterCard {
        CharacterCard {
            character_id: id.into(),
            trigger: id.into(),
            attributes: "x".into(),
            anchor: refs[0].clone(),
            references: refs.into_iter().map(frame).collect(),
        }
    }

    fn seq(id: &str, frames: Vec<Vec<f64>>) -> CharacterSequence {
        CharacterSequence { character_id: id.into(), frames: frames.into_iter().map(frame).collect() }
    }

    struct Constant(f64);
    impl TemporalJudge for Constant {
        fn score(&self, _: &str, _: &FeatureFrame, _: &FeatureFrame) -> f64 {
            self.0
        }
    }

    /// Double loop written out longhand, independent of `double_mean`.
    fn brute_t_ics_emb(seqs: &[CharacterSequence], emb: &dyn IdentityEmbedder) -> f64 {
        let mut total = 0.0;
        for s in seqs {
            let n = s.frames.len();
            let mut acc = 0.0;
            for i in 0..n - 1 {
                let a = emb.embed(&s.frames[i], &s.character_id);
                let b = emb.embed(&s.frames[i + 1], &s.character_id);
                let dot: f64 = (0..a.len()).map(|k| a[k] * b[k]).sum();
                let na: f64 = (0..a.len()).map(|k| a[k] * a[k]).sum::<f64>().sqrt();
                let nb: f64 = (0..b.len()).map(|k| b[k] * b[k]).sum::<f64>().sqrt();
                acc += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            }
            total += acc / (n - 1) as f64;
        }
        total / seqs.len() as f64
    }

    #[test]
    fn proxy_is_cases() {
        let emb = embedder();
        let c = card("a", vec![e(0, 4), e(0, 4)]);
        assert_eq!(proxy_is(&frame(e(0, 4)), &c, &emb).unwrap(), 5.0);
        assert_eq!(proxy_is(&frame(e(1, 4)), &c, &emb).unwrap(), 1.0);
        assert_eq!(proxy_is(&frame(vec![-1.0, 0.0, 0.0, 0.0]), &c, &emb).unwrap(), 1.0);
        let half = vec![0.5, 0.75f64.sqrt(), 0.0, 0.0];
        assert!((proxy_is(&frame(half), &c, &emb).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn proxy_pfs_cases() {
        let emb = embedder();
        let reg = vec![card("a", vec![e(0, 4)]), card("b", vec![e(1, 4)])];
        let targets = PromptTargets::new(&reg, &emb).unwrap();
        let prompt = ScenePrompt { text: String::new(), segments: vec![], cast: vec!["a".into()], embedding: None };
        assert_eq!(proxy_pfs(&frame(e(0, 4)), &prompt, &emb, &targets).unwrap(), 5.0);
        assert_eq!(proxy_pfs(&frame(e(2, 4)), &prompt, &emb, &targets).unwrap(), 1.0);
        let quarter = vec![0.25, 0.0, (1.0f64 - 0.0625).sqrt(), 0.0];
        assert!((proxy_pfs(&frame(quarter), &prompt, &emb, &targets).unwrap() - 2.0).abs() < 1e-12);
        let both = ScenePrompt { cast: vec!["a".into(), "b".into()], ..prompt };
        assert!((proxy_pfs(&frame(vec![1.0, 1.0, 0.0, 0.0]), &both, &emb, &targets).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ics_cases() {
        assert_eq!(ics(5.0, 5.0).unwrap(), 1.0);
        assert_eq!(ics(1.0, 1.0).unwrap(), 0.04);
        assert!((ics(4.0, 3.0).unwrap() - 0.48).abs() < 1e-15);
        assert!(matches!(ics(0.5, 3.0), Err(Error::InvalidArgument(_))));
        assert!(ics(3.0, 5.5).is_err());
    }

    #[test]
    fn t_ics_emb_cases() {
        let emb = embedder();
        assert_eq!(t_ics_emb(&[seq("a", vec![e(0, 4); 4])], &emb).unwrap(), 1.0);
        assert_eq!(t_ics_emb(&[seq("a", vec![e(0, 4), e(1, 4)])], &emb).unwrap(), 0.0);
        let mid = vec![0.5, 0.75f64.sqrt(), 0.0, 0.0];
        let v = t_ics_emb(&[seq("a", vec![e(0, 4), mid.clone(), mid])], &emb).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        assert!(matches!(t_ics_emb(&[seq("a", vec![e(0, 4)])], &emb), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn t_ics_with_constant_and_bad_judges() {
        let s = [seq("a", vec![e(0, 4), e(1, 4), e(2, 4)])];
        assert_eq!(t_ics(&s, &Constant(1.0)).unwrap(), 1.0);
        assert_eq!(t_ics(&s, &Constant(0.0)).unwrap(), 0.0);
        assert!(matches!(t_ics(&s, &Constant(1.5)), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn temporal_loss_cases() {
        let emb = embedder();
        assert_eq!(temporal_loss(&[seq("a", vec![e(0, 4); 3])], &emb).unwrap(), 0.0);
        assert_eq!(temporal_loss(&[seq("a", vec![e(0, 4), e(1, 4)])], &emb).unwrap(), 1.0);
    }

    #[test]
    fn objective_cases() {
        assert_eq!(total_objective(2.0, 5.0, 7.0, 0.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_objective(1.0, 2.0, 3.0, 1.0, 1.0).unwrap(), 6.0);
        let a = total_objective(1.0, 2.0, 3.0, 0.5, 1.0).unwrap();
        let b = total_objective(1.0, 2.0, 3.0, 1.0, 1.0).unwrap();
        assert_eq!(b - a, 0.5 * 2.0);
        assert!(total_objective(1.0, 2.0, 3.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn drift_lowers_t_ics_emb() {
        let emb = embedder();
        let clean = seq("a", vec![e(0, 4), vec![0.9, 0.1, 0.0, 0.0], e(0, 4), vec![0.95, 0.0, 0.05, 0.0]]);
        let mut drifted = clean.clone();
        drifted.frames[2] = frame(e(1, 4));
        assert!(t_ics_emb(&[drifted], &emb).unwrap() < t_ics_emb(&[clean], &emb).unwrap());
    }

    #[test]
    fn subspace_embedder_drops_dependent_anchors() {
        let emb = AnchorSubspaceEmbedder::new(&[e(0, 3), vec![2.0, 0.0, 0.0], e(1, 3)]).unwrap();
        assert_eq!(emb.dim(), 2);
        assert_eq!(emb.embed(&frame(vec![0.0, 0.0, 5.0]), "x"), vec![0.0, 0.0]);
    }

    #[test]
    fn stats() {
        let s = Stats::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(Stats::of(&[4.0]).std, 0.0);
    }

    fn arb_seqs() -> impl Strategy<Value = Vec<CharacterSequence>> {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..6)
                .prop_map(|frames| seq("c", frames)),
            1..4,
        )
    }

    proptest! {
        #[test]
        fn t_ics_emb_matches_brute_force(seqs in arb_seqs()) {
            let emb = embedder();
            let got = t_ics_emb(&seqs, &emb).unwrap();
            prop_assert!((got - brute_t_ics_emb(&seqs, &emb)).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&got));
        }

        #[test]
        fn t_ics_emb_reversal_invariant(seqs in arb_seqs()) {
            let emb = embedder();
            let reversed: Vec<_> = seqs.iter().map(|s| {
                let mut r = s.clone();
                r.frames.reverse();
                r
            }).collect();
            prop_assert!((t_ics_emb(&seqs, &emb).unwrap() - t_ics_emb(&reversed, &emb).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn proxy_judge_equals_clamped_emb(seqs in arb_seqs()) {
            let emb = embedder();
            let judge = ProxyTemporalJudge { embedder: &emb };
            let clamped = double_mean(&seqs, |id, a, b| Ok(adjacent_cosine(&emb, id, a, b).clamp(0.0, 1.0))).unwrap();
            prop_assert_eq!(t_ics(&seqs, &judge).unwrap(), clamped);
            prop_assert!(temporal_loss(&seqs, &emb).unwrap() >= 0.0);
        }

        #[test]
        fn ics_range(a in 1.0f64..=5.0, b in 1.0f64..=5.0) {
            let v = ics(a, b).unwrap();
            prop_assert!((0.04..=1.0).contains(&v));
        }
    }
}
