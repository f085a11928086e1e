// Acceptance checks that need only the core crate. Included by the core and
// harness acceptance targets.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Instant;

use charcom_core::backbone::{sample_reference_set, BackboneParams, CharacterDistribution, Dims};
use charcom_core::fusion::{relevance_cosines, relevance_from_cosines, relevance_weight, CardEmbedding, DualEncoder, FusionCoefficients};
use charcom_core::lowrank::{fuse, fused_apply, materialize, DenseMatrix, LowRankUpdate, WeightedUpdate, WeightedUpdateSet};
use charcom_core::metrics::{ics, t_ics_emb, CharacterSequence, IdentityEmbedder};
use charcom_core::backbone::FeatureFrame;
use charcom_core::promptc::CharacterCard;
use charcom_core::seed;
use charcom_core::trainer::{adapter_loss_and_grad, grad_check, make_pairs, train_adapter, TrainConfig};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Runs criteria and prints one line per criterion.
#[derive(Default)]
pub struct Reporter {
    failed: Vec<u32>,
}

impl Reporter {
    pub fn run(&mut self, n: u32, name: &str, check: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {n:>2} ({name}): {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            self.failed.push(n);
        }
    }

    pub fn finish(self) {
        if self.failed.is_empty() {
            println!("all criteria passed");
        } else {
            println!("failed criteria: {:?}", self.failed);
            std::process::exit(1);
        }
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn plain_matvec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum()).collect()
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

pub fn fusion_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    let mut identical = true;
    for _ in 0..200 {
        let d_out = rng.gen_range(1..=64);
        let d_in = rng.gen_range(1..=64);
        let base = gaussian_matrix(&mut rng, d_out, d_in);
        let count = rng.gen_range(0..=4);
        let entries: Vec<WeightedUpdate> = (0..count)
            .map(|i| {
                let r = rng.gen_range(1..=8);
                let u = LowRankUpdate::new(gaussian_matrix(&mut rng, d_out, r), gaussian_matrix(&mut rng, r, d_in)).unwrap();
                WeightedUpdate { character_id: format!("c{i}"), update: Arc::new(u), weight: rng.gen_range(0.0..=1.0) }
            })
            .collect();
        let x = gaussian_vec(&mut rng, d_in);
        let set = WeightedUpdateSet::new(entries.clone()).unwrap();

        // oracle: materialise each residual and add it densely
        let mut dense: Vec<Vec<f64>> = (0..d_out).map(|r| base.row(r).to_vec()).collect();
        for e in &entries {
            let m = materialize(&e.update);
            for (r, row) in dense.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += e.weight * m.get(r, c);
                }
            }
        }
        let expected: Vec<f64> = dense.iter().map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum()).collect();
        for got in [fused_apply(&base, &set, &x).unwrap(), fuse(&base, &set).unwrap().matvec(&x).unwrap()] {
            let diff: Vec<f64> = got.iter().zip(&expected).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&diff) / norm(&expected).max(f64::MIN_POSITIVE));
        }

        let base_y = base.matvec(&x).unwrap();
        let zeroed: Vec<WeightedUpdate> = entries.iter().map(|e| WeightedUpdate { weight: 0.0, ..e.clone() }).collect();
        for s in [WeightedUpdateSet::empty(), WeightedUpdateSet::new(zeroed).unwrap()] {
            let y = fused_apply(&base, &s, &x).unwrap();
            identical &= y.iter().zip(&base_y).all(|(a, b)| a.to_bits() == b.to_bits());
            identical &= fuse(&base, &s).unwrap() == base;
        }
        identical &= plain_matvec(&base, &x).iter().zip(&base_y).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-6 && identical && secs < 5.0,
        format!("max relative error {worst:.2e}, empty/zero-weight bit-identical: {identical}, {secs:.2}s"),
    )
}

fn ref_set(d: usize, spread: f64, k: usize, s: u64) -> Vec<FeatureFrame> {
    let mut rng = seed::rng(s);
    let anchor = gaussian_vec(&mut rng, d);
    sample_reference_set(&CharacterDistribution::new("c", anchor, spread).unwrap(), k, s)
}

pub fn frozen_backbone() -> Outcome {
    let dims = Dims::default();
    let backbone = BackboneParams::init(dims, 5).unwrap();
    let before = backbone.digest();
    let mut calls = 0;
    let mut unchanged = true;
    for s in 0..4u64 {
        let refs = ref_set(dims.d_feat, 0.1, 10, s);
        let cfg = TrainConfig { steps: 60, rank: 1 + s as usize, seed: s, ..TrainConfig::default() };
        let _ = train_adapter(&backbone, &format!("c{s}"), &refs, &vec![0.1; dims.d_cond], &cfg).unwrap();
        calls += 1;
        unchanged &= backbone.digest() == before;
    }
    Outcome::new(unchanged, format!("digest {before:016x} unchanged across {calls} train_adapter calls: {unchanged}"))
}

pub fn gradient_correctness() -> Outcome {
    let dims = Dims::default();
    let backbone = BackboneParams::init(dims, 9).unwrap();
    let refs = ref_set(dims.d_feat, 0.1, 12, 3);
    let targets: Vec<Vec<f64>> = refs.iter().map(|f| f.values.clone()).collect();
    let pairs = make_pairs(&targets, 6, 77).unwrap();
    let cond: Vec<f64> = (0..dims.d_cond).map(|i| (i as f64 * 0.7).sin() * 0.3).collect();
    let mut errors = Vec::new();
    for steps in [7, 120, 600] {
        let cfg = TrainConfig { steps, seed: steps as u64, ..TrainConfig::default() };
        let adapter = train_adapter(&backbone, "c", &refs, &cond, &cfg).unwrap();
        let f = |p: &[f64]| {
            let a = adapter.with_flat(p).unwrap();
            adapter_loss_and_grad(&backbone, &a.layers, &pairs, &cond).unwrap()
        };
        errors.push(grad_check(f, &adapter.flatten(), 1e-5).unwrap());
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    Outcome::new(worst <= 1e-4, format!("max relative error per checkpoint [{}]", errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")))
}

pub fn weight_formula() -> Outcome {
    let oracle = |a: f64, t: f64, b: f64, r: f64| 1.0 / (1.0 + (-(a * t + b * r)).exp());
    let mut rng = seed::rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, r) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        let (a, b) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let c = FusionCoefficients { alpha: a, beta: b, ..FusionCoefficients::default() };
        worst = worst.max((relevance_from_cosines(t, r, &c) - oracle(a, t, b, r)).abs());
    }

    // end to end on a card: cosines recomputed from the raw embeddings
    let encoders = DualEncoder::default();
    let card = CharacterCard {
        character_id: "mira".into(),
        trigger: "Miravelle".into(),
        attributes: "silver hair, green cloak, lantern".into(),
        references: ref_set(16, 0.1, 5, 8),
        anchor: vec![0.0; 16],
    };
    let prompt = "Miravelle with silver hair walks through the market";
    let emb = CardEmbedding::new(&card, &encoders).unwrap();
    let t = plain_cosine(&encoders.semantic.embed(prompt), &emb.attributes);
    let r = plain_cosine(&encoders.visual_text.embed(prompt), &emb.references);
    let c = FusionCoefficients::default();
    let end_to_end = (relevance_weight(prompt, &card, &c, &encoders).unwrap() - oracle(1.0, t, 1.0, r)).abs();
    let (t2, r2) = relevance_cosines(prompt, &emb, &encoders);
    worst = worst.max(end_to_end).max((t - t2).abs()).max((r - r2).abs());

    let s2 = relevance_from_cosines(1.0, 1.0, &c);
    let default_unit = c.alpha == 1.0 && c.beta == 1.0;
    Outcome::new(
        worst <= 1e-12 && (s2 - 0.880797).abs() <= 1e-6 && default_unit,
        format!("max abs error {worst:.1e}, σ(2) = {s2:.7}, default α=β=1: {default_unit}"),
    )
}

struct Raw;

impl IdentityEmbedder for Raw {
    fn embed(&self, frame: &FeatureFrame, _: &str) -> Vec<f64> {
        frame.values.clone()
    }
}

pub fn metric_formulas() -> Outcome {
    let lo = ics(1.0, 1.0).unwrap();
    let hi = ics(5.0, 5.0).unwrap();
    let mut rng = seed::rng(55);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n_chars = rng.gen_range(1..=4);
        let seqs: Vec<CharacterSequence> = (0..n_chars)
            .map(|c| {
                let len = rng.gen_range(2..=8);
                let d = 8;
                CharacterSequence {
                    character_id: format!("c{c}"),
                    frames: (0..len).map(|_| FeatureFrame::new(gaussian_vec(&mut rng, d))).collect(),
                }
            })
            .collect();
        let mut outer = 0.0;
        for s in &seqs {
            let mut inner = 0.0;
            for i in 0..s.frames.len() - 1 {
                inner += plain_cosine(&s.frames[i].values, &s.frames[i + 1].values);
            }
            outer += inner / (s.frames.len() - 1) as f64;
        }
        let oracle = outer / seqs.len() as f64;
        worst = worst.max((t_ics_emb(&seqs, &Raw).unwrap() - oracle).abs());
    }
    Outcome::new(
        lo == 0.04 && hi == 1.0 && worst <= 1e-9,
        format!("ics(1,1) = {lo}, ics(5,5) = {hi}, t_ics_emb max error {worst:.1e}"),
    )
}

pub fn merge_cost() -> Outcome {
    let mut rng = seed::rng(10);
    let bases = [gaussian_matrix(&mut rng, 64, 64), gaussian_matrix(&mut rng, 64, 64)];
    let sets: Vec<WeightedUpdateSet> = (0..2)
        .map(|_| {
            let entries = (0..4)
                .map(|i| {
                    let u = LowRankUpdate::new(gaussian_matrix(&mut rng, 64, 4), gaussian_matrix(&mut rng, 4, 64)).unwrap();
                    WeightedUpdate { character_id: format!("c{i}"), update: Arc::new(u), weight: 0.7 }
                })
                .collect();
            WeightedUpdateSet::new(entries).unwrap()
        })
        .collect();
    let mut times = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let t = Instant::now();
        for (b, s) in bases.iter().zip(&sets) {
            std::hint::black_box(fuse(std::hint::black_box(b), s).unwrap());
        }
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let note = if median < 1.0 { "within budget" } else { "over budget, under 10x" };
    Outcome::new(median < 10.0, format!("median {median:.4} ms over 1000 merges of 4 rank-4 adapters into two 64x64 matrices ({note})"))
}

pub fn run_core_criteria(r: &mut Reporter) {
    r.run(1, "fusion exactness", fusion_exactness);
    r.run(2, "frozen backbone", frozen_backbone);
    r.run(3, "gradient correctness", gradient_correctness);
    r.run(4, "weight formula", weight_formula);
    r.run(5, "metric formulas", metric_formulas);
}
