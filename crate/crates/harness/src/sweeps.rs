//! The comparison, scaling, ablation and reference-count experiments.

use charcom_core::{seed, Error, Result};

use crate::bench::{gen_benchmark, BenchmarkSpec, CastSize, StoryBenchmark};
use crate::report::{aggregate, Row, Table};
use crate::runner::{run_method, ExperimentRecord, Method, MethodSpec};
use crate::world::World;

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "flat_prompt", "no_composition", "random_order"];
pub const DEFAULT_CAST_SIZES: [usize; 4] = [1, 2, 3, 4];
pub const DEFAULT_REF_COUNTS: [usize; 4] = [1, 5, 15, 30];

/// Seeds for the benchmark and for sampling, derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub benchmark: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn from(run_seed: u64) -> Self {
        Self {
            benchmark: seed::derive(run_seed, &[seed::tag("benchmark")]),
            eval: seed::derive(run_seed, &[seed::tag("eval")]),
        }
    }
}

pub fn default_benchmark(world: &World, seeds: RunSeeds) -> Result<StoryBenchmark> {
    gen_benchmark(seeds.benchmark, BenchmarkSpec::default(), &world.registry)
}

/// Every method on the default benchmark.
pub fn main_comparison(world: &World, run_seed: u64) -> Result<(Table, Vec<ExperimentRecord>)> {
    let seeds = RunSeeds::from(run_seed);
    let bench = default_benchmark(world, seeds)?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for m in Method::ALL {
        let records = run_method(&bench, &MethodSpec::new(m), world, seeds.eval, None)?;
        rows.push(aggregate(m.name(), None, &records));
        all.extend(records);
    }
    Ok((Table { title: "Method comparison".into(), key_name: None, rows }, all))
}

/// Each method on benchmarks with a fixed cast size.
pub fn scaling_sweep(world: &World, cast_sizes: &[usize], run_seed: u64) -> Result<Table> {
    if world.registry.len() < 4 {
        return Err(Error::InvalidArgument(format!("scaling needs at least 4 characters, have {}", world.registry.len())));
    }
    if let Some(&k) = cast_sizes.iter().find(|&&k| k == 0 || k > world.registry.len()) {
        return Err(Error::InvalidArgument(format!("cast size {k} does not fit a pool of {}", world.registry.len())));
    }
    let seeds = RunSeeds::from(run_seed);
    let mut rows = Vec::new();
    for m in Method::ALL {
        for &k in cast_sizes {
            let spec = BenchmarkSpec { cast: CastSize::Fixed(k), ..BenchmarkSpec::default() };
            let bench = gen_benchmark(seed::derive(seeds.benchmark, &[k as u64]), spec, &world.registry)?;
            let records = run_method(&bench, &MethodSpec::new(m), world, seeds.eval, Some(k))?;
            rows.push(aggregate(m.name(), Some(k.to_string()), &records));
        }
    }
    Ok(Table { title: "Scaling with cast size".into(), key_name: Some("chars".into()), rows })
}

pub fn ablation_spec(variant: &str) -> Result<MethodSpec> {
    let mut spec = MethodSpec::new(Method::Charcom);
    match variant {
        "full" => {}
        "flat_prompt" => spec.flat_prompt = true,
        "no_composition" => spec.no_composition = true,
        "random_order" => spec.random_order = true,
        other => return Err(Error::InvalidArgument(format!("unknown ablation variant '{other}'"))),
    }
    Ok(spec)
}

/// The full method and its three ablations on the default benchmark.
pub fn ablation_suite(world: &World, run_seed: u64) -> Result<Table> {
    let seeds = RunSeeds::from(run_seed);
    let bench = default_benchmark(world, seeds)?;
    let rows = ABLATION_VARIANTS
        .iter()
        .map(|v| Ok(aggregate(v, None, &run_method(&bench, &ablation_spec(v)?, world, seeds.eval, None)?)))
        .collect::<Result<Vec<Row>>>()?;
    Ok(Table { title: "Ablations".into(), key_name: None, rows })
}

/// Charcom with adapters retrained on `k` references per character.
pub fn refcount_sweep(world: &World, counts: &[usize], run_seed: u64) -> Result<Table> {
    let seeds = RunSeeds::from(run_seed);
    let bench = default_benchmark(world, seeds)?;
    let rows = counts
        .iter()
        .map(|&k| {
            let w = world.with_reference_count(k)?;
            let records = run_method(&bench, &MethodSpec::new(Method::Charcom), &w, seeds.eval, None)?;
            Ok(aggregate("charcom", Some(k.to_string()), &records))
        })
        .collect::<Result<Vec<Row>>>()?;
    Ok(Table { title: "Reference count".into(), key_name: Some("refs".into()), rows })
}
