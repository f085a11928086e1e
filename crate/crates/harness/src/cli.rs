//! The `charcom` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use charcom_core::trainer::TrainReport;
use charcom_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::bench::{gen_benchmark, to_jsonl, BenchmarkSpec};
use crate::persist::{self, ManifestEntry};
use crate::report::{aggregate, emit_report, Table};
use crate::runner::{run_method, ExperimentRecord, Method, MethodSpec};
use crate::sweeps::{self, RunSeeds, DEFAULT_CAST_SIZES, DEFAULT_REF_COUNTS};
use crate::world::{pretrain_backbone, World, WorldConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "charcom", version, about = "Composable character adapters on a miniature diffusion testbed")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// World configuration (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "charcom-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "weight-threshold")]
    pub weight_threshold: Option<f64>,
    /// References per character used for adapter training.
    #[arg(long)]
    pub refs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the backbone and write backbone.json.
    TrainBackbone,
    /// Train one adapter per character against <out>/backbone.json.
    TrainAdapter {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sample a benchmark with stored artifacts and write the records.
    Generate {
        #[arg(long, default_value = "charcom")]
        method: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Aggregate generated records into a report.
    Evaluate,
    /// Build a world and compare all methods end to end.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Vary the cast size from 1 to 4.
    SweepChars {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Vary the number of references per character.
    SweepRefs {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the ablation variants.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_INVALID,
        Error::Format { .. } => EXIT_FORMAT,
        Error::NotFound(_) => EXIT_MISSING,
        Error::ContractViolation(_) => EXIT_FAILURE,
    }
}

fn world_config(cli: &Cli, o: Option<&Overrides>) -> Result<WorldConfig> {
    let mut config: WorldConfig = match &cli.config {
        Some(p) => persist::load_json(p)?,
        None => WorldConfig::default(),
    };
    config.seed = cli.seed;
    if let Some(o) = o {
        if let Some(r) = o.rank {
            config.adapter.rank = r;
        }
        if let Some(a) = o.alpha {
            config.coefficients.alpha = a;
        }
        if let Some(b) = o.beta {
            config.coefficients.beta = b;
        }
        if let Some(t) = o.weight_threshold {
            config.coefficients.weight_threshold = t;
        }
        if let Some(k) = o.refs {
            config.references = k;
        }
    }
    config.validate()?;
    Ok(config)
}

fn emit(table: &Table, out: &Path, stem: &str) -> Result<()> {
    let (csv, md) = emit_report(table, out, stem)?;
    println!("wrote {} and {}", csv.display(), md.display());
    Ok(())
}

fn train_backbone_cmd(cli: &Cli) -> Result<()> {
    let trained = pretrain_backbone(&world_config(cli, None)?)?;
    persist::save_backbone(&trained.params, &cli.out.join("backbone.json"))?;
    persist::write_file(&cli.out.join("backbone_loss.tsv"), trained.report.to_trace_text().as_bytes())?;
    println!("backbone loss {:.6} -> {:.6}", trained.report.initial_loss(), trained.report.final_loss());
    Ok(())
}

fn train_adapter_cmd(cli: &Cli, o: &Overrides) -> Result<()> {
    let config = world_config(cli, Some(o))?;
    let backbone = persist::load_backbone(&cli.out.join("backbone.json"))?;
    let world = World::with_backbone(config, backbone, TrainReport { updates_applied: 0, losses: vec![] })?;
    let mut manifest = Vec::new();
    for card in &world.registry {
        let id = &card.character_id;
        let adapter = &world.adapters[id];
        let adapter_path = format!("adapters/{id}.chad");
        let reference_path = format!("references/{id}.json");
        persist::save_adapter(adapter, &cli.out.join(&adapter_path))?;
        persist::write_file(&cli.out.join(format!("adapters/{id}_loss.tsv")), adapter.report.to_trace_text().as_bytes())?;
        let refs: Vec<&Vec<f64>> = card.references.iter().map(|f| &f.values).collect();
        persist::save_json(&refs, &cli.out.join(&reference_path))?;
        println!("{id}: loss {:.6} -> {:.6}", adapter.report.initial_loss(), adapter.report.final_loss());
        manifest.push(ManifestEntry {
            character_id: id.clone(),
            trigger: card.trigger.clone(),
            attributes: card.attributes.clone(),
            adapter_path,
            reference_path,
        });
    }
    persist::save_json(&manifest, &cli.out.join("registry.json"))
}

fn stored_world(cli: &Cli, o: &Overrides) -> Result<World> {
    let config = world_config(cli, Some(o))?;
    let backbone = persist::load_backbone(&cli.out.join("backbone.json"))?;
    let (registry, entries) = persist::load_registry(&cli.out.join("registry.json"))?;
    let mut adapters = BTreeMap::new();
    for e in &entries {
        let a = persist::load_adapter(&cli.out.join(&e.adapter_path))?;
        if a.character_id != e.character_id {
            return Err(Error::Format { offset: 0, message: format!("{} holds adapter '{}'", e.adapter_path, a.character_id) });
        }
        adapters.insert(e.character_id.clone(), a);
    }
    World::from_parts(config, backbone, registry, adapters)
}

fn generate_cmd(cli: &Cli, method: &str, o: &Overrides) -> Result<()> {
    let method = Method::parse(method)?;
    let world = stored_world(cli, o)?;
    let seeds = RunSeeds::from(cli.seed);
    let bench = gen_benchmark(seeds.benchmark, BenchmarkSpec::default(), &world.registry)?;
    persist::write_file(&cli.out.join("benchmark.jsonl"), to_jsonl(&bench).as_bytes())?;
    let records = run_method(&bench, &MethodSpec::new(method), &world, seeds.eval, None)?;
    let path = cli.out.join(format!("generated_{}.json", method.name()));
    persist::save_json(&records, &path)?;
    println!("wrote {} ({} stories)", path.display(), records.len());
    Ok(())
}

fn evaluate_cmd(cli: &Cli) -> Result<()> {
    let mut rows = Vec::new();
    for m in Method::ALL {
        let path = cli.out.join(format!("generated_{}.json", m.name()));
        if path.exists() {
            let records: Vec<ExperimentRecord> = persist::load_json(&path)?;
            rows.push(aggregate(m.name(), None, &records));
        }
    }
    if rows.is_empty() {
        return Err(Error::NotFound(format!("no generated_*.json records in {}", cli.out.display())));
    }
    emit(&Table { title: "Evaluation".into(), key_name: None, rows }, &cli.out, "evaluation")
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainBackbone => train_backbone_cmd(cli),
        Command::TrainAdapter { overrides } => train_adapter_cmd(cli, overrides),
        Command::Generate { method, overrides } => generate_cmd(cli, method, overrides),
        Command::Evaluate => evaluate_cmd(cli),
        Command::Bench { overrides } => {
            let world = World::build(world_config(cli, Some(overrides))?)?;
            emit(&sweeps::main_comparison(&world, cli.seed)?.0, &cli.out, "bench")
        }
        Command::SweepChars { overrides } => {
            let world = World::build(world_config(cli, Some(overrides))?)?;
            emit(&sweeps::scaling_sweep(&world, &DEFAULT_CAST_SIZES, cli.seed)?, &cli.out, "sweep_chars")
        }
        Command::SweepRefs { overrides } => {
            let world = World::build(world_config(cli, Some(overrides))?)?;
            emit(&sweeps::refcount_sweep(&world, &DEFAULT_REF_COUNTS, cli.seed)?, &cli.out, "sweep_refs")
        }
        Command::Ablate { overrides } => {
            let world = World::build(world_config(cli, Some(overrides))?)?;
            emit(&sweeps::ablation_suite(&world, cli.seed)?, &cli.out, "ablations")
        }
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
