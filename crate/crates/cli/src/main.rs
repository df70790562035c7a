use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use maprl::bench::{self, CombinationSpec, GridDataset};
use maprl::data::{self, ConvertOptions, EntityKind, SyntheticCitySpec};
use maprl::metrics::{aggregate_seeds, read_reports_csv, write_aggregate_csv, MetricReport};
use maprl::pipeline::{self, PipelineConfig};
use maprl::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "maprl", version, about = "Map entity representation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert GeoJSON layers and a trajectory CSV into atomic files.
    Convert {
        /// GeoJSON input, repeatable.
        #[arg(long = "geo", required = true)]
        geo: Vec<PathBuf>,
        /// Trajectory CSV.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long, default_value = "city")]
        city: String,
        #[arg(long, default_value = data::DEFAULT_CRS)]
        crs: String,
        /// Entity kind to declare when the layers mix geometry types.
        #[arg(long, value_parser = parse_entity)]
        entity: Option<EntityKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a directory of atomic files against the schema rules.
    Validate {
        #[arg(long)]
        data: PathBuf,
        /// Also write the violations to `<out>/validation.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic city.
    Synth {
        /// JSON synthetic-city spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pretraining, fine-tuning and evaluation from a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a combination grid; results append to `<out>/results.csv`.
    Grid {
        /// JSON grid spec: base config, datasets, seeds, optional combos.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run directories and grid stores into report tables.
    Report {
        /// Run output directories or grid results stores.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_entity(s: &str) -> Result<EntityKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "poi" => Ok(EntityKind::Poi),
        "segment" => Ok(EntityKind::Segment),
        "parcel" => Ok(EntityKind::Parcel),
        _ => Err(format!("unknown entity kind `{s}` (poi, segment, parcel)")),
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    base: PipelineConfig,
    datasets: Vec<GridDataset>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    /// Combination names such as `TokRI+MTR`; all when omitted.
    #[serde(default)]
    combos: Option<Vec<String>>,
}

fn mkdir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn convert(geo: &[PathBuf], traj: Option<&Path>, opts: ConvertOptions, out: &Path) -> anyhow::Result<()> {
    mkdir(out)?;
    let geo: Vec<&Path> = geo.iter().map(|p| p.as_path()).collect();
    let d = data::convert_standard(&geo, traj, out, &opts)?;
    println!("converted {} entities, {} trajectories into {}", d.entities.len(), d.trajectories.len(), out.display());
    Ok(())
}

fn validate(dir: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let d = data::load_dataset(dir)?;
    let violations = data::validate_dataset(&d);
    let text: String = violations.iter().map(|v| format!("{v}\n")).collect();
    if let Some(out) = out {
        mkdir(out)?;
        fs::write(out.join("validation.txt"), &text)?;
    }
    if violations.is_empty() {
        println!("ok: {} entities, {} trajectories, {} networks", d.entities.len(), d.trajectories.len(), d.networks.len());
        Ok(())
    } else {
        eprint!("{text}");
        Err(Error::Validation(violations).into())
    }
}

fn synth(spec: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let spec: SyntheticCitySpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| Error::Config(e.to_string()))?,
        None => SyntheticCitySpec::default(),
    };
    mkdir(out)?;
    let d = data::generate_synthetic_city(&spec)?;
    let paths = data::save_dataset(out, &d)?;
    println!("wrote {}, {}, {}", paths.geo.display(), paths.traj.display(), paths.rel.display());
    Ok(())
}

fn run(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut c = pipeline::load_config(config)?;
    let Some(out) = out.or_else(|| c.out.clone()) else {
        return Err(Error::Config("no output directory: pass --out or set `out` in the config".into()).into());
    };
    c.out = Some(out.clone());
    let result = pipeline::run_pipeline(&c)?;
    mkdir(&out)?;
    pipeline::write_outputs(&result, &out)?;
    for row in &result.aggregate {
        println!("{} {} {:.4} ± {:.4}", row.task, row.metric, row.mean, row.std);
    }
    println!("result hash {}", result.result_hash());
    Ok(())
}

fn grid(spec: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let g: GridSpec = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let mut base = g.base;
    base.dataset = None;
    base.synthetic_spec = None;
    let all = bench::enumerate_combinations(base.entity);
    let combos: Vec<CombinationSpec> = match &g.combos {
        None => all,
        Some(names) => names
            .iter()
            .map(|n| {
                all.iter()
                    .find(|c| c.name().eq_ignore_ascii_case(n))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("combos: `{n}` is not a valid {} combination", base.entity.name())))
            })
            .collect::<Result<_, _>>()?,
    };
    if g.datasets.is_empty() {
        return Err(Error::Config("datasets must not be empty".into()).into());
    }
    let seeds = g.seeds.unwrap_or_else(|| base.seeds.clone());
    mkdir(out)?;
    let store = out.join("results.csv");
    let s = bench::run_grid(&combos, &g.datasets, &seeds, &base, &store)?;
    println!("grid: {} run, {} skipped, {} failed; store {}", s.ran, s.skipped, s.failed, store.display());
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut store_rows = Vec::new();
    let mut reports: Vec<MetricReport> = Vec::new();
    for input in inputs {
        if !input.exists() {
            bail!(Error::Usage(format!("{} does not exist", input.display())));
        }
        let (store, run) = if input.is_dir() {
            (input.join("results.csv"), input.join("result.csv"))
        } else {
            let header = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            if header.starts_with("fingerprint,") {
                (input.clone(), PathBuf::new())
            } else {
                (PathBuf::new(), input.clone())
            }
        };
        let mut found = false;
        if store.is_file() {
            store_rows.extend(bench::read_store(&store)?);
            found = true;
        }
        if run.is_file() {
            let f = fs::File::open(&run).with_context(|| format!("reading {}", run.display()))?;
            reports.extend(read_reports_csv(f)?);
            found = true;
        }
        if !found {
            bail!(Error::Usage(format!("{} holds neither result.csv nor results.csv", input.display())));
        }
    }
    mkdir(out)?;
    if !reports.is_empty() {
        reports.sort_by(|a, b| (&a.task, a.seed).cmp(&(&b.task, b.seed)));
        let rows = aggregate_seeds(&reports)?;
        write_aggregate_csv(&rows, fs::File::create(out.join("aggregate.csv"))?)?;
        println!("wrote {}", out.join("aggregate.csv").display());
    }
    if !store_rows.is_empty() {
        let files = bench::emit_report(&store_rows, out)?;
        println!("wrote {} and {}", files.markdown.display(), files.csv.display());
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Convert { geo, traj, city, crs, entity, out } => {
            convert(&geo, traj.as_deref(), ConvertOptions { city, crs, entity_kind: entity }, &out)
        }
        Command::Validate { data, out } => validate(&data, out.as_deref()),
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Run { config, out } => run(&config, out),
        Command::Grid { spec, out } => grid(&spec, &out),
        Command::Report { inputs, out } => report(&inputs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
