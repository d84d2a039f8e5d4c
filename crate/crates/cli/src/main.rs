use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use intseg::bridging::Diversity;
use intseg::config::RunConfig;
use intseg::crossings::{TieStrength, Weighting};
use intseg::home::EsDefinition;
use intseg::nullmodels::Kernel;
use intseg::pipeline::{self, DecomposeBy, RegionReport};
use intseg::synthcity::{self, CityRecipe, HubPlacement};

#[derive(Parser)]
#[command(name = "intseg", version, about = "Interaction segregation from location pings")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(flatten)]
    over: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pings: Option<PathBuf>,
    #[arg(long, global = true)]
    properties: Option<PathBuf>,
    #[arg(long, global = true)]
    layers: Option<PathBuf>,
    /// Region polygon id or `all`.
    #[arg(long, global = true)]
    region: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dist_m: Option<f64>,
    #[arg(long, global = true)]
    time_s: Option<i64>,
    /// any | consecutive:K | unique_days:K
    #[arg(long, global = true)]
    tie_strength: Option<TieStrength>,
    /// dedup_pairs | count_repeats
    #[arg(long, global = true)]
    weighting: Option<Weighting>,
    /// rent | percentile | percentile_within_region | tract_income
    #[arg(long, global = true)]
    es_definition: Option<EsDefinition>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate and normalize raw pings.
    Ingest,
    /// Infer one home per person from night pings.
    InferHomes,
    /// Attach economic standing to inferred homes.
    LinkEs,
    /// Detect interactions between persons.
    Join,
    /// Label interactions with place, time and tract context.
    Annotate,
    /// Estimate interaction segregation for the configured region.
    Segregate,
    /// Neighborhood sorting index of the configured region.
    Nsi,
    /// Interaction segregation by hour, POI category, tract context or road.
    Decompose {
        #[arg(long, value_parser = parse_by)]
        by: Option<DecomposeBy>,
        /// Also write the robustness matrix.
        #[arg(long)]
        robustness: bool,
    },
    /// Bridging index of the layer's hubs with a random-hub ablation.
    Bridge {
        #[arg(long)]
        hubs: Option<PathBuf>,
        #[arg(long)]
        measure: Option<Diversity>,
        #[arg(long)]
        ablate_trials: Option<usize>,
    },
    /// Null-model interaction networks.
    Nullmodel {
        #[command(subcommand)]
        model: NullCmd,
    },
    /// Generate a synthetic city as pipeline inputs.
    Synth(SynthArgs),
    /// Measure a family of synthetic cities and write the sweep table.
    Sweep(SweepArgs),
    /// Merge per-region JSON reports into one sweep-table CSV.
    Report {
        /// Region JSON files or directories searched for `region.json`.
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        /// Merge even when config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum NullCmd {
    Homophily {
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long = "H")]
        h: Option<f64>,
        #[arg(long)]
        kernel: Option<Kernel>,
    },
    ConfigModel,
}

#[derive(Args)]
struct SynthArgs {
    /// Recipe JSON; omitted fields take recipe defaults.
    #[arg(long, conflicts_with = "preset")]
    recipe: Option<PathBuf>,
    /// default | mechanism | bridging | segregating | homophily-visitor | stratified
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Destination directory for pings.csv, properties.csv, layers.jsonl, truth.json.
    #[arg(long)]
    dest: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// mechanism | hubs | stratified
    #[arg(long, default_value = "mechanism")]
    kind: String,
    /// Comma-separated populations.
    #[arg(long, value_delimiter = ',', default_value = "300,600,900,1200,1500")]
    populations: Vec<usize>,
    /// Replicate seeds per population.
    #[arg(long, default_value_t = 1)]
    replicates: u64,
    #[arg(long, short)]
    output: PathBuf,
}

fn parse_by(s: &str) -> std::result::Result<DecomposeBy, String> {
    s.parse().map_err(|e: intseg::Error| e.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_logging(cli.json_logs);
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            let code = e.downcast_ref::<intseg::Error>().map(|e| e.exit_code()).unwrap_or(2);
            log::error!("{e:#}");
            std::process::exit(code);
        }
    }
}

fn init_logging(json: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().to_string(),
                "target": rec.target(),
                "message": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    b.init();
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.over;
    if let Some(v) = &o.out_dir {
        cfg.paths.out_dir = v.clone();
    }
    if let Some(v) = &o.pings {
        cfg.paths.pings = Some(v.clone());
    }
    if let Some(v) = &o.properties {
        cfg.paths.properties = Some(v.clone());
    }
    if let Some(v) = &o.layers {
        cfg.paths.layers = Some(v.clone());
    }
    if let Some(v) = &o.region {
        cfg.region = v.clone();
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.dist_m {
        cfg.join.dist_m = v;
    }
    if let Some(v) = o.time_s {
        cfg.join.time_s = v;
    }
    if let Some(v) = o.tie_strength {
        cfg.join.tie_strength = v;
    }
    if let Some(v) = o.weighting {
        cfg.join.weighting = v;
    }
    if let Some(v) = o.es_definition {
        cfg.es_definition = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Ingest => print_json(&pipeline::stage_ingest(&cfg)?),
        Cmd::InferHomes => {
            let n = pipeline::stage_infer_homes(&cfg)?;
            log::info!("inferred {n} homes");
            Ok(())
        }
        Cmd::LinkEs => print_json(&pipeline::stage_link_es(&cfg)?),
        Cmd::Join => print_json(&pipeline::stage_join(&cfg)?),
        Cmd::Annotate => {
            let n = pipeline::stage_annotate(&cfg)?;
            log::info!("annotated {n} interactions");
            Ok(())
        }
        Cmd::Segregate => print_json(&pipeline::stage_segregate(&cfg)?),
        Cmd::Nsi => print_json(&pipeline::stage_nsi(&cfg)?),
        Cmd::Decompose { by, robustness } => {
            if by.is_none() && !robustness {
                return Err(intseg::Error::Config("decompose needs --by or --robustness".into()).into());
            }
            if let Some(by) = by {
                print_json(&pipeline::stage_decompose(&cfg, by)?)?;
            }
            if robustness {
                print_json(&pipeline::stage_robustness(&cfg)?)?;
            }
            Ok(())
        }
        Cmd::Bridge { hubs, measure, ablate_trials } => {
            if let Some(h) = hubs {
                cfg.paths.layers = Some(h);
            }
            if let Some(m) = measure {
                cfg.bridge.measure = m;
            }
            if let Some(t) = ablate_trials {
                cfg.bridge.ablation_trials = t;
            }
            print_json(&pipeline::stage_bridge(&cfg)?)
        }
        Cmd::Nullmodel { model } => match model {
            NullCmd::Homophily { degree, h, kernel } => {
                if let Some(d) = degree {
                    cfg.null.degree_per_person = d;
                }
                if let Some(h) = h {
                    cfg.null.h = h;
                }
                if let Some(k) = kernel {
                    cfg.null.kernel = k;
                }
                print_json(&pipeline::stage_null_homophily(&cfg)?)
            }
            NullCmd::ConfigModel => print_json(&pipeline::stage_null_config(&cfg)?),
        },
        Cmd::Synth(a) => synth(&cfg, a),
        Cmd::Sweep(a) => sweep(&cfg, a),
        Cmd::Report { inputs, output, force } => report(&inputs, &output, force),
    }
}

fn preset(name: &str, population: usize, seed: u64) -> Result<CityRecipe> {
    Ok(match name {
        "default" => CityRecipe { population, seed, ..CityRecipe::default() },
        "mechanism" => CityRecipe::mechanism(population, seed),
        "bridging" => CityRecipe::hub_regime(population, HubPlacement::Bridging, seed),
        "segregating" => CityRecipe::hub_regime(population, HubPlacement::Segregating, seed),
        "homophily-visitor" => CityRecipe::homophily_visitor(population, seed),
        "stratified" => CityRecipe::stratified(population, seed),
        _ => return Err(intseg::Error::Config(format!("unknown preset `{name}`")).into()),
    })
}

fn synth(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    let mut recipe = match (&a.recipe, &a.preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<CityRecipe>(&text)
                .map_err(|e| intseg::Error::Config(format!("{}: {e}", p.display())))?
        }
        (None, Some(name)) => preset(name, a.population.unwrap_or(1000), cfg.seed)?,
        (None, None) => CityRecipe { seed: cfg.seed, ..CityRecipe::default() },
    };
    if let Some(n) = a.population {
        recipe.population = n;
    }
    if let Some(d) = a.days {
        recipe.days = d;
    }
    let city = synthcity::generate(&recipe)?;
    pipeline::write_city(&city, &a.dest)?;
    log::info!("wrote {} persons and {} pings to {}", recipe.population, city.pings.len(), a.dest.display());
    Ok(())
}

fn sweep(cfg: &RunConfig, a: SweepArgs) -> Result<()> {
    let mut recipes = Vec::new();
    for &n in &a.populations {
        for r in 0..a.replicates {
            let seed = intseg::seed::derive_seed(cfg.seed, &["sweep", &a.kind, &n.to_string(), &r.to_string()]);
            let (label, recipe) = match a.kind.as_str() {
                "mechanism" => (format!("mech_{n}_{r}"), CityRecipe::mechanism(n, seed)),
                "hubs" => {
                    recipes
                        .push((format!("bridging_{n}_{r}"), CityRecipe::hub_regime(n, HubPlacement::Bridging, seed)));
                    (format!("segregating_{n}_{r}"), CityRecipe::hub_regime(n, HubPlacement::Segregating, seed))
                }
                "stratified" => (format!("stratified_{n}_{r}"), CityRecipe::stratified(n, seed)),
                k => return Err(intseg::Error::Config(format!("unknown sweep kind `{k}`")).into()),
            };
            recipes.push((label, recipe));
        }
    }
    let res = synthcity::sweep(&recipes, &cfg.join)?;
    pipeline::write_csv(&a.output, &res.rows, pipeline::SWEEP_HEADER)?;
    print_json(&serde_json::json!({
        "regions": res.rows.len(),
        "spearman_population_is": res.spearman_population_is,
    }))
}

fn region_files(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            collect(p, &mut files);
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    files
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(rd) = std::fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out);
        } else if p.file_name().is_some_and(|n| n == pipeline::REGION) {
            out.push(p);
        }
    }
}

fn report(inputs: &[PathBuf], output: &Path, force: bool) -> Result<()> {
    let mut reports: Vec<RegionReport> = Vec::new();
    for f in region_files(inputs) {
        let r: RegionReport = pipeline::read_json(&f).with_context(|| format!("reading {}", f.display()))?;
        reports.push(r);
    }
    let rows = pipeline::merge_reports(&reports, force)?;
    pipeline::write_csv(output, &rows, pipeline::SWEEP_HEADER)?;
    log::info!("merged {} regions into {}", rows.len(), output.display());
    Ok(())
}
