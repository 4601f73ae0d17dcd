use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use laesim::evalharness::{
    compare, eval_seeds, export_trajectories, metrics, mean_row, run_baseline, BaselineKind,
    ComparisonRow, ComparisonTable,
};
use laesim::maddpg::{load_model, model_to_json, train, PolicyModel};
use laesim::radio::export_sinr_surface;
use laesim::tinynet::gradcheck::{run_suite, GradCheckReport};
use laesim::worldmodel::{load_scenario, ScenarioConfig};
use laesim::{header_comment, TOOL_VERSION};

const SEED_ENV: &str = "LAE_SIM_SEED";

#[derive(Debug, Parser)]
#[command(name = "laesim", version, about = "Semantic-aware UAV swarm planning under a dual-timescale RIC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy with MADDPG.
    Train(TrainArgs),
    /// Run a policy or baseline on evaluation seeds and report metrics.
    Eval(EvalArgs),
    /// Run several baselines on the same seeds.
    Compare(CompareArgs),
    /// Export a SINR surface at a fixed altitude.
    Map(MapArgs),
    /// Check backpropagation against finite differences.
    Gradcheck(GradcheckArgs),
    /// Load a scenario and report whether it is valid.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Base seed; falls back to LAE_SIM_SEED, then the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Which learned configuration to train: full, nosem or nosinr.
    #[arg(long, default_value = "full")]
    baseline: BaselineKind,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Trained policy file; required for learned baselines.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value = "full")]
    baseline: BaselineKind,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated baselines.
    #[arg(long, value_delimiter = ',', default_value = "full,shortest,nosem,nosinr")]
    baselines: Vec<BaselineKind>,
    /// Policy for a learned baseline as KIND=PATH; a bare PATH means full.
    #[arg(long)]
    policy: Vec<String>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    /// Altitude of the slice in meters.
    #[arg(long)]
    altitude: f64,
    /// Sample spacing in meters; defaults to the grid cell size.
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    scenario: PathBuf,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Debug, Serialize)]
struct Manifest {
    tool: String,
    subcommand: &'static str,
    scenario: String,
    scenario_digest: String,
    seed: u64,
    provenance: Vec<String>,
    outputs: Vec<String>,
    timestamp: u64,
}

/// Scenario resolved against flags and environment, plus where each
/// non-file value came from.
struct Resolved {
    scenario: ScenarioConfig,
    provenance: Vec<String>,
}

impl Resolved {
    fn digest(&self) -> String {
        self.scenario.digest()
    }
}

fn resolve(common: &Common, episodes: Option<(usize, &str)>) -> CliResult<Resolved> {
    let mut scenario = load_scenario(&common.scenario)?;
    let mut provenance = Vec::new();
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Failure::Usage(format!("{SEED_ENV} is not an unsigned integer: {v:?}")))?,
        ),
        Err(_) => None,
    };
    let seed = match (common.seed, env_seed) {
        (Some(s), _) => {
            provenance.push("seed: flag".to_string());
            Some(s)
        }
        (None, Some(s)) => {
            provenance.push(format!("seed: env {SEED_ENV}"));
            Some(s)
        }
        (None, None) => {
            provenance.push("seed: file".to_string());
            None
        }
    };
    if let Some(s) = seed {
        scenario.seed = s;
        scenario.rl.seed = s;
    }
    if let Some((n, field)) = episodes {
        if n == 0 {
            return Err(Failure::Usage("--episodes must be at least 1".into()));
        }
        match field {
            "rl.episodes" => scenario.rl.episodes = n,
            _ => scenario.rl.eval_episodes = n,
        }
        provenance.push(format!("{field}: flag"));
    }
    provenance.extend(scenario.provenance.iter().cloned());
    scenario.validate()?;
    Ok(Resolved {
        scenario,
        provenance,
    })
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Run(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, subcommand: &'static str, common: &Common, r: &Resolved) -> CliResult<()> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut outputs = self.written.clone();
        outputs.push("manifest.json".into());
        let m = Manifest {
            tool: format!("laesim {TOOL_VERSION}"),
            subcommand,
            scenario: common.scenario.display().to_string(),
            scenario_digest: r.digest(),
            seed: r.scenario.seed,
            provenance: r.provenance.clone(),
            outputs,
            timestamp,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        self.write("manifest.json", &text)
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    if !a.baseline.learned() {
        return Err(Failure::Usage(format!(
            "--baseline {} has nothing to train",
            a.baseline
        )));
    }
    let r = resolve(&a.common, a.episodes.map(|n| (n, "rl.episodes")))?;
    let total = r.scenario.rl.episodes;
    let quiet = a.common.quiet;
    let every = (total / 20).max(1);
    let mut progress = |ep: usize, ret: f64| {
        if !quiet && (ep.is_multiple_of(every) || ep + 1 == total) {
            eprintln!("episode {}/{total} team return {ret:.3}", ep + 1);
        }
    };
    let (model, report) = train(&r.scenario, a.baseline.mode(), Some(&mut progress))?;
    let mut out = Outputs::new(&a.common.out)?;
    out.write("model.json", &model_to_json(&model))?;
    out.write("report.json", &report.to_json())?;
    out.finish("train", &a.common, &r)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    match (a.baseline.learned(), &a.policy) {
        (true, None) => {
            return Err(Failure::Usage(format!(
                "--baseline {} needs --policy",
                a.baseline
            )))
        }
        (false, Some(_)) => {
            return Err(Failure::Usage(format!(
                "--baseline {} takes no --policy",
                a.baseline
            )))
        }
        _ => {}
    }
    let r = resolve(&a.common, a.episodes.map(|n| (n, "rl.eval_episodes")))?;
    let model = match &a.policy {
        Some(p) => Some(load_model(p, Some(r.scenario.n_agents()))?),
        None => None,
    };
    let seeds = eval_seeds(&r.scenario, r.scenario.rl.eval_episodes);
    let logs = run_baseline(a.baseline, &r.scenario, model.as_ref(), &seeds, true)?;
    let comment = header_comment(&r.digest());
    let per: Vec<_> = logs.iter().map(metrics).collect();
    let mut rows: Vec<ComparisonRow> = per
        .iter()
        .zip(&seeds)
        .map(|(m, &s)| ComparisonRow {
            kind: a.baseline,
            seed: Some(s),
            metrics: m.clone(),
        })
        .collect();
    rows.push(ComparisonRow {
        kind: a.baseline,
        seed: None,
        metrics: mean_row(&per),
    });
    let mut out = Outputs::new(&a.common.out)?;
    out.write("metrics.csv", &ComparisonTable { rows }.to_csv(&comment))?;
    for (k, log) in logs.iter().enumerate() {
        out.write(&format!("episode_{k:03}.jsonl"), &log.to_jsonl())?;
        out.write(
            &format!("trajectories_{k:03}.csv"),
            &export_trajectories(log, &comment),
        )?;
    }
    out.finish("eval", &a.common, &r)
}

fn parse_policies(specs: &[String]) -> CliResult<BTreeMap<BaselineKind, PathBuf>> {
    let mut map = BTreeMap::new();
    for spec in specs {
        let (kind, path) = match spec.split_once('=') {
            Some((k, p)) => (k.parse::<BaselineKind>().map_err(Failure::Usage)?, p),
            None => (BaselineKind::Full, spec.as_str()),
        };
        if !kind.learned() {
            return Err(Failure::Usage(format!("{kind} takes no policy")));
        }
        if map.insert(kind, PathBuf::from(path)).is_some() {
            return Err(Failure::Usage(format!("--policy given twice for {kind}")));
        }
    }
    Ok(map)
}

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let mut kinds: Vec<BaselineKind> = Vec::new();
    for &k in &a.baselines {
        if kinds.contains(&k) {
            return Err(Failure::Usage(format!("baseline {k} listed twice")));
        }
        kinds.push(k);
    }
    let paths = parse_policies(&a.policy)?;
    for k in kinds.iter().filter(|k| k.learned()) {
        if !paths.contains_key(k) {
            return Err(Failure::Usage(format!("baseline {k} needs --policy {k}=PATH")));
        }
    }
    for k in paths.keys() {
        if !kinds.contains(k) {
            return Err(Failure::Usage(format!("--policy for {k}, which is not in --baselines")));
        }
    }
    let r = resolve(&a.common, a.episodes.map(|n| (n, "rl.eval_episodes")))?;
    let mut models: BTreeMap<BaselineKind, PolicyModel> = BTreeMap::new();
    for (k, p) in &paths {
        models.insert(*k, load_model(p, Some(r.scenario.n_agents()))?);
    }
    let seeds = eval_seeds(&r.scenario, r.scenario.rl.eval_episodes);
    let table = compare(&r.scenario, &kinds, &models, &seeds)?;
    let mut out = Outputs::new(&a.common.out)?;
    out.write("compare.csv", &table.to_csv(&header_comment(&r.digest())))?;
    out.finish("compare", &a.common, &r)
}

fn cmd_map(a: &MapArgs) -> CliResult<()> {
    let r = resolve(&a.common, None)?;
    let sc = &r.scenario;
    let map = sc.world_map();
    let resolution = a.resolution.unwrap_or(sc.world.grid.cell_size);
    let surface = export_sinr_surface(
        a.altitude,
        resolution,
        sc.mission.mission_area,
        (sc.mission.z_min, sc.mission.z_max),
        &sc.radio.sites,
        &map,
        &sc.radio.params,
    )?;
    let mut out = Outputs::new(&a.common.out)?;
    out.write("sinr_surface.csv", &surface.to_csv(&header_comment(&r.digest())))?;
    out.finish("map", &a.common, &r)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    let report = run_suite(a.cases, a.seed.unwrap_or(0))?;
    println!(
        "cases={} tanh_cases={} max_rel_err={:.3e} (limit {:.0e}) max_rel_err_tanh={:.3e} (limit {:.0e})",
        report.cases,
        report.tanh_cases,
        report.max_rel_err,
        GradCheckReport::MIXED_LIMIT,
        report.max_rel_err_tanh,
        GradCheckReport::TANH_LIMIT
    );
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Run("gradcheck failed".into()))
    }
}

fn cmd_validate(a: &ValidateArgs) -> CliResult<()> {
    let sc = load_scenario(&a.scenario)?;
    println!(
        "{}: valid ({} agents, {} buildings, {} radio sites, digest {})",
        a.scenario.display(),
        sc.n_agents(),
        sc.world.buildings.len(),
        sc.radio.sites.len(),
        sc.digest()
    );
    for p in &sc.provenance {
        println!("  {p}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Map(a) => cmd_map(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
