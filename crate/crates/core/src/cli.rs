//! Command-line front end.
//!
//! ```text
//! netcoop generate --config run.toml
//! netcoop run      --config run.toml --scenario admm_2_iter
//! netcoop compare  --config run.toml --scenarios independent,full_cooperative
//! ```
//!
//! Output layout under the configured directory:
//!
//! ```text
//! data/manifest.json
//! data/seed_<s>/{prices,volumes,spreads}.csv
//! runs/<scenario>/{stats,series,flagged}.csv
//! runs/<scenario>/transcripts/seed_<s>.jsonl
//! comparison.csv
//! comparison_series.csv
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing inputs,
//! 4 numerical failure, 5 comparison mismatch, 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{
    compare_stats, comparison_csv, parse_stats_csv, prepare_inputs, run_batch, series_csv, stats_csv,
    transcript_jsonl, BacktestConfig, BacktestInputs, ProtocolConfig, RunOptions, Scenario, ScenarioResult,
};
use crate::conic::{ClarabelSolver, ConvexSolverPort};
use crate::error::{Error, Result};
use crate::synthetic_market::{gen_market, read_series_csv, write_series_csv, AlphaGenSpec, MarketSeries, MarketSpec};

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "NETCOOP_THREADS";

const SERIES_FILES: [&str; 3] = ["prices.csv", "volumes.csv", "spreads.csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Interior-point settings used by every backtest solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iter: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 200 }
    }
}

impl SolverConfig {
    pub fn build(&self) -> ClarabelSolver {
        ClarabelSolver { max_iter: self.max_iter, ..ClarabelSolver::with_tolerance(self.tolerance) }
    }
}

/// Contents of a run configuration file (TOML).
///
/// `seeds` and `output.dir` are required; every other section falls back
/// to its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output: OutputConfig,
    #[serde(default)]
    pub market: MarketSpec,
    #[serde(default)]
    pub alpha: AlphaGenSpec,
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config(format!("seeds contains duplicates: {:?}", self.seeds)));
        }
        self.market.validate()?;
        self.alpha.validate()?;
        self.backtest_config().validate()?;
        if !(self.solver.tolerance > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config("solver.tolerance and solver.max_iter must be positive".into()));
        }
        if self.market.periods_per_year != self.backtest.periods_per_year {
            return Err(Error::Config(format!(
                "market.periods_per_year ({}) differs from backtest.periods_per_year ({})",
                self.market.periods_per_year, self.backtest.periods_per_year
            )));
        }
        let needed = self.backtest.periods + self.alpha.horizon;
        if self.market.periods < needed {
            return Err(Error::Config(format!(
                "market.periods = {} is shorter than backtest.periods + alpha.horizon = {needed}",
                self.market.periods
            )));
        }
        Ok(())
    }

    /// Backtest settings with the protocol section folded in.
    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig { protocol: self.protocol, ..self.backtest.clone() }
    }

    /// SHA-256 of the canonical form of everything except the output directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        hash_of(&canonical)
    }

    /// SHA-256 of the market section, which alone determines the data files.
    pub fn market_hash(&self) -> Result<String> {
        hash_of(&self.market)
    }
}

fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// Written next to the generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub market_hash: String,
    pub n_assets: usize,
    pub periods: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(name = "netcoop", version, about = "Cooperative netting of trading costs across portfolio managers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds overriding `seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic market data for every seed.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Backtest one scenario on every seed.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// independent, full_cooperative, admm_2_iter, admm_5_iter or admm_k:<K>.
        #[arg(long)]
        scenario: String,
    },
    /// Compare scenarios, running those without stored results.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated scenario names.
        #[arg(long)]
        scenarios: String,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Numerical(_) | Error::Solver(_) | Error::Oracle { .. } | Error::Dimension { .. } => 4,
        Error::Mismatch(_) => 5,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds.clone();
    }
    config.validate()?;
    Ok(config)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { common } => {
            let config = resolve(&common)?;
            with_threads(common.threads, || cmd_generate(&config))
        }
        Command::Run { common, scenario } => {
            let scenario: Scenario = scenario.parse()?;
            let config = resolve(&common)?;
            with_threads(common.threads, || cmd_run(&config, scenario).map(|_| ()))
        }
        Command::Compare { common, scenarios } => {
            let scenarios = parse_scenarios(&scenarios)?;
            let config = resolve(&common)?;
            with_threads(common.threads, || cmd_compare(&config, &scenarios))
        }
    }
}

/// Parses a comma-separated scenario list.
pub fn parse_scenarios(list: &str) -> Result<Vec<Scenario>> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config(format!("--scenarios is empty; valid names: {}", Scenario::VALID_NAMES)));
    }
    names.into_iter().map(str::parse).collect()
}

/// Writes `contents` to a temporary sibling, then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn data_dir(config: &RunConfig) -> PathBuf {
    config.output.dir.join("data")
}

pub fn seed_dir(config: &RunConfig, seed: u64) -> PathBuf {
    data_dir(config).join(format!("seed_{seed}"))
}

/// Directory of one scenario's results; `:` is replaced so the name is
/// portable.
pub fn run_dir(config: &RunConfig, scenario: Scenario) -> PathBuf {
    config.output.dir.join("runs").join(scenario.to_string().replace(':', "_"))
}

/// Writes market data for every seed plus the manifest.
pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    use rayon::prelude::*;
    let started = Instant::now();
    config.seeds.par_iter().try_for_each(|&seed| -> Result<()> {
        let (market, _) = gen_market(&config.market, seed)?;
        let dir = seed_dir(config, seed);
        fs::create_dir_all(&dir)?;
        for (name, values) in SERIES_FILES.iter().zip([&market.prices, &market.volumes, &market.spreads]) {
            let path = dir.join(name);
            let tmp = temp_sibling(&path);
            write_series_csv(&tmp, &market.dates, values)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(())
    })?;
    let manifest = Manifest {
        seeds: config.seeds.clone(),
        config_hash: config.config_hash()?,
        market_hash: config.market_hash()?,
        n_assets: config.market.n_assets,
        periods: config.market.periods,
        files: config
            .seeds
            .iter()
            .flat_map(|s| SERIES_FILES.iter().map(move |f| format!("seed_{s}/{f}")))
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&data_dir(config).join("manifest.json"), json.as_bytes())?;
    eprintln!("generated {} seed(s) in {:.1}s", config.seeds.len(), started.elapsed().as_secs_f64());
    Ok(())
}

/// Reads the manifest and checks it covers the configured seeds and market.
pub fn load_manifest(config: &RunConfig) -> Result<Manifest> {
    let path = data_dir(config).join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}; run `netcoop generate` first", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    if manifest.market_hash != config.market_hash()? {
        return Err(Error::MissingInput(format!(
            "{} was generated from a different market section; rerun `netcoop generate`",
            path.display()
        )));
    }
    if let Some(s) = config.seeds.iter().find(|s| !manifest.seeds.contains(s)) {
        return Err(Error::MissingInput(format!("no generated data for seed {s}; rerun `netcoop generate`")));
    }
    Ok(manifest)
}

/// Loads one seed's market from disk.
pub fn load_market(config: &RunConfig, seed: u64) -> Result<MarketSeries> {
    let dir = seed_dir(config, seed);
    let mut series = SERIES_FILES.iter().map(|f| read_series_csv(&dir.join(f)));
    let (dates, prices) = series.next().expect("three files")?;
    let (vol_dates, volumes) = series.next().expect("three files")?;
    let (spread_dates, spreads) = series.next().expect("three files")?;
    if vol_dates != dates || spread_dates != dates {
        return Err(Error::MissingInput(format!("{}: series dates disagree", dir.display())));
    }
    MarketSeries::from_prices(dates, prices, volumes, spreads, config.market.period_risk_free())
        .map_err(|e| Error::MissingInput(format!("{}: {e}", dir.display())))
}

/// Loads every configured seed and derives its backtest inputs.
pub fn load_inputs(config: &RunConfig) -> Result<Vec<BacktestInputs>> {
    use rayon::prelude::*;
    load_manifest(config)?;
    let backtest = config.backtest_config();
    config
        .seeds
        .par_iter()
        .map(|&seed| prepare_inputs(&backtest, &config.alpha, load_market(config, seed)?, seed))
        .collect()
}

fn solver(config: &RunConfig) -> Arc<dyn ConvexSolverPort> {
    Arc::new(config.solver.build())
}

fn write_results(config: &RunConfig, scenario: Scenario, results: &[ScenarioResult]) -> Result<()> {
    let dir = run_dir(config, scenario);
    fs::create_dir_all(&dir)?;
    let ppy = config.backtest.periods_per_year as f64;
    write_atomic(&dir.join("stats.csv"), stats_csv(results, ppy)?.as_bytes())?;
    write_atomic(&dir.join("series.csv"), series_csv(results)?.as_bytes())?;
    let mut flagged = String::from("seed,period,reason\n");
    for r in results {
        for (t, reason) in &r.flagged {
            flagged.push_str(&format!("{},{t},\"{}\"\n", r.seed, reason.replace('"', "\"\"")));
        }
    }
    write_atomic(&dir.join("flagged.csv"), flagged.as_bytes())?;
    if matches!(scenario, Scenario::Admm(_)) {
        let tdir = dir.join("transcripts");
        fs::create_dir_all(&tdir)?;
        for r in results {
            write_atomic(&tdir.join(format!("seed_{}.jsonl", r.seed)), transcript_jsonl(r)?.as_bytes())?;
        }
    }
    Ok(())
}

fn run_scenarios(config: &RunConfig, scenarios: &[Scenario]) -> Result<Vec<ScenarioResult>> {
    let inputs = load_inputs(config)?;
    let options = RunOptions { keep_transcripts: true, check_dominance: false };
    let started = Instant::now();
    let results = run_batch(&config.backtest_config(), &inputs, scenarios, options, solver(config))?;
    for s in scenarios {
        let mine: Vec<ScenarioResult> = results.iter().filter(|r| r.scenario == *s).cloned().collect();
        write_results(config, *s, &mine)?;
        let flagged: usize = mine.iter().map(|r| r.flagged.len()).sum();
        eprintln!("{s}: {} seed(s), {flagged} flagged rebalance(s)", mine.len());
    }
    eprintln!("ran {} scenario(s) in {:.1}s", scenarios.len(), started.elapsed().as_secs_f64());
    Ok(results)
}

/// Backtests one scenario on every seed and writes its result files.
pub fn cmd_run(config: &RunConfig, scenario: Scenario) -> Result<Vec<ScenarioResult>> {
    run_scenarios(config, &[scenario])
}

/// Writes `comparison.csv` and `comparison_series.csv`.
///
/// Scenarios that already have a `stats.csv` are read back; the rest are
/// run first on the configured seeds.
pub fn cmd_compare(config: &RunConfig, scenarios: &[Scenario]) -> Result<()> {
    let mut unique: Vec<Scenario> = Vec::new();
    for s in scenarios {
        if !unique.contains(s) {
            unique.push(*s);
        }
    }
    let missing: Vec<Scenario> = unique.iter().copied().filter(|s| !run_dir(config, *s).join("stats.csv").exists()).collect();
    if !missing.is_empty() {
        run_scenarios(config, &missing)?;
    }
    let mut rows = Vec::new();
    let mut series = String::new();
    for s in &unique {
        let dir = run_dir(config, *s);
        let read = |f: &str| {
            fs::read_to_string(dir.join(f)).map_err(|e| Error::MissingInput(format!("{}: {e}", dir.join(f).display())))
        };
        rows.extend(parse_stats_csv(&read("stats.csv")?)?);
        let text = read("series.csv")?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if series.is_empty() {
            series.push_str(header);
            series.push('\n');
        }
        for line in lines {
            series.push_str(line);
            series.push('\n');
        }
    }
    let comparison = compare_stats(scenarios, &rows)?;
    fs::create_dir_all(&config.output.dir)?;
    write_atomic(&config.output.dir.join("comparison.csv"), comparison_csv(&comparison)?.as_bytes())?;
    write_atomic(&config.output.dir.join("comparison_series.csv"), series.as_bytes())?;
    Ok(())
}
