//! `bouquet`: emulate heterogeneous federated-learning clients on one host.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bouquet::analysis::{emit_validation_report, load_benchmark, AnalysisError};
use bouquet::enforcer::{
    build_backend, probe_host, BackendCapabilityReport, BackendKind, Enforcer, ProbeConfig,
    ProbeResult, SystemRunner,
};
use bouquet::experiment::{load_reports, prepare, run_experiment, ExperimentConfig, ExperimentError};
use bouquet::profiles::{load_catalogs, Catalog, HostCapabilities};
use bouquet::sampler::{describe_sample, load_popularity_table, sample_federation, SamplerFilter};
use bouquet::scheduler::{install_termination_handler, RunMode, RunStatus};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PRIVILEGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "bouquet", version, about = "Emulate heterogeneous FL client hardware on a single host")]
struct Cli {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Inspect host hardware and which enforcement mechanisms work.
    Probe(ProbeArgs),
    /// Draw a federation from a popularity table.
    Sample(SampleArgs),
    /// Run an experiment.
    Run(RunArgs),
    /// Correlate run times with a benchmark.
    Validate(ValidateArgs),
    /// Restore hardware defaults and remove leftover orchestrator state.
    Reset(ResetArgs),
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Profile catalog used to recognise the GPU.
    #[arg(long = "catalog")]
    catalogs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long = "catalog")]
    catalogs: Vec<PathBuf>,
    #[arg(long)]
    popularity: Option<PathBuf>,
    /// Number of clients to draw.
    #[arg(long)]
    n: Option<usize>,
    /// Also print a histogram.
    #[arg(long)]
    summary: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    mode: Option<RunMode>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    /// Record unsupported mechanisms as skipped instead of refusing to run.
    #[arg(long)]
    degrade_allowed: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Directory holding manifest.json and round-*.jsonl.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    /// Catalog for generation labels; defaults to the one in the manifest.
    #[arg(long = "catalog")]
    catalogs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ResetArgs {
    #[arg(long, default_value = "real")]
    backend: BackendKind,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_privilege() {
            EXIT_PRIVILEGE
        } else if e.is_config() {
            EXIT_CONFIG
        } else {
            EXIT_RUNTIME
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    config.resolve_paths(&base);
    Ok(config)
}

fn probe(catalog: Option<Catalog>) -> ProbeResult {
    let cfg = ProbeConfig {
        catalog,
        ..ProbeConfig::default()
    };
    probe_host(&cfg, &SystemRunner)
}

fn print_probe(result: &ProbeResult) {
    let h = &result.host;
    let hw = &h.hardware;
    println!("CPU        {} ({} cores / {} threads, {}-{} MHz)", hw.cpu.model_name, hw.cpu.cores, hw.cpu.threads, hw.cpu.base_clock_mhz, hw.cpu.boost_clock_mhz);
    println!("RAM        {} MiB", hw.ram_mib);
    match &hw.gpu {
        Some(g) => println!("GPU        {} ({} CUDA cores, {} MiB)", g.model_name, g.cuda_cores, g.vram_mib),
        None => println!("GPU        none"),
    }
    println!("privileged {}", h.is_privileged);
    println!();
    print_capabilities(&result.report);
}

fn print_capabilities(report: &BackendCapabilityReport) {
    println!("{:<14} {:<10} note", "mechanism", "supported");
    for (m, s) in &report.mechanisms {
        println!(
            "{:<14} {:<10} {}",
            m.to_string(),
            if s.supported { "yes" } else { "no" },
            s.reason.as_deref().unwrap_or("")
        );
    }
}

fn cmd_probe(cli: &Cli, args: &ProbeArgs) -> CmdResult {
    let mut paths = args.catalogs.clone();
    if paths.is_empty() {
        if let Some(cfg) = cli.config.as_deref().map(load_config).transpose()? {
            paths = cfg.catalog_paths;
        }
    }
    // Probing never fails; an unreadable catalog only means no GPU match.
    let catalog = (!paths.is_empty()).then(|| load_catalogs(&paths).ok()).flatten();
    let result = probe(catalog);
    if cli.json {
        print_json(&result);
    } else {
        print_probe(&result);
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    seed: u64,
    n: usize,
    federation: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<BTreeMap<String, usize>>,
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> CmdResult {
    let config = cli.config.as_deref().map(load_config).transpose()?;
    let catalogs = match (&config, args.catalogs.is_empty()) {
        (_, false) => args.catalogs.clone(),
        (Some(c), true) => c.catalog_paths.clone(),
        (None, true) => return Err(Failure::config("no catalog given (--catalog or --config)")),
    };
    let popularity = args
        .popularity
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.popularity_path.clone()))
        .ok_or_else(|| Failure::config("no popularity table given (--popularity or --config)"))?;
    let n = args
        .n
        .or(config.as_ref().map(|c| c.clients_per_round))
        .unwrap_or(0);
    let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    let filter = config.map(|c| c.filter).unwrap_or_else(SamplerFilter::default);

    let catalog = load_catalogs(&catalogs).map_err(Failure::config)?;
    let table = load_popularity_table(&popularity, &catalog).map_err(Failure::config)?;
    let federation = sample_federation(&table, &catalog, n, seed, &filter).map_err(Failure::config)?;
    let summary = args.summary.then(|| describe_sample(&federation));

    if cli.json {
        print_json(&SampleOutput {
            seed,
            n,
            federation: &federation,
            summary,
        });
        return Ok(());
    }
    for id in &federation {
        println!("{id}");
    }
    if let Some(hist) = summary {
        println!();
        for (id, count) in &hist {
            println!("{id:<24} {count:>8} {:.4}", *count as f64 / n.max(1) as f64);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RoundLine {
    round_idx: usize,
    clients: usize,
    ok: usize,
    failed: usize,
    statuses: BTreeMap<String, usize>,
}

/// For the mock backends the configured host profile stands in for the
/// machine, with every capability present.
fn emulated_host(catalog: &Catalog, id: &str) -> Result<HostCapabilities, Failure> {
    let hardware = catalog.resolve(id).map_err(Failure::config)?.clone();
    Ok(HostCapabilities {
        hardware,
        has_gpu_management_tool: true,
        has_mps: true,
        has_cgroup_v2: true,
        has_cpu_freq_control: true,
        is_privileged: true,
    })
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> CmdResult {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::config("run requires --config"))?;
    let mut config = load_config(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = std::path::absolute(dir).unwrap_or_else(|_| dir.clone());
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(backend) = args.backend {
        config.backend = backend;
    }
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if let Some(n) = args.clients_per_round {
        config.clients_per_round = n;
    }
    config.degrade_allowed |= args.degrade_allowed;

    let prep = prepare(config)?;
    install_termination_handler();

    let (host, enforcer) = match prep.config.mode {
        RunMode::Simulated => (prep.simulated_host()?, None),
        RunMode::Real => {
            let probed = probe(Some(prep.catalog.clone()));
            let host = match (&prep.config.host_profile_id, prep.config.backend) {
                (Some(id), BackendKind::Mock | BackendKind::MockCommand) => emulated_host(&prep.catalog, id)?,
                _ => probed.host.clone(),
            };
            let backend = build_backend(prep.config.backend, &probed).map_err(Failure::config)?;
            (host, Some(Enforcer::new(backend)))
        }
    };

    let json = cli.json;
    let mut lines = Vec::new();
    let reports = run_experiment(&prep, &host, enforcer.as_ref(), |report| {
        let mut statuses = BTreeMap::new();
        for run in &report.runs {
            let key = match run.status {
                RunStatus::NonzeroExit { .. } => "nonzero_exit".to_string(),
                ref s => s.to_string(),
            };
            *statuses.entry(key).or_insert(0) += 1;
        }
        let ok = report.runs.iter().filter(|r| r.status.is_ok()).count();
        let line = RoundLine {
            round_idx: report.round_idx,
            clients: report.runs.len(),
            ok,
            failed: report.runs.len() - ok,
            statuses,
        };
        if !json {
            let detail: Vec<String> = line.statuses.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!(
                "round {}: {} clients, {} ok, {} failed ({})",
                line.round_idx,
                line.clients,
                line.ok,
                line.failed,
                detail.join(" ")
            );
        }
        lines.push(line);
    })?;
    debug_assert_eq!(reports.len(), lines.len());

    if json {
        print_json(&serde_json::json!({
            "output_dir": prep.config.output_dir,
            "mode": prep.config.mode,
            "rounds": lines,
        }));
    } else {
        println!("reports written to {}", prep.config.output_dir.display());
    }
    Ok(())
}

fn analysis_failure(e: AnalysisError) -> Failure {
    match e {
        AnalysisError::MissingBenchmarkEntry(_)
        | AnalysisError::UnknownProfile(_)
        | AnalysisError::BenchmarkParse { .. } => Failure::config(e),
        other => Failure::runtime(other),
    }
}

fn cmd_validate(cli: &Cli, args: &ValidateArgs) -> CmdResult {
    let reports = load_reports(&args.reports).map_err(Failure::config)?;
    let catalogs = if args.catalogs.is_empty() {
        let manifest = std::fs::read_to_string(args.reports.join(bouquet::experiment::MANIFEST_FILE))
            .map_err(Failure::config)?;
        let manifest: bouquet::experiment::Manifest =
            serde_json::from_str(&manifest).map_err(Failure::config)?;
        manifest.config.catalog_paths
    } else {
        args.catalogs.clone()
    };
    let catalog = load_catalogs(&catalogs).map_err(Failure::config)?;
    let benchmark = match load_benchmark(&args.benchmark) {
        Ok(b) => b,
        Err(AnalysisError::Io { path, source }) => return Err(Failure::config(format!("{path}: {source}"))),
        Err(e) => return Err(analysis_failure(e)),
    };
    let out_dir = cli.output_dir.clone().unwrap_or_else(|| args.reports.clone());
    let output = emit_validation_report(&reports, &benchmark, &catalog, &out_dir).map_err(analysis_failure)?;
    let s = &output.summary;
    if cli.json {
        print_json(s);
    } else {
        println!("ρ={:.3} τ={:.3}", s.spearman_rho, s.kendall_tau_b);
        println!("n={} mode={} excluded={}", s.n, s.mode, s.excluded.join(","));
        println!("wrote {}", output.table_csv.display());
    }
    Ok(())
}

fn cmd_reset(cli: &Cli, args: &ResetArgs) -> CmdResult {
    let probed = probe(None);
    let backend = build_backend(args.backend, &probed).map_err(Failure::config)?;
    let enforcer = Enforcer::new(backend);
    let report = enforcer.emergency_reset();
    if cli.json {
        print_json(&report);
    } else if report.is_clean() {
        println!("nothing to do");
    } else {
        for line in &report.lines {
            println!("{line}");
        }
    }
    if report.has_failures() {
        return Err(Failure::runtime("some reset actions failed"));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Probe(a) => cmd_probe(&cli, a),
        Cmd::Sample(a) => cmd_sample(&cli, a),
        Cmd::Run(a) => cmd_run(&cli, a),
        Cmd::Validate(a) => cmd_validate(&cli, a),
        Cmd::Reset(a) => cmd_reset(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
