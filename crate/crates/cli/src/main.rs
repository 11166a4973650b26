use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use triage_core::harness::{compare_runs, render_comparison, run_eval, HarnessError, LoadedRun, RunConfig};
use triage_core::ingest::{
    build_silver_tasks, curate, load_encounters, partition_chunks, write_csv, CurationRules, DatasetFormat,
};
use triage_core::jsonl;
use triage_core::metrics::{aggregate_token_saliency, render_report, ReportFormat};

const CONFIG_ERROR: u8 = 2;
const DATA_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "triage", version, about = "Evaluate ESI triage prediction pipelines")]
struct Cli {
    /// Log level for stderr diagnostics (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run configuration and the files it references.
    Validate { config: PathBuf },
    /// Execute a run and print its report.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the configured parallelism cap.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Print the report stored in a run artifact.
    Report {
        artifact: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Also print token saliency aggregated by outcome.
        #[arg(long)]
        saliency: bool,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Aggregate saliency over every level instead of ESI 2 and 3 only.
        #[arg(long)]
        all_levels: bool,
    },
    /// Metric deltas (b - a) and changed predictions between two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Apply the curation filters to a dataset.
    Curate {
        dataset: PathBuf,
        /// TOML file overriding the default curation rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Write retained encounters here (.csv or .jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a dataset into k near-equal contiguous chunks.
    Chunk {
        dataset: PathBuf,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        k: u32,
        /// Write chunk_01.jsonl ... into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Emit silver vignette-generation tasks as JSONL.
    SilverTasks {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self { code, message: message.to_string() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self::new(e.exit_code() as u8, e)
    }
}

type CliResult = Result<(), Failure>;

fn load_dataset(path: &Path) -> Result<Vec<triage_core::domain::TriageEncounter>, Failure> {
    load_encounters(path, DatasetFormat::from_path(path)).map_err(|e| Failure::new(DATA_ERROR, e))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::new(DATA_ERROR, format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Failure::new(DATA_ERROR, e))
        }
    }
}

fn validate(config: &Path) -> CliResult {
    let c = RunConfig::load(config).map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    c.validate().map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    let pack = c.load_prompts().map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    let strategy = c.strategy().map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    println!(
        "ok: pipeline={} ablation={} strategy={} backend={} prompts={}",
        c.pipeline.kind,
        c.pipeline.ablation,
        strategy.name(),
        c.backend.kind_name(),
        pack.version()
    );
    Ok(())
}

fn run(config: &Path, format: ReportFormat, output_dir: Option<PathBuf>, parallelism: Option<usize>) -> CliResult {
    let mut c = RunConfig::load(config).map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    if let Some(dir) = output_dir {
        c.output_dir = dir;
    }
    if let Some(p) = parallelism {
        c.parallelism = p;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new(1, e))?;
    let artifact = rt.block_on(run_eval(&c))?;
    print!("{}", render_report(&artifact.report, format));
    eprintln!("artifact: {}", c.output_dir.display());
    eprintln!("predictions digest: {}", artifact.predictions_digest);
    Ok(())
}

fn report(artifact: &Path, format: ReportFormat, saliency: bool, top_k: usize, all_levels: bool) -> CliResult {
    let run = LoadedRun::load(artifact)?;
    print!("{}", render_report(&run.artifact.report, format));
    if saliency {
        let summary =
            aggregate_token_saliency(&run.records, top_k, !all_levels).map_err(|e| Failure::new(DATA_ERROR, e))?;
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    Ok(())
}

fn compare(a: &Path, b: &Path, json: bool) -> CliResult {
    let a = LoadedRun::load(a)?;
    let b = LoadedRun::load(b)?;
    let diff = compare_runs(&a, &b).map_err(|e| Failure::new(DATA_ERROR, e))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&diff).expect("comparison serializes"));
    } else {
        print!("{}", render_comparison(&diff));
    }
    Ok(())
}

fn curate_cmd(dataset: &Path, rules: Option<&Path>, out: Option<&Path>) -> CliResult {
    let rules = match rules {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::new(CONFIG_ERROR, format!("{}: {e}", path.display())))?;
            toml::from_str::<CurationRules>(&text).map_err(|e| Failure::new(CONFIG_ERROR, format!("{}: {e}", path.display())))?
        }
        None => CurationRules::default(),
    };
    let encounters = load_dataset(dataset)?;
    let total = encounters.len();
    let set = curate(encounters, &rules);
    for x in &set.excluded {
        println!("excluded {} {}", x.id, x.reason);
    }
    println!("retained {} of {}", set.retained.len(), total);
    if let Some(path) = out {
        let written = match DatasetFormat::from_path(path) {
            DatasetFormat::Csv => write_csv(path, &set.retained).map_err(|e| e.to_string()),
            DatasetFormat::Jsonl => jsonl::write_jsonl(path, &set.retained).map_err(|e| e.to_string()),
        };
        written.map_err(|e| Failure::new(DATA_ERROR, e))?;
    }
    Ok(())
}

fn chunk(dataset: &Path, k: usize, out_dir: Option<&Path>) -> CliResult {
    let encounters = load_dataset(dataset)?;
    let chunks = partition_chunks(encounters, k).map_err(|e| Failure::new(CONFIG_ERROR, e))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(DATA_ERROR, e))?;
    }
    for (i, c) in chunks.iter().enumerate() {
        println!("chunk {:02}: {}", i + 1, c.len());
        if let Some(dir) = out_dir {
            let path = dir.join(format!("chunk_{:02}.jsonl", i + 1));
            jsonl::write_jsonl(&path, c).map_err(|e| Failure::new(DATA_ERROR, format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn silver_tasks(dataset: &Path, out: Option<&Path>) -> CliResult {
    let encounters = load_dataset(dataset)?;
    let tasks = build_silver_tasks(&encounters);
    let text = jsonl::to_jsonl_string(&tasks).expect("tasks serialize");
    emit(out, &text)?;
    eprintln!("{} tasks from {} encounters", tasks.len(), encounters.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .init();
    let result = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, format, output_dir, parallelism } => run(&config, format, output_dir, parallelism),
        Command::Report { artifact, format, saliency, top_k, all_levels } => {
            report(&artifact, format, saliency, top_k, all_levels)
        }
        Command::Compare { a, b, json } => compare(&a, &b, json),
        Command::Curate { dataset, rules, out } => curate_cmd(&dataset, rules.as_deref(), out.as_deref()),
        Command::Chunk { dataset, k, out_dir } => chunk(&dataset, k as usize, out_dir.as_deref()),
        Command::SilverTasks { dataset, out } => silver_tasks(&dataset, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
