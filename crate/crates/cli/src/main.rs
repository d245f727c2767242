use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use fscs_core::agent::PredictionRecord;
use fscs_core::config::{BackendMode, RunConfig};
use fscs_core::episode::{
    load_dataset, read_descriptors_jsonl, sample_descriptors, write_descriptors_jsonl, DatasetIndex, Episode,
    EpisodeDescriptor,
};
use fscs_core::metrics::{render_report, ReportFormat};
use fscs_core::{aggregate, run_batch, score_episode, visual_prompts, Transcript};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fscs", about = "Training-free few-shot classification and segmentation agent")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set oracle.noise.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample episodes and write them as JSONL.
    Sample,
    /// Run the agent over episodes and write transcripts.
    Run {
        /// Episode list from `sample`; sampled from the config when omitted.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Write the visual prompts of one episode as PNG files.
    Render {
        episode_id: String,
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Score transcripts and write reports.
    Eval {
        /// Transcript directory; defaults to `<output>/transcripts`.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

const CONFIG_ERROR: u8 = 2;
const DATASET_ERROR: u8 = 3;
const ALL_FAILED: u8 = 4;

fn fail(code: u8) -> impl Fn(String) -> Failure {
    move |message| Failure { code, message }
}

fn io_fail(e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let mut overrides = cli.overrides;
    if let Some(out) = &cli.output {
        overrides.push(format!("output={}", serde_json::to_string(out).expect("path serializes")));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(|e| fail(CONFIG_ERROR)(e.to_string()))?;
    match cli.command {
        Command::Sample => sample(&cfg),
        Command::Run { episodes } => run(&cfg, episodes.as_deref()),
        Command::Render { episode_id, episodes } => render(&cfg, &episode_id, episodes.as_deref()),
        Command::Eval { transcripts } => eval(&cfg, transcripts.as_deref()),
    }
}

fn dataset(cfg: &RunConfig) -> Result<DatasetIndex, Failure> {
    load_dataset(&cfg.dataset.root, &cfg.dataset.layout).map_err(|e| fail(DATASET_ERROR)(e.to_string()))
}

fn descriptors(cfg: &RunConfig, index: &DatasetIndex, file: Option<&Path>) -> Result<Vec<EpisodeDescriptor>, Failure> {
    match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(DATASET_ERROR)(format!("{}: {e}", p.display())))?;
            read_descriptors_jsonl(&text).map_err(|e| fail(DATASET_ERROR)(format!("{}: {e}", p.display())))
        }
        None => sample_descriptors(index, &cfg.episodes).map_err(|e| fail(DATASET_ERROR)(e.to_string())),
    }
}

fn materialize(index: &DatasetIndex, ds: &[EpisodeDescriptor]) -> Result<Vec<Episode>, Failure> {
    ds.iter().map(|d| index.materialize(d).map_err(|e| fail(DATASET_ERROR)(e.to_string()))).collect()
}

fn sample(cfg: &RunConfig) -> Outcome {
    let index = dataset(cfg)?;
    let ds = descriptors(cfg, &index, None)?;
    fs::create_dir_all(&cfg.output).map_err(io_fail)?;
    let path = cfg.output.join("episodes.jsonl");
    fs::write(&path, write_descriptors_jsonl(&ds)).map_err(io_fail)?;
    let s = &cfg.episodes;
    println!(
        "sampled {} episodes ({}-way {}-shot, fold {}: classes {:?}) into {}",
        ds.len(),
        s.n_way,
        s.k_shot,
        s.fold,
        index.classes_in_fold(s.fold).iter().map(|c| c.0).collect::<Vec<_>>(),
        path.display()
    );
    Ok(())
}

fn read_transcripts(dir: &Path) -> Result<Vec<Transcript>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| fail(DATASET_ERROR)(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".transcript.jsonl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Transcript::read(p).map_err(|e| fail(DATASET_ERROR)(format!("{}: {e}", p.display()))))
        .collect()
}

fn run(cfg: &RunConfig, episodes_file: Option<&Path>) -> Outcome {
    let index = dataset(cfg)?;
    let episodes = materialize(&index, &descriptors(cfg, &index, episodes_file)?)?;
    let modes = [cfg.backends.chat, cfg.backends.vision, cfg.backends.segment];
    let recorded = match (&cfg.replay_dir, modes.contains(&BackendMode::Replay)) {
        (Some(dir), true) => read_transcripts(dir)?,
        _ => Vec::new(),
    };
    let backends = cfg.build_backends(&episodes, &recorded).map_err(|e| fail(CONFIG_ERROR)(e.to_string()))?;

    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let results = run_batch(&episodes, &backends, &cfg.agent, cfg.parallelism);
    let wall_clock_ms = clock.elapsed().as_millis() as u64;

    let dir = cfg.output.join("transcripts");
    let mut predictions = String::new();
    let mut failures = BTreeMap::new();
    for (prediction, transcript) in &results {
        let mut t = transcript.clone();
        t.header.dataset_fingerprint = Some(index.fingerprint.clone());
        t.write_to_dir(&dir).map_err(io_fail)?;
        let line = json!({ "episode_id": t.header.episode_id, "prediction": PredictionRecord::from(prediction) });
        predictions.push_str(&line.to_string());
        predictions.push('\n');
        if prediction.failed {
            failures.insert(t.header.episode_id.clone(), prediction.failure_reason.clone().unwrap_or_default());
        }
    }
    fs::write(cfg.output.join("predictions.jsonl"), predictions).map_err(io_fail)?;
    let manifest = json!({
        "config": cfg.to_json(),
        "dataset_fingerprint": index.fingerprint,
        "episode_count": results.len(),
        "failure_count": failures.len(),
        "failures": failures,
        "started_at_unix": started_at,
        "wall_clock_ms": wall_clock_ms,
    });
    let manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(cfg.output.join("run_manifest.json"), manifest_text + "\n").map_err(io_fail)?;
    println!(
        "ran {} episodes in {:.1} s, {} failed; transcripts in {}",
        results.len(),
        wall_clock_ms as f64 / 1000.0,
        failures.len(),
        dir.display()
    );
    if !results.is_empty() && failures.len() == results.len() {
        return Err(fail(ALL_FAILED)("every episode failed".into()));
    }
    Ok(())
}

fn render(cfg: &RunConfig, episode_id: &str, episodes_file: Option<&Path>) -> Outcome {
    let index = dataset(cfg)?;
    let ds = descriptors(cfg, &index, episodes_file)?;
    let d = ds
        .iter()
        .find(|d| d.episode_id == episode_id)
        .ok_or_else(|| fail(DATASET_ERROR)(format!("unknown episode {episode_id}")))?;
    let episode = index.materialize(d).map_err(|e| fail(DATASET_ERROR)(e.to_string()))?;
    let images = visual_prompts(&episode, &cfg.agent).map_err(io_fail)?;
    let dir = cfg.output.join("render").join(episode_id);
    fs::create_dir_all(&dir).map_err(io_fail)?;
    for (name, png) in &images {
        fs::write(dir.join(format!("{name}.png")), png).map_err(io_fail)?;
    }
    println!("wrote {} images to {}", images.len(), dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, transcripts: Option<&Path>) -> Outcome {
    let dir = transcripts.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("transcripts"));
    let ts = read_transcripts(&dir)?;
    if ts.is_empty() {
        return Err(fail(DATASET_ERROR)(format!("no transcripts in {}", dir.display())));
    }
    let index = dataset(cfg)?;
    let mut scores = Vec::with_capacity(ts.len());
    for t in &ts {
        let episode = index.materialize(&t.header.episode).map_err(|e| fail(DATASET_ERROR)(e.to_string()))?;
        scores.push(score_episode(&episode, &t.prediction).map_err(|e| fail(DATASET_ERROR)(e.to_string()))?);
    }
    let mut report = aggregate(&scores, cfg.miou_mode).map_err(|e| fail(DATASET_ERROR)(e.to_string()))?;
    let spec = &ts[0].header.episode.spec;
    report.setting = format!("{}-way {}-shot", spec.n_way, spec.k_shot);
    fs::create_dir_all(&cfg.output).map_err(io_fail)?;
    for (format, ext) in [(ReportFormat::TextTable, "txt"), (ReportFormat::Json, "json"), (ReportFormat::Csv, "csv")] {
        fs::write(cfg.output.join(format!("report.{ext}")), render_report(&report, format)).map_err(io_fail)?;
    }
    print!("{}", String::from_utf8_lossy(&render_report(&report, ReportFormat::TextTable)));
    println!("{} transcripts scored; reports in {}", ts.len(), cfg.output.display());
    Ok(())
}
