use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use emoreason_client::AnnotationClient;
use emoreason_core::backend::{
    sha256_hex, Backend, BackendError, CachedBackend, Capabilities, ContinuationScore, EmbeddingProvider,
    GenerationResult, RemoteBackend, RemoteConfig, ResponseCache, SamplingParams, ScriptedBackend, TokenEmbeddings,
};
use emoreason_core::corpus::{
    atomic_write, compute_metrics, distribution_tsv, label_distribution, load_dataset, read_augmented, read_jsonl,
    to_jsonl, write_augmented, write_rejected, AnnotationRecord, DatasetProfile, InputFormat, LoadedDataset,
    TaskOrdering,
};
use emoreason_core::pipeline::{baseline_predict, Pipeline, VotedLabel};
use emoreason_core::prompts::PromptKind;
use emoreason_core::selection::EmotionLexicon;
use emoreason_server::{Server, ServerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{resolve, ConfigErrors, PartialConfig, RunConfig};
use crate::{AnnotateCommand, CacheCommand, ClassifyMode, Cli, Command, DistMode, FormatArg, InputArgs, OrderingArg};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    /// Bad or missing input; nothing was written.
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some records failed; the rest were written.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 1,
        }
    }
}

fn input_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Input(e.into())
}

/// Either supported backend.
pub enum AnyBackend {
    Remote(RemoteBackend),
    Scripted(ScriptedBackend),
}

impl Backend for AnyBackend {
    fn id(&self) -> &str {
        match self {
            AnyBackend::Remote(b) => Backend::id(b),
            AnyBackend::Scripted(b) => Backend::id(b),
        }
    }

    fn capabilities(&self) -> Capabilities {
        match self {
            AnyBackend::Remote(b) => b.capabilities(),
            AnyBackend::Scripted(b) => b.capabilities(),
        }
    }

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Vec<GenerationResult>, BackendError> {
        match self {
            AnyBackend::Remote(b) => b.generate(prompt, params),
            AnyBackend::Scripted(b) => b.generate(prompt, params),
        }
    }

    fn score_continuations(&self, prompt: &str, candidates: &[String]) -> Result<Vec<ContinuationScore>, BackendError> {
        match self {
            AnyBackend::Remote(b) => b.score_continuations(prompt, candidates),
            AnyBackend::Scripted(b) => b.score_continuations(prompt, candidates),
        }
    }

    fn calls(&self) -> u64 {
        match self {
            AnyBackend::Remote(b) => b.calls(),
            AnyBackend::Scripted(b) => b.calls(),
        }
    }
}

impl EmbeddingProvider for AnyBackend {
    fn id(&self) -> &str {
        Backend::id(self)
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, BackendError> {
        match self {
            AnyBackend::Remote(b) => b.embed_tokens(text),
            AnyBackend::Scripted(b) => b.embed_tokens(text),
        }
    }
}

fn build_backend(cfg: &RunConfig) -> Result<CachedBackend<AnyBackend>, CliError> {
    let inner = match cfg.backend.as_str() {
        "scripted" => {
            let path = cfg.script.as_ref().expect("validated");
            AnyBackend::Scripted(ScriptedBackend::from_file(path).map_err(input_err)?)
        }
        _ => {
            let mut rc = RemoteConfig::new(cfg.backend_url.clone().expect("validated"));
            rc.api_key = cfg.api_key.clone();
            rc.model = cfg.model.clone();
            AnyBackend::Remote(RemoteBackend::new(rc).map_err(input_err)?)
        }
    };
    let cache = ResponseCache::open(&cfg.cache_dir)
        .with_context(|| format!("cache directory {}", cfg.cache_dir.display()))
        .map_err(input_err)?;
    Ok(CachedBackend::new(inner, Arc::new(cache)))
}

fn format_of(arg: Option<FormatArg>, path: &Path) -> InputFormat {
    match arg {
        Some(FormatArg::Canonical) => InputFormat::Canonical,
        Some(FormatArg::Csv) => InputFormat::Csv,
        Some(FormatArg::Tsv) => InputFormat::Tsv,
        None => InputFormat::from_path(path),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_input(args: &InputArgs, profile: &DatasetProfile, output: &Path) -> Result<LoadedDataset, CliError> {
    let data = load_dataset(&args.input, profile, format_of(args.format, &args.input)).map_err(input_err)?;
    if !data.rejected.is_empty() {
        let side = sibling(output, ".rejected.jsonl");
        write_rejected(&data.rejected, &side).map_err(input_err)?;
        tracing::warn!(count = data.rejected.len(), file = %side.display(), "rows rejected");
    }
    Ok(data)
}

struct Prepared {
    cfg: RunConfig,
    profile: DatasetProfile,
}

fn prepare(flags: PartialConfig, config_file: Option<&Path>, env: &dyn Fn(&str) -> Option<String>) -> Result<Prepared, CliError> {
    let cfg = resolve(flags, config_file, env)?;
    let profile = cfg.validate()?;
    Ok(Prepared { cfg, profile })
}

fn run_id(cfg: &RunConfig, input: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(input).with_context(|| format!("read {}", input.display())).map_err(input_err)?;
    let mut material = serde_json::to_vec(&cfg.fingerprint()).expect("serializable");
    material.extend_from_slice(&bytes);
    Ok(sha256_hex(&material)[..16].to_owned())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordReport {
    pub record_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub records: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub rejected_rows: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub per_record: Vec<RecordReport>,
}

fn cmd_reason(
    input: InputArgs,
    output: PathBuf,
    report: Option<PathBuf>,
    audit: Option<PathBuf>,
    p: Prepared,
) -> Result<Outcome, CliError> {
    let data = load_input(&input, &p.profile, &output)?;
    let run_id = run_id(&p.cfg, &input.input)?;
    let backend = build_backend(&p.cfg)?;
    let lexicon = EmotionLexicon::shipped();
    let pipeline = Pipeline {
        backend: &backend,
        embedder: &backend,
        prompts: &p.profile.prompts,
        labels: &p.profile.labels,
        lexicon: &lexicon,
        config: p.cfg.pipeline_config(run_id.clone()),
    };
    pipeline.validate().map_err(input_err)?;

    let runs = pipeline.run_all(&data.records);
    let mut augmented = Vec::new();
    let mut audits = Vec::new();
    let mut per_record = Vec::new();
    for run in runs {
        let (status, stage, error) = match run.result {
            Ok((a, au)) => {
                augmented.push(a);
                audits.push(au);
                ("ok", None, None)
            }
            Err(f) => {
                tracing::error!(record = %f.record_id, error = %f, "record failed");
                ("failed", Some(format!("{:?}", f.stage).to_lowercase()), Some(f.source.to_string()))
            }
        };
        per_record.push(RecordReport { record_id: run.record_id, status: status.into(), stage, error, elapsed_ms: run.elapsed_ms });
    }
    write_augmented(&augmented, &output).map_err(anyhow::Error::from)?;
    if let Some(path) = audit {
        atomic_write(&path, &to_jsonl(&audits)).map_err(anyhow::Error::from)?;
    }
    let failed = per_record.iter().filter(|r| r.status != "ok").count();
    let report_data = RunReport {
        run_id,
        records: data.records.len(),
        succeeded: augmented.len(),
        failed,
        rejected_rows: data.rejected.len(),
        backend_calls: backend.misses(),
        cache_hits: backend.hits(),
        per_record,
    };
    let report_path = report.unwrap_or_else(|| sibling(&output, ".report.json"));
    atomic_write(&report_path, &serde_json::to_vec_pretty(&report_data).expect("serializable")).map_err(anyhow::Error::from)?;
    println!(
        "{} of {} records written to {} ({} backend calls, {} cache hits)",
        report_data.succeeded,
        report_data.records,
        output.display(),
        report_data.backend_calls,
        report_data.cache_hits
    );
    Ok(if failed > 0 { Outcome::Partial } else { Outcome::Success })
}

/// One line of `classify` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<VotedLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn cmd_classify(input: InputArgs, output: PathBuf, mode: ClassifyMode, p: Prepared) -> Result<Outcome, CliError> {
    let data = load_input(&input, &p.profile, &output)?;
    let backend = build_backend(&p.cfg)?;
    let lexicon = EmotionLexicon::shipped();
    let pipeline = Pipeline {
        backend: &backend,
        embedder: &backend,
        prompts: &p.profile.prompts,
        labels: &p.profile.labels,
        lexicon: &lexicon,
        config: p.cfg.pipeline_config(String::new()),
    };
    pipeline.validate().map_err(input_err)?;
    let lines: Vec<PredictionLine> = pipeline.map_records(&data.records, |r| {
        let failed = |e: String| PredictionLine { id: r.id.clone(), label: None, votes: None, raw: None, error: Some(e) };
        match mode {
            ClassifyMode::Emogen => match pipeline.classify_record(r) {
                Ok((_, _, voted)) => {
                    PredictionLine { id: r.id.clone(), label: Some(voted.label.clone()), votes: Some(voted), raw: None, error: None }
                }
                Err(e) => failed(e.to_string()),
            },
            ClassifyMode::BaselineStandard | ClassifyMode::BaselineCot => {
                let kind = if mode == ClassifyMode::BaselineCot { PromptKind::BaselineCot } else { PromptKind::BaselineStandard };
                match baseline_predict(
                    &backend,
                    &p.profile.prompts,
                    kind,
                    r,
                    &p.profile.labels,
                    &p.profile.label_aliases,
                    p.cfg.max_new_tokens,
                ) {
                    Ok(b) => PredictionLine { id: b.id, label: b.label, votes: None, raw: Some(b.raw), error: None },
                    Err(e) => failed(e.to_string()),
                }
            }
        }
    });
    atomic_write(&output, &to_jsonl(&lines)).map_err(anyhow::Error::from)?;
    let failed = lines.iter().filter(|l| l.error.is_some()).count();
    println!("{} predictions written to {} ({failed} failed)", lines.len(), output.display());
    Ok(if failed > 0 { Outcome::Partial } else { Outcome::Success })
}

/// Reads `id` and a label from prediction lines or augmented records.
fn read_predictions(path: &Path) -> Result<BTreeMap<String, Option<String>>, CliError> {
    let rows: Vec<serde_json::Value> = read_jsonl(path).map_err(input_err)?;
    let mut out = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let id = match &row["id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Null => return Err(input_err(anyhow::anyhow!("{}:{}: missing id", path.display(), i + 1))),
            other => other.to_string(),
        };
        let label = row["label"].as_str().or_else(|| row["voted_label"]["label"].as_str()).map(str::to_owned);
        out.insert(id, label);
    }
    Ok(out)
}

fn cmd_evaluate(
    predictions: PathBuf,
    dataset: PathBuf,
    format: Option<FormatArg>,
    output: Option<PathBuf>,
    profile: String,
) -> Result<Outcome, CliError> {
    let profile = DatasetProfile::resolve(&profile).map_err(input_err)?;
    let preds = read_predictions(&predictions)?;
    let data = load_dataset(&dataset, &profile, format_of(format, &dataset)).map_err(input_err)?;
    let golds: BTreeMap<String, String> =
        data.records.iter().filter_map(|r| r.gold_label.clone().map(|g| (r.id.clone(), g))).collect();
    let unmatched = preds.keys().filter(|id| !golds.contains_key(*id)).count();
    if unmatched > 0 {
        return Err(input_err(anyhow::anyhow!(
            "{unmatched} of {} prediction ids ({:.1}%) are not in {} ({} gold records)",
            preds.len(),
            100.0 * unmatched as f64 / preds.len() as f64,
            dataset.display(),
            golds.len()
        )));
    }
    let mapped: BTreeMap<String, String> = preds.into_iter().filter_map(|(id, l)| l.map(|l| (id, l))).collect();
    let metrics = compute_metrics(&mapped, &golds, &profile.labels).map_err(input_err)?;
    print!("{}", metrics.table());
    let out = output.unwrap_or_else(|| sibling(&predictions, ".metrics.json"));
    atomic_write(&out, &serde_json::to_vec_pretty(&metrics).expect("serializable")).map_err(anyhow::Error::from)?;
    Ok(Outcome::Success)
}

fn cmd_export_dist(input: PathBuf, mode: DistMode, output: Option<PathBuf>) -> Result<Outcome, CliError> {
    let records = read_augmented(&input).map_err(input_err)?;
    let labels: Vec<String> = match mode {
        DistMode::Voted => records.iter().map(|r| r.voted_label.label.clone()).collect(),
        DistMode::Top1 => records.iter().filter_map(|r| r.top.first().map(|p| p.label.clone())).collect(),
        DistMode::AllTop => records.iter().flat_map(|r| r.top.iter().map(|p| p.label.clone())).collect(),
        DistMode::Gold => records.iter().filter_map(|r| r.gold_label.clone()).collect(),
    };
    let tsv = distribution_tsv(&label_distribution(&labels));
    match output {
        Some(path) => atomic_write(&path, tsv.as_bytes()).map_err(anyhow::Error::from)?,
        None => print!("{tsv}"),
    }
    Ok(Outcome::Success)
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    Ok(tokio::runtime::Runtime::new().context("start async runtime")?)
}

fn cmd_annotate(command: AnnotateCommand) -> Result<Outcome, CliError> {
    let rt = runtime()?;
    match command {
        AnnotateCommand::Serve { dataset, store, bind, ordering, seed, ui_dir } => {
            let ordering = match ordering {
                OrderingArg::Random => TaskOrdering::Random { seed },
                OrderingArg::Stratified => TaskOrdering::Stratified,
                OrderingArg::Sequential => TaskOrdering::Sequential,
            };
            rt.block_on(async {
                let server = Server::bind(ServerConfig { bind, store_dir: store, dataset, ordering, ui_dir })
                    .await
                    .map_err(input_err)?;
                println!("annotation server on http://{}", server.local_addr().context("local address")?);
                server.run(emoreason_server::ctrl_c()).await.context("annotation server")?;
                Ok(Outcome::Success)
            })
        }
        AnnotateCommand::Next { server, annotator } => rt.block_on(async {
            match AnnotationClient::new(server).next_task(&annotator).await.context("next task")? {
                Some(task) => println!("{}", serde_json::to_string_pretty(&task).expect("serializable")),
                None => println!("no tasks left for {annotator}"),
            }
            Ok(Outcome::Success)
        }),
        AnnotateCommand::Submit { server, annotator, sample, rank, answers } => rt.block_on(async {
            let record = AnnotationRecord { sample_id: sample, label_rank: rank, answers, annotator_id: annotator, timestamp: 0 };
            match AnnotationClient::new(server).submit(&record).await {
                Ok(ack) => {
                    println!("{}", if ack.replaced { "updated" } else { "accepted" });
                    Ok(Outcome::Success)
                }
                Err(emoreason_client::ClientError::Invalid(v)) => Err(input_err(anyhow::anyhow!("rejected: {v}"))),
                Err(e) => Err(CliError::Runtime(e.into())),
            }
        }),
        AnnotateCommand::Summary { server } => rt.block_on(async {
            let s = AnnotationClient::new(server).summary().await.context("summary")?;
            println!("total {}", s.total);
            for (q, row) in &s.per_question {
                println!(
                    "{q}  {}: {:.1}%  {}: {:.1}%  {}: {:.1}%  {}",
                    row.answer_labels[0],
                    row.percentages[0],
                    row.answer_labels[1],
                    row.percentages[1],
                    row.answer_labels[2],
                    row.percentages[2],
                    row.question
                );
            }
            Ok(Outcome::Success)
        }),
    }
}

fn cmd_cache(command: CacheCommand, config_file: Option<&Path>, env: &dyn Fn(&str) -> Option<String>) -> Result<Outcome, CliError> {
    let CacheCommand::Gc { max_age_days, config } = command;
    let cfg = resolve(config, config_file, env)?;
    let cache = ResponseCache::open(&cfg.cache_dir).map_err(input_err)?;
    let report = cache.gc(max_age_days.map(|d| Duration::from_secs(d * 86_400))).context("cache gc")?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(Outcome::Success)
}

/// Runs a parsed command line. `env` supplies environment variables.
pub fn run(cli: Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<Outcome, CliError> {
    let config_file = cli.config.clone().or_else(|| env("EMOREASON_CONFIG").map(PathBuf::from));
    let config_file = config_file.as_deref();
    match cli.command {
        Command::Reason { input, output, report, audit, config } => {
            let p = prepare(config, config_file, env)?;
            if !input.input.is_file() {
                return Err(input_err(anyhow::anyhow!("input file {} does not exist", input.input.display())));
            }
            cmd_reason(input, output, report, audit, p)
        }
        Command::Classify { input, output, mode, config } => {
            let p = prepare(config, config_file, env)?;
            if !input.input.is_file() {
                return Err(input_err(anyhow::anyhow!("input file {} does not exist", input.input.display())));
            }
            cmd_classify(input, output, mode, p)
        }
        Command::Evaluate { predictions, dataset, format, output, profile } => {
            cmd_evaluate(predictions, dataset, format, output, profile)
        }
        Command::ExportDist { input, mode, output } => cmd_export_dist(input, mode, output),
        Command::Annotate { command } => cmd_annotate(command),
        Command::Cache { command } => cmd_cache(command, config_file, env),
        Command::ShowConfig { config } => {
            let mut cfg = resolve(config, config_file, env)?;
            if cfg.api_key.is_some() {
                cfg.api_key = Some("<redacted>".into());
            }
            let mut out = std::io::stdout();
            let _ = out.write_all(toml::to_string(&cfg).context("render config")?.as_bytes());
            Ok(Outcome::Success)
        }
    }
}
