use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use iospe::corpus::{collect_candidates, read_jsonl, write_jsonl, HumanSellingPoint, ProductRecord};
use iospe::generator::{generate, train_generator, DecodeMode, GeneratorModel};
use iospe::personalization::{CustomerProfile, EmbeddingTable};
use iospe::pipeline::{
    annotate_themes, coarse_training_sets, extract_pool, pool_load, pool_save, run_offline_optimization, serve_assign,
    train_models, AssignRequest, Models, PipelineConfig, Snapshot, SnapshotStore,
};
use iospe::screener::{rank_top_k, train_screener, ScreenerModel};
use iospe::sharpening::{build_batches, run_sharpening, SharpeningSchedule};
use iospe::supervision::{
    aggregate, is_high_quality, is_low_quality, read_logs, SupervisionAggregate, TimeWindow,
};
use iospe::synthetic::{product_corpus, RewritePair};

use crate::server::{self, AppState};

pub const CONFIG_ENV: &str = "IOSPE_CONFIG";
const COARSE_FILE: &str = "coarse.json";
const GENERATOR_FILE: &str = "generator.json";
const FINE_FILE: &str = "fine.json";
const EMBEDDINGS_FILE: &str = "embeddings.txt";
const REPORTS_FILE: &str = "sharpening_reports.jsonl";
const DEFAULT_CORPUS_SEED: u64 = 2024;

#[derive(Debug, Parser)]
#[command(name = "iospe", version, about = "Selling point extraction, screening and assignment")]
pub struct Cli {
    /// JSON pipeline config. IOSPE_CONFIG takes precedence when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a screener from human selling points and negative sentences.
    TrainScreener(TrainScreenerArgs),
    /// Rank each product's candidate sentences and keep the top k.
    CoarseScreen(CoarseScreenArgs),
    /// Train the pointer-generator on rewrite pairs.
    TrainGenerator(TrainGeneratorArgs),
    /// Rewrite candidate sentences into selling points.
    Generate(GenerateArgs),
    /// Recursively sharpen a screener against its own accepted candidates.
    Sharpen(SharpenArgs),
    /// Run the full extraction and write the selling point pool.
    Extract(ExtractArgs),
    /// Assign one selling point to a customer for a sku.
    Assign(AssignArgs),
    /// Log aggregation, sample recall and offline optimization.
    #[command(subcommand)]
    Supervise(SuperviseCommand),
    /// Serve extraction, assignment and log intake over HTTP.
    Serve(ServeArgs),
    /// Write a deterministic synthetic corpus.
    MakeSyntheticCorpus(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainScreenerArgs {
    /// Positive texts: human_selling_points.jsonl or one text per line.
    #[arg(long)]
    pub positives: PathBuf,
    /// Negative texts, one per line or JSONL with a `text` field.
    #[arg(long, required_unless_present = "products")]
    pub negatives: Option<PathBuf>,
    /// Derive negatives from these products' sentences instead.
    #[arg(long)]
    pub products: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the token embedding table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoarseScreenArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub products: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainGeneratorArgs {
    /// pairs.jsonl with `source` and `target` fields.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Greedy,
    Beam,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A single source sentence.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub text: Option<String>,
    /// Source texts, one per line or JSONL with a `text` field.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SharpenArgs {
    /// Screener to start from.
    #[arg(long)]
    pub model: PathBuf,
    /// Fixed human-written positives.
    #[arg(long)]
    pub positives: PathBuf,
    /// Candidate pool to cut into batches.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Round reports as JSONL; stdout when omitted.
    #[arg(long)]
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub products: PathBuf,
    /// Directory holding coarse.json, generator.json and fine.json. With
    /// --human and --pairs the models are trained and written here.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    #[arg(long, requires = "pairs")]
    pub human: Option<PathBuf>,
    #[arg(long, requires = "human")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Timestamp for new entries: RFC 3339 or `now`.
    #[arg(long)]
    pub created_at: Option<String>,
}

#[derive(Debug, Args)]
pub struct SnapshotArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub profiles: PathBuf,
    /// Embedding table; defaults to `<models-dir>/embeddings.txt`, then to
    /// the fine screener's embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    #[command(flatten)]
    pub snapshot: SnapshotArgs,
    #[arg(long)]
    pub customer: String,
    #[arg(long)]
    pub sku: String,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Inclusive window start, RFC 3339.
    #[arg(long)]
    pub start: Option<DateTime<Utc>>,
    /// Exclusive window end, RFC 3339.
    #[arg(long)]
    pub end: Option<DateTime<Utc>>,
}

impl WindowArgs {
    fn window(&self) -> TimeWindow {
        TimeWindow {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SuperviseCommand {
    /// Group base/ctrl exposure and click events per selling point.
    Aggregate {
        #[arg(long)]
        logs: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label aggregates as high- and low-quality samples.
    Recall {
        #[arg(long)]
        aggregates: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the fine screener from logs and rescore the pool.
    Optimize {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        fine: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        out_pool: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub snapshot: SnapshotArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub products: usize,
}

/// Config path after the environment override.
pub fn config_path(flag: Option<&Path>) -> Option<PathBuf> {
    match std::env::var_os(CONFIG_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => flag.map(Path::to_path_buf),
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match config_path(cli.config.as_deref()) {
        Some(p) => PipelineConfig::load(&p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

#[derive(Deserialize)]
struct TextField {
    text: String,
}

/// One text per line; lines holding a JSON object with `text` or a JSON
/// string are unwrapped.
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('{') {
            if let Ok(f) = serde_json::from_str::<TextField>(t) {
                out.push(f.text);
                continue;
            }
        } else if t.starts_with('"') {
            if let Ok(s) = serde_json::from_str::<String>(t) {
                out.push(s);
                continue;
            }
        }
        out.push(t.to_string());
    }
    Ok(out)
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_lines<T: Serialize>(path: Option<&Path>, items: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_models(dir: &Path) -> Result<Models> {
    let load_screener = |f: &str| ScreenerModel::load(dir.join(f)).with_context(|| format!("loading {}", dir.join(f).display()));
    Ok(Models {
        coarse: load_screener(COARSE_FILE)?,
        generator: GeneratorModel::load(dir.join(GENERATOR_FILE))
            .with_context(|| format!("loading {}", dir.join(GENERATOR_FILE).display()))?,
        fine: load_screener(FINE_FILE)?,
    })
}

fn save_models(models: &Models, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    models.coarse.save(dir.join(COARSE_FILE))?;
    models.generator.save(dir.join(GENERATOR_FILE))?;
    models.fine.save(dir.join(FINE_FILE))?;
    EmbeddingTable::from_screener(&models.fine).save(dir.join(EMBEDDINGS_FILE))?;
    Ok(())
}

fn parse_created_at(s: &str) -> Result<DateTime<Utc>> {
    if s == "now" {
        return Ok(Utc::now());
    }
    Ok(DateTime::parse_from_rfc3339(s)
        .with_context(|| format!("invalid --created-at {s:?}"))?
        .with_timezone(&Utc))
}

#[derive(Serialize)]
struct CoarseRecord<'a> {
    sku_id: &'a str,
    rank: usize,
    score: f64,
    text: &'a str,
    source: iospe::corpus::SourceKind,
}

#[derive(Serialize)]
struct GeneratedRecord<'a> {
    source: &'a str,
    output: String,
}

#[derive(Serialize)]
struct RecallRecord<'a> {
    #[serde(flatten)]
    aggregate: &'a SupervisionAggregate,
    text: Option<&'a str>,
    high_quality: bool,
    /// `null` when a CTR is undefined.
    low_quality: Option<bool>,
}

fn table_for(args: &SnapshotArgs) -> Result<EmbeddingTable> {
    if let Some(p) = &args.embeddings {
        return Ok(EmbeddingTable::load(p)?);
    }
    let Some(dir) = &args.models_dir else {
        bail!("one of --embeddings or --models-dir is required");
    };
    let txt = dir.join(EMBEDDINGS_FILE);
    if txt.exists() {
        return Ok(EmbeddingTable::load(txt)?);
    }
    Ok(EmbeddingTable::from_screener(&ScreenerModel::load(dir.join(FINE_FILE))?))
}

fn snapshot_for(args: &SnapshotArgs) -> Result<Snapshot> {
    let pool = pool_load(&args.pool)?;
    let profiles: Vec<CustomerProfile> = read_jsonl(&args.profiles)?;
    Ok(Snapshot::new(pool, profiles, table_for(args)?))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::TrainScreener(a) => {
            let pos = read_texts(&a.positives)?;
            let neg = match (&a.negatives, &a.products) {
                (Some(n), _) => read_texts(n)?,
                (None, Some(p)) => {
                    let products: Vec<ProductRecord> = read_jsonl(p)?;
                    let human: Vec<HumanSellingPoint> = pos
                        .iter()
                        .map(|t| HumanSellingPoint {
                            text: t.clone(),
                            theme: None,
                        })
                        .collect();
                    coarse_training_sets(&products, &human, &config).1
                }
                (None, None) => unreachable!("clap enforces one of --negatives/--products"),
            };
            let model = train_screener(&pos, &neg, &config.screener)?;
            model.save(&a.out)?;
            if let Some(e) = &a.embeddings {
                EmbeddingTable::from_screener(&model).save(e)?;
            }
            log::info!("wrote screener to {}", a.out.display());
        }
        Command::CoarseScreen(a) => {
            let model = ScreenerModel::load(&a.model)?;
            let products: Vec<ProductRecord> = read_jsonl(&a.products)?;
            let k = a.k.unwrap_or(config.k);
            let mut w = writer(a.out.as_deref())?;
            for p in &products {
                let candidates = collect_candidates(p, config.sources);
                for (rank, c) in rank_top_k(&model, &candidates, k).iter().enumerate() {
                    let rec = CoarseRecord {
                        sku_id: &p.sku_id,
                        rank: rank + 1,
                        score: c.score,
                        text: &c.candidate.text,
                        source: c.candidate.source,
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
        }
        Command::TrainGenerator(a) => {
            let pairs: Vec<RewritePair> = read_jsonl(&a.pairs)?;
            let refs: Vec<(&str, &str)> = pairs.iter().map(|p| (p.source.as_str(), p.target.as_str())).collect();
            let model = train_generator(&refs, &config.generator)?;
            model.save(&a.out)?;
            log::info!("wrote generator to {}", a.out.display());
        }
        Command::Generate(a) => {
            let model = GeneratorModel::load(&a.model)?;
            let mut decode = config.decode;
            if let Some(m) = a.mode {
                decode.mode = match m {
                    ModeArg::Greedy => DecodeMode::Greedy,
                    ModeArg::Beam => DecodeMode::Beam,
                };
            }
            if let Some(w) = a.beam_width {
                decode.beam_width = w;
            }
            if let Some(n) = a.max_len {
                decode.max_len = n;
            }
            let sources = match (&a.text, &a.input) {
                (Some(t), _) => vec![t.clone()],
                (None, Some(p)) => read_texts(p)?,
                (None, None) => unreachable!("clap enforces one of --text/--input"),
            };
            let mut records = Vec::with_capacity(sources.len());
            for s in &sources {
                records.push(GeneratedRecord {
                    source: s,
                    output: generate(&model, s, &decode)?,
                });
            }
            write_lines(a.out.as_deref(), &records)?;
        }
        Command::Sharpen(a) => {
            let model = ScreenerModel::load(&a.model)?;
            let positives = read_texts(&a.positives)?;
            let pool = read_texts(&a.pool)?;
            let mut hyper = config.sharpening;
            if let Some(r) = a.rounds {
                hyper.rounds = r;
            }
            let batches = build_batches(&pool, hyper.rounds, config.seed)?;
            let schedule = SharpeningSchedule::new(positives, batches, hyper)?;
            let (model, reports) = run_sharpening(model, &schedule)?;
            model.save(&a.out)?;
            write_lines(a.reports.as_deref(), &reports)?;
        }
        Command::Extract(a) => {
            let mut config = config;
            if let Some(c) = &a.created_at {
                config.created_at = parse_created_at(c)?;
            }
            let products: Vec<ProductRecord> = read_jsonl(&a.products)?;
            let human: Option<Vec<HumanSellingPoint>> = a.human.as_deref().map(read_jsonl).transpose()?;
            let models = match (&human, &a.pairs) {
                (Some(human), Some(pairs)) => {
                    let pairs: Vec<RewritePair> = read_jsonl(pairs)?;
                    let (models, reports) = train_models(&products, human, &pairs, &config)?;
                    if let Some(dir) = &a.models_dir {
                        save_models(&models, dir)?;
                        write_jsonl(dir.join(REPORTS_FILE), &reports)?;
                    }
                    models
                }
                _ => {
                    let Some(dir) = &a.models_dir else {
                        bail!("extract needs --models-dir, or --human and --pairs to train");
                    };
                    load_models(dir)?
                }
            };
            let mut pool = extract_pool(&products, &models, &config)?;
            if let Some(h) = &human {
                annotate_themes(&mut pool, h);
            }
            pool_save(&pool, &a.out)?;
            log::info!("wrote {} selling points to {}", pool.len(), a.out.display());
        }
        Command::Assign(a) => {
            let snapshot = snapshot_for(&a.snapshot)?;
            let resp = serve_assign(
                &snapshot,
                &AssignRequest {
                    customer_id: a.customer,
                    sku_id: a.sku,
                },
            )?;
            println!("{}", serde_json::to_string(&resp)?);
        }
        Command::Supervise(s) => supervise(s, &config)?,
        Command::Serve(a) => {
            let snapshot = snapshot_for(&a.snapshot)?;
            let models = a.snapshot.models_dir.as_deref().map(load_models).transpose()?;
            if models.is_none() {
                log::warn!("no --models-dir; /v1/extract will answer 503");
            }
            let state = AppState::new(SnapshotStore::new(snapshot), models, config);
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, &a.addr))?;
        }
        Command::MakeSyntheticCorpus(a) => {
            let corpus = product_corpus(a.products, cli.seed.unwrap_or(DEFAULT_CORPUS_SEED));
            corpus.write_to(&a.out)?;
            log::info!("wrote {} products to {}", corpus.products.len(), a.out.display());
        }
    }
    Ok(())
}

fn supervise(cmd: SuperviseCommand, config: &PipelineConfig) -> Result<()> {
    match cmd {
        SuperviseCommand::Aggregate { logs, window, out } => {
            let parsed = read_logs(&logs)?;
            if parsed.skipped > 0 {
                log::warn!("skipped {} malformed log records", parsed.skipped);
            }
            let agg = aggregate(&parsed.records, &window.window());
            if agg.inconsistent > 0 {
                log::warn!("dropped {} aggregates with more clicks than exposures", agg.inconsistent);
            }
            write_lines(out.as_deref(), &agg.aggregates)?;
        }
        SuperviseCommand::Recall { aggregates, pool, out } => {
            let aggs: Vec<SupervisionAggregate> = read_jsonl(&aggregates)?;
            let pool = pool_load(&pool)?;
            let texts: HashMap<&str, &str> = pool
                .iter()
                .map(|sp| (sp.selling_point_id.as_str(), sp.text.as_str()))
                .collect();
            let t = &config.supervision;
            let records: Vec<RecallRecord> = aggs
                .iter()
                .map(|a| RecallRecord {
                    aggregate: a,
                    text: texts.get(a.selling_point_id.as_str()).copied(),
                    high_quality: is_high_quality(a, t),
                    low_quality: is_low_quality(a, t.low_ctr),
                })
                .collect();
            let unresolved = records.iter().filter(|r| r.text.is_none()).count();
            if unresolved > 0 {
                log::warn!("{unresolved} aggregates name selling points missing from the pool");
            }
            write_lines(out.as_deref(), &records)?;
        }
        SuperviseCommand::Optimize {
            logs,
            pool,
            fine,
            window,
            out_pool,
            out_model,
            report,
        } => {
            let parsed = read_logs(&logs)?;
            let mut pool = pool_load(&pool)?;
            let mut model = ScreenerModel::load(&fine)?;
            let rep = run_offline_optimization(&parsed.records, &window.window(), &mut pool, &mut model, config)?;
            pool_save(&pool, &out_pool)?;
            model.save(&out_model)?;
            let mut w = writer(report.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &rep)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
    }
    Ok(())
}
