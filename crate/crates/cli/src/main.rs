//! Command-line entry point for the late-interaction video retrieval toolkit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vcolbert::encoders::{
    load_checkpoint, tokenize_pad, AttnMode, EncoderConfig, EncoderParams, DEFAULT_EXPANSION_TOKENS,
    DEFAULT_NUM_FRAMES, DEFAULT_PAD_ID, DEFAULT_QUERY_LEN, DEFAULT_TEMPORAL_LAYERS,
};
use vcolbert::fusion::DEFAULT_RRF_K;
use vcolbert::harness::{
    bench, evaluate, gen_synth, AblationRunner, BenchConfig, Split, Study, SynthConfig, SynthDataset, TrainConfig,
    TrainSimilarity, EVAL_MODES,
};
use vcolbert::index::{build_index, read_corpus, SearchMode, VideoIndex};
use vcolbert::losses::{LossKind, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE};
use vcolbert::{Error, Result};

/// Environment variable holding the default worker thread count.
const THREADS_ENV: &str = "VCOLBERT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "vcolbert", version, about = "Late-interaction text-to-video retrieval toolkit")]
struct Cli {
    /// Emit machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation and benchmarking (default: $VCOLBERT_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, queries and qrels.
    GenSynth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train the toy encoders and write a checkpoint.
    TrainToy(TrainArgs),
    /// Encode a corpus into a binary index.
    Index {
        /// Corpus in JSON lines (`{"id": ..., "frames": [[...], ...]}`).
        #[arg(long)]
        corpus: PathBuf,
        /// Output index path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Rank an index for one query.
    Search {
        #[arg(long)]
        index: PathBuf,
        /// Query token ids separated by spaces or commas.
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "mms_fv")]
        mode: SearchMode,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Reciprocal rank fusion constant for `rrf_fv`.
        #[arg(long, default_value_t = DEFAULT_RRF_K)]
        rrf_k: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Retrieval metrics on a dataset split.
    Eval {
        /// Directory written by `gen-synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Comma-separated modes (default: all reported modes).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<SearchMode>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Indexing and query latency measurements.
    Bench {
        /// Directory written by `gen-synth`; a synthetic corpus is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Videos in the generated corpus.
        #[arg(long, default_value_t = 1000)]
        num_videos: usize,
        /// Queries timed.
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, value_delimiter = ',')]
        modes: Vec<SearchMode>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Write the report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run an ablation study over several seeds.
    Ablate {
        #[arg(long)]
        study: Study,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Directory receiving `<study>.json` and `<study>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 48)]
    num_concepts: usize,
    #[arg(long = "videos", default_value_t = 320)]
    videos: usize,
    #[arg(long, default_value_t = 256)]
    train_videos: usize,
    #[arg(long, default_value_t = 24)]
    frames_per_video: usize,
    #[arg(long, default_value_t = 4)]
    queries_per_video: usize,
    #[arg(long, default_value_t = 0.5)]
    temporal_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            num_concepts: self.num_concepts,
            num_videos: self.videos,
            train_videos: self.train_videos,
            frames_per_video: self.frames_per_video,
            queries_per_video: self.queries_per_video,
            temporal_fraction: self.temporal_fraction,
            noise_sigma: self.noise_sigma,
            seed,
            ..Default::default()
        }
    }
}

/// Encoder and query settings shared by the retrieval commands.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Trained checkpoint; freshly initialized weights (from --seed) when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Padded query length L.
    #[arg(long, default_value_t = DEFAULT_QUERY_LEN)]
    query_len: usize,
    #[arg(long, default_value_t = DEFAULT_PAD_ID)]
    pad_id: u32,
    /// Sampled frames per video N.
    #[arg(long, default_value_t = DEFAULT_NUM_FRAMES)]
    frames: usize,
    #[arg(long, default_value = "causal")]
    attn: AttnMode,
    /// Drop pad-token outputs from the query side.
    #[arg(long)]
    no_augment: bool,
}

impl ModelArgs {
    fn params(&self, seed: u64) -> Result<EncoderParams<f64>> {
        match &self.checkpoint {
            Some(p) => Ok(load_checkpoint(p)?.0),
            None => EncoderParams::init(EncoderConfig::default(), seed),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `gen-synth`; generated from the synth flags when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the full training report here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "sigmoid-dual")]
    loss: LossKind,
    /// Similarity the loss is computed on.
    #[arg(long, default_value = "mms_fv")]
    similarity: TrainSimilarity,
    #[arg(long, default_value_t = 1.0)]
    lambda_f: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_v: f64,
    /// Initial logit scale t.
    #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE, allow_negative_numbers = true)]
    logit_scale: f64,
    /// Initial logit bias b.
    #[arg(long, default_value_t = DEFAULT_LOGIT_BIAS, allow_negative_numbers = true)]
    logit_bias: f64,
    #[arg(long, default_value_t = 2e-3)]
    lr_backbone: f64,
    #[arg(long, default_value_t = 2e-3)]
    lr_temporal: f64,
    #[arg(long, default_value_t = 0.5)]
    lr_loss: f64,
    #[arg(long, default_value_t = DEFAULT_QUERY_LEN)]
    query_len: usize,
    #[arg(long, default_value_t = DEFAULT_NUM_FRAMES)]
    frames: usize,
    /// Visual expansion tokens E.
    #[arg(long, default_value_t = DEFAULT_EXPANSION_TOKENS)]
    expansion_tokens: usize,
    /// Temporal transformer layers.
    #[arg(long, default_value_t = DEFAULT_TEMPORAL_LAYERS)]
    depth: usize,
    #[arg(long, default_value = "causal")]
    attn: AttnMode,
    #[arg(long)]
    no_augment: bool,
    /// Evaluate on the test split every this many epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[command(flatten)]
    synth: SynthArgs,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_backbone: self.lr_backbone,
            lr_temporal: self.lr_temporal,
            lr_loss: self.lr_loss,
            loss: self.loss,
            similarity: self.similarity,
            lambda_f: self.lambda_f,
            lambda_v: self.lambda_v,
            logit_scale: self.logit_scale,
            logit_bias: self.logit_bias,
            attn: self.attn,
            augment: !self.no_augment,
            query_len: self.query_len,
            num_frames: self.frames,
            encoder: EncoderConfig {
                expansion_tokens: self.expansion_tokens,
                temporal_layers: self.depth,
                ..Default::default()
            },
            eval_every: self.eval_every,
            seed,
            ..Default::default()
        }
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train or test)")),
    }
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("query token `{t}` is not a token id")))
        })
        .collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn metrics_table(metrics: &BTreeMap<String, vcolbert::harness::Metrics>) -> String {
    let mut out = format!("{:8}  {:>6}  {:>6}  {:>6}  {:>7}  {:>6}\n", "mode", "R@1", "R@5", "R@10", "nDCG@10", "MdR");
    for (mode, m) in metrics {
        out.push_str(&format!(
            "{mode:8}  {:>6.3}  {:>6.3}  {:>6.3}  {:>7.3}  {:>6.1}\n",
            m.r1, m.r5, m.r10, m.ndcg10, m.mdr
        ));
    }
    out
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth { out, synth } => {
            let data = gen_synth(&synth.config(seed))?;
            data.save(&out)?;
            let summary = serde_json::json!({
                "dir": out,
                "videos": data.corpus.len(),
                "train_videos": data.videos(Split::Train).len(),
                "queries": data.queries.len(),
            });
            if cli.json {
                print_json(&summary)?;
            } else {
                println!(
                    "wrote {} videos and {} queries to {}",
                    data.corpus.len(),
                    data.queries.len(),
                    out.display()
                );
            }
        }
        Command::TrainToy(args) => {
            let data = match &args.data {
                Some(dir) => SynthDataset::load(dir)?,
                None => gen_synth(&args.synth.config(seed))?,
            };
            let outcome = vcolbert::harness::train_toy(&args.config(seed), &data)?;
            std::fs::write(&args.out, outcome.checkpoint_bytes()?)?;
            if let Some(path) = &args.report {
                write_json(path, &outcome.report)?;
            }
            let r = &outcome.report;
            if cli.json {
                print_json(r)?;
            } else {
                println!(
                    "{} steps, train loss {:.4} -> {:.4}, checkpoint {}",
                    r.steps,
                    r.initial_loss,
                    r.final_loss,
                    args.out.display()
                );
                print!("{}", metrics_table(&r.test));
            }
        }
        Command::Index { corpus, out, model } => {
            let videos = read_corpus(BufReader::new(File::open(&corpus)?))?;
            let params = model.params(seed)?;
            let (index, times) = build_index(&videos, &params, model.frames)?;
            index.save(&out)?;
            let ms = times.iter().map(|t| t.as_secs_f64() * 1e3).sum::<f64>() / times.len() as f64;
            if cli.json {
                print_json(&serde_json::json!({
                    "videos": index.len(),
                    "dim": index.dim(),
                    "path": out,
                    "timing": { "ms_per_video": ms },
                }))?;
            } else {
                println!("indexed {} videos ({ms:.3} ms/video) into {}", index.len(), out.display());
            }
        }
        Command::Search {
            index,
            query,
            mode,
            top_k,
            rrf_k,
            model,
        } => {
            let idx = VideoIndex::load(&index)?;
            let params = model.params(seed)?;
            let tq = tokenize_pad(&parse_tokens(&query)?, model.query_len, model.pad_id)?;
            let qe = params.encode_query(&tq, model.attn, !model.no_augment)?;
            let ranking = if mode == SearchMode::RrfFv {
                idx.search_rrf(&qe, top_k, rrf_k)?
            } else {
                idx.search(&qe, top_k, mode)?
            };
            if cli.json {
                let rows: Vec<_> = ranking
                    .entries()
                    .iter()
                    .enumerate()
                    .map(|(i, (id, s))| serde_json::json!({"rank": i + 1, "id": id, "score": s}))
                    .collect();
                print_json(&serde_json::json!({"mode": mode, "results": rows}))?;
            } else {
                let mut out = String::new();
                for (i, (id, s)) in ranking.entries().iter().enumerate() {
                    out.push_str(&format!("{}\t{id}\t{s:.6}\n", i + 1));
                }
                print!("{out}");
            }
        }
        Command::Eval {
            data,
            split,
            modes,
            model,
        } => {
            let data = SynthDataset::load(&data)?;
            let params = model.params(seed)?;
            let modes = if modes.is_empty() { EVAL_MODES.to_vec() } else { modes };
            let metrics = evaluate(
                &params,
                &data,
                split,
                model.attn,
                !model.no_augment,
                model.query_len,
                model.frames,
                &modes,
            )?;
            if cli.json {
                print_json(&metrics)?;
            } else {
                print!("{}", metrics_table(&metrics));
            }
        }
        Command::Bench {
            data,
            num_videos,
            queries,
            modes,
            repeats,
            out,
            model,
        } => {
            let data = match &data {
                Some(dir) => SynthDataset::load(dir)?,
                None => gen_synth(&SynthConfig {
                    num_videos,
                    train_videos: 0,
                    queries_per_video: 1,
                    seed,
                    ..Default::default()
                })?,
            };
            let params = model.params(seed)?;
            let tokenized = data
                .queries
                .iter()
                .take(queries)
                .map(|q| tokenize_pad(&q.tokens, model.query_len, model.pad_id))
                .collect::<Result<Vec<_>>>()?;
            let cfg = BenchConfig {
                modes: if modes.is_empty() { SearchMode::ALL.to_vec() } else { modes },
                num_frames: model.frames,
                attn: model.attn,
                augment: !model.no_augment,
                repeats,
                ..Default::default()
            };
            let report = bench(&params, &data.corpus, &tokenized, &cfg)?;
            if let Some(path) = &out {
                write_json(path, &report)?;
            }
            if cli.json {
                print_json(&report)?;
            } else {
                let t = &report.timing;
                println!(
                    "{} videos, {} queries, D={}, {} threads",
                    report.videos, report.queries, report.dim, report.threads
                );
                println!(
                    "{:8}  {:>9}  {:>10}  {:>10}  {:>9}  {:>9}",
                    "mode", "index ms", "encode p50", "encode p95", "score p50", "score p95"
                );
                for (mode, l) in &t.latency {
                    println!(
                        "{mode:8}  {:>9.4}  {:>10.4}  {:>10.4}  {:>9.4}  {:>9.4}",
                        t.indexing_ms_per_video[mode], l.encode_p50_ms, l.encode_p95_ms, l.score_p50_ms, l.score_p95_ms
                    );
                }
                let f = &t.fused_scoring;
                println!(
                    "scoring mms_fv {:.2} ms vs mms_f + mms_v {:.2} ms (ratio {:.3})",
                    f.mms_fv_ms, f.mms_f_plus_mms_v_ms, f.ratio
                );
                if let Some(s) = &t.scaling {
                    println!(
                        "scoring time vs corpus size {:?}: R^2 = {:.4}, {:.5} ms/video",
                        s.sizes, s.r_squared, s.slope_ms_per_video
                    );
                }
            }
        }
        Command::Ablate {
            study,
            seeds,
            epochs,
            batch_size,
            out,
            synth,
        } => {
            if seeds == 0 {
                return Err(Error::InvalidArgument("need at least one seed".into()));
            }
            let base = TrainConfig {
                epochs,
                batch_size,
                seed,
                ..Default::default()
            };
            let report = AblationRunner::new(synth.config(seed), base, seeds).run(study, None)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                write_json(&dir.join(format!("{study}.json")), &report)?;
                std::fs::write(dir.join(format!("{study}.txt")), report.to_table())?;
            }
            if cli.json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
