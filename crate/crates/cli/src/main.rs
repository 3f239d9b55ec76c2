//! `revknn`: build, revise and evaluate kNN-MT datastores from the command line.
//!
//! Every stage reads the same JSON experiment config (`--config`), with flags
//! overriding individual fields. Each written artifact gets a
//! `<file>.meta.json` sidecar holding the config hash; readers warn when an
//! input was produced under a different config.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use revknn_core::experiment::{report_experiment, render_table, run_experiment};
use revknn_core::pairbuilder::{self, load_records, save_records, PairSources};
use revknn_core::provenance::{config_hash, verify, write_meta};
use revknn_core::reviser::{self, ReviserParams};
use revknn_core::toymodel::{self, generate_corpora, Vocabularies};
use revknn_core::{
    datastore, domain_difference, retrieval_accuracy, token_accuracy, translate, Corpus, Datastore, DistanceMode,
    Error, ExperimentConfig, ModelDims, ToyModel,
};

#[derive(Parser)]
#[command(name = "revknn", version, about = "kNN-MT datastores with offline key revision")]
struct Cli {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the upstream corpus and downstream train/dev/test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        source_vocab: Option<usize>,
        #[arg(long)]
        upstream_sentences: Option<usize>,
        #[arg(long)]
        downstream_train: Option<usize>,
    },
    /// Train the upstream model from scratch.
    TrainModel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tune a trained model on the downstream corpus.
    FinetuneModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Traverse a corpus with a model and store (key, value) pairs.
    BuildDatastore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect key-query pairs with the downstream model, filter, and write reviser records.
    CollectPairs {
        #[command(flatten)]
        pair: PairFiles,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_k: Option<usize>,
        /// Percentage of retrieved keys kept.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Train the reviser on collected records.
    TrainReviser {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, value_enum)]
        distance: Option<Distance>,
    },
    /// Apply a trained reviser to every upstream key.
    ReviseDatastore {
        #[command(flatten)]
        pair: PairFiles,
        #[arg(long)]
        reviser: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy kNN-MT decoding of a corpus' source side.
    Translate {
        #[command(flatten)]
        io: EvalFiles,
        /// Output file (JSON array of target ids per line); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Teacher-forced retrieval accuracy of a datastore.
    EvalRetrieval {
        #[command(flatten)]
        io: EvalFiles,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
        /// Target ids excluded from scoring.
        #[arg(long, value_delimiter = ',')]
        skip: Option<Vec<u32>>,
    },
    /// Retrieval accuracy plus token accuracy of decoded translations.
    EvalTranslate {
        #[command(flatten)]
        io: EvalFiles,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long, value_delimiter = ',')]
        skip: Option<Vec<u32>>,
    },
    /// TF-IDF domain difference between the target sides of two corpora.
    DomainDiff { a: PathBuf, b: PathBuf },
    /// Run the whole pipeline and write a comparison report.
    RunExperiment {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        n_k: Option<usize>,
    },
    /// Re-render the report of a completed run directory.
    #[command(alias = "report-experiment")]
    Report { dir: PathBuf },
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct PairFiles {
    #[arg(long)]
    upstream_model: PathBuf,
    #[arg(long)]
    downstream_model: PathBuf,
    #[arg(long)]
    upstream_ds: PathBuf,
    #[arg(long)]
    downstream_ds: PathBuf,
}

#[derive(Args)]
struct EvalFiles {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    datastore: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    n_k: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    Squared,
    Euclidean,
}

impl DecodeFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let d = &mut cfg.decode;
        set(&mut d.lambda, self.lambda);
        set(&mut d.temperature, self.temperature);
        set(&mut d.n_k, self.n_k);
        set(&mut d.max_len, self.max_len);
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

/// The effective config plus its hash, shared by every stage.
struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
}

impl Ctx {
    fn check(&self, inputs: &[&Path]) {
        for p in inputs {
            verify(p, Some(&self.hash));
        }
    }

    fn tag(&self, artifact: &Path, stage: &str) -> anyhow::Result<()> {
        write_meta(artifact, stage, &self.hash)?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, command: &Command) {
    match command {
        Command::GenData { overlap, source_vocab, upstream_sentences, downstream_train, .. } => {
            let g = &mut cfg.generator;
            set(&mut g.overlap, *overlap);
            set(&mut g.source_vocab, *source_vocab);
            set(&mut g.upstream_sentences, *upstream_sentences);
            set(&mut g.downstream_train, *downstream_train);
        }
        Command::TrainModel { train, .. } => {
            set(&mut cfg.upstream_training.epochs, train.epochs);
            set(&mut cfg.upstream_training.lr, train.lr);
        }
        Command::FinetuneModel { train, .. } => {
            set(&mut cfg.finetune.epochs, train.epochs);
            set(&mut cfg.finetune.lr, train.lr);
        }
        Command::CollectPairs { n_k, r, .. } => {
            set(&mut cfg.pairs.n_k, *n_k);
            set(&mut cfg.pairs.r, *r);
        }
        Command::TrainReviser { alpha, lr, epochs, hidden, distance, .. } => {
            let rc = &mut cfg.reviser;
            set(&mut rc.alpha, *alpha);
            set(&mut rc.lr, *lr);
            set(&mut rc.epochs, *epochs);
            if hidden.is_some() {
                rc.hidden = *hidden;
            }
            if let Some(d) = distance {
                rc.distance = match d {
                    Distance::Squared => DistanceMode::Squared,
                    Distance::Euclidean => DistanceMode::Euclidean,
                };
            }
        }
        Command::Translate { decode, .. } => decode.apply(cfg),
        Command::EvalRetrieval { decode, skip, .. } | Command::EvalTranslate { decode, skip, .. } => {
            decode.apply(cfg);
            set(&mut cfg.skip, skip.clone());
        }
        Command::RunExperiment { out, alpha, r, n_k } => {
            set(&mut cfg.output_dir, out.clone());
            set(&mut cfg.reviser.alpha, *alpha);
            set(&mut cfg.pairs.r, *r);
            if let Some(k) = n_k {
                cfg.pairs.n_k = *k;
                cfg.decode.n_k = *k;
            }
        }
        Command::BuildDatastore { .. }
        | Command::ReviseDatastore { .. }
        | Command::DomainDiff { .. }
        | Command::Report { .. } => {}
    }
}

fn write_json_out<T: serde::Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn model_dims(cfg: &ExperimentConfig, vocab: &Vocabularies) -> ModelDims {
    ModelDims {
        src_vocab: vocab.source.len(),
        tgt_vocab: vocab.target.len(),
        emb_dim: cfg.model.emb_dim,
        repr_dim: cfg.model.repr_dim,
        window: cfg.model.window,
    }
}

fn load_pair(ctx: &Ctx, files: &PairFiles) -> anyhow::Result<(ToyModel, ToyModel, Datastore, Datastore)> {
    ctx.check(&[&files.upstream_model, &files.downstream_model, &files.upstream_ds, &files.downstream_ds]);
    let up_model = ToyModel::load(&files.upstream_model)?;
    let down_model = ToyModel::load(&files.downstream_model)?;
    let up_ds = Datastore::load(&files.upstream_ds)?;
    let down_ds = Datastore::load(&files.downstream_ds)?;
    Ok((up_model, down_model, up_ds, down_ds))
}

fn load_eval(ctx: &Ctx, io: &EvalFiles) -> anyhow::Result<(ToyModel, Datastore, Corpus)> {
    ctx.check(&[&io.model, &io.datastore, &io.data]);
    let model = ToyModel::load(&io.model)?;
    let ds = Datastore::load(&io.datastore)?;
    let corpus = Corpus::load_jsonl(&io.data)?;
    Ok((model, ds, corpus))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    apply_overrides(&mut cfg, &cli.command);
    let cfg = cfg.resolve();
    cfg.validate()?;
    let ctx = Ctx { hash: config_hash(&cfg)?, cfg };
    let cfg = &ctx.cfg;

    match &cli.command {
        Command::GenData { out, .. } => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let data = generate_corpora(&cfg.generator)?;
            let vocab = out.join("vocab.json");
            data.vocab.save(&vocab)?;
            ctx.tag(&vocab, "gen-data")?;
            for (name, c) in
                [("upstream.jsonl", &data.upstream), ("train.jsonl", &data.train), ("dev.jsonl", &data.dev), ("test.jsonl", &data.test)]
            {
                let p = out.join(name);
                c.save_jsonl(&p)?;
                ctx.tag(&p, "gen-data")?;
            }
            eprintln!(
                "wrote {} upstream and {}/{}/{} downstream sentences to {}",
                data.upstream.len(),
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::TrainModel { data, vocab, out, .. } => {
            ctx.check(&[data, vocab]);
            let vocab = Vocabularies::load(vocab)?;
            let corpus = Corpus::load_jsonl(data)?;
            let (model, log) = toymodel::train(&corpus, model_dims(cfg, &vocab), &cfg.upstream_training)?;
            model.save(out)?;
            ctx.tag(out, "train-model")?;
            eprintln!("final training loss {:.5}", log.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::FinetuneModel { model, data, out, .. } => {
            ctx.check(&[model, data]);
            let base = ToyModel::load(model)?;
            let corpus = Corpus::load_jsonl(data)?;
            let (tuned, log) = toymodel::finetune(&base, &corpus, &cfg.finetune)?;
            tuned.save(out)?;
            ctx.tag(out, "finetune-model")?;
            eprintln!("final fine-tuning loss {:.5}", log.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::BuildDatastore { model, data, out } => {
            ctx.check(&[model, data]);
            let model = ToyModel::load(model)?;
            let corpus = Corpus::load_jsonl(data)?;
            let ds = datastore::build(&model, &corpus)?;
            ds.save(out)?;
            ctx.tag(out, "build-datastore")?;
            eprintln!("{} entries of dim {}", ds.len(), ds.dim());
        }
        Command::CollectPairs { pair, data, out, .. } => {
            ctx.check(&[data]);
            let (up_model, down_model, up_ds, down_ds) = load_pair(&ctx, pair)?;
            let corpus = Corpus::load_jsonl(data)?;
            let stats = pairbuilder::collect(&down_model, &down_ds, &corpus, cfg.pairs.n_k)?;
            let retained = pairbuilder::filter(&stats, &down_ds, &corpus.target_frequencies(), cfg.pairs.r)?;
            let sources = PairSources {
                upstream_model: &up_model,
                upstream_ds: &up_ds,
                downstream_model: &down_model,
                downstream_ds: &down_ds,
                corpus: &corpus,
            };
            let records = pairbuilder::build_training_set(&retained, &stats, &sources)?;
            save_records(&records, out)?;
            ctx.tag(out, "collect-pairs")?;
            eprintln!("{} keys retrieved, {} records kept", stats.len(), records.len());
        }
        Command::TrainReviser { records, out, .. } => {
            ctx.check(&[records]);
            let records = load_records(records)?;
            let training = reviser::train(&records, &cfg.reviser)?;
            training.params.save(&cfg.reviser, out)?;
            ctx.tag(out, "train-reviser")?;
            eprintln!(
                "final loss {:.5}, mean |dk| {:.5}",
                training.epoch_losses.last().copied().unwrap_or(f64::NAN),
                reviser::mean_delta_norm(&training.params, &records)?
            );
        }
        Command::ReviseDatastore { pair, reviser: path, out } => {
            ctx.check(&[path]);
            let (up_model, down_model, up_ds, down_ds) = load_pair(&ctx, pair)?;
            let (params, _) = ReviserParams::load(path)?;
            let revised = reviser::revise(&up_ds, &down_ds, &params, &up_model, &down_model)?;
            revised.save(out)?;
            ctx.tag(out, "revise-datastore")?;
            eprintln!("revised {} keys", revised.len());
        }
        Command::Translate { io, out, .. } => {
            let (model, ds, corpus) = load_eval(&ctx, io)?;
            let hyps: Vec<Vec<u32>> =
                corpus.pairs.par_iter().map(|p| translate(&model, &ds, &p.src, &cfg.decode)).collect::<Result<_, _>>()?;
            let mut text = Vec::new();
            for h in &hyps {
                serde_json::to_writer(&mut text, h)?;
                text.push(b'\n');
            }
            match out {
                Some(p) => {
                    std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
                    ctx.tag(p, "translate")?;
                }
                None => std::io::stdout().write_all(&text)?,
            }
        }
        Command::EvalRetrieval { io, out, .. } => {
            let (model, ds, corpus) = load_eval(&ctx, io)?;
            let skip: HashSet<u32> = cfg.skip.iter().copied().collect();
            let report = retrieval_accuracy(&model, &ds, &corpus, &skip, cfg.decode.n_k, cfg.decode.temperature)?;
            write_json_out(&report, out.as_deref())?;
        }
        Command::EvalTranslate { io, out, .. } => {
            let (model, ds, corpus) = load_eval(&ctx, io)?;
            let skip: HashSet<u32> = cfg.skip.iter().copied().collect();
            let mut report = retrieval_accuracy(&model, &ds, &corpus, &skip, cfg.decode.n_k, cfg.decode.temperature)?;
            let hyps: Vec<Vec<u32>> =
                corpus.pairs.par_iter().map(|p| translate(&model, &ds, &p.src, &cfg.decode)).collect::<Result<_, _>>()?;
            let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| strip_eos(&p.tgt).to_vec()).collect();
            report.token_accuracy = Some(token_accuracy(&hyps, &refs)?);
            write_json_out(&report, out.as_deref())?;
        }
        Command::DomainDiff { a, b } => {
            ctx.check(&[a, b]);
            let d = domain_difference(&Corpus::load_jsonl(a)?, &Corpus::load_jsonl(b)?)?;
            println!("{d:.9}");
        }
        Command::RunExperiment { .. } => {
            let report = run_experiment(cfg)?;
            print!("{}", render_table(&report)?);
        }
        Command::Report { dir } => {
            let report = report_experiment(dir)?;
            print!("{}", render_table(&report)?);
        }
    }
    Ok(())
}

fn strip_eos(tgt: &[u32]) -> &[u32] {
    match tgt.split_last() {
        Some((&toymodel::EOS, rest)) => rest,
        _ => tgt,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("REVKNN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| anyhow!("REVKNN_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err(anyhow!("REVKNN_THREADS must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// 2 for problems with files on disk, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
