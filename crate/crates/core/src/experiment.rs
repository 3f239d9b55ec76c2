//! End-to-end experiment: generate two domains, train the upstream model,
//! fine-tune it downstream, build the three datastores, train the reviser and
//! compare retrieval and translation accuracy.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::datastore::{build, Datastore};
use crate::error::{Error, Result};
use crate::evaluation::{domain_difference, retrieval_accuracy, token_accuracy, EvalReport};
use crate::inference::{translate, DecodeConfig};
use crate::pairbuilder::{self, save_records, CollectedStats, PairSources, TrainingRecord};
use crate::provenance::{config_hash, write_meta};
use crate::reviser::{self, mean_delta_norm, revise, ReviserTrainConfig, ReviserTraining};
use crate::seed::sub_seed;
use crate::toymodel::{finetune, generate_corpora, train, Corpus, GenConfig, GeneratedData, ModelDims, ToyModel, TrainConfig};

/// Model sizes; vocabulary sizes come from the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub emb_dim: usize,
    pub repr_dim: usize,
    pub window: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { emb_dim: 16, repr_dim: 32, window: 3 }
    }
}

/// Key-query collection and filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    /// Neighbours per query during collection.
    pub n_k: usize,
    /// Percentage of retrieved keys kept.
    pub r: f64,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection { n_k: 8, r: 30.0 }
    }
}

/// The whole experiment as one document. Per-stage `seed` fields are
/// overwritten from the root `seed` by [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GenConfig,
    pub model: ModelSection,
    pub upstream_training: TrainConfig,
    pub finetune: TrainConfig,
    pub pairs: PairsSection,
    pub reviser: ReviserTrainConfig,
    pub decode: DecodeConfig,
    /// Target ids excluded from retrieval accuracy.
    pub skip: Vec<u32>,
    /// Where artifacts go. Not part of the echoed or hashed config.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            generator: GenConfig::default(),
            model: ModelSection::default(),
            upstream_training: TrainConfig { epochs: 60, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 40, ..TrainConfig::default() },
            pairs: PairsSection::default(),
            reviser: ReviserTrainConfig::default(),
            decode: DecodeConfig::default(),
            skip: Vec::new(),
            output_dir: PathBuf::from("revknn-run"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copy with every stage seed derived from the root seed.
    pub fn resolve(&self) -> Self {
        let mut c = self.clone();
        c.generator.seed = sub_seed(self.seed, "gen-data");
        c.upstream_training.seed = sub_seed(self.seed, "train-upstream");
        c.finetune.seed = sub_seed(self.seed, "finetune");
        c.reviser.seed = sub_seed(self.seed, "train-reviser");
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.decode.validate()?;
        self.reviser.validate()?;
        let m = &self.model;
        if m.emb_dim == 0 || m.repr_dim == 0 || m.window == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.pairs.n_k == 0 || !(self.pairs.r > 0.0 && self.pairs.r <= 100.0) {
            return Err(Error::contract("pairs.n_k must be positive and pairs.r in (0, 100]"));
        }
        Ok(())
    }

    pub fn model_dims(&self, data: &GeneratedData) -> ModelDims {
        ModelDims {
            src_vocab: data.vocab.source.len(),
            tgt_vocab: data.vocab.target.len(),
            emb_dim: self.model.emb_dim,
            repr_dim: self.model.repr_dim,
            window: self.model.window,
        }
    }

    fn skip_set(&self) -> HashSet<u32> {
        self.skip.iter().copied().collect()
    }
}

/// Everything up to and including pair collection; shared by reviser variants.
pub struct Baseline {
    pub data: GeneratedData,
    pub upstream_model: ToyModel,
    pub downstream_model: ToyModel,
    /// Upstream model over the downstream training corpus.
    pub upstream_ds: Datastore,
    /// Fine-tuned model over the downstream training corpus.
    pub downstream_ds: Datastore,
    pub stats: CollectedStats,
    pub vanilla: EvalReport,
    pub finetuned: EvalReport,
}

/// One reviser run on top of a [`Baseline`].
pub struct Revision {
    pub collected: usize,
    pub records: Vec<TrainingRecord>,
    pub training: ReviserTraining,
    pub mean_delta_norm: f64,
    pub revised_ds: Datastore,
    pub revised: EvalReport,
}

/// Expects a resolved config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Baseline> {
    cfg.validate()?;
    let t0 = Instant::now();
    let data = generate_corpora(&cfg.generator)?;
    let dims = cfg.model_dims(&data);
    let (upstream_model, _) = train(&data.upstream, dims, &cfg.upstream_training)?;
    log::info!("upstream model trained in {:.1?}", t0.elapsed());
    let (downstream_model, _) = finetune(&upstream_model, &data.train, &cfg.finetune)?;
    log::info!("downstream model fine-tuned at {:.1?}", t0.elapsed());

    let upstream_ds = build(&upstream_model, &data.train)?;
    let downstream_ds = build(&downstream_model, &data.train)?;
    let stats = pairbuilder::collect(&downstream_model, &downstream_ds, &data.train, cfg.pairs.n_k)?;

    let skip = cfg.skip_set();
    let (n_k, t) = (cfg.decode.n_k, cfg.decode.temperature);
    let vanilla = retrieval_accuracy(&upstream_model, &upstream_ds, &data.dev, &skip, n_k, t)?;
    let finetuned = retrieval_accuracy(&downstream_model, &downstream_ds, &data.dev, &skip, n_k, t)?;
    log::info!("baseline ready at {:.1?}", t0.elapsed());
    Ok(Baseline { data, upstream_model, downstream_model, upstream_ds, downstream_ds, stats, vanilla, finetuned })
}

/// Filters, builds records, trains the reviser and evaluates the revised store.
pub fn revise_with(base: &Baseline, r: f64, reviser_cfg: &ReviserTrainConfig, cfg: &ExperimentConfig) -> Result<Revision> {
    let freqs = base.data.train.target_frequencies();
    let retained = pairbuilder::filter(&base.stats, &base.downstream_ds, &freqs, r)?;
    let sources = PairSources {
        upstream_model: &base.upstream_model,
        upstream_ds: &base.upstream_ds,
        downstream_model: &base.downstream_model,
        downstream_ds: &base.downstream_ds,
        corpus: &base.data.train,
    };
    let records = pairbuilder::build_training_set(&retained, &base.stats, &sources)?;
    let t0 = Instant::now();
    let training = reviser::train(&records, reviser_cfg)?;
    log::info!("reviser trained on {} records in {:.1?}", records.len(), t0.elapsed());
    let mean_delta_norm = mean_delta_norm(&training.params, &records)?;
    let revised_ds = revise(
        &base.upstream_ds,
        &base.downstream_ds,
        &training.params,
        &base.upstream_model,
        &base.downstream_model,
    )?;
    let revised = retrieval_accuracy(
        &base.upstream_model,
        &revised_ds,
        &base.data.dev,
        &cfg.skip_set(),
        cfg.decode.n_k,
        cfg.decode.temperature,
    )?;
    Ok(Revision { collected: base.stats.len(), records, training, mean_delta_norm, revised_ds, revised })
}

/// Token accuracy of kNN-interpolated greedy decoding over `corpus`.
pub fn translation_accuracy(model: &ToyModel, ds: &Datastore, corpus: &Corpus, decode: &DecodeConfig) -> Result<f64> {
    use rayon::prelude::*;
    let hyps: Vec<Vec<u32>> = corpus.pairs.par_iter().map(|p| translate(model, ds, &p.src, decode)).collect::<Result<_>>()?;
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.tgt[..p.tgt.len() - 1].to_vec()).collect();
    token_accuracy(&hyps, &refs)
}

/// Scalars produced alongside the evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub collected_keys: usize,
    pub training_records: usize,
    pub reviser_final_loss: f64,
    pub mean_delta_norm: f64,
    pub domain_difference: f64,
}

/// Comparison of the vanilla, revised and fine-tuned configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub vanilla_retrieval_accuracy: f64,
    pub revised_retrieval_accuracy: f64,
    pub finetuned_retrieval_accuracy: f64,
    /// Revised minus vanilla retrieval accuracy.
    pub delta: f64,
    pub vanilla_token_accuracy: Option<f64>,
    pub revised_token_accuracy: Option<f64>,
    pub finetuned_token_accuracy: Option<f64>,
    pub positions_evaluated: usize,
    pub summary: RunSummary,
    pub config: ExperimentConfig,
}

pub const CONFIG_FILE: &str = "config.json";
pub const VANILLA_EVAL: &str = "eval_vanilla.json";
pub const REVISED_EVAL: &str = "eval_revised.json";
pub const FINETUNED_EVAL: &str = "eval_finetuned.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs the full pipeline into `cfg.output_dir` and writes the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let cfg = cfg.resolve();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| Error::File { path: dir.clone(), source })?;
    let hash = config_hash(&cfg)?;
    let tagged = |name: &str, stage: &str| -> Result<()> { write_meta(&dir.join(name), stage, &hash) };

    let base = prepare(&cfg)?;
    let rev = revise_with(&base, cfg.pairs.r, &cfg.reviser, &cfg)?;

    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    base.data.vocab.save(&dir.join("vocab.json"))?;
    tagged("vocab.json", "gen-data")?;
    for (name, c) in
        [("upstream.jsonl", &base.data.upstream), ("train.jsonl", &base.data.train), ("dev.jsonl", &base.data.dev), ("test.jsonl", &base.data.test)]
    {
        c.save_jsonl(&dir.join(name))?;
        tagged(name, "gen-data")?;
    }
    base.upstream_model.save(&dir.join("upstream_model.bin"))?;
    tagged("upstream_model.bin", "train-model")?;
    base.downstream_model.save(&dir.join("downstream_model.bin"))?;
    tagged("downstream_model.bin", "finetune-model")?;
    base.upstream_ds.save(&dir.join("upstream_ds.bin"))?;
    tagged("upstream_ds.bin", "build-datastore")?;
    base.downstream_ds.save(&dir.join("downstream_ds.bin"))?;
    tagged("downstream_ds.bin", "build-datastore")?;
    save_records(&rev.records, &dir.join("records.jsonl"))?;
    tagged("records.jsonl", "collect-pairs")?;
    rev.training.params.save(&cfg.reviser, &dir.join("reviser.bin"))?;
    tagged("reviser.bin", "train-reviser")?;
    rev.revised_ds.save(&dir.join("revised_ds.bin"))?;
    tagged("revised_ds.bin", "revise-datastore")?;

    let test = &base.data.test;
    let mut vanilla = base.vanilla.clone();
    vanilla.token_accuracy = Some(translation_accuracy(&base.upstream_model, &base.upstream_ds, test, &cfg.decode)?);
    let mut revised = rev.revised.clone();
    revised.token_accuracy = Some(translation_accuracy(&base.upstream_model, &rev.revised_ds, test, &cfg.decode)?);
    let mut finetuned = base.finetuned.clone();
    finetuned.token_accuracy =
        Some(translation_accuracy(&base.downstream_model, &base.downstream_ds, test, &cfg.decode)?);
    write_json(&dir.join(VANILLA_EVAL), &vanilla)?;
    write_json(&dir.join(REVISED_EVAL), &revised)?;
    write_json(&dir.join(FINETUNED_EVAL), &finetuned)?;

    let summary = RunSummary {
        collected_keys: rev.collected,
        training_records: rev.records.len(),
        reviser_final_loss: rev.training.epoch_losses.last().copied().unwrap_or(f64::NAN),
        mean_delta_norm: rev.mean_delta_norm,
        domain_difference: domain_difference(&base.data.upstream, &base.data.train)?,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    report_experiment(&dir)
}

/// Assembles `report.json` and `report.txt` from a completed run directory.
/// Output depends only on the directory's contents.
pub fn report_experiment(dir: &Path) -> Result<ExperimentReport> {
    let mut config: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.output_dir = dir.to_path_buf();
    let vanilla: EvalReport = read_json(&dir.join(VANILLA_EVAL))?;
    let revised: EvalReport = read_json(&dir.join(REVISED_EVAL))?;
    let finetuned: EvalReport = read_json(&dir.join(FINETUNED_EVAL))?;
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;

    let report = ExperimentReport {
        vanilla_retrieval_accuracy: vanilla.retrieval_accuracy,
        revised_retrieval_accuracy: revised.retrieval_accuracy,
        finetuned_retrieval_accuracy: finetuned.retrieval_accuracy,
        delta: revised.retrieval_accuracy - vanilla.retrieval_accuracy,
        vanilla_token_accuracy: vanilla.token_accuracy,
        revised_token_accuracy: revised.token_accuracy,
        finetuned_token_accuracy: finetuned.token_accuracy,
        positions_evaluated: vanilla.positions_evaluated,
        summary,
        config,
    };
    write_json(&dir.join(REPORT_JSON), &report)?;
    let txt = dir.join(REPORT_TXT);
    std::fs::write(&txt, render_table(&report)?).map_err(|source| Error::File { path: txt, source })?;
    Ok(report)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Human-readable summary table.
pub fn render_table(r: &ExperimentReport) -> Result<String> {
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "{:<26}{:>12}{:>12}", "datastore", "retrieval %", "token %");
    let _ = writeln!(w, "{}", "-".repeat(50));
    let rows = [
        ("vanilla (upstream)", r.vanilla_retrieval_accuracy, r.vanilla_token_accuracy),
        ("revised", r.revised_retrieval_accuracy, r.revised_token_accuracy),
        ("fine-tuned (downstream)", r.finetuned_retrieval_accuracy, r.finetuned_token_accuracy),
    ];
    for (name, acc, tok) in rows {
        let _ = writeln!(w, "{name:<26}{:>12}{:>12}", pct(Some(acc)), pct(tok));
    }
    let _ = writeln!(w, "{}", "-".repeat(50));
    let _ = writeln!(w, "delta (revised - vanilla): {:+.2} points", 100.0 * r.delta);
    let _ = writeln!(w, "positions evaluated:       {}", r.positions_evaluated);
    let _ = writeln!(w, "keys collected:            {}", r.summary.collected_keys);
    let _ = writeln!(w, "training records:          {}", r.summary.training_records);
    let _ = writeln!(w, "reviser final loss:        {:.6}", r.summary.reviser_final_loss);
    let _ = writeln!(w, "mean |dk|:                 {:.6}", r.summary.mean_delta_norm);
    let _ = writeln!(w, "domain difference:         {:.6}", r.summary.domain_difference);
    let _ = writeln!(w, "\nconfig:\n{}", serde_json::to_string_pretty(&r.config)?);
    Ok(s)
}
