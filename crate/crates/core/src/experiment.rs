//! End-to-end runs driven by a single JSON configuration: data preparation,
//! pair sampling, comparator training, binary evaluation and re-ranking for
//! every seed, plus the explanation export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifier::ProbabilityTable;
use crate::comparator::{self, BinaryMetrics, ComparatorConfig, ComparatorModel, TrainConfig, TrainReport};
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::ids::Split;
use crate::nnindex::ClassIndex;
use crate::pairsampler::{self, SamplerConfig};
use crate::reranker::{self, RankedResult, RerankConfig, RerankReport};
use crate::synth::{self, SyntheticSpec};

pub const EXPLANATION_FORMAT: &str = "pcnn-explanations/1";
/// JSON schema of the explanation document.
pub const EXPLANATION_SCHEMA: &str = include_str!("../schemas/explanation.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated in memory; the synthetic classifier supplies probabilities.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
    /// Embeddings and precomputed probability tables on disk.
    Files {
        manifest: PathBuf,
        payload: PathBuf,
        train_probabilities: PathBuf,
        test_probabilities: PathBuf,
    },
}

/// Architecture of the comparator; depth and token count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub blocks: usize,
    pub cross_layers: usize,
    pub self_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub jitter: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            blocks: 2,
            cross_layers: 4,
            self_layers: 4,
            heads: 8,
            mlp_hidden: 32,
            jitter: 0.0,
        }
    }
}

impl Architecture {
    /// One block with one cross- and one self-attention layer; small enough
    /// to train on the default synthetic benchmark in a few seconds.
    pub fn desk() -> Self {
        Architecture {
            blocks: 1,
            cross_layers: 1,
            self_layers: 1,
            heads: 4,
            ..Architecture::default()
        }
    }

    pub fn for_data(&self, store: &EmbeddingStore) -> ComparatorConfig {
        ComparatorConfig {
            blocks: self.blocks,
            cross_layers: self.cross_layers,
            self_layers: self.self_layers,
            heads: self.heads,
            depth: store.depth(),
            tokens: store.tokens(),
            mlp_hidden: self.mlp_hidden,
            jitter: self.jitter,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub comparator: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        // Relative paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Files {
            manifest,
            payload,
            train_probabilities,
            test_probabilities,
        } = &mut config.dataset
        {
            fix(manifest);
            fix(payload);
            fix(train_probabilities);
            fix(test_probabilities);
        }
        fix(&mut config.output);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.sampler.validate()?;
        self.train.validate()?;
        self.rerank.validate()?;
        if let DatasetSource::Files {
            manifest,
            payload,
            train_probabilities,
            test_probabilities,
        } = &self.dataset
        {
            for p in [manifest, payload, train_probabilities, test_probabilities] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Embeddings, classifier outputs for both splits and the training index.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub store: EmbeddingStore,
    pub train_probs: ProbabilityTable,
    pub test_probs: ProbabilityTable,
    pub index: ClassIndex,
}

impl PreparedData {
    pub fn new(store: EmbeddingStore, train_probs: ProbabilityTable, test_probs: ProbabilityTable) -> Result<Self> {
        if train_probs.split() != Split::Train || test_probs.split() != Split::Test {
            return Err(Error::Validation("probability tables must cover the train and test splits".into()));
        }
        train_probs.validate_against(&store)?;
        test_probs.validate_against(&store)?;
        let index = ClassIndex::build(&store, Split::Train);
        Ok(PreparedData {
            store,
            train_probs,
            test_probs,
            index,
        })
    }

    pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        let data = synth::generate(spec, seed)?;
        let clf = spec.classifier(seed)?;
        let train = clf.predict_split(&data.store, Split::Train)?;
        let test = clf.predict_split(&data.store, Split::Test)?;
        Self::new(data.store, train, test)
    }

    pub fn from_source(source: &DatasetSource) -> Result<Self> {
        match source {
            DatasetSource::Synthetic { spec, seed } => Self::synthetic(spec, *seed),
            DatasetSource::Files {
                manifest,
                payload,
                train_probabilities,
                test_probabilities,
            } => {
                let store = EmbeddingStore::load(manifest, payload)?;
                Self::new(
                    store,
                    ProbabilityTable::load(train_probabilities)?,
                    ProbabilityTable::load(test_probabilities)?,
                )
            }
        }
    }

    pub fn table(&self, split: Split) -> &ProbabilityTable {
        match split {
            Split::Train => &self.train_probs,
            Split::Test => &self.test_probs,
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub selected_epoch: usize,
    pub binary: BinaryMetrics,
    pub rerank: RerankReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub binary_accuracy: MeanStd,
    pub f1: MeanStd,
    pub classifier: MeanStd,
    pub hard: MeanStd,
    pub soft: MeanStd,
    pub mean_comparator_queries: MeanStd,
}

impl Summary {
    pub fn of(rows: &[SeedResult]) -> Self {
        let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
        Summary {
            binary_accuracy: col(|r| r.binary.accuracy),
            f1: col(|r| r.binary.f1),
            classifier: col(|r| r.rerank.classifier),
            hard: col(|r| r.rerank.hard),
            soft: col(|r| r.rerank.soft),
            mean_comparator_queries: col(|r| r.rerank.mean_comparator_queries),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub seeds: Vec<SeedResult>,
    pub summary: Summary,
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub result: SeedResult,
    pub model: ComparatorModel,
    pub report: TrainReport,
    pub ranked: Vec<RankedResult>,
}

/// Sample → train → evaluate → re-rank for a single seed.
pub fn run_seed(
    data: &PreparedData,
    sampler: &SamplerConfig,
    arch: &Architecture,
    train: &TrainConfig,
    rerank: &RerankConfig,
    seed: u64,
) -> Result<SeedArtifacts> {
    let sampler = SamplerConfig { seed, ..*sampler };
    let train_cfg = TrainConfig { seed, ..*train };
    let train_pairs = pairsampler::sample_train(&data.store, &data.train_probs, &data.index, &sampler)
        .map_err(|e| e.in_stage("sampling"))?;
    let eval_pairs = pairsampler::sample_eval(&data.store, &data.test_probs, &data.index, &sampler)
        .map_err(|e| e.in_stage("sampling"))?;
    let model = ComparatorModel::new(arch.for_data(&data.store), seed).map_err(|e| e.in_stage("training"))?;
    let (model, report) = comparator::train(model, &data.store, &train_pairs, &eval_pairs, &train_cfg)
        .map_err(|e| e.in_stage("training"))?;
    let binary = report.epochs[report.selected_epoch - 1].eval;
    let (rerank_report, ranked) =
        reranker::evaluate_rerank(&data.store, Split::Test, &data.test_probs, &data.index, &model, rerank)
            .map_err(|e| e.in_stage("reranking"))?;
    Ok(SeedArtifacts {
        result: SeedResult {
            seed,
            train_pairs: train_pairs.len(),
            eval_pairs: eval_pairs.len(),
            selected_epoch: report.selected_epoch,
            binary,
            rerank: rerank_report,
        },
        model,
        report,
        ranked,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs every seed and writes `results.json`, and per seed a checkpoint,
/// the training report and the ranked results, into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<ResultBundle> {
    config.validate()?;
    let data = PreparedData::from_source(&config.dataset).map_err(|e| e.in_stage("loading"))?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let a = run_seed(&data, &config.sampler, &config.comparator, &config.train, &config.rerank, seed)?;
        let stem = format!("seed_{seed}");
        a.model
            .save(
                &out.join(format!("{stem}_comparator.json")),
                &out.join(format!("{stem}_comparator.bin")),
                seed,
                a.report.selected_epoch,
                Some(a.result.binary),
            )
            .map_err(|e| e.in_stage("writing"))?;
        write_json(&out.join(format!("{stem}_train_report.json")), &a.report)?;
        reranker::write_results_jsonl(&a.ranked, &out.join(format!("{stem}_ranked.jsonl")))?;
        rows.push(a.result);
    }
    let bundle = ResultBundle {
        summary: Summary::of(&rows),
        seeds: rows,
    };
    write_json(&out.join("results.json"), &bundle)?;
    Ok(bundle)
}

/// One machine-readable explanation panel per query: ranked classes with the
/// neighbors that represented them and their C, S and final scores.
pub fn export_explanations(results: &[RankedResult], store: &EmbeddingStore) -> Result<Value> {
    let mut queries = Vec::with_capacity(results.len());
    for r in results {
        let query = store.get(r.split, r.query)?;
        let mut classes = Vec::with_capacity(r.classes.len());
        for (rank, c) in r.classes.iter().enumerate() {
            let name = store.class_name(c.class).ok_or(Error::UnknownClass(c.class))?;
            for &n in &c.neighbors {
                let rec = store.get(Split::Train, n)?;
                if rec.class != c.class {
                    return Err(Error::Validation(format!("neighbor {n} is not in {}", c.class)));
                }
            }
            classes.push(json!({
                "rank": rank + 1,
                "class": c.class,
                "class_name": name,
                "probability": c.probability,
                "neighbors": c.neighbors,
                "score": c.score,
                "final_score": c.final_score,
            }));
        }
        queries.push(json!({
            "query": r.query,
            "split": r.split,
            "true_class": query.class,
            "predicted": r.predicted,
            "mode": r.mode,
            "comparator_queries": r.comparator_queries,
            "classes": classes,
        }));
    }
    Ok(json!({
        "format": EXPLANATION_FORMAT,
        "dataset": store.manifest().dataset,
        "queries": queries,
    }))
}
