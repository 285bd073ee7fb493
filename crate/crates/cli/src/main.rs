//! `pcnn`: command-line harness for PCNN re-ranking experiments.
//!
//! Every command prints one JSON document on stdout. Failures print
//! `{"error": ..., "causes": [...], "stage": ...}` on stderr and exit with
//! status 1 (2 for argument errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pcnn_core::comparator::{self, evaluate_scores, ComparatorModel};
use pcnn_core::embedstore::EmbeddingStore;
use pcnn_core::experiment::{self, ExperimentConfig, PreparedData};
use pcnn_core::nnindex::ClassIndex;
use pcnn_core::pairsampler::{self, PairSet};
use pcnn_core::reranker::{self, CosineScorer, RerankMode};
use pcnn_core::synth::{self, SyntheticSpec};
use pcnn_core::{ClassId, Split};

#[derive(Parser)]
#[command(name = "pcnn", version, about = "Probable-class nearest-neighbor re-ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its classifier outputs and a starter config.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON file with (a subset of) the synthetic spec fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate an embedding store and optional probability tables.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        payload: PathBuf,
        #[arg(long = "probabilities")]
        probabilities: Vec<PathBuf>,
    },
    /// Build the training-split index and report per-class sizes.
    Index {
        #[command(flatten)]
        exp: Experiment,
        /// Keep this fraction of each class.
        #[arg(long)]
        subsample: Option<f64>,
    },
    /// Sample comparator pairs and write them as JSON lines.
    Sample {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a comparator for one seed and write its checkpoint and report.
    Train {
        #[command(flatten)]
        exp: Experiment,
    },
    /// Binary metrics of a checkpoint on balanced test pairs, plus kNN baselines.
    Eval {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        model: ModelArg,
        /// Also report k-nearest-neighbor accuracy with cosine and comparator scoring.
        #[arg(long)]
        knn: Option<usize>,
    },
    /// Re-rank the test split and write the ranked results.
    Rerank {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Probability floor below which classes are not scored.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self, random-grid and shuffled-pair acceptance rates.
    Sanity {
        #[command(flatten)]
        exp: Experiment,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Cumulative top-Q accuracy of the classifier on the test split.
    Ceiling {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 5, 10])]
        q: Vec<usize>,
    },
    /// Turn ranked results into explanation panels.
    Explain {
        #[command(flatten)]
        exp: Experiment,
        /// Ranked results (JSON lines) from `rerank` or `sweep`.
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run sample → train → evaluate → re-rank for every configured seed.
    Sweep {
        #[command(flatten)]
        exp: Experiment,
    },
}

#[derive(Args)]
struct Experiment {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed to use instead of the first configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint header; defaults to the seed's checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
}

struct Loaded {
    config: ExperimentConfig,
    seed: u64,
    data: PreparedData,
}

impl Experiment {
    fn load(&self) -> Result<Loaded> {
        let config = ExperimentConfig::load(&self.config)?;
        config.validate()?;
        let seed = self.seed.unwrap_or(config.seeds[0]);
        let data = PreparedData::from_source(&config.dataset).map_err(|e| e.in_stage("loading"))?;
        Ok(Loaded { config, seed, data })
    }
}

impl Loaded {
    fn checkpoint_path(&self) -> PathBuf {
        self.config.output.join(format!("seed_{}_comparator.json", self.seed))
    }

    fn model(&self, arg: &ModelArg) -> Result<ComparatorModel> {
        let path = arg.checkpoint.clone().unwrap_or_else(|| self.checkpoint_path());
        let (model, _) = ComparatorModel::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let config = model.config();
        if (config.tokens, config.depth) != (self.data.store.tokens(), self.data.store.depth()) {
            bail!(
                "checkpoint expects {}×{} grids, the dataset has {}×{}",
                config.tokens,
                config.depth,
                self.data.store.tokens(),
                self.data.store.depth()
            );
        }
        Ok(model)
    }

    fn sampler(&self) -> pairsampler::SamplerConfig {
        pairsampler::SamplerConfig {
            seed: self.seed,
            ..self.config.sampler
        }
    }

    fn eval_pairs(&self) -> Result<PairSet> {
        let d = &self.data;
        Ok(pairsampler::sample_eval(&d.store, &d.test_probs, &d.index, &self.sampler()).map_err(|e| e.in_stage("sampling"))?)
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synth_command(out: &Path, spec: Option<&Path>, seed: u64) -> Result<Value> {
    let spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    let data = synth::generate(&spec, seed)?;
    let clf = spec.classifier(seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    data.store.save(&out.join("store.json"), &out.join("store.bin"))?;
    let mut test = None;
    for (split, stem) in [(Split::Train, "train_probs"), (Split::Test, "test_probs")] {
        let table = clf.predict_split(&data.store, split)?;
        table.save(&out.join(format!("{stem}.json")), &out.join(format!("{stem}.bin")))?;
        test = Some(table);
    }
    write_json(&out.join("centroids.json"), &json!(data.centroids))?;
    write_json(&out.join("spec.json"), &serde_json::to_value(spec)?)?;
    let config = json!({
        "dataset": {
            "kind": "files",
            "manifest": "store.json",
            "payload": "store.bin",
            "train_probabilities": "train_probs.json",
            "test_probabilities": "test_probs.json",
        },
        "output": "results",
    });
    write_json(&out.join("experiment.json"), &config)?;
    let qs: Vec<usize> = [1, 10].into_iter().filter(|&q| q <= spec.classes).collect();
    let ceiling = reranker::topq_ceiling(&data.store, &test.expect("test table written"), &qs)?;
    Ok(json!({
        "out": out,
        "records": {"train": data.store.split_len(Split::Train), "test": data.store.split_len(Split::Test)},
        "classes": spec.classes,
        "classifier_ceiling": ceiling.iter().map(|(q, acc)| json!({"q": q, "accuracy": acc})).collect::<Vec<_>>(),
    }))
}

fn ingest_command(manifest: &Path, payload: &Path, tables: &[PathBuf]) -> Result<Value> {
    let store = EmbeddingStore::load(manifest, payload)?;
    let mut checked = Vec::new();
    for path in tables {
        let table = pcnn_core::classifier::ProbabilityTable::load(path)?;
        table.validate_against(&store).with_context(|| format!("validating {}", path.display()))?;
        checked.push(json!({"path": path, "split": table.split(), "rows": table.len()}));
    }
    let m = store.manifest();
    Ok(json!({
        "dataset": m.dataset,
        "classes": store.num_classes(),
        "tokens": store.tokens(),
        "depth": store.depth(),
        "records": {"train": store.split_len(Split::Train), "test": store.split_len(Split::Test)},
        "value_range": store.value_range(),
        "probabilities": checked,
    }))
}

fn index_command(l: &Loaded, subsample: Option<f64>) -> Result<Value> {
    let index = match subsample {
        Some(f) => l.data.index.subsample(f, l.seed)?,
        None => ClassIndex::build(&l.data.store, Split::Train),
    };
    let sizes: Vec<usize> = (0..index.num_classes() as u32).map(|c| index.class_len(ClassId(c))).collect();
    Ok(json!({
        "records": index.len(),
        "depth": index.depth(),
        "class_sizes": sizes,
        "min_class": sizes.iter().min(),
    }))
}

fn sample_command(l: &Loaded, split: SplitArg, out: &Path) -> Result<Value> {
    let d = &l.data;
    let (set, table) = match split {
        SplitArg::Train => (pairsampler::sample_train(&d.store, &d.train_probs, &d.index, &l.sampler())?, &d.train_probs),
        SplitArg::Test => (l.eval_pairs()?, &d.test_probs),
    };
    set.write_jsonl(out)?;
    let mut summary = json!({
        "out": out,
        "pairs": set.len(),
        "positives": set.positives(),
        "negatives": set.negatives(),
    });
    if let SplitArg::Train = split {
        let queries: Vec<_> = d.store.split(Split::Train).map(|r| (r.id, r.class)).collect();
        let audit = pairsampler::pair_count_audit(&set, &queries, table, l.config.sampler.q);
        summary["audit"] = json!({"expected": audit.expected, "actual": audit.actual, "ok": audit.ok()});
    }
    Ok(summary)
}

fn train_command(l: &Loaded) -> Result<Value> {
    let d = &l.data;
    let train_pairs =
        pairsampler::sample_train(&d.store, &d.train_probs, &d.index, &l.sampler()).map_err(|e| e.in_stage("sampling"))?;
    let eval_pairs = l.eval_pairs()?;
    let model = ComparatorModel::new(l.config.comparator.for_data(&d.store), l.seed)?;
    let train = comparator::TrainConfig {
        seed: l.seed,
        ..l.config.train
    };
    let (model, report) =
        comparator::train(model, &d.store, &train_pairs, &eval_pairs, &train).map_err(|e| e.in_stage("training"))?;
    let header = l.checkpoint_path();
    let metrics = report.epochs[report.selected_epoch - 1].eval;
    fs::create_dir_all(&l.config.output).with_context(|| format!("creating {}", l.config.output.display()))?;
    model.save(&header, &header.with_extension("bin"), l.seed, report.selected_epoch, Some(metrics))?;
    write_json(&l.config.output.join(format!("seed_{}_train_report.json", l.seed)), &serde_json::to_value(&report)?)?;
    Ok(json!({
        "checkpoint": header,
        "train_pairs": train_pairs.len(),
        "eval_pairs": eval_pairs.len(),
        "selected_epoch": report.selected_epoch,
        "metrics": metrics,
    }))
}

fn eval_command(l: &Loaded, arg: &ModelArg, knn: Option<usize>) -> Result<Value> {
    let model = l.model(arg)?;
    let pairs = l.eval_pairs()?;
    let scores = model.score_pairs(&l.data.store, &pairs.pairs, 512)?;
    let labels: Vec<bool> = pairs.pairs.iter().map(|p| p.label.is_positive()).collect();
    let metrics = evaluate_scores(&scores, &labels, l.config.train.threshold)?;
    let mut out = json!({"pairs": pairs.len(), "metrics": metrics});
    if let Some(k) = knn {
        let d = &l.data;
        out["knn"] = json!({
            "k": k,
            "cosine": reranker::knn_accuracy(&d.store, Split::Test, &d.index, k, &CosineScorer)?,
            "comparator": reranker::knn_accuracy(&d.store, Split::Test, &d.index, k, &model)?,
        });
    }
    Ok(out)
}

fn rerank_command(l: &Loaded, arg: &ModelArg, mode: Option<ModeArg>, floor: Option<f64>, out: Option<&Path>) -> Result<Value> {
    let model = l.model(arg)?;
    let mut config = l.config.rerank;
    if let Some(m) = mode {
        config.mode = match m {
            ModeArg::Hard => RerankMode::Hard,
            ModeArg::Soft => RerankMode::Soft,
        };
    }
    if let Some(f) = floor {
        config.floor = f;
    }
    let d = &l.data;
    let (report, ranked) = reranker::evaluate_rerank(&d.store, Split::Test, &d.test_probs, &d.index, &model, &config)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| l.config.output.join(format!("seed_{}_ranked.jsonl", l.seed)));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    reranker::write_results_jsonl(&ranked, &path)?;
    Ok(json!({"ranked": path, "config": config, "report": report}))
}

fn sanity_command(l: &Loaded, arg: &ModelArg) -> Result<Value> {
    let model = l.model(arg)?;
    let report = reranker::sanity_suite(&model, &l.data.store, Split::Test, l.seed, l.config.train.threshold)?;
    Ok(serde_json::to_value(report)?)
}

fn ceiling_command(l: &Loaded, qs: &[usize]) -> Result<Value> {
    let rows = reranker::topq_ceiling(&l.data.store, &l.data.test_probs, qs)?;
    Ok(json!(rows.iter().map(|(q, acc)| json!({"q": q, "accuracy": acc})).collect::<Vec<_>>()))
}

fn explain_command(l: &Loaded, ranked: &Path, out: &Path) -> Result<Value> {
    let results = reranker::read_results_jsonl(ranked)?;
    let panels = experiment::export_explanations(&results, &l.data.store)?;
    write_json(out, &panels)?;
    Ok(json!({"out": out, "queries": results.len()}))
}

fn sweep_command(exp: &Experiment) -> Result<Value> {
    let mut config = ExperimentConfig::load(&exp.config)?;
    if let Some(seed) = exp.seed {
        config.seeds = vec![seed];
    }
    let bundle = experiment::run(&config)?;
    Ok(json!({"output": config.output, "summary": bundle.summary, "seeds": bundle.seeds.len()}))
}

fn dispatch(command: Command) -> Result<Value> {
    match command {
        Command::Synth { out, spec, seed } => synth_command(&out, spec.as_deref(), seed),
        Command::Ingest {
            manifest,
            payload,
            probabilities,
        } => ingest_command(&manifest, &payload, &probabilities),
        Command::Index { exp, subsample } => index_command(&exp.load()?, subsample),
        Command::Sample { exp, split, out } => sample_command(&exp.load()?, split, &out),
        Command::Train { exp } => train_command(&exp.load()?),
        Command::Eval { exp, model, knn } => eval_command(&exp.load()?, &model, knn),
        Command::Rerank {
            exp,
            model,
            mode,
            floor,
            out,
        } => rerank_command(&exp.load()?, &model, mode, floor, out.as_deref()),
        Command::Sanity { exp, model } => sanity_command(&exp.load()?, &model),
        Command::Ceiling { exp, q } => ceiling_command(&exp.load()?, &q),
        Command::Explain { exp, ranked, out } => explain_command(&exp.load()?, &ranked, &out),
        Command::Sweep { exp } => sweep_command(&exp),
    }
}

fn error_json(err: &anyhow::Error) -> Value {
    let stage = err.chain().find_map(|e| match e.downcast_ref::<pcnn_core::Error>() {
        Some(pcnn_core::Error::Stage { stage, .. }) => Some(*stage),
        _ => None,
    });
    let causes: Vec<String> = err.chain().skip(1).map(|e| e.to_string()).collect();
    json!({"error": err.to_string(), "causes": causes, "stage": stage})
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind().to_string(), "usage": e.render().to_string()}));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable output"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}
