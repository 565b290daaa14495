//! Config-driven experiment runs: build or load a (pre-trained) model,
//! apply a method, train, score the test split and persist everything under
//! one output directory.

mod studies;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Precision;
use crate::budget::count_trainable;
use crate::data::{load_parallel, subset, ParallelCorpus, Split, SyntheticTaskSpec, Vocab, HELD_OUT_PAIRS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, relative_performance, MetricReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, Seq2Seq};
use crate::peft::{apply_method, PeftMethod};
use crate::train::{train, TrainConfig, TrainingHistory};

pub use studies::{
    distance_experiment, size_experiment, sweep, Correlation as CorrelationRow, DistanceOutcome, DistanceRow,
    SizeOutcome, SizeRow, SweepOutcome, SweepRow,
};

pub const RESULTS_CSV_HEADER: &str = "name,method,trainable,total,ratio_pct,bleu,chrf,dev_ppl,rel_perf_pct,seconds";

const DECODE_CHUNK: usize = 64;

fn held_out() -> usize {
    HELD_OUT_PAIRS
}

/// Where the parallel data of a run comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic {
        generator: SyntheticTaskSpec,
        train_pairs: usize,
        #[serde(default = "held_out")]
        dev_pairs: usize,
        #[serde(default = "held_out")]
        test_pairs: usize,
    },
    /// Whitespace-tokenized, line-aligned files. Without `vocab` the
    /// vocabulary is built from the training files.
    Files {
        train_src: PathBuf,
        train_tgt: PathBuf,
        dev_src: PathBuf,
        dev_tgt: PathBuf,
        test_src: PathBuf,
        test_tgt: PathBuf,
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl TaskSource {
    pub fn load(&self) -> Result<TaskData> {
        match self {
            TaskSource::Synthetic {
                generator,
                train_pairs,
                dev_pairs,
                test_pairs,
            } => Ok(TaskData {
                vocab: Vocab::synthetic(generator.vocab_size),
                train: generator.generate_split(Split::Train, *train_pairs)?,
                dev: generator.generate_split(Split::Dev, *dev_pairs)?,
                test: generator.generate_split(Split::Test, *test_pairs)?,
            }),
            TaskSource::Files {
                train_src,
                train_tgt,
                dev_src,
                dev_tgt,
                test_src,
                test_tgt,
                vocab,
            } => {
                let vocab = match vocab {
                    Some(path) => Vocab::load(path)?,
                    None => {
                        let src = std::fs::read_to_string(train_src)?;
                        let tgt = std::fs::read_to_string(train_tgt)?;
                        Vocab::build(src.lines().chain(tgt.lines()))
                    }
                };
                Ok(TaskData {
                    train: load_parallel(train_src, train_tgt, &vocab)?,
                    dev: load_parallel(dev_src, dev_tgt, &vocab)?,
                    test: load_parallel(test_src, test_tgt, &vocab)?,
                    vocab,
                })
            }
        }
    }

    /// The synthetic generator, if any.
    pub fn generator(&self) -> Option<&SyntheticTaskSpec> {
        match self {
            TaskSource::Synthetic { generator, .. } => Some(generator),
            TaskSource::Files { .. } => None,
        }
    }
}

/// Full fine-tuning on a related task before the method is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentSpec {
    pub task: TaskSource,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    pub method: PeftMethod,
    pub task: TaskSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub parent: Option<ParentSpec>,
    /// Train on a seeded subset of this many training pairs.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Longest hypothesis produced at test time, EOS included.
    #[serde(default)]
    pub decode_max_len: Option<usize>,
    /// When false the `seconds` column is written as 0.
    #[serde(default = "default_true")]
    pub record_wall_clock: bool,
}

/// Command-line overrides of a loaded spec.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<PeftMethod>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub precision: Option<Precision>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..12])
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.method {
            self.method = *m;
        }
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(p) = o.precision {
            self.train.precision = p;
            if let Some(parent) = &mut self.parent {
                parent.train.precision = p;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "._:+-".contains(c)) {
            return Err(Error::Config(format!(
                "run name {:?} must be non-empty and use only letters, digits and ._:+-",
                self.name
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(parent) = &self.parent {
            parent.train.validate()?;
        }
        for task in std::iter::once(&self.task).chain(self.parent.as_ref().map(|p| &p.task)) {
            if let Some(g) = task.generator() {
                g.validate()?;
                if g.vocab_size != self.model.vocab_size {
                    return Err(Error::Config(format!(
                        "synthetic vocabulary {} differs from model vocab_size {}",
                        g.vocab_size, self.model.vocab_size
                    )));
                }
            }
        }
        if self.decode_max_len == Some(0) {
            return Err(Error::Config("decode_max_len must be at least 1".into()));
        }
        Ok(())
    }

    fn identity(&self) -> ExperimentSpec {
        ExperimentSpec {
            output_dir: PathBuf::new(),
            record_wall_clock: false,
            ..self.clone()
        }
    }

    /// Digest of everything that determines the result (not the output
    /// location or timing flag).
    pub fn hash(&self) -> String {
        sha_hex(serde_json::to_string(&self.identity()).expect("spec serializes").as_bytes())
    }

    /// Digest shared by runs that differ only in name and method; a full
    /// fine-tuning run in the same group is the baseline of the others.
    pub fn group(&self) -> String {
        let mut g = self.identity();
        g.name.clear();
        g.method = PeftMethod::FullFt;
        sha_hex(serde_json::to_string(&g).expect("spec serializes").as_bytes())
    }

    pub fn parent_hash(&self) -> Option<String> {
        let parent = self.parent.as_ref()?;
        let key = serde_json::to_string(&(&self.model, parent)).expect("spec serializes");
        Some(sha_hex(key.as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.name.replace(':', "_"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("model.ckpt")
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub spec_hash: String,
    pub group: String,
    pub method: PeftMethod,
    pub trainable: u64,
    pub total: u64,
    pub ratio_pct: f64,
    pub bleu: f64,
    pub chrf: f64,
    pub dev_ppl: f64,
    pub rel_perf_pct: Option<f64>,
    pub seconds: f64,
}

impl ExperimentResult {
    pub fn csv_row(&self) -> String {
        let rel = self.rel_perf_pct.map(|r| format!("{r:.2}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.4},{:.2},{:.2},{:.4},{},{:.3}",
            self.name,
            self.method,
            self.trainable,
            self.total,
            self.ratio_pct,
            self.bleu,
            self.chrf,
            self.dev_ppl,
            rel,
            self.seconds
        )
    }
}

/// All results of one output directory, keyed by spec hash in first-seen
/// order. Persisted as `results.json` and rendered to `results.csv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsStore {
    rows: Vec<ExperimentResult>,
}

impl ResultsStore {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("results.json");
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(Self {
            rows: serde_json::from_str(&std::fs::read_to_string(path)?)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(&self.rows)? + "\n")?;
        std::fs::write(dir.join("results.csv"), self.to_csv())?;
        Ok(())
    }

    pub fn rows(&self) -> &[ExperimentResult] {
        &self.rows
    }

    pub fn upsert(&mut self, row: ExperimentResult) {
        match self.rows.iter_mut().find(|r| r.spec_hash == row.spec_hash) {
            Some(slot) => *slot = row,
            None => self.rows.push(row),
        }
        self.fill_relative();
    }

    /// The latest full fine-tuning result of `group`.
    pub fn baseline(&self, group: &str) -> Option<&ExperimentResult> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.group == group && r.method == PeftMethod::FullFt)
    }

    fn fill_relative(&mut self) {
        let rel: Vec<Option<f64>> = self
            .rows
            .iter()
            .map(|r| {
                self.baseline(&r.group)
                    .and_then(|b| relative_performance(r.bleu, b.bleu).ok())
            })
            .collect();
        for (row, rel) in self.rows.iter_mut().zip(rel) {
            row.rel_perf_pct = rel;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULTS_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Aligned plain-text table.
    pub fn render_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<w$}  {:<18} {:>12} {:>9} {:>7} {:>7} {:>8} {:>8}\n",
            "name", "method", "trainable", "ratio%", "bleu", "chrf", "dev_ppl", "rel%"
        );
        for r in &self.rows {
            let rel = r.rel_perf_pct.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<w$}  {:<18} {:>12} {:>9.4} {:>7.2} {:>7.2} {:>8.3} {:>8}",
                r.name,
                r.method.to_string(),
                r.trainable,
                r.ratio_pct,
                r.bleu,
                r.chrf,
                r.dev_ppl,
                rel
            );
        }
        s
    }
}

/// Greedy translations of `srcs`, detokenized.
pub fn translate(model: &Seq2Seq, vocab: &Vocab, srcs: &[&[usize]], max_len: usize, precision: Precision) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(DECODE_CHUNK) {
        for ids in model.greedy_decode_batch(chunk, max_len, precision)? {
            out.push(vocab.decode(&ids));
        }
    }
    Ok(out)
}

/// BLEU and chrF++ of greedy translations of `data`.
pub fn score(model: &Seq2Seq, vocab: &Vocab, data: &ParallelCorpus, max_len: usize, precision: Precision) -> Result<MetricReport> {
    let srcs: Vec<&[usize]> = data.pairs.iter().map(|p| p.src.as_slice()).collect();
    let hyps = translate(model, vocab, &srcs, max_len, precision)?;
    let refs: Vec<String> = data.pairs.iter().map(|p| vocab.decode(&p.tgt)).collect();
    evaluate(&hyps, &refs)
}

fn check_vocab(model: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary has {} entries but model vocab_size is {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    Ok(())
}

fn decode_len(spec: &ExperimentSpec, data: &ParallelCorpus) -> usize {
    spec.decode_max_len.unwrap_or_else(|| {
        let longest = data.pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(1);
        (2 * longest).min(spec.model.max_positions)
    })
}

/// The pre-trained parent of `spec`, trained once per output directory and
/// then read back from `parents/<hash>.ckpt`.
pub fn parent_model(spec: &ExperimentSpec) -> Result<Option<Seq2Seq>> {
    let (Some(parent), Some(hash)) = (&spec.parent, spec.parent_hash()) else {
        return Ok(None);
    };
    let path = spec.output_dir.join("parents").join(format!("{hash}.ckpt"));
    if path.exists() {
        return load_checkpoint(&path).map(Some);
    }
    let data = parent.task.load()?;
    check_vocab(&spec.model, &data.vocab)?;
    let mut model = Seq2Seq::build(&spec.model)?;
    apply_method(&mut model, PeftMethod::FullFt, parent.train.seed)?;
    let history = train(&mut model, &data.train, &data.dev, &parent.train)?;
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    history.save_csv(&path.with_extension("history.csv"))?;
    // stored without a method so children can be instrumented
    let model = Seq2Seq::from_parts(model.config().clone(), model.store().clone(), None)?;
    save_checkpoint(&model, &path)?;
    Ok(Some(model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub result: ExperimentResult,
    pub history: TrainingHistory,
    pub metrics: MetricReport,
}

/// Runs `spec` end to end and records it in `<output_dir>/results.csv`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    spec.validate()?;
    let start = Instant::now();
    let data = spec.task.load()?;
    check_vocab(&spec.model, &data.vocab)?;
    let train_set = match spec.subset {
        Some(n) => subset(&data.train, n, spec.train.seed)?,
        None => data.train.clone(),
    };
    let mut model = match parent_model(spec)? {
        Some(m) => m,
        None => Seq2Seq::build(&spec.model)?,
    };
    apply_method(&mut model, spec.method, spec.train.seed)?;
    let history = train(&mut model, &train_set, &data.dev, &spec.train)?;
    let metrics = score(&model, &data.vocab, &data.test, decode_len(spec, &data.test), spec.train.precision)?;

    let report = count_trainable(&spec.model, spec.method);
    let trainable = model.store().trainable_count();
    if trainable != report.trainable {
        return Err(Error::Degenerate(format!(
            "instrumented model has {trainable} trainable parameters, closed form gives {}",
            report.trainable
        )));
    }
    let seconds = if spec.record_wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mut result = ExperimentResult {
        name: spec.name.clone(),
        spec_hash: spec.hash(),
        group: spec.group(),
        method: spec.method,
        trainable,
        total: report.total,
        ratio_pct: report.ratio_pct,
        bleu: metrics.bleu,
        chrf: metrics.chrf,
        dev_ppl: history.best_dev_ppl,
        rel_perf_pct: None,
        seconds,
    };

    let dir = spec.run_dir();
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&model, &dir.join("model.ckpt"))?;
    history.save_csv(&dir.join("history.csv"))?;
    spec.save(&dir.join("spec.json"))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;

    let mut store = ResultsStore::load(&spec.output_dir)?;
    store.upsert(result.clone());
    store.save(&spec.output_dir)?;
    result.rel_perf_pct = store
        .rows()
        .iter()
        .find(|r| r.spec_hash == result.spec_hash)
        .and_then(|r| r.rel_perf_pct);
    Ok(RunOutcome {
        result,
        history,
        metrics,
    })
}

/// Scores the saved checkpoint of `spec` on its test split.
pub fn evaluate_saved(spec: &ExperimentSpec) -> Result<MetricReport> {
    spec.validate()?;
    let path = spec.checkpoint_path();
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}; run `train` with this spec first",
            path.display()
        )));
    }
    let model = load_checkpoint(&path)?;
    let data = spec.task.load()?;
    check_vocab(model.config(), &data.vocab)?;
    score(&model, &data.vocab, &data.test, decode_len(spec, &data.test), spec.train.precision)
}
