//! The file-staged pipeline behind the command-line tool.
//!
//! Every stage reads its inputs from and writes its outputs to the run's
//! output directory, then records a manifest with content hashes, so any
//! stage can be rerun on its own:
//!
//! | stage    | reads                         | writes                            |
//! |----------|-------------------------------|-----------------------------------|
//! | ingest   | input CSV, internal networks  | `flows/`                          |
//! | tokenize | `flows/train.csv`             | `vocab/`, `sequences/`            |
//! | train    | `flows/train.csv`, `vocab/`   | `models/`                         |
//! | score    | `flows/test.csv`, `models/`   | `scores/`                         |
//! | combine  | `scores/frequency_*.csv`      | `scores/pc1_frequency.csv`        |
//! | eval     | `scores/`                     | `eval/auc.csv`, `eval/roc/`       |
//! | report   | `eval/auc.csv`                | `report/report.txt`               |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{build_sequences, dump_sequences, windows_for_all, AggregationRule};
use crate::error::{Error, Result};
use crate::eval::{evaluate_replicas, is_benign, pc1_combine, roc_curve, roc_svg, EvalReport, ScoreRow, ALL_ATTACKS};
use crate::freq_model::FrequencyModel;
use crate::ingest::{
    clean, day_histogram, parse_flow_csv, read_staged_flows, split_by_day, write_rejected_report,
    write_staged_flows, FlowRecord, InternalNetworks, RowId, Schema,
};
use crate::lstm_model::{collapse_by_row, score_tokens, train_replica, ModelDims, Strides, TrainConfig};
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::tokenize::{build_vocab, Feature, Vocabulary};

/// Name given to the frequency model in score files and reports.
pub const FREQUENCY: &str = "frequency";
pub const LSTM: &str = "lstm";
pub const PC1: &str = "pc1";
const PC1_FEATURE: &str = "protobytes+ports";

/// Settings for one pipeline run, usually loaded from a TOML file.
///
/// Relative paths are resolved against the directory holding the config
/// file. The top-level `seed` is the root of all randomness; replica `r`
/// trains with `seed + r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub internal_networks: PathBuf,
    pub out_dir: PathBuf,
    /// Clean-baseline day; defaults to the earliest date in the data.
    pub train_day: Option<NaiveDate>,
    pub features: Vec<Feature>,
    pub rules: Vec<AggregationRule>,
    pub replicas: u32,
    pub seed: u64,
    /// Thread count for training and scoring; 0 lets the runtime decide.
    pub workers: usize,
    pub strides: Strides,
    pub schema: Schema,
    pub train: TrainConfig,
    pub model: ModelDims,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: "flows.csv".into(),
            internal_networks: "internal.txt".into(),
            out_dir: "out".into(),
            train_day: None,
            features: Feature::ALL.to_vec(),
            rules: AggregationRule::ALL.to_vec(),
            replicas: 3,
            seed: 0,
            workers: 0,
            strides: Strides::default(),
            schema: Schema::default(),
            train: TrainConfig::default(),
            model: ModelDims::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.input, &mut self.internal_networks, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.features.is_empty() {
            return bad("at least one feature is required");
        }
        if self.rules.is_empty() {
            return bad("at least one aggregation rule is required");
        }
        if self.replicas == 0 {
            return bad("replicas must be positive");
        }
        if self.strides.protobytes == 0 || self.strides.ports == 0 {
            return bad("strides must be positive");
        }
        self.train.validate()
    }

    /// The training settings with the root seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// What a stage consumed and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub created: String,
    /// Path (relative to the output directory when inside it) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_flows(&self) -> PathBuf {
        self.root.join("flows/train.csv")
    }
    pub fn test_flows(&self) -> PathBuf {
        self.root.join("flows/test.csv")
    }
    pub fn rejected(&self) -> PathBuf {
        self.root.join("flows/rejected.csv")
    }
    pub fn days(&self) -> PathBuf {
        self.root.join("flows/days.csv")
    }
    pub fn vocab(&self, f: Feature) -> PathBuf {
        self.root.join(format!("vocab/{f}.tsv"))
    }
    pub fn sequences(&self, f: Feature, r: AggregationRule, split: &str) -> PathBuf {
        self.root.join(format!("sequences/{f}_{r}_{split}.txt"))
    }
    pub fn frequency_model(&self, f: Feature) -> PathBuf {
        self.root.join(format!("models/{FREQUENCY}_{f}.csv"))
    }
    pub fn checkpoint(&self, f: Feature, r: AggregationRule, replica: u32) -> PathBuf {
        self.root.join(format!("models/{LSTM}_{f}_{r}_r{replica}.ckpt"))
    }
    pub fn frequency_scores(&self, f: Feature) -> PathBuf {
        self.root.join(format!("scores/{FREQUENCY}_{f}.csv"))
    }
    pub fn lstm_scores(&self, f: Feature, r: AggregationRule) -> PathBuf {
        self.root.join(format!("scores/{LSTM}_{f}_{r}.csv"))
    }
    pub fn pc1_scores(&self) -> PathBuf {
        self.root.join(format!("scores/{PC1}_{FREQUENCY}.csv"))
    }
    pub fn eval_table(&self) -> PathBuf {
        self.root.join("eval/auc.csv")
    }
    pub fn roc_dir(&self) -> PathBuf {
        self.root.join("eval/roc")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report/report.txt")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join(format!("manifests/{stage}.json"))
    }

    fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// A row of a persisted score set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub row_id: RowId,
    pub feature: String,
    pub rule: String,
    pub replica: u32,
    pub score: f64,
    pub label: String,
}

pub fn write_scores<W: Write>(rows: &[ScoreRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))?;
    Ok(())
}

pub fn read_scores(path: &Path, producer: &'static str) -> Result<Vec<ScoreRecord>> {
    let file = open_artifact(path, producer)?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(file));
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Splits a score file into replicas, each ordered as stored.
fn by_replica(rows: Vec<ScoreRecord>) -> Vec<Vec<ScoreRow>> {
    let mut map: BTreeMap<u32, Vec<ScoreRow>> = BTreeMap::new();
    for r in rows {
        map.entry(r.replica).or_default().push(ScoreRow {
            row_id: r.row_id,
            score: r.score,
            label: r.label,
        });
    }
    map.into_values().collect()
}

fn open_artifact(path: &Path, producer: &'static str) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file and a rename so an interrupted stage
/// never leaves a truncated artifact behind.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn require_single_day(train: &[FlowRecord]) -> Result<()> {
    let days = day_histogram(train);
    if days.len() > 1 {
        let first = *days.keys().next().expect("non-empty");
        let last = *days.keys().last().expect("non-empty");
        return Err(Error::CleanBaseline {
            days: days.len(),
            first,
            last,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestSummary {
    pub rows_read: u64,
    pub rejected: usize,
    pub dropped_external: usize,
    pub train_day: Option<NaiveDate>,
    pub train: usize,
    pub test: usize,
}

/// Runs stages against one [`RunConfig`].
pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg.out_dir.clone());
        Ok(Self { cfg, layout })
    }

    fn internal(&self) -> Result<InternalNetworks> {
        let path = &self.cfg.internal_networks;
        if !path.exists() {
            return Err(Error::Config(format!("internal network file {} does not exist", path.display())));
        }
        InternalNetworks::from_file(path)
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.layout.display(p), sha256_file(p)?)))
            .collect()
    }

    fn write_manifest(
        &self,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        details: serde_json::Value,
    ) -> Result<()> {
        let manifest = Manifest {
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            inputs: self.hashes(inputs)?,
            outputs: self.hashes(outputs)?,
            details,
        };
        let path = self.layout.manifest(stage);
        write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w).map_err(|e| Error::io(&path, e))
        })
    }

    fn read_flows(&self, path: &Path) -> Result<Vec<FlowRecord>> {
        read_staged_flows(BufReader::new(open_artifact(path, "ingest")?))
    }

    fn read_vocab(&self, f: Feature) -> Result<Vocabulary> {
        let path = self.layout.vocab(f);
        Vocabulary::read_tsv(BufReader::new(open_artifact(&path, "tokenize")?))
    }

    /// Parses, cleans and splits the input into training and test flows.
    pub fn ingest(&self) -> Result<IngestSummary> {
        let input = &self.cfg.input;
        if !input.exists() {
            return Err(Error::Config(format!("input {} does not exist", input.display())));
        }
        let internal = self.internal()?;
        let file = File::open(input).map_err(|e| Error::io(input, e))?;
        let parsed = parse_flow_csv(BufReader::new(file), &self.cfg.schema)?;
        let accepted = parsed.records.len();
        let cleaned = clean(parsed.records, &internal)?;
        let dropped_external = accepted - cleaned.len();
        let train_day = match self.cfg.train_day {
            Some(d) => d,
            None => cleaned
                .iter()
                .map(FlowRecord::date)
                .min()
                .ok_or(Error::EmptyInput("cleaned flow records"))?,
        };
        let histogram = day_histogram(&cleaned);
        let split = split_by_day(cleaned, train_day)?;
        log::info!(
            "ingest: {} rows, {} rejected, {} without internal endpoint, {} train / {} test",
            parsed.rows_read,
            parsed.rejected.len(),
            dropped_external,
            split.train.len(),
            split.test.len()
        );

        let l = &self.layout;
        write_atomic(&l.train_flows(), |w| write_staged_flows(&split.train, w))?;
        write_atomic(&l.test_flows(), |w| write_staged_flows(&split.test, w))?;
        write_atomic(&l.rejected(), |w| write_rejected_report(&parsed.rejected, w))?;
        write_atomic(&l.days(), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["date", "flows", "split"])?;
            for (d, n) in &histogram {
                let split = if *d == train_day { "train" } else { "test" };
                c.write_record([d.to_string(), n.to_string(), split.into()])?;
            }
            c.flush().map_err(|e| Error::io("<days>", e))?;
            Ok(())
        })?;
        let summary = IngestSummary {
            rows_read: parsed.rows_read,
            rejected: parsed.rejected.len(),
            dropped_external,
            train_day: split.train_day,
            train: split.train.len(),
            test: split.test.len(),
        };
        self.write_manifest(
            "ingest",
            &[input.clone(), self.cfg.internal_networks.clone()],
            &[l.train_flows(), l.test_flows(), l.rejected(), l.days()],
            serde_json::to_value(&summary).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(summary)
    }

    /// Builds each feature's vocabulary from the training flows and dumps
    /// the token sequences of every rule.
    pub fn tokenize(&self) -> Result<()> {
        let l = &self.layout;
        let train = self.read_flows(&l.train_flows())?;
        let test = self.read_flows(&l.test_flows())?;
        let internal = self.internal()?;
        let mut outputs = Vec::new();
        let mut details = BTreeMap::new();
        for &f in &self.cfg.features {
            let vocab = build_vocab(train.iter().map(|r| f.token(r)))?;
            write_atomic(&l.vocab(f), |w| vocab.write_tsv(w))?;
            outputs.push(l.vocab(f));
            details.insert(format!("{f}.vocab_size"), vocab.len());
            for &rule in &self.cfg.rules {
                for (split, records, stride) in [
                    ("train", &train, 1),
                    ("test", &test, self.cfg.strides.for_feature(f)),
                ] {
                    let units = build_sequences(records, rule, &vocab, f, &internal);
                    let path = l.sequences(f, rule, split);
                    write_atomic(&path, |w| dump_sequences(&units, &vocab, w))?;
                    details.insert(format!("{f}.{rule}.{split}.windows"), windows_for_all(&units, stride).len());
                    outputs.push(path);
                }
            }
        }
        log::info!("tokenize: {details:?}");
        self.write_manifest(
            "tokenize",
            &[l.train_flows(), l.test_flows(), self.cfg.internal_networks.clone()],
            &outputs,
            serde_json::to_value(details).map_err(|e| Error::Config(e.to_string()))?,
        )
    }

    /// Fits the frequency models and trains every (feature, rule, replica)
    /// network. Cells whose checkpoint was produced from the same inputs and
    /// settings are reused, so an interrupted grid resumes where it stopped.
    pub fn train(&self) -> Result<()> {
        let l = &self.layout;
        let train = self.read_flows(&l.train_flows())?;
        require_single_day(&train)?;
        let internal = self.internal()?;
        let tcfg = self.cfg.train_config();
        let train_hash = sha256_file(&l.train_flows())?;
        let mut inputs = vec![l.train_flows()];
        let mut outputs = Vec::new();
        let mut details = BTreeMap::new();
        for &f in &self.cfg.features {
            let vocab = self.read_vocab(f)?;
            inputs.push(l.vocab(f));
            let freq = FrequencyModel::fit(train.iter().map(|r| vocab.encode(&f.token(r))))?;
            write_atomic(&l.frequency_model(f), |w| freq.write_csv(&vocab, w))?;
            outputs.push(l.frequency_model(f));

            let model = self.cfg.model.with_vocab(vocab.len());
            let vocab_hash = sha256_file(&l.vocab(f))?;
            for &rule in &self.cfg.rules {
                let units = build_sequences(&train, rule, &vocab, f, &internal);
                let windows = windows_for_all(&units, 1);
                for replica in 0..self.cfg.replicas {
                    let ckpt = l.checkpoint(f, rule, replica);
                    let key_path = ckpt.with_extension("key");
                    let key = format!(
                        "{train_hash} {vocab_hash} {f} {rule} {replica} {}",
                        serde_json::to_string(&(&tcfg, &model)).map_err(|e| Error::Config(e.to_string()))?
                    );
                    let key = hex::encode(Sha256::digest(key.as_bytes()));
                    let fresh = ckpt.exists() && fs::read_to_string(&key_path).is_ok_and(|k| k.trim() == key);
                    if fresh {
                        log::info!("train: {f}/{rule} replica {replica} up to date");
                    } else {
                        log::info!("train: {f}/{rule} replica {replica} on {} windows", windows.len());
                        let outcome = train_replica(&windows, replica, &model, &tcfg)?;
                        write_atomic(&ckpt, |w| write_checkpoint(&outcome.params, w))?;
                        write_atomic(&ckpt.with_extension("history.csv"), |w| {
                            let mut c = csv::Writer::from_writer(w);
                            for e in &outcome.history {
                                c.serialize(e)?;
                            }
                            c.flush().map_err(|e| Error::io("<history>", e))?;
                            Ok(())
                        })?;
                        write_atomic(&key_path, |w| writeln!(w, "{key}").map_err(|e| Error::io(&key_path, e)))?;
                        details.insert(
                            format!("{f}.{rule}.r{replica}"),
                            serde_json::json!({
                                "windows": windows.len(),
                                "best_epoch": outcome.best_epoch,
                                "epochs_run": outcome.history.len(),
                            }),
                        );
                    }
                    outputs.push(ckpt);
                }
            }
        }
        self.write_manifest(
            "train",
            &inputs,
            &outputs,
            serde_json::to_value(details).map_err(|e| Error::Config(e.to_string()))?,
        )
    }

    /// Scores the test flows with every trained model.
    pub fn score(&self) -> Result<()> {
        let l = &self.layout;
        let test = self.read_flows(&l.test_flows())?;
        let internal = self.internal()?;
        let labels: HashMap<RowId, String> = test.iter().map(|r| (r.row_id, r.label.clone())).collect();
        let mut inputs = vec![l.test_flows()];
        let mut outputs = Vec::new();
        for &f in &self.cfg.features {
            let vocab = self.read_vocab(f)?;
            let freq_path = l.frequency_model(f);
            let freq = FrequencyModel::read_csv(&vocab, BufReader::new(open_artifact(&freq_path, "train")?))?;
            inputs.push(freq_path);
            let rows: Vec<ScoreRecord> = test
                .iter()
                .map(|r| ScoreRecord {
                    row_id: r.row_id,
                    feature: f.to_string(),
                    rule: String::new(),
                    replica: 0,
                    score: freq.score(vocab.encode(&f.token(r))),
                    label: r.label.clone(),
                })
                .collect();
            write_atomic(&l.frequency_scores(f), |w| write_scores(&rows, w))?;
            outputs.push(l.frequency_scores(f));

            let stride = self.cfg.strides.for_feature(f);
            for &rule in &self.cfg.rules {
                let units = build_sequences(&test, rule, &vocab, f, &internal);
                let windows = windows_for_all(&units, stride);
                let mut rows = Vec::new();
                for replica in 0..self.cfg.replicas {
                    let ckpt = l.checkpoint(f, rule, replica);
                    let params = read_checkpoint(BufReader::new(open_artifact(&ckpt, "train")?))?;
                    if params.vocab_size() != vocab.len() {
                        return Err(Error::Shape(format!(
                            "{} was trained on {} tokens but vocab/{f}.tsv has {}; rerun `flowseq train`",
                            ckpt.display(),
                            params.vocab_size(),
                            vocab.len()
                        )));
                    }
                    inputs.push(ckpt);
                    let scored = collapse_by_row(score_tokens(&params, &windows, &labels)?);
                    rows.extend(scored.into_iter().map(|s| ScoreRecord {
                        row_id: s.target_ref,
                        feature: f.to_string(),
                        rule: rule.to_string(),
                        replica,
                        score: s.score,
                        label: s.label,
                    }));
                }
                log::info!("score: {f}/{rule}: {} windows per replica", windows.len());
                write_atomic(&l.lstm_scores(f, rule), |w| write_scores(&rows, w))?;
                outputs.push(l.lstm_scores(f, rule));
            }
        }
        self.write_manifest("score", &inputs, &outputs, serde_json::Value::Null)
    }

    /// Fuses the two frequency score sets into their first principal
    /// component.
    pub fn combine(&self) -> Result<()> {
        let l = &self.layout;
        let a = l.frequency_scores(Feature::Protobytes);
        let b = l.frequency_scores(Feature::Ports);
        let strip = |rows: Vec<ScoreRecord>| -> Vec<ScoreRow> {
            rows.into_iter()
                .map(|r| ScoreRow {
                    row_id: r.row_id,
                    score: r.score,
                    label: r.label,
                })
                .collect()
        };
        let fused = pc1_combine(&strip(read_scores(&a, "score")?), &strip(read_scores(&b, "score")?))?;
        let rows: Vec<ScoreRecord> = fused
            .into_iter()
            .map(|r| ScoreRecord {
                row_id: r.row_id,
                feature: PC1_FEATURE.into(),
                rule: String::new(),
                replica: 0,
                score: r.score,
                label: r.label,
            })
            .collect();
        write_atomic(&l.pc1_scores(), |w| write_scores(&rows, w))?;
        self.write_manifest("combine", &[a, b], &[l.pc1_scores()], serde_json::Value::Null)
    }

    /// Score sets the eval stage looks at: `(model, feature, rule, path)`.
    fn score_sets(&self) -> Vec<(&'static str, String, String, PathBuf)> {
        let l = &self.layout;
        let mut sets = Vec::new();
        for &f in &self.cfg.features {
            for &rule in &self.cfg.rules {
                sets.push((LSTM, f.to_string(), rule.to_string(), l.lstm_scores(f, rule)));
            }
            sets.push((FREQUENCY, f.to_string(), String::new(), l.frequency_scores(f)));
        }
        if l.pc1_scores().exists() {
            sets.push((PC1, PC1_FEATURE.into(), String::new(), l.pc1_scores()));
        }
        sets
    }

    /// Per-attack AUCs for every score set, plus ROC curves for replica 0.
    pub fn eval(&self) -> Result<EvalReport> {
        let l = &self.layout;
        let mut report = EvalReport::default();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut svg_curves: BTreeMap<String, Vec<(String, crate::eval::RocCurve)>> = BTreeMap::new();
        for (model, feature, rule, path) in self.score_sets() {
            let replicas = by_replica(read_scores(&path, "score")?);
            inputs.push(path);
            report.rows.extend(evaluate_replicas(model, &feature, &rule, &replicas));
            let Some(first) = replicas.first() else { continue };
            let name = if rule.is_empty() {
                format!("{model}_{feature}")
            } else {
                format!("{model}_{feature}_{rule}")
            };
            let attacks: BTreeSet<&str> = first.iter().map(|r| r.label.as_str()).filter(|s| !is_benign(s)).collect();
            for attack in attacks.into_iter().chain(std::iter::once(ALL_ATTACKS)) {
                let (pos, neg): (Vec<&ScoreRow>, Vec<&ScoreRow>) = first.iter().partition(|r| {
                    if attack == ALL_ATTACKS {
                        !is_benign(&r.label)
                    } else {
                        r.label == attack
                    }
                });
                let pos: Vec<f64> = pos.iter().map(|r| r.score).collect();
                let neg: Vec<f64> = neg.iter().map(|r| r.score).collect();
                let Some(curve) = roc_curve(&pos, &neg) else { continue };
                let path = l.roc_dir().join(format!("{name}_{}.csv", slug(attack)));
                write_atomic(&path, |w| curve.write_csv(w))?;
                outputs.push(path);
                if attack == ALL_ATTACKS {
                    let label = if rule.is_empty() { model.to_string() } else { rule.clone() };
                    svg_curves.entry(feature.clone()).or_default().push((label, curve));
                }
            }
        }
        for (feature, curves) in &svg_curves {
            let path = l.roc_dir().join(format!("{}_all_attacks.svg", slug(feature)));
            let svg = roc_svg(curves);
            write_atomic(&path, |w| w.write_all(svg.as_bytes()).map_err(|e| Error::io("<svg>", e)))?;
            outputs.push(path);
        }
        write_atomic(&l.eval_table(), |w| report.write_csv(w))?;
        outputs.push(l.eval_table());
        self.write_manifest("eval", &inputs, &outputs, serde_json::Value::Null)?;
        Ok(report)
    }

    /// Renders the evaluation table as text, one table per feature.
    pub fn report(&self) -> Result<String> {
        let l = &self.layout;
        let table = EvalReport::read_csv(BufReader::new(open_artifact(&l.eval_table(), "eval")?))?;
        let mut text = String::from("AUC by attack type (mean over replicas; best per row in **bold**)\n\n");
        text.push_str(&table.to_text_tables());
        write_atomic(&l.report(), |w| w.write_all(text.as_bytes()).map_err(|e| Error::io("<report>", e)))?;
        self.write_manifest("report", &[l.eval_table()], &[l.report()], serde_json::Value::Null)?;
        Ok(text)
    }

    /// Every stage in order. PC1 fusion runs only when both features are
    /// configured.
    pub fn run_all(&self) -> Result<String> {
        self.ingest()?;
        self.tokenize()?;
        self.train()?;
        self.score()?;
        if Feature::ALL.iter().all(|f| self.cfg.features.contains(f)) {
            self.combine()?;
        } else {
            let stale = self.layout.pc1_scores();
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        self.eval()?;
        self.report()
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Sizes the global thread pool; 0 keeps the default. Only the first call
/// in a process has an effect.
pub fn configure_workers(workers: usize) {
    if workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tests::record;

    #[test]
    fn config_paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_toml("input = \"data/f.csv\"\nout_dir = \"/abs/out\"\nreplicas = 1").unwrap();
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(cfg.input, PathBuf::from("/runs/a/data/f.csv"));
        assert_eq!(cfg.internal_networks, PathBuf::from("/runs/a/internal.txt"));
        assert_eq!(cfg.out_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.replicas, 1);
        assert!(RunConfig::from_toml("no_such_key = 1").is_err());
        let round = RunConfig::from_toml(&RunConfig::default().to_toml()).unwrap();
        assert_eq!(round, RunConfig::default());
    }

    #[test]
    fn train_seed_follows_root_seed() {
        let cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        assert_eq!(cfg.train_config().seed, 42);
        assert!(RunConfig { replicas: 0, ..RunConfig::default() }.validate().is_err());
    }

    #[test]
    fn multi_day_training_input_is_refused() {
        let flows = vec![
            record(0, "2017-07-03 09:00:00", "192.168.10.5", "8.8.8.8"),
            record(1, "2017-07-04 09:00:00", "192.168.10.5", "8.8.8.8"),
        ];
        assert!(matches!(require_single_day(&flows), Err(Error::CleanBaseline { days: 2, .. })));
        assert!(require_single_day(&flows[..1]).is_ok());
    }

    #[test]
    fn missing_upstream_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().join("out"),
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        let err = p.report().unwrap_err();
        assert!(err.to_string().contains("run `flowseq eval` first"), "{err}");
        let err = p.combine().unwrap_err();
        assert!(err.to_string().contains("`flowseq score`"), "{err}");
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("All Attacks"), "all_attacks");
        assert_eq!(slug("protobytes+ports"), "protobytes_ports");
    }
}
