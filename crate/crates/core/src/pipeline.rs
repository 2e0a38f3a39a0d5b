//! Experiment orchestration: the TOML experiment file, staged runs under the
//! freezing contract, the merged Stage II+III ablation, and report tables.
//!
//! An experiment directory holds `{stage}_{modality}.ckpt` checkpoints,
//! `{stage}_{modality}.history.json` training curves, `pseudo_labels.jsonl`
//! and the `report.json` / `report.txt` pair.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::{
    annotate_with_stats, dataset_transcripts, read_transcripts, AnnotationBackend, AnnotationCache, MockBackend,
    PseudoLabeledCorpus, RetryPolicy,
};
use crate::autograd::{Gradients, Tape};
use crate::checkpoint::{verify_frozen, ModalityTag, StageCheckpoint, StageTag};
use crate::context::{stack_rows, stage1_sequences, stage2_train, stage2_train_on, SequenceSet, Stage1Classifier, Stage2Classifier, Stage2Model};
use crate::corpus::{load_conversations, load_split_spec, split_dataset, Dataset, LabelSpace, LabelSpaceKind};
use crate::encoders::{pretrain_text_encoder, stage1_train, FeatureStore, Modality, ReferenceTextEncoder, Stage1Model};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, weighted_f1, BarChart, EvalReport, UtteranceClassifier};
use crate::fusion::{predict_paired, stage3_train, stage3_train_on, FrozenStreams, FusedClassifier, FusionKind, PairedSet, Stage3Model};
use crate::nn::ParamStore;
use crate::par::{self, Execution};
use crate::synthetic::{SyntheticData, SyntheticKind};
use crate::tensor::Matrix;
use crate::trainer::{fit, History, Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    /// `{"id","text"}` JSONL to pseudo-label; defaults to the training
    /// split's transcripts.
    pub transcripts: Option<PathBuf>,
    /// `mock`, or a real backend profile (`gpt-3.5-turbo`, `llama-3`, `mixtral`).
    pub backend: String,
    /// Defaults to `annotation_cache.jsonl` inside the experiment directory.
    pub cache: Option<PathBuf>,
    pub api_key_env: String,
    pub max_retries: usize,
    pub max_in_flight: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            transcripts: None,
            backend: "mock".into(),
            cache: None,
            api_key_env: "LLM_API_KEY".into(),
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn all_stages() -> Vec<StageTag> {
    vec![StageTag::Pretrain, StageTag::Stage1, StageTag::Stage2, StageTag::Stage3]
}

/// One experiment. Relative paths are resolved against the directory of the
/// config file. `seed` and `execution` apply to every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: PathBuf,
    pub splits: PathBuf,
    pub features: PathBuf,
    pub label_space: LabelSpaceKind,
    /// Experiment directory; the CLI's `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "all_stages")]
    pub stages: Vec<StageTag>,
    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub annotation: AnnotationConfig,
    #[serde(default = "TrainConfig::pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: TrainConfig,
    #[serde(default)]
    pub stage3: TrainConfig,
}

const STAGE_SECTIONS: [&str; 4] = ["pretrain", "stage1", "stage2", "stage3"];

impl ExperimentConfig {
    /// Parses a config; relative paths are taken relative to `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for section in STAGE_SECTIONS {
            if let Some(toml::Value::Table(t)) = value.get_mut(section) {
                for key in ["seed", "execution"] {
                    if t.contains_key(key) {
                        return Err(Error::Config(format!("[{section}] may not set {key}; set it at the top level")));
                    }
                }
                // a partial [pretrain] section keeps the pre-training epoch default
                if section == "pretrain" && !t.contains_key("epochs") {
                    t.insert("epochs".into(), toml::Value::Integer(TrainConfig::pretrain().epochs as i64));
                }
            }
        }
        let mut config: ExperimentConfig =
            toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.resolve_paths(base);
        config.apply_globals();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        // per-stage seeds mirror the top-level one and are not written
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for section in STAGE_SECTIONS {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
                t.remove("execution");
            }
        }
        toml::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        fix(&mut self.splits);
        fix(&mut self.features);
        for p in [&mut self.out_dir, &mut self.annotation.transcripts, &mut self.annotation.cache].into_iter().flatten() {
            fix(p);
        }
    }

    fn apply_globals(&mut self) {
        for c in [&mut self.pretrain, &mut self.stage1, &mut self.stage2, &mut self.stage3] {
            c.seed = self.seed;
            c.execution = self.execution;
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.apply_globals();
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self.apply_globals();
        self
    }

    pub fn with_stages(mut self, stages: Vec<StageTag>) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages requested".into()));
        }
        for (name, c) in STAGE_SECTIONS.iter().zip(self.stage_configs()) {
            c.validate().map_err(|e| Error::Config(format!("[{name}]: {e}")))?;
        }
        if self.annotation.max_in_flight == 0 {
            return Err(Error::Config("annotation.max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn stage_configs(&self) -> [&TrainConfig; 4] {
        [&self.pretrain, &self.stage1, &self.stage2, &self.stage3]
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace::new(self.label_space)
    }

    /// Requested stages, deduplicated, in pipeline order.
    pub fn ordered_stages(&self) -> Vec<StageTag> {
        self.stages.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// A config for the files written by [`SyntheticData::write_to`], with
    /// relative paths (so it belongs next to them) and short desk-scale
    /// schedules.
    pub fn for_synthetic(kind: SyntheticKind, seed: u64) -> Self {
        let stage = |epochs, lr| TrainConfig::stage().with_epochs(epochs).with_lr(lr);
        let mut config = Self {
            name: kind.to_string(),
            data: "conversations.jsonl".into(),
            splits: "splits.json".into(),
            features: "features.jsonl".into(),
            label_space: kind.label_space().kind(),
            out_dir: None,
            stages: all_stages(),
            fusion: FusionKind::CoAttention,
            seed,
            execution: Execution::default(),
            annotation: AnnotationConfig { transcripts: Some("transcripts.jsonl".into()), ..AnnotationConfig::default() },
            pretrain: TrainConfig::pretrain().with_epochs(4).with_lr(3e-3),
            stage1: stage(3, 1e-3),
            stage2: stage(4, 1e-3),
            stage3: stage(6, 3e-4),
        };
        config.apply_globals();
        config
    }
}

/// Splits, features and the transcripts to pseudo-label.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub features: FeatureStore,
    pub transcripts: Vec<(String, String)>,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let dataset = load_conversations(&config.data, config.label_space())?;
        let spec = load_split_spec(&config.splits)?;
        let (train, val, test) = split_dataset(&dataset, &spec)?;
        let features = FeatureStore::read_jsonl(&config.features)?;
        let transcripts = match &config.annotation.transcripts {
            Some(p) => read_transcripts(p)?,
            None => dataset_transcripts(&train),
        };
        Self::checked(Self { train, val, test, features, transcripts })
    }

    pub fn from_synthetic(data: &SyntheticData) -> Result<Self> {
        let (train, val, test) = data.split()?;
        Self::checked(Self { train, val, test, features: data.features.clone(), transcripts: data.transcripts.clone() })
    }

    fn checked(self) -> Result<Self> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Precondition("experiments need non-empty train and val splits".into()));
        }
        Ok(self)
    }

    pub fn label_space(&self) -> LabelSpace {
        self.train.label_space
    }
}

/// Outcome of one frozen-checkpoint comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenCheck {
    /// The stage run that had to leave `checkpoint` untouched.
    pub during: String,
    pub checkpoint: String,
    pub frozen: bool,
}

fn ckpt_name(stage: StageTag, modality: ModalityTag) -> String {
    format!("{stage}_{modality}")
}

fn write_history(dir: &Path, stage: StageTag, modality: ModalityTag, history: &History) -> Result<()> {
    let path = dir.join(format!("{}.history.json", ckpt_name(stage, modality)));
    fs::write(&path, serde_json::to_string_pretty(history)?).map_err(|e| Error::io(&path, e))
}

fn save(dir: &Path, ckpt: &StageCheckpoint) -> Result<()> {
    ckpt.save(&StageCheckpoint::path_in(dir, ckpt.stage, ckpt.modality))
}

/// Earlier checkpoints as loaded before a later stage runs.
struct Upstream {
    during: StageTag,
    loaded: Vec<StageCheckpoint>,
}

impl Upstream {
    fn new(during: StageTag) -> Self {
        Self { during, loaded: Vec::new() }
    }

    fn load(&mut self, dir: &Path, stage: StageTag, modality: ModalityTag) -> Result<StageCheckpoint> {
        let c = StageCheckpoint::load_required(dir, stage, modality)?;
        self.loaded.push(c.clone());
        Ok(c)
    }

    /// Compares every loaded checkpoint with the file on disk and with the
    /// in-memory model that was used (`live`, same order as loading).
    fn verify(self, dir: &Path, live: &[StageCheckpoint]) -> Result<Vec<FrozenCheck>> {
        let mut checks = Vec::new();
        for (i, before) in self.loaded.iter().enumerate() {
            let on_disk = StageCheckpoint::load(&StageCheckpoint::path_in(dir, before.stage, before.modality))?;
            let mut frozen = verify_frozen(before, &on_disk)?;
            if let Some(after) = live.get(i) {
                frozen &= verify_frozen(before, after)?;
            }
            checks.push(FrozenCheck {
                during: self.during.to_string(),
                checkpoint: ckpt_name(before.stage, before.modality),
                frozen,
            });
        }
        Ok(checks)
    }
}

pub fn make_backend(config: &AnnotationConfig) -> Result<Box<dyn AnnotationBackend>> {
    if config.backend == "mock" {
        return Ok(Box::new(MockBackend::new()));
    }
    #[cfg(feature = "http")]
    {
        use crate::annotator::{BackendProfile, HttpBackend};
        let profile = BackendProfile::parse(&config.backend)
            .ok_or_else(|| Error::Config(format!("unknown annotation backend {:?}", config.backend)))?;
        Ok(Box::new(HttpBackend::from_env(profile, &config.api_key_env)?))
    }
    #[cfg(not(feature = "http"))]
    Err(Error::Config(format!("backend {:?} needs the http feature", config.backend)))
}

pub fn annotation_policy(config: &AnnotationConfig, backend: &str) -> RetryPolicy {
    let base = if backend == "mock" { RetryPolicy::immediate() } else { RetryPolicy::default() };
    RetryPolicy { max_retries: config.max_retries, max_in_flight: config.max_in_flight, ..base }
}

/// Pseudo-labels the transcripts and pre-trains the reference text encoder.
pub fn run_pretrain(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<Vec<FrozenCheck>> {
    let backend = make_backend(&config.annotation)?;
    let cache_path = config.annotation.cache.clone().unwrap_or_else(|| dir.join("annotation_cache.jsonl"));
    let mut cache = AnnotationCache::open(&cache_path)?;
    let policy = annotation_policy(&config.annotation, &config.annotation.backend);
    let (corpus, stats) = annotate_with_stats(&data.transcripts, backend.as_ref(), &mut cache, &policy)?;
    log::info!(
        "annotated {} transcripts ({} failed, {} backend calls, {} cache hits)",
        corpus.len(),
        corpus.failed_ids.len(),
        stats.backend_calls,
        stats.cache_hits
    );
    corpus.write_jsonl(&dir.join("pseudo_labels.jsonl"))?;
    let outcome = pretrain_text_encoder(&corpus, &config.pretrain)?;
    if let Some(acc) = outcome.val_accuracy {
        log::info!("pre-training hold-out accuracy {acc:.4}");
    }
    save(dir, &outcome.encoder.to_checkpoint(&config.pretrain.config_hash())?)?;
    write_history(dir, StageTag::Pretrain, ModalityTag::Text, &outcome.history)?;
    Ok(Vec::new())
}

pub fn run_stage1(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<Vec<FrozenCheck>> {
    let mut upstream = Upstream::new(StageTag::Stage1);
    let pre = upstream.load(dir, StageTag::Pretrain, ModalityTag::Text)?;
    let encoder = ReferenceTextEncoder::from_checkpoint(&pre)?;
    let cfg = &config.stage1;
    let ls = data.label_space();
    let hash = cfg.config_hash();

    let text = Stage1Model::text(encoder, ls, cfg.seed);
    let (text, h) = stage1_train(text, &data.train, &data.val, Some(&data.features), cfg)?;
    save(dir, &text.to_checkpoint(&hash)?)?;
    write_history(dir, StageTag::Stage1, ModalityTag::Text, &h)?;

    let speech = Stage1Model::speech(data.features.dim(), ls, cfg.seed);
    let (speech, h) = stage1_train(speech, &data.train, &data.val, Some(&data.features), cfg)?;
    save(dir, &speech.to_checkpoint(&hash)?)?;
    write_history(dir, StageTag::Stage1, ModalityTag::Speech, &h)?;
    // Stage I fine-tunes a copy of the encoder, so only the file is compared
    upstream.verify(dir, &[])
}

pub fn run_stage2(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<Vec<FrozenCheck>> {
    let mut upstream = Upstream::new(StageTag::Stage2);
    let text1 = Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Text)?)?;
    let speech1 = Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Speech)?)?;
    let cfg = &config.stage2;
    let hash = cfg.config_hash();
    for (stage1, tag) in [(&text1, ModalityTag::Text), (&speech1, ModalityTag::Speech)] {
        let (model, h) = stage2_train(stage1, &data.train, &data.val, Some(&data.features), cfg)?;
        save(dir, &model.to_checkpoint(&hash)?)?;
        write_history(dir, StageTag::Stage2, tag, &h)?;
    }
    let old_hash = |m: &Stage1Model, c: &StageCheckpoint| m.to_checkpoint(&c.config_hash);
    let live = [old_hash(&text1, &upstream.loaded[0])?, old_hash(&speech1, &upstream.loaded[1])?];
    upstream.verify(dir, &live)
}

/// The frozen Stage I and II models of both streams.
pub struct LoadedStreams {
    pub text1: Stage1Model,
    pub speech1: Stage1Model,
    pub text2: Stage2Model,
    pub speech2: Stage2Model,
}

impl LoadedStreams {
    fn load(dir: &Path, upstream: &mut Upstream) -> Result<Self> {
        Ok(Self {
            text1: Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Text)?)?,
            speech1: Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Speech)?)?,
            text2: Stage2Model::from_checkpoint(&upstream.load(dir, StageTag::Stage2, ModalityTag::Text)?)?,
            speech2: Stage2Model::from_checkpoint(&upstream.load(dir, StageTag::Stage2, ModalityTag::Speech)?)?,
        })
    }

    pub fn frozen<'a>(&'a self, features: &'a FeatureStore) -> FrozenStreams<'a> {
        FrozenStreams { text1: &self.text1, speech1: &self.speech1, text2: &self.text2, speech2: &self.speech2, features }
    }

    /// Re-serialized checkpoints, in the order [`LoadedStreams::load`] reads them.
    fn live(&self, loaded: &[StageCheckpoint]) -> Result<Vec<StageCheckpoint>> {
        Ok(vec![
            self.text1.to_checkpoint(&loaded[0].config_hash)?,
            self.speech1.to_checkpoint(&loaded[1].config_hash)?,
            self.text2.to_checkpoint(&loaded[2].config_hash)?,
            self.speech2.to_checkpoint(&loaded[3].config_hash)?,
        ])
    }
}

pub fn run_stage3(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<Vec<FrozenCheck>> {
    let mut upstream = Upstream::new(StageTag::Stage3);
    let streams = LoadedStreams::load(dir, &mut upstream)?;
    let cfg = &config.stage3;
    let (model, h) = stage3_train(streams.frozen(&data.features), &data.train, &data.val, cfg, config.fusion)?;
    save(dir, &model.to_checkpoint(&cfg.config_hash())?)?;
    write_history(dir, StageTag::Stage3, ModalityTag::Fused, &h)?;
    let live = streams.live(&upstream.loaded)?;
    upstream.verify(dir, &live)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `audio-I`, `text-II`, `fused-III`, ...
    pub key: String,
    pub modality: String,
    pub stage: String,
    pub val: EvalReport,
    pub test: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub label_space: String,
    pub fusion: FusionKind,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub frozen_checks: Vec<FrozenCheck>,
}

impl ExperimentReport {
    pub fn row(&self, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen_checks.iter().all(|c| c.frozen)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `modality,stage,val_weighted_f1,test_weighted_f1`; an empty test split
    /// leaves the last column blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,stage,val_weighted_f1,test_weighted_f1\n");
        for r in &self.rows {
            let test = r.test.as_ref().map(|t| format!("{:.6}", t.weighted_f1)).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.6},{}", r.modality, r.stage, r.val.weighted_f1, test);
        }
        out
    }

    /// Weighted F1 in percent, one row per modality and stage.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} (label space {}, fusion {}, seed {})\n{:<22}{:>10}{:>11}\n",
            self.name, self.label_space, self.fusion, self.seed, "Modality (Stage)", "Val W-F1", "Test W-F1"
        );
        for r in &self.rows {
            let test = r.test.as_ref().map_or("-".to_string(), |t| format!("{:.2}", 100.0 * t.weighted_f1));
            let label = format!("{} ({})", r.modality, r.stage);
            let _ = writeln!(out, "{label:<22}{:>10.2}{test:>11}", 100.0 * r.val.weighted_f1);
        }
        if !self.frozen_checks.is_empty() {
            let ok = self.frozen_checks.iter().filter(|c| c.frozen).count();
            let _ = writeln!(out, "frozen checkpoints: {ok}/{} bit-exact", self.frozen_checks.len());
        }
        out
    }

    /// Validation F1 per row as bar-chart data.
    pub fn to_chart(&self) -> BarChart {
        let mut chart = BarChart::new(format!("{}: validation weighted F1", self.name));
        for r in &self.rows {
            chart.push(&r.modality, &r.stage, r.val.weighted_f1);
        }
        chart
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

fn row<M: UtteranceClassifier + ?Sized>(
    key: &str,
    modality: &str,
    stage: &str,
    model: &M,
    data: &ExperimentData,
    exec: Execution,
) -> Result<ReportRow> {
    let val = evaluate(model, &data.val, exec)?.with_tags(data.val.split, key);
    let test = if data.test.num_utterances() == 0 {
        None
    } else {
        Some(evaluate(model, &data.test, exec)?.with_tags(data.test.split, key))
    };
    Ok(ReportRow { key: key.into(), modality: modality.into(), stage: stage.into(), val, test })
}

fn load_if_present(dir: &Path, stage: StageTag, modality: ModalityTag) -> Result<Option<StageCheckpoint>> {
    let path = StageCheckpoint::path_in(dir, stage, modality);
    if path.exists() {
        StageCheckpoint::load(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Scores whichever Stage I, II and III checkpoints exist in `dir`, in the
/// row order audio-I, audio-II, text-I, text-II, fused-III.
pub fn build_report(
    config: &ExperimentConfig,
    data: &ExperimentData,
    dir: &Path,
    frozen_checks: Vec<FrozenCheck>,
) -> Result<ExperimentReport> {
    let exec = config.execution;
    let feats = Some(&data.features);
    let mut rows = Vec::new();
    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    for (tag, name) in [(ModalityTag::Speech, "audio"), (ModalityTag::Text, "text")] {
        let s1 = load_if_present(dir, StageTag::Stage1, tag)?.map(|c| Stage1Model::from_checkpoint(&c)).transpose()?;
        let s2 = load_if_present(dir, StageTag::Stage2, tag)?.map(|c| Stage2Model::from_checkpoint(&c)).transpose()?;
        if let Some(m) = &s1 {
            rows.push(row(&format!("{name}-I"), name, "I", &Stage1Classifier { model: m, features: feats }, data, exec)?);
            if let Some(m2) = &s2 {
                let clf = Stage2Classifier { stage1: m, stage2: m2, features: feats };
                rows.push(row(&format!("{name}-II"), name, "II", &clf, data, exec)?);
            }
        }
        stage1.push(s1);
        stage2.push(s2);
    }
    if let (Some(Some(speech1)), Some(Some(text1)), Some(Some(speech2)), Some(Some(text2)), Some(c3)) = (
        stage1.first(),
        stage1.get(1),
        stage2.first(),
        stage2.get(1),
        load_if_present(dir, StageTag::Stage3, ModalityTag::Fused)?,
    ) {
        let stage3 = Stage3Model::from_checkpoint(&c3)?;
        let streams = FrozenStreams { text1, speech1, text2, speech2, features: &data.features };
        rows.push(row("fused-III", "audio+text", "III", &FusedClassifier { streams, stage3: &stage3 }, data, exec)?);
    }
    Ok(ExperimentReport {
        name: config.name.clone(),
        label_space: config.label_space.as_str().to_string(),
        fusion: config.fusion,
        seed: config.seed,
        rows,
        frozen_checks,
    })
}

/// Runs the requested stages in pipeline order, then scores every checkpoint
/// present and writes `report.json` and `report.txt` into `dir`.
pub fn run_pipeline(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checks = Vec::new();
    for stage in config.ordered_stages() {
        log::info!("running {stage}");
        checks.extend(match stage {
            StageTag::Pretrain => run_pretrain(config, data, dir)?,
            StageTag::Stage1 => run_stage1(config, data, dir)?,
            StageTag::Stage2 => run_stage2(config, data, dir)?,
            StageTag::Stage3 => run_stage3(config, data, dir)?,
        });
    }
    let report = build_report(config, data, dir, checks)?;
    report.save(dir)?;
    Ok(report)
}

/// Stage II of both streams and Stage III as one jointly trained network.
#[derive(Debug, Clone)]
pub struct MergedModel {
    pub text: Stage2Model,
    pub speech: Stage2Model,
    pub fusion: Stage3Model,
}

#[derive(Serialize, Deserialize)]
struct MergedMeta {
    text: serde_json::Value,
    speech: serde_json::Value,
    fusion: serde_json::Value,
}

impl MergedModel {
    /// Initialized exactly like separate Stage II and III models with the same
    /// seed.
    pub fn new(text_dim: usize, speech_dim: usize, label_space: LabelSpace, kind: FusionKind, seed: u64) -> Self {
        let text = Stage2Model::new(Modality::Text, text_dim, label_space, seed);
        let speech = Stage2Model::new(Modality::Speech, speech_dim, label_space, seed);
        let fusion = Stage3Model::new(kind, text.output_dim(), label_space, seed);
        Self { text, speech, fusion }
    }

    /// Includes the Stage II classifier heads, which the merged network
    /// carries but never uses.
    pub fn num_parameters(&self) -> usize {
        self.text.num_parameters() + self.speech.num_parameters() + self.fusion.num_parameters()
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.speech.params, &self.speech.head_params, &self.text.params, &self.text.head_params, &self.fusion.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![
            &mut self.speech.params,
            &mut self.speech.head_params,
            &mut self.text.params,
            &mut self.text.head_params,
            &mut self.fusion.params,
        ]
    }

    fn check(&self, audio: &[&Matrix], text: &[&Matrix]) -> Result<Vec<usize>> {
        if audio.len() != text.len() {
            return Err(Error::LengthMismatch { left: audio.len(), right: text.len() });
        }
        for (a, t) in audio.iter().zip(text) {
            self.speech.check_input(a)?;
            self.text.check_input(t)?;
            if a.rows() != t.rows() {
                return Err(Error::LengthMismatch { left: a.rows(), right: t.rows() });
            }
        }
        Ok(audio.iter().map(|a| a.rows()).collect())
    }

    fn forward(&self, tape: &mut Tape<'_>, audio: &[&Matrix], text: &[&Matrix], lengths: &[usize]) -> Result<crate::autograd::Var> {
        let a = tape.constant(stack_rows(audio)?);
        let t = tape.constant(stack_rows(text)?);
        let fa = self.speech.features(tape, 0, a, lengths);
        let ft = self.text.features(tape, 2, t, lengths);
        Ok(self.fusion.forward(tape, 4, fa, ft, lengths))
    }

    /// Logits from Stage I sequences of both streams.
    pub fn logits_batch(&self, audio: &[&Matrix], text: &[&Matrix]) -> Result<Vec<Matrix>> {
        let lengths = self.check(audio, text)?;
        let mut tape = Tape::new(self.stores().into_iter().map(|s| s.values()).collect());
        for g in 0..5 {
            tape.freeze_group(g);
        }
        let l = self.forward(&mut tape, audio, text, &lengths)?;
        Ok(crate::context::split_rows(tape.value(l), &lengths))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<StageCheckpoint> {
        let meta = MergedMeta {
            text: serde_json::to_value(&self.text.arch)?,
            speech: serde_json::to_value(&self.speech.arch)?,
            fusion: serde_json::to_value(&self.fusion.arch)?,
        };
        Ok(StageCheckpoint::new(
            StageTag::Stage3,
            ModalityTag::Merged,
            config_hash,
            serde_json::to_value(meta)?,
            self.stores().into_iter().cloned().collect(),
        ))
    }

    pub fn from_checkpoint(ckpt: &StageCheckpoint) -> Result<Self> {
        ckpt.expect_tags(StageTag::Stage3, ModalityTag::Merged)?;
        let meta: MergedMeta = ckpt.meta_as()?;
        let [sp, sh, tp, th, fp]: [ParamStore; 5] =
            ckpt.params.clone().try_into().map_err(|_| Error::Checkpoint("merged checkpoint needs 5 stores".into()))?;
        Ok(Self {
            speech: Stage2Model { arch: serde_json::from_value(meta.speech)?, params: sp, head_params: sh },
            text: Stage2Model { arch: serde_json::from_value(meta.text)?, params: tp, head_params: th },
            fusion: Stage3Model { arch: serde_json::from_value(meta.fusion)?, params: fp },
        })
    }
}

const MERGED_CHUNK: usize = 8;
const MERGED_EVAL_CHUNK: usize = 16;

/// Argmax predictions of the merged network over Stage I sequences.
pub fn predict_merged(model: &MergedModel, set: &PairedSet, exec: Execution) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(MERGED_EVAL_CHUNK).collect();
    let parts = par::map(exec, &chunks, |c| {
        let a: Vec<&Matrix> = c.iter().map(|&i| &set.audio[i]).collect();
        let t: Vec<&Matrix> = c.iter().map(|&i| &set.text[i]).collect();
        model.logits_batch(&a, &t)
    });
    let mut preds = Vec::new();
    for p in parts {
        for l in p? {
            preds.extend((0..l.rows()).map(|r| l.argmax_row(r)));
        }
    }
    Ok(preds)
}

struct MergedObjective {
    model: MergedModel,
    train: PairedSet,
    val: PairedSet,
}

impl Objective for MergedObjective {
    fn stores(&self) -> Vec<&ParamStore> {
        self.model.stores()
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        self.model.stores_mut()
    }

    /// The Stage II heads take no part in the merged loss.
    fn frozen_groups(&self) -> Vec<usize> {
        vec![1, 3]
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn chunk_loss(&self, items: &[usize], grads: &mut Gradients) -> Result<(f64, usize)> {
        let audio: Vec<&Matrix> = items.iter().map(|&i| &self.train.audio[i]).collect();
        let text: Vec<&Matrix> = items.iter().map(|&i| &self.train.text[i]).collect();
        let lengths = self.model.check(&audio, &text)?;
        let targets: Vec<usize> = items.iter().flat_map(|&i| self.train.labels[i].iter().copied()).collect();
        let mut tape = Tape::new(self.stores().into_iter().map(|s| s.values()).collect());
        let l = self.model.forward(&mut tape, &audio, &text, &lengths)?;
        let loss = tape.cross_entropy(l, &targets);
        tape.backward(loss, grads);
        Ok((tape.value(loss).get(0, 0), targets.len()))
    }

    fn validation(&self, exec: Execution) -> Result<(Vec<usize>, Vec<usize>)> {
        predict_merged(&self.model, &self.val, exec).map(|p| (p, self.val.flat_labels()))
    }

    fn n_classes(&self) -> usize {
        self.model.fusion.arch.label_space.len()
    }

    fn chunk_size(&self) -> usize {
        MERGED_CHUNK
    }
}

/// Trains a merged model on frozen Stage I sequences of both streams.
pub fn merged_train_on(model: MergedModel, train: PairedSet, val: PairedSet, config: &TrainConfig) -> Result<(MergedModel, History)> {
    let mut obj = MergedObjective { model, train, val };
    let history = fit(&mut obj, config)?;
    Ok((obj.model, history))
}

/// Stage I sequences of both streams, paired.
pub fn stage1_pairs(text1: &Stage1Model, speech1: &Stage1Model, dataset: &Dataset, features: &FeatureStore) -> Result<PairedSet> {
    PairedSet::new(stage1_sequences(speech1, dataset, Some(features))?, stage1_sequences(text1, dataset, Some(features))?)
}

/// Trains Stage II (both streams) and Stage III jointly on top of frozen
/// Stage I models.
pub fn merged_stage_train(
    text1: &Stage1Model,
    speech1: &Stage1Model,
    features: &FeatureStore,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    kind: FusionKind,
) -> Result<(MergedModel, History)> {
    let model = MergedModel::new(text1.embedding_dim(), speech1.embedding_dim(), train.label_space, kind, config.seed);
    let train = stage1_pairs(text1, speech1, train, features)?;
    let val = stage1_pairs(text1, speech1, val, features)?;
    merged_train_on(model, train, val, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub arm: String,
    pub val_weighted_f1: f64,
    pub test_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub title: String,
    pub rows: Vec<AblationRow>,
    pub frozen_checks: Vec<FrozenCheck>,
}

impl AblationReport {
    /// Arms in first-seen order.
    pub fn arms(&self) -> Vec<String> {
        let mut arms: Vec<String> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm.clone());
            }
        }
        arms
    }

    pub fn mean_val(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.val_weighted_f1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen_checks.iter().all(|c| c.frozen)
    }

    /// Per-seed bars plus a `mean` group.
    pub fn to_chart(&self) -> BarChart {
        let mut chart = BarChart::new(self.title.clone());
        for r in &self.rows {
            chart.push(format!("seed{}", r.seed), &r.arm, r.val_weighted_f1);
        }
        for arm in self.arms() {
            if let Some(m) = self.mean_val(&arm) {
                chart.push("mean", &arm, m);
            }
        }
        chart
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `{stem}.json` and `{stem}.csv` (bar-chart data) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_chart().to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub const ARM_COATTENTION: &str = "audio+text";
pub const ARM_CONCAT: &str = "audio+text (w/o co-attention)";
pub const ARM_HIERARCHICAL: &str = "hierarchical";
pub const ARM_MERGED: &str = "merged";

fn split_f1(preds: &[usize], set: &PairedSet, n_classes: usize) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    weighted_f1(preds, &set.flat_labels(), n_classes).map(Some)
}

/// Stage III with co-attention and with plain concatenation on the same
/// frozen Stage I and II checkpoints from `dir`.
pub fn ablate_fusion(config: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> Result<AblationReport> {
    let mut upstream = Upstream::new(StageTag::Stage3);
    let streams = LoadedStreams::load(dir, &mut upstream)?;
    let frozen = streams.frozen(&data.features);
    let exec = config.execution;
    let (train, val, test) =
        (frozen.paired_set(&data.train, exec)?, frozen.paired_set(&data.val, exec)?, frozen.paired_set(&data.test, exec)?);
    let n = data.label_space().len();
    let mut rows = Vec::new();
    for (kind, arm) in [(FusionKind::CoAttention, ARM_COATTENTION), (FusionKind::Concat, ARM_CONCAT)] {
        let model = Stage3Model::new(kind, streams.text2.output_dim(), data.label_space(), config.seed);
        let (model, _) = stage3_train_on(model, train.clone(), val.clone(), &config.stage3)?;
        rows.push(AblationRow {
            seed: config.seed,
            arm: arm.into(),
            val_weighted_f1: split_f1(&predict_paired(&model, &val, exec)?, &val, n)?.unwrap_or(0.0),
            test_weighted_f1: split_f1(&predict_paired(&model, &test, exec)?, &test, n)?,
        });
    }
    let live = streams.live(&upstream.loaded)?;
    Ok(AblationReport { title: "fusion: co-attention vs concatenation".into(), rows, frozen_checks: upstream.verify(dir, &live)? })
}

/// Hierarchical (Stage II, then Stage III on frozen Stage II) versus merged
/// (Stage II and III trained jointly) on the Stage I checkpoints in `dir`,
/// once per seed. The merged arm gets as many epochs as both hierarchical
/// stages together, at the Stage III learning rate.
pub fn ablate_merged(config: &ExperimentConfig, data: &ExperimentData, dir: &Path, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut upstream = Upstream::new(StageTag::Stage2);
    let text1 = Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Text)?)?;
    let speech1 = Stage1Model::from_checkpoint(&upstream.load(dir, StageTag::Stage1, ModalityTag::Speech)?)?;
    let f = &data.features;
    let (train, val, test) =
        (stage1_pairs(&text1, &speech1, &data.train, f)?, stage1_pairs(&text1, &speech1, &data.val, f)?, stage1_pairs(&text1, &speech1, &data.test, f)?);
    let ls = data.label_space();
    let n = ls.len();
    let exec = config.execution;
    let seqs = |p: &PairedSet, audio: bool| SequenceSet {
        inputs: if audio { p.audio.clone() } else { p.text.clone() },
        labels: p.labels.clone(),
    };
    let stage2_features = |m: &Stage2Model, p: &PairedSet, audio: bool| -> Result<SequenceSet> {
        let s = seqs(p, audio);
        Ok(SequenceSet { inputs: m.features_all(&s.inputs, exec)?, labels: s.labels })
    };

    let mut rows = Vec::new();
    for &seed in seeds {
        let c2 = config.stage2.clone().with_seed(seed);
        let c3 = config.stage3.clone().with_seed(seed);
        let (speech2, _) = stage2_train_on(
            Stage2Model::new(Modality::Speech, speech1.embedding_dim(), ls, seed),
            seqs(&train, true),
            seqs(&val, true),
            &c2,
        )?;
        let (text2, _) =
            stage2_train_on(Stage2Model::new(Modality::Text, text1.embedding_dim(), ls, seed), seqs(&train, false), seqs(&val, false), &c2)?;
        let pair = |p: &PairedSet| PairedSet::new(stage2_features(&speech2, p, true)?, stage2_features(&text2, p, false)?);
        let (h_train, h_val, h_test) = (pair(&train)?, pair(&val)?, pair(&test)?);
        let stage3 = Stage3Model::new(config.fusion, text2.output_dim(), ls, seed);
        let (stage3, _) = stage3_train_on(stage3, h_train, h_val.clone(), &c3)?;
        rows.push(AblationRow {
            seed,
            arm: ARM_HIERARCHICAL.into(),
            val_weighted_f1: split_f1(&predict_paired(&stage3, &h_val, exec)?, &h_val, n)?.unwrap_or(0.0),
            test_weighted_f1: split_f1(&predict_paired(&stage3, &h_test, exec)?, &h_test, n)?,
        });

        let cm = c3.clone().with_epochs(c2.epochs + c3.epochs);
        let merged = MergedModel::new(text1.embedding_dim(), speech1.embedding_dim(), ls, config.fusion, seed);
        let (merged, _) = merged_train_on(merged, train.clone(), val.clone(), &cm)?;
        rows.push(AblationRow {
            seed,
            arm: ARM_MERGED.into(),
            val_weighted_f1: split_f1(&predict_merged(&merged, &val, exec)?, &val, n)?.unwrap_or(0.0),
            test_weighted_f1: split_f1(&predict_merged(&merged, &test, exec)?, &test, n)?,
        });
    }
    let live = [text1.to_checkpoint(&upstream.loaded[0].config_hash)?, speech1.to_checkpoint(&upstream.loaded[1].config_hash)?];
    Ok(AblationReport { title: "hierarchical vs merged training".into(), rows, frozen_checks: upstream.verify(dir, &live)? })
}

/// The annotation corpus written by a pre-training run.
pub fn load_pseudo_labels(dir: &Path, backend: &str) -> Result<PseudoLabeledCorpus> {
    PseudoLabeledCorpus::read_jsonl(&dir.join("pseudo_labels.jsonl"), backend)
}
