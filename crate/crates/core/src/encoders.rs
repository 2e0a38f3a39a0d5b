//! Utterance-level encoders and the Stage I per-modality classifiers.
//!
//! The text side is a small bag-of-embeddings encoder that can be
//! pre-trained on LLM pseudo-labels; the speech side reads frozen utterance
//! vectors from a [`FeatureStore`] into a light two-layer head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotator::PseudoLabeledCorpus;
use crate::autograd::{Gradients, ParamRef, Tape, Var};
use crate::checkpoint::{ModalityTag, StageCheckpoint, StageTag};
use crate::corpus::{Dataset, LabelSpace, Utterance};
use crate::error::{Error, Result};
use crate::evalkit::accuracy;
use crate::nn::{normal_init, permutation, seeded_rng, Linear, Mlp2, ParamStore};
use crate::par::Execution;
use crate::tensor::Matrix;
use crate::trainer::{fit, History, Objective, TrainConfig};

/// Utterance embedding width out of Stage I.
pub const D1: usize = 64;
pub const TEXT_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "speech" | "audio" => Ok(Modality::Speech),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl From<Modality> for ModalityTag {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Text => ModalityTag::Text,
            Modality::Speech => ModalityTag::Speech,
        }
    }
}

/// Lowercasing whitespace/punctuation tokenizer with a closed vocabulary.
/// Id 0 is the null token used for empty transcripts, id 1 the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const NULL_TOKEN: usize = 0;
pub const UNK_TOKEN: usize = 1;

pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'')).filter(|w| !w.is_empty()).map(|w| w.to_lowercase())
}

impl Tokenizer {
    /// Vocabulary is every distinct word in `texts`, sorted.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let vocab = ["<null>".to_string(), "<unk>".to_string()].into_iter().chain(words).collect();
        Self::from_vocab(vocab)
    }

    fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = split_words(text).map(|w| self.index.get(&w).copied().unwrap_or(UNK_TOKEN)).collect();
        if ids.is_empty() {
            vec![NULL_TOKEN]
        } else {
            ids
        }
    }

    fn rebuild(self) -> Self {
        Self::from_vocab(self.vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub dim: usize,
    #[serde(default)]
    pub stage: Option<String>,
    #[serde(default)]
    pub modality: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureLine {
    key: String,
    vector: Vec<f32>,
}

/// Frozen utterance vectors keyed by speech key (or utterance id for exported
/// Stage II features). Values are stored at single precision on disk and
/// widened on load, so lookups are bit-identical across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub header: FeatureHeader,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { header: FeatureHeader { dim, stage: None, modality: None }, vectors: BTreeMap::new() }
    }

    pub fn with_tags(mut self, stage: impl Into<String>, modality: impl Into<String>) -> Self {
        self.header.stage = Some(stage.into());
        self.header.modality = Some(modality.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Stores `vector` rounded to single precision.
    pub fn insert(&mut self, key: impl Into<String>, vector: &[f64]) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim() {
            return Err(Error::Shape(format!("feature {key} has {} values, store dim is {}", vector.len(), self.dim())));
        }
        self.vectors.insert(key, vector.iter().map(|&v| v as f32 as f64).collect());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.vectors
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Integrity(format!("no feature vector for key {key:?}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for (key, v) in &self.vectors {
            let line = FeatureLine { key: key.clone(), vector: v.iter().map(|&x| x as f32).collect() };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let header: FeatureHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)
                .map_err(|e| Error::Parse { line: 1, message: format!("feature header: {e}") })?,
            None => return Err(Error::Parse { line: 1, message: "empty feature file".into() }),
        };
        let mut store = FeatureStore { header, vectors: BTreeMap::new() };
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FeatureLine =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if entry.vector.len() != store.dim() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("vector has {} values, header says {}", entry.vector.len(), store.dim()),
                });
            }
            store.vectors.insert(entry.key, entry.vector.into_iter().map(f64::from).collect());
        }
        Ok(store)
    }
}

/// A text feature extractor with a fixed output width.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn trainable(&self) -> bool;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Deterministic evaluation-mode encoding; the empty string maps to the null
/// token's embedding.
pub fn encode_utterance_text(backend: &dyn EncoderBackend, transcript: &str) -> Vec<f64> {
    backend.encode(transcript)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderArch {
    pub tokenizer: Tokenizer,
    pub embedding: usize,
    pub mlp: Mlp2,
    pub output_dim: usize,
}

/// Token embedding table, mean pooling, then a two-layer tanh perceptron.
#[derive(Debug, Clone)]
pub struct ReferenceTextEncoder {
    pub arch: TextEncoderArch,
    pub params: ParamStore,
}

impl ReferenceTextEncoder {
    pub fn new(tokenizer: Tokenizer, seed: u64) -> Self {
        Self::with_dims(tokenizer, TEXT_EMBED_DIM, D1, D1, seed)
    }

    pub fn with_dims(tokenizer: Tokenizer, embed_dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "text-encoder");
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", normal_init(&mut rng, tokenizer.len(), embed_dim, 1.0));
        let mlp = Mlp2::new(&mut params, &mut rng, "encoder", embed_dim, hidden, out);
        Self { arch: TextEncoderArch { tokenizer, embedding, mlp, output_dim: out }, params }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.arch.tokenizer
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.arch.tokenizer.encode(text)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, tokens: &[Vec<usize>]) -> Var {
        let table = tape.param(ParamRef { group, index: self.arch.embedding });
        let pooled = tape.embedding_mean(table, tokens);
        self.arch.mlp.forward(tape, group, pooled)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<StageCheckpoint> {
        Ok(StageCheckpoint::new(
            StageTag::Pretrain,
            ModalityTag::Text,
            config_hash,
            serde_json::to_value(&self.arch)?,
            vec![self.params.clone()],
        ))
    }

    pub fn from_checkpoint(ckpt: &StageCheckpoint) -> Result<Self> {
        ckpt.expect_tags(StageTag::Pretrain, ModalityTag::Text)?;
        let mut arch: TextEncoderArch = ckpt.meta_as()?;
        arch.tokenizer = arch.tokenizer.rebuild();
        let params = ckpt.params.first().cloned().ok_or_else(|| Error::Checkpoint("no parameters".into()))?;
        Ok(Self { arch, params })
    }
}

impl EncoderBackend for ReferenceTextEncoder {
    fn name(&self) -> &str {
        "reference-text"
    }

    fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    fn trainable(&self) -> bool {
        true
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut tape = Tape::new(vec![self.params.values()]);
        tape.freeze_group(0);
        let out = self.forward(&mut tape, 0, &[self.tokenize(text)]);
        tape.value(out).data().to_vec()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechHeadArch {
    pub input_dim: usize,
    pub mlp: Mlp2,
}

/// Two-layer tanh perceptron over frozen speech vectors.
#[derive(Debug, Clone)]
pub struct SpeechHead {
    pub arch: SpeechHeadArch,
    pub params: ParamStore,
}

impl SpeechHead {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self::with_dims(input_dim, D1, D1, seed)
    }

    pub fn with_dims(input_dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "speech-head");
        let mut params = ParamStore::new();
        let mlp = Mlp2::new(&mut params, &mut rng, "speech", input_dim, hidden, out);
        Self { arch: SpeechHeadArch { input_dim, mlp }, params }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, features: Var) -> Var {
        self.arch.mlp.forward(tape, group, features)
    }
}

/// Per-utterance inputs for a batch, already in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage1Inputs {
    Tokens(Vec<Vec<usize>>),
    Features(Matrix),
}

impl Stage1Inputs {
    pub fn len(&self) -> usize {
        match self {
            Stage1Inputs::Tokens(t) => t.len(),
            Stage1Inputs::Features(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Stage1Inputs {
        match self {
            Stage1Inputs::Tokens(t) => Stage1Inputs::Tokens(idx.iter().map(|&i| t[i].clone()).collect()),
            Stage1Inputs::Features(m) => Stage1Inputs::Features(m.select_rows(idx)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Stage1Body {
    Text(ReferenceTextEncoder),
    Speech(SpeechHead),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Stage1BodyArch {
    Text(TextEncoderArch),
    Speech(SpeechHeadArch),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage1Meta {
    label_space: LabelSpace,
    body: Stage1BodyArch,
    head: Linear,
    embedding_dim: usize,
}

/// Utterance-level classifier for one modality. Parameters live in two
/// groups: the body (encoder or speech head) and the classifier head.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub body: Stage1Body,
    pub head: Linear,
    pub head_params: ParamStore,
    pub label_space: LabelSpace,
}

impl Stage1Model {
    pub fn text(encoder: ReferenceTextEncoder, label_space: LabelSpace, seed: u64) -> Self {
        Self::with_body(Stage1Body::Text(encoder), label_space, seed)
    }

    pub fn speech(input_dim: usize, label_space: LabelSpace, seed: u64) -> Self {
        Self::with_body(Stage1Body::Speech(SpeechHead::new(input_dim, seed)), label_space, seed)
    }

    pub fn with_body(body: Stage1Body, label_space: LabelSpace, seed: u64) -> Self {
        let d1 = match &body {
            Stage1Body::Text(e) => e.arch.output_dim,
            Stage1Body::Speech(s) => s.arch.mlp.second.out_dim,
        };
        let mut rng = seeded_rng(seed, "stage1-head");
        let mut head_params = ParamStore::new();
        let head = Linear::new(&mut head_params, &mut rng, "classifier", d1, label_space.len());
        Self { body, head, head_params, label_space }
    }

    pub fn modality(&self) -> Modality {
        match self.body {
            Stage1Body::Text(_) => Modality::Text,
            Stage1Body::Speech(_) => Modality::Speech,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.in_dim
    }

    pub fn body_params(&self) -> &ParamStore {
        match &self.body {
            Stage1Body::Text(e) => &e.params,
            Stage1Body::Speech(s) => &s.params,
        }
    }

    pub fn body_params_mut(&mut self) -> &mut ParamStore {
        match &mut self.body {
            Stage1Body::Text(e) => &mut e.params,
            Stage1Body::Speech(s) => &mut s.params,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.body_params().num_scalars() + self.head_params.num_scalars()
    }

    /// Turns utterances into model inputs. Speech models need the feature
    /// store; its width must match the head.
    pub fn prepare<'u>(
        &self,
        utterances: impl IntoIterator<Item = &'u Utterance>,
        features: Option<&FeatureStore>,
    ) -> Result<Stage1Inputs> {
        match &self.body {
            Stage1Body::Text(e) => Ok(Stage1Inputs::Tokens(utterances.into_iter().map(|u| e.tokenize(&u.transcript)).collect())),
            Stage1Body::Speech(s) => {
                let store = features
                    .ok_or_else(|| Error::Config("speech model needs a feature store".into()))?;
                if store.dim() != s.arch.input_dim {
                    return Err(Error::Config(format!(
                        "feature store dim {} does not match speech head input {}",
                        store.dim(),
                        s.arch.input_dim
                    )));
                }
                let mut data = Vec::new();
                let mut rows = 0;
                for u in utterances {
                    data.extend_from_slice(store.get(&u.speech_key)?);
                    rows += 1;
                }
                Ok(Stage1Inputs::Features(Matrix::from_vec(rows, store.dim(), data)?))
            }
        }
    }

    /// Penultimate activations, `N x d1`.
    pub fn body_forward(&self, tape: &mut Tape<'_>, group: usize, inputs: &Stage1Inputs) -> Result<Var> {
        match (&self.body, inputs) {
            (Stage1Body::Text(e), Stage1Inputs::Tokens(t)) => Ok(e.forward(tape, group, t)),
            (Stage1Body::Speech(s), Stage1Inputs::Features(m)) => {
                let x = tape.constant(m.clone());
                Ok(s.forward(tape, group, x))
            }
            _ => Err(Error::Config(format!("{} model given inputs of the other modality", self.modality()))),
        }
    }

    /// Tape with the body as group 0 and the head as group 1.
    pub fn tape(&self) -> Tape<'_> {
        Tape::new(vec![self.body_params().values(), self.head_params.values()])
    }

    pub fn logits(&self, tape: &mut Tape<'_>, inputs: &Stage1Inputs) -> Result<Var> {
        let h = self.body_forward(tape, 0, inputs)?;
        Ok(self.head.forward(tape, 1, h))
    }

    pub fn embed_batch(&self, inputs: &Stage1Inputs) -> Result<Matrix> {
        let mut tape = self.tape();
        tape.freeze_group(0);
        tape.freeze_group(1);
        let out = self.body_forward(&mut tape, 0, inputs)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits_batch(&self, inputs: &Stage1Inputs) -> Result<Matrix> {
        let mut tape = self.tape();
        tape.freeze_group(0);
        tape.freeze_group(1);
        let out = self.logits(&mut tape, inputs)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<StageCheckpoint> {
        let body = match &self.body {
            Stage1Body::Text(e) => Stage1BodyArch::Text(e.arch.clone()),
            Stage1Body::Speech(s) => Stage1BodyArch::Speech(s.arch.clone()),
        };
        let meta = Stage1Meta {
            label_space: self.label_space,
            body,
            head: self.head.clone(),
            embedding_dim: self.embedding_dim(),
        };
        Ok(StageCheckpoint::new(
            StageTag::Stage1,
            self.modality().into(),
            config_hash,
            serde_json::to_value(&meta)?,
            vec![self.body_params().clone(), self.head_params.clone()],
        ))
    }

    pub fn from_checkpoint(ckpt: &StageCheckpoint) -> Result<Self> {
        if ckpt.stage != StageTag::Stage1 {
            return Err(Error::TagMismatch(format!("expected a stage1 checkpoint, got {}", ckpt.stage)));
        }
        let meta: Stage1Meta = ckpt.meta_as()?;
        let [body_params, head_params] = <[ParamStore; 2]>::try_from(ckpt.params.clone())
            .map_err(|_| Error::Checkpoint("stage1 checkpoint needs two parameter groups".into()))?;
        let body = match meta.body {
            Stage1BodyArch::Text(mut arch) => {
                arch.tokenizer = arch.tokenizer.rebuild();
                Stage1Body::Text(ReferenceTextEncoder { arch, params: body_params })
            }
            Stage1BodyArch::Speech(arch) => Stage1Body::Speech(SpeechHead { arch, params: body_params }),
        };
        let model = Self { body, head: meta.head, head_params, label_space: meta.label_space };
        if ModalityTag::from(model.modality()) != ckpt.modality {
            return Err(Error::TagMismatch(format!("checkpoint tagged {} holds a {} model", ckpt.modality, model.modality())));
        }
        Ok(model)
    }
}

/// Stage I embedding (penultimate activation) of one utterance.
pub fn stage1_embed(model: &Stage1Model, utterance: &Utterance, features: Option<&FeatureStore>) -> Result<Vec<f64>> {
    let inputs = model.prepare([utterance], features)?;
    Ok(model.embed_batch(&inputs)?.into_data())
}

/// Stage I embeddings for every conversation, one `K x d1` matrix each.
pub fn stage1_embed_dataset(model: &Stage1Model, dataset: &Dataset, features: Option<&FeatureStore>) -> Result<Vec<Matrix>> {
    let inputs = model.prepare(dataset.utterances(), features)?;
    let all = model.embed_batch(&inputs)?;
    let mut out = Vec::with_capacity(dataset.conversations.len());
    let mut start = 0;
    for c in &dataset.conversations {
        out.push(all.select_rows(&(start..start + c.len()).collect::<Vec<_>>()));
        start += c.len();
    }
    Ok(out)
}

struct Stage1Objective {
    model: Stage1Model,
    train: Stage1Inputs,
    train_labels: Vec<usize>,
    val: Stage1Inputs,
    val_labels: Vec<usize>,
}

impl Objective for Stage1Objective {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.model.body_params(), &self.model.head_params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let Stage1Model { body, head_params, .. } = &mut self.model;
        let body = match body {
            Stage1Body::Text(e) => &mut e.params,
            Stage1Body::Speech(s) => &mut s.params,
        };
        vec![body, head_params]
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn chunk_loss(&self, items: &[usize], grads: &mut Gradients) -> Result<(f64, usize)> {
        let inputs = self.train.select(items);
        let targets: Vec<usize> = items.iter().map(|&i| self.train_labels[i]).collect();
        let mut tape = self.model.tape();
        let logits = self.model.logits(&mut tape, &inputs)?;
        let loss = tape.cross_entropy(logits, &targets);
        tape.backward(loss, grads);
        Ok((tape.value(loss).get(0, 0), items.len()))
    }

    fn validation(&self, _exec: Execution) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.val.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let logits = self.model.logits_batch(&self.val)?;
        Ok(((0..logits.rows()).map(|r| logits.argmax_row(r)).collect(), self.val_labels.clone()))
    }

    fn n_classes(&self) -> usize {
        self.model.label_space.len()
    }

    fn chunk_size(&self) -> usize {
        16
    }
}

fn train_stage1(
    model: Stage1Model,
    train: Stage1Inputs,
    train_labels: Vec<usize>,
    val: Stage1Inputs,
    val_labels: Vec<usize>,
    config: &TrainConfig,
) -> Result<(Stage1Model, History)> {
    let mut obj = Stage1Objective { model, train, train_labels, val, val_labels };
    let history = fit(&mut obj, config)?;
    Ok((obj.model, history))
}

/// Trains a Stage I model on all utterances of `train`, flattened across
/// conversations, keeping the weights with the best validation weighted F1.
pub fn stage1_train(
    model: Stage1Model,
    train: &Dataset,
    val: &Dataset,
    features: Option<&FeatureStore>,
    config: &TrainConfig,
) -> Result<(Stage1Model, History)> {
    if train.label_space != model.label_space || val.label_space != model.label_space {
        return Err(Error::Config("datasets and model disagree on the label space".into()));
    }
    let train_inputs = model.prepare(train.utterances(), features)?;
    let val_inputs = model.prepare(val.utterances(), features)?;
    train_stage1(model, train_inputs, train.labels(), val_inputs, val.labels(), config)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: ReferenceTextEncoder,
    /// 3-class accuracy on the held-out 20%, if that slice is non-empty.
    pub val_accuracy: Option<f64>,
    pub history: History,
}

/// Fine-tunes a fresh reference encoder to predict the pseudo-labels, holding
/// out a seeded 20% of the records for validation.
pub fn pretrain_text_encoder(corpus: &PseudoLabeledCorpus, config: &TrainConfig) -> Result<PretrainOutcome> {
    let tokenizer = Tokenizer::fit(corpus.records.iter().map(|r| r.text.as_str()));
    pretrain_with_tokenizer(corpus, tokenizer, config)
}

/// As [`pretrain_text_encoder`] with a caller-supplied vocabulary.
pub fn pretrain_with_tokenizer(
    corpus: &PseudoLabeledCorpus,
    tokenizer: Tokenizer,
    config: &TrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.records.is_empty() {
        return Err(Error::Precondition("cannot pre-train on an empty pseudo-labeled corpus".into()));
    }
    let classes: BTreeSet<_> = corpus.records.iter().map(|r| r.sentiment).collect();
    if classes.len() == 1 {
        log::warn!("pseudo-labels contain a single class; pre-training is degenerate");
    }
    let encoder = ReferenceTextEncoder::new(tokenizer, config.seed);
    let model = Stage1Model::text(encoder, LabelSpace::sentiment3(), config.seed);

    let n = corpus.records.len();
    let order = permutation(&mut seeded_rng(config.seed, "pretrain-split"), n);
    let n_val = n / 5;
    let (val_idx, train_idx) = order.split_at(n_val);
    let tokens = |idx: &[usize]| {
        let Stage1Body::Text(e) = &model.body else { unreachable!() };
        Stage1Inputs::Tokens(idx.iter().map(|&i| e.tokenize(&corpus.records[i].text)).collect())
    };
    let labels = |idx: &[usize]| idx.iter().map(|&i| corpus.records[i].sentiment.class_id()).collect::<Vec<_>>();
    let (train_in, val_in) = (tokens(train_idx), tokens(val_idx));
    let (train_y, val_y) = (labels(train_idx), labels(val_idx));
    let (model, history) = train_stage1(model, train_in, train_y, val_in.clone(), val_y.clone(), config)?;
    let val_accuracy = if val_y.is_empty() {
        None
    } else {
        let logits = model.logits_batch(&val_in)?;
        let preds: Vec<usize> = (0..logits.rows()).map(|r| logits.argmax_row(r)).collect();
        Some(accuracy(&preds, &val_y)?)
    };
    let Stage1Body::Text(encoder) = model.body else { unreachable!() };
    Ok(PretrainOutcome { encoder, val_accuracy, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::PseudoLabel;
    use crate::corpus::Sentiment;
    use crate::gradcheck::gradient_check;

    fn keyword_corpus(n: usize, seed: u64) -> PseudoLabeledCorpus {
        use rand::Rng;
        let vocab = [["sunny", "bright", "cheer"], ["gloom", "storm", "grief"], ["table", "chair", "floor"]];
        let filler = ["the", "a", "we", "saw", "it", "then", "was", "today"];
        let mut rng = seeded_rng(seed, "kw");
        let records = (0..n)
            .map(|i| {
                let c = i % 3;
                let mut words: Vec<&str> = (0..3).map(|_| filler[rng.random_range(0..filler.len())]).collect();
                words.insert(rng.random_range(0..=words.len()), vocab[c][rng.random_range(0..3)]);
                PseudoLabel { id: format!("r{i}"), text: words.join(" "), sentiment: Sentiment::ALL[c] }
            })
            .collect();
        PseudoLabeledCorpus { backend: "mock".into(), records, failed_ids: vec![] }
    }

    #[test]
    fn tokenizer_basics() {
        let t = Tokenizer::fit(["Hello, world!", "hello again"]);
        assert_eq!(t.len(), 5);
        assert_eq!(t.encode("HELLO world"), t.encode("hello... World"));
        assert_eq!(t.encode(""), vec![NULL_TOKEN]);
        assert_eq!(t.encode("  ?! "), vec![NULL_TOKEN]);
        assert_eq!(t.encode("unseen"), vec![UNK_TOKEN]);
    }

    #[test]
    fn encoder_is_deterministic_and_total() {
        let enc = ReferenceTextEncoder::new(Tokenizer::fit(["good day"]), 3);
        assert_eq!(enc.encode("good day"), enc.encode("good day"));
        let empty = encode_utterance_text(&enc, "");
        assert_eq!(empty.len(), D1);
        assert!(empty.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pretraining_separates_keyword_corpus() {
        let corpus = keyword_corpus(300, 1);
        let cfg = TrainConfig::pretrain().with_lr(3e-3).with_epochs(15).with_seed(5);
        let out = pretrain_text_encoder(&corpus, &cfg).unwrap();
        let acc = out.val_accuracy.unwrap();
        assert!(acc >= 0.95, "validation accuracy {acc}");
        let a = out.encoder.encode("we saw sunny today");
        let b = out.encoder.encode("we saw gloom today");
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (norm(&a) * norm(&b)) < 1.0);
    }

    #[test]
    fn pretraining_rejects_empty_corpus() {
        let empty = PseudoLabeledCorpus { backend: "mock".into(), records: vec![], failed_ids: vec![] };
        assert!(matches!(pretrain_text_encoder(&empty, &TrainConfig::pretrain()), Err(Error::Precondition(_))));
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let corpus = keyword_corpus(30, 2);
        let out = pretrain_text_encoder(&corpus, &TrainConfig::pretrain().with_epochs(1)).unwrap();
        let ckpt = out.encoder.to_checkpoint("h").unwrap();
        let json = ckpt.to_json().unwrap();
        let back: StageCheckpoint = serde_json::from_str(&json).unwrap();
        let reloaded = ReferenceTextEncoder::from_checkpoint(&back).unwrap();
        assert_eq!(reloaded.encode("the sunny floor"), out.encoder.encode("the sunny floor"));
        assert_eq!(reloaded.params.content_hash(), out.encoder.params.content_hash());
    }

    #[test]
    fn feature_store_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut fs_ = FeatureStore::new(3).with_tags("stage0", "speech");
        fs_.insert("a", &[0.1, -2.0, 1.0 / 3.0]).unwrap();
        assert!(fs_.insert("b", &[1.0]).is_err());
        let p = dir.path().join("f.jsonl");
        fs_.write_jsonl(&p).unwrap();
        let back = FeatureStore::read_jsonl(&p).unwrap();
        assert_eq!(back, fs_);
        assert_eq!(back.get("a").unwrap(), back.get("a").unwrap());
        assert!(back.get("zzz").is_err());
    }

    #[test]
    fn speech_head_dimension_mismatch_is_config_error() {
        let model = Stage1Model::speech(8, LabelSpace::iemocap4(), 0);
        let store = FeatureStore::new(4);
        let u = Utterance {
            utterance_id: "u".into(),
            transcript: String::new(),
            speech_key: "k".into(),
            label: 0,
            raw_label: crate::corpus::RawLabel::Name("ang".into()),
            pseudo_label: None,
        };
        assert!(matches!(stage1_embed(&model, &u, Some(&store)), Err(Error::Config(_))));
        assert!(matches!(stage1_embed(&model, &u, None), Err(Error::Config(_))));
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let tok = Tokenizer::fit(["good bad day", "fine"]);
        let text = Stage1Model::text(ReferenceTextEncoder::new(tok.clone(), 1), LabelSpace::iemocap4(), 1);
        let inputs = Stage1Inputs::Tokens(vec![tok.encode("good day"), tok.encode(""), tok.encode("bad bad fine")]);
        let mut stores = vec![text.body_params().clone(), text.head_params.clone()];
        let report = gradient_check(&mut stores, None, |tape| {
            let l = text.logits(tape, &inputs).unwrap();
            tape.cross_entropy(l, &[0, 2, 3])
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let speech = Stage1Model::speech(6, LabelSpace::iemocap4(), 2);
        let mut rng = seeded_rng(9, "x");
        let inputs = Stage1Inputs::Features(normal_init(&mut rng, 3, 6, 1.0));
        let mut stores = vec![speech.body_params().clone(), speech.head_params.clone()];
        let report = gradient_check(&mut stores, None, |tape| {
            let l = speech.logits(tape, &inputs).unwrap();
            tape.cross_entropy(l, &[1, 1, 0])
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
