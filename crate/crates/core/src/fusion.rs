//! Stage III: fusing the two Stage II streams, either through a co-attention
//! block or by plain concatenation, followed by the fused classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::{ModalityTag, StageCheckpoint, StageTag};
use crate::context::{split_rows, stack_rows, stage1_sequences, SequenceSet, Stage2Model};
use crate::corpus::{Conversation, Dataset, LabelSpace};
use crate::encoders::{FeatureStore, Stage1Model};
use crate::error::{Error, Result};
use crate::evalkit::UtteranceClassifier;
use crate::nn::{block_diagonal_mask, seeded_rng, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::par::{self, Execution};
use crate::tensor::Matrix;
use crate::trainer::{fit, History, Objective, TrainConfig};

pub const FUSION_DIM: usize = 256;
pub const FUSION_HEADS: usize = 4;
pub const FFN_EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    CoAttention,
    Concat,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::CoAttention => "coattention",
            FusionKind::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coattention" | "co-attention" => Ok(FusionKind::CoAttention),
            "concat" | "concatenation" => Ok(FusionKind::Concat),
            other => Err(Error::Config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

/// The parameters one stream owns inside the co-attention block: attention
/// to the other stream, self-attention, and a feed-forward layer, each
/// wrapped in a residual connection and layer normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamBundle {
    pub cross: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl StreamBundle {
    fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            cross: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), dim, heads),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), dim, heads),
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn.0"), dim, FFN_EXPANSION * dim),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn.1"), FFN_EXPANSION * dim, dim),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
        }
    }

    fn attend_other(&self, tape: &mut Tape<'_>, group: usize, own: Var, other: Var, mask: &[bool]) -> Var {
        let c = self.cross.forward(tape, group, own, other, Some(mask));
        let r = tape.add(own, c);
        self.cross_norm.forward(tape, group, r)
    }

    fn refine(&self, tape: &mut Tape<'_>, group: usize, x: Var, mask: &[bool]) -> Var {
        let s = self.self_attn.forward(tape, group, x, x, Some(mask));
        let r = tape.add(x, s);
        let x = self.self_norm.forward(tape, group, r);
        let h = self.ffn_in.forward(tape, group, x);
        let h = tape.relu(h);
        let h = self.ffn_out.forward(tape, group, h);
        let r = tape.add(x, h);
        self.ffn_norm.forward(tape, group, r)
    }
}

/// Symmetric co-attention: the audio stream queries the text stream and vice
/// versa, then each stream self-attends. Parameters are not shared between
/// the two streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoAttentionBlock {
    pub audio: StreamBundle,
    pub text: StreamBundle,
    pub dim: usize,
    pub heads: usize,
}

impl CoAttentionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, dim: usize, heads: usize) -> Self {
        Self {
            audio: StreamBundle::new(store, rng, "coatt.audio", dim, heads),
            text: StreamBundle::new(store, rng, "coatt.text", dim, heads),
            dim,
            heads,
        }
    }

    /// `mask` is a per-key flag list or a full query x key grid.
    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, audio: Var, text: Var, mask: &[bool]) -> (Var, Var) {
        let a = self.audio.attend_other(tape, group, audio, text, mask);
        let t = self.text.attend_other(tape, group, text, audio, mask);
        (self.audio.refine(tape, group, a, mask), self.text.refine(tape, group, t, mask))
    }
}

/// Runs the block on one conversation. Keys flagged false in `mask` get zero
/// attention weight everywhere.
pub fn coattention_forward(
    block: &CoAttentionBlock,
    params: &ParamStore,
    seq_a: &Matrix,
    seq_t: &Matrix,
    mask: &[bool],
) -> Result<(Matrix, Matrix)> {
    if seq_a.rows() != seq_t.rows() {
        return Err(Error::LengthMismatch { left: seq_a.rows(), right: seq_t.rows() });
    }
    if mask.len() != seq_a.rows() {
        return Err(Error::LengthMismatch { left: mask.len(), right: seq_a.rows() });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Precondition("co-attention mask has no valid position".into()));
    }
    for m in [seq_a, seq_t] {
        if m.cols() != block.dim {
            return Err(Error::Shape(format!("co-attention expects width {}, got {}", block.dim, m.cols())));
        }
    }
    let mut tape = Tape::new(vec![params.values()]);
    tape.freeze_group(0);
    let a = tape.constant(seq_a.clone());
    let t = tape.constant(seq_t.clone());
    let (fa, ft) = block.forward(&mut tape, 0, a, t, mask);
    Ok((tape.value(fa).clone(), tape.value(ft).clone()))
}

/// Per-utterance `[audio | text]`.
pub fn concat_fusion(seq_a: &Matrix, seq_t: &Matrix) -> Result<Matrix> {
    if seq_a.rows() != seq_t.rows() {
        return Err(Error::LengthMismatch { left: seq_a.rows(), right: seq_t.rows() });
    }
    Matrix::hcat(&[seq_a, seq_t])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Arch {
    pub kind: FusionKind,
    pub input_dim: usize,
    pub project_audio: Option<Linear>,
    pub project_text: Option<Linear>,
    pub block: Option<CoAttentionBlock>,
    pub hidden: Linear,
    pub output: Linear,
    pub label_space: LabelSpace,
}

#[derive(Debug, Clone)]
pub struct Stage3Model {
    pub arch: Stage3Arch,
    pub params: ParamStore,
}

impl Stage3Model {
    pub fn new(kind: FusionKind, input_dim: usize, label_space: LabelSpace, seed: u64) -> Self {
        Self::with_dims(kind, input_dim, FUSION_DIM, FUSION_HEADS, label_space, seed)
    }

    pub fn with_dims(kind: FusionKind, input_dim: usize, dim: usize, heads: usize, label_space: LabelSpace, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &format!("stage3-{kind}"));
        let mut params = ParamStore::new();
        let (project_audio, project_text, block, fused_dim) = match kind {
            FusionKind::CoAttention => (
                Some(Linear::new(&mut params, &mut rng, "proj.audio", input_dim, dim)),
                Some(Linear::new(&mut params, &mut rng, "proj.text", input_dim, dim)),
                Some(CoAttentionBlock::new(&mut params, &mut rng, dim, heads)),
                2 * dim,
            ),
            FusionKind::Concat => (None, None, None, 2 * input_dim),
        };
        let hidden = Linear::new(&mut params, &mut rng, "classifier.0", fused_dim, dim);
        let output = Linear::new(&mut params, &mut rng, "classifier.1", dim, label_space.len());
        Self {
            arch: Stage3Arch { kind, input_dim, project_audio, project_text, block, hidden, output, label_space },
            params,
        }
    }

    pub fn kind(&self) -> FusionKind {
        self.arch.kind
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Logits for packed conversations (`sum(lengths)` rows per stream).
    pub fn forward(&self, tape: &mut Tape<'_>, group: usize, audio: Var, text: Var, lengths: &[usize]) -> Var {
        let fused = match (&self.arch.block, &self.arch.project_audio, &self.arch.project_text) {
            (Some(block), Some(pa), Some(pt)) => {
                let a = pa.forward(tape, group, audio);
                let t = pt.forward(tape, group, text);
                let mask = block_diagonal_mask(lengths);
                let (fa, ft) = block.forward(tape, group, a, t, &mask);
                tape.concat_cols(&[fa, ft])
            }
            _ => tape.concat_cols(&[audio, text]),
        };
        let h = self.arch.hidden.forward(tape, group, fused);
        let h = tape.relu(h);
        self.arch.output.forward(tape, group, h)
    }

    fn check(&self, audio: &[&Matrix], text: &[&Matrix]) -> Result<Vec<usize>> {
        if audio.len() != text.len() {
            return Err(Error::LengthMismatch { left: audio.len(), right: text.len() });
        }
        let mut lengths = Vec::with_capacity(audio.len());
        for (a, t) in audio.iter().zip(text) {
            if a.rows() != t.rows() {
                return Err(Error::LengthMismatch { left: a.rows(), right: t.rows() });
            }
            if a.cols() != self.arch.input_dim || t.cols() != self.arch.input_dim {
                return Err(Error::Shape(format!("stage3 expects {}-dim streams", self.arch.input_dim)));
            }
            lengths.push(a.rows());
        }
        Ok(lengths)
    }

    pub fn logits_batch(&self, audio: &[&Matrix], text: &[&Matrix]) -> Result<Vec<Matrix>> {
        let lengths = self.check(audio, text)?;
        let mut tape = Tape::new(vec![self.params.values()]);
        tape.freeze_group(0);
        let a = tape.constant(stack_rows(audio)?);
        let t = tape.constant(stack_rows(text)?);
        let l = self.forward(&mut tape, 0, a, t, &lengths);
        Ok(split_rows(tape.value(l), &lengths))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<StageCheckpoint> {
        Ok(StageCheckpoint::new(
            StageTag::Stage3,
            ModalityTag::Fused,
            config_hash,
            serde_json::to_value(&self.arch)?,
            vec![self.params.clone()],
        ))
    }

    pub fn from_checkpoint(ckpt: &StageCheckpoint) -> Result<Self> {
        ckpt.expect_tags(StageTag::Stage3, ModalityTag::Fused)?;
        let arch = ckpt.meta_as()?;
        let params = ckpt.params.first().cloned().ok_or_else(|| Error::Checkpoint("no parameters".into()))?;
        Ok(Self { arch, params })
    }
}

const TRAIN_CHUNK: usize = 8;
const EVAL_CHUNK: usize = 16;

/// Both streams for a set of conversations, with their labels.
#[derive(Debug, Clone, Default)]
pub struct PairedSet {
    pub audio: Vec<Matrix>,
    pub text: Vec<Matrix>,
    pub labels: Vec<Vec<usize>>,
}

impl PairedSet {
    pub fn new(audio: SequenceSet, text: SequenceSet) -> Result<Self> {
        if audio.len() != text.len() || audio.labels != text.labels {
            return Err(Error::Integrity("audio and text streams cover different conversations".into()));
        }
        Ok(Self { audio: audio.inputs, text: text.inputs, labels: audio.labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

struct Stage3Objective {
    model: Stage3Model,
    train: PairedSet,
    val: PairedSet,
}

impl Objective for Stage3Objective {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.params]
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn chunk_loss(&self, items: &[usize], grads: &mut Gradients) -> Result<(f64, usize)> {
        let audio: Vec<&Matrix> = items.iter().map(|&i| &self.train.audio[i]).collect();
        let text: Vec<&Matrix> = items.iter().map(|&i| &self.train.text[i]).collect();
        let lengths = self.model.check(&audio, &text)?;
        let targets: Vec<usize> = items.iter().flat_map(|&i| self.train.labels[i].iter().copied()).collect();
        let mut tape = Tape::new(vec![self.model.params.values()]);
        let a = tape.constant(stack_rows(&audio)?);
        let t = tape.constant(stack_rows(&text)?);
        let l = self.model.forward(&mut tape, 0, a, t, &lengths);
        let loss = tape.cross_entropy(l, &targets);
        tape.backward(loss, grads);
        Ok((tape.value(loss).get(0, 0), targets.len()))
    }

    fn validation(&self, exec: Execution) -> Result<(Vec<usize>, Vec<usize>)> {
        predict_paired(&self.model, &self.val, exec).map(|p| (p, self.val.flat_labels()))
    }

    fn n_classes(&self) -> usize {
        self.model.arch.label_space.len()
    }

    fn chunk_size(&self) -> usize {
        TRAIN_CHUNK
    }
}

/// Argmax predictions of `model` over every conversation of `set`, flattened.
pub fn predict_paired(model: &Stage3Model, set: &PairedSet, exec: Execution) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
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

/// Trains the fused classifier on frozen Stage II features of both streams.
pub fn stage3_train_on(model: Stage3Model, train: PairedSet, val: PairedSet, config: &TrainConfig) -> Result<(Stage3Model, History)> {
    let mut obj = Stage3Objective { model, train, val };
    let history = fit(&mut obj, config)?;
    Ok((obj.model, history))
}

/// The frozen models that turn a conversation into Stage II features for
/// both streams.
#[derive(Clone, Copy)]
pub struct FrozenStreams<'a> {
    pub text1: &'a Stage1Model,
    pub speech1: &'a Stage1Model,
    pub text2: &'a Stage2Model,
    pub speech2: &'a Stage2Model,
    pub features: &'a FeatureStore,
}

impl FrozenStreams<'_> {
    /// `(audio, text)` Stage II features of one conversation.
    pub fn conversation_features(&self, conversation: &Conversation) -> Result<(Matrix, Matrix)> {
        let si = self.speech1.prepare(&conversation.utterances, Some(self.features))?;
        let ti = self.text1.prepare(&conversation.utterances, Some(self.features))?;
        let a = self.speech2.forward_batch(&[&self.speech1.embed_batch(&si)?])?.0.remove(0);
        let t = self.text2.forward_batch(&[&self.text1.embed_batch(&ti)?])?.0.remove(0);
        Ok((a, t))
    }
}

impl FrozenStreams<'_> {
    /// Stage II features of both streams for every conversation of `dataset`.
    pub fn paired_set(&self, dataset: &Dataset, exec: Execution) -> Result<PairedSet> {
        let speech = stage1_sequences(self.speech1, dataset, Some(self.features))?;
        let text = stage1_sequences(self.text1, dataset, Some(self.features))?;
        let audio = SequenceSet { inputs: self.speech2.features_all(&speech.inputs, exec)?, labels: speech.labels };
        let text = SequenceSet { inputs: self.text2.features_all(&text.inputs, exec)?, labels: text.labels };
        PairedSet::new(audio, text)
    }
}

/// Trains a fresh Stage III model of `kind` on top of frozen Stage I and II
/// models of both streams.
pub fn stage3_train(
    streams: FrozenStreams<'_>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    kind: FusionKind,
) -> Result<(Stage3Model, History)> {
    if streams.text2.output_dim() != streams.speech2.output_dim() {
        return Err(Error::Shape(format!(
            "stage2 widths differ: text {} vs audio {}",
            streams.text2.output_dim(),
            streams.speech2.output_dim()
        )));
    }
    let model = Stage3Model::new(kind, streams.text2.output_dim(), train.label_space, config.seed);
    let train = streams.paired_set(train, config.execution)?;
    let val = streams.paired_set(val, config.execution)?;
    stage3_train_on(model, train, val, config)
}

/// The full stack as a classifier.
pub struct FusedClassifier<'a> {
    pub streams: FrozenStreams<'a>,
    pub stage3: &'a Stage3Model,
}

impl UtteranceClassifier for FusedClassifier<'_> {
    fn n_classes(&self) -> usize {
        self.stage3.arch.label_space.len()
    }

    fn conversation_logits(&self, conversation: &Conversation) -> Result<Matrix> {
        let (a, t) = self.streams.conversation_features(conversation)?;
        Ok(self.stage3.logits_batch(&[&a], &[&t])?.remove(0))
    }
}
