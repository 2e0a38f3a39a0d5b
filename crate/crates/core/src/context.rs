//! Stage II: per-modality conversation context over Stage I embeddings with a
//! bidirectional GRU followed by masked multi-head self-attention.
//!
//! Conversations in a batch are packed row-wise without padding; attention is
//! confined to each conversation by a block-diagonal mask.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::{ModalityTag, StageCheckpoint, StageTag};
use crate::corpus::{Conversation, Dataset, LabelSpace};
use crate::encoders::{stage1_embed_dataset, FeatureStore, Modality, Stage1Model};
use crate::error::{Error, Result};
use crate::evalkit::UtteranceClassifier;
use crate::nn::{block_diagonal_mask, seeded_rng, BiGru, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::par::{self, Execution};
use crate::tensor::Matrix;
use crate::trainer::{fit, History, Objective, TrainConfig};

pub const GRU_HIDDEN: usize = 128;
pub const CONTEXT_HEADS: usize = 4;
/// Stage II feature width (both GRU directions).
pub const D2: usize = 2 * GRU_HIDDEN;

/// One conversation's utterance vectors, possibly padded, with a validity
/// flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub conversation_id: String,
    pub matrix: Matrix,
    pub mask: Vec<bool>,
    pub stage_tag: StageTag,
    pub modality: Modality,
}

impl EmbeddingSequence {
    pub fn new(conversation_id: impl Into<String>, matrix: Matrix, stage_tag: StageTag, modality: Modality) -> Self {
        let mask = vec![true; matrix.rows()];
        Self { conversation_id: conversation_id.into(), matrix, mask, stage_tag, modality }
    }

    /// Appends zero rows up to `k_max`.
    pub fn padded(&self, k_max: usize) -> Self {
        let mut out = self.clone();
        if k_max > self.matrix.rows() {
            let cols = self.matrix.cols();
            let mut data = self.matrix.data().to_vec();
            data.resize(k_max * cols, 0.0);
            out.matrix = Matrix::from_vec(k_max, cols, data).expect("sized above");
            out.mask.resize(k_max, false);
        }
        out
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Stacks per-conversation matrices row-wise.
pub fn stack_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, |m| m.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for m in parts {
        if m.cols() != cols {
            return Err(Error::Shape(format!("cannot stack {} columns onto {cols}", m.cols())));
        }
        data.extend_from_slice(m.data());
        rows += m.rows();
    }
    Matrix::from_vec(rows, cols, data)
}

/// Splits a stacked matrix back into consecutive blocks of `lengths` rows.
pub fn split_rows(m: &Matrix, lengths: &[usize]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &l in lengths {
        let data = m.data()[start * m.cols()..(start + l) * m.cols()].to_vec();
        out.push(Matrix::from_vec(l, m.cols(), data).expect("in bounds"));
        start += l;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Arch {
    pub modality: Modality,
    pub input_dim: usize,
    pub gru: BiGru,
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub head: Linear,
    pub label_space: LabelSpace,
}

/// Feature pathway (`params`) and the Stage II classifier head
/// (`head_params`), which later stages discard.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub arch: Stage2Arch,
    pub params: ParamStore,
    pub head_params: ParamStore,
}

impl Stage2Model {
    pub fn new(modality: Modality, input_dim: usize, label_space: LabelSpace, seed: u64) -> Self {
        Self::with_dims(modality, input_dim, GRU_HIDDEN, CONTEXT_HEADS, label_space, seed)
    }

    pub fn with_dims(
        modality: Modality,
        input_dim: usize,
        hidden: usize,
        heads: usize,
        label_space: LabelSpace,
        seed: u64,
    ) -> Self {
        let mut rng = seeded_rng(seed, &format!("stage2-{modality}"));
        let mut params = ParamStore::new();
        let gru = BiGru::new(&mut params, &mut rng, "gru", input_dim, hidden);
        let d2 = gru.output_dim();
        let attention = MultiHeadAttention::new(&mut params, &mut rng, "attn", d2, heads);
        let norm = LayerNorm::new(&mut params, "norm", d2);
        let mut head_params = ParamStore::new();
        let head = Linear::new(&mut head_params, &mut rng, "classifier", d2, label_space.len());
        Self { arch: Stage2Arch { modality, input_dim, gru, attention, norm, head, label_space }, params, head_params }
    }

    pub fn output_dim(&self) -> usize {
        self.arch.gru.output_dim()
    }

    pub fn modality(&self) -> Modality {
        self.arch.modality
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars() + self.head_params.num_scalars()
    }

    /// Packed conversations (`sum(lengths) x input_dim`) to `... x d2`.
    pub fn features(&self, tape: &mut Tape<'_>, group: usize, x: Var, lengths: &[usize]) -> Var {
        let g = self.arch.gru.forward_packed(tape, group, x, lengths);
        let mask = block_diagonal_mask(lengths);
        let a = self.arch.attention.forward(tape, group, g, g, Some(&mask));
        let s = tape.add(g, a);
        self.arch.norm.forward(tape, group, s)
    }

    pub fn logits(&self, tape: &mut Tape<'_>, head_group: usize, features: Var) -> Var {
        self.arch.head.forward(tape, head_group, features)
    }

    pub(crate) fn check_input(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "stage2 {} model expects {}-dim inputs, got {}",
                self.modality(),
                self.arch.input_dim,
                m.cols()
            )));
        }
        Ok(())
    }

    /// Features and logits for a batch of unpadded conversations.
    pub fn forward_batch(&self, seqs: &[&Matrix]) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        for s in seqs {
            self.check_input(s)?;
        }
        let lengths: Vec<usize> = seqs.iter().map(|m| m.rows()).collect();
        let mut tape = Tape::new(vec![self.params.values(), self.head_params.values()]);
        tape.freeze_group(0);
        tape.freeze_group(1);
        let x = tape.constant(stack_rows(seqs)?);
        let f = self.features(&mut tape, 0, x, &lengths);
        let l = self.logits(&mut tape, 1, f);
        Ok((split_rows(tape.value(f), &lengths), split_rows(tape.value(l), &lengths)))
    }

    /// Stage II features of many conversations, computed in fixed-size
    /// chunks.
    pub fn features_all(&self, seqs: &[Matrix], exec: Execution) -> Result<Vec<Matrix>> {
        let chunks: Vec<&[Matrix]> = seqs.chunks(EVAL_CHUNK).collect();
        let parts = par::map(exec, &chunks, |c| self.forward_batch(&c.iter().collect::<Vec<_>>()).map(|(f, _)| f));
        let mut out = Vec::with_capacity(seqs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// `(K_max x d2, K_max x |Y|)`; padded rows never reach the model and come
    /// back as zeros.
    pub fn context_forward(&self, seq: &EmbeddingSequence) -> Result<(Matrix, Matrix)> {
        if seq.stage_tag != StageTag::Stage1 {
            return Err(Error::TagMismatch(format!("stage2 input must be stage1 embeddings, got {}", seq.stage_tag)));
        }
        if seq.modality != self.modality() {
            return Err(Error::TagMismatch(format!("{} sequence given to a {} model", seq.modality, self.modality())));
        }
        self.check_input(&seq.matrix)?;
        let valid = seq.valid_rows();
        if valid.is_empty() {
            return Err(Error::Precondition("sequence has no valid positions".into()));
        }
        let k_max = seq.matrix.rows();
        let mut tape = Tape::new(vec![self.params.values(), self.head_params.values()]);
        tape.freeze_group(0);
        tape.freeze_group(1);
        let x = tape.constant(seq.matrix.clone());
        let xv = tape.gather_rows(x, &valid);
        let f = self.features(&mut tape, 0, xv, &[valid.len()]);
        let l = self.logits(&mut tape, 1, f);
        let f = tape.scatter_rows(f, &valid, k_max);
        let l = tape.scatter_rows(l, &valid, k_max);
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<StageCheckpoint> {
        Ok(StageCheckpoint::new(
            StageTag::Stage2,
            self.modality().into(),
            config_hash,
            serde_json::to_value(&self.arch)?,
            vec![self.params.clone(), self.head_params.clone()],
        ))
    }

    pub fn from_checkpoint(ckpt: &StageCheckpoint) -> Result<Self> {
        if ckpt.stage != StageTag::Stage2 {
            return Err(Error::TagMismatch(format!("expected a stage2 checkpoint, got {}", ckpt.stage)));
        }
        let arch: Stage2Arch = ckpt.meta_as()?;
        if ModalityTag::from(arch.modality) != ckpt.modality {
            return Err(Error::TagMismatch(format!("checkpoint tagged {} holds a {} model", ckpt.modality, arch.modality)));
        }
        let [params, head_params] = <[ParamStore; 2]>::try_from(ckpt.params.clone())
            .map_err(|_| Error::Checkpoint("stage2 checkpoint needs two parameter groups".into()))?;
        Ok(Self { arch, params, head_params })
    }
}

const EVAL_CHUNK: usize = 16;
const TRAIN_CHUNK: usize = 8;

/// Per-conversation inputs and labels for a stage trained over whole
/// conversations.
#[derive(Debug, Clone, Default)]
pub struct SequenceSet {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<Vec<usize>>,
}

impl SequenceSet {
    pub fn new(inputs: Vec<Matrix>, dataset: &Dataset) -> Self {
        let labels = dataset.conversations.iter().map(Conversation::labels).collect();
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

struct Stage2Objective {
    model: Stage2Model,
    train: SequenceSet,
    val: SequenceSet,
}

impl Objective for Stage2Objective {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.params, &self.model.head_params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.params, &mut self.model.head_params]
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn chunk_loss(&self, items: &[usize], grads: &mut Gradients) -> Result<(f64, usize)> {
        let seqs: Vec<&Matrix> = items.iter().map(|&i| &self.train.inputs[i]).collect();
        let lengths: Vec<usize> = seqs.iter().map(|m| m.rows()).collect();
        let targets: Vec<usize> = items.iter().flat_map(|&i| self.train.labels[i].iter().copied()).collect();
        let mut tape = Tape::new(self.stores().into_iter().map(|s| s.values()).collect());
        let x = tape.constant(stack_rows(&seqs)?);
        let f = self.model.features(&mut tape, 0, x, &lengths);
        let l = self.model.logits(&mut tape, 1, f);
        let loss = tape.cross_entropy(l, &targets);
        tape.backward(loss, grads);
        Ok((tape.value(loss).get(0, 0), targets.len()))
    }

    fn validation(&self, exec: Execution) -> Result<(Vec<usize>, Vec<usize>)> {
        let chunks: Vec<&[Matrix]> = self.val.inputs.chunks(EVAL_CHUNK).collect();
        let parts = par::map(exec, &chunks, |c| self.model.forward_batch(&c.iter().collect::<Vec<_>>()).map(|(_, l)| l));
        let mut preds = Vec::new();
        for p in parts {
            for l in p? {
                preds.extend((0..l.rows()).map(|r| l.argmax_row(r)));
            }
        }
        Ok((preds, self.val.flat_labels()))
    }

    fn n_classes(&self) -> usize {
        self.model.arch.label_space.len()
    }

    fn chunk_size(&self) -> usize {
        TRAIN_CHUNK
    }
}

/// Trains a Stage II model on precomputed (frozen) Stage I sequences; one
/// conversation is one batch item.
pub fn stage2_train_on(model: Stage2Model, train: SequenceSet, val: SequenceSet, config: &TrainConfig) -> Result<(Stage2Model, History)> {
    for m in train.inputs.iter().chain(&val.inputs) {
        model.check_input(m)?;
    }
    let mut obj = Stage2Objective { model, train, val };
    let history = fit(&mut obj, config)?;
    Ok((obj.model, history))
}

/// Stage I embeddings (frozen) for every conversation of `dataset`.
pub fn stage1_sequences(stage1: &Stage1Model, dataset: &Dataset, features: Option<&FeatureStore>) -> Result<SequenceSet> {
    Ok(SequenceSet::new(stage1_embed_dataset(stage1, dataset, features)?, dataset))
}

/// Trains Stage II on top of a frozen Stage I model.
pub fn stage2_train(
    stage1: &Stage1Model,
    train: &Dataset,
    val: &Dataset,
    features: Option<&FeatureStore>,
    config: &TrainConfig,
) -> Result<(Stage2Model, History)> {
    let model = Stage2Model::new(stage1.modality(), stage1.embedding_dim(), stage1.label_space, config.seed);
    let train = stage1_sequences(stage1, train, features)?;
    let val = stage1_sequences(stage1, val, features)?;
    stage2_train_on(model, train, val, config)
}

/// Stage I alone as a conversation classifier.
pub struct Stage1Classifier<'a> {
    pub model: &'a Stage1Model,
    pub features: Option<&'a FeatureStore>,
}

impl UtteranceClassifier for Stage1Classifier<'_> {
    fn n_classes(&self) -> usize {
        self.model.label_space.len()
    }

    fn conversation_logits(&self, conversation: &Conversation) -> Result<Matrix> {
        let inputs = self.model.prepare(&conversation.utterances, self.features)?;
        self.model.logits_batch(&inputs)
    }
}

/// Frozen Stage I followed by Stage II.
pub struct Stage2Classifier<'a> {
    pub stage1: &'a Stage1Model,
    pub stage2: &'a Stage2Model,
    pub features: Option<&'a FeatureStore>,
}

impl UtteranceClassifier for Stage2Classifier<'_> {
    fn n_classes(&self) -> usize {
        self.stage2.arch.label_space.len()
    }

    fn conversation_logits(&self, conversation: &Conversation) -> Result<Matrix> {
        let inputs = self.stage1.prepare(&conversation.utterances, self.features)?;
        let emb = self.stage1.embed_batch(&inputs)?;
        let (_, mut logits) = self.stage2.forward_batch(&[&emb])?;
        Ok(logits.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use crate::nn::normal_init;

    fn toy_model() -> Stage2Model {
        Stage2Model::new(Modality::Speech, 6, LabelSpace::iemocap4(), 3)
    }

    fn seq(k: usize, seed: u64) -> Matrix {
        normal_init(&mut seeded_rng(seed, "seq"), k, 6, 1.0)
    }

    #[test]
    fn single_utterance_shapes() {
        let m = toy_model();
        let s = EmbeddingSequence::new("c", seq(1, 1), StageTag::Stage1, Modality::Speech);
        let (f, l) = m.context_forward(&s).unwrap();
        assert_eq!(f.shape(), (1, D2));
        assert_eq!(l.shape(), (1, 4));
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let m = toy_model();
        let s = EmbeddingSequence::new("c", seq(5, 2), StageTag::Stage1, Modality::Speech);
        let (f8, l8) = m.context_forward(&s.padded(8)).unwrap();
        let (f16, l16) = m.context_forward(&s.padded(16)).unwrap();
        for r in 0..5 {
            for (a, b) in f8.row(r).iter().zip(f16.row(r)).chain(l8.row(r).iter().zip(l16.row(r))) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(f16.row(10).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_inputs_get_zero_gradient() {
        let m = toy_model();
        let s = EmbeddingSequence::new("c", seq(3, 4), StageTag::Stage1, Modality::Speech).padded(6);
        let valid = s.valid_rows();
        let mut tape = Tape::new(vec![m.params.values(), m.head_params.values()]);
        let x = tape.input(s.matrix.clone(), true);
        let xv = tape.gather_rows(x, &valid);
        let f = m.features(&mut tape, 0, xv, &[3]);
        let l = m.logits(&mut tape, 1, f);
        let loss = tape.cross_entropy(l, &[0, 1, 2]);
        let mut grads = Gradients::new(&[m.params.len(), m.head_params.len()]);
        let g = tape.backward(loss, &mut grads);
        let gx = g.get(x).unwrap();
        for r in 3..6 {
            assert!(gx.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(gx.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_permutation_leaves_outputs_unchanged() {
        let m = toy_model();
        let a = seq(3, 5);
        let b = seq(7, 6);
        let c = seq(2, 7);
        let (f1, _) = m.forward_batch(&[&a, &b, &c]).unwrap();
        let (f2, _) = m.forward_batch(&[&c, &a, &b]).unwrap();
        assert!(f1[0].max_abs_diff(&f2[1]) < 1e-6);
        assert!(f1[1].max_abs_diff(&f2[2]) < 1e-6);
        assert!(f1[2].max_abs_diff(&f2[0]) < 1e-6);
    }

    #[test]
    fn rejects_wrong_inputs() {
        let m = toy_model();
        let bad = EmbeddingSequence::new("c", normal_init(&mut seeded_rng(0, "x"), 2, 5, 1.0), StageTag::Stage1, Modality::Speech);
        assert!(matches!(m.context_forward(&bad), Err(Error::Shape(_))));
        let stage = EmbeddingSequence::new("c", seq(2, 1), StageTag::Stage2, Modality::Speech);
        assert!(m.context_forward(&stage).is_err());
        let modality = EmbeddingSequence::new("c", seq(2, 1), StageTag::Stage1, Modality::Text);
        assert!(m.context_forward(&modality).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = toy_model();
        let x = seq(3, 8);
        let mut stores = vec![m.params.clone(), m.head_params.clone()];
        let report = gradient_check(&mut stores, Some(12), |tape| {
            let xv = tape.constant(x.clone());
            let f = m.features(tape, 0, xv, &[3]);
            let l = m.logits(tape, 1, f);
            tape.cross_entropy(l, &[0, 3, 1])
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model();
        let c = m.to_checkpoint("h").unwrap();
        let back = Stage2Model::from_checkpoint(&serde_json::from_str(&c.to_json().unwrap()).unwrap()).unwrap();
        let x = seq(4, 9);
        assert_eq!(m.forward_batch(&[&x]).unwrap().1, back.forward_batch(&[&x]).unwrap().1);
    }
}
