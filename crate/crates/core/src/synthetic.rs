//! Synthetic conversation corpora with known structure, so every stage can be
//! checked without licensed data.
//!
//! * `separable`: each utterance's own features determine its label.
//! * `context`: the label is the previous utterance's symbol (the first turn
//!   takes its own), so a single utterance says little about its label.
//! * `xor`: audio carries one random sign and text another; the label is
//!   their parity, so neither modality alone beats chance.
//! * `composite`: parity of the previous turn's audio sign and the current
//!   turn's text sign.
//! * `keyword`: the label is the sentiment of the one keyword in the
//!   transcript; speech is pure noise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotator::{write_transcripts, NEGATIVE_WORDS, POSITIVE_WORDS};
use crate::corpus::{split_dataset, Conversation, Dataset, LabelSpace, RawLabel, SplitSpec, SplitTag, Utterance};
use crate::encoders::FeatureStore;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const FEATURE_DIM: usize = 16;

/// Topic-free neutral keywords (absent from the sentiment lexicon).
pub const NEUTRAL_WORDS: &[&str] = &[
    "schedule", "table", "window", "report", "station", "folder", "monday", "kitchen", "paper", "bus", "meeting",
    "garden", "ticket", "printer", "corner", "street",
];

const FILLERS: &[&str] = &[
    "the", "a", "we", "they", "it", "then", "so", "about", "was", "is", "just", "really", "there", "here", "that",
    "this", "you", "i", "after", "before", "said", "told", "went", "came", "with", "from", "again", "maybe", "now",
    "still",
];

const SYMBOL_WORDS: [[&str; 3]; 4] = [
    ["alpha", "apple", "arrow"],
    ["bravo", "bottle", "bridge"],
    ["charlie", "candle", "castle"],
    ["delta", "desert", "dragon"],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Separable,
    Context,
    Xor,
    Composite,
    Keyword,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 5] =
        [SyntheticKind::Separable, SyntheticKind::Context, SyntheticKind::Xor, SyntheticKind::Composite, SyntheticKind::Keyword];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Separable => "separable",
            SyntheticKind::Context => "context",
            SyntheticKind::Xor => "xor",
            SyntheticKind::Composite => "composite",
            SyntheticKind::Keyword => "keyword",
        }
    }

    pub fn label_space(self) -> LabelSpace {
        match self {
            SyntheticKind::Separable | SyntheticKind::Context => LabelSpace::iemocap4(),
            SyntheticKind::Xor | SyntheticKind::Composite => LabelSpace::mosi2(),
            SyntheticKind::Keyword => LabelSpace::sentiment3(),
        }
    }

    fn default_turns(self) -> (usize, usize) {
        match self {
            SyntheticKind::Context => (2, 10),
            _ => (2, 6),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown synthetic corpus {s:?}; expected separable, context, xor, composite or keyword")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub feature_dim: usize,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    /// Unlabeled transcripts generated for pre-training (keyword corpus only).
    pub pretrain_transcripts: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `conversations` split 80/10/10.
    pub fn new(kind: SyntheticKind, conversations: usize, seed: u64) -> Self {
        let val = conversations / 10;
        let test = conversations / 10;
        let (min_turns, max_turns) = kind.default_turns();
        Self {
            kind,
            train: conversations - val - test,
            val,
            test,
            min_turns,
            max_turns,
            feature_dim: FEATURE_DIM,
            noise: 0.5,
            pretrain_transcripts: if kind == SyntheticKind::Keyword { 3000 } else { 0 },
            seed,
        }
    }

    pub fn with_sizes(mut self, train: usize, val: usize, test: usize) -> Self {
        self.train = train;
        self.val = val;
        self.test = test;
        self
    }

    pub fn with_turns(mut self, min: usize, max: usize) -> Self {
        self.min_turns = min;
        self.max_turns = max;
        self
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    pub features: FeatureStore,
    pub splits: SplitSpec,
    /// Unlabeled `(id, text)` pairs for pseudo-labeling.
    pub transcripts: Vec<(String, String)>,
}

impl SyntheticData {
    pub fn split(&self) -> Result<(Dataset, Dataset, Dataset)> {
        split_dataset(&self.dataset, &self.splits)
    }

    /// Writes `conversations.jsonl`, `features.jsonl`, `splits.json` and
    /// `transcripts.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.write_jsonl(&dir.join("conversations.jsonl"))?;
        self.features.write_jsonl(&dir.join("features.jsonl"))?;
        let splits = dir.join("splits.json");
        fs::write(&splits, serde_json::to_string_pretty(&self.splits)?).map_err(|e| Error::io(&splits, e))?;
        write_transcripts(&dir.join("transcripts.jsonl"), &self.transcripts)
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Sampler {
    fn pick<'a>(&mut self, words: &[&'a str]) -> &'a str {
        words[self.rng.random_range(0..words.len())]
    }

    /// A few filler words with `keyword` at a random position.
    fn sentence(&mut self, keyword: &str) -> String {
        let n = self.rng.random_range(2..=5);
        let mut words: Vec<&str> = (0..n).map(|_| self.pick(FILLERS)).collect();
        let at = self.rng.random_range(0..=words.len());
        words.insert(at, keyword);
        words.join(" ")
    }

    fn noisy(&mut self, center: &[f64]) -> Vec<f64> {
        center.iter().map(|c| c + self.noise.sample(&mut self.rng)).collect()
    }

    fn unit(&mut self, dim: usize) -> Vec<f64> {
        let std = Normal::new(0.0, 1.0).expect("valid");
        let v: Vec<f64> = (0..dim).map(|_| std.sample(&mut self.rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Keyword-corpus transcript and its sentiment class (positive, negative,
/// neutral order).
fn keyword_utterance(s: &mut Sampler) -> (String, usize) {
    let class = s.rng.random_range(0..3);
    let pool = match class {
        0 => POSITIVE_WORDS,
        1 => NEGATIVE_WORDS,
        _ => NEUTRAL_WORDS,
    };
    let word = s.pick(pool);
    (s.sentence(word), class)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.min_turns == 0 || spec.min_turns > spec.max_turns {
        return Err(Error::Config(format!("invalid turn range {}..={}", spec.min_turns, spec.max_turns)));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let label_space = spec.kind.label_space();
    let mut s = Sampler {
        rng: seeded_rng(spec.seed, &format!("synthetic-{}", spec.kind)),
        noise: Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?,
    };
    let dim = spec.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..4).map(|_| scaled(&s.unit(dim), 3.0)).collect();
    let sign_axis = scaled(&s.unit(dim), 2.0);
    let zero = vec![0.0; dim];

    let mut features = FeatureStore::new(dim).with_tags("input", "speech");
    let mut conversations = Vec::with_capacity(spec.total());
    let mut splits = BTreeMap::new();
    for ci in 0..spec.total() {
        let conversation_id = format!("{}{ci:05}", spec.kind);
        let tag = if ci < spec.train {
            SplitTag::Train
        } else if ci < spec.train + spec.val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
        splits.insert(conversation_id.clone(), tag);
        let k = s.rng.random_range(spec.min_turns..=spec.max_turns);
        let mut utterances = Vec::with_capacity(k);
        let mut prev_symbol = None;
        let mut prev_audio = None;
        for t in 0..k {
            let (transcript, feature, label) = match spec.kind {
                SyntheticKind::Separable => {
                    let c = s.rng.random_range(0..4);
                    let word = s.pick(&SYMBOL_WORDS[c]);
                    (s.sentence(word), s.noisy(&prototypes[c]), c)
                }
                SyntheticKind::Context => {
                    let sym = s.rng.random_range(0..4);
                    let word = s.pick(&SYMBOL_WORDS[sym]);
                    let label = prev_symbol.unwrap_or(sym);
                    prev_symbol = Some(sym);
                    (s.sentence(word), s.noisy(&prototypes[sym]), label)
                }
                SyntheticKind::Xor | SyntheticKind::Composite => {
                    let a = s.rng.random_range(0..2usize);
                    let b = s.rng.random_range(0..2usize);
                    let word = if b == 1 { s.pick(POSITIVE_WORDS) } else { s.pick(NEGATIVE_WORDS) };
                    let center = scaled(&sign_axis, if a == 1 { 1.0 } else { -1.0 });
                    let audio_sign = if spec.kind == SyntheticKind::Composite { prev_audio.unwrap_or(a) } else { a };
                    prev_audio = Some(a);
                    (s.sentence(word), s.noisy(&center), audio_sign ^ b)
                }
                SyntheticKind::Keyword => {
                    let (text, class) = keyword_utterance(&mut s);
                    (text, s.noisy(&zero), class)
                }
            };
            let utterance_id = format!("{conversation_id}_{t:02}");
            features.insert(utterance_id.clone(), &feature)?;
            let name = label_space.class_name(label).expect("label within space");
            utterances.push(Utterance {
                utterance_id: utterance_id.clone(),
                transcript,
                speech_key: utterance_id,
                label,
                raw_label: RawLabel::Name(name.to_string()),
                pseudo_label: None,
            });
        }
        conversations.push(Conversation { conversation_id, utterances });
    }
    let dataset = Dataset::new(conversations, label_space);

    let transcripts = if spec.kind == SyntheticKind::Keyword {
        (0..spec.pretrain_transcripts).map(|i| (format!("pre{i:05}"), keyword_utterance(&mut s).0)).collect()
    } else {
        dataset
            .conversations
            .iter()
            .filter(|c| splits[&c.conversation_id] == SplitTag::Train)
            .flat_map(|c| c.utterances.iter().map(|u| (u.utterance_id.clone(), u.transcript.clone())))
            .collect()
    };
    Ok(SyntheticData { spec: spec.clone(), dataset, features, splits, transcripts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::lexicon_sentiment;
    use crate::corpus::{parse_conversations, Sentiment};

    #[test]
    fn sizes_and_turn_ranges() {
        let d = generate(&SyntheticSpec::new(SyntheticKind::Context, 50, 1)).unwrap();
        assert_eq!(d.dataset.conversations.len(), 50);
        assert!(d.dataset.conversations.iter().all(|c| (2..=10).contains(&c.len())));
        let (tr, va, te) = d.split().unwrap();
        assert_eq!((tr.conversations.len(), va.conversations.len(), te.conversations.len()), (40, 5, 5));
        assert_eq!(d.features.len(), d.dataset.num_utterances());
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::new(SyntheticKind::Xor, 20, 3);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.dataset.to_jsonl().unwrap(), b.dataset.to_jsonl().unwrap());
        assert_eq!(a.features, b.features);
        let c = generate(&SyntheticSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.dataset.to_jsonl().unwrap(), c.dataset.to_jsonl().unwrap());
    }

    #[test]
    fn context_labels_follow_previous_symbol() {
        let d = generate(&SyntheticSpec::new(SyntheticKind::Context, 30, 2)).unwrap();
        for c in &d.dataset.conversations {
            for t in 1..c.len() {
                let prev_word = c.utterances[t - 1]
                    .transcript
                    .split(' ')
                    .find_map(|w| SYMBOL_WORDS.iter().position(|ws| ws.contains(&w)))
                    .unwrap();
                assert_eq!(c.utterances[t].label, prev_word);
            }
        }
    }

    #[test]
    fn xor_audio_sign_is_label_parity_with_text() {
        let d = generate(&SyntheticSpec::new(SyntheticKind::Xor, 40, 5)).unwrap();
        let signs: Vec<(usize, Vec<f64>)> = d
            .dataset
            .utterances()
            .map(|u| {
                let b = usize::from(lexicon_sentiment(&u.transcript) == Sentiment::Positive);
                (u.label ^ b, d.features.get(&u.speech_key).unwrap().to_vec())
            })
            .collect();
        let mut axis = vec![0.0; FEATURE_DIM];
        for (a, v) in &signs {
            let s = if *a == 1 { 1.0 } else { -1.0 };
            axis.iter_mut().zip(v).for_each(|(x, y)| *x += s * y);
        }
        let agree = signs
            .iter()
            .filter(|(a, v)| (v.iter().zip(&axis).map(|(x, y)| x * y).sum::<f64>() > 0.0) == (*a == 1))
            .count();
        assert!(agree as f64 / signs.len() as f64 > 0.97);
    }

    #[test]
    fn keyword_corpus_matches_lexicon() {
        let d = generate(&SyntheticSpec::new(SyntheticKind::Keyword, 20, 6)).unwrap();
        for u in d.dataset.utterances() {
            assert_eq!(lexicon_sentiment(&u.transcript).class_id(), u.label);
        }
        assert_eq!(d.transcripts.len(), 3000);
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&SyntheticSpec::new(SyntheticKind::Separable, 10, 7)).unwrap();
        d.write_to(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("conversations.jsonl")).unwrap();
        let (back, _) = parse_conversations(text.as_bytes(), LabelSpace::iemocap4()).unwrap();
        assert_eq!(back.to_jsonl().unwrap(), text);
        let f = FeatureStore::read_jsonl(&dir.path().join("features.jsonl")).unwrap();
        assert_eq!(f, d.features);
    }
}
