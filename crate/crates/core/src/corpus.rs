//! Conversation data model, JSONL ingestion, label inventories and splits.
//!
//! One conversation per line:
//!
//! ```text
//! {"conversation_id":"c1","utterances":[{"utterance_id":"u1","transcript":"hi","speech_key":"c1/u1","label":"neu"}]}
//! ```
//!
//! `label` is a string for categorical corpora and a number for continuous
//! sentiment scores. Writing a loaded dataset back out reproduces canonical
//! input byte for byte.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
        }
    }

    /// Class id under the `sentiment3` inventory.
    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            _ => Err(Error::UnknownLabel { label: s.to_string(), label_space: "sentiment3".into() }),
        }
    }
}

/// Raw annotation as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawLabel {
    Name(String),
    Score(serde_json::Number),
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawLabel::Name(s) => f.write_str(s),
            RawLabel::Score(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpaceKind {
    Iemocap4,
    Meld7,
    Mosi2,
    Sentiment3,
}

impl LabelSpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSpaceKind::Iemocap4 => "iemocap4",
            LabelSpaceKind::Meld7 => "meld7",
            LabelSpaceKind::Mosi2 => "mosi2",
            LabelSpaceKind::Sentiment3 => "sentiment3",
        }
    }
}

impl FromStr for LabelSpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iemocap4" => Ok(Self::Iemocap4),
            "meld7" => Ok(Self::Meld7),
            "mosi2" => Ok(Self::Mosi2),
            "sentiment3" => Ok(Self::Sentiment3),
            other => Err(Error::Config(format!("unknown label space {other:?}"))),
        }
    }
}

/// IEMOCAP categories that exist in the corpus but sit outside the 4-way task.
const IEMOCAP_DROPPED: &[&str] = &[
    "fru", "sur", "fea", "dis", "oth", "xxx", "frustrated", "frustration", "surprised", "surprise", "fearful",
    "fear", "disgusted", "disgust", "other",
];

/// Outcome of mapping one raw label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapped {
    Class(usize),
    /// A known category that the task leaves out.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "LabelSpaceKind", from = "LabelSpaceKind")]
pub struct LabelSpace {
    kind: LabelSpaceKind,
}

impl From<LabelSpace> for LabelSpaceKind {
    fn from(ls: LabelSpace) -> Self {
        ls.kind
    }
}

impl From<LabelSpaceKind> for LabelSpace {
    fn from(kind: LabelSpaceKind) -> Self {
        Self { kind }
    }
}

impl LabelSpace {
    pub fn new(kind: LabelSpaceKind) -> Self {
        Self { kind }
    }

    pub fn iemocap4() -> Self {
        Self::new(LabelSpaceKind::Iemocap4)
    }

    pub fn meld7() -> Self {
        Self::new(LabelSpaceKind::Meld7)
    }

    pub fn mosi2() -> Self {
        Self::new(LabelSpaceKind::Mosi2)
    }

    pub fn sentiment3() -> Self {
        Self::new(LabelSpaceKind::Sentiment3)
    }

    pub fn kind(&self) -> LabelSpaceKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn classes(&self) -> &'static [&'static str] {
        match self.kind {
            LabelSpaceKind::Iemocap4 => &["angry", "happy", "sad", "neutral"],
            LabelSpaceKind::Meld7 => &["angry", "sad", "joy", "neutral", "fear", "surprise", "disgust"],
            LabelSpaceKind::Mosi2 => &["negative", "positive"],
            LabelSpaceKind::Sentiment3 => &["positive", "negative", "neutral"],
        }
    }

    pub fn len(&self) -> usize {
        self.classes().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class_name(&self, id: usize) -> Option<&'static str> {
        self.classes().get(id).copied()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes().iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    fn unknown(&self, raw: &RawLabel) -> Error {
        Error::UnknownLabel { label: raw.to_string(), label_space: self.name().into() }
    }

    /// Maps an on-disk label to a class id.
    pub fn map_raw(&self, raw: &RawLabel) -> Result<Mapped> {
        match (self.kind, raw) {
            (LabelSpaceKind::Mosi2, RawLabel::Score(n)) => {
                let score = n.as_f64().ok_or_else(|| self.unknown(raw))?;
                Ok(Mapped::Class(map_mosi_score(score)?))
            }
            (_, RawLabel::Score(_)) => Err(self.unknown(raw)),
            (kind, RawLabel::Name(name)) => {
                let lower = name.trim().to_ascii_lowercase();
                let canonical = match (kind, lower.as_str()) {
                    (LabelSpaceKind::Iemocap4, "ang") => "angry",
                    (LabelSpaceKind::Iemocap4, "hap" | "exc" | "excited") => "happy",
                    (LabelSpaceKind::Iemocap4, "neu") => "neutral",
                    (LabelSpaceKind::Iemocap4, s) if IEMOCAP_DROPPED.contains(&s) => return Ok(Mapped::Dropped),
                    (LabelSpaceKind::Meld7, "anger") => "angry",
                    (LabelSpaceKind::Meld7, "sadness") => "sad",
                    (_, s) => s,
                };
                self.class_id(canonical).map(Mapped::Class).ok_or_else(|| self.unknown(raw))
            }
        }
    }
}

/// Binarizes a continuous sentiment score: `[-3, 0)` is negative (0),
/// `[0, 3]` positive (1).
pub fn map_mosi_score(score: f64) -> Result<usize> {
    if !(-3.0..=3.0).contains(&score) {
        return Err(Error::Domain(format!("sentiment score {score} outside [-3, 3]")));
    }
    Ok(if score < 0.0 { 0 } else { 1 })
}

/// Valence in `[1, 7]`: `(5, 7]` positive, `[1, 3)` negative, else neutral.
pub fn valence_to_sentiment(valence: f64) -> Result<Sentiment> {
    if !(1.0..=7.0).contains(&valence) {
        return Err(Error::Domain(format!("valence {valence} outside [1, 7]")));
    }
    Ok(if valence > 5.0 {
        Sentiment::Positive
    } else if valence < 3.0 {
        Sentiment::Negative
    } else {
        Sentiment::Neutral
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub transcript: String,
    /// Key into the speech feature store.
    pub speech_key: String,
    /// Class id after label-space mapping.
    pub label: usize,
    pub raw_label: RawLabel,
    pub pseudo_label: Option<Sentiment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub conversation_id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub label_space: LabelSpace,
    pub split: Option<SplitTag>,
}

impl Dataset {
    pub fn new(conversations: Vec<Conversation>, label_space: LabelSpace) -> Self {
        Self { conversations, label_space, split: None }
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.conversations.iter().flat_map(|c| c.utterances.iter())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances().map(|u| u.label).collect()
    }

    /// Serializes to canonical JSONL (one conversation per line).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.conversations {
            let record = ConversationRecord {
                conversation_id: c.conversation_id.clone(),
                utterances: c
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        utterance_id: u.utterance_id.clone(),
                        transcript: u.transcript.clone(),
                        speech_key: u.speech_key.clone(),
                        label: u.raw_label.clone(),
                        pseudo_label: u.pseudo_label,
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    utterance_id: String,
    transcript: String,
    speech_key: String,
    label: RawLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_label: Option<Sentiment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    conversation_id: String,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub conversations: usize,
    pub utterances: usize,
    pub dropped_utterances: usize,
    pub dropped_conversations: usize,
}

/// Parses JSONL conversations from any reader.
pub fn parse_conversations(reader: impl BufRead, label_space: LabelSpace) -> Result<(Dataset, LoadStats)> {
    let mut stats = LoadStats::default();
    let mut conversations = Vec::new();
    let mut seen_conversations = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if !seen_conversations.insert(record.conversation_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate conversation_id {:?} on line {line_no}",
                record.conversation_id
            )));
        }
        let mut seen_utterances = HashSet::new();
        let mut utterances = Vec::with_capacity(record.utterances.len());
        for u in record.utterances {
            if !seen_utterances.insert(u.utterance_id.clone()) {
                return Err(Error::Integrity(format!(
                    "duplicate utterance_id {:?} in conversation {:?}",
                    u.utterance_id, record.conversation_id
                )));
            }
            match label_space.map_raw(&u.label)? {
                Mapped::Dropped => stats.dropped_utterances += 1,
                Mapped::Class(label) => utterances.push(Utterance {
                    utterance_id: u.utterance_id,
                    transcript: u.transcript,
                    speech_key: u.speech_key,
                    label,
                    raw_label: u.label,
                    pseudo_label: u.pseudo_label,
                }),
            }
        }
        if utterances.is_empty() {
            stats.dropped_conversations += 1;
            continue;
        }
        stats.utterances += utterances.len();
        conversations.push(Conversation { conversation_id: record.conversation_id, utterances });
    }
    stats.conversations = conversations.len();
    Ok((Dataset::new(conversations, label_space), stats))
}

pub fn load_conversations_with_stats(path: &Path, label_space: LabelSpace) -> Result<(Dataset, LoadStats)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conversations(BufReader::new(f), label_space)
}

/// Loads a JSONL conversation file, logging how many utterances were left
/// out of the label inventory.
pub fn load_conversations(path: &Path, label_space: LabelSpace) -> Result<Dataset> {
    let (dataset, stats) = load_conversations_with_stats(path, label_space)?;
    if stats.dropped_utterances > 0 {
        log::warn!(
            "{}: dropped {} utterances ({} conversations emptied) outside the {} inventory",
            path.display(),
            stats.dropped_utterances,
            stats.dropped_conversations,
            label_space.name()
        );
    }
    Ok(dataset)
}

pub type SplitSpec = BTreeMap<String, SplitTag>;

pub fn load_split_spec(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Partitions by conversation id. Each output keeps file order.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let missing: Vec<String> = dataset
        .conversations
        .iter()
        .filter(|c| !spec.contains_key(&c.conversation_id))
        .map(|c| c.conversation_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSplit { ids: missing });
    }
    let part = |tag: SplitTag| Dataset {
        conversations: dataset
            .conversations
            .iter()
            .filter(|c| spec[&c.conversation_id] == tag)
            .cloned()
            .collect(),
        label_space: dataset.label_space,
        split: Some(tag),
    };
    Ok((part(SplitTag::Train), part(SplitTag::Val), part(SplitTag::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, ls: LabelSpace) -> Result<(Dataset, LoadStats)> {
        parse_conversations(text.as_bytes(), ls)
    }

    const TWO: &str = concat!(
        r#"{"conversation_id":"a","utterances":[{"utterance_id":"a1","transcript":"hello","speech_key":"a/1","label":"neu"},{"utterance_id":"a2","transcript":"great","speech_key":"a/2","label":"exc"},{"utterance_id":"a3","transcript":"","speech_key":"a/3","label":"ang"}]}"#,
        "\n",
        r#"{"conversation_id":"b","utterances":[{"utterance_id":"b1","transcript":"sigh","speech_key":"b/1","label":"sad"}]}"#,
        "\n"
    );

    #[test]
    fn loads_structure_in_file_order() {
        let (ds, stats) = parse(TWO, LabelSpace::iemocap4()).unwrap();
        let ks: Vec<usize> = ds.conversations.iter().map(Conversation::len).collect();
        assert_eq!(ks, vec![3, 1]);
        assert_eq!(stats.utterances, 4);
        assert_eq!(ds.conversations[0].utterances[2].transcript, "");
    }

    #[test]
    fn excited_merges_into_happy() {
        let (ds, _) = parse(TWO, LabelSpace::iemocap4()).unwrap();
        let u = &ds.conversations[0].utterances[1];
        assert_eq!(ds.label_space.class_name(u.label), Some("happy"));
    }

    #[test]
    fn out_of_inventory_label_is_a_mapping_error() {
        let line = r#"{"conversation_id":"a","utterances":[{"utterance_id":"a1","transcript":"x","speech_key":"k","label":"boredom"}]}"#;
        match parse(line, LabelSpace::iemocap4()) {
            Err(Error::UnknownLabel { label, .. }) => assert_eq!(label, "boredom"),
            other => panic!("expected mapping error, got {other:?}"),
        }
    }

    #[test]
    fn known_iemocap_extras_are_dropped_and_counted() {
        let line = concat!(
            r#"{"conversation_id":"a","utterances":[{"utterance_id":"a1","transcript":"x","speech_key":"k","label":"fru"},{"utterance_id":"a2","transcript":"y","speech_key":"k2","label":"hap"}]}"#,
            "\n",
            r#"{"conversation_id":"b","utterances":[{"utterance_id":"b1","transcript":"x","speech_key":"k","label":"xxx"}]}"#
        );
        let (ds, stats) = parse(line, LabelSpace::iemocap4()).unwrap();
        assert_eq!(ds.conversations.len(), 1);
        assert_eq!(stats.dropped_utterances, 2);
        assert_eq!(stats.dropped_conversations, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", TWO.lines().next().unwrap());
        match parse(&text, LabelSpace::iemocap4()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_utterance_id_is_integrity_error() {
        let line = r#"{"conversation_id":"a","utterances":[{"utterance_id":"u","transcript":"x","speech_key":"k","label":"neu"},{"utterance_id":"u","transcript":"y","speech_key":"k","label":"neu"}]}"#;
        assert!(matches!(parse(line, LabelSpace::iemocap4()), Err(Error::Integrity(_))));
    }

    #[test]
    fn canonical_round_trip() {
        let (ds, _) = parse(TWO, LabelSpace::iemocap4()).unwrap();
        assert_eq!(ds.to_jsonl().unwrap(), TWO);
        let mosi = r#"{"conversation_id":"m","utterances":[{"utterance_id":"m1","transcript":"ok","speech_key":"m/1","label":-1.2},{"utterance_id":"m2","transcript":"fine","speech_key":"m/2","label":3}]}"#
            .to_string()
            + "\n";
        let (ds, _) = parse(&mosi, LabelSpace::mosi2()).unwrap();
        assert_eq!(ds.labels(), vec![0, 1]);
        assert_eq!(ds.to_jsonl().unwrap(), mosi);
    }

    #[test]
    fn mosi_scores() {
        assert_eq!(map_mosi_score(-1.2).unwrap(), 0);
        assert_eq!(map_mosi_score(0.0).unwrap(), 1);
        assert_eq!(map_mosi_score(3.0).unwrap(), 1);
        assert_eq!(map_mosi_score(-3.0).unwrap(), 0);
        assert!(matches!(map_mosi_score(3.01), Err(Error::Domain(_))));
        assert!(map_mosi_score(f64::NAN).is_err());
    }

    #[test]
    fn valence_oracle() {
        assert_eq!(valence_to_sentiment(6.0).unwrap(), Sentiment::Positive);
        assert_eq!(valence_to_sentiment(1.0).unwrap(), Sentiment::Negative);
        assert_eq!(valence_to_sentiment(5.0).unwrap(), Sentiment::Neutral);
        assert_eq!(valence_to_sentiment(3.0).unwrap(), Sentiment::Neutral);
        assert_eq!(valence_to_sentiment(7.0).unwrap(), Sentiment::Positive);
        assert!(valence_to_sentiment(0.5).is_err());
    }

    #[test]
    fn valence_partitions_the_range_on_a_fine_grid() {
        let mut counts = [0usize; 3];
        for i in 0..=6000 {
            let v = 1.0 + i as f64 * 0.001;
            let s = valence_to_sentiment(v).unwrap();
            let in_pos = v > 5.0 && v <= 7.0;
            let in_neg = (1.0..3.0).contains(&v);
            let expect = if in_pos {
                Sentiment::Positive
            } else if in_neg {
                Sentiment::Negative
            } else {
                Sentiment::Neutral
            };
            assert_eq!(s, expect, "valence {v}");
            counts[s.class_id()] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 6001);
    }

    #[test]
    fn label_space_sizes() {
        assert_eq!(LabelSpace::iemocap4().len(), 4);
        assert_eq!(LabelSpace::meld7().len(), 7);
        assert_eq!(LabelSpace::mosi2().len(), 2);
        assert_eq!(LabelSpace::sentiment3().classes(), &["positive", "negative", "neutral"]);
    }

    fn five() -> Dataset {
        let convs = (1..=5)
            .map(|i| Conversation {
                conversation_id: format!("c{i}"),
                utterances: vec![Utterance {
                    utterance_id: "u".into(),
                    transcript: String::new(),
                    speech_key: format!("c{i}"),
                    label: 0,
                    raw_label: RawLabel::Name("neutral".into()),
                    pseudo_label: None,
                }],
            })
            .collect();
        Dataset::new(convs, LabelSpace::iemocap4())
    }

    #[test]
    fn splits_partition_and_report_missing() {
        let ds = five();
        let mut spec: SplitSpec = (1..=3).map(|i| (format!("c{i}"), SplitTag::Train)).collect();
        spec.insert("c4".into(), SplitTag::Val);
        match split_dataset(&ds, &spec) {
            Err(Error::MissingSplit { ids }) => assert_eq!(ids, vec!["c5".to_string()]),
            other => panic!("expected missing split, got {other:?}"),
        }
        spec.insert("c5".into(), SplitTag::Test);
        let (tr, va, te) = split_dataset(&ds, &spec).unwrap();
        assert_eq!((tr.conversations.len(), va.conversations.len(), te.conversations.len()), (3, 1, 1));
        assert_eq!(tr.conversations[2].conversation_id, "c3");
        spec.insert("c5".into(), SplitTag::Train);
        let (_, _, te) = split_dataset(&ds, &spec).unwrap();
        assert!(te.is_empty());
    }
}
