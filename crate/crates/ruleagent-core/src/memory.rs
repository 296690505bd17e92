//! The three memory stores the agent reasons over: per-interaction noise
//! confidence, the rule hierarchy with its revision history, and the ordered
//! action log. All three persist as plain files inside a run directory.
//!
//! Confidence scores live in [0, 2]; below 1 means the interaction is
//! considered noisy. The unlearning weight of a flagged pair is `1 - c`
//! with `c` the min-max normalization of all stored scores into [0, 1].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalResult;
use crate::rules::{parse_rule_text, serialize as serialize_rules, RuleTree};
use crate::training::NoisyPair;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("confidence score {0} outside [0, 2]")]
    ScoreOutOfRange(f64),
    #[error("memory is empty")]
    Empty,
    #[error("action record index {got} breaks the sequence (expected {expected})")]
    NonContiguousIndex { got: usize, expected: usize },
    #[error(
        "action record of kind {0} must carry an evaluation outcome iff it is ModelEvaluation"
    )]
    OutcomeMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Rules(#[from] crate::rules::RuleError),
}

/// One scored interaction with the agent's reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub user: usize,
    pub item: usize,
    /// Noise confidence in [0, 2]; below 1 reads as noisy, above as clean.
    pub score: f64,
    pub reason: String,
    /// Index of the action that last wrote this entry (0 = initialization).
    pub revised_at: usize,
}

/// Per-interaction confidence store, keyed by (user, item).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidenceMemory {
    entries: BTreeMap<(usize, usize), ConfidenceEntry>,
}

impl ConfidenceMemory {
    pub fn new() -> ConfidenceMemory {
        ConfidenceMemory::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user: usize, item: usize) -> Option<&ConfidenceEntry> {
        self.entries.get(&(user, item))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ConfidenceEntry> {
        self.entries.values()
    }

    /// Upserts by (user, item); the score must lie in [0, 2].
    pub fn set(&mut self, entry: ConfidenceEntry) -> Result<(), MemoryError> {
        if !(0.0..=2.0).contains(&entry.score) || !entry.score.is_finite() {
            return Err(MemoryError::ScoreOutOfRange(entry.score));
        }
        self.entries.insert((entry.user, entry.item), entry);
        Ok(())
    }

    /// Min-max scaling of all stored scores into [0, 1]; a contrast-free
    /// memory (max = min) maps everything to the neutral 0.5.
    pub fn normalize(&self) -> Result<BTreeMap<(usize, usize), f64>, MemoryError> {
        if self.entries.is_empty() {
            return Err(MemoryError::Empty);
        }
        let min = self
            .entries
            .values()
            .map(|e| e.score)
            .fold(f64::INFINITY, f64::min);
        let max = self
            .entries
            .values()
            .map(|e| e.score)
            .fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        Ok(self
            .entries
            .iter()
            .map(|(&key, entry)| {
                let c = if span == 0.0 {
                    0.5
                } else {
                    (entry.score - min) / span
                };
                (key, c)
            })
            .collect())
    }

    /// Pairs scored below 1 (the noisy side of the scale), each with its
    /// reversal weight `w = 1 - c`.
    pub fn noisy_set(&self) -> Result<Vec<NoisyPair>, MemoryError> {
        let normalized = self.normalize()?;
        Ok(self
            .entries
            .values()
            .filter(|entry| entry.score < 1.0)
            .map(|entry| NoisyPair {
                user: entry.user,
                item: entry.item,
                weight: 1.0 - normalized[&(entry.user, entry.item)],
            })
            .collect())
    }
}

/// What the agent did at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Initialization,
    ConfidenceReflection,
    RuleReflection,
    LossEraserTraining,
    ModelEvaluation,
}

impl ActionKind {
    /// The menu letter used in planning prompts and responses.
    pub fn letter(self) -> Option<char> {
        match self {
            ActionKind::Initialization => None,
            ActionKind::ConfidenceReflection => Some('a'),
            ActionKind::RuleReflection => Some('b'),
            ActionKind::LossEraserTraining => Some('c'),
            ActionKind::ModelEvaluation => Some('d'),
        }
    }

    pub fn from_letter(letter: char) -> Option<ActionKind> {
        match letter.to_ascii_lowercase() {
            'a' => Some(ActionKind::ConfidenceReflection),
            'b' => Some(ActionKind::RuleReflection),
            'c' => Some(ActionKind::LossEraserTraining),
            'd' => Some(ActionKind::ModelEvaluation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Initialization => "Initialization",
            ActionKind::ConfidenceReflection => "Confidence Reflection",
            ActionKind::RuleReflection => "Rule Reflection",
            ActionKind::LossEraserTraining => "LossEraser Training",
            ActionKind::ModelEvaluation => "Model Evaluation",
        }
    }
}

/// One action log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    /// 1-based, contiguous.
    pub index: usize,
    pub kind: ActionKind,
    pub reason: String,
    /// Present iff `kind` is `ModelEvaluation`.
    pub eval_outcome: Option<EvalResult>,
}

/// Ordered action log with contiguous indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionMemory {
    records: Vec<ActionRecord>,
}

impl ActionMemory {
    pub fn new() -> ActionMemory {
        ActionMemory::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ActionRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&ActionRecord> {
        self.records.last()
    }

    /// Appends a record; the next index is assigned automatically.
    pub fn push(&mut self, kind: ActionKind, reason: impl Into<String>) -> usize {
        let index = self.records.len() + 1;
        self.records.push(ActionRecord {
            index,
            kind,
            reason: reason.into(),
            eval_outcome: None,
        });
        index
    }

    /// Attaches the evaluation outcome to an existing ModelEvaluation record.
    pub fn attach_outcome(&mut self, index: usize, outcome: EvalResult) -> Result<(), MemoryError> {
        let record =
            self.records
                .get_mut(index.wrapping_sub(1))
                .ok_or(MemoryError::NonContiguousIndex {
                    got: index,
                    expected: 0,
                })?;
        if record.kind != ActionKind::ModelEvaluation {
            return Err(MemoryError::OutcomeMismatch(record.kind.name().to_string()));
        }
        record.eval_outcome = Some(outcome);
        Ok(())
    }

    /// Evaluation outcomes in action order.
    pub fn evaluation_outcomes(&self) -> Vec<&EvalResult> {
        self.records
            .iter()
            .filter_map(|r| r.eval_outcome.as_ref())
            .collect()
    }

    fn restore(records: Vec<ActionRecord>) -> Result<ActionMemory, MemoryError> {
        for (pos, record) in records.iter().enumerate() {
            if record.index != pos + 1 {
                return Err(MemoryError::NonContiguousIndex {
                    got: record.index,
                    expected: pos + 1,
                });
            }
            let has_outcome = record.eval_outcome.is_some();
            if has_outcome != (record.kind == ActionKind::ModelEvaluation) {
                return Err(MemoryError::OutcomeMismatch(record.kind.name().to_string()));
            }
        }
        Ok(ActionMemory { records })
    }
}

/// Rule hierarchy plus full revision history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleMemory {
    revisions: Vec<RuleTree>,
}

impl RuleMemory {
    pub fn new(initial: RuleTree) -> RuleMemory {
        RuleMemory {
            revisions: vec![initial],
        }
    }

    pub fn current(&self) -> Option<&RuleTree> {
        self.revisions.last()
    }

    pub fn revisions(&self) -> &[RuleTree] {
        &self.revisions
    }

    /// Installs a new revision, numbering it after the current one.
    pub fn push_revision(&mut self, mut tree: RuleTree, provenance: impl Into<String>) -> u64 {
        let next = self.current().map(|t| t.revision + 1).unwrap_or(1);
        tree.revision = next;
        tree.provenance = provenance.into();
        self.revisions.push(tree);
        next
    }
}

/// The agent's three memory stores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memories {
    pub confidence: ConfidenceMemory,
    pub rules: RuleMemory,
    pub actions: ActionMemory,
}

const CONFIDENCE_FILE: &str = "confidence.jsonl";
const ACTIONS_FILE: &str = "actions.jsonl";
const RULES_FILE: &str = "rules.txt";
const RULES_META_FILE: &str = "rules.meta.json";

#[derive(Serialize, Deserialize)]
struct RuleRevisionRecord {
    revision: u64,
    provenance: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RulesMeta {
    revisions: Vec<RuleRevisionRecord>,
}

impl Memories {
    /// Writes `confidence.jsonl`, `actions.jsonl`, `rules.txt`, and
    /// `rules.meta.json` into the run directory.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), MemoryError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| MemoryError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let write = |name: &str, contents: String| -> Result<(), MemoryError> {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|source| MemoryError::Io {
                path: path.display().to_string(),
                source,
            })
        };

        let mut confidence = String::new();
        for entry in self.confidence.entries() {
            confidence.push_str(&serde_json::to_string(entry).expect("entry serializes"));
            confidence.push('\n');
        }
        write(CONFIDENCE_FILE, confidence)?;

        let mut actions = String::new();
        for record in self.actions.records() {
            actions.push_str(&serde_json::to_string(record).expect("record serializes"));
            actions.push('\n');
        }
        write(ACTIONS_FILE, actions)?;

        let current_text = self
            .rules
            .current()
            .map(serialize_rules)
            .unwrap_or_default();
        write(RULES_FILE, current_text)?;

        let meta = RulesMeta {
            revisions: self
                .rules
                .revisions()
                .iter()
                .map(|tree| RuleRevisionRecord {
                    revision: tree.revision,
                    provenance: tree.provenance.clone(),
                    text: serialize_rules(tree),
                })
                .collect(),
        };
        write(
            RULES_META_FILE,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
    }

    /// Restores memories persisted by [`Memories::persist`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Memories, MemoryError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<(String, String), MemoryError> {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|source| MemoryError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok((text, path.display().to_string()))
        };

        let mut confidence = ConfidenceMemory::new();
        let (text, path) = read(CONFIDENCE_FILE)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ConfidenceEntry =
                serde_json::from_str(line).map_err(|e| MemoryError::Corrupt {
                    path: path.clone(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            confidence.set(entry).map_err(|e| MemoryError::Corrupt {
                path: path.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }

        let mut records = Vec::new();
        let (text, path) = read(ACTIONS_FILE)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ActionRecord =
                serde_json::from_str(line).map_err(|e| MemoryError::Corrupt {
                    path: path.clone(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        let actions = ActionMemory::restore(records)?;

        let (text, path) = read(RULES_META_FILE)?;
        let meta: RulesMeta = serde_json::from_str(&text).map_err(|e| MemoryError::Corrupt {
            path,
            line: 1,
            message: e.to_string(),
        })?;
        let mut rules = RuleMemory::default();
        for record in meta.revisions {
            let mut tree = if record.text.trim().is_empty() {
                RuleTree::empty()
            } else {
                parse_rule_text(&record.text)?
            };
            tree.revision = record.revision;
            tree.provenance = record.provenance;
            rules.revisions.push(tree);
        }

        Ok(Memories {
            confidence,
            rules,
            actions,
        })
    }
}
