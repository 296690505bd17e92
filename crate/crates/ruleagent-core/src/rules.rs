//! The denoising-rule DSL: numbered `Rule-N.M(Label): description` outlines
//! parsed into a tree, typed predicates compiled from known threshold
//! phrasings, evaluation against loss traces, and tree merging.
//!
//! Descriptions that match no known phrasing degrade to inert prose instead
//! of failing the run; rule ids and nesting are strict. Leaf predicates are
//! the executable surface: an interaction is noisy when any leaf fires.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::stats::{median, nearest_rank_percentile, population_variance};
use crate::training::LossTrace;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("line {line}, column {column}: malformed rule id")]
    MalformedId { line: usize, column: usize },
    #[error("line {line}: malformed rule line: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate rule id {id}")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: rule {id} appears before its parent")]
    OrphanRule { id: String, line: usize },
    #[error("no rules found in text")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Dotted rule path, e.g. `1.2.1`. Components are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuleId(pub Vec<u32>);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "{}", parts.join("."))
    }
}

impl RuleId {
    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

/// Reference percentile for [`Predicate::RepeatedExceedance`]: the count
/// threshold rules always appear under a 95th-percentile parent, so the
/// standalone evaluation uses that same cut.
pub const DEFAULT_EXCEEDANCE_PERCENTILE: f64 = 0.95;

/// Default outlier factor when a median-comparison rule names none.
pub const DEFAULT_MEDIAN_FACTOR: f64 = 3.0;

/// Executable (or inert prose) condition compiled from a rule description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    /// Latest recorded loss exceeds the nearest-rank `p` percentile of the
    /// population.
    PercentileThreshold { p: f64 },
    /// At least `times` recorded losses exceed the
    /// [`DEFAULT_EXCEEDANCE_PERCENTILE`] population percentile.
    RepeatedExceedance { times: usize },
    /// Population variance of the interaction's own trace exceeds `v`.
    VarianceThreshold { v: f64 },
    /// The trace crosses from above `upper` to below `lower` (or back)
    /// between consecutive recordings at least `times` times.
    OscillationBounds {
        upper: f64,
        lower: f64,
        times: usize,
    },
    /// Latest loss is above `factor * median` or below `median / factor` of
    /// the population.
    MedianOutlier { factor: f64 },
    /// Unstructured description; never fires.
    Prose { text: String },
}

impl Predicate {
    pub fn is_executable(&self) -> bool {
        !matches!(self, Predicate::Prose { .. })
    }

    /// A description this predicate compiles back from, used when emitting
    /// rules that were built programmatically rather than parsed.
    pub fn canonical_description(&self) -> String {
        match self {
            Predicate::PercentileThreshold { p } => {
                let n = (p * 100.0).round() as u32;
                format!(
                    "The noisy sample's loss value exceeds the {n}{} percentile threshold.",
                    ordinal_suffix(n)
                )
            }
            Predicate::RepeatedExceedance { times } => format!(
                "If the loss of a sample exceeds the threshold {times} times across multiple trainings, it is classified as a noisy sample."
            ),
            Predicate::VarianceThreshold { v } => format!(
                "If the variance exceeds a threshold {v} within a specific number of time intervals, the sample is flagged as noisy."
            ),
            Predicate::OscillationBounds {
                upper,
                lower,
                times,
            } => format!(
                "If the loss value oscillates beyond set upper bound ({upper}) and lower bound ({lower}) {times} times, it is marked as a noisy sample."
            ),
            Predicate::MedianOutlier { factor } => {
                if *factor == DEFAULT_MEDIAN_FACTOR {
                    "The loss value is significantly higher or lower than the median loss of similar interactions.".to_string()
                } else {
                    format!(
                        "The loss value is more than {factor} times higher or lower than the median loss of similar interactions."
                    )
                }
            }
            Predicate::Prose { text } => text.clone(),
        }
    }
}

fn ordinal_suffix(n: u32) -> &'static str {
    match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    }
}

struct Patterns {
    percentile: Regex,
    exceedance: Regex,
    variance: Regex,
    oscillation: Regex,
    median_factor: Regex,
    median: Regex,
}

fn patterns() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(|| Patterns {
        percentile: Regex::new(r"exceeds the (\d{1,2})(?:st|nd|rd|th) percentile").unwrap(),
        exceedance: Regex::new(r"exceeds the threshold (\w+) times").unwrap(),
        variance: Regex::new(r"variance exceeds a threshold (?:of )?([0-9]*\.?[0-9]+)").unwrap(),
        oscillation: Regex::new(
            r"upper bound \(?([0-9]*\.?[0-9]+)\)? and lower bound \(?([0-9]*\.?[0-9]+)\)?\D*?(\w+) times",
        )
        .unwrap(),
        median_factor: Regex::new(
            r"([0-9]*\.?[0-9]+)\s*(?:times|x)\s+higher or lower than the median",
        )
        .unwrap(),
        median: Regex::new(r"higher or lower than the median").unwrap(),
    })
}

fn parse_count(word: &str) -> Option<usize> {
    if let Ok(n) = word.parse::<usize>() {
        return (n >= 1).then_some(n);
    }
    let n = match word.to_ascii_lowercase().as_str() {
        "one" => 1,
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        _ => return None,
    };
    Some(n)
}

/// Compiles a rule description into a typed predicate, or prose when no
/// known threshold phrasing matches.
pub fn compile_predicate(description: &str) -> Predicate {
    let pats = patterns();
    if let Some(caps) = pats.oscillation.captures(description) {
        let upper: f64 = caps[1].parse().unwrap_or(f64::NAN);
        let lower: f64 = caps[2].parse().unwrap_or(f64::NAN);
        if let Some(times) = parse_count(&caps[3]) {
            if upper.is_finite() && lower.is_finite() && upper > lower {
                return Predicate::OscillationBounds {
                    upper,
                    lower,
                    times,
                };
            }
        }
    }
    if let Some(caps) = pats.percentile.captures(description) {
        if let Ok(n) = caps[1].parse::<u32>() {
            if (1..=99).contains(&n) {
                return Predicate::PercentileThreshold {
                    p: f64::from(n) / 100.0,
                };
            }
        }
    }
    if let Some(caps) = pats.exceedance.captures(description) {
        if let Some(times) = parse_count(&caps[1]) {
            return Predicate::RepeatedExceedance { times };
        }
    }
    if let Some(caps) = pats.variance.captures(description) {
        if let Ok(v) = caps[1].parse::<f64>() {
            if v >= 0.0 {
                return Predicate::VarianceThreshold { v };
            }
        }
    }
    if let Some(caps) = pats.median_factor.captures(description) {
        if let Ok(factor) = caps[1].parse::<f64>() {
            if factor > 0.0 {
                return Predicate::MedianOutlier { factor };
            }
        }
    }
    if pats.median.is_match(description) {
        return Predicate::MedianOutlier {
            factor: DEFAULT_MEDIAN_FACTOR,
        };
    }
    Predicate::Prose {
        text: description.to_string(),
    }
}

/// One rule with its taxonomy children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleNode {
    pub id: RuleId,
    pub label: String,
    pub description: String,
    pub predicate: Predicate,
    pub children: Vec<RuleNode>,
}

/// The rule memory's current hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTree {
    pub roots: Vec<RuleNode>,
    pub revision: u64,
    pub provenance: String,
}

impl RuleTree {
    pub fn empty() -> RuleTree {
        RuleTree {
            roots: Vec::new(),
            revision: 0,
            provenance: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn node_count(&self) -> usize {
        fn count(nodes: &[RuleNode]) -> usize {
            nodes.iter().map(|n| 1 + count(&n.children)).sum()
        }
        count(&self.roots)
    }

    pub fn ids(&self) -> Vec<RuleId> {
        let mut out = Vec::new();
        fn walk(nodes: &[RuleNode], out: &mut Vec<RuleId>) {
            for node in nodes {
                out.push(node.id.clone());
                walk(&node.children, out);
            }
        }
        walk(&self.roots, &mut out);
        out
    }

    pub fn find(&self, id: &RuleId) -> Option<&RuleNode> {
        let mut nodes = &self.roots;
        let mut found = None;
        for depth in 0..id.0.len() {
            let prefix = &id.0[..=depth];
            let node = nodes.iter().find(|n| n.id.0 == prefix)?;
            nodes = &node.children;
            found = Some(node);
        }
        found
    }

    /// Leaves in depth-first order: the executable surface of the tree.
    pub fn leaves(&self) -> Vec<&RuleNode> {
        let mut out = Vec::new();
        fn walk<'a>(nodes: &'a [RuleNode], out: &mut Vec<&'a RuleNode>) {
            for node in nodes {
                if node.children.is_empty() {
                    out.push(node);
                } else {
                    walk(&node.children, out);
                }
            }
        }
        walk(&self.roots, &mut out);
        out
    }
}

/// Parses a numbered rule outline. Lines not containing a `Rule-` marker are
/// ignored as surrounding prose; rule-bearing lines must be well formed and
/// well nested. Sibling ids are renumbered contiguously afterwards.
pub fn parse_rule_text(text: &str) -> Result<RuleTree, RuleError> {
    struct RawRule {
        id: Vec<u32>,
        label: String,
        description: String,
        line: usize,
    }

    let mut raw: Vec<RawRule> = Vec::new();
    let mut seen: BTreeMap<Vec<u32>, usize> = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let Some(start) = line.find("Rule-") else {
            continue;
        };
        let column = start + "Rule-".len();
        let rest = &line[column..];

        // Id: digits separated by single dots, terminated by '('.
        let id_len = rest
            .find(|c: char| !c.is_ascii_digit() && c != '.')
            .unwrap_or(rest.len());
        let id_text = &rest[..id_len];
        let malformed_id = || RuleError::MalformedId {
            line: line_num,
            column: column + 1,
        };
        if id_text.is_empty() {
            return Err(malformed_id());
        }
        let mut id = Vec::new();
        for part in id_text.split('.') {
            let component: u32 = part.parse().map_err(|_| malformed_id())?;
            if component == 0 {
                return Err(malformed_id());
            }
            id.push(component);
        }

        let after_id = &rest[id_len..];
        let Some(after_paren) = after_id.strip_prefix('(') else {
            return Err(RuleError::MalformedLine {
                line: line_num,
                message: "expected `(` and a label after the rule id".into(),
            });
        };
        let Some(close) = after_paren.find(')') else {
            return Err(RuleError::MalformedLine {
                line: line_num,
                message: "unterminated rule label".into(),
            });
        };
        let label = after_paren[..close].trim().to_string();
        if label.is_empty() {
            return Err(RuleError::MalformedLine {
                line: line_num,
                message: "empty rule label".into(),
            });
        }
        let after_label = &after_paren[close + 1..];
        let description = after_label
            .trim_start_matches(['*', '_'])
            .trim_start()
            .strip_prefix(':')
            .map(|d| d.trim().trim_end_matches(['*', '_']).trim().to_string())
            .unwrap_or_default();

        if seen.insert(id.clone(), line_num).is_some() {
            return Err(RuleError::DuplicateId {
                id: RuleId(id).to_string(),
                line: line_num,
            });
        }
        if id.len() > 1 && !seen.contains_key(&id[..id.len() - 1]) {
            return Err(RuleError::OrphanRule {
                id: RuleId(id).to_string(),
                line: line_num,
            });
        }
        raw.push(RawRule {
            id,
            label,
            description,
            line: line_num,
        });
    }

    if raw.is_empty() {
        return Err(RuleError::EmptyInput);
    }

    // Assemble in input order; parents are guaranteed to precede children.
    fn insert(nodes: &mut Vec<RuleNode>, rule: &RawRule, depth: usize) -> Result<(), RuleError> {
        if depth == rule.id.len() - 1 {
            nodes.push(RuleNode {
                id: RuleId(rule.id.clone()),
                label: rule.label.clone(),
                description: rule.description.clone(),
                predicate: compile_predicate(&rule.description),
                children: Vec::new(),
            });
            return Ok(());
        }
        let parent = nodes
            .iter_mut()
            .find(|n| n.id.0 == rule.id[..depth + 1])
            .ok_or_else(|| RuleError::OrphanRule {
                id: RuleId(rule.id.clone()).to_string(),
                line: rule.line,
            })?;
        insert(&mut parent.children, rule, depth + 1)
    }

    let mut roots: Vec<RuleNode> = Vec::new();
    for rule in &raw {
        insert(&mut roots, rule, 0)?;
    }

    canonicalize(&mut roots, &[]);
    Ok(RuleTree {
        roots,
        revision: 1,
        provenance: "parsed".to_string(),
    })
}

/// Renumbers sibling ids contiguously from 1, preserving order.
fn canonicalize(nodes: &mut [RuleNode], prefix: &[u32]) {
    for (pos, node) in nodes.iter_mut().enumerate() {
        let mut id = prefix.to_vec();
        id.push(pos as u32 + 1);
        node.id = RuleId(id.clone());
        canonicalize(&mut node.children, &id);
    }
}

/// Canonical numbered outline, depth-first with two-space indentation.
/// Parsing the output reproduces the tree structurally.
pub fn serialize(tree: &RuleTree) -> String {
    let mut out = String::new();
    fn walk(nodes: &[RuleNode], depth: usize, out: &mut String) {
        for node in nodes {
            let description = if node.description.is_empty() {
                node.predicate.canonical_description()
            } else {
                node.description.clone()
            };
            out.push_str(&format!(
                "{}Rule-{}({}): {}\n",
                "  ".repeat(depth),
                node.id,
                node.label,
                description
            ));
            walk(&node.children, depth + 1, out);
        }
    }
    walk(&tree.roots, 0, &mut out);
    out
}

/// Evaluates one predicate against one interaction's recorded losses and the
/// population of latest losses across all interactions.
pub fn evaluate_predicate<S: Scalar>(
    predicate: &Predicate,
    trace: &[S],
    population: &[S],
) -> Result<bool, RuleError> {
    if trace.is_empty() {
        return Err(RuleError::InvalidArgument(
            "predicate evaluation needs a non-empty trace".into(),
        ));
    }
    let need_population = |what: &str| {
        if population.is_empty() {
            Err(RuleError::InvalidArgument(format!(
                "{what} needs a non-empty population"
            )))
        } else {
            Ok(())
        }
    };
    let latest = *trace.last().expect("non-empty trace");
    Ok(match predicate {
        Predicate::PercentileThreshold { p } => {
            if !(0.0 < *p && *p < 1.0) {
                return Err(RuleError::InvalidArgument(format!(
                    "percentile {p} outside (0, 1)"
                )));
            }
            need_population("percentile threshold")?;
            latest > nearest_rank_percentile(population, *p)
        }
        Predicate::RepeatedExceedance { times } => {
            need_population("exceedance count")?;
            let threshold = nearest_rank_percentile(population, DEFAULT_EXCEEDANCE_PERCENTILE);
            trace.iter().filter(|&&v| v > threshold).count() >= *times
        }
        Predicate::VarianceThreshold { v } => population_variance(trace).as_f64() > *v,
        Predicate::OscillationBounds {
            upper,
            lower,
            times,
        } => {
            if upper <= lower {
                return Err(RuleError::InvalidArgument(format!(
                    "oscillation bounds {upper} <= {lower}"
                )));
            }
            let up = S::from_f64(*upper);
            let low = S::from_f64(*lower);
            let crossings = trace
                .windows(2)
                .filter(|w| (w[0] > up && w[1] < low) || (w[0] < low && w[1] > up))
                .count();
            crossings >= *times
        }
        Predicate::MedianOutlier { factor } => {
            if *factor <= 0.0 {
                return Err(RuleError::InvalidArgument(format!(
                    "median factor {factor} must be positive"
                )));
            }
            need_population("median comparison")?;
            let med = median(population).as_f64();
            let latest = latest.as_f64();
            latest > factor * med || latest < med / factor
        }
        Predicate::Prose { .. } => false,
    })
}

/// Verdict for one interaction: noisy iff any executable leaf fired, with
/// the firing rule ids for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub noisy: bool,
    pub fired: Vec<RuleId>,
}

/// Applies the tree to every interaction's trace. Inner nodes act as
/// taxonomy labels; leaves are evaluated as a disjunction.
pub fn apply_rules<S: Scalar>(
    tree: &RuleTree,
    traces: &LossTrace<S>,
    population: &[S],
) -> Result<Vec<Verdict>, RuleError> {
    let leaves = tree.leaves();
    for leaf in &leaves {
        if !leaf.predicate.is_executable() {
            log::debug!("rule {} is prose; it never fires", leaf.id);
        }
    }
    (0..traces.len())
        .map(|idx| {
            let series = traces.values(idx);
            let mut fired = Vec::new();
            for leaf in &leaves {
                if leaf.predicate.is_executable()
                    && evaluate_predicate(&leaf.predicate, &series, population)?
                {
                    fired.push(leaf.id.clone());
                }
            }
            Ok(Verdict {
                noisy: !fired.is_empty(),
                fired,
            })
        })
        .collect()
}

/// Merges two trees level by level, matching nodes by label. On a label
/// match the newer tree's predicate and description win and the children
/// merge recursively; unmatched nodes from either side are kept. Ids are
/// renumbered canonically.
pub fn merge(a: &RuleTree, b: &RuleTree) -> RuleTree {
    fn merge_lists(a: &[RuleNode], b: &[RuleNode]) -> Vec<RuleNode> {
        let mut out: Vec<RuleNode> = Vec::new();
        for node in a {
            match b.iter().find(|candidate| candidate.label == node.label) {
                Some(newer) => out.push(RuleNode {
                    id: RuleId(Vec::new()),
                    label: newer.label.clone(),
                    description: newer.description.clone(),
                    predicate: newer.predicate.clone(),
                    children: merge_lists(&node.children, &newer.children),
                }),
                None => out.push(node.clone()),
            }
        }
        for node in b {
            if !a.iter().any(|existing| existing.label == node.label) {
                out.push(node.clone());
            }
        }
        out
    }

    let mut roots = merge_lists(&a.roots, &b.roots);
    canonicalize(&mut roots, &[]);
    RuleTree {
        roots,
        revision: a.revision.max(b.revision),
        provenance: b.provenance.clone(),
    }
}

/// A complete hierarchy exercising every predicate type, used by tests and
/// the demo backend script.
pub const DEMO_RULE_OUTLINE: &str = "\
Rule-1(Value-Related): The confidence of the interaction data is related to the loss value of the interaction data, and the one with a large loss is more likely to be a noisy sample.
  Rule-1.1(Value Threshold): The noisy sample's loss value exceeds the 95th percentile threshold.
    Rule-1.1.1(Multiple Exceedances): If the loss of a sample exceeds the threshold three times across multiple trainings, it is classified as a noisy sample.
Rule-2(Fluctuation-Related): An interaction is considered noisy if the loss value shows a pattern of significant fluctuations over time.
  Rule-2.1(High Variance): The loss value demonstrates high variance over consecutive time periods.
    Rule-2.1.1(Variance Threshold): If the variance exceeds a threshold 0.5 within a specific number of time intervals, the sample is flagged as noisy.
  Rule-2.2(Oscillation): The loss value alternates between extreme highs and lows without a consistent trend.
    Rule-2.2.1(Oscillation Threshold): If the loss value oscillates beyond set upper bound (0.8) and lower bound (0.06) 4 times, it is marked as a noisy sample.
Rule-3(Outlier-Related): An interaction is considered noisy if the loss value is an outlier compared to the surrounding loss values in the dataset.
  Rule-3.1(Median Comparison): The loss value is significantly higher or lower than the median loss of similar interactions.
";
