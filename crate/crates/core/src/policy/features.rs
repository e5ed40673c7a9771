//! Hashed bag-of-tokens featurization of a history prefix.
//!
//! Tokens come from the goal sentence, the last two observations and a
//! bucketed step index. Lines of the form `[k] head | content` are treated
//! as enumerated choices: they emit position-tagged tokens that encode, in
//! thermometer form, how many content (and head) words occur in the goal
//! sentence, plus any parenthesized flags and a budget flag. Other
//! observation lines contribute only their first word, which marks the page
//! kind. Raw goal words are emitted only for environments whose action
//! slots name goal entities directly (see [`uses_goal_words`]).

use std::collections::{BTreeMap, BTreeSet};

use crate::env::{EnvId, PrefixView};
use crate::rng::fnv1a;

/// Per-bucket count cap.
pub const COUNT_CLIP: f64 = 8.0;
const STEP_BUCKETS: usize = 7;
const OVERLAP_CLIP: usize = 8;

/// Function words dropped from the goal sentence.
const STOP_WORDS: &[&str] = &[
    "a", "am", "an", "and", "for", "i", "in", "is", "it", "of", "on", "some", "than", "that",
    "the", "to", "with", "your",
];

/// Whether raw goal words become tokens. GridHouse slots are indexed by
/// object and receptacle kind, so the policy needs to know which kinds the
/// goal names. ShopSim slots are result ranks and option positions; there
/// the goal reaches the policy through overlap tokens only, and raw goal
/// words would merely let the rank columns memorize individual tasks.
pub fn uses_goal_words(env: EnvId) -> bool {
    match env {
        EnvId::ShopSim => false,
        EnvId::GridHouse | EnvId::Toy => true,
    }
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dot_column(&self, weights: &[f64], n_cols: usize, col: usize) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| v * weights[i as usize * n_cols + col])
            .sum()
    }

    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Bucket of a token: FNV-1a followed by a Fibonacci multiplicative hash.
pub fn bucket(token: &str, d: usize) -> usize {
    let h = fnv1a(token.as_bytes()).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ((u128::from(h) * d as u128) >> 64) as usize
}

/// Lowercased alphanumeric words; `$`, `.` and `-` stay inside words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '$' || c == '.' || c == '-'))
        .map(|w| w.trim_matches('.').to_lowercase())
        .filter(|w| !w.is_empty())
}

fn parse_number(w: &str) -> Option<f64> {
    w.trim_start_matches('$').parse::<f64>().ok().filter(|x| x.is_finite())
}

struct GoalContext {
    words: BTreeSet<String>,
    /// Largest number mentioned in the goal sentence, if any.
    limit: Option<f64>,
}

impl GoalContext {
    fn new(instruction_text: &str) -> Self {
        let first = instruction_text.lines().next().unwrap_or("");
        let words: BTreeSet<String> = words(first).collect();
        let limit = words.iter().filter_map(|w| parse_number(w)).reduce(f64::max);
        GoalContext { words, limit }
    }
}

/// Splits `"[k] rest"` into `(k, rest)`.
fn item_line(line: &str) -> Option<(usize, &str)> {
    let rest = line.strip_prefix('[')?;
    let close = rest.find(']')?;
    let k = rest[..close].parse().ok()?;
    Some((k, rest[close + 1..].trim()))
}

fn overlap(text: &str, goal: &GoalContext) -> usize {
    words(text)
        .collect::<BTreeSet<String>>()
        .intersection(&goal.words)
        .count()
        .min(OVERLAP_CLIP)
}

fn emit_item(tag: &str, k: usize, rest: &str, goal: &GoalContext, out: &mut Vec<String>) {
    let (head, content) = rest.split_once('|').unwrap_or(("", rest));
    let ov = overlap(content, goal);
    let hov = overlap(head, goal);
    let mut flags: Vec<String> = Vec::new();
    let mut s = rest;
    while let Some(open) = s.find('(') {
        let Some(len) = s[open..].find(')') else { break };
        flags.push(s[open + 1..open + len].trim().to_lowercase());
        s = &s[open + len + 1..];
    }
    if let Some(limit) = goal.limit {
        let price = words(content)
            .filter(|w| w.starts_with('$'))
            .find_map(|w| parse_number(&w));
        if let Some(p) = price {
            flags.push(if p <= limit { "within".into() } else { "over".into() });
        }
    }
    let base = format!("{tag}:item{k}");
    let mut stems = vec![base.clone()];
    stems.extend(flags.iter().map(|f| format!("{base}:{f}")));
    for stem in stems {
        out.extend((1..=ov).map(|j| format!("{stem}:ge{j}")));
        out.extend((1..=hov).map(|j| format!("{stem}:hge{j}")));
        out.push(stem);
    }
}

fn emit_observation(tag: &str, text: &str, goal: &GoalContext, out: &mut Vec<String>) {
    for line in text.lines() {
        match item_line(line) {
            Some((k, rest)) => emit_item(tag, k, rest, goal, out),
            None => {
                if let Some(w) = words(line).next() {
                    out.push(format!("{tag}:{w}"));
                }
            }
        }
    }
}

/// Feature tokens of a prefix, before hashing.
pub fn tokens(prefix: PrefixView<'_>) -> Vec<String> {
    let instruction = &prefix.instruction.text;
    let goal = GoalContext::new(instruction);
    let mut out = vec![
        "bias".to_string(),
        format!("step:{}", prefix.steps.len().min(STEP_BUCKETS)),
    ];
    if uses_goal_words(prefix.instruction.env_id) {
        out.extend(
            goal.words
                .iter()
                .filter(|w| parse_number(w).is_none() && !STOP_WORDS.contains(&w.as_str()))
                .map(|w| format!("u:{w}")),
        );
    }
    for line in instruction.lines().skip(1) {
        if let Some((k, rest)) = item_line(line) {
            emit_item("u", k, rest, &goal, &mut out);
        }
    }
    let n = prefix.steps.len();
    if n >= 1 {
        emit_observation("o1", &prefix.steps[n - 1].observation.text, &goal, &mut out);
    }
    if n >= 2 {
        emit_observation("o2", &prefix.steps[n - 2].observation.text, &goal, &mut out);
    }
    out
}

/// Policy tokens plus overlap tokens for the non-enumerated lines of the
/// latest observation, such as a product header. A value regressor needs
/// these to see what the last action led to; the policy does not, since its
/// slots already index the enumerated lines.
pub fn outcome_tokens(prefix: PrefixView<'_>) -> Vec<String> {
    let mut out = tokens(prefix);
    if let Some(last) = prefix.steps.last() {
        let goal = GoalContext::new(&prefix.instruction.text);
        for line in last.observation.text.lines().filter(|l| item_line(l).is_none()) {
            let mut rest = line.split_once(char::is_whitespace).map_or("", |(_, r)| r);
            // `id | head | content`: the identifier carries no goal words.
            if rest.matches('|').count() >= 2 {
                rest = rest.split_once('|').map_or(rest, |(_, r)| r.trim());
            }
            emit_item("o1h", 0, rest, &goal, &mut out);
        }
    }
    out
}

/// Hashed, clipped token counts of a prefix in `d` buckets.
pub fn featurize(prefix: PrefixView<'_>, d: usize) -> FeatureVector {
    hash_tokens(tokens(prefix), d)
}

/// [`featurize`] over [`outcome_tokens`].
pub fn featurize_outcome(prefix: PrefixView<'_>, d: usize) -> FeatureVector {
    hash_tokens(outcome_tokens(prefix), d)
}

fn hash_tokens(tokens: Vec<String>, d: usize) -> FeatureVector {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for t in tokens {
        *counts.entry(bucket(&t, d) as u32).or_insert(0.0) += 1.0;
    }
    let mut fv = FeatureVector::default();
    for (i, c) in counts {
        fv.indices.push(i);
        fv.values.push(c.min(COUNT_CLIP));
    }
    fv
}
