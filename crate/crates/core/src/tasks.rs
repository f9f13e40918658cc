//! Synthetic in-context-learning tasks.
//!
//! Every generator is a pure function of `(spec, seed)`. Each sample records
//! which positions are supervised, the next-token target at each, and how
//! many times that target token already occurred at or before the position.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seeds::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub targets: Vec<u32>,
    /// One entry per target: prior occurrences of the target token in
    /// `tokens[..=position]`.
    #[serde(rename = "k")]
    pub occurrence_count: Vec<u32>,
    pub task_tag: String,
}

impl TaskSample {
    fn supervised(tokens: Vec<u32>, positions: Vec<usize>, tag: &str) -> Self {
        let targets: Vec<u32> = positions.iter().map(|&p| tokens[p + 1]).collect();
        let occurrence_count = count_prior(&tokens, &positions, &targets);
        Self { tokens, target_positions: positions, targets, occurrence_count, task_tag: tag.into() }
    }

    fn with_targets(tokens: Vec<u32>, positions: Vec<usize>, targets: Vec<u32>, tag: &str) -> Self {
        let occurrence_count = count_prior(&tokens, &positions, &targets);
        Self { tokens, target_positions: positions, targets, occurrence_count, task_tag: tag.into() }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let n = self.targets.len();
        if self.target_positions.len() != n || self.occurrence_count.len() != n {
            return Err(LabError::Contract("target arrays differ in length".into()));
        }
        if self.target_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Contract("target positions must increase".into()));
        }
        if self.target_positions.last().is_some_and(|&p| p >= self.tokens.len()) {
            return Err(LabError::Index("target position past the sequence".into()));
        }
        if self.tokens.iter().chain(&self.targets).any(|&t| t as usize >= vocab) {
            return Err(LabError::Index(format!("token outside vocab {vocab}")));
        }
        Ok(())
    }
}

/// Single forward scan with a running histogram.
fn count_prior(tokens: &[u32], positions: &[usize], targets: &[u32]) -> Vec<u32> {
    let mut seen: HashMap<u32, u32> = HashMap::new();
    let mut out = Vec::with_capacity(positions.len());
    let mut next = 0;
    for (t, &tok) in tokens.iter().enumerate() {
        *seen.entry(tok).or_default() += 1;
        while next < positions.len() && positions[next] == t {
            out.push(seen.get(&targets[next]).copied().unwrap_or(0));
            next += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Keys drawn without replacement from `[key_lo, key_hi)`, values
    /// uniformly from `[val_lo, val_hi)`; the ranges may overlap.
    AssocRecall { n_pairs: usize, key_lo: u32, key_hi: u32, val_lo: u32, val_hi: u32 },
    Induction { vocab: usize, period_choices: Vec<usize>, length: usize },
    AnchoredChains {
        vocab: usize,
        anchor_id: u32,
        chain_len: usize,
        chains_per_seq: usize,
        insert_p: f64,
        query_p: f64,
        noise_p: f64,
        seq_len: usize,
    },
    Majority { vocab: usize, length: usize },
    Parity { length: usize },
    GlobalCount { vocab: usize, length: usize },
}

impl TaskSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            TaskSpec::AssocRecall { .. } => "assoc_recall",
            TaskSpec::Induction { .. } => "induction",
            TaskSpec::AnchoredChains { .. } => "anchored_chains",
            TaskSpec::Majority { .. } => "majority",
            TaskSpec::Parity { .. } => "parity",
            TaskSpec::GlobalCount { .. } => "global_count",
        }
    }

    /// Model vocabulary needed, special tokens included.
    pub fn vocab_size(&self) -> usize {
        match *self {
            TaskSpec::AssocRecall { key_hi, val_hi, .. } => key_hi.max(val_hi) as usize,
            TaskSpec::Induction { vocab, .. } => vocab,
            TaskSpec::AnchoredChains { vocab, .. } => vocab,
            TaskSpec::Majority { vocab, .. } => vocab + 1,
            TaskSpec::Parity { .. } => 3,
            // content, SEP, then count classes 0..=length
            TaskSpec::GlobalCount { vocab, length } => vocab + 1 + length + 1,
        }
    }

    /// Length of every sequence the task produces.
    pub fn seq_len(&self) -> usize {
        match *self {
            TaskSpec::AssocRecall { n_pairs, .. } => 2 * n_pairs + 1,
            TaskSpec::Induction { length, .. } => length,
            TaskSpec::AnchoredChains { seq_len, .. } => seq_len,
            TaskSpec::Majority { length, .. } | TaskSpec::Parity { length } => length + 1,
            TaskSpec::GlobalCount { length, .. } => length + 2,
        }
    }

    /// Classification tasks ask for one answer; accuracy there is
    /// per-sample rather than per-token.
    pub fn chance_accuracy(&self) -> f64 {
        match *self {
            TaskSpec::AssocRecall { val_lo, val_hi, .. } => 1.0 / (val_hi - val_lo) as f64,
            TaskSpec::Induction { vocab, .. } => 1.0 / vocab as f64,
            TaskSpec::AnchoredChains { vocab, .. } => 1.0 / (vocab - 1) as f64,
            TaskSpec::Majority { vocab, .. } => 1.0 / vocab as f64,
            TaskSpec::Parity { .. } => 0.5,
            TaskSpec::GlobalCount { length, .. } => 1.0 / (length + 1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        match self {
            &TaskSpec::AssocRecall { n_pairs, key_lo, key_hi, val_lo, val_hi } => {
                if n_pairs == 0 {
                    return bad("n_pairs must be ≥ 1".into());
                }
                if key_lo >= key_hi || val_lo >= val_hi {
                    return bad("empty key or value range".into());
                }
                if ((key_hi - key_lo) as usize) < n_pairs {
                    return Err(LabError::Generation(format!(
                        "key range [{key_lo},{key_hi}) too small for {n_pairs} unique keys"
                    )));
                }
            }
            TaskSpec::Induction { vocab, period_choices, length } => {
                if period_choices.is_empty() {
                    return bad("period_choices is empty".into());
                }
                for &p in period_choices {
                    if p == 0 || p > *length {
                        return bad(format!("period {p} must lie in 1..={length}"));
                    }
                    if p > *vocab {
                        return Err(LabError::Generation(format!(
                            "period {p} needs {p} distinct tokens, vocab is {vocab}"
                        )));
                    }
                }
            }
            &TaskSpec::AnchoredChains {
                vocab,
                anchor_id,
                chain_len,
                chains_per_seq,
                insert_p,
                query_p,
                noise_p,
                seq_len,
            } => {
                if (anchor_id as usize) >= vocab {
                    return bad(format!("anchor {anchor_id} outside vocab {vocab}"));
                }
                if chain_len == 0 || chains_per_seq == 0 {
                    return bad("chain_len and chains_per_seq must be ≥ 1".into());
                }
                for p in [insert_p, query_p, noise_p] {
                    if !(p.is_finite() && p >= 0.0) {
                        return bad("event probabilities must be finite and ≥ 0".into());
                    }
                }
                if insert_p <= 0.0 || (insert_p + query_p + noise_p - 1.0).abs() > 1e-9 {
                    return bad("insert_p > 0 and insert_p + query_p + noise_p = 1 required".into());
                }
                if chain_len + 1 >= seq_len {
                    return Err(LabError::Generation(format!(
                        "chain of {} tokens leaves no room in seq_len {seq_len}",
                        chain_len + 1
                    )));
                }
                if vocab - 1 < chain_len * chains_per_seq + 1 {
                    return Err(LabError::Generation(format!(
                        "content vocab {} cannot hold {chains_per_seq} disjoint chains of {chain_len} plus noise",
                        vocab - 1
                    )));
                }
            }
            &TaskSpec::Majority { vocab, length } => {
                if vocab < 2 || length == 0 {
                    return bad("majority needs vocab ≥ 2 and length ≥ 1".into());
                }
            }
            &TaskSpec::Parity { length } => {
                if length == 0 {
                    return bad("parity needs length ≥ 1".into());
                }
            }
            &TaskSpec::GlobalCount { vocab, length } => {
                if vocab == 0 || length == 0 {
                    return bad("global count needs vocab ≥ 1 and length ≥ 1".into());
                }
            }
        }
        Ok(())
    }

    /// Draw one sample from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        match self {
            &TaskSpec::AssocRecall { n_pairs, key_lo, key_hi, val_lo, val_hi } => {
                let keys = rand::seq::index::sample(rng, (key_hi - key_lo) as usize, n_pairs);
                let mut tokens = Vec::with_capacity(2 * n_pairs + 1);
                let mut values = Vec::with_capacity(n_pairs);
                for k in keys.iter() {
                    let v = rng.random_range(val_lo..val_hi);
                    tokens.push(key_lo + k as u32);
                    tokens.push(v);
                    values.push(v);
                }
                let i = rng.random_range(0..n_pairs);
                tokens.push(tokens[2 * i]);
                let q = tokens.len() - 1;
                Ok(TaskSample::with_targets(tokens, vec![q], vec![values[i]], self.tag()))
            }
            TaskSpec::Induction { vocab, period_choices, length } => {
                let p = *period_choices.choose(rng).expect("validated non-empty");
                let pattern: Vec<u32> = rand::seq::index::sample(rng, *vocab, p)
                    .iter()
                    .map(|t| t as u32)
                    .collect();
                let tokens: Vec<u32> = (0..*length).map(|t| pattern[t % p]).collect();
                // from t = p on, the current token has occurred before and
                // what followed it is determined
                let positions: Vec<usize> = (p..length.saturating_sub(1)).collect();
                Ok(TaskSample::supervised(tokens, positions, self.tag()))
            }
            TaskSpec::AnchoredChains { .. } => Ok(self.anchored_sample(rng)?.0),
            &TaskSpec::Majority { vocab, length } => {
                let (seq, winner) = loop {
                    let seq: Vec<u32> = (0..length).map(|_| rng.random_range(0..vocab as u32)).collect();
                    if let Some(w) = unique_mode(&seq, vocab) {
                        break (seq, w);
                    }
                };
                let mut tokens = seq;
                tokens.push(vocab as u32);
                Ok(TaskSample::with_targets(tokens, vec![length], vec![winner], self.tag()))
            }
            &TaskSpec::Parity { length } => {
                let mut tokens: Vec<u32> = (0..length).map(|_| rng.random_range(0..2)).collect();
                let parity = tokens.iter().sum::<u32>() % 2;
                tokens.push(2);
                Ok(TaskSample::with_targets(tokens, vec![length], vec![parity], self.tag()))
            }
            &TaskSpec::GlobalCount { vocab, length } => {
                let mut tokens: Vec<u32> = (0..length).map(|_| rng.random_range(0..vocab as u32)).collect();
                let q = rng.random_range(0..vocab as u32);
                let count = tokens.iter().filter(|&&t| t == q).count() as u32;
                tokens.push(vocab as u32);
                tokens.push(q);
                let target = vocab as u32 + 1 + count;
                Ok(TaskSample::with_targets(tokens, vec![length + 1], vec![target], self.tag()))
            }
        }
    }

    /// Anchored-chain sample together with the raw event draws that built it.
    pub fn anchored_sample(&self, rng: &mut ChaCha8Rng) -> Result<(TaskSample, Vec<ChainEvent>)> {
        let &TaskSpec::AnchoredChains {
            vocab,
            anchor_id,
            chain_len,
            chains_per_seq,
            insert_p,
            query_p,
            seq_len,
            ..
        } = self
        else {
            return Err(LabError::Contract("anchored_sample on a non-chain task".into()));
        };
        let mut tokens: Vec<u32> = Vec::with_capacity(seq_len);
        let mut positions = Vec::new();
        let mut chains: Vec<Vec<u32>> = Vec::new();
        let mut events = Vec::new();
        let content: Vec<u32> = (0..vocab as u32).filter(|&t| t != anchor_id).collect();

        while tokens.len() < seq_len {
            let u: f64 = rng.random();
            let drawn = if u < insert_p {
                ChainEvent::Insert
            } else if u < insert_p + query_p {
                ChainEvent::Query
            } else {
                ChainEvent::Noise
            };
            events.push(drawn);
            let room = seq_len - tokens.len();
            let can_insert = chains.len() < chains_per_seq && room > chain_len;
            let action = match drawn {
                ChainEvent::Insert if can_insert => ChainEvent::Insert,
                ChainEvent::Insert | ChainEvent::Query if !chains.is_empty() && room > 1 => {
                    ChainEvent::Query
                }
                _ => ChainEvent::Noise,
            };
            match action {
                ChainEvent::Insert => {
                    // prefer tokens absent from the sequence so far so a new
                    // chain's contents really are new
                    let present: HashSet<u32> = tokens.iter().copied().collect();
                    let active: HashSet<u32> = chains.iter().flatten().copied().collect();
                    let fresh: Vec<u32> = content.iter().copied().filter(|t| !present.contains(t)).collect();
                    let pool = if fresh.len() >= chain_len {
                        fresh
                    } else {
                        content.iter().copied().filter(|t| !active.contains(t)).collect()
                    };
                    let mut chain = vec![anchor_id];
                    chain.extend(pool.choose_multiple(rng, chain_len).copied());
                    push_chain(&mut tokens, &mut positions, &chain, seq_len);
                    chains.push(chain);
                }
                ChainEvent::Query => {
                    let chain = chains.choose(rng).expect("non-empty").clone();
                    push_chain(&mut tokens, &mut positions, &chain, seq_len);
                }
                ChainEvent::Noise => {
                    let active: HashSet<u32> = chains.iter().flatten().copied().collect();
                    let pool: Vec<u32> = content.iter().copied().filter(|t| !active.contains(t)).collect();
                    tokens.push(*pool.choose(rng).expect("validated spare noise token"));
                }
            }
        }
        Ok((TaskSample::supervised(tokens, positions, self.tag()), events))
    }
}

/// Outcome of one event draw in the anchored-chain generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainEvent {
    Insert,
    Query,
    Noise,
}

/// Append a chain (possibly truncated at the sequence end), supervising
/// every position whose successor is chain content.
fn push_chain(tokens: &mut Vec<u32>, positions: &mut Vec<usize>, chain: &[u32], seq_len: usize) {
    let take = chain.len().min(seq_len - tokens.len());
    let start = tokens.len();
    tokens.extend_from_slice(&chain[..take]);
    positions.extend(start..start + take - 1);
}

fn unique_mode(seq: &[u32], vocab: usize) -> Option<u32> {
    let mut counts = vec![0usize; vocab];
    for &t in seq {
        counts[t as usize] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (w, _) = winners.next()?;
    winners.next().is_none().then_some(w as u32)
}

/// `n` samples from the stream seeded by `seed`.
pub fn generate(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    spec.validate()?;
    let mut rng = rng_for(seed, spec.tag());
    (0..n).map(|_| spec.sample(&mut rng)).collect()
}

pub fn gen_assoc_recall(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "assoc_recall")?;
    generate(spec, seed, n)
}

pub fn gen_induction(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "induction")?;
    generate(spec, seed, n)
}

pub fn gen_anchored_chains(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "anchored_chains")?;
    generate(spec, seed, n)
}

pub fn gen_majority(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "majority")?;
    generate(spec, seed, n)
}

pub fn gen_parity(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "parity")?;
    generate(spec, seed, n)
}

pub fn gen_global_count(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    expect_kind(spec, "global_count")?;
    generate(spec, seed, n)
}

fn expect_kind(spec: &TaskSpec, kind: &str) -> Result<()> {
    if spec.tag() == kind {
        Ok(())
    } else {
        Err(LabError::Contract(format!("expected a {kind} spec, got {}", spec.tag())))
    }
}

/// Held-out set plus a training stream that never reproduces a held-out
/// sample.
pub struct Split {
    pub test: Vec<TaskSample>,
    held_out: HashSet<Vec<u32>>,
    spec: TaskSpec,
    rng: ChaCha8Rng,
}

impl Split {
    pub fn new(spec: &TaskSpec, seed: u64, n_test: usize) -> Result<Self> {
        spec.validate()?;
        let mut test_rng = rng_for(seed, &format!("{}/test", spec.tag()));
        let test: Vec<TaskSample> =
            (0..n_test).map(|_| spec.sample(&mut test_rng)).collect::<Result<_>>()?;
        let held_out = test.iter().map(|s| s.tokens.clone()).collect();
        Ok(Self { test, held_out, spec: spec.clone(), rng: rng_for(seed, &format!("{}/train", spec.tag())) })
    }

    /// Next training sample, rejecting any that collide with the test set.
    pub fn next_train(&mut self) -> Result<TaskSample> {
        for _ in 0..10_000 {
            let s = self.spec.sample(&mut self.rng)?;
            if !self.held_out.contains(&s.tokens) {
                return Ok(s);
            }
        }
        Err(LabError::Generation("training stream keeps colliding with the test set".into()))
    }

    pub fn train_batch(&mut self, n: usize) -> Result<Vec<TaskSample>> {
        (0..n).map(|_| self.next_train()).collect()
    }
}

pub fn write_jsonl(samples: &[TaskSample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use rand::seq::SliceRandom;

    fn chains_spec() -> TaskSpec {
        TaskSpec::AnchoredChains {
            vocab: 128,
            anchor_id: 127,
            chain_len: 10,
            chains_per_seq: 4,
            insert_p: 0.4,
            query_p: 0.4,
            noise_p: 0.2,
            seq_len: 96,
        }
    }

    fn all_specs() -> Vec<TaskSpec> {
        vec![
            TaskSpec::AssocRecall { n_pairs: 8, key_lo: 1, key_hi: 100, val_lo: 100, val_hi: 200 },
            TaskSpec::Induction { vocab: 64, period_choices: vec![2, 3, 5], length: 24 },
            chains_spec(),
            TaskSpec::Majority { vocab: 8, length: 15 },
            TaskSpec::Parity { length: 12 },
            TaskSpec::GlobalCount { vocab: 6, length: 12 },
        ]
    }

    /// Independent quadratic recount: occurrences of the target in the
    /// prefix ending at the position.
    fn recount(s: &TaskSample) -> Vec<u32> {
        s.target_positions
            .iter()
            .zip(&s.targets)
            .map(|(&p, &y)| s.tokens[..=p].iter().filter(|&&t| t == y).count() as u32)
            .collect()
    }

    #[test]
    fn samples_are_valid_deterministic_and_recount() {
        for spec in all_specs() {
            let a = generate(&spec, 11, 50).unwrap();
            let b = generate(&spec, 11, 50).unwrap();
            assert_eq!(a, b, "{}", spec.tag());
            for s in &a {
                s.validate(spec.vocab_size()).unwrap();
                assert_eq!(s.tokens.len(), spec.seq_len());
                assert_eq!(s.occurrence_count, recount(s), "{}", spec.tag());
            }
        }
    }

    #[test]
    fn assoc_recall_single_pair_and_oracle() {
        let spec = TaskSpec::AssocRecall { n_pairs: 1, key_lo: 1, key_hi: 100, val_lo: 100, val_hi: 200 };
        for s in generate(&spec, 3, 100).unwrap() {
            assert_eq!(s.tokens[2], s.tokens[0]);
            assert_eq!(s.targets, vec![s.tokens[1]]);
        }
        let spec = TaskSpec::AssocRecall { n_pairs: 6, key_lo: 0, key_hi: 64, val_lo: 0, val_hi: 64 };
        for s in generate(&spec, 4, 200).unwrap() {
            let q = *s.tokens.last().unwrap();
            let keys: Vec<u32> = s.tokens[..12].iter().step_by(2).copied().collect();
            let mut sorted = keys.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), keys.len(), "keys unique");
            let i = keys.iter().position(|&k| k == q).unwrap();
            assert_eq!(s.targets[0], s.tokens[2 * i + 1]);
        }
    }

    #[test]
    fn assoc_recall_key_range_too_small() {
        let spec = TaskSpec::AssocRecall { n_pairs: 5, key_lo: 0, key_hi: 4, val_lo: 0, val_hi: 4 };
        assert!(matches!(generate(&spec, 0, 1), Err(LabError::Generation(_))));
    }

    #[test]
    fn assoc_recall_query_index_uniform() {
        let n_pairs = 8;
        let spec = TaskSpec::AssocRecall { n_pairs, key_lo: 1, key_hi: 100, val_lo: 100, val_hi: 200 };
        let mut counts = vec![0f64; n_pairs];
        for s in generate(&spec, 5, 10_000).unwrap() {
            let q = *s.tokens.last().unwrap();
            let i = (0..n_pairs).find(|&i| s.tokens[2 * i] == q).unwrap();
            counts[i] += 1.0;
        }
        let e = 10_000.0 / n_pairs as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 7 dof, p = 0.01 critical value
        assert!(chi2 < 18.475, "chi2 {chi2}");
    }

    #[test]
    fn induction_pattern_matcher_scores_perfectly() {
        let spec = TaskSpec::Induction { vocab: 64, period_choices: vec![2, 3, 4, 7], length: 30 };
        for s in generate(&spec, 9, 200).unwrap() {
            for (&p, &y) in s.target_positions.iter().zip(&s.targets) {
                let cur = s.tokens[p];
                let prev = (0..p).rev().find(|&j| s.tokens[j] == cur).expect("seen before");
                assert_eq!(s.tokens[prev + 1], y);
            }
        }
        // [A,B,A] → B
        let spec = TaskSpec::Induction { vocab: 64, period_choices: vec![2], length: 4 };
        let s = &generate(&spec, 1, 1).unwrap()[0];
        assert_eq!(s.target_positions, vec![2]);
        assert_eq!(s.targets, vec![s.tokens[1]]);
        assert!((spec.chance_accuracy() - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn anchored_chain_structure() {
        let spec = chains_spec();
        for s in generate(&spec, 21, 200).unwrap() {
            // every supervised run starts right at an anchor
            let mut it = s.target_positions.iter().peekable();
            while let Some(&p) = it.next() {
                let mut end = p;
                while it.peek().is_some_and(|&&q| q == end + 1) {
                    end = *it.next().unwrap();
                }
                // runs may abut, so split on anchors inside
                let run = &s.tokens[p..=end + 1];
                assert_eq!(run[0], 127, "chain head preceded by the anchor");
                for seg in run.split(|&t| t == 127).filter(|g| !g.is_empty()) {
                    let mut u = seg.to_vec();
                    u.sort();
                    u.dedup();
                    assert_eq!(u.len(), seg.len(), "content unique within a chain");
                }
            }
            assert!(s.targets.iter().all(|&t| t != 127));
            assert!(s.targets.iter().all(|&t| (t as usize) < 127));
        }
    }

    #[test]
    fn anchored_chain_first_sighting_is_new() {
        let spec = chains_spec();
        for s in generate(&spec, 2, 100).unwrap() {
            let mut shown: HashMap<u32, u32> = HashMap::new();
            for (&y, &k) in s.targets.iter().zip(&s.occurrence_count) {
                let c = shown.entry(y).or_default();
                if *c == 0 {
                    assert_eq!(k, 0, "first appearance of a chain token");
                } else if *c == 1 {
                    assert_eq!(k, 1, "second appearance of a chain token");
                }
                *c += 1;
            }
        }
    }

    #[test]
    fn anchored_chain_insert_frequency() {
        let spec = chains_spec();
        let mut rng = rng_for(77, "events");
        let (mut inserts, mut total) = (0f64, 0f64);
        for _ in 0..1000 {
            let (_, events) = spec.anchored_sample(&mut rng).unwrap();
            total += events.len() as f64;
            inserts += events.iter().filter(|&&e| e == ChainEvent::Insert).count() as f64;
        }
        let p = 0.4;
        let sigma = (p * (1.0 - p) / total).sqrt();
        assert!((inserts / total - p).abs() < 3.0 * sigma, "{} vs {p}", inserts / total);
    }

    #[test]
    fn anchored_chain_capacity_error() {
        let TaskSpec::AnchoredChains { vocab, anchor_id, chain_len, chains_per_seq, insert_p, query_p, noise_p, .. } =
            chains_spec()
        else {
            unreachable!()
        };
        let tight =
            TaskSpec::AnchoredChains { vocab, anchor_id, chain_len, chains_per_seq, insert_p, query_p, noise_p, seq_len: 11 };
        assert!(matches!(generate(&tight, 0, 1), Err(LabError::Generation(_))));
        let bad_anchor = TaskSpec::AnchoredChains {
            vocab,
            anchor_id: 500,
            chain_len,
            chains_per_seq,
            insert_p,
            query_p,
            noise_p,
            seq_len: 96,
        };
        assert!(generate(&bad_anchor, 0, 1).is_err());
    }

    #[test]
    fn trivial_aggregates() {
        assert_eq!(unique_mode(&[3, 3, 5], 8), Some(3));
        assert_eq!(unique_mode(&[3, 5], 8), None);
        let spec = TaskSpec::Parity { length: 1 };
        for s in generate(&spec, 0, 20).unwrap() {
            assert_eq!(s.targets[0], s.tokens[0]);
        }
        for s in generate(&TaskSpec::Parity { length: 6 }, 1, 50).unwrap() {
            if s.tokens[..6].iter().all(|&t| t == 0) {
                assert_eq!(s.targets[0], 0);
            }
        }
    }

    #[test]
    fn order_invariant_targets() {
        let mut rng = rng_for(3, "perm");
        let specs = [
            TaskSpec::Majority { vocab: 8, length: 15 },
            TaskSpec::Parity { length: 12 },
            TaskSpec::GlobalCount { vocab: 6, length: 12 },
        ];
        for spec in specs {
            for s in generate(&spec, 8, 20).unwrap() {
                let (body, tail) = match spec {
                    TaskSpec::GlobalCount { length, .. } => s.tokens.split_at(length),
                    _ => s.tokens.split_at(s.tokens.len() - 1),
                };
                for _ in 0..100 {
                    let mut perm = body.to_vec();
                    perm.shuffle(&mut rng);
                    assert_eq!(reference_target(&spec, &perm, tail), s.targets[0]);
                }
            }
        }
    }

    /// Direct statement of each aggregate task's answer.
    fn reference_target(spec: &TaskSpec, body: &[u32], tail: &[u32]) -> u32 {
        match *spec {
            TaskSpec::Majority { vocab, .. } => {
                let best = (0..vocab as u32).max_by_key(|v| body.iter().filter(|&&t| t == *v).count());
                best.unwrap()
            }
            TaskSpec::Parity { .. } => body.iter().filter(|&&t| t == 1).count() as u32 % 2,
            TaskSpec::GlobalCount { vocab, .. } => {
                vocab as u32 + 1 + body.iter().filter(|&&t| t == tail[1]).count() as u32
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn split_is_disjoint() {
        // small space so collisions would happen without rejection
        let spec = TaskSpec::Parity { length: 6 };
        let mut split = Split::new(&spec, 4, 30).unwrap();
        let held: HashSet<Vec<u32>> = split.test.iter().map(|s| s.tokens.clone()).collect();
        for s in split.train_batch(500).unwrap() {
            assert!(!held.contains(&s.tokens));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let samples = generate(&chains_spec(), 1, 5).unwrap();
        write_jsonl(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["tokens", "targets", "target_positions", "k", "task_tag"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: TaskSample = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, samples[0]);
    }
}
