//! Combining member models: weighted probability averaging with learned
//! weights, majority voting, and greedy member selection.
//!
//! Weights live on a discretized simplex (multiples of 0.05) and are fit
//! by coordinate ascent on dev accuracy from several starting points,
//! always including every one-hot vertex, so a learned combination can
//! never score below the best single member. The exact fitting procedure
//! is one admissible reading of "learned through dev performance"; an
//! accuracy-proportional fallback is also provided.

use std::path::Path;

use crate::classifier::Prediction;
use crate::config::{Activation, ModelConfig};
use crate::data::Label;
use crate::error::{Error, Result};

/// Weight-grid resolution: 20 units of 0.05 sum to 1. Integer units keep
/// the search exact; floats appear only at the boundary.
const UNITS: usize = 20;

// ── Member outputs ───────────────────────────────────────────────────────

/// Per-pair class distributions for one dataset split, with pair ids kept
/// alongside so member files can be checked for identical coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub pair_ids: Vec<String>,
    pub probs: Vec<[f64; 3]>,
}

impl PredictionSet {
    pub fn new(pair_ids: Vec<String>, probs: Vec<[f64; 3]>) -> Result<Self> {
        if pair_ids.len() != probs.len() {
            return Err(Error::Contract(format!(
                "{} pair ids for {} distributions",
                pair_ids.len(),
                probs.len()
            )));
        }
        Ok(PredictionSet { pair_ids, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Argmax label per pair, ties to the lowest index.
    pub fn labels(&self) -> Vec<Label> {
        self.probs.iter().map(|p| Prediction::from_probs(*p).label).collect()
    }
}

/// One ensemble member's outputs on the dev and test splits.
#[derive(Debug, Clone)]
pub struct MemberOutput {
    pub id: String,
    pub dev: PredictionSet,
    pub test: PredictionSet,
    pub dev_accuracy: f64,
}

impl MemberOutput {
    pub fn new(
        id: impl Into<String>,
        dev: PredictionSet,
        test: PredictionSet,
        dev_golds: &[Label],
    ) -> Result<Self> {
        let accuracy = crate::trainer::accuracy(&dev.labels(), dev_golds)?;
        Ok(MemberOutput { id: id.into(), dev, test, dev_accuracy: accuracy })
    }
}

/// All members must cover the same pairs in the same order on both splits.
pub fn validate_coverage(members: &[MemberOutput]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Contract("an ensemble needs at least one member".into()))?;
    for m in &members[1..] {
        if m.dev.pair_ids != first.dev.pair_ids {
            return Err(Error::Data(format!(
                "member {} covers different dev pairs than member {}",
                m.id, first.id
            )));
        }
        if m.test.pair_ids != first.test.pair_ids {
            return Err(Error::Data(format!(
                "member {} covers different test pairs than member {}",
                m.id, first.id
            )));
        }
    }
    Ok(())
}

// ── Combination strategies ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Per-pair probability mixture with learned weights.
    WeightedAverage,
    /// Plain mean of member distributions.
    UniformAverage,
    /// Most frequent argmax label; ties go to the highest mean probability.
    MajorityVote,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::WeightedAverage => "weighted",
            Strategy::UniformAverage => "average",
            Strategy::MajorityVote => "vote",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Strategy::WeightedAverage),
            "average" => Ok(Strategy::UniformAverage),
            "vote" => Ok(Strategy::MajorityVote),
            other => Err(Error::Config(format!(
                "unknown ensemble strategy {other:?} (weighted, average, vote)"
            ))),
        }
    }
}

fn check_members(members: &[Vec<[f64; 3]>]) -> Result<usize> {
    let first = members
        .first()
        .ok_or_else(|| Error::Contract("an ensemble needs at least one member".into()))?;
    for (k, m) in members.iter().enumerate() {
        if m.len() != first.len() {
            return Err(Error::Data(format!(
                "member {k} predicts {} pairs, member 0 predicts {}",
                m.len(),
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Per pair, the mixture sum_k w_k * probs_k. Weights must be
/// non-negative and sum to 1.
pub fn weighted_average(
    members: &[Vec<[f64; 3]>],
    weights: &[f64],
) -> Result<Vec<[f64; 3]>> {
    let n = check_members(members)?;
    if weights.len() != members.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} members",
            weights.len(),
            members.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "weights must be a distribution, got {weights:?}"
        )));
    }
    let mut out = vec![[0.0f64; 3]; n];
    for (member, &w) in members.iter().zip(weights) {
        for (acc, p) in out.iter_mut().zip(member) {
            for c in 0..3 {
                acc[c] += w * p[c];
            }
        }
    }
    Ok(out)
}

pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Weights proportional to dev accuracy; uniform when every accuracy is 0.
pub fn accuracy_proportional_weights(dev_accuracies: &[f64]) -> Result<Vec<f64>> {
    if dev_accuracies.is_empty() {
        return Err(Error::Contract("an ensemble needs at least one member".into()));
    }
    let total: f64 = dev_accuracies.iter().sum();
    if total <= 0.0 {
        return Ok(uniform_weights(dev_accuracies.len()));
    }
    Ok(dev_accuracies.iter().map(|a| a / total).collect())
}

/// Most frequent argmax label per pair. When label counts tie, the tied
/// label with the highest mean probability across members wins; a further
/// tie falls to the lowest label index.
pub fn majority_vote(members: &[Vec<[f64; 3]>]) -> Result<Vec<Label>> {
    let n = check_members(members)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut votes = [0usize; 3];
        let mut mean = [0.0f64; 3];
        for m in members {
            votes[Prediction::from_probs(m[i]).label.index()] += 1;
            for c in 0..3 {
                mean[c] += m[i][c];
            }
        }
        let top = *votes.iter().max().expect("3 classes");
        let mut best: Option<usize> = None;
        for c in 0..3 {
            if votes[c] == top {
                let better = match best {
                    None => true,
                    Some(b) => mean[c] > mean[b],
                };
                if better {
                    best = Some(c);
                }
            }
        }
        out.push(Label::from_index(best.expect("some class has votes")).unwrap());
    }
    Ok(out)
}

// ── Weight learning ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedWeights {
    pub weights: Vec<f64>,
    pub dev_accuracy: f64,
}

/// Correct-prediction count for integer-unit weights.
fn grid_score(members: &[Vec<[f64; 3]>], golds: &[Label], units: &[usize]) -> usize {
    let mut correct = 0usize;
    for (i, gold) in golds.iter().enumerate() {
        let mut mix = [0.0f64; 3];
        for (m, &u) in members.iter().zip(units) {
            if u == 0 {
                continue;
            }
            let w = u as f64;
            for c in 0..3 {
                mix[c] += w * m[i][c];
            }
        }
        if Prediction::from_probs(mix).label == *gold {
            correct += 1;
        }
    }
    correct
}

fn sum_sq(units: &[usize]) -> usize {
    units.iter().map(|u| u * u).sum()
}

/// Lexicographic preference: more correct, then more uniform (lower sum of
/// squares), then the lexicographically smaller unit vector for
/// determinism.
fn better(
    cand: (usize, usize, &[usize]),
    best: (usize, usize, &[usize]),
) -> bool {
    (cand.0, std::cmp::Reverse(cand.1), std::cmp::Reverse(cand.2))
        > (best.0, std::cmp::Reverse(best.1), std::cmp::Reverse(best.2))
}

fn ascend(members: &[Vec<[f64; 3]>], golds: &[Label], start: Vec<usize>) -> (Vec<usize>, usize) {
    let mut units = start;
    let mut score = grid_score(members, golds, &units);
    loop {
        let mut best_move: Option<(Vec<usize>, usize)> = None;
        for i in 0..units.len() {
            if units[i] == 0 {
                continue;
            }
            for j in 0..units.len() {
                if i == j {
                    continue;
                }
                let mut cand = units.clone();
                cand[i] -= 1;
                cand[j] += 1;
                let cand_score = grid_score(members, golds, &cand);
                let current = best_move
                    .as_ref()
                    .map(|(u, s)| (*s, sum_sq(u), u.as_slice()))
                    .unwrap_or((score, sum_sq(&units), units.as_slice()));
                if better((cand_score, sum_sq(&cand), &cand), current) {
                    best_move = Some((cand, cand_score));
                }
            }
        }
        match best_move {
            Some((u, s)) => {
                units = u;
                score = s;
            }
            None => return (units, score),
        }
    }
}

/// [`learn_weights`] with additional starting points (as unit vectors
/// summing to [`UNITS`]); used by greedy selection to seed the search
/// with the previous optimum so growth never loses accuracy.
pub fn learn_weights_with_starts(
    members: &[Vec<[f64; 3]>],
    golds: &[Label],
    extra_starts: &[Vec<usize>],
) -> Result<LearnedWeights> {
    let n = check_members(members)?;
    if n != golds.len() {
        return Err(Error::Contract(format!(
            "{} gold labels for {} predictions",
            golds.len(),
            n
        )));
    }
    let k = members.len();
    let mut starts: Vec<Vec<usize>> = Vec::new();
    for i in 0..k {
        let mut one_hot = vec![0usize; k];
        one_hot[i] = UNITS;
        starts.push(one_hot);
    }
    let mut even = vec![UNITS / k; k];
    for slot in even.iter_mut().take(UNITS % k) {
        *slot += 1;
    }
    starts.push(even);
    for extra in extra_starts {
        if extra.len() != k || extra.iter().sum::<usize>() != UNITS {
            return Err(Error::Contract(format!(
                "starting point {extra:?} is not a {UNITS}-unit simplex point for {k} members"
            )));
        }
        starts.push(extra.clone());
    }

    let mut best: Option<(Vec<usize>, usize)> = None;
    for start in starts {
        let (units, score) = ascend(members, golds, start);
        let replace = match &best {
            None => true,
            Some((bu, bs)) => better((score, sum_sq(&units), &units), (*bs, sum_sq(bu), bu)),
        };
        if replace {
            best = Some((units, score));
        }
    }
    let (units, score) = best.expect("at least one start");
    Ok(LearnedWeights {
        weights: units.iter().map(|&u| u as f64 / UNITS as f64).collect(),
        dev_accuracy: score as f64 / golds.len() as f64,
    })
}

/// Fits mixture weights by maximizing dev accuracy over the 0.05 grid.
/// Ties prefer the more uniform weight vector. The result never scores
/// below the best single member, because every one-hot vertex is searched.
pub fn learn_weights(members: &[Vec<[f64; 3]>], golds: &[Label]) -> Result<LearnedWeights> {
    learn_weights_with_starts(members, golds, &[])
}

// ── Greedy member selection ──────────────────────────────────────────────

/// The chosen ensemble at one member count.
#[derive(Debug, Clone)]
pub struct EnsembleChoice {
    /// Indices into the candidate list, in inclusion order.
    pub member_indices: Vec<usize>,
    pub member_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GreedySelection {
    /// One entry per ensemble size 1..=max_n.
    pub per_size: Vec<EnsembleChoice>,
    /// Index into `per_size` of the best dev accuracy (smallest size wins
    /// ties).
    pub best: usize,
}

/// Grows the ensemble one member at a time: each step keeps the previous
/// set, tries every remaining candidate, re-learns weights seeded with
/// the previous optimum, and keeps the best dev accuracy. Reports every
/// size so the member-count curve can be inspected.
pub fn greedy_select(
    members: &[MemberOutput],
    dev_golds: &[Label],
    test_golds: &[Label],
    max_n: usize,
) -> Result<GreedySelection> {
    validate_coverage(members)?;
    if max_n == 0 || max_n > members.len() {
        return Err(Error::Config(format!(
            "ensemble size limit {max_n} with {} candidates",
            members.len()
        )));
    }

    let dev_probs = |set: &[usize]| -> Vec<Vec<[f64; 3]>> {
        set.iter().map(|&i| members[i].dev.probs.clone()).collect()
    };

    let mut per_size: Vec<EnsembleChoice> = Vec::with_capacity(max_n);
    let mut chosen: Vec<usize> = Vec::new();
    let mut prev_units: Vec<usize> = Vec::new();

    for _ in 0..max_n {
        let mut best: Option<(usize, LearnedWeights)> = None;
        for cand in 0..members.len() {
            if chosen.contains(&cand) {
                continue;
            }
            let mut set = chosen.clone();
            set.push(cand);
            let mut seeds = Vec::new();
            if !prev_units.is_empty() {
                let mut seeded = prev_units.clone();
                seeded.push(0);
                seeds.push(seeded);
            }
            let learned = learn_weights_with_starts(&dev_probs(&set), dev_golds, &seeds)?;
            let replace = match &best {
                None => true,
                Some((_, b)) => learned.dev_accuracy > b.dev_accuracy,
            };
            if replace {
                best = Some((cand, learned));
            }
        }
        let (cand, learned) = best.expect("at least one unused candidate");
        chosen.push(cand);
        prev_units = learned
            .weights
            .iter()
            .map(|w| (w * UNITS as f64).round() as usize)
            .collect();

        let test_probs: Vec<Vec<[f64; 3]>> =
            chosen.iter().map(|&i| members[i].test.probs.clone()).collect();
        let combined = weighted_average(&test_probs, &learned.weights)?;
        let test_labels: Vec<Label> =
            combined.iter().map(|p| Prediction::from_probs(*p).label).collect();
        let test_accuracy = crate::trainer::accuracy(&test_labels, test_golds)?;

        per_size.push(EnsembleChoice {
            member_indices: chosen.clone(),
            member_ids: chosen.iter().map(|&i| members[i].id.clone()).collect(),
            weights: learned.weights.clone(),
            dev_accuracy: learned.dev_accuracy,
            test_accuracy,
        });
    }

    let mut best = 0usize;
    for (i, choice) in per_size.iter().enumerate() {
        if choice.dev_accuracy > per_size[best].dev_accuracy {
            best = i;
        }
    }
    Ok(GreedySelection { per_size, best })
}

// ── Member roster ────────────────────────────────────────────────────────

/// Named configuration variants for building an ensemble pool from one
/// base setup: a tanh projection, single- and triple-round readings, and
/// reseeded copies of the default.
pub fn member_roster(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut roster = Vec::new();
    let mut tanh = base.clone();
    tanh.projection_activation = Activation::Tanh;
    roster.push(("tanh-projection".to_string(), tanh));
    for rounds in [1usize, 3] {
        let mut c = base.clone();
        c.reading_rounds = rounds;
        roster.push((format!("rounds-{rounds}"), c));
    }
    for (tag, bump) in [("seed-a", 1u64), ("seed-b", 2), ("seed-c", 3)] {
        let mut c = base.clone();
        c.seed = base.seed.wrapping_add(bump);
        roster.push((tag.to_string(), c));
    }
    roster
}

// ── Prediction CSV ───────────────────────────────────────────────────────

const PREDICTION_HEADER: [&str; 4] =
    ["pair_id", "p_entailment", "p_neutral", "p_contradiction"];

pub fn write_prediction_set(path: impl AsRef<Path>, set: &PredictionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(PREDICTION_HEADER).map_err(csv_err)?;
    for (id, p) in set.pair_ids.iter().zip(&set.probs) {
        w.write_record([
            id.clone(),
            p[0].to_string(),
            p[1].to_string(),
            p[2].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prediction_set(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != PREDICTION_HEADER {
        return Err(Error::Parse {
            line: 1,
            detail: format!(
                "expected header {}, found {:?}",
                PREDICTION_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut pair_ids = Vec::new();
    let mut probs = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                detail: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for c in 0..3 {
            p[c] = rec[c + 1].parse().map_err(|_| Error::Parse {
                line,
                detail: format!("bad probability {:?}", &rec[c + 1]),
            })?;
        }
        pair_ids.push(rec[0].to_string());
        probs.push(p);
    }
    PredictionSet::new(pair_ids, probs)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("prediction csv: {e}"))
}
