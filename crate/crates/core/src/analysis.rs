//! Model-behavior analysis: automatic annotation tags with per-tag
//! accuracy breakdowns, a paired-model significance test, and attention
//! heatmap export.
//!
//! Tags describe each premise/hypothesis pair by token overlap, sentence
//! length, and the presence of negation, quantifier, or belief words.
//! Counting excludes the sentence boundary markers and detached
//! punctuation; heatmaps keep the markers because the attention matrix
//! covers them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Label, SentencePair, TERMINAL_PUNCT};
use crate::embeddings::{EOL, FOL};
use crate::error::{Error, Result};

// ── Word lists ───────────────────────────────────────────────────────────

pub const QUANTIFIER_WORDS: [&str; 15] = [
    "much", "enough", "more", "most", "less", "least", "no", "none", "some", "any", "many",
    "few", "several", "almost", "nearly",
];

pub const BELIEF_WORDS: [&str; 15] = [
    "know", "believe", "understand", "doubt", "think", "suppose", "recognize", "forget",
    "remember", "imagine", "mean", "agree", "disagree", "deny", "promise",
];

/// Negation cues. Tokens ending in "n't" also count, so contractions are
/// caught whether or not the tokenizer split them.
pub const NEGATION_WORDS: [&str; 11] = [
    "not", "n't", "no", "never", "none", "nobody", "nothing", "neither", "nor", "nowhere",
    "cannot",
];

// ── Annotation ───────────────────────────────────────────────────────────

/// Automatic annotations for one pair. Exactly one overlap tag holds;
/// length tags can co-occur because each looks at both sentences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagSet {
    pub gold: Label,
    pub overlap_ratio: f64,
    pub high_overlap: bool,
    pub regular_overlap: bool,
    pub low_overlap: bool,
    pub long_sentence: bool,
    pub regular_sentence: bool,
    pub short_sentence: bool,
    pub negation: bool,
    pub quantifier: bool,
    pub belief: bool,
}

/// Sentence tokens that participate in overlap and length counts:
/// boundary markers and detached punctuation are dropped, case folded.
fn content_tokens(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| {
            let t = t.as_str();
            t != FOL
                && t != EOL
                && !(t.chars().count() == 1
                    && t.chars().next().is_some_and(|c| TERMINAL_PUNCT.contains(&c)))
        })
        .map(|t| t.to_lowercase())
        .collect()
}

fn has_any(tokens: &[String], words: &[&str]) -> bool {
    tokens.iter().any(|t| words.contains(&t.as_str()))
}

fn has_negation(tokens: &[String]) -> bool {
    tokens
        .iter()
        .any(|t| NEGATION_WORDS.contains(&t.as_str()) || t.ends_with("n't"))
}

/// Derives the full tag set for one pair.
pub fn annotate(pair: &SentencePair) -> TagSet {
    let premise = content_tokens(&pair.premise);
    let hypothesis = content_tokens(&pair.hypothesis);

    let p_set: BTreeSet<&str> = premise.iter().map(|s| s.as_str()).collect();
    let h_set: BTreeSet<&str> = hypothesis.iter().map(|s| s.as_str()).collect();
    let shared = h_set.intersection(&p_set).count();
    // Two sentences with no content tokens at all share everything they
    // have, which is the identical-sentences case taken to its limit.
    let overlap_ratio = if h_set.is_empty() {
        1.0
    } else {
        shared as f64 / h_set.len() as f64
    };

    let (p_len, h_len) = (premise.len(), hypothesis.len());
    let in_regular = |n: usize| (5..=20).contains(&n);

    TagSet {
        gold: pair.label,
        overlap_ratio,
        high_overlap: overlap_ratio > 0.7,
        regular_overlap: (0.3..=0.7).contains(&overlap_ratio),
        low_overlap: overlap_ratio < 0.3,
        long_sentence: p_len > 20 || h_len > 20,
        regular_sentence: in_regular(p_len) || in_regular(h_len),
        short_sentence: p_len < 5 || h_len < 5,
        negation: has_negation(&premise) || has_negation(&hypothesis),
        quantifier: has_any(&premise, &QUANTIFIER_WORDS) || has_any(&hypothesis, &QUANTIFIER_WORDS),
        belief: has_any(&premise, &BELIEF_WORDS) || has_any(&hypothesis, &BELIEF_WORDS),
    }
}

// ── Categorical accuracy ─────────────────────────────────────────────────

/// The fixed row order of the categorical report.
pub const TAG_NAMES: [&str; 12] = [
    "entailment",
    "neutral",
    "contradiction",
    "high_overlap",
    "regular_overlap",
    "low_overlap",
    "long_sentence",
    "regular_sentence",
    "short_sentence",
    "negation",
    "quantifier",
    "belief",
];

fn tag_applies(tags: &TagSet, name: &str) -> bool {
    match name {
        "entailment" => tags.gold == Label::Entailment,
        "neutral" => tags.gold == Label::Neutral,
        "contradiction" => tags.gold == Label::Contradiction,
        "high_overlap" => tags.high_overlap,
        "regular_overlap" => tags.regular_overlap,
        "low_overlap" => tags.low_overlap,
        "long_sentence" => tags.long_sentence,
        "regular_sentence" => tags.regular_sentence,
        "short_sentence" => tags.short_sentence,
        "negation" => tags.negation,
        "quantifier" => tags.quantifier,
        "belief" => tags.belief,
        other => unreachable!("unknown tag {other}"),
    }
}

/// Accuracy and population for one tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TagRow {
    pub tag: &'static str,
    pub count: usize,
    /// Fraction of all pairs carrying the tag.
    pub frequency: f64,
    /// None when no pair carries the tag: an empty category is reported
    /// as absent rather than as zero accuracy.
    pub accuracy: Option<f64>,
}

/// Per-tag accuracy for one model's predictions.
pub fn categorical_accuracy(
    predictions: &[Label],
    golds: &[Label],
    tagsets: &[TagSet],
) -> Result<Vec<TagRow>> {
    if predictions.len() != golds.len() || golds.len() != tagsets.len() {
        return Err(Error::Contract(format!(
            "misaligned inputs: {} predictions, {} golds, {} tag sets",
            predictions.len(),
            golds.len(),
            tagsets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("categorical accuracy of an empty set".into()));
    }
    let total = predictions.len();
    Ok(TAG_NAMES
        .iter()
        .map(|&tag| {
            let mut count = 0usize;
            let mut hits = 0usize;
            for ((pred, gold), tags) in predictions.iter().zip(golds).zip(tagsets) {
                if tag_applies(tags, tag) {
                    count += 1;
                    if pred == gold {
                        hits += 1;
                    }
                }
            }
            TagRow {
                tag,
                count,
                frequency: count as f64 / total as f64,
                accuracy: (count > 0).then(|| hits as f64 / count as f64),
            }
        })
        .collect())
}

/// Tab-separated report: `tag<TAB>frequency<TAB>accuracy...`, one
/// accuracy column per named model. All reports must share the fixed tag
/// order, which [`categorical_accuracy`] guarantees.
pub fn categorical_report(models: &[(String, Vec<TagRow>)]) -> Result<String> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("report needs at least one model".into()))?;
    for (name, rows) in models {
        if rows.len() != TAG_NAMES.len() {
            return Err(Error::Contract(format!(
                "model {name} has {} rows, expected {}",
                rows.len(),
                TAG_NAMES.len()
            )));
        }
    }
    let mut out = String::from("tag\tfrequency");
    for (name, _) in models {
        write!(out, "\t{name}").unwrap();
    }
    out.push('\n');
    for (i, &tag) in TAG_NAMES.iter().enumerate() {
        write!(out, "{tag}\t{:.4}", first.1[i].frequency).unwrap();
        for (_, rows) in models {
            match rows[i].accuracy {
                Some(a) => write!(out, "\t{a:.4}").unwrap(),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

// ── Significance test ────────────────────────────────────────────────────

/// Chi-square comparison of two models' correctness rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquare {
    /// 2x2 counts: rows are models A and B, columns correct/incorrect.
    pub table: [[usize; 2]; 2],
    pub statistic: f64,
    pub p_value: f64,
    /// Set when any expected cell count is below 5, where the chi-square
    /// approximation becomes unreliable.
    pub low_expected_counts: bool,
}

/// Pearson chi-square on the 2x2 model-by-correctness table, one degree
/// of freedom. Identical outputs give identical rows, hence statistic 0
/// and p = 1; swapping the models swaps rows and changes nothing.
pub fn chi_square(
    outputs_a: &[Label],
    outputs_b: &[Label],
    golds: &[Label],
) -> Result<ChiSquare> {
    if outputs_a.len() != golds.len() || outputs_b.len() != golds.len() {
        return Err(Error::Contract(format!(
            "misaligned label sequences: {} and {} against {} golds",
            outputs_a.len(),
            outputs_b.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Contract("significance test on an empty set".into()));
    }
    let correct = |outputs: &[Label]| outputs.iter().zip(golds).filter(|(o, g)| o == g).count();
    let n = golds.len();
    let (a, b) = (correct(outputs_a), n - correct(outputs_a));
    let (c, d) = (correct(outputs_b), n - correct(outputs_b));
    let table = [[a, b], [c, d]];

    let total = (2 * n) as f64;
    let (af, bf, cf, df) = (a as f64, b as f64, c as f64, d as f64);
    let cross = af * df - bf * cf;
    let denom = (af + bf) * (cf + df) * (af + cf) * (bf + df);
    let statistic = if cross == 0.0 || denom == 0.0 {
        0.0
    } else {
        total * cross * cross / denom
    };

    let mut low_expected_counts = false;
    let row = [af + bf, cf + df];
    let col = [af + cf, bf + df];
    for r in row {
        for c in col {
            if r * c / total < 5.0 {
                low_expected_counts = true;
            }
        }
    }

    Ok(ChiSquare {
        table,
        statistic,
        p_value: upper_gamma_regularized(0.5, statistic / 2.0),
        low_expected_counts,
    })
}

/// Regularized upper incomplete gamma Q(s, x); Q(1/2, t/2) is the
/// chi-square survival function at one degree of freedom. Series for
/// x < s + 1, continued fraction otherwise.
pub fn upper_gamma_regularized(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_gamma_s = ln_gamma(s);
    if x < s + 1.0 {
        // P(s,x) by series, then Q = 1 - P.
        let mut term = 1.0 / s;
        let mut sum = term;
        let mut k = s;
        for _ in 0..500 {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        1.0 - sum * (-x + s * x.ln() - ln_gamma_s).exp()
    } else {
        // Q(s,x) by Lentz's continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - s;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - s);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x + s * x.ln() - ln_gamma_s).exp() * h
    }
}

/// Lanczos approximation, accurate to ~1e-13 over the positive reals.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection keeps small arguments accurate.
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// ── Attention heatmaps ───────────────────────────────────────────────────

/// Row-normalizes a raw energy matrix: softmax across each premise row.
pub fn normalize_energy(energy: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if energy.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Contract(format!(
            "energy of {} values cannot be {rows}x{cols}",
            energy.len()
        )));
    }
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &energy[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|e| (e - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[r * cols + c] = e / sum;
        }
    }
    Ok(out)
}

fn check_heatmap_shape(
    energy: &[f64],
    premise: &[String],
    hypothesis: &[String],
) -> Result<(usize, usize)> {
    let (rows, cols) = (premise.len(), hypothesis.len());
    if rows == 0 || cols == 0 || energy.len() != rows * cols {
        return Err(Error::Contract(format!(
            "energy of {} values does not cover {rows} premise x {cols} hypothesis tokens",
            energy.len()
        )));
    }
    Ok((rows, cols))
}

/// Writes normalized attention as a CSV matrix: first column premise
/// tokens, header row hypothesis tokens.
pub fn write_heatmap_csv(
    path: impl AsRef<Path>,
    energy: &[f64],
    premise: &[String],
    hypothesis: &[String],
) -> Result<()> {
    let (rows, cols) = check_heatmap_shape(energy, premise, hypothesis)?;
    let weights = normalize_energy(energy, rows, cols)?;
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
    let mut header = vec!["premise\\hypothesis".to_string()];
    header.extend(hypothesis.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
    for r in 0..rows {
        let mut record = vec![premise[r].clone()];
        record.extend(weights[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a heatmap CSV back: (premise tokens, hypothesis tokens, weights
/// in row-major order).
pub fn read_heatmap_csv(
    path: impl AsRef<Path>,
) -> Result<(Vec<String>, Vec<String>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
    let headers = r.headers().map_err(|e| Error::Data(format!("heatmap csv: {e}")))?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse { line: 1, detail: "heatmap needs at least one hypothesis column".into() });
    }
    let hypothesis: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut premise = Vec::new();
    let mut weights = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("heatmap csv: {e}")))?;
        let line = i + 2;
        if rec.len() != hypothesis.len() + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} fields, found {}", hypothesis.len() + 1, rec.len()),
            });
        }
        premise.push(rec[0].to_string());
        for c in 1..rec.len() {
            weights.push(rec[c].parse().map_err(|_| Error::Parse {
                line,
                detail: format!("bad weight {:?}", &rec[c]),
            })?);
        }
    }
    if premise.is_empty() {
        return Err(Error::Parse { line: 2, detail: "heatmap has no premise rows".into() });
    }
    Ok((premise, hypothesis, weights))
}

/// Renders the normalized weights as a standalone grayscale grid in SVG,
/// darker cells for higher weights, token labels along both axes.
pub fn write_heatmap_svg(
    path: impl AsRef<Path>,
    energy: &[f64],
    premise: &[String],
    hypothesis: &[String],
) -> Result<()> {
    let (rows, cols) = check_heatmap_shape(energy, premise, hypothesis)?;
    let weights = normalize_energy(energy, rows, cols)?;

    const CELL: usize = 28;
    const MARGIN: usize = 110;
    let width = MARGIN + cols * CELL + 10;
    let height = MARGIN + rows * CELL + 10;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (c, token) in hypothesis.iter().enumerate() {
        let x = MARGIN + c * CELL + CELL / 2;
        write!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" text-anchor=\"start\" \
             transform=\"rotate(-60 {x} {y})\">{}</text>\n",
            escape_xml(token),
            y = MARGIN - 8,
        )
        .unwrap();
    }
    for (r, token) in premise.iter().enumerate() {
        let y = MARGIN + r * CELL + CELL / 2 + 4;
        write!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" text-anchor=\"end\">{}</text>\n",
            escape_xml(token),
            x = MARGIN - 8,
        )
        .unwrap();
    }
    for r in 0..rows {
        for c in 0..cols {
            let w = weights[r * cols + c];
            let shade = (255.0 * (1.0 - w)).round() as u8;
            write!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"rgb({shade},{shade},{shade})\" stroke=\"#ccc\"/>\n",
                MARGIN + c * CELL,
                MARGIN + r * CELL,
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path.as_ref(), svg)?;
    Ok(())
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn pair(premise: &str, hypothesis: &str, label: Label) -> SentencePair {
        SentencePair {
            id: "t".into(),
            label,
            premise: tokenize(premise, None).unwrap(),
            hypothesis: tokenize(hypothesis, None).unwrap(),
        }
    }

    #[test]
    fn word_lists_are_pinned() {
        assert_eq!(
            QUANTIFIER_WORDS.join(", "),
            "much, enough, more, most, less, least, no, none, some, any, many, few, \
             several, almost, nearly"
        );
        assert_eq!(
            BELIEF_WORDS.join(", "),
            "know, believe, understand, doubt, think, suppose, recognize, forget, \
             remember, imagine, mean, agree, disagree, deny, promise"
        );
        assert_eq!(
            NEGATION_WORDS.join(", "),
            "not, n't, no, never, none, nobody, nothing, neither, nor, nowhere, cannot"
        );
    }

    #[test]
    fn identical_sentences_are_high_overlap_with_ratio_one() {
        let p = pair(
            "A man plays the guitar .",
            "A man plays the guitar .",
            Label::Entailment,
        );
        let tags = annotate(&p);
        assert_eq!(tags.overlap_ratio, 1.0);
        assert!(tags.high_overlap && !tags.regular_overlap && !tags.low_overlap);
    }

    #[test]
    fn overlap_ratio_is_hypothesis_relative_with_oracle_counts() {
        // Premise uniques {a,man,plays,guitar}; hypothesis uniques
        // {a,woman,plays,piano}; shared {a,plays} -> 2/4.
        let p = pair("A man plays guitar", "a woman plays piano", Label::Neutral);
        let tags = annotate(&p);
        assert_eq!(tags.overlap_ratio, 0.5);
        assert!(tags.regular_overlap);

        // Boundary cases around the 0.3 and 0.7 cuts.
        let low = pair("cats sleep all day", "dogs bark at night", Label::Neutral);
        assert!(annotate(&low).low_overlap, "no shared tokens");
        let high = pair("a b c d e f g h i j", "a b c d e f g h i k", Label::Neutral);
        let t = annotate(&high);
        assert_eq!(t.overlap_ratio, 0.9);
        assert!(t.high_overlap);
    }

    #[test]
    fn markers_and_detached_punctuation_stay_out_of_the_counts() {
        // 4 content words each; the period and markers must not count.
        let p = pair("Dogs chase the ball .", "Dogs chase the ball .", Label::Entailment);
        assert_eq!(content_tokens(&p.premise).len(), 4);
        let tags = annotate(&p);
        assert!(tags.short_sentence, "4 content tokens is short");
        assert!(!tags.regular_sentence);
    }

    #[test]
    fn length_tags_follow_both_sentences_and_may_co_occur() {
        let long_premise = (0..25).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let p = pair(&long_premise, "tiny thing", Label::Neutral);
        let tags = annotate(&p);
        assert!(tags.long_sentence, "25-token premise");
        assert!(tags.short_sentence, "2-token hypothesis");
        assert!(!tags.regular_sentence, "neither length is in 5..=20");

        let q = pair("one two three four five six", "seven eight nine ten eleven", Label::Neutral);
        let tags = annotate(&q);
        assert!(tags.regular_sentence && !tags.long_sentence && !tags.short_sentence);
    }

    #[test]
    fn special_word_tags_fire_from_either_sentence() {
        let t = annotate(&pair("He has much patience", "He waits calmly", Label::Neutral));
        assert!(t.quantifier && !t.belief && !t.negation);

        let t = annotate(&pair("She waits", "They believe her story", Label::Neutral));
        assert!(t.belief && !t.quantifier);

        let t = annotate(&pair("Nobody came to the party", "The party was empty", Label::Entailment));
        assert!(t.negation);

        let t = annotate(&pair("He didn't stop", "He kept going", Label::Entailment));
        assert!(t.negation, "contractions ending in n't count");

        let t = annotate(&pair("A dog runs", "A dog is running", Label::Entailment));
        assert!(!t.negation && !t.quantifier && !t.belief);
    }

    #[test]
    fn categorical_accuracy_matches_hand_computation() {
        use Label::*;
        let pairs = [
            pair("a b c d e", "a b c d e", Entailment),          // high overlap
            pair("a b c d e", "a b x y z", Neutral),             // regular overlap (0.6)
            pair("a b c d e", "v w x y z", Contradiction),       // low overlap
            pair("no one is here", "the room is empty", Entailment), // negation+quantifier ("no")
            pair("she can think", "she reasons", Neutral),       // belief
            pair("f g h i j", "f g h i j", Contradiction),       // high overlap
        ];
        let tagsets: Vec<TagSet> = pairs.iter().map(annotate).collect();
        let golds: Vec<Label> = pairs.iter().map(|p| p.label).collect();
        let predictions = vec![Entailment, Neutral, Neutral, Contradiction, Neutral, Contradiction];
        // Correct: pairs 0, 1, 4, 5. Wrong: 2, 3.

        let rows = categorical_accuracy(&predictions, &golds, &tagsets).unwrap();
        let row = |tag: &str| rows.iter().find(|r| r.tag == tag).unwrap().clone();

        assert_eq!(row("entailment").count, 2);
        assert_eq!(row("entailment").accuracy, Some(0.5));
        assert_eq!(row("neutral").accuracy, Some(1.0));
        assert_eq!(row("contradiction").count, 2);
        assert_eq!(row("contradiction").accuracy, Some(0.5));
        assert_eq!(row("high_overlap").count, 2);
        assert_eq!(row("high_overlap").accuracy, Some(1.0));
        assert_eq!(row("low_overlap").count, 2);
        assert_eq!(row("low_overlap").accuracy, Some(0.0));
        assert_eq!(row("negation").count, 1);
        assert_eq!(row("negation").accuracy, Some(0.0));
        assert_eq!(row("belief").count, 1);
        assert_eq!(row("belief").accuracy, Some(1.0));
        assert_eq!(row("long_sentence").count, 0);
        assert_eq!(row("long_sentence").accuracy, None, "empty category is absent, not 0%");
        assert!((row("quantifier").frequency - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_correct_predictions_score_one_in_every_populated_tag() {
        let pairs = [
            pair("a b c d e f", "a b c q r s", Label::Entailment),
            pair("no dogs bark", "it is quiet", Label::Contradiction),
        ];
        let tagsets: Vec<TagSet> = pairs.iter().map(annotate).collect();
        let golds: Vec<Label> = pairs.iter().map(|p| p.label).collect();
        let rows = categorical_accuracy(&golds, &golds, &tagsets).unwrap();
        for row in rows {
            match row.accuracy {
                Some(a) => assert_eq!(a, 1.0, "tag {}", row.tag),
                None => assert_eq!(row.count, 0),
            }
        }
    }

    #[test]
    fn misaligned_categorical_inputs_are_refused() {
        let p = pair("a b", "a b", Label::Entailment);
        let tags = vec![annotate(&p)];
        let golds = vec![Label::Entailment, Label::Neutral];
        assert!(matches!(
            categorical_accuracy(&[Label::Entailment], &golds, &tags),
            Err(Error::Contract(_))
        ));
        assert!(matches!(categorical_accuracy(&[], &[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_renders_one_column_per_model() {
        let pairs = [
            pair("a b c d e", "a b c d e", Label::Entailment),
            pair("a b c d e", "v w x y z", Label::Neutral),
        ];
        let tagsets: Vec<TagSet> = pairs.iter().map(annotate).collect();
        let golds: Vec<Label> = pairs.iter().map(|p| p.label).collect();
        let perfect = categorical_accuracy(&golds, &golds, &tagsets).unwrap();
        let flipped = vec![Label::Neutral, Label::Entailment];
        let wrong = categorical_accuracy(&flipped, &golds, &tagsets).unwrap();
        let report =
            categorical_report(&[("good".into(), perfect), ("bad".into(), wrong)]).unwrap();
        let mut lines = report.lines();
        assert_eq!(lines.next().unwrap(), "tag\tfrequency\tgood\tbad");
        let entailment = lines.next().unwrap();
        assert_eq!(entailment, "entailment\t0.5000\t1.0000\t0.0000");
        assert_eq!(report.lines().count(), 1 + TAG_NAMES.len());
    }

    // ── Chi-square ───────────────────────────────────────────────────────

    /// Builds label vectors hitting exact correct counts.
    fn labels_with_accuracy(n: usize, correct: usize) -> (Vec<Label>, Vec<Label>) {
        let golds = vec![Label::Entailment; n];
        let outputs = (0..n)
            .map(|i| if i < correct { Label::Entailment } else { Label::Neutral })
            .collect();
        (golds, outputs)
    }

    #[test]
    fn known_contingency_table_reproduces_the_textbook_statistic() {
        // Model A correct on 30/40, model B on 10/40: table [[30,10],[10,30]].
        let (golds, a) = labels_with_accuracy(40, 30);
        let (_, b) = labels_with_accuracy(40, 10);
        let result = chi_square(&a, &b, &golds).unwrap();
        assert_eq!(result.table, [[30, 10], [10, 30]]);
        assert!(
            (result.statistic - 20.0).abs() < 1e-3,
            "statistic {}",
            result.statistic
        );
        // Survival of chi-square(1) at 20: 7.744e-6.
        assert!(
            (result.p_value - 7.744e-6).abs() < 1e-8,
            "p-value {}",
            result.p_value
        );
        assert!(!result.low_expected_counts);
    }

    #[test]
    fn identical_outputs_give_zero_statistic_and_p_one() {
        let (golds, a) = labels_with_accuracy(24, 17);
        let result = chi_square(&a, &a.clone(), &golds).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn statistic_is_symmetric_in_the_two_models() {
        let (golds, a) = labels_with_accuracy(30, 22);
        let (_, b) = labels_with_accuracy(30, 13);
        let ab = chi_square(&a, &b, &golds).unwrap();
        let ba = chi_square(&b, &a, &golds).unwrap();
        assert_eq!(ab.statistic, ba.statistic);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn sparse_tables_raise_the_low_count_flag() {
        let (golds, a) = labels_with_accuracy(10, 9);
        let (_, b) = labels_with_accuracy(10, 8);
        let result = chi_square(&a, &b, &golds).unwrap();
        assert!(result.low_expected_counts, "expected wrong-cell count is tiny");
    }

    #[test]
    fn gamma_q_matches_reference_chi_square_survival_values() {
        // (statistic, survival) reference points for 1 degree of freedom.
        let table = [
            (0.0, 1.0),
            (1.0, 0.31731050786291415),
            (3.841458820694124, 0.05),
            (6.634896601021213, 0.01),
            (20.0, 7.744216431044089e-6),
        ];
        for (stat, expect) in table {
            let got = upper_gamma_regularized(0.5, stat / 2.0);
            assert!(
                (got - expect).abs() < 1e-9 * expect.max(1e-3),
                "Q(1/2, {stat}/2) = {got}, expected {expect}"
            );
        }
    }

    // ── Heatmaps ─────────────────────────────────────────────────────────

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn uniform_energy_normalizes_to_uniform_rows() {
        let weights = normalize_energy(&[2.0; 12], 3, 4).unwrap();
        for w in &weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        for r in 0..3 {
            let sum: f64 = weights[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_energy_concentrates_its_row() {
        let energy = vec![30.0, 0.0, 0.0, 0.0, 30.0, 0.0];
        let weights = normalize_energy(&energy, 2, 3).unwrap();
        assert!(weights[0] > 0.999999, "row 0 should pile onto column 0");
        assert!(weights[4] > 0.999999, "row 1 should pile onto column 1");
    }

    #[test]
    fn heatmap_csv_round_trips_with_rows_summing_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        let premise = toks(&["_FOL_", "a", "dog", "_EOL_"]);
        let hypothesis = toks(&["_FOL_", "an", "animal", "_EOL_"]);
        let energy: Vec<f64> = (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect();
        write_heatmap_csv(&path, &energy, &premise, &hypothesis).unwrap();

        let (p2, h2, weights) = read_heatmap_csv(&path).unwrap();
        assert_eq!(p2, premise);
        assert_eq!(h2, hypothesis);
        let expect = normalize_energy(&energy, 4, 4).unwrap();
        for (w, e) in weights.iter().zip(&expect) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
        }
        for r in 0..4 {
            let sum: f64 = weights[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn heatmap_shape_mismatches_are_contract_errors() {
        let premise = toks(&["a", "b"]);
        let hypothesis = toks(&["c"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        assert!(matches!(
            write_heatmap_csv(&path, &[1.0, 2.0, 3.0], &premise, &hypothesis),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            write_heatmap_svg(&path, &[], &premise, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn svg_renders_darker_cells_for_heavier_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.svg");
        let premise = toks(&["x"]);
        let hypothesis = toks(&["y", "z"]);
        // Softmax of (5, 0): weight 0.9933 vs 0.0067.
        write_heatmap_svg(&path, &[5.0, 0.0], &premise, &hypothesis).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("rgb(2,2,2)"), "heavy cell should be near black: {svg}");
        assert!(svg.contains("rgb(253,253,253)"), "light cell should be near white");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("&lt;") || !premise.iter().any(|t| t.contains('<')));
    }
}
