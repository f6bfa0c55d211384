//! Corpus ingestion, tokenization, and unseen-word recovery.
//!
//! Input records arrive as newline-delimited structured text with a gold
//! label and two sentences (optionally with binary parse trees). Every
//! token list is wrapped in `_FOL_`/`_EOL_` markers. Words the vocabulary
//! has never seen go through a recovery ladder (lowercase, hyphen split,
//! "un" split, spell correction, compound split) before falling back to
//! the unknown marker.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::embeddings::{Vocabulary, EOL, FOL, UNK};
use crate::error::{Error, Result};

// ── Labels and pairs ─────────────────────────────────────────────────────

/// Gold relation between premise and hypothesis. The discriminant order is
/// the probability-vector order used everywhere downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Data(format!("label index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled example. Token lists start with `_FOL_` and end with `_EOL_`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub id: String,
    pub label: Label,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
}

/// Pairs plus what the loader had to discard.
#[derive(Debug)]
pub struct LoadReport {
    pub pairs: Vec<SentencePair>,
    /// Records whose annotators reached no consensus (gold label "-").
    pub dropped_no_consensus: usize,
}

// ── Tokenization ─────────────────────────────────────────────────────────

pub const TERMINAL_PUNCT: [char; 5] = ['.', ',', '!', '?', ';'];

/// Leaves of a bracketed binary parse: every whitespace token that is not
/// a parenthesis.
pub fn parse_leaves(parse: &str) -> Vec<String> {
    parse
        .split_whitespace()
        .filter(|t| *t != "(" && *t != ")")
        .map(str::to_string)
        .collect()
}

fn split_plain(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        // Detach trailing terminal punctuation, each mark its own token.
        let mut stem = word;
        let mut tail = Vec::new();
        while let Some(last) = stem.chars().last() {
            if stem.chars().count() > 1 && TERMINAL_PUNCT.contains(&last) {
                stem = &stem[..stem.len() - last.len_utf8()];
                tail.push(last.to_string());
            } else {
                break;
            }
        }
        out.push(stem.to_string());
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Tokenizes one sentence and wraps it in the start/end markers. Uses the
/// parse's leaves when a parse is supplied, plain splitting otherwise.
pub fn tokenize(text: &str, binary_parse: Option<&str>) -> Result<Vec<String>> {
    let inner = match binary_parse {
        Some(p) if !p.trim().is_empty() => parse_leaves(p),
        _ => split_plain(text),
    };
    if inner.is_empty() {
        return Err(Error::Contract(format!(
            "cannot tokenize an empty sentence (text {text:?})"
        )));
    }
    let mut tokens = Vec::with_capacity(inner.len() + 2);
    tokens.push(FOL.to_string());
    tokens.extend(inner);
    tokens.push(EOL.to_string());
    Ok(tokens)
}

// ── Corpus files ─────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct RawRecord {
    gold_label: String,
    sentence1: String,
    sentence2: String,
    #[serde(default)]
    sentence1_binary_parse: Option<String>,
    #[serde(default)]
    sentence2_binary_parse: Option<String>,
    #[serde(default, rename = "pairID")]
    pair_id: Option<String>,
}

/// Reads newline-delimited structured records, dropping the no-consensus
/// ones and counting them.
pub fn load_snli(reader: impl Read) -> Result<LoadReport> {
    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if rec.gold_label == "-" {
            dropped += 1;
            continue;
        }
        let label = Label::parse(&rec.gold_label)
            .map_err(|e| Error::Data(format!("line {}: {e}", idx + 1)))?;
        let premise = tokenize(&rec.sentence1, rec.sentence1_binary_parse.as_deref())?;
        let hypothesis = tokenize(&rec.sentence2, rec.sentence2_binary_parse.as_deref())?;
        pairs.push(SentencePair {
            id: rec.pair_id.unwrap_or_else(|| format!("line-{}", idx + 1)),
            label,
            premise,
            hypothesis,
        });
    }
    Ok(LoadReport { pairs, dropped_no_consensus: dropped })
}

fn check_markers(tokens: &[String], line: usize) -> Result<()> {
    let ok = tokens.len() >= 2
        && tokens.first().map(String::as_str) == Some(FOL)
        && tokens.last().map(String::as_str) == Some(EOL);
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            line,
            detail: format!("token list must be wrapped in {FOL}/{EOL}, got {tokens:?}"),
        })
    }
}

/// Writes pairs as `id<TAB>label<TAB>premise tokens<TAB>hypothesis tokens`.
pub fn save_tsv(pairs: &[SentencePair], w: &mut impl Write) -> Result<()> {
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.id,
            p.label,
            p.premise.join(" "),
            p.hypothesis.join(" ")
        )?;
    }
    Ok(())
}

/// Reads the tab-separated form written by [`save_tsv`].
pub fn load_tsv(reader: impl Read) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let label = Label::parse(fields[1])
            .map_err(|e| Error::Data(format!("line {}: {e}", idx + 1)))?;
        let premise: Vec<String> = fields[2].split_whitespace().map(str::to_string).collect();
        let hypothesis: Vec<String> =
            fields[3].split_whitespace().map(str::to_string).collect();
        check_markers(&premise, idx + 1)?;
        check_markers(&hypothesis, idx + 1)?;
        pairs.push(SentencePair {
            id: fields[0].to_string(),
            label,
            premise,
            hypothesis,
        });
    }
    Ok(pairs)
}

/// Loads either record format from disk, sniffing by the first byte: `{`
/// means structured records, anything else the tab-separated form.
pub fn load_pairs(path: &Path) -> Result<LoadReport> {
    let content = std::fs::read_to_string(path)?;
    let first = content.trim_start().chars().next();
    if first == Some('{') {
        load_snli(content.as_bytes())
    } else {
        Ok(LoadReport {
            pairs: load_tsv(content.as_bytes())?,
            dropped_no_consensus: 0,
        })
    }
}

/// Builds the training vocabulary from both sentences of every pair.
pub fn build_vocabulary(pairs: &[SentencePair]) -> Vocabulary {
    Vocabulary::build(
        pairs
            .iter()
            .flat_map(|p| [p.premise.iter(), p.hypothesis.iter()]),
    )
}

// ── Unseen-word recovery ─────────────────────────────────────────────────

/// Damerau-Levenshtein distance: insertions, deletions, substitutions,
/// and transpositions, where a transposed pair may straddle other edits
/// ("daschunds" to "dachshunds" is a swap plus an insertion, distance 2).
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    if m == 0 {
        return n;
    }
    // Lowrance-Wagner: d is (n+2) x (m+2) with a sentinel border; last_row
    // tracks the last row where each character of a occurred.
    let w = m + 2;
    let inf = n + m;
    let mut d = vec![0usize; (n + 2) * w];
    d[0] = inf;
    for i in 0..=n {
        d[(i + 1) * w] = inf;
        d[(i + 1) * w + 1] = i;
    }
    for j in 0..=m {
        d[j + 1] = inf;
        d[w + j + 1] = j;
    }
    let mut last_row: HashMap<char, usize> = HashMap::new();
    for i in 1..=n {
        let mut last_col = 0usize;
        for j in 1..=m {
            let k = *last_row.get(&b[j - 1]).unwrap_or(&0);
            let l = last_col;
            let cost = if a[i - 1] == b[j - 1] {
                last_col = j;
                0
            } else {
                1
            };
            let sub = d[i * w + j] + cost;
            let ins = d[(i + 1) * w + j] + 1;
            let del = d[i * w + j + 1] + 1;
            let trans = d[k * w + l] + (i - k - 1) + 1 + (j - l - 1);
            d[(i + 1) * w + j + 1] = sub.min(ins).min(del).min(trans);
        }
        last_row.insert(a[i - 1], i);
    }
    d[(n + 1) * w + m + 1]
}

fn is_marker(token: &str) -> bool {
    token == FOL || token == EOL || token == UNK
}

/// Picks the closest in-vocabulary word within edit distance 2,
/// case-insensitively. Preference order: highest training frequency,
/// then lowest distance, then lexicographic.
pub fn spell_correct(token: &str, vocab: &Vocabulary) -> Option<String> {
    debug_assert!(
        vocab.id(token).is_none(),
        "spell_correct called on in-vocabulary token {token:?}"
    );
    let lower = token.to_lowercase();
    let token_len = lower.chars().count();
    let mut best: Option<(u64, usize, &str)> = None;
    for cand in vocab.tokens() {
        if is_marker(cand) {
            continue;
        }
        let cand_len = cand.chars().count();
        if cand_len.abs_diff(token_len) > 2 {
            continue;
        }
        let dist = edit_distance(&lower, &cand.to_lowercase());
        if dist > 2 {
            continue;
        }
        let freq = vocab.count(cand);
        let better = match &best {
            None => true,
            Some((bf, bd, bt)) => {
                (freq, std::cmp::Reverse(dist), std::cmp::Reverse(cand.as_str()))
                    > (*bf, std::cmp::Reverse(*bd), std::cmp::Reverse(*bt))
            }
        };
        if better {
            best = Some((freq, dist, cand));
        }
    }
    best.map(|(_, _, t)| t.to_string())
}

/// Resolves one piece of a split against the vocabulary, accepting the
/// piece itself or its lowercase form.
fn resolve_piece(piece: &str, vocab: &Vocabulary) -> Option<String> {
    if vocab.contains(piece) {
        return Some(piece.to_string());
    }
    let lower = piece.to_lowercase();
    vocab.contains(&lower).then_some(lower)
}

fn resolve_all(pieces: &[&str], vocab: &Vocabulary) -> Option<Vec<String>> {
    pieces.iter().map(|p| resolve_piece(p, vocab)).collect()
}

/// Tries every two-part split of the word; both halves must resolve.
/// The best split has the highest summed frequency, ties going to the
/// earliest split point.
fn split_compound(token: &str, vocab: &Vocabulary) -> Option<Vec<String>> {
    let mut best: Option<(u64, Vec<String>)> = None;
    for (i, _) in token.char_indices().skip(1) {
        let (a, b) = token.split_at(i);
        if let Some(parts) = resolve_all(&[a, b], vocab) {
            let freq = vocab.count(&parts[0]) + vocab.count(&parts[1]);
            let better = best.as_ref().map_or(true, |(bf, _)| freq > *bf);
            if better {
                best = Some((freq, parts));
            }
        }
    }
    best.map(|(_, parts)| parts)
}

/// Maps an unseen token to known ones. Attempts in order: lowercase;
/// hyphen split; "un" prefix split; spell correction; two-part compound
/// split; the unknown marker. The first attempt whose every piece is in
/// the vocabulary wins.
pub fn recover_oov(token: &str, vocab: &Vocabulary) -> Vec<String> {
    debug_assert!(
        vocab.id(token).is_none(),
        "recover_oov called on in-vocabulary token {token:?}"
    );

    let lower = token.to_lowercase();
    if vocab.contains(&lower) {
        return vec![lower];
    }
    if token.contains('-') {
        let pieces: Vec<&str> = token.split('-').filter(|p| !p.is_empty()).collect();
        if pieces.len() > 1 {
            if let Some(parts) = resolve_all(&pieces, vocab) {
                return parts;
            }
        }
    }
    if lower.starts_with("un") && token.chars().count() > 2 {
        let tail: String = token.chars().skip(2).collect();
        if let Some(parts) = resolve_all(&["un", &tail], vocab) {
            return parts;
        }
    }
    if let Some(corrected) = spell_correct(token, vocab) {
        return vec![corrected];
    }
    if let Some(parts) = split_compound(token, vocab) {
        return parts;
    }
    vec![UNK.to_string()]
}

/// Applies recovery across a token list, flattening multi-word results.
pub fn map_tokens(tokens: &[String], vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        if vocab.contains(t) {
            out.push(t.clone());
        } else {
            out.extend(recover_oov(t, vocab));
        }
    }
    out
}

/// Recovery plus id lookup; every output id is a valid row.
pub fn encode_ids(tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
    map_tokens(tokens, vocab)
        .iter()
        .map(|t| vocab.id(t).expect("recovery only emits vocabulary tokens"))
        .collect()
}

/// How many positions of a token list would hit the unknown row, with and
/// without recovery. Useful for reporting recovery effectiveness.
pub fn unknown_counts(tokens: &[String], vocab: &Vocabulary) -> (usize, usize) {
    let without = tokens.iter().filter(|t| !vocab.contains(t.as_str())).count();
    let with = encode_ids(tokens, vocab)
        .iter()
        .filter(|&&id| id == vocab.unk_id())
        .count();
    (with, without)
}

/// A pair mapped to vocabulary ids, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedPair {
    pub id: String,
    pub label: Label,
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

/// Maps pairs to ids, recovering unseen words along the way.
pub fn index_pairs(pairs: &[SentencePair], vocab: &Vocabulary) -> Vec<IndexedPair> {
    let mut rec = Recoverer::new(vocab);
    pairs
        .iter()
        .map(|p| IndexedPair {
            id: p.id.clone(),
            label: p.label,
            premise: rec.encode(&p.premise),
            hypothesis: rec.encode(&p.hypothesis),
        })
        .collect()
}

/// Label histogram as fractions in label-index order.
pub fn label_fractions(pairs: &[SentencePair]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for p in pairs {
        counts[p.label.index()] += 1;
    }
    let total = pairs.len().max(1) as f64;
    [
        counts[0] as f64 / total,
        counts[1] as f64 / total,
        counts[2] as f64 / total,
    ]
}

/// Convenience over [`map_tokens`]: caches distinct-token recoveries so
/// repeated words across a corpus pay for the vocabulary scan once.
pub struct Recoverer<'a> {
    vocab: &'a Vocabulary,
    cache: HashMap<String, Vec<String>>,
}

impl<'a> Recoverer<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        Recoverer { vocab, cache: HashMap::new() }
    }

    pub fn map(&mut self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            if self.vocab.contains(t) {
                out.push(t.clone());
                continue;
            }
            let parts = self
                .cache
                .entry(t.clone())
                .or_insert_with(|| recover_oov(t, self.vocab));
            out.extend(parts.iter().cloned());
        }
        out
    }

    pub fn encode(&mut self, tokens: &[String]) -> Vec<usize> {
        self.map(tokens)
            .iter()
            .map(|t| self.vocab.id(t).expect("recovery only emits vocabulary tokens"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_from(words: &[(&str, usize)]) -> Vocabulary {
        // Repeat each word to give it the requested training frequency.
        let sentences: Vec<Vec<String>> = words
            .iter()
            .map(|(w, n)| std::iter::repeat(w.to_string()).take(*n).collect())
            .collect();
        Vocabulary::build(sentences)
    }

    #[test]
    fn label_order_is_pinned() {
        assert_eq!(Label::Entailment.index(), 0);
        assert_eq!(Label::Neutral.index(), 1);
        assert_eq!(Label::Contradiction.index(), 2);
        assert_eq!(Label::parse("neutral").unwrap(), Label::Neutral);
        assert!(Label::parse("ENTAILMENT").is_err());
        assert_eq!(Label::from_index(2).unwrap(), Label::Contradiction);
        assert!(Label::from_index(3).is_err());
    }

    #[test]
    fn plain_tokenization_detaches_terminal_punctuation() {
        let t = tokenize("A man runs.", None).unwrap();
        assert_eq!(t, ["_FOL_", "A", "man", "runs", ".", "_EOL_"]);

        let t = tokenize("wait, what?!", None).unwrap();
        assert_eq!(t, ["_FOL_", "wait", ",", "what", "?", "!", "_EOL_"]);

        // Internal punctuation stays attached; lone marks survive.
        let t = tokenize("well-known . thing", None).unwrap();
        assert_eq!(t, ["_FOL_", "well-known", ".", "thing", "_EOL_"]);
    }

    #[test]
    fn parse_leaves_drop_brackets_only() {
        let parse = "( ( A man ) ( ( runs ) . ) )";
        assert_eq!(parse_leaves(parse), ["A", "man", "runs", "."]);
        let t = tokenize("ignored", Some(parse)).unwrap();
        assert_eq!(t, ["_FOL_", "A", "man", "runs", ".", "_EOL_"]);
    }

    #[test]
    fn empty_sentence_is_a_contract_error() {
        assert!(matches!(tokenize("   ", None), Err(Error::Contract(_))));
        assert!(matches!(tokenize("", Some("( )")), Err(Error::Contract(_))));
    }

    #[test]
    fn record_loading_drops_no_consensus_and_counts_them() {
        let jsonl = concat!(
            r#"{"gold_label": "entailment", "sentence1": "A dog runs.", "sentence2": "An animal moves.", "pairID": "p1"}"#,
            "\n",
            r#"{"gold_label": "-", "sentence1": "A dog runs.", "sentence2": "Unclear."}"#,
            "\n",
            r#"{"gold_label": "contradiction", "sentence1": "A dog runs.", "sentence2": "The dog sleeps."}"#,
            "\n"
        );
        let report = load_snli(jsonl.as_bytes()).unwrap();
        assert_eq!(report.pairs.len(), 2);
        assert_eq!(report.dropped_no_consensus, 1);
        assert_eq!(report.pairs[0].id, "p1");
        assert_eq!(report.pairs[1].id, "line-3");
        assert_eq!(report.pairs[0].label, Label::Entailment);
        assert_eq!(
            report.pairs[0].premise,
            ["_FOL_", "A", "dog", "runs", ".", "_EOL_"]
        );
    }

    #[test]
    fn record_loader_reports_line_numbers_and_bad_labels() {
        let jsonl = "{\"gold_label\": \"entailment\", \"sentence1\": \"a\", \"sentence2\": \"b\"}\nnot json\n";
        let err = load_snli(jsonl.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "got {err}");

        let jsonl = r#"{"gold_label": "maybe", "sentence1": "a", "sentence2": "b"}"#;
        let err = load_snli(jsonl.as_bytes()).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("line 1") && msg.contains("maybe")),
            other => panic!("expected data error, got {other}"),
        }
    }

    #[test]
    fn tsv_roundtrip_preserves_pairs() {
        let jsonl = concat!(
            r#"{"gold_label": "neutral", "sentence1": "Kids play outside.", "sentence2": "Kids are happy."}"#,
            "\n"
        );
        let pairs = load_snli(jsonl.as_bytes()).unwrap().pairs;
        let mut buf = Vec::new();
        save_tsv(&pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("line-1\tneutral\t_FOL_ Kids play outside . _EOL_\t"));
        let back = load_tsv(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
    }

    #[test]
    fn tsv_loader_rejects_missing_markers_and_bad_field_counts() {
        let err = load_tsv("id\tneutral\tno markers here\t_FOL_ x _EOL_\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = load_tsv("id\tneutral\tonly three fields\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn edit_distance_counts_transpositions_as_one() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("abc", "acb"), 1);
        assert_eq!(edit_distance("abc", "axc"), 1);
        assert_eq!(edit_distance("abc", "ab"), 1);
        assert_eq!(edit_distance("", "ab"), 2);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        // A swap whose halves end up separated by an insertion still
        // counts as one transposition plus one insertion.
        assert_eq!(edit_distance("daschunds", "dachshunds"), 2);
        // Symmetry and the plain-Levenshtein cases agree.
        assert_eq!(edit_distance("dachshunds", "daschunds"), 2);
        assert_eq!(edit_distance("ca", "abc"), 2);
    }

    #[test]
    fn recovery_ladder_applies_rules_in_order() {
        let v = vocab_from(&[("dog", 5), ("marsh", 2), ("like", 9), ("un", 3), ("tied", 4)]);
        assert_eq!(recover_oov("Dog", &v), ["dog"]);
        assert_eq!(recover_oov("marsh-like", &v), ["marsh", "like"]);
        assert_eq!(recover_oov("Marsh-Like", &v), ["marsh", "like"]);
        assert_eq!(recover_oov("untied", &v), ["un", "tied"]);
        // Nothing matches: unknown marker.
        assert_eq!(recover_oov("xylophone", &v), [UNK]);
    }

    #[test]
    fn spell_correction_ranks_frequency_then_distance_then_spelling() {
        // "cet" is distance 1 from both; the more frequent word wins.
        let v = vocab_from(&[("cat", 3), ("cot", 10)]);
        assert_eq!(spell_correct("cet", &v), Some("cot".into()));

        // Equal frequency: the closer candidate wins.
        let v = vocab_from(&[("cast", 4), ("canst", 4)]);
        assert_eq!(spell_correct("casta", &v), Some("cast".into()));

        // Equal frequency and distance: lexicographically first.
        let v = vocab_from(&[("cot", 2), ("cat", 2)]);
        assert_eq!(spell_correct("cut", &v), Some("cat".into()));

        // Beyond distance 2 finds nothing.
        let v = vocab_from(&[("elephant", 50)]);
        assert_eq!(spell_correct("cat", &v), None);
    }

    #[test]
    fn compound_split_prefers_frequent_pieces_then_earliest_cut() {
        // No single vocabulary word is within editing reach of the
        // compound, so the split heuristic decides.
        let v = vocab_from(&[("sun", 5), ("flower", 3), ("sunf", 1), ("lower", 2)]);
        assert_eq!(recover_oov("sunflower", &v), ["sun", "flower"]);

        // Tie on summed frequency: earliest split point wins.
        let v = vocab_from(&[("river", 3), ("bank", 3), ("riv", 2), ("erbank", 4)]);
        assert_eq!(recover_oov("riverbank", &v), ["riv", "erbank"]);
    }

    #[test]
    fn typo_fixture_sentences_recover_exactly() {
        let v = vocab_from(&[
            ("Friends", 3),
            ("eastern", 3),
            ("photographer", 3),
            ("fighting", 3),
            ("killed", 3),
            ("environment", 3),
            ("dachshunds", 3),
            ("marsh", 3),
            ("like", 3),
            ("jacket", 3),
            ("sculpture", 3),
            ("never", 3),
            ("ending", 3),
            ("emanating", 3),
            ("shopping", 3),
            ("Lamborghini", 3),
        ]);
        let cases = [
            ("Froends", vec!["Friends"]),
            ("easten", vec!["eastern"]),
            ("phtographer", vec!["photographer"]),
            ("fighitn", vec!["fighting"]),
            ("kiled", vec!["killed"]),
            ("enviroment", vec!["environment"]),
            ("daschunds", vec!["dachshunds"]),
            ("marsh-like", vec!["marsh", "like"]),
            ("jacker", vec!["jacket"]),
            ("sculture", vec!["sculpture"]),
            ("neverending", vec!["never", "ending"]),
            ("emanting", vec!["emanating"]),
            ("shpping", vec!["shopping"]),
            ("Lambourgini", vec!["Lamborghini"]),
        ];
        for (typo, expect) in cases {
            assert_eq!(recover_oov(typo, &v), expect, "typo {typo:?}");
        }
    }

    #[test]
    fn sentence_level_recovery_is_idempotent_and_reduces_unknowns() {
        let v = vocab_from(&[("a", 9), ("dog", 5), ("runs", 4), ("rnus", 0)]);
        let tokens: Vec<String> = ["_FOL_", "A", "Dog", "rnsu", "qqq", "_EOL_"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let once = map_tokens(&tokens, &v);
        let twice = map_tokens(&once, &v);
        assert_eq!(once, twice, "recovery must be idempotent");

        let (with, without) = unknown_counts(&tokens, &v);
        assert!(with < without, "recovery must strictly reduce unknowns");
        assert_eq!(without, 4); // A, Dog, rnsu, qqq all unseen verbatim
        assert_eq!(with, 1); // only qqq is beyond saving

        let ids = encode_ids(&tokens, &v);
        assert_eq!(ids.len(), once.len());
        assert_eq!(ids[0], v.fol_id());
        assert_eq!(*ids.last().unwrap(), v.eol_id());
    }

    #[test]
    fn cached_recovery_matches_direct_recovery() {
        let v = vocab_from(&[("dog", 5), ("cat", 5)]);
        let tokens: Vec<String> = ["Dog", "Dog", "caat", "zzz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut r = Recoverer::new(&v);
        assert_eq!(r.map(&tokens), map_tokens(&tokens, &v));
        assert_eq!(r.encode(&tokens), encode_ids(&tokens, &v));
    }

    #[test]
    fn label_fractions_sum_to_one() {
        let jsonl = concat!(
            r#"{"gold_label": "entailment", "sentence1": "a b", "sentence2": "c"}"#,
            "\n",
            r#"{"gold_label": "entailment", "sentence1": "a b", "sentence2": "c"}"#,
            "\n",
            r#"{"gold_label": "contradiction", "sentence1": "a b", "sentence2": "c"}"#,
            "\n",
            r#"{"gold_label": "neutral", "sentence1": "a b", "sentence2": "c"}"#,
            "\n"
        );
        let pairs = load_snli(jsonl.as_bytes()).unwrap().pairs;
        let f = label_fractions(&pairs);
        assert_eq!(f, [0.5, 0.25, 0.25]);
    }
}
