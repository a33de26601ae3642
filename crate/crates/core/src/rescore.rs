//! N-best rescoring with an LM and word error rate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Lookup, Vocabulary, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{LmModel, LmState};

#[derive(Clone, Debug, PartialEq)]
pub struct NbestEntry {
    pub utt_id: String,
    pub rank: usize,
    /// Log domain.
    pub acoustic_score: f64,
    pub firstpass_lm_score: f64,
    /// May be empty: an empty hypothesis.
    pub words: Vec<String>,
}

/// Treatment of hypothesis words the LM has no id for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OovMode {
    /// Drop the word from the scored sequence.
    Skip,
    /// Score it as `<rnn_unk>` / `<unk>`, like training text.
    RnnUnk,
    /// Charge a flat `-p` instead of the model's log-probability.
    Penalty(f64),
}

impl fmt::Display for OovMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OovMode::Skip => f.write_str("skip"),
            OovMode::RnnUnk => f.write_str("rnn_unk"),
            OovMode::Penalty(p) => write!(f, "penalty:{p}"),
        }
    }
}

impl FromStr for OovMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "skip" => Ok(OovMode::Skip),
            "rnn_unk" => Ok(OovMode::RnnUnk),
            other => {
                let p = other
                    .strip_prefix("penalty:")
                    .ok_or_else(|| format!("expected skip, rnn_unk or penalty:<p>, got {other:?}"))?;
                let p: f64 = p.parse().map_err(|e| format!("bad penalty {p:?}: {e}"))?;
                if !p.is_finite() {
                    return Err(format!("penalty must be finite, got {p}"));
                }
                Ok(OovMode::Penalty(p))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescoreConfig {
    pub lm_weight: f64,
    pub word_insertion_penalty: f64,
    pub oov_mode: OovMode,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lm_weight: 1.0,
            word_insertion_penalty: 0.0,
            oov_mode: OovMode::RnnUnk,
        }
    }
}

impl RescoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::config(format!("lm_weight must be >= 0, got {}", self.lm_weight)));
        }
        if !self.word_insertion_penalty.is_finite() {
            return Err(Error::config("word_insertion_penalty must be finite"));
        }
        Ok(())
    }
}

pub type Nbest = BTreeMap<String, Vec<NbestEntry>>;

/// Parses `utt<TAB>rank<TAB>acoustic<TAB>firstpass_lm<TAB>words` lines,
/// grouping by utterance and ordering each group by rank.
pub fn parse_nbest(text: &str) -> Result<Nbest> {
    let mut out: Nbest = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str, v: &str| Error::Parse {
            line: line_no,
            msg: format!("bad {what} {v:?}"),
        };
        let utt_id = fields[0].to_string();
        if utt_id.is_empty() {
            return Err(parse_err("utterance id", fields[0]));
        }
        let rank = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err("rank", fields[1]))?;
        let acoustic_score = parse_float(fields[2]).ok_or_else(|| parse_err("acoustic score", fields[2]))?;
        let firstpass_lm_score = parse_float(fields[3]).ok_or_else(|| parse_err("lm score", fields[3]))?;
        let words = fields
            .get(4)
            .map(|w| w.split_whitespace().map(str::to_string).collect())
            .unwrap_or_default();
        let group = out.entry(utt_id.clone()).or_default();
        if group.iter().any(|e| e.rank == rank) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate rank {rank} for utterance {utt_id}"),
            });
        }
        group.push(NbestEntry {
            utt_id,
            rank,
            acoustic_score,
            firstpass_lm_score,
            words,
        });
    }
    for group in out.values_mut() {
        group.sort_by_key(|e| e.rank);
    }
    Ok(out)
}

fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_nbest(path: &Path) -> Result<Nbest> {
    parse_nbest(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Parses `utt<TAB>word word ...` reference lines.
pub fn parse_refs(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (utt, words) = line.split_once('\t').unwrap_or((line, ""));
        if utt.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "missing utterance id".into(),
            });
        }
        let words = words.split_whitespace().map(str::to_string).collect();
        if out.insert(utt.to_string(), words).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate reference for {utt}"),
            });
        }
    }
    Ok(out)
}

pub fn read_refs(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    parse_refs(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// `Σ ln P(wᵢ | w<ᵢ)` from a zero state, `<eos>` appended and scored.
pub fn score_hypothesis<S: AsRef<str>>(model: &LmModel, vocab: &Vocabulary, words: &[S], oov: OovMode) -> Result<f64> {
    let mut targets = Vec::with_capacity(words.len() + 1);
    // Some(p): position charged a flat penalty instead of its log-probability
    let mut charged = Vec::with_capacity(words.len() + 1);
    for w in words {
        let w = w.as_ref();
        match (vocab.lookup(w), oov) {
            (Lookup::Known(id), _) => {
                targets.push(id);
                charged.push(None);
            }
            (_, OovMode::Skip) => {}
            (_, OovMode::RnnUnk) => {
                targets.push(vocab.id(w));
                charged.push(None);
            }
            (_, OovMode::Penalty(p)) => {
                targets.push(vocab.id(w));
                charged.push(Some(p));
            }
        }
    }
    targets.push(EOS_ID);
    charged.push(None);
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(EOS_ID);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    let v = model.vocab_size();
    let (lp, _) = model.predict(&inputs, 1, &LmState::zeros(model.config(), 1))?;
    Ok(targets
        .iter()
        .zip(&charged)
        .enumerate()
        .map(|(t, (&y, c))| match c {
            Some(p) => -p,
            None => lp.data()[t * v + y],
        })
        .sum())
}

/// LM scores for every entry, aligned with `nbest`. Utterances are scored in
/// parallel.
pub fn score_nbest(
    model: &LmModel,
    vocab: &Vocabulary,
    nbest: &Nbest,
    oov: OovMode,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let groups: Vec<(&String, &Vec<NbestEntry>)> = nbest.iter().collect();
    let scored: Vec<(String, Vec<f64>)> = groups
        .par_iter()
        .map(|(utt, entries)| {
            let scores = entries
                .iter()
                .map(|e| score_hypothesis(model, vocab, &e.words, oov))
                .collect::<Result<Vec<f64>>>()?;
            Ok(((*utt).clone(), scores))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().collect())
}

pub fn combined_score(entry: &NbestEntry, lm_score: f64, cfg: &RescoreConfig) -> f64 {
    entry.acoustic_score + cfg.lm_weight * lm_score + cfg.word_insertion_penalty * entry.words.len() as f64
}

/// Index of the highest combined score; ties go to the lowest original rank.
pub fn select_best(entries: &[NbestEntry], lm_scores: &[f64], cfg: &RescoreConfig) -> Result<usize> {
    if entries.is_empty() {
        return Err(Error::Data("no hypotheses to select from".into()));
    }
    if entries.len() != lm_scores.len() {
        return Err(Error::Contract(format!(
            "{} lm scores for {} hypotheses",
            lm_scores.len(),
            entries.len()
        )));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (e, &s)) in entries.iter().zip(lm_scores).enumerate() {
        let total = combined_score(e, s, cfg);
        let better = total > best_score || (total == best_score && e.rank < entries[best].rank);
        if i == 0 || better {
            best = i;
            best_score = total;
        }
    }
    Ok(best)
}

/// Best entry per utterance.
pub fn combine_and_select(
    nbest: &Nbest,
    lm_scores: &BTreeMap<String, Vec<f64>>,
    cfg: &RescoreConfig,
) -> Result<BTreeMap<String, NbestEntry>> {
    let mut out = BTreeMap::new();
    for (utt, entries) in nbest {
        let scores = lm_scores
            .get(utt)
            .ok_or_else(|| Error::Contract(format!("no lm scores for {utt}")))?;
        let i = select_best(entries, scores, cfg)?;
        out.insert(utt.clone(), entries[i].clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum unit-cost Levenshtein alignment of `hyp` against `reference`.
/// Among equal-cost alignments, substitutions are preferred over
/// deletions over insertions.
pub fn align<A: PartialEq<B>, B>(reference: &[A], hyp: &[B]) -> EditCounts {
    let n = reference.len();
    let m = hyp.len();
    let mut prev: Vec<EditCounts> = (0..=m)
        .map(|j| EditCounts {
            insertions: j,
            ..EditCounts::default()
        })
        .collect();
    for i in 1..=n {
        let mut cur = Vec::with_capacity(m + 1);
        cur.push(EditCounts {
            deletions: i,
            ..EditCounts::default()
        });
        for j in 1..=m {
            let diag = if reference[i - 1] == hyp[j - 1] {
                prev[j - 1]
            } else {
                EditCounts {
                    substitutions: prev[j - 1].substitutions + 1,
                    ..prev[j - 1]
                }
            };
            let del = EditCounts {
                deletions: prev[j].deletions + 1,
                ..prev[j]
            };
            let ins = EditCounts {
                insertions: cur[j - 1].insertions + 1,
                ..cur[j - 1]
            };
            let mut best = diag;
            for c in [del, ins] {
                if c.total() < best.total() {
                    best = c;
                }
            }
            cur.push(best);
        }
        prev = cur;
    }
    prev[m]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerReport {
    pub wer_percent: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_word_count: usize,
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WER={:.2}% S={} I={} D={} N={}",
            self.wer_percent, self.substitutions, self.insertions, self.deletions, self.ref_word_count
        )
    }
}

/// Corpus-level WER. With no reference words the rate is 0 when there are
/// no errors and infinite otherwise.
pub fn wer<S: AsRef<str>>(refs: &BTreeMap<String, Vec<S>>, hyps: &BTreeMap<String, Vec<S>>) -> Result<WerReport> {
    let mut counts = EditCounts::default();
    let mut n = 0;
    for (utt, hyp) in hyps {
        let reference = refs
            .get(utt)
            .ok_or_else(|| Error::Data(format!("no reference for utterance {utt}")))?;
        let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let c = align(&r, &h);
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
        n += r.len();
    }
    let errors = counts.total();
    let wer_percent = if n > 0 {
        errors as f64 / n as f64 * 100.0
    } else if errors == 0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(WerReport {
        wer_percent,
        substitutions: counts.substitutions,
        insertions: counts.insertions,
        deletions: counts.deletions,
        ref_word_count: n,
    })
}

/// Word sequences of the selected hypotheses.
pub fn selected_words(best: &BTreeMap<String, NbestEntry>) -> BTreeMap<String, Vec<String>> {
    best.iter().map(|(u, e)| (u.clone(), e.words.clone())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lm_weight: f64,
    pub word_insertion_penalty: f64,
    pub report: WerReport,
}

/// WER at every `(lm_weight, wip)` grid point, in grid order.
pub fn sweep(
    nbest: &Nbest,
    lm_scores: &BTreeMap<String, Vec<f64>>,
    refs: &BTreeMap<String, Vec<String>>,
    lm_weights: &[f64],
    wips: &[f64],
    oov_mode: OovMode,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(lm_weights.len() * wips.len());
    for &lm_weight in lm_weights {
        for &wip in wips {
            let cfg = RescoreConfig {
                lm_weight,
                word_insertion_penalty: wip,
                oov_mode,
            };
            cfg.validate()?;
            let best = combine_and_select(nbest, lm_scores, &cfg)?;
            out.push(SweepPoint {
                lm_weight,
                word_insertion_penalty: wip,
                report: wer(refs, &selected_words(&best))?,
            });
        }
    }
    Ok(out)
}
