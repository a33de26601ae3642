//! Corpus handling: capped vocabulary with a two-tier unknown mapping, token
//! streams, and truncated-BPTT batching.
//!
//! Words outside the cap become `<unk>`. Words inside the cap but rarer than
//! `rnn_unk_min_count` become `<rnn_unk>`, a rare-word class the LM predicts
//! as a single token.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const RNN_UNK: &str = "<rnn_unk>";

pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const RNN_UNK_ID: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    rare: HashSet<String>,
    /// Every capped word with its corpus count, in rank order.
    ranked: Vec<(String, u64)>,
    rnn_unk_min_count: u64,
}

/// How a word maps into the model's id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Known(usize),
    Rare,
    OutOfVocabulary,
}

impl Vocabulary {
    /// Counts whitespace-separated words, keeps the `cap` most frequent (ties
    /// broken lexicographically) and maps retained words seen fewer than
    /// `rnn_unk_min_count` times to `<rnn_unk>`.
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: usize, rnn_unk_min_count: u64) -> Result<Self> {
        if cap < 4 {
            return Err(Error::config(format!("vocabulary cap must be at least 4, got {cap}")));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(w, _)| ![EOS, UNK, RNN_UNK].contains(w))
            .map(|(w, c)| (w.to_string(), c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Ok(Self::from_ranked(ranked, rnn_unk_min_count))
    }

    fn from_ranked(ranked: Vec<(String, u64)>, rnn_unk_min_count: u64) -> Self {
        let mut words: Vec<String> = [EOS, UNK, RNN_UNK].iter().map(|s| s.to_string()).collect();
        let mut rare = HashSet::new();
        for (w, c) in &ranked {
            if *c < rnn_unk_min_count {
                rare.insert(w.clone());
            } else {
                words.push(w.clone());
            }
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary {
            words,
            ids,
            rare,
            ranked,
            rnn_unk_min_count,
        }
    }

    /// Number of model ids, specials included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of corpus words kept under the cap (never more than the cap).
    pub fn capped_len(&self) -> usize {
        self.ranked.len()
    }

    pub fn rare_len(&self) -> usize {
        self.rare.len()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ranked(&self) -> &[(String, u64)] {
        &self.ranked
    }

    pub fn rnn_unk_min_count(&self) -> u64 {
        self.rnn_unk_min_count
    }

    pub fn lookup(&self, word: &str) -> Lookup {
        if let Some(&id) = self.ids.get(word) {
            Lookup::Known(id)
        } else if self.rare.contains(word) {
            Lookup::Rare
        } else {
            Lookup::OutOfVocabulary
        }
    }

    /// Model id with the `<rnn_unk>` / `<unk>` fallbacks.
    pub fn id(&self, word: &str) -> usize {
        match self.lookup(word) {
            Lookup::Known(id) => id,
            Lookup::Rare => RNN_UNK_ID,
            Lookup::OutOfVocabulary => UNK_ID,
        }
    }

    /// Writes one `word<TAB>count` line per capped word, in rank order.
    /// Special tokens are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (w, c) in &self.ranked {
            out.push_str(w);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, rnn_unk_min_count: u64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, rnn_unk_min_count)
    }

    pub fn parse(text: &str, rnn_unk_min_count: u64) -> Result<Self> {
        let mut ranked = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected word<TAB>count".into(),
            })?;
            let c = c.trim().parse::<u64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad count {c:?}: {e}"),
            })?;
            ranked.push((w.to_string(), c));
        }
        Ok(Self::from_ranked(ranked, rnn_unk_min_count))
    }
}

/// Flat token ids, `<eos>` closing every line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode<S: AsRef<str>>(corpus: &[S], vocab: &Vocabulary) -> TokenStream {
    let mut ids = Vec::new();
    for line in corpus {
        ids.extend(line.as_ref().split_whitespace().map(|w| vocab.id(w)));
        ids.push(EOS_ID);
    }
    TokenStream { ids }
}

/// Inverse of [`encode`] for in-vocabulary text: one line per `<eos>`.
pub fn decode(stream: &TokenStream, vocab: &Vocabulary) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for &id in &stream.ids {
        if id == EOS_ID {
            lines.push(current.join(" "));
            current.clear();
        } else {
            current.push(vocab.word(id).unwrap_or(UNK));
        }
    }
    if !current.is_empty() {
        lines.push(current.join(" "));
    }
    lines
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// `inputs` and `targets` are `batch × T`, row-major by lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpttBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
}

impl BpttBatch {
    pub fn input(&self, lane: usize, t: usize) -> usize {
        self.inputs[lane * self.steps + t]
    }

    pub fn target(&self, lane: usize, t: usize) -> usize {
        self.targets[lane * self.steps + t]
    }
}

/// Splits the stream into `batch_size` contiguous lanes and cuts full
/// `bptt_len` windows from them in order, so batch `k + 1` continues every
/// lane where batch `k` stopped. Any remainder is dropped.
pub fn bptt_batches(stream: &TokenStream, batch_size: usize, bptt_len: usize) -> Result<Vec<BpttBatch>> {
    if batch_size == 0 || bptt_len == 0 {
        return Err(Error::config("batch_size and bptt_len must be at least 1"));
    }
    if stream.len() <= batch_size {
        return Err(Error::Data(format!(
            "stream of {} tokens is too short for {batch_size} lanes",
            stream.len()
        )));
    }
    let lane_len = stream.len() / batch_size;
    let num_batches = lane_len.saturating_sub(1) / bptt_len;
    if num_batches == 0 {
        return Err(Error::Data(format!(
            "lanes of {lane_len} tokens are too short for bptt_len {bptt_len}"
        )));
    }
    let lane = |b: usize| &stream.ids[b * lane_len..(b + 1) * lane_len];
    Ok((0..num_batches)
        .map(|k| {
            let start = k * bptt_len;
            let mut inputs = Vec::with_capacity(batch_size * bptt_len);
            let mut targets = Vec::with_capacity(batch_size * bptt_len);
            for b in 0..batch_size {
                inputs.extend_from_slice(&lane(b)[start..start + bptt_len]);
                targets.extend_from_slice(&lane(b)[start + 1..start + 1 + bptt_len]);
            }
            BpttBatch {
                inputs,
                targets,
                batch: batch_size,
                steps: bptt_len,
            }
        })
        .collect())
}

/// Sentences from a fixed sparse word chain over `a`..`g`, for demos and
/// ablations when no corpus is supplied. `seed` drives sampling only.
pub fn synthetic_corpus(seed: u64, lines: usize) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WORDS: [&str; 7] = ["a", "b", "c", "d", "e", "f", "g"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let table: Vec<Vec<(usize, f64)>> = (0..WORDS.len())
        .map(|_| {
            (0..3)
                .map(|_| (rng.gen_range(0..WORDS.len()), rng.gen_range(0.2..1.0)))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|_| {
            let len = rng.gen_range(3..10);
            let mut w = rng.gen_range(0..WORDS.len());
            let mut out = vec![WORDS[w]];
            while out.len() < len {
                let row = &table[w];
                let total: f64 = row.iter().map(|x| x.1).sum();
                let mut u = rng.gen_range(0.0..total);
                w = row[row.len() - 1].0;
                for &(t, p) in row {
                    if u < p {
                        w = t;
                        break;
                    }
                    u -= p;
                }
                out.push(WORDS[w]);
            }
            out.join(" ")
        })
        .collect()
}
