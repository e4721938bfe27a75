//! Word-level tokenisation, train/validation split and window batching.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Padding id; also the ignore index of the loss.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

/// Fraction of the token stream, taken from the end, held out for validation.
pub const VAL_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub id: usize,
    pub frequency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    ids: HashMap<String, usize>,
    max_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    max_size: usize,
    entries: Vec<VocabEntry>,
}

impl Vocab {
    /// The `max_size − 2` most frequent whitespace-separated words after the
    /// two reserved ids; equal counts are ordered lexicographically.
    pub fn build(text: &str, max_size: usize) -> Result<Self> {
        if max_size < 2 {
            return Err(Error::Data(format!("max_size {max_size} leaves no room for reserved ids")));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(w, _)| *w != PAD && *w != UNK)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - 2);

        let mut entries = vec![
            VocabEntry {
                token: PAD.into(),
                id: PAD_ID,
                frequency: 0,
            },
            VocabEntry {
                token: UNK.into(),
                id: UNK_ID,
                frequency: 0,
            },
        ];
        for (w, f) in ranked {
            entries.push(VocabEntry {
                token: w.to_string(),
                id: entries.len(),
                frequency: f,
            });
        }
        Self::from_entries(entries, max_size)
    }

    fn from_entries(entries: Vec<VocabEntry>, max_size: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id != i || ids.insert(e.token.clone(), i).is_some() {
                return Err(Error::Data(format!("vocabulary entry {i} ({}) is not dense and unique", e.token)));
            }
        }
        if entries.len() < 2 || entries[PAD_ID].token != PAD || entries[UNK_ID].token != UNK {
            return Err(Error::Data("reserved ids 0 and 1 missing".into()));
        }
        Ok(Vocab {
            entries,
            ids,
            max_size,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.token.as_str())
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    /// Whitespace split; unknown words map to [`UNK_ID`]. Never emits pad.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(PAD_ID) | None => UNK_ID,
                Some(id) => id,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            max_size: self.max_size,
            entries: self.entries.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_entries(f.entries, f.max_size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// UTF-8 bytes per whitespace token, counting one separating space between
/// consecutive tokens: `(Σ bytes(word) + n − 1) / n`.
pub fn bytes_per_token(text: &str) -> Result<f64> {
    let (mut n, mut bytes) = (0usize, 0usize);
    for w in text.split_whitespace() {
        n += 1;
        bytes += w.len();
    }
    if n == 0 {
        return Err(Error::Data("no tokens".into()));
    }
    Ok((bytes + n - 1) as f64 / n as f64)
}

/// An encoded corpus split into a training prefix and validation suffix.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub bytes_per_token: f64,
}

impl Corpus {
    pub fn from_text(text: &str, max_vocab: usize) -> Result<Self> {
        let vocab = Vocab::build(text, max_vocab)?;
        let ids = vocab.encode(text);
        let n_val = ((ids.len() as f64 * VAL_FRACTION).ceil() as usize).max(1);
        if n_val >= ids.len() {
            return Err(Error::Data(format!("corpus of {} tokens is too small to split", ids.len())));
        }
        let val = ids[ids.len() - n_val..].to_vec();
        let mut train = ids;
        train.truncate(train.len() - n_val);
        Ok(Corpus {
            bytes_per_token: bytes_per_token(text)?,
            vocab,
            train,
            val,
        })
    }

    pub fn from_file(path: &Path, max_vocab: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, max_vocab)
    }
}

/// Flattened `[batch, seq]` inputs and next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Number of non-overlapping windows of `seq + 1` ids (inputs plus the
/// shifted target) that tile `len` ids with stride `seq`.
pub fn window_count(len: usize, seq: usize) -> usize {
    if seq == 0 || len == 0 {
        0
    } else {
        (len - 1) / seq
    }
}

/// `(inputs, targets)` of window `w`: ids `[w·T, w·T + T)` and the same
/// range shifted by one.
pub fn window(ids: &[usize], seq: usize, w: usize) -> (&[usize], &[usize]) {
    let s = w * seq;
    (&ids[s..s + seq], &ids[s + 1..s + seq + 1])
}

/// Samples training batches from shuffled windows. The order within an
/// epoch is a permutation drawn from stream `epoch + 1` of the seed, so the
/// batch at any step is a pure function of `(ids, seq, batch, seed, step)`.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    ids: Vec<usize>,
    seq: usize,
    batch: usize,
    seed: u64,
    n_windows: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl WindowSampler {
    pub fn new(ids: Vec<usize>, seq: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq == 0 || batch == 0 {
            return Err(Error::Data("seq and batch must be positive".into()));
        }
        if ids.len() <= seq {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one window of {}",
                ids.len(),
                seq + 1
            )));
        }
        let n_windows = window_count(ids.len(), seq);
        Ok(WindowSampler {
            ids,
            seq,
            batch,
            seed,
            n_windows,
            cached: None,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_windows).collect();
        // stream 0 of the seed is left to parameter initialisation
        Rng::with_stream(self.seed, epoch + 1).shuffle(&mut order);
        order
    }

    fn window_index(&mut self, sample: u64) -> usize {
        let n = self.n_windows as u64;
        let (epoch, pos) = (sample / n, (sample % n) as usize);
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.epoch_order(epoch)));
        }
        self.cached.as_ref().expect("just filled").1[pos]
    }

    /// Batch for optimiser step `step` (micro-batch `micro` of `accum`).
    pub fn batch_at(&mut self, step: u64, micro: u64, accum: u64) -> Batch {
        let first = (step * accum + micro) * self.batch as u64;
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for j in 0..self.batch as u64 {
            let w = self.window_index(first + j);
            let (x, y) = window(&self.ids, self.seq, w);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        Batch {
            inputs,
            targets,
            batch: self.batch,
            seq: self.seq,
        }
    }
}

/// Deterministic text from a small fixed grammar, about `target_bytes`
/// long. Useful as a learnable toy corpus.
pub fn synthetic_text(target_bytes: usize, seed: u64) -> String {
    const ADJ: [&str; 6] = ["red", "small", "quiet", "old", "bright", "lazy"];
    const NOUN: [&str; 8] = ["cat", "dog", "bird", "fox", "child", "robot", "horse", "owl"];
    const VERB: [[&str; 2]; 8] = [
        ["sees", "chases"],
        ["finds", "follows"],
        ["watches", "greets"],
        ["hides", "waits"],
        ["helps", "calls"],
        ["builds", "fixes"],
        ["pulls", "carries"],
        ["hears", "watches"],
    ];
    const PREP: [&str; 3] = ["near", "under", "behind"];
    const PLACE: [&str; 5] = ["tree", "house", "river", "hill", "garden"];
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(target_bytes + 64);
    while out.len() < target_bytes {
        let n = rng.below(NOUN.len());
        let words = [
            "the",
            ADJ[rng.below(ADJ.len())],
            NOUN[n],
            VERB[n][rng.below(2)],
            "the",
            NOUN[rng.below(NOUN.len())],
            PREP[rng.below(PREP.len())],
            "the",
            PLACE[rng.below(PLACE.len())],
            ".",
        ];
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}
