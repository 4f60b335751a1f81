//! Byte-level corpus handling: tokenisation, splits and batching.

pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::Rng;
use crate::{Error, Result};

pub const VOCAB_SIZE: usize = 256;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| u8::try_from(id).map_err(|_| Error::Data(format!("id {id} at position {i} is not a byte"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train_tokens: Vec<usize>,
    pub val_tokens: Vec<usize>,
    pub vocab_size: usize,
}

impl Corpus {
    /// Split `tokens` with the last `val_ratio` fraction (at least one window
    /// of `min_val` tokens) held out as validation.
    pub fn split(tokens: Vec<usize>, val_ratio: f64, min_val: usize) -> Result<Corpus> {
        if !(0.0..1.0).contains(&val_ratio) || val_ratio == 0.0 {
            return Err(Error::Config(format!("val_ratio must lie in (0,1), got {val_ratio}")));
        }
        let n = tokens.len();
        let n_val = ((n as f64 * val_ratio).round() as usize).max(min_val);
        if n_val >= n {
            return Err(Error::Data(format!("corpus of {n} tokens is too small for a {n_val}-token validation split")));
        }
        let mut train_tokens = tokens;
        let val_tokens = train_tokens.split_off(n - n_val);
        Ok(Corpus { train_tokens, val_tokens, vocab_size: VOCAB_SIZE })
    }

    /// Concatenate files in order, separated by a blank line.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], val_ratio: f64, min_val: usize) -> Result<Corpus> {
        if paths.is_empty() {
            return Err(Error::Data("no corpus files given".into()));
        }
        let mut bytes = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            let p = p.as_ref();
            let data = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            if i > 0 {
                bytes.extend_from_slice(b"\n\n");
            }
            bytes.extend_from_slice(&data);
        }
        Corpus::split(tokenize_bytes(&bytes), val_ratio, min_val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Shuffled non-overlapping windows with a random phase per epoch.
    #[default]
    Random,
    /// Windows in corpus order, the last one flush with the end.
    Sequential,
}

/// Inputs and next-token targets, `batch` rows of `seq_len` ids each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub starts: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Start offsets of sequential windows covering every position.
pub fn sequential_starts(len: usize, seq_len: usize) -> Result<Vec<usize>> {
    check_len(len, seq_len)?;
    let last = len - seq_len - 1;
    let mut starts: Vec<usize> = (0..=last).step_by(seq_len).collect();
    if *starts.last().expect("at least one window") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Non-overlapping windows from the start, dropping a partial tail.
pub fn disjoint_starts(len: usize, seq_len: usize) -> Result<Vec<usize>> {
    check_len(len, seq_len)?;
    Ok((0..=len - seq_len - 1).step_by(seq_len).collect())
}

fn check_len(len: usize, seq_len: usize) -> Result<()> {
    if seq_len == 0 || len < seq_len + 1 {
        return Err(Error::Data(format!("{len} tokens cannot fill one window of {seq_len} plus a target")));
    }
    Ok(())
}

/// Deterministic batch stream over one token sequence.
pub struct Batcher<'a> {
    tokens: &'a [usize],
    seq_len: usize,
    batch: usize,
    mode: BatchMode,
    rng: Rng,
    queue: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(tokens: &'a [usize], seq_len: usize, batch: usize, seed: u64, mode: BatchMode) -> Result<Self> {
        check_len(tokens.len(), seq_len)?;
        if batch == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut b = Batcher { tokens, seq_len, batch, mode, rng: Rng::new(seed), queue: Vec::new(), cursor: 0, epoch: 0 };
        b.refill();
        Ok(b)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill(&mut self) {
        let len = self.tokens.len();
        self.queue = match self.mode {
            BatchMode::Sequential => sequential_starts(len, self.seq_len).expect("length checked"),
            BatchMode::Random => {
                let span = len - self.seq_len - 1;
                let phase = self.rng.below(self.seq_len.min(span + 1));
                let mut starts: Vec<usize> = (phase..=span).step_by(self.seq_len).collect();
                self.rng.shuffle(&mut starts);
                starts
            }
        };
        self.cursor = 0;
    }

    fn next_start(&mut self) -> usize {
        if self.cursor == self.queue.len() {
            self.epoch += 1;
            self.refill();
        }
        self.cursor += 1;
        self.queue[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Batch {
        let t = self.seq_len;
        let mut inputs = Vec::with_capacity(self.batch * t);
        let mut targets = Vec::with_capacity(self.batch * t);
        let mut starts = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let s = self.next_start();
            inputs.extend_from_slice(&self.tokens[s..s + t]);
            targets.extend_from_slice(&self.tokens[s + 1..s + t + 1]);
            starts.push(s);
        }
        Batch { inputs, targets, starts, batch: self.batch, seq_len: t }
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
