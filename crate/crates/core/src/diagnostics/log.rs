//! Routing logs: a JSON header line followed by one JSON row per
//! `(layer, token)`, optionally gzip-compressed.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::moe::{RoutingRecord, Variant};
use crate::numeric::ScoreKind;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub run_id: String,
    pub checkpoint_step: usize,
    pub n_layers: usize,
    /// Routable experts, virtual ones included.
    pub n_experts: usize,
    pub top_k: usize,
    pub variant: Variant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLog {
    pub header: LogHeader,
    pub rows: Vec<RoutingRecord>,
}

impl RoutingLog {
    pub fn new(header: LogHeader, rows: Vec<RoutingRecord>) -> Result<RoutingLog> {
        let log = RoutingLog { header, rows };
        log.validate()?;
        Ok(log)
    }

    pub fn score_kind(&self) -> ScoreKind {
        self.header.variant.score_kind()
    }

    /// Layers present in the rows, ascending.
    pub fn layers(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.layer).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn layer_rows(&self, layer: usize) -> impl Iterator<Item = &RoutingRecord> {
        self.rows.iter().filter(move |r| r.layer == layer)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        let mut seen = BTreeSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            let at = || format!("row {i} (layer {}, token {})", r.layer, r.token_position);
            if !seen.insert((r.layer, r.token_position)) {
                return Err(Error::Data(format!("{} appears twice", at())));
            }
            if r.selected_ids.len() != h.top_k || r.gate_weights.len() != h.top_k {
                return Err(Error::Data(format!("{} does not carry {} selections", at(), h.top_k)));
            }
            if r.full_logits.len() != h.n_experts {
                return Err(Error::Data(format!("{} has {} logits, expected {}", at(), r.full_logits.len(), h.n_experts)));
            }
            let distinct: BTreeSet<_> = r.selected_ids.iter().collect();
            if distinct.len() != r.selected_ids.len() || r.selected_ids.iter().any(|&e| e >= h.n_experts) {
                return Err(Error::Data(format!("{} has invalid expert ids {:?}", at(), r.selected_ids)));
            }
        }
        Ok(())
    }

    /// Error unless both logs cover identical `(layer, token)` keys.
    pub fn check_aligned(&self, other: &RoutingLog) -> Result<()> {
        let a: BTreeSet<_> = self.rows.iter().map(|r| (r.layer, r.token_position)).collect();
        let b: BTreeSet<_> = other.rows.iter().map(|r| (r.layer, r.token_position)).collect();
        if a == b {
            return Ok(());
        }
        let fmt = |v: Vec<&(usize, usize)>| {
            let n = v.len();
            let mut s: Vec<String> = v.iter().take(5).map(|(l, t)| format!("({l},{t})")).collect();
            if n > 5 {
                s.push(format!("… {} more", n - 5));
            }
            s.join(" ")
        };
        let only_a = fmt(a.difference(&b).collect());
        let only_b = fmt(b.difference(&a).collect());
        Err(Error::Alignment(format!(
            "logs cover different (layer, token) keys; missing from second: [{only_a}]; missing from first: [{only_b}]"
        )))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = Vec::new();
        serde_json::to_writer(&mut text, &self.header)?;
        text.push(b'\n');
        for r in &self.rows {
            serde_json::to_writer(&mut text, r)?;
            text.push(b'\n');
        }
        let io = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut gz = GzEncoder::new(&mut w, Compression::fast());
            gz.write_all(&text).map_err(io)?;
            gz.finish().map_err(io)?;
        } else {
            w.write_all(&text).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<RoutingLog> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 2];
        let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let src: Box<dyn Read> = if n == 2 && magic == [0x1f, 0x8b] {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        let mut lines = BufReader::new(src).lines();
        let parse_err = |line: usize, e: serde_json::Error| Error::Data(format!("{}:{line}: {e}", path.display()));
        let first = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: LogHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?);
        }
        RoutingLog::new(header, rows)
    }
}
