//! Serializable metric reports and their CSV export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{EcaMatrix, LayerValues, Similarity};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerLayer,
    Aggregate,
    Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub scope: Scope,
    /// Row labels of `values` (e.g. `layer0`, `aggregate`).
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub col_labels: Vec<String>,
    pub steps: Vec<usize>,
    pub params: BTreeMap<String, serde_json::Value>,
}

pub const CSV_HEADER: &str = "metric,scope,row,col,value";

impl MetricReport {
    pub fn layered(metric: &str, v: &LayerValues, steps: Vec<usize>) -> MetricReport {
        let mut labels: Vec<String> = v.layers.iter().map(|l| format!("layer{l}")).collect();
        labels.push("aggregate".into());
        let mut values = v.per_layer.clone();
        values.push(v.aggregate);
        MetricReport {
            metric: metric.into(),
            scope: Scope::PerLayer,
            labels,
            values,
            matrix: None,
            col_labels: Vec::new(),
            steps,
            params: BTreeMap::new(),
        }
    }

    pub fn scalar(metric: &str, label: &str, value: f64, steps: Vec<usize>) -> MetricReport {
        MetricReport {
            metric: metric.into(),
            scope: Scope::Aggregate,
            labels: vec![label.into()],
            values: vec![value],
            matrix: None,
            col_labels: Vec::new(),
            steps,
            params: BTreeMap::new(),
        }
    }

    pub fn eca(m: &EcaMatrix, steps: Vec<usize>) -> MetricReport {
        let labels: Vec<String> = (0..m.values.len()).map(|i| format!("expert{i}")).collect();
        let mut r = MetricReport {
            metric: "eca".into(),
            scope: Scope::Matrix,
            labels: labels.clone(),
            values: m.activations.iter().map(|&a| a as f64).collect(),
            matrix: Some(m.values.clone()),
            col_labels: labels,
            steps,
            params: BTreeMap::new(),
        };
        r.params.insert("empty_rows".into(), serde_json::json!(m.empty_rows));
        r
    }

    pub fn similarity(s: &Similarity, steps: Vec<usize>) -> MetricReport {
        let labels: Vec<String> = (0..s.matrix.len()).map(|i| format!("expert{i}")).collect();
        let mut r = MetricReport {
            metric: "similarity".into(),
            scope: Scope::Matrix,
            labels: vec![format!("layer{}", s.layer)],
            values: vec![s.mean],
            matrix: Some(s.matrix.clone()),
            col_labels: labels,
            steps,
            params: BTreeMap::new(),
        };
        r.params.insert("layer".into(), serde_json::json!(s.layer));
        r
    }

    pub fn with_param(mut self, key: &str, value: impl Serialize) -> MetricReport {
        self.params.insert(key.into(), serde_json::to_value(value).expect("serialisable parameter"));
        self
    }

    pub fn to_csv(&self) -> String {
        let scope = serde_json::to_value(self.scope).expect("scope").as_str().unwrap_or_default().to_string();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        match &self.matrix {
            Some(m) => {
                let rows: Vec<String> = if m.len() == self.col_labels.len() {
                    self.col_labels.clone()
                } else {
                    (0..m.len()).map(|i| format!("expert{i}")).collect()
                };
                for (i, row) in m.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        out.push_str(&format!("{},{scope},{},{},{v}\n", self.metric, rows[i], self.col_labels[j]));
                    }
                }
            }
            None => {
                for (l, v) in self.labels.iter().zip(&self.values) {
                    out.push_str(&format!("{},{scope},{l},,{v}\n", self.metric));
                }
            }
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
