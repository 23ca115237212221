//! Per-case scores with mean and standard deviation, serialized as tab-separated text.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::instance::{f1_instance, F1Score, InstanceMap};
use super::{class_mask, dsc, nsd};
use crate::error::{Error, Result};
use crate::tensor::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCase {
    pub id: String,
    /// One entry per foreground class `1..K`.
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
}

impl SemanticCase {
    pub fn score(id: &str, pred: &LabelMap, gt: &LabelMap, n_classes: usize, spacing: &[f64], tau: f64) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::dim(
                "evaluate",
                format!("case {id}: prediction {:?} vs label {:?}", pred.shape(), gt.shape()),
            ));
        }
        let mut out = Self {
            id: id.to_string(),
            dsc: Vec::new(),
            nsd: Vec::new(),
        };
        for c in 1..n_classes as u8 {
            let (p, g) = (class_mask(pred, c), class_mask(gt, c));
            out.dsc.push(dsc(&p, &g)?);
            out.nsd.push(nsd(&p, &g, spacing, tau)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCase {
    pub id: String,
    pub score: F1Score,
}

impl InstanceCase {
    pub fn score(id: &str, pred: &InstanceMap, gt: &InstanceMap, iou: f64) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            score: f1_instance(pred, gt, iou)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EvalReport {
    Semantic {
        class_names: Vec<String>,
        tolerance: f64,
        cases: Vec<SemanticCase>,
    },
    Instance {
        iou_threshold: f64,
        cases: Vec<InstanceCase>,
    },
}

/// Arithmetic mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Column names and per-case rows of the numeric table.
    fn table(&self) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
        match self {
            EvalReport::Semantic { class_names, cases, .. } => {
                let mut cols: Vec<String> = class_names.iter().map(|c| format!("dsc:{c}")).collect();
                cols.extend(class_names.iter().map(|c| format!("nsd:{c}")));
                let rows = cases
                    .iter()
                    .map(|c| (c.id.clone(), c.dsc.iter().chain(&c.nsd).copied().collect()))
                    .collect();
                (cols, rows)
            }
            EvalReport::Instance { cases, .. } => {
                let cols = ["precision", "recall", "f1"].map(String::from).to_vec();
                let rows = cases
                    .iter()
                    .map(|c| (c.id.clone(), vec![c.score.precision, c.score.recall, c.score.f1]))
                    .collect();
                (cols, rows)
            }
        }
    }

    /// `(column, mean, sd)` over cases.
    pub fn aggregate(&self) -> Vec<(String, f64, f64)> {
        let (cols, rows) = self.table();
        cols.into_iter()
            .enumerate()
            .map(|(j, name)| {
                let vals: Vec<f64> = rows.iter().map(|(_, r)| r[j]).collect();
                let (m, s) = mean_sd(&vals);
                (name, m, s)
            })
            .collect()
    }

    /// Mean DSC over all cases and foreground classes.
    pub fn mean_dsc(&self) -> Option<f64> {
        match self {
            EvalReport::Semantic { cases, .. } => {
                let all: Vec<f64> = cases.iter().flat_map(|c| c.dsc.iter().copied()).collect();
                Some(mean_sd(&all).0)
            }
            EvalReport::Instance { .. } => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            EvalReport::Semantic { tolerance, .. } => writeln!(out, "# semantic\ttolerance={tolerance}"),
            EvalReport::Instance { iou_threshold, .. } => writeln!(out, "# instance\tiou={iou_threshold}"),
        }
        .expect("write to string");
        let (cols, rows) = self.table();
        writeln!(out, "case\t{}", cols.join("\t")).expect("write to string");
        for (id, vals) in &rows {
            let v: Vec<String> = vals.iter().map(f64::to_string).collect();
            writeln!(out, "{id}\t{}", v.join("\t")).expect("write to string");
        }
        let agg = self.aggregate();
        let means: Vec<String> = agg.iter().map(|a| a.1.to_string()).collect();
        let sds: Vec<String> = agg.iter().map(|a| a.2.to_string()).collect();
        writeln!(out, "mean\t{}", means.join("\t")).expect("write to string");
        writeln!(out, "sd\t{}", sds.join("\t")).expect("write to string");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_is_mean_of_cases() {
        let gt = LabelMap::from_vec(&[2, 2], vec![0, 1, 1, 2]).unwrap();
        let half = LabelMap::from_vec(&[2, 2], vec![0, 1, 0, 2]).unwrap();
        let a = SemanticCase::score("a", &gt, &gt, 3, &[1.0, 1.0], 1.0).unwrap();
        let b = SemanticCase::score("b", &half, &gt, 3, &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(a.dsc, vec![1.0, 1.0]);
        assert!((b.dsc[0] - 2.0 / 3.0).abs() < 1e-15);
        let report = EvalReport::Semantic {
            class_names: vec!["one".into(), "two".into()],
            tolerance: 1.0,
            cases: vec![a, b],
        };
        let agg = report.aggregate();
        assert_eq!(agg[0].0, "dsc:one");
        assert!((agg[0].1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((agg[0].2 - (1.0 / 6.0)).abs() < 1e-15);
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "case\tdsc:one\tdsc:two\tnsd:one\tnsd:two");
        assert!(lines[2].starts_with("a\t1\t1\t"));
        assert!(lines[4].starts_with("mean\t"));
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn instance_report_rows() {
        let gt = InstanceMap::from_vec(&[1, 4], vec![1, 1, 2, 2]).unwrap();
        let report = EvalReport::Instance {
            iou_threshold: 0.5,
            cases: vec![InstanceCase::score("c", &gt, &gt, 0.5).unwrap()],
        };
        assert!(report.to_text().contains("c\t1\t1\t1"));
        assert_eq!(report.mean_dsc(), None);
    }
}
