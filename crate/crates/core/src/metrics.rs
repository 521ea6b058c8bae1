//! Accuracy, average precision and mAP.
//!
//! AP is the non-interpolated variant normalized by the number of relevant
//! items. Units (queries or classes) with no relevant item are skipped and
//! listed in the report rather than counted as zero.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::retrieval::RankedList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub map: f64,
    /// AP per query or class, in evaluation order.
    pub per_unit_ap: IndexMap<String, f64>,
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn new(mode: impl Into<String>, per_unit_ap: IndexMap<String, f64>, skipped: Vec<String>) -> Self {
        let map = mean(per_unit_ap.values().copied());
        Self {
            mode: mode.into(),
            config: serde_json::Value::Null,
            accuracy: None,
            map,
            per_unit_ap,
            skipped,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Serialization of the metric fields only (no mode, no config echo).
    pub fn metrics_json(&self) -> String {
        #[derive(Serialize)]
        struct Metrics<'a> {
            #[serde(skip_serializing_if = "Option::is_none")]
            accuracy: Option<f64>,
            map: f64,
            per_unit_ap: &'a IndexMap<String, f64>,
            skipped: &'a [String],
        }
        serde_json::to_string_pretty(&Metrics {
            accuracy: self.accuracy,
            map: self.map,
            per_unit_ap: &self.per_unit_ap,
            skipped: &self.skipped,
        })
        .expect("metrics serialize")
    }

    /// One `unit,ap` row per evaluated unit.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["unit", "ap"]).map_err(io)?;
        for (unit, ap) in &self.per_unit_ap {
            w.write_record([unit.as_str(), &format!("{ap}")]).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Human-readable summary table.
    pub fn render_pretty(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode      {}", self.mode);
        if let Some(acc) = self.accuracy {
            let _ = writeln!(out, "accuracy  {:.2}", acc * 100.0);
        }
        let _ = writeln!(out, "mAP       {:.2}", self.map * 100.0);
        let _ = writeln!(out, "units     {} evaluated, {} skipped", self.per_unit_ap.len(), self.skipped.len());
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of ids whose prediction equals the truth.
pub fn accuracy<K: Eq + Hash + std::fmt::Debug>(
    predictions: &HashMap<K, usize>,
    truth: &HashMap<K, usize>,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Alignment("no predictions".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Alignment(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut hits = 0usize;
    for (k, p) in predictions {
        let t = truth
            .get(k)
            .ok_or_else(|| Error::Alignment(format!("no label for {k:?}")))?;
        hits += (p == t) as usize;
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Average precision of `ranking` against `relevant`.
///
/// `None` when `relevant` is empty; callers skip such units.
pub fn average_precision<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, item) in ranking.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// AP from a boolean relevance pattern where every relevant item is ranked.
pub fn average_precision_pattern(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Retrieval mAP: relevant items for a query are the ranked items sharing
/// its ground-truth class.
pub fn retrieval_map(lists: &[RankedList], manifest: &DatasetManifest) -> Result<EvalReport> {
    let mut per_query = IndexMap::with_capacity(lists.len());
    let mut skipped = Vec::new();
    for list in lists {
        let class = manifest
            .class_of(&list.query_id)
            .ok_or_else(|| Error::Lookup(format!("query {:?} not in manifest", list.query_id)))?;
        let relevance: Vec<bool> = list
            .ranking
            .iter()
            .map(|(id, _)| manifest.class_of(id) == Some(class))
            .collect();
        match average_precision_pattern(&relevance) {
            Some(ap) => {
                per_query.insert(list.query_id.clone(), ap);
            }
            None => skipped.push(list.query_id.clone()),
        }
    }
    Ok(EvalReport::new("retrieval", per_query, skipped))
}

/// Macro one-vs-rest classification mAP.
///
/// For each class, the evaluated items are ranked by their score for that
/// class (ties keep item order) and AP is taken against the items labelled
/// with it. Classes with no evaluated item are skipped.
pub fn classification_map(
    scores: &IndexMap<String, Vec<f64>>,
    manifest: &DatasetManifest,
) -> Result<EvalReport> {
    let labels: Vec<usize> = scores
        .keys()
        .map(|id| {
            manifest
                .class_of(id)
                .and_then(|c| manifest.class_index(c))
                .ok_or_else(|| Error::Lookup(format!("item {id:?} not in manifest")))
        })
        .collect::<Result<_>>()?;
    let num_classes = manifest.num_classes();
    for (id, s) in scores {
        if s.len() != num_classes {
            return Err(Error::Shape {
                expected: num_classes,
                actual: s.len(),
            });
        }
        if s.iter().any(|v| v.is_nan()) {
            return Err(Error::Integrity(format!("NaN score for {id:?}")));
        }
    }
    let rows: Vec<&Vec<f64>> = scores.values().collect();
    let mut per_class = IndexMap::new();
    let mut skipped = Vec::new();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for (c, class_id) in manifest.classes().iter().enumerate() {
        order.sort_by(|&a, &b| rows[b][c].total_cmp(&rows[a][c]).then(a.cmp(&b)));
        let relevance: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
        match average_precision_pattern(&relevance) {
            Some(ap) => {
                per_class.insert(class_id.clone(), ap);
            }
            None => skipped.push(class_id.clone()),
        }
    }
    Ok(EvalReport::new("classification", per_class, skipped))
}
