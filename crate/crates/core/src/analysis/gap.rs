//! Vanilla-KD-versus-best-alternative accuracy gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VANILLA: &str = "KD";

/// Final accuracy of one method on one teacher→student pair at one
/// training-set scale (fraction of the full split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub pair: String,
    pub scale: f64,
    pub method: String,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub pair: String,
    pub scale: f64,
    /// Best top-1 per method.
    pub accuracies: BTreeMap<String, f64>,
    pub best_other: String,
    /// KD minus the best other method; negative when KD trails.
    pub delta: f64,
}

impl PairGap {
    fn from_accuracies(pair: &str, scale: f64, accuracies: BTreeMap<String, f64>) -> Result<Self> {
        let kd = *accuracies.get(VANILLA).ok_or_else(|| {
            Error::Report(format!("pair `{pair}` at scale {scale} has no {VANILLA} entry"))
        })?;
        let (best_other, best) = accuracies
            .iter()
            .filter(|(m, _)| m.as_str() != VANILLA)
            .fold(None::<(&String, f64)>, |acc, (m, &v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((m, v)),
            })
            .ok_or_else(|| {
                Error::Report(format!("pair `{pair}` at scale {scale} has no method besides {VANILLA}"))
            })?;
        Ok(Self {
            pair: pair.to_string(),
            scale,
            best_other: best_other.clone(),
            delta: kd - best,
            accuracies,
        })
    }

    /// Delta derived again from the stored accuracies.
    pub fn recompute_delta(&self) -> Result<f64> {
        Self::from_accuracies(&self.pair, self.scale, self.accuracies.clone()).map(|g| g.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GapReport {
    pub entries: Vec<PairGap>,
}

impl GapReport {
    pub fn get(&self, pair: &str, scale: f64) -> Option<&PairGap> {
        self.entries.iter().find(|g| g.pair == pair && g.scale == scale)
    }
}

type Groups = Vec<((String, f64), BTreeMap<String, f64>)>;

fn group(results: &[MethodResult]) -> Groups {
    let mut groups: Groups = Vec::new();
    for r in results {
        let pos = groups.iter().position(|((p, s), _)| *p == r.pair && *s == r.scale);
        let idx = pos.unwrap_or_else(|| {
            groups.push(((r.pair.clone(), r.scale), BTreeMap::new()));
            groups.len() - 1
        });
        let acc = groups[idx].1.entry(r.method.clone()).or_insert(f64::NEG_INFINITY);
        *acc = acc.max(r.top1);
    }
    groups.sort_by(|a, b| a.0 .0.cmp(&b.0 .0).then(a.0 .1.total_cmp(&b.0 .1)));
    groups
}

/// One entry per (pair, scale). Every group needs a KD result and at least
/// one other method; repeated results for a method keep the best.
pub fn gap_table(results: &[MethodResult]) -> Result<GapReport> {
    let entries = group(results)
        .into_iter()
        .map(|((pair, scale), acc)| PairGap::from_accuracies(&pair, scale, acc))
        .collect::<Result<_>>()?;
    Ok(GapReport { entries })
}

/// As [`gap_table`], silently skipping groups that lack the preconditions.
pub fn gap_table_partial(results: &[MethodResult]) -> GapReport {
    let entries = group(results)
        .into_iter()
        .filter_map(|((pair, scale), acc)| PairGap::from_accuracies(&pair, scale, acc).ok())
        .collect();
    GapReport { entries }
}

/// One row per (pair, scale, method) with the method's offset from KD.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub pair: String,
    pub scale: f64,
    pub method: String,
    pub top1: f64,
    pub minus_kd: Option<f64>,
}

pub fn gap_vs_scale(results: &[MethodResult]) -> Vec<ScaleRow> {
    let mut rows = Vec::new();
    for ((pair, scale), acc) in group(results) {
        let kd = acc.get(VANILLA).copied();
        for (method, top1) in acc {
            rows.push(ScaleRow {
                pair: pair.clone(),
                scale,
                minus_kd: kd.map(|k| top1 - k),
                method,
                top1,
            });
        }
    }
    rows
}
