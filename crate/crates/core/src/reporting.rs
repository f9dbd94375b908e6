//! Weight-distribution histograms, sparsity audits and magnitude summaries.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 64;

/// The five snapshot points of one dense → sparse → re-dense cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DenseFinal,
    PostPrune,
    SparseFinal,
    ZeroRestored,
    RedenseFinal,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::DenseFinal,
        Stage::PostPrune,
        Stage::SparseFinal,
        Stage::ZeroRestored,
        Stage::RedenseFinal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::DenseFinal => "dense_final",
            Stage::PostPrune => "post_prune",
            Stage::SparseFinal => "sparse_final",
            Stage::ZeroRestored => "zero_restored",
            Stage::RedenseFinal => "redense_final",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown stage {s:?}")))
    }
}

/// Histogram of nonzero weights; exact zeros are counted separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub layer_name: String,
    pub stage: Stage,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub zero_count: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.zero_count
    }

    /// Renders `layer,stage,bin_lo,bin_hi,count` rows followed by a zero row
    /// with `bin_lo = bin_hi = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,stage,bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.layer_name,
                self.stage,
                self.bin_edges[i],
                self.bin_edges[i + 1],
                c
            );
        }
        let _ = writeln!(
            out,
            "{},{},0,0,{}",
            self.layer_name, self.stage, self.zero_count
        );
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the output of [`Histogram::to_csv`].
    pub fn from_csv(text: &str) -> Result<Histogram> {
        let mut lines = text.lines();
        if lines.next() != Some("layer,stage,bin_lo,bin_hi,count") {
            return Err(Error::Format("histogram CSV: bad header".into()));
        }
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let bad = |what: &str| Error::Format(format!("histogram CSV: {what}"));
        let (zero, bins) = rows.split_last().ok_or_else(|| bad("no rows"))?;
        if rows.iter().any(|r| r.len() != 5) {
            return Err(bad("expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let count = |s: &str| s.parse::<u64>().map_err(|_| bad("bad count"));
        let mut bin_edges = Vec::with_capacity(bins.len() + 1);
        let mut counts = Vec::with_capacity(bins.len());
        for (i, r) in bins.iter().enumerate() {
            if i == 0 {
                bin_edges.push(num(r[2])?);
            }
            bin_edges.push(num(r[3])?);
            counts.push(count(r[4])?);
        }
        Ok(Histogram {
            layer_name: zero[0].to_string(),
            stage: zero[1].parse()?,
            bin_edges,
            counts,
            zero_count: count(zero[4])?,
        })
    }
}

/// Largest absolute value, 0 for an empty slice.
pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Bins the nonzero weights over `range` (default `[-m, m]` with `m` the
/// largest magnitude). Values outside the range land in the edge bins so
/// every weight is counted.
pub fn histogram(
    layer_name: &str,
    stage: Stage,
    weights: &Tensor,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    if weights.is_empty() {
        return Err(Error::Contract("histogram of an empty tensor".into()));
    }
    let (mut lo, mut hi) = range.unwrap_or_else(|| {
        let m = max_abs(weights.data());
        (-m, m)
    });
    if !(hi > lo) {
        (lo, hi) = (-1.0, 1.0);
    }
    let width = (hi - lo) / bins as f64;
    let mut bin_edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    bin_edges.push(hi);

    let mut counts = vec![0u64; bins];
    let mut zero_count = 0;
    for &w in weights.data() {
        if w == 0.0 {
            zero_count += 1;
            continue;
        }
        let mut i = (((w - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        // Snap to the edge list so binning agrees with `edges[i] <= w < edges[i+1]`.
        while i > 0 && w < bin_edges[i] {
            i -= 1;
        }
        while i + 1 < bins && w >= bin_edges[i + 1] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(Histogram {
        layer_name: layer_name.to_string(),
        stage,
        bin_edges,
        counts,
        zero_count,
    })
}

pub fn mean_abs(weights: &[f64]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().map(|w| w.abs()).sum::<f64>() / weights.len() as f64
}

/// Nonzero weights strictly inside the pruning threshold, the "soft
/// boundary" that appears after sparse retraining.
pub fn count_inside_threshold(weights: &[f64], lambda: f64) -> usize {
    weights
        .iter()
        .filter(|&&w| w != 0.0 && w.abs() < lambda)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: String,
    pub total: usize,
    pub zeros: usize,
    pub zero_fraction: f64,
    pub mask_active: bool,
}

/// Exact-zero fraction and mask presence for every dense layer.
pub fn sparsity_audit(net: &Network) -> Vec<LayerAudit> {
    net.dense()
        .map(|d| {
            let zeros = d.weight.data().iter().filter(|&&w| w == 0.0).count();
            LayerAudit {
                layer: d.name.clone(),
                total: d.weight.len(),
                zeros,
                zero_fraction: zeros as f64 / d.weight.len() as f64,
                mask_active: d.mask.is_some(),
            }
        })
        .collect()
}

pub fn audit_csv(audit: &[LayerAudit]) -> String {
    let mut out = String::from("layer,zero_fraction,mask_active\n");
    for a in audit {
        let _ = writeln!(out, "{},{},{}", a.layer, a.zero_fraction, a.mask_active);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_weights() {
        let h = histogram("l", Stage::PostPrune, &Tensor::zeros(&[4, 5]), 8, None).unwrap();
        assert_eq!(h.zero_count, 20);
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.total(), 20);
    }

    #[test]
    fn out_of_range_values_clamp_to_edges() {
        let w = Tensor::vector(&[-5.0, -0.75, 0.25, 5.0, 0.0]);
        let h = histogram("l", Stage::RedenseFinal, &w, 4, Some((-1.0, 1.0))).unwrap();
        assert_eq!(h.counts, vec![2, 0, 1, 1]);
        assert_eq!(h.zero_count, 1);
        assert_eq!(h.bin_edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let w = Tensor::vector(&[-0.3, 0.1, 0.0, 0.7, -0.05]);
        let h = histogram("fc2", Stage::SparseFinal, &w, 5, None).unwrap();
        assert_eq!(Histogram::from_csv(&h.to_csv()).unwrap(), h);
    }

    #[test]
    fn errors() {
        assert!(histogram("l", Stage::DenseFinal, &Tensor::zeros(&[2]), 0, None).is_err());
    }

    #[test]
    fn magnitudes() {
        assert_eq!(mean_abs(&[1.0, -1.0]), 1.0);
        assert_eq!(mean_abs(&[0.0, 0.0]), 0.0);
        assert_eq!(count_inside_threshold(&[0.0, 0.1, -0.2, 0.5], 0.3), 2);
    }
}
