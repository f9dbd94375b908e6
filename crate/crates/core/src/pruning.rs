//! Magnitude pruning: per-layer top-k thresholds, binary masks, and the
//! brute-force loss-change diagnostics used to validate the |w| criterion.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Binary keep-mask congruent to one weight tensor (`true` = kept).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
    shape: Vec<usize>,
    kept_count: usize,
    layer_name: String,
}

impl PruneMask {
    pub fn new(layer_name: &str, shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bits.len() != n {
            return Err(Error::Dimension(format!(
                "mask for {layer_name}: {} bits for shape {shape:?}",
                bits.len()
            )));
        }
        let kept_count = bits.iter().filter(|&&b| b).count();
        Ok(PruneMask {
            bits,
            shape: shape.to_vec(),
            kept_count,
            layer_name: layer_name.to_string(),
        })
    }

    pub fn all_kept(layer_name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(layer_name, shape, vec![true; n]).expect("congruent")
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.len() - self.kept_count
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    fn check(&self, weights: &Tensor) -> Result<()> {
        if weights.shape() != self.shape.as_slice() {
            return Err(Error::Contract(format!(
                "mask for {} has shape {:?}, weights have {:?}",
                self.layer_name,
                self.shape,
                weights.shape()
            )));
        }
        Ok(())
    }

    /// Zeroes pruned coordinates in place. Panics on shape mismatch.
    pub fn apply_in_place(&self, weights: &mut Tensor) {
        self.check(weights).expect("mask congruent with weights");
        for (w, &keep) in weights.data_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *w = 0.0;
            }
        }
    }
}

/// Sparsity applied uniformly to every prunable layer not listed in
/// `excluded_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub sparsity: f64,
    #[serde(default)]
    pub excluded_layers: Vec<String>,
}

pub fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    Ok(())
}

/// Number of weights pruned from a layer of `n` at `sparsity`.
pub fn pruned_count(n: usize, sparsity: f64) -> usize {
    (n as f64 * sparsity).floor() as usize
}

/// Pruning score of a weight: its magnitude. Lower scores are pruned first.
pub fn taylor_delta(w: f64) -> f64 {
    w.abs()
}

/// Keeps exactly the `N - floor(N·sparsity)` largest-magnitude weights, ties
/// going to the lower flat index. Returns the magnitude of the smallest kept
/// weight (the threshold) and the mask.
pub fn threshold(weights: &Tensor, sparsity: f64, layer_name: &str) -> Result<(f64, PruneMask)> {
    check_sparsity(sparsity)?;
    let n = weights.len();
    if n == 0 {
        return Err(Error::Contract("cannot threshold an empty tensor".into()));
    }
    let keep = n - pruned_count(n, sparsity);
    let scores: Vec<f64> = weights.data().iter().map(|&w| taylor_delta(w)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    order.select_nth_unstable_by(keep - 1, by_rank);
    let mut bits = vec![false; n];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    let lambda = scores[order[keep - 1]];
    Ok((lambda, PruneMask::new(layer_name, weights.shape(), bits)?))
}

/// Element-wise product of weights and mask; pruned entries are exactly 0.0.
pub fn apply_mask(weights: &Tensor, mask: &PruneMask) -> Result<Tensor> {
    mask.check(weights)?;
    let mut out = weights.clone();
    mask.apply_in_place(&mut out);
    Ok(out)
}

/// Per-layer result of pruning a network.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrune {
    pub layer: String,
    pub threshold: f64,
    pub kept: usize,
    pub total: usize,
}

/// Creates and applies a fresh mask on every prunable, non-excluded layer,
/// computed from the layer's current weights.
pub fn prune_network(net: &mut Network, spec: &SparsitySpec) -> Result<Vec<LayerPrune>> {
    check_sparsity(spec.sparsity)?;
    for name in &spec.excluded_layers {
        if net.dense_by_name(name).is_none() {
            return Err(Error::Config(format!(
                "excluded layer {name:?} does not exist"
            )));
        }
    }
    let mut report = Vec::new();
    for layer in net.dense_mut() {
        if !layer.prunable || spec.excluded_layers.contains(&layer.name) {
            continue;
        }
        let (lambda, mask) = threshold(&layer.weight, spec.sparsity, &layer.name)?;
        mask.apply_in_place(&mut layer.weight);
        report.push(LayerPrune {
            layer: layer.name.clone(),
            threshold: lambda,
            kept: mask.kept_count(),
            total: mask.len(),
        });
        layer.mask = Some(mask);
    }
    Ok(report)
}

/// Names of the layers [`prune_network`] would mask.
pub fn pruned_layer_names(net: &Network, spec: &SparsitySpec) -> Vec<String> {
    net.dense()
        .filter(|d| d.prunable && !spec.excluded_layers.contains(&d.name))
        .map(|d| d.name.clone())
        .collect()
}

/// Exact loss change from zeroing one weight: `loss(w_i := 0) - loss(W)`,
/// from two full eval-mode passes over `data`. The network is unchanged on
/// return.
pub fn true_loss_delta(
    net: &mut Network,
    data: &Dataset,
    layer: &str,
    index: usize,
) -> Result<f64> {
    let original = {
        let d = net
            .dense_by_name(layer)
            .ok_or_else(|| Error::Contract(format!("no dense layer named {layer:?}")))?;
        if index >= d.weight.len() {
            return Err(Error::Contract(format!(
                "index {index} out of range for {layer} with {} weights",
                d.weight.len()
            )));
        }
        d.weight.data()[index]
    };
    if original == 0.0 {
        return Ok(0.0);
    }
    let base = net.loss(data)?;
    let set = |net: &mut Network, v: f64| {
        net.dense_by_name_mut(layer)
            .expect("layer exists")
            .weight
            .data_mut()[index] = v;
    };
    set(net, 0.0);
    let zeroed = net.loss(data);
    set(net, original);
    Ok(zeroed? - base)
}

/// [`true_loss_delta`] for every weight of every dense layer, in layer then
/// flat-index order, paired with the weight value.
pub fn all_loss_deltas(net: &mut Network, data: &Dataset) -> Result<Vec<(f64, f64)>> {
    let base = net.loss(data)?;
    let names: Vec<String> = net.dense().map(|d| d.name.clone()).collect();
    let mut out = Vec::new();
    for name in names {
        let n = net.dense_by_name(&name).expect("layer").weight.len();
        for i in 0..n {
            let w = net.dense_by_name(&name).expect("layer").weight.data()[i];
            if w == 0.0 {
                out.push((w, 0.0));
                continue;
            }
            net.dense_by_name_mut(&name)
                .expect("layer")
                .weight
                .data_mut()[i] = 0.0;
            let zeroed = net.loss(data);
            net.dense_by_name_mut(&name)
                .expect("layer")
                .weight
                .data_mut()[i] = w;
            out.push((w, zeroed? - base));
        }
    }
    Ok(out)
}
