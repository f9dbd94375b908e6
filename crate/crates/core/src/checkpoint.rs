//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DSDC" | version u32 | layer count u32
//! per layer:
//!   name length u16 | UTF-8 name
//!   kind u8   bits 0-3 layer kind (0 fully_connected, 1 dropout)
//!             bits 4-6 activation (0 none, 1 relu, 2 tanh, 3 sigmoid)
//!             bit  7   prunable
//!   rank u8 | dims u32 × rank
//!   weight values f64 × product(dims)
//!   bias values f64 × dims[rank-1]       (fully_connected only)
//!   mask flag u8 | mask bits, 8 per byte, LSB first, row-major
//! resume flag u8 | resume state (see `ResumeState`) when the flag is 1
//! ```
//!
//! Dropout layers are stored with rank 1, dims `[1]` and their drop
//! probability as the single weight value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{EarlyStopping, EpochRow, PhaseKind};
use crate::network::{Activation, DenseLayer, DropoutLayer, Layer, LayerSpec, Network};
use crate::optimizer::OptimizerState;
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSDC";
pub const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_DROPOUT: u8 = 1;

/// Mid-phase training position, enough to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub phase_index: usize,
    pub epochs_done_in_phase: usize,
    pub global_epoch: usize,
    pub detector: EarlyStopping,
    pub optimizer: OptimizerState,
    pub rows: Vec<EpochRow>,
    /// Per-layer `(name, histogram half-range, prune threshold)`.
    pub layer_stats: Vec<(String, f64, f64)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {n} bytes for {what} at offset {}",
                self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn name(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn phase_code(kind: PhaseKind) -> u8 {
    match kind {
        PhaseKind::Dense => 0,
        PhaseKind::Sparse => 1,
        PhaseKind::Redense => 2,
        PhaseKind::Llr => 3,
    }
}

fn phase_from_code(code: u8) -> Result<PhaseKind> {
    Ok(match code {
        0 => PhaseKind::Dense,
        1 => PhaseKind::Sparse,
        2 => PhaseKind::Redense,
        3 => PhaseKind::Llr,
        _ => return Err(Error::Format(format!("unknown phase code {code}"))),
    })
}

pub fn encode(net: &Network, resume: Option<&ResumeState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(net.layers().len());
    for layer in net.layers() {
        w.name(layer.name());
        match layer {
            Layer::Dense(d) => {
                w.u8(KIND_DENSE | d.activation.code() << 4 | (d.prunable as u8) << 7);
                w.u8(2);
                w.u32(d.in_dim());
                w.u32(d.out_dim());
                w.f64s(d.weight.data());
                w.f64s(d.bias.data());
                match &d.mask {
                    Some(mask) => {
                        w.u8(1);
                        w.0.extend(pack_bits(mask.bits()));
                    }
                    None => w.u8(0),
                }
            }
            Layer::Dropout(d) => {
                w.u8(KIND_DROPOUT);
                w.u8(1);
                w.u32(1);
                w.f64(d.drop_prob);
                w.u8(0);
            }
        }
    }
    match resume {
        None => w.u8(0),
        Some(r) => {
            w.u8(1);
            encode_resume(&mut w, r);
        }
    }
    w.0
}

fn encode_resume(w: &mut Writer, r: &ResumeState) {
    w.u32(r.phase_index);
    w.u32(r.epochs_done_in_phase);
    w.u32(r.global_epoch);
    w.f64(r.detector.best);
    w.u32(r.detector.stale);
    w.u32(r.detector.epochs);
    w.u32(r.optimizer.velocities.len());
    for (vw, vb) in &r.optimizer.velocities {
        w.u32(vw.len());
        w.f64s(vw);
        w.u32(vb.len());
        w.f64s(vb);
    }
    w.u32(r.rows.len());
    for row in &r.rows {
        w.u32(row.epoch);
        w.u8(phase_code(row.phase));
        w.f64(row.lr);
        w.f64(row.train_loss);
        w.f64(row.val_loss);
        w.f64(row.val_err);
    }
    w.u32(r.layer_stats.len());
    for (name, range, lambda) in &r.layer_stats {
        w.name(name);
        w.f64(*range);
        w.f64(*lambda);
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Network, Option<ResumeState>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.name("layer name")?;
        let kind = r.u8("layer kind")?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        match kind & 0x0f {
            KIND_DENSE => {
                if rank != 2 || dims.contains(&0) {
                    return Err(Error::Format(format!(
                        "layer {name}: fully_connected needs two positive dims, got {dims:?}"
                    )));
                }
                let activation = Activation::from_code(kind >> 4 & 0x07).ok_or_else(|| {
                    Error::Format(format!("layer {name}: unknown activation code"))
                })?;
                let n = dims[0] * dims[1];
                let weight = Tensor::new(dims.clone(), r.f64s(n, "weights")?)?;
                let bias = Tensor::new(vec![dims[1]], r.f64s(dims[1], "biases")?)?;
                let mask = match r.u8("mask flag")? {
                    0 => None,
                    1 => {
                        let packed = r.take(n.div_ceil(8), "mask bits")?;
                        Some(PruneMask::new(&name, &dims, unpack_bits(packed, n))?)
                    }
                    f => return Err(Error::Format(format!("layer {name}: bad mask flag {f}"))),
                };
                layers.push(Layer::Dense(DenseLayer {
                    name,
                    activation,
                    prunable: kind >> 7 == 1,
                    weight,
                    bias,
                    mask,
                }));
            }
            KIND_DROPOUT => {
                if dims != [1] {
                    return Err(Error::Format(format!(
                        "layer {name}: dropout dims must be [1]"
                    )));
                }
                let drop_prob = r.f64("drop probability")?;
                if r.u8("mask flag")? != 0 {
                    return Err(Error::Format(format!(
                        "layer {name}: dropout cannot carry a mask"
                    )));
                }
                layers.push(Layer::Dropout(DropoutLayer { name, drop_prob }));
            }
            other => return Err(Error::Format(format!("layer {name}: unknown kind {other}"))),
        }
    }
    let net = Network::from_layers(layers)
        .map_err(|e| Error::Format(format!("inconsistent layers: {e}")))?;
    let resume = if r.at_end() {
        None
    } else {
        match r.u8("resume flag")? {
            0 => None,
            1 => Some(decode_resume(&mut r, &net)?),
            f => return Err(Error::Format(format!("bad resume flag {f}"))),
        }
    };
    if !r.at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok((net, resume))
}

fn decode_resume(r: &mut Reader<'_>, net: &Network) -> Result<ResumeState> {
    let phase_index = r.u32("phase index")?;
    let epochs_done_in_phase = r.u32("phase epoch")?;
    let global_epoch = r.u32("global epoch")?;
    let detector = EarlyStopping {
        best: r.f64("best loss")?,
        stale: r.u32("stale epochs")?,
        epochs: r.u32("detector epochs")?,
    };
    let n = r.u32("velocity count")?;
    let dense: Vec<&DenseLayer> = net.dense().collect();
    if n != dense.len() {
        return Err(Error::Format(format!(
            "{n} velocity entries for {} dense layers",
            dense.len()
        )));
    }
    let mut velocities = Vec::with_capacity(n);
    for d in dense {
        let lw = r.u32("velocity length")?;
        let vw = r.f64s(lw, "weight velocity")?;
        let lb = r.u32("velocity length")?;
        let vb = r.f64s(lb, "bias velocity")?;
        if lw != d.weight.len() || lb != d.bias.len() {
            return Err(Error::Format(format!(
                "velocity shape mismatch for layer {}",
                d.name
            )));
        }
        velocities.push((vw, vb));
    }
    let rows_n = r.u32("row count")?;
    let mut rows = Vec::with_capacity(rows_n.min(1 << 16));
    for _ in 0..rows_n {
        rows.push(EpochRow {
            epoch: r.u32("row epoch")?,
            phase: phase_from_code(r.u8("row phase")?)?,
            lr: r.f64("row lr")?,
            train_loss: r.f64("row train loss")?,
            val_loss: r.f64("row val loss")?,
            val_err: r.f64("row val err")?,
        });
    }
    let stats_n = r.u32("layer stat count")?;
    let mut layer_stats = Vec::with_capacity(stats_n.min(1024));
    for _ in 0..stats_n {
        layer_stats.push((r.name("stat layer")?, r.f64("range")?, r.f64("threshold")?));
    }
    Ok(ResumeState {
        phase_index,
        epochs_done_in_phase,
        global_epoch,
        detector,
        optimizer: OptimizerState { velocities },
        rows,
        layer_stats,
    })
}

pub fn save_checkpoint(net: &Network, resume: Option<&ResumeState>, path: &Path) -> Result<()> {
    fs::write(path, encode(net, resume)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    load_checkpoint_with_state(path).map(|(net, _)| net)
}

pub fn load_checkpoint_with_state(path: &Path) -> Result<(Network, Option<ResumeState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and checks it has the expected architecture.
pub fn load_checkpoint_matching(path: &Path, expected: &[LayerSpec]) -> Result<Network> {
    let net = load_checkpoint(path)?;
    let found = net.specs();
    if found != expected {
        return Err(Error::Format(format!(
            "{}: architecture mismatch: checkpoint has {found:?}, expected {expected:?}",
            path.display()
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{mlp, InitScheme, InitSpec};
    use crate::pruning::{prune_network, SparsitySpec};

    fn sample() -> Network {
        let mut specs = mlp(&[5, 7, 3]);
        specs.insert(1, LayerSpec::dropout("drop", 0.25));
        if let LayerSpec::FullyConnected { prunable, .. } = &mut specs[0] {
            *prunable = false;
        }
        let init = InitSpec {
            scheme: InitScheme::ScaledGaussian,
            scale: 1.0,
            seed: 2,
        };
        let mut net = Network::build(&specs, &init).unwrap();
        prune_network(
            &mut net,
            &SparsitySpec {
                sparsity: 0.4,
                excluded_layers: vec![],
            },
        )
        .unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample();
        let (back, resume) = decode(&encode(&net, None)).unwrap();
        assert!(resume.is_none());
        assert_eq!(back, net);
        for (a, b) in back.dense().zip(net.dense()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample(), None);
        assert_eq!(&bytes[..4], b"DSDC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"fc1");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample(), None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(
            matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::Format(m)) if m.contains("truncated"))
        );
        let mut long = bytes.clone();
        long.extend([0, 0]);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn packs_bits_lsb_first() {
        assert_eq!(
            pack_bits(&[true, false, false, true, false, false, false, false, true]),
            vec![0b1001, 1]
        );
        let bits = vec![
            true, true, false, true, false, true, true, false, false, true, true,
        ];
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }
}
