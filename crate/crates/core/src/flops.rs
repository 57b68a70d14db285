//! Multiply-accumulate cost model for linear layers and the attention core.
//!
//! Counts are the matrix-product polynomials with unit constants. Bias additions, softmax and
//! elementwise work are not counted. This is a model of arithmetic, not of hardware.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::compress::CompressedEncoder;
use crate::encoder::{EncoderSpec, TapPoint};
use crate::error::{Error, Result};
use crate::fastattn::{AttnPath, ScorePath, ValuePath};
use crate::scalar::Scalar;

pub fn macs_dense_linear(seq_len: usize, d_in: usize, d_out: usize) -> u64 {
    seq_len as u64 * d_in as u64 * d_out as u64
}

pub fn macs_factorized_linear(seq_len: usize, d_in: usize, k: usize, d_out: usize) -> u64 {
    seq_len as u64 * d_in as u64 * k as u64 + seq_len as u64 * k as u64 * d_out as u64
}

/// Score cost for one head.
pub fn macs_score(seq_len: usize, d_head: usize, k_q: usize, k_k: usize, path: ScorePath) -> u64 {
    let l = seq_len as u64;
    match path {
        ScorePath::Standard => l * l * d_head as u64,
        ScorePath::Factorized => l * k_q as u64 * k_k as u64 + l * l * k_q.min(k_k) as u64,
    }
}

/// Value cost for one head.
pub fn macs_value(seq_len: usize, d_head: usize, k_v: usize, path: ValuePath) -> u64 {
    let (l, d, k) = (seq_len as u64, d_head as u64, k_v as u64);
    match path {
        ValuePath::Standard => l * l * d + l * k * d,
        ValuePath::Reordered => l * l * k + l * k * d,
    }
}

/// Score plus value cost for one head along `path`.
pub fn macs_attention(seq_len: usize, d_head: usize, k_q: usize, k_k: usize, k_v: usize, path: AttnPath) -> u64 {
    macs_score(seq_len, d_head, k_q, k_k, path.score) + macs_value(seq_len, d_head, k_v, path.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapCost {
    pub tap: String,
    /// `None` when the layer is left dense.
    pub rank: Option<usize>,
    pub dense_macs: u64,
    pub compressed_macs: u64,
    /// `compressed_macs / dense_macs`.
    pub macs_ratio: f64,
    /// Selected rank over `min(d_in, d_out)`; 1 for dense layers.
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub layer: usize,
    pub n_heads: usize,
    pub k_q: usize,
    pub k_k: usize,
    pub k_v: usize,
    pub path: AttnPath,
    /// Per-head costs of each score path, standard then factorized.
    pub score_macs: [u64; 2],
    /// Per-head costs of each value path, standard then reordered.
    pub value_macs: [u64; 2],
    /// All heads, standard paths at full rank.
    pub dense_macs: u64,
    /// All heads, chosen path.
    pub compressed_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub taps: Vec<TapCost>,
    pub attention: Vec<AttentionCost>,
    pub linear_dense_macs: u64,
    pub linear_compressed_macs: u64,
    pub attention_dense_macs: u64,
    pub attention_compressed_macs: u64,
    pub total_dense_macs: u64,
    pub total_compressed_macs: u64,
    pub original_params: usize,
    pub compressed_params: usize,
}

impl FlopsReport {
    pub fn macs_ratio(&self) -> f64 {
        self.total_compressed_macs as f64 / self.total_dense_macs as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.compressed_params as f64 / self.original_params as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("report json: {e}")))
    }
}

fn path_name(path: AttnPath) -> &'static str {
    match (path.score, path.value) {
        (ScorePath::Standard, ValuePath::Standard) => "standard/standard",
        (ScorePath::Standard, ValuePath::Reordered) => "standard/reordered",
        (ScorePath::Factorized, ValuePath::Standard) => "factorized/standard",
        (ScorePath::Factorized, ValuePath::Reordered) => "factorized/reordered",
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "{:<14} {:>6} {:>16} {:>16} {:>8} {:>8}", "tap", "rank", "dense_macs", "compressed_macs", "macs", "ratio")?;
        for t in &self.taps {
            let rank = t.rank.map_or_else(|| "dense".to_string(), |k| k.to_string());
            writeln!(
                out,
                "{:<14} {:>6} {:>16} {:>16} {:>8.4} {:>8.4}",
                t.tap, rank, t.dense_macs, t.compressed_macs, t.macs_ratio, t.compression_ratio
            )?;
        }
        writeln!(out)?;
        writeln!(out, "{:<6} {:>5} {:>5} {:>5} {:<21} {:>16} {:>16}", "layer", "k_q", "k_k", "k_v", "path", "dense_macs", "compressed_macs")?;
        for a in &self.attention {
            writeln!(
                out,
                "{:<6} {:>5} {:>5} {:>5} {:<21} {:>16} {:>16}",
                a.layer,
                a.k_q,
                a.k_k,
                a.k_v,
                path_name(a.path),
                a.dense_macs,
                a.compressed_macs
            )?;
        }
        writeln!(out)?;
        writeln!(out, "{:<10} {:>16} {:>16} {:>8}", "total", "dense", "compressed", "ratio")?;
        let rows = [
            ("linear", self.linear_dense_macs, self.linear_compressed_macs),
            ("attention", self.attention_dense_macs, self.attention_compressed_macs),
            ("macs", self.total_dense_macs, self.total_compressed_macs),
            ("params", self.original_params as u64, self.compressed_params as u64),
        ];
        for (name, dense, compressed) in rows {
            writeln!(out, "{:<10} {:>16} {:>16} {:>8.4}", name, dense, compressed, compressed as f64 / dense as f64)?;
        }
        f.write_str(&out)
    }
}

fn attention_cost(spec: &EncoderSpec, layer: usize, k_q: usize, k_k: usize, k_v: usize, path: AttnPath) -> AttentionCost {
    let (l, d, h) = (spec.seq_len, spec.d_head, spec.n_heads as u64);
    let full = spec.d_model;
    AttentionCost {
        layer,
        n_heads: spec.n_heads,
        k_q,
        k_k,
        k_v,
        path,
        score_macs: [macs_score(l, d, k_q, k_k, ScorePath::Standard), macs_score(l, d, k_q, k_k, ScorePath::Factorized)],
        value_macs: [macs_value(l, d, k_v, ValuePath::Standard), macs_value(l, d, k_v, ValuePath::Reordered)],
        dense_macs: h * macs_attention(l, d, full, full, full, AttnPath::STANDARD),
        compressed_macs: h * macs_attention(l, d, k_q, k_k, k_v, path),
    }
}

/// Per-tap and per-layer cost of a compressed encoder against its dense original.
pub fn report<T: Scalar>(compressed: &CompressedEncoder<T>) -> FlopsReport {
    let spec = &compressed.spec;
    let l = spec.seq_len;
    let taps: Vec<TapCost> = spec
        .all_taps()
        .into_iter()
        .map(|tap| {
            let (d_in, d_out) = spec.site_dims(tap.site);
            let proj = compressed.projection(tap);
            let rank = (!proj.is_dense()).then(|| proj.inner_rank());
            let dense_macs = macs_dense_linear(l, d_in, d_out);
            let compressed_macs = rank.map_or(dense_macs, |k| macs_factorized_linear(l, d_in, k, d_out));
            TapCost {
                tap: tap.to_string(),
                rank,
                dense_macs,
                compressed_macs,
                macs_ratio: compressed_macs as f64 / dense_macs as f64,
                compression_ratio: rank.map_or(1.0, |k| k as f64 / d_in.min(d_out) as f64),
            }
        })
        .collect();
    let attention: Vec<AttentionCost> = compressed
        .layers
        .iter()
        .enumerate()
        .map(|(i, b)| attention_cost(spec, i, b.attention.q.rank(), b.attention.k.rank(), b.attention.v.rank(), b.path))
        .collect();
    let linear_dense_macs = taps.iter().map(|t| t.dense_macs).sum();
    let linear_compressed_macs = taps.iter().map(|t| t.compressed_macs).sum();
    let attention_dense_macs = attention.iter().map(|a| a.dense_macs).sum();
    let attention_compressed_macs = attention.iter().map(|a| a.compressed_macs).sum();
    FlopsReport {
        seq_len: l,
        taps,
        attention,
        linear_dense_macs,
        linear_compressed_macs,
        attention_dense_macs,
        attention_compressed_macs,
        total_dense_macs: linear_dense_macs + attention_dense_macs,
        total_compressed_macs: linear_compressed_macs + attention_compressed_macs,
        original_params: compressed.original_param_count(),
        compressed_params: compressed.param_count(),
    }
}

/// A cost claim that failed independent re-verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificateViolation {
    pub location: String,
    pub detail: String,
}

impl fmt::Display for CertificateViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.detail)
    }
}

/// Re-checks every cost decision of `compressed` from its shapes alone: each factorized layer
/// must be strictly cheaper than dense (and dense layers must not have been factorizable under
/// their recorded accuracy rank), and each non-standard attention path must be strictly cheaper
/// than the standard alternative on the same axis.
pub fn verify_certificates<T: Scalar>(compressed: &CompressedEncoder<T>) -> Vec<CertificateViolation> {
    let spec = &compressed.spec;
    let l = spec.seq_len;
    let mut violations = Vec::new();
    for tap in spec.all_taps() {
        let (d_in, d_out) = spec.site_dims(tap.site);
        let dense = macs_dense_linear(l, d_in, d_out);
        let proj = compressed.projection(tap);
        if !proj.is_dense() {
            let k = proj.inner_rank();
            let factorized = macs_factorized_linear(l, d_in, k, d_out);
            if factorized >= dense {
                violations.push(violation(tap, format!("rank {k} costs {factorized} >= dense {dense}")));
            }
        } else if let Some(k) = compressed.decision(tap).and_then(|d| d.selection.accuracy_rank) {
            if k < d_out && macs_factorized_linear(l, d_in, k, d_out) < dense {
                violations.push(violation(tap, format!("left dense although rank {k} is cheaper")));
            }
        }
    }
    for (i, b) in compressed.layers.iter().enumerate() {
        let (d, kq, kk, kv) = (spec.d_head, b.attention.q.rank(), b.attention.k.rank(), b.attention.v.rank());
        let std_score = macs_score(l, d, kq, kk, ScorePath::Standard);
        let fac_score = macs_score(l, d, kq, kk, ScorePath::Factorized);
        let score_ok = match b.path.score {
            ScorePath::Factorized => fac_score < std_score,
            ScorePath::Standard => fac_score >= std_score,
        };
        if !score_ok {
            violations.push(CertificateViolation {
                location: format!("{i}.attention"),
                detail: format!("score path {:?} with standard {std_score}, factorized {fac_score}", b.path.score),
            });
        }
        let std_value = macs_value(l, d, kv, ValuePath::Standard);
        let re_value = macs_value(l, d, kv, ValuePath::Reordered);
        let value_ok = match b.path.value {
            ValuePath::Reordered => re_value < std_value,
            ValuePath::Standard => re_value >= std_value,
        };
        if !value_ok {
            violations.push(CertificateViolation {
                location: format!("{i}.attention"),
                detail: format!("value path {:?} with standard {std_value}, reordered {re_value}", b.path.value),
            });
        }
    }
    violations
}

fn violation(tap: TapPoint, detail: String) -> CertificateViolation {
    CertificateViolation { location: tap.to_string(), detail }
}

/// Whether rank `k` is cheaper than the dense layer.
pub fn factorization_pays(d_in: usize, d_out: usize, k: usize) -> bool {
    macs_factorized_linear(1, d_in, k, d_out) < macs_dense_linear(1, d_in, d_out)
}
