//! Rank selection and low-rank rewriting of linear layers.
//!
//! A layer `Y = X·W + b` whose outputs have mean `μ` and principal directions `V` is replaced
//! by `X·(W·V_k)·V_kᵀ + (μ + (b − μ)·V_k·V_kᵀ)`, which equals the projection of the centered
//! output onto the top-`k` principal subspace, shifted back by the mean.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::encoder::{
    embed, expect_kind, linear_name, push_untouched, read_untouched, ConvStem, EncoderSpec, EncoderWeights,
    LayerNormParams, Linear, Site, TapPoint,
};
use crate::error::{shape_err, Error, Result};
use crate::fastattn::{attention_block, AttnPath, FactorizedAttnParams};
use crate::linalg::{gelu, Matrix};
use crate::modelio::{DType, TensorArchive};
use crate::scalar::Scalar;

pub const DEFAULT_GRANULARITY: usize = 16;
pub const KIND_COMPRESSED: &str = "compressed";

/// Named threshold configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// θ = 0.999 everywhere.
    QualityFocused,
    /// θ = 0.99 for attention, 0.999 for the MLP.
    Balanced,
    /// θ = 0.99 for attention, 0.995 for the MLP.
    EfficiencyFocused,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "quality" => Ok(Preset::QualityFocused),
            "b" | "balanced" => Ok(Preset::Balanced),
            "c" | "efficiency" => Ok(Preset::EfficiencyFocused),
            _ => Err(Error::Usage(format!("unknown preset {s:?} (expected a, b or c)"))),
        }
    }
}

/// Variance thresholds per layer group and the rank step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub theta_attn: f64,
    pub theta_mlp: f64,
    pub granularity: usize,
}

impl RankPolicy {
    pub fn new(theta_attn: f64, theta_mlp: f64, granularity: usize) -> Result<Self> {
        let policy = Self { theta_attn, theta_mlp, granularity };
        policy.validate()?;
        Ok(policy)
    }

    pub fn preset(preset: Preset) -> Self {
        let (theta_attn, theta_mlp) = match preset {
            Preset::QualityFocused => (0.999, 0.999),
            Preset::Balanced => (0.99, 0.999),
            Preset::EfficiencyFocused => (0.99, 0.995),
        };
        Self { theta_attn, theta_mlp, granularity: DEFAULT_GRANULARITY }
    }

    pub fn with_granularity(mut self, granularity: usize) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for theta in [self.theta_attn, self.theta_mlp] {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::Range(format!("theta {theta} outside (0, 1]")));
            }
        }
        if self.granularity == 0 {
            return Err(Error::Range("granularity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn theta_for(&self, site: Site) -> f64 {
        if site.is_attention() {
            self.theta_attn
        } else {
            self.theta_mlp
        }
    }
}

/// Largest `k` with `k·(d_in + d_out) < d_in·d_out`, i.e. the largest rank whose factorized
/// layer is strictly cheaper than the dense one.
pub fn efficiency_cap(d_in: usize, d_out: usize) -> usize {
    let prod = d_in as u128 * d_out as u128;
    if prod == 0 {
        return 0;
    }
    ((prod - 1) / (d_in as u128 + d_out as u128)) as usize
}

/// Outcome of rank selection for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    /// Selected rank, or `None` to keep the layer dense.
    pub rank: Option<usize>,
    /// Fraction of total variance held by the selected components (1 when dense).
    pub variance_captured: f64,
    pub efficiency_cap: usize,
    /// Smallest admissible rank meeting the variance threshold, before the efficiency check.
    pub accuracy_rank: Option<usize>,
}

/// Picks the smallest multiple of `granularity` whose leading eigenvalues hold strictly more than
/// `theta` of the total, clamped to `d_out`. Ranks above [`efficiency_cap`] fall back to dense.
/// An all-zero spectrum selects `granularity` with variance captured 1.
pub fn select_rank<T: Scalar>(
    eigenvalues: &[T],
    d_in: usize,
    d_out: usize,
    theta: f64,
    granularity: usize,
) -> Result<RankSelection> {
    if eigenvalues.len() != d_out {
        return shape_err(format!("{} eigenvalues for d_out {d_out}", eigenvalues.len()));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Range(format!("theta {theta} outside (0, 1]")));
    }
    if granularity == 0 || d_out == 0 {
        return Err(Error::Range("granularity and d_out must be at least 1".into()));
    }
    let eig: Vec<f64> = eigenvalues.iter().map(|v| v.as_f64()).collect();
    if eig.iter().any(|&v| v.is_nan() || v < 0.0) || eig.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Contract("eigenvalues must be non-negative and descending".into()));
    }
    let cap = efficiency_cap(d_in, d_out);
    let mut cumulative = Vec::with_capacity(d_out + 1);
    cumulative.push(0.0f64);
    for &v in &eig {
        cumulative.push(cumulative.last().unwrap() + v);
    }
    let total = cumulative[d_out];

    let (accuracy_rank, captured) = if total == 0.0 {
        (Some(granularity.min(d_out)), 1.0)
    } else {
        let mut k = granularity;
        loop {
            let kk = k.min(d_out);
            if cumulative[kk] > theta * total {
                break (Some(kk), cumulative[kk] / total);
            }
            if kk == d_out {
                break (None, 1.0);
            }
            k += granularity;
        }
    };
    let rank = accuracy_rank.filter(|&k| k <= cap);
    Ok(RankSelection {
        rank,
        variance_captured: if rank.is_some() { captured } else { 1.0 },
        efficiency_cap: cap,
        accuracy_rank,
    })
}

/// Per-tap record of what compression did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub tap: TapPoint,
    pub theta: f64,
    pub selection: RankSelection,
}

impl RankDecision {
    pub fn rank(&self) -> Option<usize> {
        self.selection.rank
    }

    /// `k / min(d_in, d_out)`, or 1 for a dense layer.
    pub fn compression_ratio(&self, spec: &EncoderSpec) -> f64 {
        let (d_in, d_out) = spec.site_dims(self.tap.site);
        self.rank().map_or(1.0, |k| k as f64 / d_in.min(d_out) as f64)
    }
}

/// `X · w_down · w_up + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLinear<T> {
    /// `d_in × k`, equal to `W · V_k`.
    pub w_down: Matrix<T>,
    /// `k × d_out`, equal to `V_kᵀ`.
    pub w_up: Matrix<T>,
    /// `μ + (b − μ) · V_k · V_kᵀ`.
    pub bias: Vec<T>,
}

impl<T: Scalar> FactorizedLinear<T> {
    pub fn new(w_down: Matrix<T>, w_up: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if w_down.cols() != w_up.rows() || w_up.cols() != bias.len() {
            return shape_err(format!(
                "factors {:?} · {:?} with bias of {}",
                w_down.shape(),
                w_up.shape(),
                bias.len()
            ));
        }
        Ok(Self { w_down, w_up, bias })
    }

    pub fn rank(&self) -> usize {
        self.w_up.rows()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        x.matmul(&self.w_down)?.matmul(&self.w_up)?.add_row(&self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.w_down.rows() * self.w_down.cols() + self.w_up.rows() * self.w_up.cols() + self.bias.len()
    }
}

/// Rewrites `layer` onto the top-`k` principal directions of its outputs.
pub fn factorize_layer<T: Scalar>(
    layer: &Linear<T>,
    stats: &ActivationStats<T>,
    k: usize,
) -> Result<FactorizedLinear<T>> {
    if layer.d_out() != stats.dim() || layer.bias.len() != stats.dim() {
        return shape_err(format!("layer output {} vs stats dimension {}", layer.d_out(), stats.dim()));
    }
    let vk = stats.leading(k)?;
    let w_down = layer.weight.matmul(&vk)?;
    let w_up = vk.transpose();
    let centered_bias: Vec<T> = layer.bias.iter().zip(&stats.mean).map(|(&b, &m)| b - m).collect();
    let projected = w_up.vecmat(&vk.vecmat(&centered_bias)?)?;
    let bias = stats.mean.iter().zip(&projected).map(|(&m, &p)| m + p).collect();
    FactorizedLinear::new(w_down, w_up, bias)
}

/// A linear layer in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<T> {
    Dense(Linear<T>),
    Factorized(FactorizedLinear<T>),
}

impl<T: Scalar> Projection<T> {
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Projection::Dense(l) => l.apply(x),
            Projection::Factorized(f) => f.apply(x),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Projection::Dense(l) => l.d_in(),
            Projection::Factorized(f) => f.w_down.rows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Projection::Dense(l) => l.d_out(),
            Projection::Factorized(f) => f.w_up.cols(),
        }
    }

    /// Inner dimension of the computation: `k` when factorized, `d_in` when dense.
    pub fn inner_rank(&self) -> usize {
        match self {
            Projection::Dense(l) => l.d_in(),
            Projection::Factorized(f) => f.rank(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Projection::Dense(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Projection::Dense(l) => l.param_count(),
            Projection::Factorized(f) => f.param_count(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Projection<U> {
        match self {
            Projection::Dense(l) => Projection::Dense(Linear { weight: l.weight.cast(), bias: cast_vec(&l.bias) }),
            Projection::Factorized(f) => Projection::Factorized(FactorizedLinear {
                w_down: f.w_down.cast(),
                w_up: f.w_up.cast(),
                bias: cast_vec(&f.bias),
            }),
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    crate::encoder::cast_vec(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock<T> {
    pub attn_ln: LayerNormParams<T>,
    pub attention: FactorizedAttnParams<T>,
    pub path: AttnPath,
    pub mlp_ln: LayerNormParams<T>,
    pub fc1: Projection<T>,
    pub fc2: Projection<T>,
}

impl<T: Scalar> CompressedBlock<T> {
    pub fn projection(&self, site: Site) -> &Projection<T> {
        match site {
            Site::QProj => &self.attention.q.source,
            Site::KProj => &self.attention.k.source,
            Site::VProj => &self.attention.v.source,
            Site::OutProj => &self.attention.out,
            Site::Fc1 => &self.fc1,
            Site::Fc2 => &self.fc2,
        }
    }
}

/// Encoder whose linear layers are each dense or factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEncoder<T> {
    pub spec: EncoderSpec,
    pub layers: Vec<CompressedBlock<T>>,
    pub pos_emb: Matrix<T>,
    pub stem: Option<ConvStem<T>>,
    pub decisions: Vec<RankDecision>,
}

impl<T: Scalar> CompressedEncoder<T> {
    /// Assembles an encoder from per-site projections; attention paths are chosen by cost.
    pub fn assemble(
        spec: EncoderSpec,
        untouched: EncoderWeights<T>,
        projections: Vec<BTreeMap<Site, Projection<T>>>,
        decisions: Vec<RankDecision>,
    ) -> Result<Self> {
        untouched.validate(&spec)?;
        if projections.len() != spec.n_layers {
            return shape_err(format!("{} projection sets for {} layers", projections.len(), spec.n_layers));
        }
        let covered: std::collections::BTreeSet<TapPoint> = decisions.iter().map(|d| d.tap).collect();
        if covered.len() != decisions.len() || covered != spec.all_taps().into_iter().collect() {
            return Err(Error::Usage("decisions must cover every tap exactly once".into()));
        }
        let layers = untouched
            .layers
            .into_iter()
            .zip(projections)
            .enumerate()
            .map(|(layer, (block, mut proj))| {
                let mut take = |site: Site| {
                    let p = proj
                        .remove(&site)
                        .ok_or_else(|| Error::Usage(format!("missing projection for {}", TapPoint::new(layer, site))))?;
                    if (p.d_in(), p.d_out()) != spec.site_dims(site) {
                        return shape_err(format!("{} has shape {}x{}", TapPoint::new(layer, site), p.d_in(), p.d_out()));
                    }
                    Ok(p)
                };
                let (q, k, v, out) = (take(Site::QProj)?, take(Site::KProj)?, take(Site::VProj)?, take(Site::OutProj)?);
                let (fc1, fc2) = (take(Site::Fc1)?, take(Site::Fc2)?);
                let attention = FactorizedAttnParams::new(q, k, v, out, spec.n_heads, spec.d_head)?;
                let path = AttnPath::select(
                    spec.seq_len,
                    spec.d_head,
                    attention.q.rank(),
                    attention.k.rank(),
                    attention.v.rank(),
                );
                Ok(CompressedBlock { attn_ln: block.attn_ln, attention, path, mlp_ln: block.mlp_ln, fc1, fc2 })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers, pos_emb: untouched.pos_emb, stem: untouched.stem, decisions })
    }

    pub fn decision(&self, tap: TapPoint) -> Option<&RankDecision> {
        self.decisions.iter().find(|d| d.tap == tap)
    }

    pub fn projection(&self, tap: TapPoint) -> &Projection<T> {
        self.layers[tap.layer].projection(tap.site)
    }

    fn untouched_param_count(&self) -> usize {
        let ln: usize = self.layers.iter().map(|b| b.attn_ln.param_count() + b.mlp_ln.param_count()).sum();
        let stem = self.stem.as_ref().map_or(0, |s| s.conv1.param_count() + s.conv2.param_count());
        ln + stem + self.pos_emb.rows() * self.pos_emb.cols()
    }

    pub fn param_count(&self) -> usize {
        let proj: usize = self.spec.all_taps().iter().map(|&t| self.projection(t).param_count()).sum();
        self.untouched_param_count() + proj
    }

    /// Parameter count of the uncompressed encoder this was built from.
    pub fn original_param_count(&self) -> usize {
        let dense: usize = self
            .spec
            .all_taps()
            .iter()
            .map(|t| {
                let (d_in, d_out) = self.spec.site_dims(t.site);
                d_in * d_out + d_out
            })
            .sum();
        self.untouched_param_count() + dense
    }

    /// Forces one attention path in every layer (for equivalence checks).
    pub fn with_path(mut self, path: AttnPath) -> Self {
        for block in &mut self.layers {
            block.path = path;
        }
        self
    }
}

/// Chooses ranks per tap and factorizes every layer that has one; the rest stay dense.
pub fn compress_encoder<T: Scalar>(
    spec: &EncoderSpec,
    weights: &EncoderWeights<T>,
    stats: &BTreeMap<TapPoint, ActivationStats<T>>,
    policy: &RankPolicy,
) -> Result<CompressedEncoder<T>> {
    policy.validate()?;
    weights.validate(spec)?;
    let mut decisions = Vec::new();
    let mut projections = Vec::with_capacity(spec.n_layers);
    for (layer, block) in weights.layers.iter().enumerate() {
        let mut proj = BTreeMap::new();
        for site in Site::ALL {
            let tap = TapPoint::new(layer, site);
            let s = stats
                .get(&tap)
                .ok_or_else(|| Error::Usage(format!("no calibration statistics for tap {tap}")))?;
            let (d_in, d_out) = spec.site_dims(site);
            if s.dim() != d_out {
                return shape_err(format!("statistics for tap {tap} have dimension {}, layer outputs {d_out}", s.dim()));
            }
            let theta = policy.theta_for(site);
            let selection = select_rank(&s.eigenvalues, d_in, d_out, theta, policy.granularity)?;
            let lin = block.linear(site);
            let p = match selection.rank {
                Some(k) => Projection::Factorized(factorize_layer(lin, s, k)?),
                None => Projection::Dense(lin.clone()),
            };
            proj.insert(site, p);
            decisions.push(RankDecision { tap, theta, selection });
        }
        projections.push(proj);
    }
    let mut untouched = weights.clone();
    for block in &mut untouched.layers {
        for site in Site::ALL {
            let (d_in, d_out) = spec.site_dims(site);
            *block.linear_mut(site) = Linear::zeros(d_in, d_out);
        }
    }
    CompressedEncoder::assemble(*spec, untouched, projections, decisions)
}

/// Forward pass of a compressed encoder; attention runs on each layer's selected path.
pub fn forward_compressed<T: Scalar>(compressed: &CompressedEncoder<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    let spec = &compressed.spec;
    let mut x = embed(spec, compressed.stem.as_ref(), &compressed.pos_emb, input)?;
    for block in &compressed.layers {
        let h = block.attn_ln.apply(&x)?;
        x = x.add(&attention_block(&h, &block.attention, block.path)?)?;
        let h = block.mlp_ln.apply(&x)?;
        let f = block.fc2.apply(&gelu(&block.fc1.apply(&h)?))?;
        x = x.add(&f)?;
    }
    Ok(x)
}

impl fmt::Display for RankDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank() {
            Some(k) => write!(f, "{} k={k} var={:.6} θ={}", self.tap, self.selection.variance_captured, self.theta),
            None => write!(f, "{} dense θ={}", self.tap, self.theta),
        }
    }
}

impl<T: Scalar> CompressedEncoder<T> {
    /// Always stored as `f64`; decision metadata goes into the manifest as
    /// `<tap>.k`, `<tap>.variance_captured` and `<tap>.theta_used`.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        archive.set_meta("kind", KIND_COMPRESSED);
        archive.set_meta("spec", self.spec.to_json());
        let untouched = EncoderWeights {
            layers: self
                .layers
                .iter()
                .map(|b| {
                    let mut block = EncoderWeights::<T>::zeros(&EncoderSpec { n_layers: 1, ..self.spec }).layers.remove(0);
                    block.attn_ln = b.attn_ln.clone();
                    block.mlp_ln = b.mlp_ln.clone();
                    block
                })
                .collect(),
            pos_emb: self.pos_emb.clone(),
            stem: self.stem.clone(),
        };
        push_untouched(&mut archive, &untouched, DType::F64)?;
        for d in &self.decisions {
            let tap = d.tap;
            let k = d.rank().map_or_else(|| "dense".to_string(), |k| k.to_string());
            archive.set_meta(format!("{tap}.k"), k);
            archive.set_meta(format!("{tap}.variance_captured"), d.selection.variance_captured.to_string());
            archive.set_meta(format!("{tap}.theta_used"), d.theta.to_string());
            archive.set_meta(format!("{tap}.efficiency_cap"), d.selection.efficiency_cap.to_string());
            if let Some(a) = d.selection.accuracy_rank {
                archive.set_meta(format!("{tap}.accuracy_k"), a.to_string());
            }
            let name = linear_name(tap.layer, tap.site);
            match self.projection(tap) {
                Projection::Dense(l) => {
                    archive.push_matrix(format!("{name}.weight"), &l.weight, DType::F64)?;
                    archive.push_vector(format!("{name}.bias"), &l.bias, DType::F64)?;
                }
                Projection::Factorized(f) => {
                    archive.push_matrix(format!("{name}.w_down"), &f.w_down, DType::F64)?;
                    archive.push_matrix(format!("{name}.w_up"), &f.w_up, DType::F64)?;
                    archive.push_vector(format!("{name}.bias"), &f.bias, DType::F64)?;
                }
            }
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        expect_kind(archive, KIND_COMPRESSED)?;
        let spec = EncoderSpec::from_json(archive.meta("spec")?)?;
        let untouched = read_untouched(archive, &spec)?;
        let parse_f64 = |key: String| -> Result<f64> {
            archive.meta(&key)?.parse().map_err(|_| Error::Data(format!("{key} is not a number")))
        };
        let parse_count = |key: String| -> Result<usize> {
            archive.meta(&key)?.parse().map_err(|_| Error::Data(format!("{key} is not a count")))
        };
        let mut decisions = Vec::new();
        let mut projections = vec![BTreeMap::new(); spec.n_layers];
        for tap in spec.all_taps() {
            let name = linear_name(tap.layer, tap.site);
            let rank = match archive.meta(&format!("{tap}.k"))? {
                "dense" => None,
                k => Some(k.parse::<usize>().map_err(|_| Error::Data(format!("{tap}.k is not a rank")))?),
            };
            let bias = archive.vector(&format!("{name}.bias"))?;
            let proj = match rank {
                None => Projection::Dense(Linear::new(archive.matrix(&format!("{name}.weight"))?, bias)?),
                Some(k) => {
                    let f = FactorizedLinear::new(
                        archive.matrix(&format!("{name}.w_down"))?,
                        archive.matrix(&format!("{name}.w_up"))?,
                        bias,
                    )?;
                    if f.rank() != k {
                        return shape_err(format!("{tap}: stored factors have rank {}, manifest says {k}", f.rank()));
                    }
                    Projection::Factorized(f)
                }
            };
            projections[tap.layer].insert(tap.site, proj);
            let accuracy_rank = match archive.meta(&format!("{tap}.accuracy_k")) {
                Ok(_) => Some(parse_count(format!("{tap}.accuracy_k"))?),
                Err(_) => None,
            };
            decisions.push(RankDecision {
                tap,
                theta: parse_f64(format!("{tap}.theta_used"))?,
                selection: RankSelection {
                    rank,
                    variance_captured: parse_f64(format!("{tap}.variance_captured"))?,
                    efficiency_cap: parse_count(format!("{tap}.efficiency_cap"))?,
                    accuracy_rank,
                },
            });
        }
        Self::assemble(spec, untouched, projections, decisions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::collect_stats;
    use crate::encoder::{forward, synth_weights};
    use crate::modelio::synth_calib;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn whisper_scale_caps() {
        assert_eq!(efficiency_cap(1280, 1280), 639);
        assert_eq!(efficiency_cap(1280, 1280) / 16 * 16, 624);
        assert_eq!(efficiency_cap(1280, 5120), 1023);
        assert_eq!(efficiency_cap(5120, 1280), 1023);
        assert_eq!(efficiency_cap(1, 1), 0);
    }

    #[test]
    fn rank_one_spectrum() {
        let mut eig = vec![0.0f64; 64];
        eig[0] = 1.0;
        let s = select_rank(&eig, 64, 64, 0.99, 16).unwrap();
        assert_eq!(s.rank, Some(16));
        assert_eq!(s.variance_captured, 1.0);
    }

    #[test]
    fn zero_spectrum_selects_granularity() {
        let s = select_rank(&[0.0f64; 32], 32, 32, 0.99, 4).unwrap();
        assert_eq!(s.rank, Some(4));
        assert_eq!(s.variance_captured, 1.0);
    }

    #[test]
    fn theta_one_is_never_met() {
        let eig: Vec<f64> = (0..32).map(|i| 0.5f64.powi(i)).collect();
        let s = select_rank(&eig, 32, 32, 1.0, 4).unwrap();
        assert_eq!(s.rank, None);
        assert_eq!(s.accuracy_rank, None);
    }

    #[test]
    fn exact_threshold_rounds_up() {
        // first four hold exactly half
        let eig = [1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let s = select_rank(&eig, 64, 8, 0.5, 4).unwrap();
        assert_eq!(s.accuracy_rank, Some(8));
    }

    #[test]
    fn infeasible_rank_stays_dense() {
        let eig = vec![1.0f64; 32];
        let s = select_rank(&eig, 32, 32, 0.9, 4).unwrap();
        assert_eq!(s.accuracy_rank, Some(32));
        assert_eq!(s.rank, None);
        assert_eq!(s.efficiency_cap, 15);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(select_rank(&[1.0f64, 2.0], 2, 2, 0.9, 1), Err(Error::Contract(_))));
        assert!(matches!(select_rank(&[1.0f64, -1.0], 2, 2, 0.9, 1), Err(Error::Contract(_))));
        assert!(matches!(select_rank(&[1.0f64], 2, 2, 0.9, 1), Err(Error::Shape(_))));
        assert!(matches!(select_rank(&[1.0f64], 1, 1, 0.0, 1), Err(Error::Range(_))));
        assert!(matches!(select_rank(&[1.0f64], 1, 1, 0.5, 0), Err(Error::Range(_))));
    }

    #[test]
    fn presets() {
        assert_eq!(RankPolicy::preset(Preset::QualityFocused).theta_attn, 0.999);
        let b = RankPolicy::preset("b".parse().unwrap());
        assert_eq!((b.theta_attn, b.theta_mlp, b.granularity), (0.99, 0.999, 16));
        let c = RankPolicy::preset(Preset::EfficiencyFocused);
        assert_eq!((c.theta_attn, c.theta_mlp), (0.99, 0.995));
        assert!("d".parse::<Preset>().is_err());
    }

    fn random_stats(d_out: usize, rng: &mut ChaCha8Rng) -> ActivationStats<f64> {
        let y = Matrix::from_fn(3 * d_out, d_out, |_, _| rng.random_range(-1.0..1.0));
        ActivationStats::from_samples(TapPoint::new(0, Site::Fc1), &y).unwrap()
    }

    #[test]
    fn full_rank_factorization_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lin = Linear::new(w, b).unwrap();
        let stats = random_stats(5, &mut rng);
        let f = factorize_layer(&lin, &stats, 5).unwrap();
        let x = Matrix::from_fn(9, 6, |_, _| rng.random_range(-1.0..1.0));
        assert!(f.apply(&x).unwrap().max_abs_diff(&lin.apply(&x).unwrap()) < 1e-9);
        let rows_orthonormal = f.w_up.matmul_transposed(&f.w_up).unwrap();
        assert!(rows_orthonormal.max_abs_diff(&Matrix::identity(5)) < 1e-8);
    }

    #[test]
    fn zero_weight_gives_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(Matrix::zeros(4, 6), (0..6).map(|i| i as f64).collect()).unwrap();
        let stats = random_stats(6, &mut rng);
        let f = factorize_layer(&lin, &stats, 2).unwrap();
        let x = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = f.apply(&x).unwrap();
        for r in 0..5 {
            for (a, b) in y.row(r).iter().zip(&f.bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factorize_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = random_stats(4, &mut rng);
        assert!(factorize_layer(&Linear::<f64>::zeros(3, 5), &stats, 2).is_err());
        assert!(matches!(factorize_layer(&Linear::<f64>::zeros(3, 4), &stats, 5), Err(Error::Range(_))));
    }

    fn toy_setup() -> (EncoderSpec, EncoderWeights<f64>, BTreeMap<TapPoint, ActivationStats<f64>>) {
        let spec = EncoderSpec::new(2, 16, 2, 32, 12);
        let w = synth_weights(&spec, 3).unwrap();
        let calib = synth_calib(&spec, 6, 3, 0.05, 5).unwrap();
        let stats = collect_stats(&spec, &w, &calib, &spec.all_taps()).unwrap();
        (spec, w, stats)
    }

    #[test]
    fn theta_one_keeps_everything_dense() {
        let (spec, w, stats) = toy_setup();
        let c = compress_encoder(&spec, &w, &stats, &RankPolicy::new(1.0, 1.0, 4).unwrap()).unwrap();
        assert!(c.decisions.iter().all(|d| d.rank().is_none()));
        let x = synth_calib::<f64>(&spec, 1, 16, 0.0, 99).unwrap().clips()[0].clone();
        assert_eq!(forward_compressed(&c, &x).unwrap(), forward(&spec, &w, &x).unwrap());
        assert_eq!(c.param_count(), w.param_count());
        assert_eq!(c.original_param_count(), w.param_count());
    }

    #[test]
    fn preset_b_thresholds_per_group() {
        let (spec, w, stats) = toy_setup();
        let c = compress_encoder(&spec, &w, &stats, &RankPolicy::preset(Preset::Balanced).with_granularity(4)).unwrap();
        for d in &c.decisions {
            let expected = if d.tap.site.is_attention() { 0.99 } else { 0.999 };
            assert_eq!(d.theta, expected, "{}", d.tap);
        }
    }

    #[test]
    fn missing_stats_names_tap() {
        let (spec, w, mut stats) = toy_setup();
        stats.remove(&TapPoint::new(1, Site::VProj));
        let err = compress_encoder(&spec, &w, &stats, &RankPolicy::preset(Preset::Balanced)).unwrap_err();
        assert!(matches!(&err, Error::Usage(m) if m.contains("1.v_proj")), "{err}");
    }

    #[test]
    fn compressed_archive_round_trip() {
        let (spec, w, stats) = toy_setup();
        let c = compress_encoder(&spec, &w, &stats, &RankPolicy::new(0.9, 0.95, 2).unwrap()).unwrap();
        assert!(c.decisions.iter().any(|d| d.rank().is_some()));
        let parsed = TensorArchive::from_bytes(&c.to_archive().unwrap().to_bytes()).unwrap();
        assert_eq!(CompressedEncoder::<f64>::from_archive(&parsed).unwrap(), c);
    }
}
