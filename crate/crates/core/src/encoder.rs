//! Whisper-style pre-norm Transformer encoder with activation taps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gelu, layernorm, softmax_rows, Matrix};
use crate::modelio::{DType, TensorArchive};
use crate::scalar::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Sequence length seen by the Transformer blocks.
    pub seq_len: usize,
    pub has_conv_stem: bool,
    /// Input feature channels of the conv stem; ignored without one.
    #[serde(default)]
    pub n_mels: usize,
}

impl EncoderSpec {
    /// Desk-scale default: 4 layers, L=64, d_model=32, 4 heads of 8, d_ff=128.
    pub fn toy() -> Self {
        Self::new(4, 32, 4, 128, 64)
    }

    /// Spec without a conv stem; `d_head` is derived.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff,
            seq_len,
            has_conv_stem: false,
            n_mels: 0,
        }
    }

    pub fn with_conv_stem(mut self, n_mels: usize) -> Self {
        self.has_conv_stem = true;
        self.n_mels = n_mels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Usage(format!("encoder spec: {name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Usage(format!(
                "encoder spec: d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.has_conv_stem && self.n_mels == 0 {
            return Err(Error::Usage("encoder spec: conv stem needs n_mels >= 1".into()));
        }
        Ok(())
    }

    /// Shape of one raw input: `2L × n_mels` through the conv stem, `L × d_model` otherwise.
    pub fn input_shape(&self) -> (usize, usize) {
        if self.has_conv_stem {
            (2 * self.seq_len, self.n_mels)
        } else {
            (self.seq_len, self.d_model)
        }
    }

    /// `(d_in, d_out)` of a linear site.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::QProj | Site::KProj | Site::VProj | Site::OutProj => (self.d_model, self.d_model),
            Site::Fc1 => (self.d_model, self.d_ff),
            Site::Fc2 => (self.d_ff, self.d_model),
        }
    }

    /// Every tap point of the encoder, layer-major.
    pub fn all_taps(&self) -> Vec<TapPoint> {
        (0..self.n_layers)
            .flat_map(|layer| Site::ALL.into_iter().map(move |site| TapPoint { layer, site }))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Data(format!("encoder spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One of the six linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    QProj,
    KProj,
    VProj,
    OutProj,
    Fc1,
    Fc2,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::QProj, Site::KProj, Site::VProj, Site::OutProj, Site::Fc1, Site::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Site::QProj => "q_proj",
            Site::KProj => "k_proj",
            Site::VProj => "v_proj",
            Site::OutProj => "out_proj",
            Site::Fc1 => "fc1",
            Site::Fc2 => "fc2",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Site::Fc1 | Site::Fc2)
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown site {s:?}")))
    }
}

/// Where a linear layer's output is recorded: `<layer>.<site>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapPoint {
    pub layer: usize,
    pub site: Site,
}

impl TapPoint {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.site.name())
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, site) = s.split_once('.').ok_or_else(|| Error::Usage(format!("bad tap {s:?}")))?;
        let layer = layer.parse().map_err(|_| Error::Usage(format!("bad tap layer in {s:?}")))?;
        Ok(Self { layer, site: site.parse()? })
    }
}

/// `Y = X·W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return shape_err(format!("linear {}x{} with bias of {}", weight.rows(), weight.cols(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Matrix::zeros(d_in, d_out), bias: vec![T::zero(); d_out] }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self { gain: vec![T::one(); d], bias: vec![T::zero(); d] }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        layernorm(x, &self.gain, &self.bias, T::lit(LAYERNORM_EPS))
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub attn_ln: LayerNormParams<T>,
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub mlp_ln: LayerNormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn linear(&self, site: Site) -> &Linear<T> {
        match site {
            Site::QProj => &self.q_proj,
            Site::KProj => &self.k_proj,
            Site::VProj => &self.v_proj,
            Site::OutProj => &self.out_proj,
            Site::Fc1 => &self.fc1,
            Site::Fc2 => &self.fc2,
        }
    }

    pub fn linear_mut(&mut self, site: Site) -> &mut Linear<T> {
        match site {
            Site::QProj => &mut self.q_proj,
            Site::KProj => &mut self.k_proj,
            Site::VProj => &mut self.v_proj,
            Site::OutProj => &mut self.out_proj,
            Site::Fc1 => &mut self.fc1,
            Site::Fc2 => &mut self.fc2,
        }
    }
}

/// Two 1-D convolutions (kernel 3, padding 1; the second with stride 2), each followed by GELU.
/// Kernels are stored im2col-style as `(3·c_in) × c_out` linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStem<T> {
    pub conv1: Linear<T>,
    pub conv2: Linear<T>,
}

impl<T: Scalar> ConvStem<T> {
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let h = gelu(&self.conv1.apply(&im2col(x, 1)?)?);
        Ok(gelu(&self.conv2.apply(&im2col(&h, 2)?)?))
    }
}

/// Rows of `[x[t-1], x[t], x[t+1]]` windows (zero padded) taken every `stride` steps.
fn im2col<T: Scalar>(x: &Matrix<T>, stride: usize) -> Result<Matrix<T>> {
    let (n, c) = x.shape();
    let out_rows = n.div_ceil(stride);
    Ok(Matrix::from_fn(out_rows, 3 * c, |r, j| {
        let tap = j / c;
        let ch = j % c;
        let t = (r * stride + tap) as isize - 1;
        if t < 0 || t as usize >= n {
            T::zero()
        } else {
            x[(t as usize, ch)]
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub layers: Vec<BlockWeights<T>>,
    /// `seq_len × d_model`, added after the stem.
    pub pos_emb: Matrix<T>,
    pub stem: Option<ConvStem<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// All-zero linear layers and embeddings with identity layer norms.
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let (d, ff) = (spec.d_model, spec.d_ff);
        let block = BlockWeights {
            attn_ln: LayerNormParams::identity(d),
            q_proj: Linear::zeros(d, d),
            k_proj: Linear::zeros(d, d),
            v_proj: Linear::zeros(d, d),
            out_proj: Linear::zeros(d, d),
            mlp_ln: LayerNormParams::identity(d),
            fc1: Linear::zeros(d, ff),
            fc2: Linear::zeros(ff, d),
        };
        Self {
            layers: vec![block; spec.n_layers],
            pos_emb: Matrix::zeros(spec.seq_len, d),
            stem: spec.has_conv_stem.then(|| ConvStem {
                conv1: Linear::zeros(3 * spec.n_mels, d),
                conv2: Linear::zeros(3 * d, d),
            }),
        }
    }

    pub fn validate(&self, spec: &EncoderSpec) -> Result<()> {
        spec.validate()?;
        if self.layers.len() != spec.n_layers {
            return shape_err(format!("{} layers for a {}-layer spec", self.layers.len(), spec.n_layers));
        }
        if self.pos_emb.shape() != (spec.seq_len, spec.d_model) {
            return shape_err(format!("positional embedding {:?}", self.pos_emb.shape()));
        }
        for (i, block) in self.layers.iter().enumerate() {
            for ln in [&block.attn_ln, &block.mlp_ln] {
                if ln.gain.len() != spec.d_model || ln.bias.len() != spec.d_model {
                    return shape_err(format!("layer {i}: layer norm width"));
                }
            }
            for site in Site::ALL {
                let lin = block.linear(site);
                if (lin.d_in(), lin.d_out()) != spec.site_dims(site) || lin.bias.len() != lin.d_out() {
                    return shape_err(format!(
                        "layer {i} {}: {}x{} weight, expected {:?}",
                        site.name(),
                        lin.d_in(),
                        lin.d_out(),
                        spec.site_dims(site)
                    ));
                }
            }
        }
        match (&self.stem, spec.has_conv_stem) {
            (Some(stem), true) => {
                if stem.conv1.weight.shape() != (3 * spec.n_mels, spec.d_model)
                    || stem.conv2.weight.shape() != (3 * spec.d_model, spec.d_model)
                {
                    return shape_err("conv stem kernel shapes");
                }
            }
            (None, false) => {}
            _ => return shape_err("conv stem presence does not match spec"),
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .layers
            .iter()
            .map(|b| {
                b.attn_ln.param_count()
                    + b.mlp_ln.param_count()
                    + Site::ALL.iter().map(|&s| b.linear(s).param_count()).sum::<usize>()
            })
            .sum();
        let stem = self.stem.as_ref().map_or(0, |s| s.conv1.param_count() + s.conv2.param_count());
        blocks + stem + self.pos_emb.rows() * self.pos_emb.cols()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let lin = |l: &Linear<T>| Linear { weight: l.weight.cast(), bias: cast_vec(&l.bias) };
        let ln = |l: &LayerNormParams<T>| LayerNormParams { gain: cast_vec(&l.gain), bias: cast_vec(&l.bias) };
        EncoderWeights {
            layers: self
                .layers
                .iter()
                .map(|b| BlockWeights {
                    attn_ln: ln(&b.attn_ln),
                    q_proj: lin(&b.q_proj),
                    k_proj: lin(&b.k_proj),
                    v_proj: lin(&b.v_proj),
                    out_proj: lin(&b.out_proj),
                    mlp_ln: ln(&b.mlp_ln),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            pos_emb: self.pos_emb.cast(),
            stem: self.stem.as_ref().map(|s| ConvStem { conv1: lin(&s.conv1), conv2: lin(&s.conv2) }),
        }
    }
}

pub(crate) fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64(x.as_f64()).unwrap()).collect()
}

/// Runs the conv stem (if any) and adds the positional embedding.
pub(crate) fn embed<T: Scalar>(
    spec: &EncoderSpec,
    stem: Option<&ConvStem<T>>,
    pos_emb: &Matrix<T>,
    input: &Matrix<T>,
) -> Result<Matrix<T>> {
    if input.shape() != spec.input_shape() {
        return shape_err(format!("input {:?}, expected {:?}", input.shape(), spec.input_shape()));
    }
    if !input.is_finite() {
        return Err(Error::Data("input has non-finite entries".into()));
    }
    let x = match stem {
        Some(stem) => stem.apply(input)?,
        None => input.clone(),
    };
    x.add(pos_emb)
}

/// Standard multi-head attention on full `Q`, `K`, `V` (`L × d_model`); heads concatenated.
pub(crate) fn multi_head_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
    d_head: usize,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_usize(d_head).unwrap().sqrt();
    let heads = (0..n_heads)
        .map(|h| {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let scores = q.col_slice(lo, hi)?.matmul_transposed(&k.col_slice(lo, hi)?)?;
            softmax_rows(&scores, scale)?.matmul(&v.col_slice(lo, hi)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&heads)
}

fn forward_impl<T: Scalar>(
    spec: &EncoderSpec,
    weights: &EncoderWeights<T>,
    input: &Matrix<T>,
    mut record: impl FnMut(TapPoint, &Matrix<T>),
) -> Result<Matrix<T>> {
    weights.validate(spec)?;
    let mut x = embed(spec, weights.stem.as_ref(), &weights.pos_emb, input)?;
    for (layer, block) in weights.layers.iter().enumerate() {
        let mut tap = |site: Site, y: &Matrix<T>| record(TapPoint { layer, site }, y);
        let h = block.attn_ln.apply(&x)?;
        let q = block.q_proj.apply(&h)?;
        tap(Site::QProj, &q);
        let k = block.k_proj.apply(&h)?;
        tap(Site::KProj, &k);
        let v = block.v_proj.apply(&h)?;
        tap(Site::VProj, &v);
        let attn = multi_head_attention(&q, &k, &v, spec.n_heads, spec.d_head)?;
        let o = block.out_proj.apply(&attn)?;
        tap(Site::OutProj, &o);
        x = x.add(&o)?;

        let h = block.mlp_ln.apply(&x)?;
        let f1 = block.fc1.apply(&h)?;
        tap(Site::Fc1, &f1);
        let f2 = block.fc2.apply(&gelu(&f1))?;
        tap(Site::Fc2, &f2);
        x = x.add(&f2)?;
    }
    Ok(x)
}

/// Final hidden states of the encoder.
pub fn forward<T: Scalar>(spec: &EncoderSpec, weights: &EncoderWeights<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    forward_impl(spec, weights, input, |_, _| {})
}

/// Recorded layer outputs keyed by tap.
pub type TapOutputs<T> = BTreeMap<TapPoint, Matrix<T>>;

/// Forward pass that also returns the output of each requested linear layer, taken after the
/// bias and before any nonlinearity or residual add.
pub fn forward_with_taps<T: Scalar>(
    spec: &EncoderSpec,
    weights: &EncoderWeights<T>,
    input: &Matrix<T>,
    taps: &[TapPoint],
) -> Result<(Matrix<T>, TapOutputs<T>)> {
    if let Some(bad) = taps.iter().find(|t| t.layer >= spec.n_layers) {
        return Err(Error::Range(format!("tap {bad} on a {}-layer encoder", spec.n_layers)));
    }
    let wanted: BTreeSet<TapPoint> = taps.iter().copied().collect();
    let mut recorded = BTreeMap::new();
    let out = forward_impl(spec, weights, input, |tap, y| {
        if wanted.contains(&tap) {
            recorded.insert(tap, y.clone());
        }
    })?;
    Ok((out, recorded))
}

/// Sinusoidal positional embedding (sine half then cosine half).
pub fn sinusoidal_positions<T: Scalar>(seq_len: usize, d_model: usize) -> Matrix<T> {
    let half = d_model / 2;
    let step = if half > 1 { (10_000f64).ln() / (half - 1) as f64 } else { 0.0 };
    Matrix::from_fn(seq_len, d_model, |p, c| {
        let (i, cosine) = if c < half { (c, false) } else { (c - half, true) };
        if i >= half {
            return T::zero();
        }
        let angle = p as f64 * (-step * i as f64).exp();
        T::lit(if cosine { angle.cos() } else { angle.sin() })
    })
}

/// Bias standard deviation of synthesized layers.
const SYNTH_BIAS_STD: f64 = 0.02;

/// Reproducible random weights: linear and conv kernels `N(0, 1/fan_in)`, small random
/// biases, identity layer norms and sinusoidal positions.
pub fn synth_weights<T: Scalar>(spec: &EncoderSpec, seed: u64) -> Result<EncoderWeights<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias_dist = Normal::new(0.0, SYNTH_BIAS_STD).unwrap();
    let mut linear = |d_in: usize, d_out: usize| {
        let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
        let weight = Matrix::from_fn(d_in, d_out, |_, _| T::lit(dist.sample(&mut rng)));
        let bias = (0..d_out).map(|_| T::lit(bias_dist.sample(&mut rng))).collect();
        Linear { weight, bias }
    };
    let stem = spec.has_conv_stem.then(|| ConvStem {
        conv1: linear(3 * spec.n_mels, spec.d_model),
        conv2: linear(3 * spec.d_model, spec.d_model),
    });
    let layers = (0..spec.n_layers)
        .map(|_| {
            let mut block = EncoderWeights::<T>::zeros(&EncoderSpec { n_layers: 1, ..*spec }).layers.remove(0);
            for site in Site::ALL {
                let (d_in, d_out) = spec.site_dims(site);
                *block.linear_mut(site) = linear(d_in, d_out);
            }
            block
        })
        .collect();
    Ok(EncoderWeights { layers, pos_emb: sinusoidal_positions(spec.seq_len, spec.d_model), stem })
}

pub(crate) fn linear_name(layer: usize, site: Site) -> String {
    format!("layers.{layer}.{}", site.name())
}

pub(crate) fn push_untouched<T: Scalar>(
    archive: &mut TensorArchive,
    weights: &EncoderWeights<T>,
    dtype: DType,
) -> Result<()> {
    archive.push_matrix("pos_emb", &weights.pos_emb, dtype)?;
    if let Some(stem) = &weights.stem {
        for (name, lin) in [("stem.conv1", &stem.conv1), ("stem.conv2", &stem.conv2)] {
            archive.push_matrix(format!("{name}.weight"), &lin.weight, dtype)?;
            archive.push_vector(format!("{name}.bias"), &lin.bias, dtype)?;
        }
    }
    for (i, block) in weights.layers.iter().enumerate() {
        for (name, ln) in [("attn_ln", &block.attn_ln), ("mlp_ln", &block.mlp_ln)] {
            archive.push_vector(format!("layers.{i}.{name}.gain"), &ln.gain, dtype)?;
            archive.push_vector(format!("layers.{i}.{name}.bias"), &ln.bias, dtype)?;
        }
    }
    Ok(())
}

fn read_linear<T: Scalar>(archive: &TensorArchive, name: &str) -> Result<Linear<T>> {
    Linear::new(archive.matrix(&format!("{name}.weight"))?, archive.vector(&format!("{name}.bias"))?)
}

/// Reads layer norms, positional embedding and stem; linear layers are filled with zeros.
pub(crate) fn read_untouched<T: Scalar>(archive: &TensorArchive, spec: &EncoderSpec) -> Result<EncoderWeights<T>> {
    let mut weights = EncoderWeights::zeros(spec);
    weights.pos_emb = archive.matrix("pos_emb")?;
    if spec.has_conv_stem {
        weights.stem = Some(ConvStem {
            conv1: read_linear(archive, "stem.conv1")?,
            conv2: read_linear(archive, "stem.conv2")?,
        });
    }
    for (i, block) in weights.layers.iter_mut().enumerate() {
        for (name, ln) in [("attn_ln", &mut block.attn_ln), ("mlp_ln", &mut block.mlp_ln)] {
            ln.gain = archive.vector(&format!("layers.{i}.{name}.gain"))?;
            ln.bias = archive.vector(&format!("layers.{i}.{name}.bias"))?;
        }
    }
    Ok(weights)
}

pub const KIND_WEIGHTS: &str = "weights";

impl<T: Scalar> EncoderWeights<T> {
    /// Serializes spec and weights; `dtype` picks the on-disk precision.
    pub fn to_archive(&self, spec: &EncoderSpec, dtype: DType) -> Result<TensorArchive> {
        self.validate(spec)?;
        let mut archive = TensorArchive::new();
        archive.set_meta("kind", KIND_WEIGHTS);
        archive.set_meta("spec", spec.to_json());
        push_untouched(&mut archive, self, dtype)?;
        for (i, block) in self.layers.iter().enumerate() {
            for site in Site::ALL {
                let lin = block.linear(site);
                let name = linear_name(i, site);
                archive.push_matrix(format!("{name}.weight"), &lin.weight, dtype)?;
                archive.push_vector(format!("{name}.bias"), &lin.bias, dtype)?;
            }
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<(EncoderSpec, Self)> {
        expect_kind(archive, KIND_WEIGHTS)?;
        let spec = EncoderSpec::from_json(archive.meta("spec")?)?;
        let mut weights = read_untouched(archive, &spec)?;
        for (i, block) in weights.layers.iter_mut().enumerate() {
            for site in Site::ALL {
                *block.linear_mut(site) = read_linear(archive, &linear_name(i, site))?;
            }
        }
        weights.validate(&spec)?;
        Ok((spec, weights))
    }
}

pub(crate) fn expect_kind(archive: &TensorArchive, kind: &str) -> Result<()> {
    let found = archive.meta("kind")?;
    if found != kind {
        return Err(Error::Data(format!("expected a {kind} archive, found {found}")));
    }
    Ok(())
}
