//! Per-layer PCA statistics of encoder activations over a calibration set.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{expect_kind, forward_with_taps, EncoderSpec, EncoderWeights, TapPoint};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{sym_eig, Matrix};
use crate::modelio::{CalibSet, DType, TensorArchive};
use crate::scalar::Scalar;

pub const KIND_STATS: &str = "stats";

/// Clips per parallel work item. Fixed so the reduction order never depends on thread count.
const CLIP_CHUNK: usize = 4;

/// Mean, descending eigenvalues and principal directions of one tap's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats<T> {
    pub tap: TapPoint,
    pub mean: Vec<T>,
    /// Eigenvalues of the centered scatter matrix, i.e. squared singular values of the
    /// centered sample matrix. Non-negative, descending.
    pub eigenvalues: Vec<T>,
    /// `d_out × d_out`; column `i` pairs with `eigenvalues[i]`.
    pub basis: Matrix<T>,
    pub sample_count: usize,
}

impl<T: Scalar> ActivationStats<T> {
    /// Stats from a scatter matrix and mean already accumulated elsewhere.
    pub fn from_scatter(tap: TapPoint, mean: Vec<T>, scatter: &Matrix<T>, sample_count: usize) -> Result<Self> {
        if scatter.shape() != (mean.len(), mean.len()) {
            return shape_err(format!("scatter {:?} for mean of {}", scatter.shape(), mean.len()));
        }
        let eig = sym_eig(scatter)?.clamp_nonnegative();
        Ok(Self { tap, mean, eigenvalues: eig.eigenvalues, basis: eig.eigenvectors, sample_count })
    }

    /// Stats of the rows of `samples`.
    pub fn from_samples(tap: TapPoint, samples: &Matrix<T>) -> Result<Self> {
        let mean = samples.column_means();
        let mut scatter = Matrix::zeros(samples.cols(), samples.cols());
        accumulate_scatter(&mut scatter, samples, &mean)?;
        Self::from_scatter(tap, mean, &scatter, samples.rows())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn total_variance(&self) -> T {
        self.eigenvalues.iter().copied().sum()
    }

    /// First `k` principal directions, `d_out × k`.
    pub fn leading(&self, k: usize) -> Result<Matrix<T>> {
        if k > self.dim() {
            return Err(Error::Range(format!("rank {k} exceeds dimension {}", self.dim())));
        }
        self.basis.col_slice(0, k)
    }

    /// `V_k · V_kᵀ`.
    pub fn projector(&self, k: usize) -> Result<Matrix<T>> {
        let vk = self.leading(k)?;
        vk.matmul_transposed(&vk)
    }

    /// Leading eigenvalues divided by their sum (all zero for a zero spectrum).
    pub fn normalized_spectrum(&self, n: usize) -> Vec<T> {
        let total = self.total_variance();
        self.eigenvalues
            .iter()
            .take(n)
            .map(|&v| if total > T::zero() { v / total } else { T::zero() })
            .collect()
    }
}

/// `scatter += (Y − mean)ᵀ (Y − mean)`.
fn accumulate_scatter<T: Scalar>(scatter: &mut Matrix<T>, y: &Matrix<T>, mean: &[T]) -> Result<()> {
    let centered = y.add_row(&mean.iter().map(|&m| -m).collect::<Vec<_>>())?;
    let part = centered.transpose().matmul(&centered)?;
    *scatter = scatter.add(&part)?;
    Ok(())
}

fn add_into<T: Scalar>(acc: &mut [T], part: &[T]) {
    for (a, &p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

fn tapped_outputs<T: Scalar>(
    spec: &EncoderSpec,
    weights: &EncoderWeights<T>,
    clip: &Matrix<T>,
    taps: &[TapPoint],
) -> Result<BTreeMap<TapPoint, Matrix<T>>> {
    let (_, recorded) = forward_with_taps(spec, weights, clip, taps)?;
    for (tap, y) in &recorded {
        if !y.is_finite() {
            return Err(Error::Data(format!("non-finite activations at tap {tap}")));
        }
    }
    Ok(recorded)
}

/// Runs every clip through the original encoder and computes PCA statistics for each tap.
///
/// Two passes over the clips: the first pools the mean over all `L · N_calib` rows, the second
/// accumulates the centered scatter. Clips are processed in parallel in fixed chunks and the
/// partial sums are merged in clip order, so results are bit-reproducible.
pub fn collect_stats<T: Scalar>(
    spec: &EncoderSpec,
    weights: &EncoderWeights<T>,
    calib: &CalibSet<T>,
    taps: &[TapPoint],
) -> Result<BTreeMap<TapPoint, ActivationStats<T>>> {
    if taps.is_empty() {
        return Err(Error::Usage("no taps requested".into()));
    }
    if let Some(bad) = taps.iter().find(|t| t.layer >= spec.n_layers) {
        return Err(Error::Range(format!("tap {bad} on a {}-layer encoder", spec.n_layers)));
    }
    weights.validate(spec)?;
    let clips = calib.clips();
    let sample_count = spec.seq_len * clips.len();

    let sum_parts: Vec<BTreeMap<TapPoint, Vec<T>>> = clips
        .par_chunks(CLIP_CHUNK)
        .map(|chunk| {
            let mut sums: BTreeMap<TapPoint, Vec<T>> = BTreeMap::new();
            for clip in chunk {
                for (tap, y) in tapped_outputs(spec, weights, clip, taps)? {
                    let acc = sums.entry(tap).or_insert_with(|| vec![T::zero(); y.cols()]);
                    for r in 0..y.rows() {
                        add_into(acc, y.row(r));
                    }
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut means: BTreeMap<TapPoint, Vec<T>> = BTreeMap::new();
    for part in sum_parts {
        for (tap, s) in part {
            match means.get_mut(&tap) {
                Some(acc) => add_into(acc, &s),
                None => {
                    means.insert(tap, s);
                }
            }
        }
    }
    let n = T::from_usize(sample_count).unwrap();
    for m in means.values_mut() {
        m.iter_mut().for_each(|v| *v /= n);
    }

    let scatter_parts: Vec<BTreeMap<TapPoint, Matrix<T>>> = clips
        .par_chunks(CLIP_CHUNK)
        .map(|chunk| {
            let mut parts: BTreeMap<TapPoint, Matrix<T>> = BTreeMap::new();
            for clip in chunk {
                for (tap, y) in tapped_outputs(spec, weights, clip, taps)? {
                    let d = y.cols();
                    let acc = parts.entry(tap).or_insert_with(|| Matrix::zeros(d, d));
                    accumulate_scatter(acc, &y, &means[&tap])?;
                }
            }
            Ok(parts)
        })
        .collect::<Result<_>>()?;
    let mut scatters: BTreeMap<TapPoint, Matrix<T>> = BTreeMap::new();
    for part in scatter_parts {
        for (tap, s) in part {
            let merged = match scatters.remove(&tap) {
                Some(acc) => acc.add(&s)?,
                None => s,
            };
            scatters.insert(tap, merged);
        }
    }

    let jobs: Vec<(TapPoint, Vec<T>, Matrix<T>)> = scatters
        .into_iter()
        .map(|(tap, scatter)| (tap, means.remove(&tap).expect("mean per tap"), scatter))
        .collect();
    jobs.into_par_iter()
        .map(|(tap, mean, scatter)| {
            let stats = ActivationStats::from_scatter(tap, mean, &scatter, sample_count)?;
            Ok((tap, stats))
        })
        .collect()
}

pub fn stats_to_archive<T: Scalar>(
    spec: &EncoderSpec,
    stats: &BTreeMap<TapPoint, ActivationStats<T>>,
) -> Result<TensorArchive> {
    let mut archive = TensorArchive::new();
    archive.set_meta("kind", KIND_STATS);
    archive.set_meta("spec", spec.to_json());
    for (tap, s) in stats {
        archive.push_vector(format!("{tap}.mean"), &s.mean, DType::F64)?;
        archive.push_vector(format!("{tap}.eigvals"), &s.eigenvalues, DType::F64)?;
        archive.push_matrix(format!("{tap}.basis"), &s.basis, DType::F64)?;
        archive.set_meta(format!("{tap}.samples"), s.sample_count.to_string());
    }
    Ok(archive)
}

pub fn stats_from_archive<T: Scalar>(
    archive: &TensorArchive,
) -> Result<(EncoderSpec, BTreeMap<TapPoint, ActivationStats<T>>)> {
    expect_kind(archive, KIND_STATS)?;
    let spec = EncoderSpec::from_json(archive.meta("spec")?)?;
    let mut out = BTreeMap::new();
    for tap in spec.all_taps() {
        let Ok(samples) = archive.meta(&format!("{tap}.samples")) else {
            continue;
        };
        let sample_count = samples
            .parse()
            .map_err(|_| Error::Data(format!("{tap}.samples is not a count")))?;
        let stats = ActivationStats {
            tap,
            mean: archive.vector(&format!("{tap}.mean"))?,
            eigenvalues: archive.vector(&format!("{tap}.eigvals"))?,
            basis: archive.matrix(&format!("{tap}.basis"))?,
            sample_count,
        };
        let d = stats.mean.len();
        if stats.eigenvalues.len() != d || stats.basis.shape() != (d, d) {
            return shape_err(format!("stats for {tap} have inconsistent dimensions"));
        }
        out.insert(tap, stats);
    }
    Ok((spec, out))
}
