//! Calibration clip sets and the synthetic low-rank-plus-noise generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{expect_kind, EncoderSpec};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::modelio::{DType, TensorArchive};
use crate::scalar::Scalar;

pub const KIND_CALIB: &str = "calib";

/// Non-empty list of same-shaped input clips.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet<T> {
    clips: Vec<Matrix<T>>,
}

impl<T: Scalar> CalibSet<T> {
    pub fn new(clips: Vec<Matrix<T>>) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::Usage("calibration set is empty".into()));
        };
        if let Some(i) = clips.iter().position(|c| c.shape() != first.shape()) {
            return shape_err(format!("clip {i} has shape {:?}, clip 0 {:?}", clips[i].shape(), first.shape()));
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[Matrix<T>] {
        &self.clips
    }

    pub fn n_calib(&self) -> usize {
        self.clips.len()
    }

    pub fn clip_shape(&self) -> (usize, usize) {
        self.clips[0].shape()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        archive.set_meta("kind", KIND_CALIB);
        archive.set_meta("n_calib", self.n_calib().to_string());
        for (i, clip) in self.clips.iter().enumerate() {
            archive.push_matrix(format!("clip.{i}"), clip, DType::F64)?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        expect_kind(archive, KIND_CALIB)?;
        let n: usize = archive
            .meta("n_calib")?
            .parse()
            .map_err(|_| Error::Data("n_calib is not a count".into()))?;
        Self::new((0..n).map(|i| archive.matrix(&format!("clip.{i}"))).collect::<Result<_>>()?)
    }
}

/// Draws clips `F · B + noise · N(0, 1)` where `B` is an `r × d_input` basis shared by every
/// clip and `F` is a fresh `rows × r` Gaussian factor per clip. Clip `i` depends only on
/// `(seed, i)`, so clips past the calibration range serve as held-out data from the same source.
#[derive(Debug, Clone)]
pub struct CalibGenerator {
    rows: usize,
    basis: Matrix<f64>,
    noise: f64,
    seed: u64,
}

impl CalibGenerator {
    pub fn new(spec: &EncoderSpec, effective_rank: usize, noise: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (rows, d_input) = spec.input_shape();
        if effective_rank == 0 || effective_rank > d_input {
            return Err(Error::Range(format!("effective rank {effective_rank} outside 1..={d_input}")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Range(format!("noise level {noise} must be finite and non-negative")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Matrix::from_fn(effective_rank, d_input, |_, _| StandardNormal.sample(&mut rng));
        Ok(Self { rows, basis, noise, seed })
    }

    pub fn effective_rank(&self) -> usize {
        self.basis.rows()
    }

    pub fn clip<T: Scalar>(&self, index: u64) -> Matrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index + 1);
        let factor = Matrix::from_fn(self.rows, self.basis.rows(), |_, _| StandardNormal.sample(&mut rng));
        let mut clip = factor.matmul(&self.basis).expect("factor matches basis");
        if self.noise > 0.0 {
            for v in clip.as_mut_slice() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.noise * z;
            }
        }
        clip.cast()
    }

    /// Clips `start..start + n`.
    pub fn calib_set<T: Scalar>(&self, start: u64, n: usize) -> Result<CalibSet<T>> {
        CalibSet::new((0..n as u64).map(|i| self.clip(start + i)).collect())
    }
}

/// `n_calib` clips from [`CalibGenerator`] starting at clip 0.
pub fn synth_calib<T: Scalar>(
    spec: &EncoderSpec,
    n_calib: usize,
    effective_rank: usize,
    noise: f64,
    seed: u64,
) -> Result<CalibSet<T>> {
    CalibGenerator::new(spec, effective_rank, noise, seed)?.calib_set(0, n_calib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;

    /// Count of Gram eigenvalues above `1e-9 · λ₁`.
    fn numerical_rank(m: &Matrix<f64>) -> usize {
        let gram = m.transpose().matmul(m).unwrap();
        let eig = sym_eig(&gram).unwrap();
        let top = eig.eigenvalues[0];
        eig.eigenvalues.iter().filter(|&&v| v > 1e-9 * top).count()
    }

    #[test]
    fn noiseless_clips_have_the_requested_rank() {
        let spec = EncoderSpec::toy();
        let set = synth_calib::<f64>(&spec, 5, 4, 0.0, 1).unwrap();
        for clip in set.clips() {
            assert_eq!(numerical_rank(clip), 4);
        }
        let full = synth_calib::<f64>(&spec, 2, spec.d_model, 0.0, 1).unwrap();
        for clip in full.clips() {
            assert_eq!(numerical_rank(clip), spec.d_model);
        }
    }

    #[test]
    fn seeds_change_clips_not_shapes() {
        let spec = EncoderSpec::toy();
        let a = synth_calib::<f64>(&spec, 3, 4, 0.1, 1).unwrap();
        let b = synth_calib::<f64>(&spec, 3, 4, 0.1, 2).unwrap();
        assert_eq!(a.clip_shape(), b.clip_shape());
        assert!(a.clips()[0].max_abs_diff(&b.clips()[0]) > 0.0);
        assert_eq!(a, synth_calib::<f64>(&spec, 3, 4, 0.1, 1).unwrap());
    }

    #[test]
    fn held_out_clips_continue_the_stream() {
        let spec = EncoderSpec::toy();
        let gen = CalibGenerator::new(&spec, 4, 0.0, 9).unwrap();
        let first = gen.calib_set::<f64>(0, 4).unwrap();
        let later = gen.calib_set::<f64>(2, 2).unwrap();
        assert_eq!(first.clips()[2], later.clips()[0]);
    }

    #[test]
    fn rank_beyond_dimension() {
        let spec = EncoderSpec::toy();
        assert!(matches!(synth_calib::<f64>(&spec, 1, 33, 0.0, 1), Err(Error::Range(_))));
        assert!(matches!(synth_calib::<f64>(&spec, 1, 0, 0.0, 1), Err(Error::Range(_))));
    }

    #[test]
    fn empty_or_ragged_sets() {
        assert!(matches!(CalibSet::<f64>::new(vec![]), Err(Error::Usage(_))));
        assert!(CalibSet::new(vec![Matrix::<f64>::zeros(2, 2), Matrix::zeros(3, 2)]).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let set = synth_calib::<f64>(&EncoderSpec::toy(), 3, 2, 0.5, 4).unwrap();
        let parsed = TensorArchive::from_bytes(&set.to_archive().unwrap().to_bytes()).unwrap();
        assert_eq!(CalibSet::from_archive(&parsed).unwrap(), set);
    }
}
