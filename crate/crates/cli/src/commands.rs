//! Subcommand implementations. Each returns the process exit code on success.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rankfold::flops::CertificateViolation;
use rankfold::modelio::CalibGenerator;
use rankfold::{
    collect_stats, compress_encoder, forward, forward_compressed, report as flops_report, stats_from_archive,
    stats_to_archive, synth_weights, verify_certificates, ActivationStats, AttnPath, CalibSet, CompressedEncoder, DType,
    EncoderSpec, EncoderWeights, Error, Matrix, RankPolicy, ScorePath, TapPoint, TensorArchive, ValuePath,
};
use serde::{Deserialize, Serialize};

use crate::{
    CalibrateArgs, CompressArgs, GenCalibArgs, PipelineArgs, ProbeArgs, ReportArgs, SweepArgs, SynthArgs, VerifyArgs,
    EXIT_OK, EXIT_RUNTIME,
};

type Stats = BTreeMap<TapPoint, ActivationStats<f64>>;

pub fn read_archive(path: &Path) -> anyhow::Result<TensorArchive> {
    TensorArchive::read_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_archive(archive: &TensorArchive, path: &Path) -> anyhow::Result<()> {
    archive.write_file(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> anyhow::Result<(EncoderSpec, EncoderWeights<f64>)> {
    EncoderWeights::from_archive(&read_archive(path)?).with_context(|| format!("loading model {}", path.display()))
}

pub fn load_stats(path: &Path) -> anyhow::Result<(EncoderSpec, Stats)> {
    stats_from_archive(&read_archive(path)?).with_context(|| format!("loading stats {}", path.display()))
}

pub fn load_compressed(path: &Path) -> anyhow::Result<CompressedEncoder<f64>> {
    CompressedEncoder::from_archive(&read_archive(path)?).with_context(|| format!("loading {}", path.display()))
}

fn ensure_same_spec(model: &EncoderSpec, other: &EncoderSpec, what: &str) -> anyhow::Result<()> {
    if model != other {
        return Err(Error::Shape(format!("{what} was built for {}, model is {}", other.to_json(), model.to_json())).into());
    }
    Ok(())
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let spec = args.spec.spec()?;
    let weights = synth_weights::<f64>(&spec, args.seed)?;
    let dtype = if args.f32 { DType::F32 } else { DType::F64 };
    write_archive(&weights.to_archive(&spec, dtype)?, &args.out)?;
    writeln!(out, "wrote {} ({} parameters)", args.out.display(), weights.param_count())?;
    Ok(EXIT_OK)
}

pub fn gen_calib(args: &GenCalibArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let spec = match &args.model {
        Some(path) => load_model(path)?.0,
        None => args.spec.spec()?,
    };
    let generator = CalibGenerator::new(&spec, args.rank, args.noise, args.seed)?;
    let calib = generator.calib_set::<f64>(args.offset, args.n)?;
    write_archive(&calib.to_archive()?, &args.out)?;
    let (rows, cols) = calib.clip_shape();
    writeln!(out, "wrote {} ({} clips of {rows}x{cols})", args.out.display(), calib.n_calib())?;
    Ok(EXIT_OK)
}

fn load_calib(path: &Path, spec: &EncoderSpec) -> anyhow::Result<CalibSet<f64>> {
    let calib = CalibSet::from_archive(&read_archive(path)?).with_context(|| format!("loading {}", path.display()))?;
    if calib.clip_shape() != spec.input_shape() {
        return Err(Error::Shape(format!(
            "clips in {} are {:?}, model input is {:?}",
            path.display(),
            calib.clip_shape(),
            spec.input_shape()
        ))
        .into());
    }
    Ok(calib)
}

pub fn calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let (spec, weights) = load_model(&args.model)?;
    let calib = load_calib(&args.calib, &spec)?;
    let stats = collect_stats(&spec, &weights, &calib, &spec.all_taps())?;
    write_archive(&stats_to_archive(&spec, &stats)?, &args.out)?;
    write_spectra(&stats, out)?;
    Ok(EXIT_OK)
}

/// One line per tap with the eight leading normalized eigenvalues.
pub fn write_spectra(stats: &Stats, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{:<14} top-8 normalized eigenvalues", "tap")?;
    for (tap, s) in stats {
        write!(out, "{:<14}", tap.to_string())?;
        for v in s.normalized_spectrum(8) {
            write!(out, " {v:.4}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn compress(args: &CompressArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let policy = args.policy.policy()?;
    let (spec, weights) = load_model(&args.model)?;
    let (stats_spec, stats) = load_stats(&args.stats)?;
    ensure_same_spec(&spec, &stats_spec, "statistics archive")?;
    let compressed = compress_encoder(&spec, &weights, &stats, &policy)?;
    write_archive(&compressed.to_archive()?, &args.out)?;
    write_decisions(&compressed, out)?;
    Ok(EXIT_OK)
}

/// Decisions table, one row per tap in layer order.
pub fn write_decisions(c: &CompressedEncoder<f64>, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{:<14} {:>6} {:>6} {:>10} {:>6} {:>6}", "tap", "theta", "k", "variance", "cap", "ratio")?;
    for d in &c.decisions {
        let k = d.rank().map_or_else(|| "dense".to_string(), |k| k.to_string());
        writeln!(
            out,
            "{:<14} {:>6} {:>6} {:>10.6} {:>6} {:>6.3}",
            d.tap.to_string(),
            d.theta,
            k,
            d.selection.variance_captured,
            d.selection.efficiency_cap,
            d.compression_ratio(&c.spec)
        )?;
    }
    writeln!(out, "params {} -> {} ({:.4})", c.original_param_count(), c.param_count(), c.param_count() as f64 / c.original_param_count() as f64)?;
    Ok(())
}

/// `n` standard normal inputs shaped for `spec`.
pub fn random_probes(spec: &EncoderSpec, n: usize, seed: u64) -> Vec<Matrix<f64>> {
    let (rows, cols) = spec.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))).collect()
}

pub fn probe_inputs(spec: &EncoderSpec, args: &ProbeArgs) -> anyhow::Result<Vec<Matrix<f64>>> {
    let inputs = match &args.inputs {
        Some(path) => load_calib(path, spec)?.clips().to_vec(),
        None => random_probes(spec, args.probes, args.seed),
    };
    if inputs.is_empty() {
        return Err(Error::Usage("need at least one probe input".into()).into());
    }
    Ok(inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResidual {
    pub score: ScorePath,
    pub value: ValuePath,
    /// Largest entry difference from the selected paths' output.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub path_residuals: Vec<PathResidual>,
    pub tolerance: f64,
    pub pass: bool,
}

fn relative_error(approx: &Matrix<f64>, exact: &Matrix<f64>) -> anyhow::Result<f64> {
    let diff = approx.sub(exact)?.frobenius_norm();
    let norm = exact.frobenius_norm();
    Ok(if norm > 0.0 { diff / norm } else { diff })
}

/// Output error of `compressed` against the original encoder, plus how far each attention path
/// strays from the selected one. A non-finite error never passes.
pub fn verify_models(
    spec: &EncoderSpec,
    weights: &EncoderWeights<f64>,
    compressed: &CompressedEncoder<f64>,
    inputs: &[Matrix<f64>],
    tolerance: f64,
) -> anyhow::Result<VerifyReport> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::Usage(format!("tolerance must be positive, got {tolerance}")).into());
    }
    ensure_same_spec(spec, &compressed.spec, "compressed encoder")?;
    let variants: Vec<(AttnPath, CompressedEncoder<f64>)> =
        AttnPath::ALL.iter().map(|&p| (p, compressed.clone().with_path(p))).collect();
    let mut errors = Vec::with_capacity(inputs.len());
    let mut residuals = vec![0.0f64; variants.len()];
    for x in inputs {
        let exact = forward(spec, weights, x)?;
        let approx = forward_compressed(compressed, x)?;
        errors.push(relative_error(&approx, &exact)?);
        for (r, (_, variant)) in residuals.iter_mut().zip(&variants) {
            *r = r.max(forward_compressed(variant, x)?.max_abs_diff(&approx));
        }
    }
    let max_rel_err = errors.iter().fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
    let mean_rel_err = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(VerifyReport {
        probes: inputs.len(),
        max_rel_err,
        mean_rel_err,
        path_residuals: variants
            .iter()
            .zip(residuals)
            .map(|((p, _), max_abs_diff)| PathResidual { score: p.score, value: p.value, max_abs_diff })
            .collect(),
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

pub fn write_verify(r: &VerifyReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "probes        {}", r.probes)?;
    writeln!(out, "max_rel_err   {:.6e}", r.max_rel_err)?;
    writeln!(out, "mean_rel_err  {:.6e}", r.mean_rel_err)?;
    for p in &r.path_residuals {
        writeln!(out, "path {:<10} {:<9} {:.3e}", format!("{:?}", p.score), format!("{:?}", p.value), p.max_abs_diff)?;
    }
    writeln!(out, "{} (tolerance {})", if r.pass { "PASS" } else { "FAIL" }, r.tolerance)
}

pub fn verify(args: &VerifyArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let (spec, weights) = load_model(&args.original)?;
    let compressed = load_compressed(&args.compressed)?;
    let inputs = probe_inputs(&spec, &args.probes)?;
    let r = verify_models(&spec, &weights, &compressed, &inputs, args.tolerance)?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
    } else {
        write_verify(&r, out)?;
    }
    Ok(if r.pass { EXIT_OK } else { EXIT_RUNTIME })
}

/// One grid point of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta_attn: f64,
    pub theta_mlp: f64,
    pub params: usize,
    pub macs: u64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Row-major over the sorted attention thresholds, then MLP thresholds.
    pub rows: Vec<SweepRow>,
    /// Certificate violations found at each grid point, in row order.
    pub violations: Vec<Vec<CertificateViolation>>,
    /// Adjacent grid pairs along either threshold axis.
    pub pairs: usize,
    /// Pairs whose parameter count does not decrease.
    pub params_monotone: usize,
    /// Pairs whose error does not increase.
    pub error_monotone: usize,
}

impl SweepOutcome {
    pub fn params_monotone_everywhere(&self) -> bool {
        self.params_monotone == self.pairs
    }

    pub fn error_monotone_fraction(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.error_monotone as f64 / self.pairs as f64
        }
    }

    pub fn violation_count(&self) -> usize {
        self.violations.iter().map(Vec::len).sum()
    }

    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

fn sorted_thresholds(values: &[f64], flag: &str) -> anyhow::Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Usage(format!("{flag} needs at least one threshold")).into());
    }
    if let Some(bad) = values.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Usage(format!("{flag} value {bad} outside (0, 1]")).into());
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Compresses and verifies at every `(theta_attn, theta_mlp)` pair, re-checks the cost
/// certificates of each result, and tallies monotonicity over adjacent grid pairs.
pub fn run_sweep(
    spec: &EncoderSpec,
    weights: &EncoderWeights<f64>,
    stats: &Stats,
    theta_attn: &[f64],
    theta_mlp: &[f64],
    granularity: usize,
    inputs: &[Matrix<f64>],
) -> anyhow::Result<SweepOutcome> {
    let attn = sorted_thresholds(theta_attn, "--theta-attn")?;
    let mlp = sorted_thresholds(theta_mlp, "--theta-mlp")?;
    let exact: Vec<Matrix<f64>> = inputs.iter().map(|x| forward(spec, weights, x)).collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(attn.len() * mlp.len());
    let mut violations = Vec::with_capacity(rows.capacity());
    for &ta in &attn {
        for &tm in &mlp {
            let policy = RankPolicy::new(ta, tm, granularity)?;
            let c = compress_encoder(spec, weights, stats, &policy)?;
            let mut err = 0.0;
            for (x, y) in inputs.iter().zip(&exact) {
                err += relative_error(&forward_compressed(&c, x)?, y)?;
            }
            rows.push(SweepRow {
                theta_attn: ta,
                theta_mlp: tm,
                params: c.param_count(),
                macs: flops_report(&c).total_compressed_macs,
                rel_err: err / inputs.len() as f64,
            });
            violations.push(verify_certificates(&c));
        }
    }
    let (na, nm) = (attn.len(), mlp.len());
    let mut adjacent = Vec::new();
    for i in 0..na {
        for j in 0..nm {
            if i + 1 < na {
                adjacent.push((i * nm + j, (i + 1) * nm + j));
            }
            if j + 1 < nm {
                adjacent.push((i * nm + j, i * nm + j + 1));
            }
        }
    }
    let params_monotone = adjacent.iter().filter(|&&(a, b)| rows[b].params >= rows[a].params).count();
    let error_monotone = adjacent.iter().filter(|&&(a, b)| rows[b].rel_err <= rows[a].rel_err).count();
    Ok(SweepOutcome { rows, violations, pairs: adjacent.len(), params_monotone, error_monotone })
}

pub fn sweep(args: &SweepArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    sorted_thresholds(&args.theta_attn, "--theta-attn")?;
    sorted_thresholds(&args.theta_mlp, "--theta-mlp")?;
    if args.granularity == 0 {
        return Err(Error::Usage("--granularity must be at least 1".into()).into());
    }
    let (spec, weights) = load_model(&args.model)?;
    let (stats_spec, stats) = load_stats(&args.stats)?;
    ensure_same_spec(&spec, &stats_spec, "statistics archive")?;
    let inputs = probe_inputs(&spec, &args.probes)?;
    let outcome = run_sweep(&spec, &weights, &stats, &args.theta_attn, &args.theta_mlp, args.granularity, &inputs)?;
    let csv = outcome.to_csv()?;
    match &args.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => out.write_all(csv.as_bytes())?,
    }
    eprintln!(
        "params non-decreasing on {}/{} adjacent pairs; error non-increasing on {}/{}",
        outcome.params_monotone, outcome.pairs, outcome.error_monotone, outcome.pairs
    );
    for (row, v) in outcome.rows.iter().zip(&outcome.violations) {
        for violation in v {
            eprintln!("certificate violation at {}/{}: {violation}", row.theta_attn, row.theta_mlp);
        }
    }
    Ok(if outcome.params_monotone_everywhere() && outcome.violation_count() == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

pub fn report(args: &ReportArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let r = flops_report(&load_compressed(&args.compressed)?);
    let text = if args.json { r.to_json() + "\n" } else { r.to_string() };
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

pub fn pipeline(args: &PipelineArgs, out: &mut dyn Write) -> anyhow::Result<u8> {
    let spec = args.spec.spec()?;
    let policy = args.policy.policy()?;
    fs::create_dir_all(&args.dir).with_context(|| format!("creating {}", args.dir.display()))?;
    let weights = synth_weights::<f64>(&spec, args.seed)?;
    write_archive(&weights.to_archive(&spec, DType::F64)?, &args.dir.join("model.lrta"))?;
    let generator = CalibGenerator::new(&spec, args.rank, args.noise, args.seed)?;
    let calib = generator.calib_set::<f64>(0, args.n)?;
    write_archive(&calib.to_archive()?, &args.dir.join("calib.lrta"))?;
    let stats = collect_stats(&spec, &weights, &calib, &spec.all_taps())?;
    write_archive(&stats_to_archive(&spec, &stats)?, &args.dir.join("stats.lrta"))?;
    let compressed = compress_encoder(&spec, &weights, &stats, &policy)?;
    write_archive(&compressed.to_archive()?, &args.dir.join("compressed.lrta"))?;
    write_decisions(&compressed, out)?;
    let held_out = generator.calib_set::<f64>(args.n as u64, args.probes.max(1))?;
    write_archive(&held_out.to_archive()?, &args.dir.join("heldout.lrta"))?;
    let r = verify_models(&spec, &weights, &compressed, held_out.clips(), args.tolerance)?;
    let flops = flops_report(&compressed);
    writeln!(out, "macs {} -> {} ({:.4})", flops.total_dense_macs, flops.total_compressed_macs, flops.macs_ratio())?;
    write_verify(&r, out)?;
    Ok(if r.pass { EXIT_OK } else { EXIT_RUNTIME })
}
