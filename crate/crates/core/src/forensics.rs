//! Spectral and geometric diagnostics for layers viewed as sequence maps.
//!
//! A layer function takes a row-major `[T×d]` sequence and returns an
//! equally flat output. Probes are deterministic given their seed.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::filters::{measure_gain_dft, momentum_gain};
use crate::model::ModelState;
use crate::seeds::rng_for;
use crate::tasks::TaskSample;

/// Relative probe amplitude against the operating point's RMS.
pub const DEFAULT_PROBE_FRACTION: f64 = 1e-2;
/// Gains that move more than this between an amplitude and its half
/// trigger another halving.
const LINEARITY_TOLERANCE: f64 = 0.05;
const MAX_HALVINGS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodeMode {
    /// Sinusoid injected into one model, output over input at ω.
    Probe,
    /// Attention spectrum of a momentum model over that of its baseline.
    SpectrumRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodeResult {
    pub mode: BodeMode,
    pub gamma: f64,
    pub omegas: Vec<f64>,
    pub measured_gain: Vec<f64>,
    pub theory_gain: Vec<f64>,
    /// Absent when either curve has zero variance.
    pub pearson_r: Option<f64>,
    pub probe_amplitude: f64,
}

impl BodeResult {
    fn new(mode: BodeMode, gamma: f64, omegas: Vec<f64>, measured: Vec<f64>, amplitude: f64) -> Self {
        let theory: Vec<f64> = omegas.iter().map(|&w| momentum_gain(w, gamma)).collect();
        let r = pearson(&measured, &theory).ok();
        Self { mode, gamma, omegas, measured_gain: measured, theory_gain: theory, pearson_r: r, probe_amplitude: amplitude }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["omega", "measured", "theory"]).map_err(|e| csv_err(path, e))?;
        for i in 0..self.omegas.len() {
            w.write_record([self.omegas[i], self.measured_gain[i], self.theory_gain[i]].map(|x| x.to_string()))
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e))
}

/// Frequencies exactly periodic on the window of positions `1..t`: 2πk/(t−1)
/// for k = 1..=(t−1)/2.
pub fn probe_omegas(t: usize) -> Vec<f64> {
    let n = t.saturating_sub(1);
    (1..=n / 2).map(|k| 2.0 * std::f64::consts::PI * k as f64 / n as f64).collect()
}

/// Small-signal Bode measurement of `layer_fn` around `base` (`[t×d]`).
///
/// For each ω a cosine of amplitude A along a random unit channel
/// direction is added to every position; the output deviation is read on
/// positions `1..t` (position 0 has no predecessor) and its vector
/// amplitude at ω is divided by the input's. Gains are averaged over
/// `directions` probe directions. The amplitude starts at `amplitude` (or
/// 1% of the base RMS) and is halved while gains still move by more than
/// 5% between A and A/2.
#[allow(clippy::too_many_arguments)]
pub fn bode_extract<F>(
    layer_fn: F,
    base: &[f64],
    t: usize,
    d: usize,
    omegas: &[f64],
    amplitude: Option<f64>,
    directions: usize,
    gamma: f64,
    seed: u64,
) -> Result<BodeResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if base.len() != t * d || t < 3 || d == 0 {
        return Err(LabError::Dimension(format!("base of {} values for [{t}×{d}]", base.len())));
    }
    if omegas.is_empty() || directions == 0 {
        return Err(LabError::Contract("need at least one omega and one direction".into()));
    }
    let rms = (base.iter().map(|x| x * x).sum::<f64>() / base.len() as f64).sqrt();
    let mut a = amplitude.unwrap_or(DEFAULT_PROBE_FRACTION * rms.max(1e-12));
    if !(a.is_finite() && a > 0.0) {
        return Err(LabError::Domain(format!("probe amplitude {a}")));
    }
    let y0 = layer_fn(base)?;
    let mut rng = rng_for(seed, "bode-directions");
    let dirs: Vec<Vec<f64>> = (0..directions).map(|_| unit_vector(&mut rng, d)).collect();
    let measure = |a: f64| -> Result<Vec<f64>> {
        omegas
            .iter()
            .map(|&w| {
                let mut total = 0.0;
                for u in &dirs {
                    total += probe_gain(&layer_fn, base, &y0, t, d, w, a, u)?;
                }
                Ok(total / dirs.len() as f64)
            })
            .collect()
    };
    let mut gains = measure(a)?;
    for _ in 0..MAX_HALVINGS {
        let half = measure(a / 2.0)?;
        let moved = gains
            .iter()
            .zip(&half)
            .any(|(g, h)| (g - h).abs() > LINEARITY_TOLERANCE * g.abs().max(h.abs()).max(1e-300));
        a /= 2.0;
        gains = half;
        if !moved {
            break;
        }
    }
    Ok(BodeResult::new(BodeMode::Probe, gamma, omegas.to_vec(), gains, a))
}

#[allow(clippy::too_many_arguments)]
fn probe_gain<F>(layer_fn: &F, base: &[f64], y0: &[f64], t: usize, d: usize, omega: f64, a: f64, u: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let s: Vec<f64> = (0..t).map(|i| a * (omega * i as f64).cos()).collect();
    let mut x = base.to_vec();
    for i in 0..t {
        for c in 0..d {
            x[i * d + c] += s[i] * u[c];
        }
    }
    let y = layer_fn(&x)?;
    if y.len() != y0.len() || y.len() % t != 0 {
        return Err(LabError::Dimension(format!("layer output of {} values for {t} positions", y.len())));
    }
    let dout = y.len() / t;
    let mut power = 0.0;
    let mut chan = vec![0.0; t - 1];
    for c in 0..dout {
        for i in 1..t {
            chan[i - 1] = y[i * dout + c] - y0[i * dout + c];
        }
        let g = measure_gain_dft(&s[1..], &chan, omega)?;
        power += g * g;
    }
    Ok(power.sqrt())
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Probe-mode Bode plot of a model's attention sublayer at `layer`,
/// averaged over the operating points given by `samples`.
pub fn bode_model(
    model: &ModelState,
    samples: &[TaskSample],
    layer: usize,
    directions: usize,
    seed: u64,
) -> Result<BodeResult> {
    let first = samples.first().ok_or_else(|| LabError::NoInput("no samples for the Bode probe".into()))?;
    let t = first.tokens.len();
    let omegas = probe_omegas(t);
    let gamma = model.config().momentum.gamma;
    let mut sum = vec![0.0; omegas.len()];
    let mut amp = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let probe = model.attention_probe(&s.tokens, layer)?;
        let base = probe.operating_point().to_vec();
        let r = bode_extract(
            |x| probe.respond(x),
            &base,
            probe.seq_len(),
            probe.d_model(),
            &omegas,
            None,
            directions,
            gamma,
            seed.wrapping_add(i as u64),
        )?;
        sum.iter_mut().zip(&r.measured_gain).for_each(|(a, g)| *a += g);
        amp += r.probe_amplitude;
    }
    let n = samples.len() as f64;
    let measured = sum.into_iter().map(|g| g / n).collect();
    Ok(BodeResult::new(BodeMode::Probe, gamma, omegas, measured, amp / n))
}

/// Mean DFT magnitude of attention rows at `layer`, averaged over heads,
/// rows and samples; bins 0..=T/2 of a length-T transform.
pub fn attention_spectrum(model: &ModelState, samples: &[TaskSample], layer: usize) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| LabError::NoInput("no samples for the spectrum".into()))?;
    let t = first.tokens.len();
    let bins = t / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut rows = 0usize;
    for chunk in samples.chunks(32) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let (_, trace) = model.trace(&batch)?;
        let probs = trace
            .attn_probs
            .get(layer)
            .ok_or_else(|| LabError::Index(format!("layer {layer} of {}", trace.attn_probs.len())))?;
        for row in probs.chunks(t) {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += dft_magnitude(row, k);
            }
            rows += 1;
        }
    }
    Ok(acc.into_iter().map(|a| a / rows as f64).collect())
}

fn dft_magnitude(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let ph = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
        re += v * ph.cos();
        im += v * ph.sin();
    }
    re.hypot(im)
}

/// Gain ratio of two attention spectra from [`attention_spectrum`] over
/// the non-DC bins.
pub fn spectrum_ratio(baseline: &[f64], momentum: &[f64], t: usize, gamma: f64) -> Result<BodeResult> {
    if baseline.len() != momentum.len() || baseline.len() != t / 2 + 1 {
        return Err(LabError::Dimension(format!(
            "spectra of {} and {} bins for length {t}",
            baseline.len(),
            momentum.len()
        )));
    }
    let mut omegas = Vec::new();
    let mut ratio = Vec::new();
    for k in 1..baseline.len() {
        if baseline[k] < 1e-12 {
            return Err(LabError::UndefinedGain { omega: 2.0 * std::f64::consts::PI * k as f64 / t as f64, amplitude: baseline[k] });
        }
        omegas.push(2.0 * std::f64::consts::PI * k as f64 / t as f64);
        ratio.push(momentum[k] / baseline[k]);
    }
    Ok(BodeResult::new(BodeMode::SpectrumRatio, gamma, omegas, ratio, 0.0))
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(LabError::Contract(format!("pearson needs equal lengths ≥ 3, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(LabError::NonFinite("pearson input".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let scale_b = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    if saa <= (1e-13 * scale_a).powi(2) * n || sbb <= (1e-13 * scale_b).powi(2) * n {
        return Err(LabError::Degenerate("zero variance in correlation input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Shannon entropy (nats) of a nonnegative spectrum normalized to sum 1.
pub fn spectral_entropy(spectrum: &[f64]) -> Result<f64> {
    if spectrum.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
        return Err(LabError::Domain("spectrum must be finite and nonnegative".into()));
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Err(LabError::Degenerate("all-zero spectrum".into()));
    }
    Ok(-spectrum.iter().filter(|&&s| s > 0.0).map(|&s| s / total).map(|p| p * p.ln()).sum::<f64>())
}

/// Mean ‖F(x+εv)−F(x)‖/ε over `n_probes` random unit directions v.
pub fn energy_ratio<F>(layer_fn: F, x: &[f64], eps: f64, n_probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LabError::Domain(format!("eps must be positive, got {eps}")));
    }
    if n_probes == 0 || x.is_empty() {
        return Err(LabError::Contract("energy ratio needs probes and a non-empty input".into()));
    }
    let y0 = layer_fn(x)?;
    let mut rng = rng_for(seed, "energy-probes");
    let mut total = 0.0;
    for _ in 0..n_probes {
        let v = unit_vector(&mut rng, x.len());
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let y = layer_fn(&xp)?;
        let disp = y.iter().zip(&y0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / eps;
        if !disp.is_finite() {
            return Err(LabError::NonFinite("energy ratio displacement".into()));
        }
        total += disp;
    }
    Ok(total / n_probes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub det_residual: f64,
    /// σ_max/σ_min; +∞ when singular to machine precision.
    pub condition_number: f64,
    pub subspace_dim: usize,
    pub full_dim: usize,
    /// False when the block covers only part of the input, where volume
    /// leaks through the omitted coordinates.
    pub reliable: bool,
}

/// Forward-difference Jacobian of `layer_fn` on its first `dims` input and
/// output coordinates.
pub fn subspace_jacobian<F>(layer_fn: F, x: &[f64], dims: usize, eps: f64) -> Result<JacobianReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if dims == 0 || dims > x.len() {
        return Err(LabError::Contract(format!("dims {dims} for input of {}", x.len())));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LabError::Domain(format!("eps must be positive, got {eps}")));
    }
    let y0 = layer_fn(x)?;
    if y0.len() < dims {
        return Err(LabError::Dimension(format!("output of {} values for dims {dims}", y0.len())));
    }
    let mut jac = vec![0.0; dims * dims];
    let mut xp = x.to_vec();
    for j in 0..dims {
        xp[j] += eps;
        let y = layer_fn(&xp)?;
        xp[j] = x[j];
        for i in 0..dims {
            jac[i * dims + j] = (y[i] - y0[i]) / eps;
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("subspace jacobian".into()));
    }
    let det = lu_determinant(&jac, dims);
    let sv = singular_values(&jac, dims);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let kappa = if smin <= smax * f64::EPSILON * dims as f64 { f64::INFINITY } else { smax / smin };
    Ok(JacobianReport {
        det_residual: (det - 1.0).abs(),
        condition_number: kappa,
        subspace_dim: dims,
        full_dim: x.len(),
        reliable: dims == x.len(),
    })
}

/// Determinant by LU with partial pivoting.
pub fn lu_determinant(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).expect("n > 0");
        if m[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    det
}

/// Singular values of a square matrix by one-sided Jacobi rotations.
pub fn singular_values(a: &[f64], n: usize) -> Vec<f64> {
    let mut u = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (x, y) = (u[i * n + p], u[i * n + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = f64::max(off, gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (x, y) = (u[i * n + p], u[i * n + q]);
                    u[i * n + p] = c * x - s * y;
                    u[i * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    (0..n).map(|j| (0..n).map(|i| u[i * n + j].powi(2)).sum::<f64>().sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub energy_ratio: f64,
    pub det_residual: f64,
    pub condition_number: f64,
    pub subspace_dim: usize,
    pub full_dim: usize,
    pub probe_eps: f64,
    pub n_probes: usize,
    pub reliable: bool,
}

pub fn stability_report<F>(layer_fn: F, x: &[f64], dims: usize, eps: f64, n_probes: usize, seed: u64) -> Result<StabilityReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let r = energy_ratio(&layer_fn, x, eps, n_probes, seed)?;
    let j = subspace_jacobian(&layer_fn, x, dims, eps)?;
    Ok(StabilityReport {
        energy_ratio: r,
        det_residual: j.det_residual,
        condition_number: j.condition_number,
        subspace_dim: j.subspace_dim,
        full_dim: j.full_dim,
        probe_eps: eps,
        n_probes,
        reliable: j.reliable,
    })
}

impl StabilityReport {
    /// One `metric,value` row per field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = [
            ("energy_ratio", self.energy_ratio.to_string()),
            ("det_residual", self.det_residual.to_string()),
            ("condition_number", self.condition_number.to_string()),
            ("subspace_dim", self.subspace_dim.to_string()),
            ("full_dim", self.full_dim.to_string()),
            ("probe_eps", self.probe_eps.to_string()),
            ("n_probes", self.n_probes.to_string()),
            ("reliable", self.reliable.to_string()),
        ];
        w.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
        for (k, v) in rows {
            w.write_record([k, v.as_str()]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))
    }
}

/// Stability of the attention sublayer at `layer`, driven through its query
/// path at the operating point of each sample and averaged over samples.
pub fn stability_model(
    model: &ModelState,
    samples: &[TaskSample],
    layer: usize,
    dims: usize,
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if samples.is_empty() {
        return Err(LabError::NoInput("no samples for the stability probe".into()));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let probe = model.attention_probe(&s.tokens, layer)?;
        let x = probe.operating_point().to_vec();
        reports.push(stability_report(|v| probe.respond(v), &x, dims, eps, n_probes, seed.wrapping_add(i as u64))?);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&StabilityReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(StabilityReport {
        energy_ratio: mean(|r| r.energy_ratio),
        det_residual: mean(|r| r.det_residual),
        condition_number: mean(|r| r.condition_number),
        subspace_dim: reports[0].subspace_dim,
        full_dim: reports[0].full_dim,
        probe_eps: eps,
        n_probes,
        reliable: reports.iter().all(|r| r.reliable),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub y0: f64,
    pub alpha: f64,
    pub r_squared: f64,
}

/// Least squares for y = y0·N^(−α) in log-log space.
pub fn power_law_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(LabError::Contract(format!("need ≥ 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(n, y)| !(n > 0.0 && y > 0.0 && n.is_finite() && y.is_finite())) {
        return Err(LabError::Domain("power-law points must be positive and finite".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys)?;
    Ok(PowerLawFit { y0: intercept.exp(), alpha: -slope, r_squared: r2 })
}

/// Ordinary least squares y = slope·x + intercept, with R² (1 for a
/// perfect fit to constant data).
fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(LabError::Degenerate("all x values equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseGainReport {
    pub pearson_r: f64,
    pub fit_slope: f64,
    pub fit_intercept: f64,
}

/// Correlates the per-step rotation noise 2·sin(θ/2) with momentum gain.
pub fn noise_gain_report(sweep: &[(f64, f64)]) -> Result<NoiseGainReport> {
    if sweep.len() < 3 {
        return Err(LabError::Contract(format!("need ≥ 3 θ values, got {}", sweep.len())));
    }
    let noise: Vec<f64> = sweep.iter().map(|&(th, _)| 2.0 * (th / 2.0).sin()).collect();
    let gain: Vec<f64> = sweep.iter().map(|p| p.1).collect();
    let r = pearson(&noise, &gain)?;
    let (slope, intercept, _) = linear_fit(&noise, &gain)?;
    Ok(NoiseGainReport { pearson_r: r, fit_slope: slope, fit_intercept: intercept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{augment, MomentumParams};
    use crate::tensor::Tensor;

    fn base_seq(t: usize, d: usize) -> Vec<f64> {
        (0..t * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect()
    }

    #[test]
    fn bode_on_augment_operator_is_exact() {
        let (t, d, gamma) = (41, 3, 0.2);
        let params = MomentumParams::new(gamma, 0.0).unwrap();
        let op = |x: &[f64]| Ok(augment(&Tensor::new(vec![t, d], x.to_vec())?, &params)?.into_data());
        let omegas = probe_omegas(t);
        let r = bode_extract(op, &base_seq(t, d), t, d, &omegas, None, 3, gamma, 1).unwrap();
        for (m, th) in r.measured_gain.iter().zip(&r.theory_gain) {
            assert!((m - th).abs() < 1e-6, "{m} vs {th}");
        }
        assert!(r.pearson_r.unwrap() > 0.999);
    }

    #[test]
    fn bode_identity_is_flat_and_degenerate() {
        let (t, d) = (21, 2);
        let omegas = probe_omegas(t);
        let r = bode_extract(|x: &[f64]| Ok(x.to_vec()), &base_seq(t, d), t, d, &omegas, None, 2, 0.5, 0).unwrap();
        assert!(r.measured_gain.iter().all(|g| (g - 1.0).abs() < 1e-9));
        assert!(r.pearson_r.is_none());
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 4.0, 7.0, 11.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&a, &[3.0; 5]), Err(LabError::Degenerate(_))));
        assert!(pearson(&a[..2], &b[..2]).is_err());
    }

    #[test]
    fn pearson_against_exact_rational_oracle() {
        // integer data: r = Sxy / sqrt(Sxx Syy) evaluated in exact integers
        let a = [3.0, -1.0, 4.0, 1.0, -5.0];
        let b = [2.0, 7.0, -1.0, 8.0, 2.0];
        let (n, sa, sb) = (5i64, 2i64, 18i64);
        let saa: i64 = [3i64, -1, 4, 1, -5].iter().map(|x| x * x).sum();
        let sbb: i64 = [2i64, 7, -1, 8, 2].iter().map(|x| x * x).sum();
        let sab: i64 = [3i64 * 2, -7, -4, 8, -10].iter().sum();
        let sxy = (n * sab - sa * sb) as f64;
        let sxx = (n * saa - sa * sa) as f64;
        let syy = (n * sbb - sb * sb) as f64;
        let oracle = sxy / (sxx * syy).sqrt();
        assert!((pearson(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_extremes() {
        assert!((spectral_entropy(&[2.0; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(spectral_entropy(&[0.0, 3.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(spectral_entropy(&[0.0, 0.0]), Err(LabError::Degenerate(_))));
        assert!(spectral_entropy(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn energy_ratio_of_scalings() {
        let x = base_seq(5, 4);
        for c in [1.0, 2.0, 0.5] {
            let r = energy_ratio(|v: &[f64]| Ok(v.iter().map(|a| c * a).collect()), &x, 1e-3, 8, 3).unwrap();
            assert!((r - c).abs() < 1e-9, "{c}: {r}");
        }
        assert!(energy_ratio(|v: &[f64]| Ok(v.to_vec()), &x, 0.0, 4, 0).is_err());
    }

    #[test]
    fn energy_ratio_scaled_isometry() {
        // rotation of each consecutive channel pair, then scale by 1.7
        let x = base_seq(3, 4);
        let f = |v: &[f64]| -> Result<Vec<f64>> {
            let (c, s) = (0.3f64.cos(), 0.3f64.sin());
            Ok(v.chunks(2).flat_map(|p| [1.7 * (c * p[0] - s * p[1]), 1.7 * (s * p[0] + c * p[1])]).collect())
        };
        assert!((energy_ratio(f, &x, 1e-4, 6, 9).unwrap() - 1.7).abs() < 1e-6);
    }

    #[test]
    fn jacobian_identity_shear_and_leak() {
        let x = vec![0.3, -0.2, 0.9, 1.1];
        let id = subspace_jacobian(|v: &[f64]| Ok(v.to_vec()), &x, 4, 1e-4).unwrap();
        assert!(id.det_residual < 1e-6);
        assert!((id.condition_number - 1.0).abs() < 1e-6);
        assert!(id.reliable);

        let g = 0.5;
        let shear = |v: &[f64]| Ok(vec![v[0], v[1] + g * v[0]]);
        let r = subspace_jacobian(shear, &[0.4, -0.7], 2, 1e-4).unwrap();
        assert!(r.det_residual < 1e-6);

        let proj = |v: &[f64]| Ok(vec![0.0, v[1], v[2]]);
        let r = subspace_jacobian(proj, &[1.0, 2.0, 3.0], 2, 1e-4).unwrap();
        assert!((r.det_residual - 1.0).abs() < 1e-9);
        assert!(r.condition_number.is_infinite());
        assert!(!r.reliable);
    }

    #[test]
    fn jacobian_volume_preserving_full_dim() {
        // unit-determinant linear map in 3D
        let m = [[2.0, 1.0, 0.0], [1.0, 1.0, 0.5], [0.0, 0.0, 1.0]];
        let f = |v: &[f64]| Ok((0..3).map(|i| (0..3).map(|j| m[i][j] * v[j]).sum()).collect());
        let r = subspace_jacobian(f, &[0.1, 0.2, 0.3], 3, 1e-4).unwrap();
        assert!(r.det_residual < 1e-5);
    }

    #[test]
    fn linear_algebra_helpers() {
        let a = [0.0, 2.0, 1.0, 3.0];
        assert!((lu_determinant(&a, 2) + 2.0).abs() < 1e-15);
        let sv = singular_values(&[3.0, 0.0, 0.0, -2.0], 2);
        let mut s = sv.clone();
        s.sort_by(f64::total_cmp);
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
        // [[1,1],[0,1]]: σ = golden ratio and its inverse
        let sv = singular_values(&[1.0, 1.0, 0.0, 1.0], 2);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let (lo, hi) = (sv[0].min(sv[1]), sv[0].max(sv[1]));
        assert!((hi - phi).abs() < 1e-12 && (lo - 1.0 / phi).abs() < 1e-12);
    }

    #[test]
    fn power_law_fits() {
        let exact: Vec<(f64, f64)> = (1..=6).map(|n| (n as f64, 5.0 / n as f64)).collect();
        let f = power_law_fit(&exact).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12 && (f.y0 - 5.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let flat = power_law_fit(&[(1.0, 2.0), (2.0, 2.0), (4.0, 2.0)]).unwrap();
        assert!(flat.alpha.abs() < 1e-15);
        assert!(matches!(power_law_fit(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0)]), Err(LabError::Domain(_))));
    }

    #[test]
    fn noise_gain_linear_and_degenerate() {
        let sweep: Vec<(f64, f64)> =
            [0.05, 0.3, 1.0, 2.5].iter().map(|&th: &f64| (th, -0.1 * 2.0 * (th / 2.0).sin() + 0.2)).collect();
        let r = noise_gain_report(&sweep).unwrap();
        assert!((r.pearson_r + 1.0).abs() < 1e-12);
        assert!((r.fit_slope + 0.1).abs() < 1e-12);
        assert!((r.fit_intercept - 0.2).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [0.05, 0.3, 1.0].iter().map(|&t| (t, 0.4)).collect();
        assert!(noise_gain_report(&flat).is_err());
    }

    #[test]
    fn bode_csv_rows() {
        let t = 11;
        let r = bode_extract(|x: &[f64]| Ok(x.to_vec()), &base_seq(t, 1), t, 1, &probe_omegas(t), None, 1, 0.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "omega,measured,theory");
        assert_eq!(text.lines().count(), 1 + probe_omegas(t).len());
    }
}
