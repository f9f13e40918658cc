//! Closed-form frequency responses of the momentum, EMA and rotary operators,
//! plus a single-bin DFT gain meter used as their empirical oracle.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Sorted frequencies in [0, π].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(mut omegas: Vec<f64>) -> Result<Self> {
        if omegas
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0 || *w > std::f64::consts::PI)
        {
            return Err(LabError::Domain("frequencies must lie in [0, pi]".into()));
        }
        omegas.sort_by(f64::total_cmp);
        Ok(FrequencyGrid { omegas })
    }

    /// `n` evenly spaced points covering [0, π] inclusive.
    pub fn uniform(n: usize) -> Self {
        let pi = std::f64::consts::PI;
        let omegas = match n {
            0 => vec![],
            1 => vec![0.0],
            _ => (0..n).map(|i| pi * i as f64 / (n - 1) as f64).collect(),
        };
        FrequencyGrid { omegas }
    }

    /// `n` evenly spaced points strictly inside (0, π).
    pub fn interior(n: usize) -> Self {
        let pi = std::f64::consts::PI;
        FrequencyGrid {
            omegas: (1..=n).map(|i| pi * i as f64 / (n + 1) as f64).collect(),
        }
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }
}

/// Coupling, smoothing and rotation parameters of one filter configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub gamma: f64,
    pub beta: f64,
    pub theta: f64,
}

impl FilterParams {
    pub fn new(gamma: f64, beta: f64, theta: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(LabError::Domain(format!("gamma {} must be >= 0", gamma)));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(LabError::Domain(format!("beta {} must lie in [0, 1)", beta)));
        }
        if !(theta > 0.0 && theta <= std::f64::consts::PI) {
            return Err(LabError::Domain(format!("theta {} must lie in (0, pi]", theta)));
        }
        Ok(FilterParams { gamma, beta, theta })
    }
}

/// |1 − e^{−jω}|.
pub fn diff_gain(omega: f64) -> f64 {
    2.0 * (omega / 2.0).sin().abs()
}

/// |1 + γ(1 − e^{−jω})|.
pub fn momentum_gain(omega: f64, gamma: f64) -> f64 {
    let s = (omega / 2.0).sin();
    (1.0 + 4.0 * gamma * (1.0 + gamma) * s * s).sqrt()
}

/// Magnitude of the EMA filter (1−β)/(1−βe^{−jω}).
pub fn ema_gain(omega: f64, beta: f64) -> f64 {
    (1.0 - beta) / (1.0 - 2.0 * beta * omega.cos() + beta * beta).sqrt()
}

pub fn ema_nyquist(beta: f64) -> f64 {
    (1.0 - beta) / (1.0 + beta)
}

/// Minimal complex arithmetic for the cascade response.
#[derive(Clone, Copy, Debug)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn div(self, o: Complex) -> Complex {
        let d = o.re * o.re + o.im * o.im;
        Complex::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// |1 + γ·H_EMA(ω)·H_D(ω)| for the augmentation x + γ·EMA(Δx).
pub fn cascade_gain(omega: f64, gamma: f64, beta: f64) -> f64 {
    // e^{−jω}
    let z1 = Complex::new(omega.cos(), -omega.sin());
    let h_diff = Complex::new(1.0 - z1.re, -z1.im);
    let h_ema = Complex::new(1.0 - beta, 0.0).div(Complex::new(1.0 - beta * z1.re, -beta * z1.im));
    let prod = h_ema.mul(h_diff);
    Complex::new(1.0 + gamma * prod.re, gamma * prod.im).abs()
}

pub type Mat2 = [[f64; 2]; 2];

pub fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Singular values (σ_max, σ_min) of a 2×2 matrix in closed form.
pub fn singular_values_2x2(m: &Mat2) -> (f64, f64) {
    let [[a, b], [c, d]] = *m;
    // σ_max ± σ_min from the Frobenius-based identities
    let s1 = ((a + d) * (a + d) + (b - c) * (b - c)).sqrt();
    let s2 = ((a - d) * (a - d) + (b + c) * (b + c)).sqrt();
    ((s1 + s2) / 2.0, (s1 - s2).abs() / 2.0)
}

/// Spectral norm of I − R(−θ).
pub fn rotation_diff_norm(theta: f64) -> f64 {
    let r = rotation(-theta);
    let m = [[1.0 - r[0][0], -r[0][1]], [-r[1][0], 1.0 - r[1][1]]];
    singular_values_2x2(&m).0
}

/// Amplitude of the single-bin DFT of `x` at `omega`.
fn bin_amplitude(x: &[f64], omega: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let (s, c) = (omega * t as f64).sin_cos();
        re += v * c;
        im -= v * s;
    }
    re.hypot(im)
}

/// |Y(ω)| / |X(ω)| from single-bin projections; at ω = 0 the ratio of means.
pub fn measure_gain_dft(input: &[f64], output: &[f64], omega: f64) -> Result<f64> {
    if input.len() != output.len() {
        return Err(LabError::Dimension(format!(
            "input length {} vs output length {}",
            input.len(),
            output.len()
        )));
    }
    if input.is_empty() {
        return Err(LabError::Dimension("empty sequence".into()));
    }
    let (num, den) = if omega == 0.0 {
        let n = input.len() as f64;
        (
            output.iter().sum::<f64>() / n,
            input.iter().sum::<f64>() / n,
        )
    } else {
        (bin_amplitude(output, omega), bin_amplitude(input, omega))
    };
    if den.abs() < 1e-12 {
        return Err(LabError::UndefinedGain {
            omega,
            amplitude: den.abs(),
        });
    }
    let g = num / den;
    if omega == 0.0 {
        Ok(g)
    } else {
        Ok(g.abs())
    }
}

/// Number of samples holding a whole number of periods (≥ 16) of `omega`,
/// chosen so single-bin leakage vanishes. Falls back to `min_len` when no
/// near-integer period count exists below `max_len`.
pub fn coherent_length(omega: f64, min_len: usize, max_len: usize) -> usize {
    if omega <= 0.0 {
        return min_len;
    }
    let period = 2.0 * std::f64::consts::PI / omega;
    let base = ((16.0 * period).ceil() as usize).max(min_len);
    let mut best = (base, f64::INFINITY);
    for n in base..=max_len.max(base) {
        let cycles = n as f64 / period;
        let err = (cycles - cycles.round()).abs();
        if err < best.1 {
            best = (n, err);
        }
        if err < 1e-9 {
            break;
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShearCheck {
    pub det_residual: f64,
    pub symplectic_residual: f64,
}

/// Determinant and symplectic-form residuals of the shear [[1,γ],[0,1]].
pub fn shear_checks(gamma: f64) -> ShearCheck {
    let m: Mat2 = [[1.0, gamma], [0.0, 1.0]];
    let omega: Mat2 = [[0.0, 1.0], [-1.0, 0.0]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let mt = [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];
    let pulled = mat2_mul(&mat2_mul(&mt, &omega), &m);
    let mut fro = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let d = pulled[i][j] - omega[i][j];
            fro += d * d;
        }
    }
    ShearCheck {
        det_residual: (det - 1.0).abs(),
        symplectic_residual: fro.sqrt(),
    }
}

/// x_t + γ(x_t − x_{t−1}) with x_{−1} taken as x_0 (zero velocity at start).
pub fn momentum_sequence(x: &[f64], gamma: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(t, &v)| if t == 0 { v } else { v + gamma * (v - x[t - 1]) })
        .collect()
}

/// Sinusoid A·sin(ωt + φ) of length n.
pub fn sinusoid(n: usize, omega: f64, amplitude: f64, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|t| amplitude * (omega * t as f64 + phase).sin())
        .collect()
}

/// One line of the filter verification table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterCheck {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs the module's invariant suite: closed forms against the DFT meter,
/// EMA Nyquist identity, monotonicity, rotation-norm identity and shear checks.
pub fn verify_filters() -> Vec<FilterCheck> {
    let mut out = Vec::new();
    let mut push = |name: &str, worst: f64, tolerance: f64| {
        out.push(FilterCheck {
            name: name.to_string(),
            worst,
            tolerance,
            passed: worst.is_finite() && worst < tolerance,
        })
    };

    push("momentum_gain_vs_dft", momentum_dft_residual(65, &[0.0, 0.2, 0.5, 1.0]), 1e-9);

    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let beta = i as f64 / 10.0;
        worst = worst.max((ema_gain(std::f64::consts::PI, beta) - ema_nyquist(beta)).abs());
    }
    push("ema_nyquist_identity", worst, 1e-15);

    let grid = FrequencyGrid::uniform(257);
    let mut violations = 0.0;
    for &gamma in &[0.1, 0.2, 0.5, 1.0, 3.0] {
        for w in grid.omegas().windows(2) {
            if momentum_gain(w[1], gamma) < momentum_gain(w[0], gamma) {
                violations += 1.0;
            }
        }
    }
    push("momentum_gain_monotone", violations, 0.5);

    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let theta = std::f64::consts::PI * i as f64 / 99.0;
        worst = worst.max((rotation_diff_norm(theta) - 2.0 * (theta / 2.0).sin()).abs());
    }
    push("rotation_diff_norm", worst, 1e-12);

    let mut worst: f64 = 0.0;
    for &gamma in &[0.0, 0.15, 0.5, 2.0, 10.0] {
        let c = shear_checks(gamma);
        worst = worst.max(c.det_residual).max(c.symplectic_residual);
    }
    push("shear_symplectic", worst, 1e-12);

    let mut worst: f64 = 0.0;
    for &gamma in &[0.2, 0.5, 1.0] {
        for &w in FrequencyGrid::uniform(33).omegas() {
            worst = worst.max((cascade_gain(w, gamma, 0.0) - momentum_gain(w, gamma)).abs());
        }
    }
    push("cascade_reduces_at_beta0", worst, 1e-12);
    out
}

/// Largest |momentum_gain − DFT gain of the sequence operator| over an
/// `n_omega`-point grid on [0, π] and the given couplings.
pub fn momentum_dft_residual(n_omega: usize, gammas: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for &gamma in gammas {
        for &omega in FrequencyGrid::uniform(n_omega).omegas() {
            let measured = dft_gain_of_momentum(omega, gamma);
            worst = worst.max((measured - momentum_gain(omega, gamma)).abs());
        }
    }
    worst
}

/// Steady-state gain of x ↦ x + γΔx on a sinusoid (or a constant at ω = 0).
///
/// A warm-up prefix lets the start-up transient pass, and the measured window
/// holds a whole number of periods so the single-bin projection is exact.
fn dft_gain_of_momentum(omega: f64, gamma: f64) -> f64 {
    let n = coherent_length(omega, 64, 4096);
    let warm = 8;
    let x: Vec<f64> = if omega == 0.0 {
        vec![1.0; n + warm]
    } else if (omega - std::f64::consts::PI).abs() < 1e-15 {
        // sin(πt) vanishes on integers; the cosine phase carries the Nyquist tone.
        sinusoid(n + warm, omega, 1.0, std::f64::consts::FRAC_PI_2)
    } else {
        sinusoid(n + warm, omega, 1.0, 0.3)
    };
    let y = momentum_sequence(&x, gamma);
    measure_gain_dft(&x[warm..], &y[warm..], omega).unwrap_or(f64::NAN)
}
