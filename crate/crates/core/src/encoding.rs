//! Position encodings, the kinematic momentum operator with optional EMA
//! smoothing, momentum placement relative to the rotary encoding, and the
//! four-term expansion of momentum-augmented scores.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::{momentum_forward, rotate_groups, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncodingSpec {
    /// Geometric spectrum θ_m = base^{−2m/d}.
    MultiFrequency { base: f64 },
    /// Every pair rotates at the same θ.
    Monochromatic { theta: f64 },
    /// θ_m spread linearly over [θ(1−h), θ(1+h)].
    Bandpass { theta: f64, halfwidth_fraction: f64 },
    /// Fixed sin/cos table added to token embeddings.
    SinusoidalAdditive { base: f64 },
    #[serde(rename = "nope")]
    NoPE,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        EncodingSpec::MultiFrequency { base: 10000.0 }
    }
}

impl EncodingSpec {
    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        let theta_ok = |t: f64| t > 0.0 && t <= pi;
        match *self {
            EncodingSpec::MultiFrequency { base } | EncodingSpec::SinusoidalAdditive { base } => {
                if !(base > 1.0) {
                    return Err(LabError::Config(format!("encoding base {} must exceed 1", base)));
                }
            }
            EncodingSpec::Monochromatic { theta } => {
                if !theta_ok(theta) {
                    return Err(LabError::Config(format!("theta {} outside (0, pi]", theta)));
                }
            }
            EncodingSpec::Bandpass {
                theta,
                halfwidth_fraction,
            } => {
                if !theta_ok(theta) {
                    return Err(LabError::Config(format!("theta {} outside (0, pi]", theta)));
                }
                if !(halfwidth_fraction > 0.0 && halfwidth_fraction < 1.0) {
                    return Err(LabError::Config(format!(
                        "halfwidth_fraction {} outside (0, 1)",
                        halfwidth_fraction
                    )));
                }
            }
            EncodingSpec::NoPE => {}
        }
        Ok(())
    }

    pub fn is_rotary(&self) -> bool {
        matches!(
            self,
            EncodingSpec::MultiFrequency { .. }
                | EncodingSpec::Monochromatic { .. }
                | EncodingSpec::Bandpass { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Encode, then augment: momentum lives in the rotated frame.
    #[default]
    PostRope,
    /// Augment, then encode.
    PreRope,
    /// Augment the attention input before the Q/K projections.
    EmbeddingSpace,
    NoneAtAll,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "postrope" | "post" => Ok(Placement::PostRope),
            "prerope" | "pre" => Ok(Placement::PreRope),
            "embeddingspace" | "embedding" => Ok(Placement::EmbeddingSpace),
            "noneatall" | "none" => Ok(Placement::NoneAtAll),
            _ => Err(LabError::Config(format!("unknown placement '{}'", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MomentumParams {
    pub gamma: f64,
    #[serde(default)]
    pub beta: f64,
}

impl MomentumParams {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        let p = MomentumParams { gamma, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(LabError::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(LabError::Config(format!("beta {} outside [0, 1)", self.beta)));
        }
        Ok(())
    }
}

/// Per-pair rotation frequencies for a rotary encoding.
pub fn rope_freqs(spec: &EncodingSpec, head_dim: usize) -> Result<Vec<f64>> {
    if head_dim % 2 != 0 {
        return Err(LabError::Dimension(format!("head_dim {} must be even", head_dim)));
    }
    let half = head_dim / 2;
    match *spec {
        EncodingSpec::MultiFrequency { base } => Ok((0..half)
            .map(|m| base.powf(-2.0 * m as f64 / head_dim as f64))
            .collect()),
        EncodingSpec::Monochromatic { theta } => Ok(vec![theta; half]),
        EncodingSpec::Bandpass {
            theta,
            halfwidth_fraction,
        } => {
            let lo = theta * (1.0 - halfwidth_fraction);
            let hi = theta * (1.0 + halfwidth_fraction);
            if half == 1 {
                return Ok(vec![theta]);
            }
            Ok((0..half)
                .map(|m| lo + (hi - lo) * m as f64 / (half - 1) as f64)
                .collect())
        }
        _ => Err(LabError::Contract(format!(
            "{:?} has no rotary frequencies",
            spec
        ))),
    }
}

/// cos/sin of position·θ_m laid out as `[T, d/2]`.
pub fn rotary_tables(freqs: &[f64], positions: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(positions.len() * freqs.len());
    let mut sin = Vec::with_capacity(positions.len() * freqs.len());
    for &p in positions {
        for &f in freqs {
            let (s, c) = (p as f64 * f).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

/// Additive sinusoidal table `[T, d]`: even channels sin, odd channels cos.
pub fn sinusoidal_table(positions: &[usize], d: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let i = c / 2;
            let angle = p as f64 / base.powf(2.0 * i as f64 / d as f64);
            out.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

fn require_2d(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [t, d] => Ok((*t, *d)),
        s => Err(LabError::Dimension(format!("{} expects [T x d], got {:?}", what, s))),
    }
}

/// Encodes a `[T×d]` sequence at the given positions.
pub fn apply_encoding(x: &Tensor, positions: &[usize], spec: &EncodingSpec) -> Result<Tensor> {
    let (t, d) = require_2d(x, "apply_encoding")?;
    if positions.len() != t {
        return Err(LabError::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            t
        )));
    }
    match spec {
        EncodingSpec::NoPE => Ok(x.clone()),
        EncodingSpec::SinusoidalAdditive { base } => {
            let pe = sinusoidal_table(positions, d, *base);
            let data = x.data().iter().zip(&pe).map(|(a, b)| a + b).collect();
            Tensor::new(vec![t, d], data)
        }
        _ => {
            let freqs = rope_freqs(spec, d)?;
            let (cos, sin) = rotary_tables(&freqs, positions);
            let mut out = vec![0.0; x.len()];
            rotate_groups(x.data(), &mut out, t, d, &cos, &sin, 1.0, false);
            Tensor::new(vec![t, d], out)
        }
    }
}

/// p_0 = 0, p_t = x_t − x_{t−1}.
pub fn kinematic_momentum(seq: &Tensor) -> Result<Tensor> {
    let (t, d) = require_2d(seq, "kinematic_momentum")?;
    let x = seq.data();
    let mut out = vec![0.0; x.len()];
    for ti in 1..t {
        for c in 0..d {
            out[ti * d + c] = x[ti * d + c] - x[(ti - 1) * d + c];
        }
    }
    Tensor::new(vec![t, d], out)
}

/// m_0 = 0, m_t = β·m_{t−1} + (1−β)·p_t for t ≥ 1.
///
/// Row 0 is forced to zero, matching the p_0 = 0 boundary of the momentum
/// stream it is meant to smooth.
pub fn ema_momentum(p: &Tensor, beta: f64) -> Result<Tensor> {
    let (t, d) = require_2d(p, "ema_momentum")?;
    if !(0.0..1.0).contains(&beta) {
        return Err(LabError::Domain(format!("beta {} outside [0, 1)", beta)));
    }
    if beta == 0.0 {
        return Ok(p.clone());
    }
    let x = p.data();
    let mut out = vec![0.0; x.len()];
    for ti in 1..t {
        for c in 0..d {
            out[ti * d + c] = beta * out[(ti - 1) * d + c] + (1.0 - beta) * x[ti * d + c];
        }
    }
    Tensor::new(vec![t, d], out)
}

/// x + γ·EMA_β(Δx).
pub fn augment(x: &Tensor, params: &MomentumParams) -> Result<Tensor> {
    let (t, d) = require_2d(x, "augment")?;
    params.validate()?;
    Tensor::new(vec![t, d], momentum_forward(x.data(), t, d, params.gamma, params.beta))
}

/// Encoded and augmented query/key streams for one head.
pub fn placed_qk(
    raw_q: &Tensor,
    raw_k: &Tensor,
    positions: &[usize],
    spec: &EncodingSpec,
    placement: Placement,
    params: &MomentumParams,
) -> Result<(Tensor, Tensor)> {
    if raw_q.shape() != raw_k.shape() {
        return Err(LabError::Dimension(format!(
            "q {:?} vs k {:?}",
            raw_q.shape(),
            raw_k.shape()
        )));
    }
    let one = |x: &Tensor| -> Result<Tensor> {
        match placement {
            Placement::PostRope => augment(&apply_encoding(x, positions, spec)?, params),
            Placement::PreRope => apply_encoding(&augment(x, params)?, positions, spec),
            Placement::NoneAtAll => apply_encoding(x, positions, spec),
            Placement::EmbeddingSpace => Err(LabError::Contract(
                "embedding-space momentum is applied before the projections, not per head".into(),
            )),
        }
    };
    Ok((one(raw_q)?, one(raw_k)?))
}

/// Score matrices of the expansion (Q+γP_Q)(K+γP_K)ᵀ.
#[derive(Clone, Debug)]
pub struct FourTerms {
    pub content: Tensor,
    pub query_motion: Tensor,
    pub key_motion: Tensor,
    pub motion_motion: Tensor,
    pub total: Tensor,
}

fn a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "score")?;
    let (n, k2) = require_2d(b, "score")?;
    if k != k2 {
        return Err(LabError::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|c| a.data()[i * k + c] * b.data()[j * k + c]).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// T1 = QKᵀ, T2 = P_QKᵀ, T3 = QP_Kᵀ, T4 = P_QP_Kᵀ and S = T1 + γ(T2+T3) + γ²T4.
pub fn four_term_decompose(q: &Tensor, k: &Tensor, pq: &Tensor, pk: &Tensor, gamma: f64) -> Result<FourTerms> {
    if q.shape() != pq.shape() || k.shape() != pk.shape() {
        return Err(LabError::Dimension("momentum streams must match their sources".into()));
    }
    let content = a_bt(q, k)?;
    let query_motion = a_bt(pq, k)?;
    let key_motion = a_bt(q, pk)?;
    let motion_motion = a_bt(pq, pk)?;
    let total: Vec<f64> = (0..content.len())
        .map(|i| {
            content.data()[i]
                + gamma * (query_motion.data()[i] + key_motion.data()[i])
                + gamma * gamma * motion_motion.data()[i]
        })
        .collect();
    let total = Tensor::new(content.shape().to_vec(), total)?;
    Ok(FourTerms {
        content,
        query_motion,
        key_motion,
        motion_motion,
        total,
    })
}

/// Per-pair norm of PostRope − PreRope momentum streams at every t ≥ 1,
/// paired with the norm of the same pair of x_{t−1}. Rows are (t, m).
pub fn placement_discrepancy(
    x: &Tensor,
    spec: &EncodingSpec,
    params: &MomentumParams,
) -> Result<Vec<(f64, f64)>> {
    let (t, d) = require_2d(x, "placement_discrepancy")?;
    let positions: Vec<usize> = (0..t).collect();
    let post = augment(&apply_encoding(x, &positions, spec)?, params)?;
    let pre = apply_encoding(&augment(x, params)?, &positions, spec)?;
    let mut out = Vec::with_capacity((t - 1) * d / 2);
    for ti in 1..t {
        for m in 0..d / 2 {
            let i = ti * d + 2 * m;
            let j = (ti - 1) * d + 2 * m;
            let diff = (post.data()[i] - pre.data()[i]).hypot(post.data()[i + 1] - pre.data()[i + 1]);
            let prev = x.data()[j].hypot(x.data()[j + 1]);
            out.push((diff, prev));
        }
    }
    Ok(out)
}
