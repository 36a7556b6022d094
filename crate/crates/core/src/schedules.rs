//! Forward-noise schedules for the continuous (VP Gaussian) and discrete
//! (masking / uniform CTMC) modalities, plus the log-SNR slope diagnostic.

use crate::error::{domain, Result};

/// Lower end of the training/sampling time range; keeps `1/t` weights finite.
pub const T_FLOOR: f64 = 1e-4;
/// Samplers evaluate continuous coefficients at `min(t, T_ALPHA_CLAMP)` so that `α_t > 0`.
pub const T_ALPHA_CLAMP: f64 = 1.0 - 1e-6;
/// Default terminal signal level of `vp_constant_beta`.
pub const VP_TERMINAL_ALPHA: f64 = 1e-4;
const SIMPSON_PANELS: usize = 1024;
const SLOPE_STEP: f64 = 1e-5;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Composite Simpson rule on `[a, b]`.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContinuousSchedule {
    /// `dz = -½β z dt + √β dW` with constant β, so `α_t = exp(-βt/2)`.
    VpConstantBeta { beta: f64 },
    /// Linearly increasing `β_t = β_min + t(β_max - β_min)`, integrated by quadrature.
    VpLinearBeta { beta_min: f64, beta_max: f64 },
    /// `α_t = √(1-t)`.
    ConcaveSqrt,
    /// `α_t = 1-t`.
    LinearAlpha,
}

impl Default for ContinuousSchedule {
    fn default() -> Self {
        ContinuousSchedule::ConcaveSqrt
    }
}

impl ContinuousSchedule {
    /// Constant-β VP schedule whose terminal signal is exactly `VP_TERMINAL_ALPHA`.
    pub fn vp_default() -> Self {
        ContinuousSchedule::VpConstantBeta { beta: -2.0 * VP_TERMINAL_ALPHA.ln() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContinuousSchedule::VpConstantBeta { .. } => "vp_constant_beta",
            ContinuousSchedule::VpLinearBeta { .. } => "vp_linear_beta",
            ContinuousSchedule::ConcaveSqrt => "concave_sqrt",
            ContinuousSchedule::LinearAlpha => "linear_alpha",
        }
    }

    /// True when α is computed by numerical quadrature rather than in closed form.
    pub fn uses_quadrature(&self) -> bool {
        matches!(self, ContinuousSchedule::VpLinearBeta { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ContinuousSchedule::VpConstantBeta { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(domain(format!("vp_constant_beta needs beta > 0, got {beta}")))
            }
            ContinuousSchedule::VpLinearBeta { beta_min, beta_max }
                if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max > 0.0) =>
            {
                Err(domain(format!(
                    "vp_linear_beta needs 0 <= beta_min <= beta_max, beta_max > 0 (got {beta_min}, {beta_max})"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `(α_t, σ_t)` with `α² + σ² = 1`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        Ok(match *self {
            ContinuousSchedule::VpConstantBeta { beta } => {
                let a = (-0.5 * beta * t).exp();
                (a, (1.0 - a * a).max(0.0).sqrt())
            }
            ContinuousSchedule::VpLinearBeta { beta_min, beta_max } => {
                let integral =
                    simpson(|s| beta_min + s * (beta_max - beta_min), 0.0, t, SIMPSON_PANELS);
                let a = (-0.5 * integral).exp();
                (a, (1.0 - a * a).max(0.0).sqrt())
            }
            ContinuousSchedule::ConcaveSqrt => ((1.0 - t).sqrt(), t.sqrt()),
            ContinuousSchedule::LinearAlpha => {
                let a = 1.0 - t;
                (a, (t * (2.0 - t)).sqrt())
            }
        })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(a, _)| a)
    }
}

/// Keep-probability curves for masked diffusion beyond the linear default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaCurve {
    /// `η_t = cos(πt/2)`.
    Cosine,
    /// `η_t = 1 - t^p`.
    Power(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DiscreteSchedule {
    /// Absorbing noise with `η_t = 1-t`.
    #[default]
    MaskedLinear,
    MaskedCustom(EtaCurve),
    /// Uniform-replacement noise with a constant jump rate, renormalised so `η_1 = 0`.
    Uniform { rate: f64 },
}

impl DiscreteSchedule {
    pub fn name(&self) -> &'static str {
        match self {
            DiscreteSchedule::MaskedLinear => "masked_linear",
            DiscreteSchedule::MaskedCustom(EtaCurve::Cosine) => "masked_cosine",
            DiscreteSchedule::MaskedCustom(EtaCurve::Power(_)) => "masked_power",
            DiscreteSchedule::Uniform { .. } => "uniform",
        }
    }

    pub fn is_masked(&self) -> bool {
        !matches!(self, DiscreteSchedule::Uniform { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiscreteSchedule::MaskedCustom(EtaCurve::Power(p)) if !(p > 0.0 && p.is_finite()) => {
                Err(domain(format!("masked_power needs exponent > 0, got {p}")))
            }
            DiscreteSchedule::Uniform { rate } if !(rate > 0.0 && rate.is_finite()) => {
                Err(domain(format!("uniform schedule needs rate > 0, got {rate}")))
            }
            _ => Ok(()),
        }
    }

    /// Keep probability `η_t`.
    pub fn eta(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(match *self {
            DiscreteSchedule::MaskedLinear => 1.0 - t,
            DiscreteSchedule::MaskedCustom(EtaCurve::Cosine) => {
                if t == 1.0 {
                    0.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).cos()
                }
            }
            DiscreteSchedule::MaskedCustom(EtaCurve::Power(p)) => 1.0 - t.powf(p),
            DiscreteSchedule::Uniform { rate } => {
                let end = (-rate).exp();
                (((-rate * t).exp() - end) / (1.0 - end)).clamp(0.0, 1.0)
            }
        })
    }

    /// Noise distribution `π_t` over the augmented vocabulary (`vocab + 1` entries).
    pub fn noise(&self, vocab: usize) -> Vec<f64> {
        let mut pi = vec![0.0; vocab + 1];
        if self.is_masked() {
            pi[vocab] = 1.0;
        } else {
            pi[..vocab].fill(1.0 / vocab as f64);
        }
        pi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    Synchronous,
    /// The continuous modality keeps at least as much signal as the discrete one.
    #[default]
    ContinuousAhead,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SchedulePair {
    pub continuous: ContinuousSchedule,
    pub discrete: DiscreteSchedule,
    pub pairing: Pairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Continuous,
    Discrete,
}

impl SchedulePair {
    /// Checks parameters and, for `ContinuousAhead`, that `α_t² ≥ η_t` on a 1000-point grid.
    pub fn validate(&self) -> Result<()> {
        self.continuous.validate()?;
        self.discrete.validate()?;
        if self.pairing == Pairing::ContinuousAhead {
            for i in 1..1000 {
                let t = i as f64 / 1000.0;
                let a = self.continuous.alpha(t)?;
                let eta = self.discrete.eta(t)?;
                if a * a < eta - 1e-12 {
                    return Err(domain(format!(
                        "continuous_ahead pairing violated at t={t}: alpha^2={} < eta={eta}",
                        a * a
                    )));
                }
            }
        }
        Ok(())
    }

    fn log_odds(&self, t: f64, which: Modality) -> Result<f64> {
        match which {
            Modality::Continuous => {
                let (a, s) = self.continuous.eval(t)?;
                Ok((a * a / (s * s)).ln())
            }
            Modality::Discrete => {
                let eta = self.discrete.eta(t)?;
                Ok((eta / (1.0 - eta)).ln())
            }
        }
    }

    /// `d/dt log SNR_z(t)` or `d/dt log(η_t/(1-η_t))` by central differences.
    pub fn log_snr_slope(&self, t: f64, which: Modality) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(domain(format!("log-SNR slope needs t strictly inside (0, 1), got {t}")));
        }
        let h = SLOPE_STEP.min(0.5 * t).min(0.5 * (1.0 - t));
        let up = self.log_odds(t + h, which)?;
        let down = self.log_odds(t - h, which)?;
        let slope = (up - down) / (2.0 * h);
        if !slope.is_finite() {
            return Err(domain(format!("log-SNR slope diverges at t={t}")));
        }
        Ok(slope)
    }
}
