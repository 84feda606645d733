//! Binary KL divergence, its inverse, and the bound compositions built on
//! them: the PAC-Bayes-kl certificate, its Pinsker relaxation, the
//! sample-convergence correction for a finite number of sampled networks,
//! the Hoeffding holdout bound and a VC-dimension gap bound.
//!
//! Every function here is pure and reentrant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default stopping width for [`binary_kl_inverse`].
pub const DEFAULT_TOL: f64 = 1e-9;

/// Iteration cap for the bisection in [`binary_kl_inverse`].
pub const MAX_BISECTION_ITERS: usize = 200;

/// Upper end of the bisection bracket. `kl(q‖p)` diverges as `p → 1`, so the
/// root is always inside `[q, UPPER_BRACKET]` unless the budget is enormous.
const UPPER_BRACKET: f64 = 1.0 - 1e-15;

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::domain(name, v, "[0, 1]"))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain("delta", delta, "(0, 1)"))
    }
}

fn check_count(name: &'static str, v: u64) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::domain(name, v as f64, "[1, inf)"))
    }
}

/// `x·ln(x/y)` with the convention `0·ln 0 = 0`.
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

fn kl_unchecked(q: f64, p: f64) -> f64 {
    if q == p {
        return 0.0;
    }
    xlogx_over(q, p) + xlogx_over(1.0 - q, 1.0 - p)
}

/// KL divergence between Bernoulli(q) and Bernoulli(p).
///
/// Returns `f64::INFINITY` when `p ∈ {0, 1}` and `q ≠ p`.
pub fn binary_kl(q: f64, p: f64) -> Result<f64> {
    check_unit("q", q)?;
    check_unit("p", p)?;
    Ok(kl_unchecked(q, p))
}

/// `kl⁻¹(q‖eps) = max { p ∈ [0,1] : kl(q‖p) ≤ eps }`, by bisection on `[q, 1)`.
///
/// The returned value sits on the upper side of the bracket, so it never
/// underestimates the true inverse by more than rounding. Bisection stops
/// once the bracket is narrower than `tol` *and* the divergence changes by at
/// most `tol` across it; near `p = 1` the second condition forces extra
/// halvings because `kl` is steep there.
pub fn binary_kl_inverse(q: f64, eps: f64, tol: f64) -> Result<f64> {
    check_unit("q", q)?;
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::domain("eps", eps, "[0, inf)"));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tol", tol, "(0, inf)"));
    }
    if eps == 0.0 {
        return Ok(q);
    }
    if q >= UPPER_BRACKET || kl_unchecked(q, UPPER_BRACKET) <= eps {
        return Ok(1.0);
    }

    let mut lo = q;
    let mut hi = UPPER_BRACKET;
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_unchecked(q, mid) > eps {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= tol && kl_unchecked(q, hi) - kl_unchecked(q, lo) <= tol {
            break;
        }
    }
    Ok(hi)
}

/// Right-hand side of Maurer's PAC-Bayes-kl inequality:
/// `(KL + ln(1/δ) + ln √(4m)) / m`.
pub fn maurer_epsilon(kl_div: f64, m: u64, delta: f64) -> Result<f64> {
    if kl_div.is_nan() || kl_div < 0.0 {
        return Err(Error::domain("kl_div", kl_div, "[0, inf)"));
    }
    check_count("m", m)?;
    check_delta(delta)?;
    let m = m as f64;
    Ok((kl_div + (1.0 / delta).ln() + 0.5 * (4.0 * m).ln()) / m)
}

/// Pinsker relaxation of the PAC-Bayes-kl bound, clamped to 1.
pub fn pinsker_upper_bound(emp_risk: f64, kl_div: f64, m: u64, delta: f64) -> Result<f64> {
    check_unit("emp_risk", emp_risk)?;
    let eps = maurer_epsilon(kl_div, m, delta)?;
    Ok((emp_risk + (eps / 2.0).sqrt()).min(1.0))
}

/// Slack for `n` sampled networks: `ln(2/δ) / n`.
pub fn sample_convergence_epsilon(n: u64, delta: f64) -> Result<f64> {
    check_count("n", n)?;
    check_delta(delta)?;
    Ok((2.0 / delta).ln() / n as f64)
}

/// Upper bound on the stochastic empirical risk given the average over `n`
/// sampled networks, holding with probability `1 − δ` over the sampling.
pub fn sample_convergence_q(emp_risk_hat: f64, n: u64, delta: f64, tol: f64) -> Result<f64> {
    check_unit("emp_risk_hat", emp_risk_hat)?;
    let eps = sample_convergence_epsilon(n, delta)?;
    binary_kl_inverse(emp_risk_hat, eps, tol)
}

/// How the confidence budget is divided between the PAC-Bayes term and the
/// model-sampling term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaAllocation {
    /// `δ/2` to each term; the composed certificate holds with probability `1 − δ`.
    #[default]
    SplitHalf,
    /// `δ` in both slots, exactly as the composed bound is usually written.
    /// The combined guarantee is then only `1 − 2δ`.
    Unsplit,
}

impl DeltaAllocation {
    /// `(δ_pacbayes, δ_sample)`.
    pub fn split(self, delta: f64) -> (f64, f64) {
        match self {
            DeltaAllocation::SplitHalf => (delta / 2.0, delta / 2.0),
            DeltaAllocation::Unsplit => (delta, delta),
        }
    }
}

impl std::str::FromStr for DeltaAllocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split-half" => Ok(Self::SplitHalf),
            "unsplit" => Ok(Self::Unsplit),
            other => Err(Error::Config(format!("unknown allocation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Average loss over the `n` sampled networks on the bound set.
    pub emp_risk_hat: f64,
    /// `KL(Q‖P)` in nats.
    pub kl_div: f64,
    /// Bound-set size.
    pub m: u64,
    /// Number of sampled networks.
    pub n: u64,
    pub delta: f64,
    pub allocation: DeltaAllocation,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        check_unit("emp_risk_hat", self.emp_risk_hat)?;
        if self.kl_div.is_nan() || self.kl_div < 0.0 {
            return Err(Error::domain("kl_div", self.kl_div, "[0, inf)"));
        }
        check_count("m", self.m)?;
        check_count("n", self.n)?;
        check_delta(self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Upper bound on the true risk of the stochastic predictor.
    pub risk_upper: f64,
    /// `1 − risk_upper`: lower bound on accuracy or Dice.
    pub metric_lower: f64,
    /// Upper bound on the stochastic empirical risk after the sampling correction.
    pub q_intermediate: f64,
    pub epsilon_pacbayes: f64,
    pub epsilon_sample: f64,
    pub delta_pacbayes: f64,
    pub delta_sample: f64,
    /// Set when the certificate carries no information (`risk_upper ≥ 1`).
    pub vacuous: bool,
    pub inputs: BoundInputs,
}

/// Composes the sampling correction with the PAC-Bayes-kl inversion:
///
/// ```text
/// q          = kl⁻¹(R̂(Q̂) ‖ ln(2/δ₂)/n)
/// risk_upper = kl⁻¹(q ‖ (KL + ln(1/δ₁) + ln √(4m)) / m)
/// ```
///
/// A vacuous result is reported with `vacuous = true`, never as an error.
pub fn certify_risk(inputs: &BoundInputs, tol: f64) -> Result<Certificate> {
    inputs.validate()?;
    let (delta_pacbayes, delta_sample) = inputs.allocation.split(inputs.delta);
    let epsilon_sample = sample_convergence_epsilon(inputs.n, delta_sample)?;
    let q = binary_kl_inverse(inputs.emp_risk_hat, epsilon_sample, tol)?;
    let epsilon_pacbayes = maurer_epsilon(inputs.kl_div, inputs.m, delta_pacbayes)?;
    let risk_upper = binary_kl_inverse(q, epsilon_pacbayes, tol)?;
    Ok(Certificate {
        risk_upper,
        metric_lower: 1.0 - risk_upper,
        q_intermediate: q,
        epsilon_pacbayes,
        epsilon_sample,
        delta_pacbayes,
        delta_sample,
        vacuous: risk_upper >= 1.0,
        inputs: *inputs,
    })
}

/// Two-sided Hoeffding lower confidence bound on a `[0,1]` metric measured
/// on `n` i.i.d. holdout examples.
pub fn hoeffding_lower_bound(emp_metric: f64, n: u64, delta: f64) -> Result<f64> {
    check_unit("emp_metric", emp_metric)?;
    check_count("n", n)?;
    check_delta(delta)?;
    Ok((emp_metric - hoeffding_slack(n, delta)).max(0.0))
}

/// `√(ln(2/δ) / (2n))`.
pub fn hoeffding_slack(n: u64, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcBoundInput {
    /// Parameter count `W`.
    pub param_count: u64,
    pub m: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VcGap {
    /// VC-dimension estimate `W·log₂ W` (at least 1).
    pub vc_dim: f64,
    /// Gap bound; `f64::INFINITY` when `m ≤ d`.
    pub bound: f64,
    pub vacuous: bool,
}

/// Generalization-gap bound from the quantitative fundamental theorem of
/// learning, in the constant-free form
/// `√((d·(ln(2m/d) + 1) + ln(4/δ)) / m)` with `d = W·log₂ W`.
pub fn vc_gap_bound(input: &VcBoundInput) -> Result<VcGap> {
    check_count("param_count", input.param_count)?;
    check_count("m", input.m)?;
    check_delta(input.delta)?;
    let w = input.param_count as f64;
    let vc_dim = (w * w.log2()).max(1.0);
    let m = input.m as f64;
    let bound = if m > vc_dim {
        ((vc_dim * ((2.0 * m / vc_dim).ln() + 1.0) + (4.0 / input.delta).ln()) / m).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(VcGap {
        vc_dim,
        bound,
        vacuous: bound > 1.0,
    })
}
