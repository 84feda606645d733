//! Monte-Carlo estimates of stochastic risk, and an exactly solvable
//! one-dimensional threshold model used to test certificate validity.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{certify_risk, BoundInputs, Certificate, DeltaAllocation, DEFAULT_TOL};
use crate::divergence::{gaussian_kl_diag, total_kl, PriorSpec, StochasticParamGroup};
use crate::error::{Error, Result};
use crate::numeric::{normal_cdf, CompensatedSum};
use crate::seeds::{stream_rng, Stream};
use crate::stochnet::{
    bounded_nll, certified_loss, dice_loss_surrogate, forward, sample_weights, Label, LabeledExample,
    NetworkArchitecture, OutputHead,
};

/// Models drawn sequentially before a parallel evaluation batch.
const MODEL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    /// Average loss over sampled networks and examples.
    pub value: f64,
    pub n_models: u64,
    pub n_examples: u64,
    pub loss_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalLoss {
    /// 0-1 loss for classifiers, `1 − DSC` for mask heads.
    Certified,
    /// Bounded NLL for classifiers, the Dice surrogate for mask heads.
    Surrogate,
}

impl EvalLoss {
    pub fn name(self, head: OutputHead) -> &'static str {
        match (self, head) {
            (EvalLoss::Certified, OutputHead::SoftmaxClassifier { .. }) => "zero-one",
            (EvalLoss::Certified, OutputHead::SigmoidMask { .. }) => "one-minus-dsc",
            (EvalLoss::Surrogate, OutputHead::SoftmaxClassifier { .. }) => "bounded-nll",
            (EvalLoss::Surrogate, OutputHead::SigmoidMask { .. }) => "dice-surrogate",
        }
    }

    pub fn eval(self, head: OutputHead, prediction: &[f64], label: &Label) -> Result<f64> {
        match (self, head, label) {
            (EvalLoss::Certified, ..) => certified_loss(head, prediction, label),
            (EvalLoss::Surrogate, OutputHead::SoftmaxClassifier { .. }, Label::Class(y)) => {
                Ok(bounded_nll(prediction, *y))
            }
            (EvalLoss::Surrogate, OutputHead::SigmoidMask { .. }, Label::Mask(m)) => {
                Ok(dice_loss_surrogate(prediction, m))
            }
            _ => Err(Error::Config("label type does not match output head".into())),
        }
    }
}

/// Mean of `eval` over `n_models` draws.
///
/// Draws are taken sequentially from `rng`; evaluations may run in parallel,
/// but per-model results are always reduced in model-index order, so the
/// result does not depend on the thread count.
pub fn monte_carlo_mean<M, R, D, E>(n_models: u64, rng: &mut R, mut draw: D, eval: E) -> Result<f64>
where
    M: Send + Sync,
    R: Rng + ?Sized,
    D: FnMut(&mut R) -> M,
    E: Fn(&M) -> Result<f64> + Sync,
{
    if n_models == 0 {
        return Err(Error::domain("n_models", 0.0, "[1, inf)"));
    }
    let mut acc = CompensatedSum::new();
    let mut remaining = n_models;
    while remaining > 0 {
        let take = remaining.min(MODEL_CHUNK as u64) as usize;
        let models: Vec<M> = (0..take).map(|_| draw(rng)).collect();
        let values: Vec<Result<f64>> = models.par_iter().map(&eval).collect();
        for v in values {
            acc.add(v?);
        }
        remaining -= take as u64;
    }
    Ok(acc.value() / n_models as f64)
}

/// `R̂(Q̂)`: the loss averaged over `data` for each of `n_models` sampled
/// networks, then averaged over networks.
pub fn monte_carlo_risk<R: Rng + ?Sized>(
    posterior: &[StochasticParamGroup],
    arch: &NetworkArchitecture,
    data: &[LabeledExample],
    loss: EvalLoss,
    n_models: u64,
    rng: &mut R,
) -> Result<RiskEstimate> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    arch.check_groups(posterior)?;
    let head = arch.head();
    let value = monte_carlo_mean(
        n_models,
        rng,
        |r| sample_weights(posterior, r),
        |w| {
            let mut acc = 0.0;
            for ex in data {
                acc += loss.eval(head, &forward(w, arch, &ex.x)?, &ex.y)?;
            }
            Ok(acc / data.len() as f64)
        },
    )?;
    Ok(RiskEstimate {
        value: value.clamp(0.0, 1.0),
        n_models,
        n_examples: data.len() as u64,
        loss_name: loss.name(head).to_string(),
    })
}

/// Average loss of one deterministic network.
pub fn deterministic_risk(
    weights: &crate::stochnet::RealizedWeights,
    arch: &NetworkArchitecture,
    data: &[LabeledExample],
    loss: EvalLoss,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let mut acc = 0.0;
    for ex in data {
        acc += loss.eval(arch.head(), &forward(weights, arch, &ex.x)?, &ex.y)?;
    }
    Ok(acc / data.len() as f64)
}

/// Certificate for a trained posterior, computed from the bound set only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedPosterior {
    pub certificate: Certificate,
    pub estimate: RiskEstimate,
    pub kl: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn certify_posterior(
    posterior: &[StochasticParamGroup],
    prior: &PriorSpec,
    arch: &NetworkArchitecture,
    bound_set: &[LabeledExample],
    n_models: u64,
    delta: f64,
    allocation: DeltaAllocation,
    tol: f64,
    seed: u64,
) -> Result<CertifiedPosterior> {
    let kl = total_kl(posterior, &prior.groups)?;
    let mut rng = stream_rng(seed, Stream::CertifySamples);
    let estimate = monte_carlo_risk(posterior, arch, bound_set, EvalLoss::Certified, n_models, &mut rng)?;
    let certificate = certify_risk(
        &BoundInputs {
            emp_risk_hat: estimate.value,
            kl_div: kl,
            m: bound_set.len() as u64,
            n: n_models,
            delta,
            allocation,
        },
        tol,
    )?;
    Ok(CertifiedPosterior {
        certificate,
        estimate,
        kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub x: f64,
    /// `+1` or `−1`.
    pub y: i8,
    pub weight: f64,
}

/// A finite data distribution together with a Gaussian posterior over the
/// threshold `w` of the classifier `h_w(x) = sign(x − w)` (`x ≤ w ↦ −1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOracle {
    pub points: Vec<WeightedPoint>,
    pub mu: f64,
    pub sigma: f64,
}

impl ThresholdOracle {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::domain("sigma", self.sigma, "(0, inf)"));
        }
        let total: f64 = self.points.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.points.iter().any(|p| p.weight < 0.0) {
            return Err(Error::Config(format!("point weights sum to {total}, not 1")));
        }
        if self.points.iter().any(|p| p.y != 1 && p.y != -1) {
            return Err(Error::Config("threshold labels must be +1 or -1".into()));
        }
        Ok(())
    }
}

/// Probability over `w ~ N(mu, sigma²)` that `h_w` misclassifies `(x, y)`.
pub fn threshold_error_probability(x: f64, y: i8, mu: f64, sigma: f64) -> f64 {
    if y > 0 {
        // wrong when w ≥ x
        normal_cdf((mu - x) / sigma)
    } else {
        // wrong when w < x
        normal_cdf((x - mu) / sigma)
    }
}

/// Exact risk `E_{w~Q} Pr_{(x,y)}[h_w(x) ≠ y]`.
pub fn exact_threshold_risk(oracle: &ThresholdOracle) -> Result<f64> {
    oracle.validate()?;
    Ok(oracle
        .points
        .iter()
        .map(|p| p.weight * threshold_error_probability(p.x, p.y, oracle.mu, oracle.sigma))
        .sum())
}

fn threshold_predicts_wrong(w: f64, x: f64, y: i8) -> bool {
    let predicted: i8 = if x > w { 1 } else { -1 };
    predicted != y
}

/// Monte-Carlo 0-1 risk of the stochastic threshold classifier on a sample.
pub fn threshold_monte_carlo_risk<R: Rng + ?Sized>(
    sample: &[(f64, i8)],
    mu: f64,
    sigma: f64,
    n_models: u64,
    rng: &mut R,
) -> Result<RiskEstimate> {
    if sample.is_empty() {
        return Err(Error::EmptyData("threshold sample"));
    }
    let value = monte_carlo_mean(
        n_models,
        rng,
        |r| mu + sigma * r.sample::<f64, _>(StandardNormal),
        |&w| {
            let wrong = sample.iter().filter(|&&(x, y)| threshold_predicts_wrong(w, x, y)).count();
            Ok(wrong as f64 / sample.len() as f64)
        },
    )?;
    Ok(RiskEstimate {
        value,
        n_models,
        n_examples: sample.len() as u64,
        loss_name: "zero-one".into(),
    })
}

/// Recipe for one certificate-validity trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityConfig {
    /// Support of the data distribution (weights must sum to 1).
    pub support: Vec<WeightedPoint>,
    /// Sample size `m`.
    pub m: usize,
    pub n_models: u64,
    pub delta: f64,
    pub allocation: DeltaAllocation,
    pub prior_mu: f64,
    pub prior_sigma: f64,
    pub posterior_sigma: f64,
    /// Fit the posterior mean to the sample; otherwise the posterior is the prior.
    pub fit_posterior: bool,
    /// Use the exact empirical risk of `Q` instead of sampling networks.
    pub exact_empirical: bool,
}

impl Default for ValidityConfig {
    /// Twenty-one equally spaced points on `[−1, 1]` labelled by
    /// `sign(x − 0.15)`, with three labels flipped (Bayes risk 1/7).
    fn default() -> Self {
        let flipped = [3usize, 12, 17];
        let support = (0..21)
            .map(|k| {
                let x = -1.0 + 0.1 * k as f64;
                let clean: i8 = if x > 0.15 { 1 } else { -1 };
                WeightedPoint {
                    x,
                    y: if flipped.contains(&k) { -clean } else { clean },
                    weight: 1.0 / 21.0,
                }
            })
            .collect();
        Self {
            support,
            m: 200,
            n_models: 100,
            delta: 0.05,
            allocation: DeltaAllocation::SplitHalf,
            prior_mu: 0.0,
            prior_sigma: 0.5,
            posterior_sigma: 0.1,
            fit_posterior: true,
            exact_empirical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub holds: bool,
    pub exact_risk: f64,
    pub posterior_mu: f64,
    pub certificate: Certificate,
}

/// Threshold minimizing the empirical 0-1 error on `sample`; candidates are
/// midpoints between consecutive distinct sample points plus one point beyond
/// each end. Ties go to the smallest threshold.
pub fn erm_threshold(sample: &[(f64, i8)]) -> f64 {
    let mut xs: Vec<f64> = sample.iter().map(|s| s.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut candidates = vec![xs[0] - 1.0];
    candidates.extend(xs.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(xs[xs.len() - 1] + 1.0);
    let errors = |t: f64| sample.iter().filter(|&&(x, y)| threshold_predicts_wrong(t, x, y)).count();
    let mut best = candidates[0];
    let mut best_err = errors(best);
    for &c in &candidates[1..] {
        let e = errors(c);
        if e < best_err {
            best = c;
            best_err = e;
        }
    }
    best
}

/// Draws a sample, fits a posterior, certifies it, and checks the certificate
/// against the exact risk.
pub fn validity_trial(trial_seed: u64, config: &ValidityConfig) -> Result<TrialOutcome> {
    let mut rng = stream_rng(trial_seed, Stream::Data);
    let cumulative: Vec<f64> = config
        .support
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.weight;
            Some(*acc)
        })
        .collect();
    let sample: Vec<(f64, i8)> = (0..config.m)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..cumulative[cumulative.len() - 1]);
            let k = cumulative.partition_point(|&c| c <= u).min(config.support.len() - 1);
            (config.support[k].x, config.support[k].y)
        })
        .collect();

    let (mu, sigma) = if config.fit_posterior {
        (erm_threshold(&sample), config.posterior_sigma)
    } else {
        (config.prior_mu, config.prior_sigma)
    };
    let kl = gaussian_kl_diag(&[mu], &[sigma], &[config.prior_mu], &[config.prior_sigma])?;

    let (emp_risk_hat, n) = if config.exact_empirical {
        let exact: f64 = sample
            .iter()
            .map(|&(x, y)| threshold_error_probability(x, y, mu, sigma))
            .sum::<f64>()
            / sample.len() as f64;
        (exact, u64::MAX)
    } else {
        let mut model_rng = stream_rng(trial_seed, Stream::CertifySamples);
        let est = threshold_monte_carlo_risk(&sample, mu, sigma, config.n_models, &mut model_rng)?;
        (est.value, config.n_models)
    };
    let certificate = certify_risk(
        &BoundInputs {
            emp_risk_hat,
            kl_div: kl,
            m: config.m as u64,
            n,
            delta: config.delta,
            allocation: config.allocation,
        },
        DEFAULT_TOL,
    )?;
    let exact_risk = exact_threshold_risk(&ThresholdOracle {
        points: config.support.clone(),
        mu,
        sigma,
    })?;
    Ok(TrialOutcome {
        holds: exact_risk <= certificate.risk_upper,
        exact_risk,
        posterior_mu: mu,
        certificate,
    })
}
