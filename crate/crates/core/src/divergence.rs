//! KL divergence between the posterior and prior weight distributions.
//!
//! Both are products over named parameter groups. A group is either a
//! diagonal Gaussian, parameterized by its mean and a pre-softplus scale
//! `rho`, or a point mass (normalization statistics and affine parameters,
//! which are shared verbatim between prior and posterior). Point masses add
//! nothing to the divergence as long as the two sides agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softplus, softplus_inv, CompensatedSum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroupKind {
    DiagonalGaussian { mean: Vec<f64>, rho: Vec<f64> },
    PointMass { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticParamGroup {
    pub name: String,
    pub kind: GroupKind,
}

impl StochasticParamGroup {
    pub fn gaussian(name: impl Into<String>, mean: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if mean.len() != rho.len() {
            return Err(Error::shape(format!("group `{name}` rho"), mean.len(), rho.len()));
        }
        Ok(Self {
            name,
            kind: GroupKind::DiagonalGaussian { mean, rho },
        })
    }

    pub fn point_mass(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            kind: GroupKind::PointMass { values },
        }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            GroupKind::DiagonalGaussian { mean, .. } => mean.len(),
            GroupKind::PointMass { values } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, GroupKind::DiagonalGaussian { .. })
    }

    /// Mean for Gaussian groups, the values for point masses.
    pub fn center(&self) -> &[f64] {
        match &self.kind {
            GroupKind::DiagonalGaussian { mean, .. } => mean,
            GroupKind::PointMass { values } => values,
        }
    }

    /// Realized standard deviations `softplus(rho)`; `None` for point masses.
    pub fn scales(&self) -> Option<Vec<f64>> {
        match &self.kind {
            GroupKind::DiagonalGaussian { rho, .. } => Some(rho.iter().map(|&r| softplus(r)).collect()),
            GroupKind::PointMass { .. } => None,
        }
    }
}

/// A Gaussian prior `N(μp, σp² I)` over the stochastic groups, plus the
/// point-mass groups it shares with every posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub groups: Vec<StochasticParamGroup>,
    pub sigma_p: f64,
}

impl PriorSpec {
    /// Builds the prior from a trained deterministic network given as point
    /// masses. Groups named in `stochastic` become Gaussians centred on the
    /// trained values with scale `sigma_p`; the rest stay point masses.
    pub fn from_mean_network(
        mean_network: &[StochasticParamGroup],
        stochastic: impl Fn(&str) -> bool,
        sigma_p: f64,
    ) -> Result<Self> {
        if !(sigma_p > 0.0) || !sigma_p.is_finite() {
            return Err(Error::domain("sigma_p", sigma_p, "(0, inf)"));
        }
        let rho = softplus_inv(sigma_p);
        let groups = mean_network
            .iter()
            .map(|g| {
                let values = g.center().to_vec();
                if stochastic(&g.name) {
                    let n = values.len();
                    StochasticParamGroup::gaussian(g.name.clone(), values, vec![rho; n])
                } else {
                    Ok(StochasticParamGroup::point_mass(g.name.clone(), values))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups, sigma_p })
    }

    /// The prior's centre as a deterministic network (every group a point
    /// mass). This is what prior checkpoints store; it does not depend on
    /// `sigma_p`.
    pub fn mean_network(&self) -> Vec<StochasticParamGroup> {
        self.groups
            .iter()
            .map(|g| StochasticParamGroup::point_mass(g.name.clone(), g.center().to_vec()))
            .collect()
    }

    /// A posterior identical to this prior.
    pub fn initial_posterior(&self) -> Vec<StochasticParamGroup> {
        self.groups.clone()
    }
}

/// `KL(N(μq, diag σq²) ‖ N(μp, diag σp²))`, summed over coordinates:
///
/// `Σᵢ (σqᵢ² + (μqᵢ − μpᵢ)²) / (2σpᵢ²) − ½ + ln(σpᵢ/σqᵢ)`.
pub fn gaussian_kl_diag(
    post_mean: &[f64],
    post_scale: &[f64],
    prior_mean: &[f64],
    prior_scale: &[f64],
) -> Result<f64> {
    let n = post_mean.len();
    for (what, len) in [
        ("posterior scale", post_scale.len()),
        ("prior mean", prior_mean.len()),
        ("prior scale", prior_scale.len()),
    ] {
        if len != n {
            return Err(Error::shape(what, n, len));
        }
    }
    let mut acc = CompensatedSum::new();
    add_gaussian_terms(&mut acc, post_mean, post_scale, prior_mean, prior_scale)?;
    Ok(acc.value())
}

fn add_gaussian_terms(
    acc: &mut CompensatedSum,
    post_mean: &[f64],
    post_scale: &[f64],
    prior_mean: &[f64],
    prior_scale: &[f64],
) -> Result<()> {
    for i in 0..post_mean.len() {
        let (sq, sp) = (post_scale[i], prior_scale[i]);
        if !(sq > 0.0) {
            return Err(Error::NonPositiveScale { index: i, value: sq });
        }
        if !(sp > 0.0) {
            return Err(Error::NonPositiveScale { index: i, value: sp });
        }
        let diff = post_mean[i] - prior_mean[i];
        let term = (sq * sq + diff * diff) / (2.0 * sp * sp) - 0.5 + (sp / sq).ln();
        acc.add(term);
    }
    Ok(())
}

/// KL between two product distributions described group by group.
///
/// Groups must align by position, name and kind. Gaussian terms are
/// accumulated in declaration order; point-mass groups must match bitwise
/// and contribute exactly zero.
pub fn total_kl(posterior: &[StochasticParamGroup], prior: &[StochasticParamGroup]) -> Result<f64> {
    if posterior.len() != prior.len() {
        return Err(Error::GroupMismatch(format!(
            "posterior has {} groups, prior has {}",
            posterior.len(),
            prior.len()
        )));
    }
    let mut acc = CompensatedSum::new();
    for (q, p) in posterior.iter().zip(prior) {
        if q.name != p.name {
            return Err(Error::GroupMismatch(format!("`{}` vs `{}`", q.name, p.name)));
        }
        match (&q.kind, &p.kind) {
            (
                GroupKind::DiagonalGaussian { mean: qm, rho: qr },
                GroupKind::DiagonalGaussian { mean: pm, rho: pr },
            ) => {
                if qm.len() != pm.len() {
                    return Err(Error::shape(format!("group `{}`", q.name), pm.len(), qm.len()));
                }
                let qs: Vec<f64> = qr.iter().map(|&r| softplus(r)).collect();
                let ps: Vec<f64> = pr.iter().map(|&r| softplus(r)).collect();
                add_gaussian_terms(&mut acc, qm, &qs, pm, &ps)?;
            }
            (GroupKind::PointMass { values: qv }, GroupKind::PointMass { values: pv }) => {
                let same = qv.len() == pv.len()
                    && qv.iter().zip(pv).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Err(Error::InfiniteKl(q.name.clone()));
                }
            }
            _ => {
                return Err(Error::GroupMismatch(format!(
                    "group `{}` has different kinds in posterior and prior",
                    q.name
                )))
            }
        }
    }
    Ok(acc.value())
}
