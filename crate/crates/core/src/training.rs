//! Prior training by plain SGD with momentum, and PAC-Bayes-with-backprop
//! posterior training against a bound-shaped objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{total_kl, GroupKind, PriorSpec, StochasticParamGroup};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus};
use crate::seeds::{stream_rng, Stream};
use crate::stochnet::{
    backward, forward_logits, realize, surrogate_loss_and_grad, GroupRole, Layer, LabeledExample,
    NetworkArchitecture, RealizedWeights, Task, Trace, WeightNoise,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `R̃ + √B` with `B = (KL + ln(1/δ) + ln √(4m)) / (2m)`.
    #[default]
    Pinsker,
    /// `(√(R̃ + B) + √B)²`.
    Quadratic,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pinsker" => Ok(Self::Pinsker),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_prior: usize,
    pub epochs_posterior: usize,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub sigma_p: f64,
    pub delta: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Hyperparams {
    /// Desk-scale defaults: 10 prior epochs and 30 posterior epochs with a
    /// tenfold decay every 10 epochs that carries across both phases.
    pub fn defaults(task: Task) -> Self {
        let (lr, batch_size) = match task {
            Task::Classify => (0.05, 64),
            Task::Segment => (0.05, 8),
        };
        Self {
            lr,
            momentum: 0.95,
            batch_size,
            epochs_prior: 10,
            epochs_posterior: 30,
            decay_every: 10,
            decay_factor: 10.0,
            sigma_p: 0.01,
            delta: 0.05,
            seed: 0,
            objective: Objective::Pinsker,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("decay_factor", self.decay_factor),
            ("sigma_p", self.sigma_p),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(name, v, "(0, inf)"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum", self.momentum, "[0, 1)"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::domain("delta", self.delta, "(0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size", 0.0, "[1, inf)"));
        }
        if self.decay_every == 0 {
            return Err(Error::domain("decay_every", 0.0, "[1, inf)"));
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `lr · decay_factor^(−⌊epoch / decay_every⌋)`.
pub fn lr_schedule(epoch: usize, hyper: &Hyperparams) -> f64 {
    let steps = (epoch / hyper.decay_every) as i32;
    hyper.lr / hyper.decay_factor.powi(steps)
}

/// Classical (heavy-ball) momentum: `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("gradient", params.len(), grads.len()));
    }
    if velocity.len() != params.len() {
        return Err(Error::shape("velocity", params.len(), velocity.len()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers, one per trainable tensor, starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros(shapes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            velocity: shapes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }
}

/// A deterministic network with He-uniform weights, zero biases and identity
/// normalization, returned as point-mass groups.
pub fn init_network(arch: &NetworkArchitecture, seed: u64) -> Vec<StochasticParamGroup> {
    let mut rng = stream_rng(seed, Stream::Init);
    arch.group_specs()
        .into_iter()
        .map(|spec| {
            let values = match (spec.role, arch.layers()[spec.layer]) {
                (GroupRole::Weight, Layer::Affine { in_dim, .. }) => {
                    let bound = (6.0 / in_dim as f64).sqrt();
                    (0..spec.len).map(|_| rng.random_range(-bound..bound)).collect()
                }
                (GroupRole::Norm, _) => {
                    let d = spec.len / 4;
                    let mut v = vec![0.0; spec.len];
                    v[d..3 * d].fill(1.0);
                    v
                }
                _ => vec![0.0; spec.len],
            };
            StochasticParamGroup::point_mass(spec.name, values)
        })
        .collect()
}

/// Recomputes every normalization layer's stored mean and variance from the
/// activations `data` produces, layer by layer in network order.
pub fn refresh_norm_statistics(
    weights: &mut RealizedWeights,
    arch: &NetworkArchitecture,
    data: &[LabeledExample],
) -> Result<()> {
    let specs = arch.group_specs();
    for (gi, spec) in specs.iter().enumerate() {
        if spec.role != GroupRole::Norm {
            continue;
        }
        let d = spec.len / 4;
        let body_index = spec.layer;
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut trace = Trace::default();
        for ex in data {
            forward_logits(weights, arch, &ex.x, Some(&mut trace))?;
            let act = trace.layer_input(body_index);
            for j in 0..d {
                sum[j] += act[j];
                sum_sq[j] += act[j] * act[j];
            }
        }
        let n = data.len() as f64;
        let g = &mut weights.groups[gi];
        for j in 0..d {
            let mean = sum[j] / n;
            g[j] = mean;
            g[d + j] = (sum_sq[j] / n - mean * mean).max(0.0);
        }
    }
    Ok(())
}

/// Batch-averaged surrogate loss and its gradient with respect to every weight.
fn batch_loss_and_grad(
    weights: &RealizedWeights,
    arch: &NetworkArchitecture,
    batch: &[LabeledExample],
) -> Result<(f64, RealizedWeights)> {
    let mut grads = RealizedWeights::zeros_like(arch);
    let mut trace = Trace::default();
    let mut total = 0.0;
    for ex in batch {
        let logits = forward_logits(weights, arch, &ex.x, Some(&mut trace))?;
        let (loss, dlogits) = surrogate_loss_and_grad(arch.head(), &logits, &ex.y)?;
        total += loss;
        backward(weights, arch, &trace, &dlogits, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads.groups {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

/// Trains a deterministic network in place for the given epoch range, using
/// the schedule position of each epoch and the given shuffle stream.
pub fn train_deterministic(
    net: &mut RealizedWeights,
    data: &[LabeledExample],
    arch: &NetworkArchitecture,
    hyper: &Hyperparams,
    epochs: std::ops::Range<usize>,
    shuffle: Stream,
    stage: &'static str,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData("training set"));
    }
    let specs = arch.group_specs();
    let mut state = OptimizerState::zeros(specs.iter().map(|s| s.len));
    let mut rng = stream_rng(hyper.seed, shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in epochs {
        let lr = lr_schedule(epoch, hyper);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, mut grads) = batch_loss_and_grad(net, arch, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage, epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            for (spec, g) in specs.iter().zip(grads.groups.iter_mut()) {
                if spec.role == GroupRole::Norm {
                    // Statistics are refreshed from data, not descended.
                    g[..spec.len / 2].fill(0.0);
                }
            }
            for ((p, g), v) in net.groups.iter_mut().zip(&grads.groups).zip(state.velocity.iter_mut()) {
                sgd_momentum_step(p, g, v, lr, hyper.momentum)?;
            }
        }
        let mean_loss = epoch_loss / data.len() as f64;
        if !mean_loss.is_finite() || net.groups.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                stage,
                epoch,
                loss: mean_loss,
            });
        }
        refresh_norm_statistics(net, arch, data)?;
    }
    Ok(())
}

/// Learns the prior mean on the prefix set and attaches the shared scale
/// `sigma_p`. The learned mean does not depend on `sigma_p`.
pub fn train_prior(
    prefix: &[LabeledExample],
    arch: &NetworkArchitecture,
    hyper: &Hyperparams,
) -> Result<PriorSpec> {
    hyper.validate()?;
    if prefix.is_empty() {
        return Err(Error::EmptyData("prefix set"));
    }
    let init = init_network(arch, hyper.seed);
    let mut net = RealizedWeights::centers(&init);
    train_deterministic(&mut net, prefix, arch, hyper, 0..hyper.epochs_prior, Stream::PriorShuffle, "prior")?;
    let mean_network: Vec<StochasticParamGroup> = init
        .into_iter()
        .zip(net.groups)
        .map(|(g, values)| StochasticParamGroup::point_mass(g.name, values))
        .collect();
    PriorSpec::from_mean_network(&mean_network, NetworkArchitecture::is_stochastic_group, hyper.sigma_p)
}

/// Objective value, its parts, and gradients for every Gaussian group.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub surrogate_risk: f64,
    pub kl: f64,
    /// `(∂/∂mean, ∂/∂rho)` per group; `None` for point masses.
    pub grads: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// `ln(1/δ) + ln √(4m)`.
fn bound_constant(m: u64, delta: f64) -> f64 {
    (1.0 / delta).ln() + 0.5 * (4.0 * m as f64).ln()
}

/// Evaluates the objective for a surrogate risk and KL; returns the value and
/// its partial derivatives in the risk and in the KL.
pub fn objective_value(objective: Objective, risk: f64, kl: f64, m: u64, delta: f64) -> (f64, f64, f64) {
    let two_m = 2.0 * m as f64;
    let b = (kl + bound_constant(m, delta)) / two_m;
    match objective {
        Objective::Pinsker => {
            let sb = b.sqrt();
            (risk + sb, 1.0, 1.0 / (2.0 * sb) / two_m)
        }
        Objective::Quadratic => {
            let a = (risk + b).sqrt();
            let sb = b.sqrt();
            let v = (a + sb) * (a + sb);
            let d_risk = (a + sb) / a;
            let d_b = (a + sb) * (1.0 / a + 1.0 / sb);
            (v, d_risk, d_b / two_m)
        }
    }
}

/// The training objective for one minibatch with a fixed noise draw.
#[allow(clippy::too_many_arguments)]
pub fn pbb_objective_with_noise(
    posterior: &[StochasticParamGroup],
    prior: &PriorSpec,
    batch: &[LabeledExample],
    arch: &NetworkArchitecture,
    m: u64,
    delta: f64,
    objective: Objective,
    noise: &WeightNoise,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(Error::EmptyData("minibatch"));
    }
    if m == 0 {
        return Err(Error::domain("m", 0.0, "[1, inf)"));
    }
    arch.check_groups(posterior)?;
    let weights = realize(posterior, noise);
    let (risk, dw) = batch_loss_and_grad(&weights, arch, batch)?;
    let kl = total_kl(posterior, &prior.groups)?;
    let (value, d_risk, d_kl) = objective_value(objective, risk, kl, m, delta);

    let grads = posterior
        .iter()
        .zip(&prior.groups)
        .zip(dw.groups.iter().zip(&noise.groups))
        .map(|((q, p), (gw, eps))| match (&q.kind, &p.kind, eps) {
            (
                GroupKind::DiagonalGaussian { mean, rho },
                GroupKind::DiagonalGaussian { mean: pm, rho: pr },
                Some(eps),
            ) => {
                let mut g_mean = Vec::with_capacity(mean.len());
                let mut g_rho = Vec::with_capacity(mean.len());
                for i in 0..mean.len() {
                    let sq = softplus(rho[i]);
                    let sp = softplus(pr[i]);
                    let sp2 = sp * sp;
                    g_mean.push(d_risk * gw[i] + d_kl * (mean[i] - pm[i]) / sp2);
                    let d_sigma = d_risk * gw[i] * eps[i] + d_kl * (sq / sp2 - 1.0 / sq);
                    g_rho.push(d_sigma * sigmoid(rho[i]));
                }
                Some((g_mean, g_rho))
            }
            _ => None,
        })
        .collect();
    Ok(ObjectiveEval {
        value,
        surrogate_risk: risk,
        kl,
        grads,
    })
}

/// The training objective with a fresh reparameterization draw.
#[allow(clippy::too_many_arguments)]
pub fn pbb_objective<R: Rng + ?Sized>(
    posterior: &[StochasticParamGroup],
    prior: &PriorSpec,
    batch: &[LabeledExample],
    arch: &NetworkArchitecture,
    m: u64,
    delta: f64,
    objective: Objective,
    rng: &mut R,
) -> Result<ObjectiveEval> {
    let noise = WeightNoise::draw(posterior, rng);
    pbb_objective_with_noise(posterior, prior, batch, arch, m, delta, objective, &noise)
}

/// PBB posterior training; see [`pbb_train_observed`].
pub fn pbb_train(
    prior: &PriorSpec,
    train_data: &[LabeledExample],
    m: u64,
    arch: &NetworkArchitecture,
    hyper: &Hyperparams,
) -> Result<Vec<StochasticParamGroup>> {
    pbb_train_observed(prior, train_data, m, arch, hyper, |_, _| {})
}

/// Starts the posterior at the prior and descends the objective for
/// `epochs_posterior` epochs, one weight draw per minibatch. Point-mass
/// groups are never touched. The learning-rate schedule continues from
/// epoch `epochs_prior`. `observe` runs after every epoch.
pub fn pbb_train_observed(
    prior: &PriorSpec,
    train_data: &[LabeledExample],
    m: u64,
    arch: &NetworkArchitecture,
    hyper: &Hyperparams,
    mut observe: impl FnMut(usize, &[StochasticParamGroup]),
) -> Result<Vec<StochasticParamGroup>> {
    hyper.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyData("posterior training set"));
    }
    arch.check_groups(&prior.groups)?;
    let mut posterior = prior.initial_posterior();
    let mut state = OptimizerState::zeros(
        posterior
            .iter()
            .filter(|g| g.is_gaussian())
            .flat_map(|g| [g.len(), g.len()]),
    );
    let mut shuffle_rng = stream_rng(hyper.seed, Stream::PosteriorShuffle);
    let mut noise_rng = stream_rng(hyper.seed, Stream::PosteriorNoise);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for e in 0..hyper.epochs_posterior {
        let epoch = hyper.epochs_prior + e;
        let lr = lr_schedule(epoch, hyper);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| train_data[i].clone()).collect();
            let eval = pbb_objective(
                &posterior,
                prior,
                &batch,
                arch,
                m,
                hyper.delta,
                hyper.objective,
                &mut noise_rng,
            )?;
            if !eval.value.is_finite() {
                return Err(Error::Diverged {
                    stage: "posterior",
                    epoch,
                    loss: eval.value,
                });
            }
            let mut slot = 0;
            for (group, grad) in posterior.iter_mut().zip(eval.grads) {
                if let (GroupKind::DiagonalGaussian { mean, rho }, Some((g_mean, g_rho))) = (&mut group.kind, grad) {
                    sgd_momentum_step(mean, &g_mean, &mut state.velocity[slot], lr, hyper.momentum)?;
                    sgd_momentum_step(rho, &g_rho, &mut state.velocity[slot + 1], lr, hyper.momentum)?;
                    slot += 2;
                }
            }
        }
        let finite = posterior.iter().all(|g| match &g.kind {
            GroupKind::DiagonalGaussian { mean, rho } => mean.iter().chain(rho).all(|v| v.is_finite()),
            GroupKind::PointMass { .. } => true,
        });
        if !finite {
            return Err(Error::Diverged {
                stage: "posterior",
                epoch,
                loss: f64::NAN,
            });
        }
        observe(e, &posterior);
    }
    Ok(posterior)
}
