//! Small fully connected stochastic networks.
//!
//! A network is an ordered list of layers. Affine layers own two parameter
//! groups (`affineN.weight`, row-major `out × in`, and `affineN.bias`) that
//! are Gaussian under the posterior. Normalization layers own one point-mass
//! group `normN` laid out as `[mean | var | gamma | beta]`, each of length
//! `dim`; they apply stored statistics and are never sampled.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::divergence::{GroupKind, StochasticParamGroup};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus};

/// Added to the stored variance inside normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// Probability floor of the bounded negative log-likelihood.
pub const BOUNDED_NLL_P_MIN: f64 = 1e-4;

/// Additive smoothing of the Dice surrogate.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classify,
    Segment,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Row-major binary mask.
    Mask(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    SoftmaxClassifier { classes: usize },
    SigmoidMask { grid_h: usize, grid_w: usize },
}

impl OutputHead {
    pub fn dim(&self) -> usize {
        match *self {
            OutputHead::SoftmaxClassifier { classes } => classes,
            OutputHead::SigmoidMask { grid_h, grid_w } => grid_h * grid_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Affine { in_dim: usize, out_dim: usize },
    Relu,
    NormPointMass { dim: usize },
    Output(OutputHead),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupRole {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub len: usize,
    pub layer: usize,
    pub role: GroupRole,
}

impl GroupSpec {
    /// Whether the group is Gaussian under the posterior.
    pub fn stochastic(&self) -> bool {
        self.role != GroupRole::Norm
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct NetworkArchitecture {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for NetworkArchitecture {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        Self::new(layers)
    }
}

impl From<NetworkArchitecture> for Vec<Layer> {
    fn from(arch: NetworkArchitecture) -> Self {
        arch.layers
    }
}

impl NetworkArchitecture {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut dim = match layers.first() {
            Some(Layer::Affine { in_dim, .. }) => *in_dim,
            Some(other) => {
                return Err(Error::Architecture(format!(
                    "first layer must be affine, found {other:?}"
                )))
            }
            None => return Err(Error::Architecture("no layers".into())),
        };
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Affine { in_dim, out_dim } => {
                    if in_dim != dim || in_dim == 0 || out_dim == 0 {
                        return Err(Error::Architecture(format!(
                            "layer {i}: affine expects input {in_dim}, previous width is {dim}"
                        )));
                    }
                    dim = out_dim;
                }
                Layer::Relu => {}
                Layer::NormPointMass { dim: d } => {
                    if d != dim {
                        return Err(Error::Architecture(format!(
                            "layer {i}: normalization width {d}, previous width is {dim}"
                        )));
                    }
                }
                Layer::Output(head) => {
                    if i != last {
                        return Err(Error::Architecture(format!(
                            "layer {i}: output head must be the last layer"
                        )));
                    }
                    if head.dim() != dim || dim == 0 {
                        return Err(Error::Architecture(format!(
                            "output head expects {} inputs, previous width is {dim}",
                            head.dim()
                        )));
                    }
                    if matches!(head, OutputHead::SoftmaxClassifier { classes } if classes < 2) {
                        return Err(Error::Architecture("classifier needs at least two classes".into()));
                    }
                }
            }
        }
        if !matches!(layers[last], Layer::Output(_)) {
            return Err(Error::Architecture("missing output head".into()));
        }
        Ok(Self { layers })
    }

    /// `in → hidden → hidden → classes` with a normalization layer after the
    /// first affine map.
    pub fn classifier(in_dim: usize, hidden: usize, classes: usize) -> Self {
        Self::new(vec![
            Layer::Affine { in_dim, out_dim: hidden },
            Layer::NormPointMass { dim: hidden },
            Layer::Relu,
            Layer::Affine { in_dim: hidden, out_dim: hidden },
            Layer::Relu,
            Layer::Affine { in_dim: hidden, out_dim: classes },
            Layer::Output(OutputHead::SoftmaxClassifier { classes }),
        ])
        .expect("classifier layout is consistent")
    }

    /// Flattened `h·w` grid → hidden → `h·w` mask logits.
    pub fn segmenter(grid_h: usize, grid_w: usize, hidden: usize) -> Self {
        let cells = grid_h * grid_w;
        Self::new(vec![
            Layer::Affine { in_dim: cells, out_dim: hidden },
            Layer::NormPointMass { dim: hidden },
            Layer::Relu,
            Layer::Affine { in_dim: hidden, out_dim: cells },
            Layer::Output(OutputHead::SigmoidMask { grid_h, grid_w }),
        ])
        .expect("segmenter layout is consistent")
    }

    /// Default architecture for a task: 2→32→32→2, or 64→128→64 on 8×8 grids.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classify => Self::classifier(2, 32, 2),
            Task::Segment => Self::segmenter(8, 8, 128),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0] {
            Layer::Affine { in_dim, .. } => in_dim,
            _ => unreachable!("validated in new"),
        }
    }

    pub fn head(&self) -> OutputHead {
        match self.layers[self.layers.len() - 1] {
            Layer::Output(h) => h,
            _ => unreachable!("validated in new"),
        }
    }

    pub fn group_specs(&self) -> Vec<GroupSpec> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Affine { in_dim, out_dim } => {
                    specs.push(GroupSpec {
                        name: format!("affine{i}.weight"),
                        len: in_dim * out_dim,
                        layer: i,
                        role: GroupRole::Weight,
                    });
                    specs.push(GroupSpec {
                        name: format!("affine{i}.bias"),
                        len: out_dim,
                        layer: i,
                        role: GroupRole::Bias,
                    });
                }
                Layer::NormPointMass { dim } => specs.push(GroupSpec {
                    name: format!("norm{i}"),
                    len: 4 * dim,
                    layer: i,
                    role: GroupRole::Norm,
                }),
                Layer::Relu | Layer::Output(_) => {}
            }
        }
        specs
    }

    /// Number of Gaussian (sampled) parameters.
    pub fn stochastic_param_count(&self) -> usize {
        self.group_specs().iter().filter(|s| s.stochastic()).map(|s| s.len).sum()
    }

    /// Whether a group name refers to a sampled parameter group.
    pub fn is_stochastic_group(name: &str) -> bool {
        name.starts_with("affine")
    }

    /// Checks that a list of groups matches this architecture by name and length.
    pub fn check_groups(&self, groups: &[StochasticParamGroup]) -> Result<()> {
        let specs = self.group_specs();
        if specs.len() != groups.len() {
            return Err(Error::GroupMismatch(format!(
                "architecture has {} groups, got {}",
                specs.len(),
                groups.len()
            )));
        }
        for (s, g) in specs.iter().zip(groups) {
            if s.name != g.name {
                return Err(Error::GroupMismatch(format!("expected `{}`, found `{}`", s.name, g.name)));
            }
            if s.len != g.len() {
                return Err(Error::shape(format!("group `{}`", s.name), s.len, g.len()));
            }
        }
        Ok(())
    }
}

/// One concrete draw `h ∈ ℝᵈ` from a weight distribution, one dense vector
/// per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedWeights {
    pub groups: Vec<Vec<f64>>,
}

impl RealizedWeights {
    /// The centre of each group (posterior mean, or the deterministic values).
    pub fn centers(groups: &[StochasticParamGroup]) -> Self {
        Self {
            groups: groups.iter().map(|g| g.center().to_vec()).collect(),
        }
    }

    pub fn zeros_like(arch: &NetworkArchitecture) -> Self {
        Self {
            groups: arch.group_specs().iter().map(|s| vec![0.0; s.len]).collect(),
        }
    }
}

/// Standard-normal draws for every Gaussian coordinate; `None` for point masses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNoise {
    pub groups: Vec<Option<Vec<f64>>>,
}

impl WeightNoise {
    pub fn draw<R: Rng + ?Sized>(posterior: &[StochasticParamGroup], rng: &mut R) -> Self {
        let groups = posterior
            .iter()
            .map(|g| match &g.kind {
                GroupKind::DiagonalGaussian { mean, .. } => {
                    Some((0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                }
                GroupKind::PointMass { .. } => None,
            })
            .collect();
        Self { groups }
    }
}

/// Reparameterized draw `w = μ + softplus(ρ) ⊙ ε` with the given noise.
pub fn realize(posterior: &[StochasticParamGroup], noise: &WeightNoise) -> RealizedWeights {
    let groups = posterior
        .iter()
        .zip(&noise.groups)
        .map(|(g, eps)| match (&g.kind, eps) {
            (GroupKind::DiagonalGaussian { mean, rho }, Some(eps)) => mean
                .iter()
                .zip(rho)
                .zip(eps)
                .map(|((&m, &r), &e)| m + softplus(r) * e)
                .collect(),
            (GroupKind::PointMass { values }, _) => values.clone(),
            (GroupKind::DiagonalGaussian { mean, .. }, None) => mean.clone(),
        })
        .collect();
    RealizedWeights { groups }
}

/// Draws one network from the posterior. Gaussian coordinates consume one
/// standard normal each, in group order; point masses are copied.
pub fn sample_weights<R: Rng + ?Sized>(posterior: &[StochasticParamGroup], rng: &mut R) -> RealizedWeights {
    realize(posterior, &WeightNoise::draw(posterior, rng))
}

/// Per-layer inputs recorded during a forward pass, for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
}

impl Trace {
    /// Input to body layer `layer` during the last traced pass.
    pub fn layer_input(&self, layer: usize) -> &[f64] {
        &self.inputs[layer]
    }
}

fn layer_group_offsets(arch: &NetworkArchitecture) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(arch.layers.len());
    let mut g = 0;
    for layer in &arch.layers {
        offsets.push(g);
        g += match layer {
            Layer::Affine { .. } => 2,
            Layer::NormPointMass { .. } => 1,
            _ => 0,
        };
    }
    offsets
}

fn check_weights(weights: &RealizedWeights, arch: &NetworkArchitecture) -> Result<()> {
    let specs = arch.group_specs();
    if specs.len() != weights.groups.len() {
        return Err(Error::shape("weight groups", specs.len(), weights.groups.len()));
    }
    for (s, w) in specs.iter().zip(&weights.groups) {
        if s.len != w.len() {
            return Err(Error::shape(format!("group `{}`", s.name), s.len, w.len()));
        }
    }
    Ok(())
}

/// Runs the network up to (not including) the output nonlinearity.
pub fn forward_logits(
    weights: &RealizedWeights,
    arch: &NetworkArchitecture,
    x: &[f64],
    mut trace: Option<&mut Trace>,
) -> Result<Vec<f64>> {
    if x.len() != arch.input_dim() {
        return Err(Error::shape("network input", arch.input_dim(), x.len()));
    }
    check_weights(weights, arch)?;
    if let Some(t) = trace.as_deref_mut() {
        t.inputs.clear();
    }
    let offsets = layer_group_offsets(arch);
    let mut h = x.to_vec();
    for (i, layer) in arch.layers.iter().enumerate() {
        if let Layer::Output(_) = layer {
            break;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.push(h.clone());
        }
        h = match *layer {
            Layer::Affine { in_dim, out_dim } => {
                let w = &weights.groups[offsets[i]];
                let b = &weights.groups[offsets[i] + 1];
                (0..out_dim)
                    .map(|o| {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        row.iter().zip(&h).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
                    })
                    .collect()
            }
            Layer::Relu => h.iter().map(|&v| v.max(0.0)).collect(),
            Layer::NormPointMass { dim } => {
                let p = &weights.groups[offsets[i]];
                (0..dim)
                    .map(|j| {
                        let (mean, var, gamma, beta) = (p[j], p[dim + j], p[2 * dim + j], p[3 * dim + j]);
                        gamma * (h[j] - mean) / (var + NORM_EPS).sqrt() + beta
                    })
                    .collect()
            }
            Layer::Output(_) => unreachable!(),
        };
    }
    Ok(h)
}

/// Applies the output nonlinearity of `head` to logits.
pub fn apply_head(head: OutputHead, logits: &[f64]) -> Vec<f64> {
    match head {
        OutputHead::SoftmaxClassifier { .. } => softmax(logits),
        OutputHead::SigmoidMask { .. } => logits.iter().map(|&z| sigmoid(z)).collect(),
    }
}

/// Class probabilities (softmax head) or per-cell mask probabilities
/// (sigmoid head).
pub fn forward(weights: &RealizedWeights, arch: &NetworkArchitecture, x: &[f64]) -> Result<Vec<f64>> {
    let logits = forward_logits(weights, arch, x, None)?;
    Ok(apply_head(arch.head(), &logits))
}

/// Backpropagates `dlogits` through a traced forward pass and adds the
/// parameter gradients into `grads` (same layout as the weights). Returns the
/// gradient with respect to the network input.
pub fn backward(
    weights: &RealizedWeights,
    arch: &NetworkArchitecture,
    trace: &Trace,
    dlogits: &[f64],
    grads: &mut RealizedWeights,
) -> Result<Vec<f64>> {
    check_weights(grads, arch)?;
    let offsets = layer_group_offsets(arch);
    let mut delta = dlogits.to_vec();
    let body = arch.layers.len() - 1;
    if trace.inputs.len() != body {
        return Err(Error::shape("trace", body, trace.inputs.len()));
    }
    for i in (0..body).rev() {
        let input = &trace.inputs[i];
        delta = match arch.layers[i] {
            Layer::Affine { in_dim, out_dim } => {
                let w = &weights.groups[offsets[i]];
                let mut dx = vec![0.0; in_dim];
                {
                    let gw = &mut grads.groups[offsets[i]];
                    debug_assert_eq!(delta.len(), out_dim);
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = o * in_dim;
                        for k in 0..in_dim {
                            gw[row + k] += d * input[k];
                            dx[k] += d * w[row + k];
                        }
                    }
                }
                let gb = &mut grads.groups[offsets[i] + 1];
                for o in 0..out_dim {
                    gb[o] += delta[o];
                }
                dx
            }
            Layer::Relu => delta
                .iter()
                .zip(input)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            Layer::NormPointMass { dim } => {
                let p = &weights.groups[offsets[i]];
                let g = &mut grads.groups[offsets[i]];
                (0..dim)
                    .map(|j| {
                        let inv_std = 1.0 / (p[dim + j] + NORM_EPS).sqrt();
                        let xhat = (input[j] - p[j]) * inv_std;
                        g[2 * dim + j] += delta[j] * xhat;
                        g[3 * dim + j] += delta[j];
                        delta[j] * p[2 * dim + j] * inv_std
                    })
                    .collect()
            }
            Layer::Output(_) => unreachable!(),
        };
    }
    Ok(delta)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn zero_one_loss(prediction: &[f64], y: usize) -> f64 {
    if argmax(prediction) == y {
        0.0
    } else {
        1.0
    }
}

/// `−ln(max(p_y, p_min)) / ln(1/p_min)`, which lies in `[0, 1]`.
pub fn bounded_nll(prediction: &[f64], y: usize) -> f64 {
    let p = prediction[y].max(BOUNDED_NLL_P_MIN);
    (p.ln() / BOUNDED_NLL_P_MIN.ln()).clamp(0.0, 1.0)
}

/// Gradient of [`bounded_nll`] ∘ softmax with respect to the logits.
pub fn bounded_nll_logit_grad(prediction: &[f64], y: usize) -> Vec<f64> {
    if prediction[y] <= BOUNDED_NLL_P_MIN {
        return vec![0.0; prediction.len()];
    }
    let scale = -1.0 / BOUNDED_NLL_P_MIN.ln();
    prediction
        .iter()
        .enumerate()
        .map(|(k, &p)| scale * (p - if k == y { 1.0 } else { 0.0 }))
        .collect()
}

/// Binarizes mask probabilities: a cell is foreground when `p > 0.5`.
pub fn threshold_mask(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > 0.5)).collect()
}

/// Dice similarity `2|X∩Y| / (|X|+|Y|)`; two empty masks score 1.
pub fn dsc(pred_mask: &[u8], true_mask: &[u8]) -> Result<f64> {
    if pred_mask.len() != true_mask.len() {
        return Err(Error::shape("mask", true_mask.len(), pred_mask.len()));
    }
    let (mut inter, mut px, mut py) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred_mask.iter().zip(true_mask) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        px += usize::from(a);
        py += usize::from(b);
    }
    if px + py == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (px + py) as f64)
}

/// Smooth Dice loss `1 − (2Σpg + s) / (Σp + Σg + s)` with `s = 1`.
pub fn dice_loss_surrogate(pred_probs: &[f64], true_mask: &[u8]) -> f64 {
    let (num, den) = dice_terms(pred_probs, true_mask);
    (1.0 - num / den).clamp(0.0, 1.0)
}

fn dice_terms(pred_probs: &[f64], true_mask: &[u8]) -> (f64, f64) {
    let (mut pg, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred_probs.iter().zip(true_mask) {
        let g = f64::from(g);
        pg += p * g;
        sp += p;
        sg += g;
    }
    (2.0 * pg + DICE_SMOOTHING, sp + sg + DICE_SMOOTHING)
}

/// Gradient of [`dice_loss_surrogate`] with respect to the probabilities.
pub fn dice_loss_grad(pred_probs: &[f64], true_mask: &[u8]) -> Vec<f64> {
    let (num, den) = dice_terms(pred_probs, true_mask);
    true_mask
        .iter()
        .map(|&g| -(2.0 * f64::from(g) * den - num) / (den * den))
        .collect()
}

fn label_mismatch(head: OutputHead) -> Error {
    Error::Config(format!("label type does not match output head {head:?}"))
}

/// The `[0,1]` loss that certificates are computed for: 0-1 error for
/// classifiers, `1 − DSC` of the thresholded mask for segmenters.
pub fn certified_loss(head: OutputHead, prediction: &[f64], label: &Label) -> Result<f64> {
    match (head, label) {
        (OutputHead::SoftmaxClassifier { .. }, Label::Class(y)) => Ok(zero_one_loss(prediction, *y)),
        (OutputHead::SigmoidMask { .. }, Label::Mask(m)) => Ok(1.0 - dsc(&threshold_mask(prediction), m)?),
        _ => Err(label_mismatch(head)),
    }
}

/// The differentiable training loss (bounded NLL or Dice surrogate) and its
/// gradient with respect to the logits.
pub fn surrogate_loss_and_grad(head: OutputHead, logits: &[f64], label: &Label) -> Result<(f64, Vec<f64>)> {
    match (head, label) {
        (OutputHead::SoftmaxClassifier { classes }, Label::Class(y)) => {
            if *y >= classes {
                return Err(Error::shape("class label", classes, *y));
            }
            let p = softmax(logits);
            Ok((bounded_nll(&p, *y), bounded_nll_logit_grad(&p, *y)))
        }
        (OutputHead::SigmoidMask { .. }, Label::Mask(m)) => {
            if m.len() != logits.len() {
                return Err(Error::shape("mask label", logits.len(), m.len()));
            }
            let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let dp = dice_loss_grad(&p, m);
            let grad = dp.iter().zip(&p).map(|(d, p)| d * p * (1.0 - p)).collect();
            Ok((dice_loss_surrogate(&p, m), grad))
        }
        _ => Err(label_mismatch(head)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(arch: &NetworkArchitecture, seed: u64) -> RealizedWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = RealizedWeights::zeros_like(arch);
        for (spec, g) in arch.group_specs().iter().zip(w.groups.iter_mut()) {
            for (k, v) in g.iter_mut().enumerate() {
                *v = rng.random_range(-1.0..1.0);
                if spec.role == GroupRole::Norm && (spec.len / 4..spec.len / 2).contains(&k) {
                    *v = v.abs() + 0.5;
                }
            }
        }
        w
    }

    #[test]
    fn architecture_validation() {
        assert!(NetworkArchitecture::new(vec![]).is_err());
        assert!(NetworkArchitecture::new(vec![Layer::Relu]).is_err());
        assert!(NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 2, out_dim: 3 },
            Layer::Affine { in_dim: 4, out_dim: 2 },
            Layer::Output(OutputHead::SoftmaxClassifier { classes: 2 }),
        ])
        .is_err());
        assert!(NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 2, out_dim: 3 },
            Layer::Output(OutputHead::SoftmaxClassifier { classes: 3 }),
            Layer::Relu,
        ])
        .is_err());
        assert!(NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 2, out_dim: 3 },
            Layer::NormPointMass { dim: 2 },
            Layer::Output(OutputHead::SoftmaxClassifier { classes: 3 }),
        ])
        .is_err());
        let seg = NetworkArchitecture::segmenter(8, 8, 128);
        assert_eq!(seg.stochastic_param_count(), 64 * 128 + 128 + 128 * 64 + 64);
        let cls = NetworkArchitecture::classifier(2, 32, 2);
        let names: Vec<_> = cls.group_specs().into_iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            ["affine0.weight", "affine0.bias", "norm1", "affine3.weight", "affine3.bias", "affine5.weight", "affine5.bias"]
        );
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let arch = NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 3, out_dim: 4 },
            Layer::Relu,
            Layer::Affine { in_dim: 4, out_dim: 5 },
            Layer::Output(OutputHead::SoftmaxClassifier { classes: 5 }),
        ])
        .unwrap();
        let p = forward(&RealizedWeights::zeros_like(&arch), &arch, &[0.3, -2.0, 1.0]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_affine_layer_is_a_matvec() {
        let arch = NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 3, out_dim: 2 },
            Layer::Output(OutputHead::SoftmaxClassifier { classes: 2 }),
        ])
        .unwrap();
        let weights = RealizedWeights {
            groups: vec![vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25], vec![0.1, -0.2]],
        };
        let logits = forward_logits(&weights, &arch, &[1.0, -1.0, 2.0], None).unwrap();
        // [1 - 2 + 6 + 0.1, -1 - 0.5 + 0.5 - 0.2]
        assert_abs_diff_eq!(logits[0], 5.1, epsilon = 1e-12);
        assert_abs_diff_eq!(logits[1], -1.2, epsilon = 1e-12);
    }

    #[test]
    fn normalization_uses_stored_statistics() {
        let arch = NetworkArchitecture::new(vec![
            Layer::Affine { in_dim: 1, out_dim: 1 },
            Layer::NormPointMass { dim: 1 },
            Layer::Affine { in_dim: 1, out_dim: 1 },
            Layer::Output(OutputHead::SigmoidMask { grid_h: 1, grid_w: 1 }),
        ])
        .unwrap();
        let weights = RealizedWeights {
            groups: vec![vec![1.0], vec![0.0], vec![1.0, 4.0 - NORM_EPS, 3.0, 0.5], vec![1.0], vec![0.0]],
        };
        let logits = forward_logits(&weights, &arch, &[5.0], None).unwrap();
        assert_abs_diff_eq!(logits[0], 3.0 * (5.0 - 1.0) / 2.0 + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn shape_errors() {
        let arch = NetworkArchitecture::classifier(2, 4, 2);
        let w = RealizedWeights::zeros_like(&arch);
        assert!(forward(&w, &arch, &[1.0]).is_err());
        let bad = RealizedWeights { groups: vec![vec![0.0; 3]] };
        assert!(forward(&bad, &arch, &[1.0, 2.0]).is_err());
        assert!(dsc(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = NetworkArchitecture::classifier(3, 5, 3);
        let weights = random_weights(&arch, 3);
        let x = [0.4, -0.7, 1.3];
        let label = Label::Class(2);
        let loss = |w: &RealizedWeights| {
            let logits = forward_logits(w, &arch, &x, None).unwrap();
            surrogate_loss_and_grad(arch.head(), &logits, &label).unwrap().0
        };
        let mut trace = Trace::default();
        let logits = forward_logits(&weights, &arch, &x, Some(&mut trace)).unwrap();
        let (_, dlogits) = surrogate_loss_and_grad(arch.head(), &logits, &label).unwrap();
        let mut grads = RealizedWeights::zeros_like(&arch);
        backward(&weights, &arch, &trace, &dlogits, &mut grads).unwrap();

        let h = 1e-6;
        for (spec, (gi, g)) in arch.group_specs().iter().zip(grads.groups.iter().enumerate()) {
            for (k, &gk) in g.iter().enumerate() {
                if spec.role == GroupRole::Norm && k < spec.len / 2 {
                    continue; // statistics are not trained by gradient
                }
                let mut plus = weights.clone();
                plus.groups[gi][k] += h;
                let mut minus = weights.clone();
                minus.groups[gi][k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - gk).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{k}]: fd {fd} vs {gk}", spec.name);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_degenerates_to_mean() {
        let posterior = vec![
            StochasticParamGroup::gaussian("a", vec![0.5, -1.0], vec![-800.0, -800.0]).unwrap(),
            StochasticParamGroup::point_mass("b", vec![3.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_weights(&posterior, &mut rng);
        assert_eq!(w.groups, vec![vec![0.5, -1.0], vec![3.0]]);

        let posterior = vec![StochasticParamGroup::gaussian("a", vec![0.0; 4], vec![0.3; 4]).unwrap()];
        let a = sample_weights(&posterior, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_weights(&posterior, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_variance_matches_softplus_scale() {
        let rho = [-4.6, -1.0, 0.0, 1.5];
        let mean = [0.3, -0.2, 1.0, 0.0];
        let posterior = vec![StochasticParamGroup::gaussian("a", mean.to_vec(), rho.to_vec()).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for _ in 0..n {
            let w = sample_weights(&posterior, &mut rng);
            for i in 0..4 {
                sum[i] += w.groups[0][i];
                sum_sq[i] += w.groups[0][i] * w.groups[0][i];
            }
        }
        for i in 0..4 {
            let m = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - m * m;
            let expect = softplus(rho[i]).powi(2);
            assert!((var - expect).abs() <= 0.05 * expect, "coord {i}: {var} vs {expect}");
        }
    }

    #[test]
    fn zero_one_examples() {
        assert_eq!(zero_one_loss(&[0.1, 0.8, 0.1], 1), 0.0);
        assert_eq!(zero_one_loss(&[0.1, 0.8, 0.1], 0), 1.0);
        assert_eq!(zero_one_loss(&[0.4, 0.2, 0.4], 0), 0.0);
        assert_eq!(zero_one_loss(&[0.4, 0.2, 0.4], 2), 1.0);
        let preds = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]];
        let labels = [0, 1, 1, 1];
        let err: f64 = preds.iter().zip(labels).map(|(p, y)| zero_one_loss(p, y)).sum::<f64>() / 4.0;
        let correct = preds.iter().zip(labels).filter(|(p, y)| argmax(&p[..]) == *y).count();
        assert_eq!(err, 1.0 - correct as f64 / 4.0);
    }

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(dsc(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn dice_surrogate_examples() {
        let mask = [1u8, 0, 1, 1, 0];
        let probs: Vec<f64> = mask.iter().map(|&g| f64::from(g)).collect();
        assert_eq!(dice_loss_surrogate(&probs, &mask), 0.0);
        assert_abs_diff_eq!(dice_loss_surrogate(&[0.0; 5], &mask), 1.0 - 1.0 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let probs: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
            let mask: Vec<u8> = (0..16).map(|_| rng.random_range(0..2)).collect();
            let g = dice_loss_grad(&probs, &mask);
            let h = 1e-6;
            for i in 0..16 {
                let mut up = probs.clone();
                up[i] += h;
                let mut dn = probs.clone();
                dn[i] -= h;
                let fd = (dice_loss_surrogate(&up, &mask) - dice_loss_surrogate(&dn, &mask)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-12);
                assert!(rel < 1e-5, "cell {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn bounded_nll_examples() {
        assert_eq!(bounded_nll(&[1.0, 0.0], 0), 0.0);
        assert_eq!(bounded_nll(&[1.0, 0.0], 1), 1.0);
        assert_eq!(bounded_nll(&[1.0 - 1e-5, 1e-5], 1), 1.0);
        let p = BOUNDED_NLL_P_MIN.sqrt();
        assert_abs_diff_eq!(bounded_nll(&[1.0 - p, p], 1), 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_bounded(logits in prop::collection::vec(-30.0f64..30.0, 2..6), y in 0usize..6) {
            let y = y % logits.len();
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let nll = bounded_nll(&p, y);
            prop_assert!((0.0..=1.0).contains(&nll));
            prop_assert!(zero_one_loss(&p, y) == 0.0 || zero_one_loss(&p, y) == 1.0);
        }

        #[test]
        fn dsc_is_symmetric_and_bounded(a in prop::collection::vec(0u8..2, 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<u8> = a.iter().map(|_| rng.random_range(0..2)).collect();
            let ab = dsc(&a, &b).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let probs: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..=1.0)).collect();
            let d = dice_loss_surrogate(&probs, &b);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn bounded_nll_is_monotone(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(bounded_nll(&[1.0 - hi, hi], 1) <= bounded_nll(&[1.0 - lo, lo], 1));
        }

        #[test]
        fn softmax_head_sums_to_one(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 2)) {
            let arch = NetworkArchitecture::classifier(2, 8, 3);
            let p = forward(&random_weights(&arch, seed), &arch, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
