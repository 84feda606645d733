//! End-to-end experiment drivers: self-bounded learning, the Hoeffding
//! holdout baseline, prior-scale sweeps and VC gap tables.
//!
//! Every driver is a pure function of its [`ExperimentConfig`]; reports echo
//! the config so any number in them can be regenerated bit for bit.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{hoeffding_lower_bound, vc_gap_bound, Certificate, DeltaAllocation, VcBoundInput, DEFAULT_TOL};
use crate::checkpoint;
use crate::divergence::{PriorSpec, StochasticParamGroup};
use crate::error::{Error, Result, StageContext};
use crate::evaluation::{certify_posterior, deterministic_risk, monte_carlo_risk, EvalLoss, RiskEstimate};
use crate::seeds::{stream_rng, Stream};
use crate::stochnet::{LabeledExample, NetworkArchitecture, RealizedWeights, Task};
use crate::synthdata::{apply_split, gen_classification, gen_segmentation, subset, SplitPlan, Splits};
use crate::training::{init_network, pbb_train, train_deterministic, train_prior, Hyperparams, Objective};

/// Version tag written at the top of every JSON report.
pub const REPORT_FORMAT: &str = "pbcert-report/1";

/// Prior scales visited by a sweep unless a grid is given.
pub const DEFAULT_SIGMA_GRID: [f64; 6] = [0.005, 0.01, 0.02, 0.03, 0.04, 0.05];

/// Everything a run depends on. Missing keys in a config file take the
/// task's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub n_examples: usize,
    /// Cluster spread (classification) or pixel noise (segmentation).
    pub noise_sigma: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of the hidden layers.
    pub hidden: usize,
    pub seed: u64,
    pub delta: f64,
    pub sigma_p: f64,
    pub n_model_samples: u64,
    pub allocation: DeltaAllocation,
    pub objective: Objective,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_prior: usize,
    pub epochs_posterior: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub base_fraction: f64,
    pub prefix_fraction_of_base: f64,
    pub baseline_train_fraction_of_base: f64,
    /// Stopping tolerance of the kl inversions.
    pub kl_inverse_tol: f64,
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        let hyper = Hyperparams::defaults(task);
        let plan = SplitPlan::with_seed(0);
        let (n_examples, noise_sigma, hidden) = match task {
            Task::Classify => (9000, 0.5, 32),
            Task::Segment => (2300, 0.5, 128),
        };
        Self {
            task,
            n_examples,
            noise_sigma,
            grid_h: 8,
            grid_w: 8,
            hidden,
            seed: 0,
            delta: hyper.delta,
            sigma_p: hyper.sigma_p,
            n_model_samples: 100,
            allocation: DeltaAllocation::default(),
            objective: hyper.objective,
            lr: hyper.lr,
            momentum: hyper.momentum,
            batch_size: hyper.batch_size,
            epochs_prior: hyper.epochs_prior,
            epochs_posterior: hyper.epochs_posterior,
            decay_every: hyper.decay_every,
            decay_factor: hyper.decay_factor,
            base_fraction: plan.base_fraction,
            prefix_fraction_of_base: plan.prefix_fraction_of_base,
            baseline_train_fraction_of_base: plan.baseline_train_fraction_of_base,
            kl_inverse_tol: DEFAULT_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams().validate()?;
        if self.n_model_samples == 0 {
            return Err(Error::domain("n_model_samples", 0.0, "[1, inf)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::domain("noise_sigma", self.noise_sigma, "[0, inf)"));
        }
        if !(self.kl_inverse_tol > 0.0) {
            return Err(Error::domain("kl_inverse_tol", self.kl_inverse_tol, "(0, inf)"));
        }
        if self.hidden == 0 {
            return Err(Error::domain("hidden", 0.0, "[1, inf)"));
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs_prior: self.epochs_prior,
            epochs_posterior: self.epochs_posterior,
            decay_every: self.decay_every,
            decay_factor: self.decay_factor,
            sigma_p: self.sigma_p,
            delta: self.delta,
            seed: self.seed,
            objective: self.objective,
        }
    }

    pub fn architecture(&self) -> NetworkArchitecture {
        match self.task {
            Task::Classify => NetworkArchitecture::classifier(2, self.hidden, 2),
            Task::Segment => NetworkArchitecture::segmenter(self.grid_h, self.grid_w, self.hidden),
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            base_fraction: self.base_fraction,
            prefix_fraction_of_base: self.prefix_fraction_of_base,
            baseline_train_fraction_of_base: self.baseline_train_fraction_of_base,
            seed: self.seed,
        }
    }

    pub fn generate_data(&self) -> Result<Vec<LabeledExample>> {
        match self.task {
            Task::Classify => Ok(gen_classification(self.seed, self.n_examples, self.noise_sigma)),
            Task::Segment => gen_segmentation(self.seed, self.n_examples, self.grid_h, self.grid_w, self.noise_sigma),
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Classify => "accuracy",
            Task::Segment => "dsc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Selfbound,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub base: usize,
    pub final_holdout: usize,
    pub prefix: usize,
    pub bound: usize,
    pub baseline_train: usize,
    pub baseline_holdout: usize,
}

impl From<&Splits> for SplitSizes {
    fn from(s: &Splits) -> Self {
        Self {
            base: s.base.len(),
            final_holdout: s.final_holdout.len(),
            prefix: s.prefix.len(),
            bound: s.bound.len(),
            baseline_train: s.baseline_train.len(),
            baseline_holdout: s.baseline_holdout.len(),
        }
    }
}

/// Result of one run. Wall-clock timings are kept out of the report (see
/// [`StageTimings`]) so that reports are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub kind: RunKind,
    pub config: ExperimentConfig,
    pub metric_name: String,
    pub split_sizes: SplitSizes,
    /// Certified lower bound on the metric (self-bounded) or the Hoeffding
    /// lower bound (baseline).
    pub metric_lower_bound: f64,
    pub vacuous: bool,
    pub certificate: Option<Certificate>,
    pub kl: Option<f64>,
    pub bound_set_estimate: Option<RiskEstimate>,
    pub hoeffding_lower: Option<f64>,
    pub baseline_holdout_metric: Option<f64>,
    /// Metric on the final holdout: stochastic (self-bounded) or
    /// deterministic (baseline).
    pub final_holdout_metric: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if report.format != REPORT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported report format `{}` (expected `{REPORT_FORMAT}`)",
                report.format
            )));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Wall-clock seconds per stage, reported beside (not inside) a run report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<StageTiming>,
}

impl StageTimings {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().stage(stage)?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// A self-bounded run with its learned distributions.
#[derive(Debug, Clone)]
pub struct SelfboundOutcome {
    pub report: RunReport,
    pub prior: PriorSpec,
    pub posterior: Vec<StochasticParamGroup>,
    pub timings: StageTimings,
}

/// Data and split shared by every stage of a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub data: Vec<LabeledExample>,
    pub splits: Splits,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    config.validate().stage("config")?;
    let data = config.generate_data().stage("gen-data")?;
    let splits = apply_split(data.len(), &config.split_plan()).stage("split")?;
    Ok(PreparedData { data, splits })
}

/// Learns the prior mean on the prefix set only.
pub fn prior_stage(config: &ExperimentConfig, prepared: &PreparedData) -> Result<PriorSpec> {
    let prefix = subset(&prepared.data, &prepared.splits.prefix);
    train_prior(&prefix, &config.architecture(), &config.hyperparams()).stage("train-prior")
}

/// Trains the posterior on the whole base set (prefix and bound set).
pub fn posterior_stage(
    config: &ExperimentConfig,
    prepared: &PreparedData,
    prior: &PriorSpec,
) -> Result<Vec<StochasticParamGroup>> {
    let base = subset(&prepared.data, &prepared.splits.base);
    let m = prepared.splits.bound.len() as u64;
    pbb_train(prior, &base, m, &config.architecture(), &config.hyperparams()).stage("train-posterior")
}

/// Certificate computed from the bound-set examples of `data` alone.
pub fn certify_stage(
    config: &ExperimentConfig,
    data: &[LabeledExample],
    bound_indices: &[usize],
    prior: &PriorSpec,
    posterior: &[StochasticParamGroup],
) -> Result<crate::evaluation::CertifiedPosterior> {
    let bound = subset(data, bound_indices);
    certify_posterior(
        posterior,
        prior,
        &config.architecture(),
        &bound,
        config.n_model_samples,
        config.delta,
        config.allocation,
        config.kl_inverse_tol,
        config.seed,
    )
    .stage("certify")
}

/// Stochastic metric (`1 −` certified loss) on the final holdout.
pub fn holdout_stage(
    config: &ExperimentConfig,
    prepared: &PreparedData,
    posterior: &[StochasticParamGroup],
) -> Result<f64> {
    let holdout = subset(&prepared.data, &prepared.splits.final_holdout);
    let mut rng = stream_rng(config.seed, Stream::HoldoutSamples);
    let est = monte_carlo_risk(
        posterior,
        &config.architecture(),
        &holdout,
        EvalLoss::Certified,
        config.n_model_samples,
        &mut rng,
    )
    .stage("holdout")?;
    Ok(1.0 - est.value)
}

/// Prior on the prefix set, posterior on the base set, certificate on the
/// bound set, and the stochastic metric on the untouched final holdout.
pub fn run_selfbounded(config: &ExperimentConfig) -> Result<SelfboundOutcome> {
    let mut timings = StageTimings::default();
    let prepared = timings.time("prepare", || prepare_data(config))?;
    let prior = timings.time("train-prior", || prior_stage(config, &prepared))?;
    let posterior = timings.time("train-posterior", || posterior_stage(config, &prepared, &prior))?;
    let certified = timings.time("certify", || {
        certify_stage(config, &prepared.data, &prepared.splits.bound, &prior, &posterior)
    })?;
    let final_holdout_metric = timings.time("holdout", || holdout_stage(config, &prepared, &posterior))?;
    let report = RunReport {
        format: REPORT_FORMAT.to_string(),
        kind: RunKind::Selfbound,
        config: config.clone(),
        metric_name: config.metric_name().to_string(),
        split_sizes: SplitSizes::from(&prepared.splits),
        metric_lower_bound: certified.certificate.metric_lower,
        vacuous: certified.certificate.vacuous,
        certificate: Some(certified.certificate),
        kl: Some(certified.kl),
        bound_set_estimate: Some(certified.estimate),
        hoeffding_lower: None,
        baseline_holdout_metric: None,
        final_holdout_metric,
    };
    Ok(SelfboundOutcome {
        report,
        prior,
        posterior,
        timings,
    })
}

/// A deterministic network trained on the baseline-train split for the same
/// total number of epochs, certified by Hoeffding on the baseline holdout.
pub fn run_baseline_hoeffding(config: &ExperimentConfig) -> Result<(RunReport, StageTimings)> {
    let mut timings = StageTimings::default();
    let prepared = timings.time("prepare", || prepare_data(config))?;
    let arch = config.architecture();
    let hyper = config.hyperparams();
    let net = timings.time("train-baseline", || {
        let train = subset(&prepared.data, &prepared.splits.baseline_train);
        let mut net = RealizedWeights::centers(&init_network(&arch, hyper.seed));
        let total = hyper.epochs_prior + hyper.epochs_posterior;
        train_deterministic(&mut net, &train, &arch, &hyper, 0..total, Stream::BaselineShuffle, "baseline")?;
        Ok(net)
    })?;
    let (holdout_metric, hoeffding, final_metric) = timings.time("evaluate", || {
        let holdout = subset(&prepared.data, &prepared.splits.baseline_holdout);
        let metric = 1.0 - deterministic_risk(&net, &arch, &holdout, EvalLoss::Certified)?;
        let lower = hoeffding_lower_bound(metric, holdout.len() as u64, config.delta)?;
        let fin = subset(&prepared.data, &prepared.splits.final_holdout);
        let final_metric = 1.0 - deterministic_risk(&net, &arch, &fin, EvalLoss::Certified)?;
        Ok((metric, lower, final_metric))
    })?;
    let report = RunReport {
        format: REPORT_FORMAT.to_string(),
        kind: RunKind::Baseline,
        config: config.clone(),
        metric_name: config.metric_name().to_string(),
        split_sizes: SplitSizes::from(&prepared.splits),
        metric_lower_bound: hoeffding,
        vacuous: hoeffding <= 0.0,
        certificate: None,
        kl: None,
        bound_set_estimate: None,
        hoeffding_lower: Some(hoeffding),
        baseline_holdout_metric: Some(holdout_metric),
        final_holdout_metric: final_metric,
    };
    Ok((report, timings))
}

/// One grid point of a prior-scale sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub sigma_p: f64,
    pub report: RunReport,
    /// Encoded prior mean network; identical across a sweep.
    pub prior_checkpoint: Vec<u8>,
}

/// One full self-bounded run per prior scale, all with the configured seed.
/// Points run in parallel; results come back in grid order.
pub fn run_sigma_sweep(config: &ExperimentConfig, sigma_grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if sigma_grid.is_empty() {
        return Err(Error::Config("sigma grid is empty".into()));
    }
    sigma_grid
        .par_iter()
        .map(|&sigma_p| {
            let point_config = ExperimentConfig {
                sigma_p,
                ..config.clone()
            };
            let outcome = run_selfbounded(&point_config)?;
            Ok(SweepPoint {
                sigma_p,
                prior_checkpoint: checkpoint::encode(&outcome.prior.mean_network()),
                report: outcome.report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcCell {
    pub param_count: u64,
    pub m: u64,
    pub vc_dim: f64,
    pub bound: f64,
    pub vacuous: bool,
}

/// VC generalization-gap bound for every `(W, m)` pair, row-major in `W`.
pub fn run_vc_curve(param_counts: &[u64], m_grid: &[u64], delta: f64) -> Result<Vec<VcCell>> {
    if param_counts.is_empty() || m_grid.is_empty() {
        return Err(Error::Config("VC grids must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(param_counts.len() * m_grid.len());
    for &param_count in param_counts {
        for &m in m_grid {
            let gap = vc_gap_bound(&VcBoundInput { param_count, m, delta })?;
            cells.push(VcCell {
                param_count,
                m,
                vc_dim: gap.vc_dim,
                bound: gap.bound,
                vacuous: gap.vacuous,
            });
        }
    }
    Ok(cells)
}

/// Writes VC cells as CSV (`inf` marks bounds that are undefined for `m ≤ d`).
pub fn write_vc_csv<W: std::io::Write>(w: W, cells: &[VcCell]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["param_count", "m", "vc_dim", "bound", "vacuous"])?;
    for c in cells {
        out.write_record([
            c.param_count.to_string(),
            c.m.to_string(),
            c.vc_dim.to_string(),
            c.bound.to_string(),
            c.vacuous.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes one sweep row per grid point.
pub fn write_sweep_csv<W: std::io::Write>(w: W, points: &[SweepPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sigma_p",
        "kl",
        "emp_risk_hat",
        "risk_upper",
        "metric_lower_bound",
        "final_holdout_metric",
        "vacuous",
    ])?;
    for p in points {
        let r = &p.report;
        let cert = r
            .certificate
            .as_ref()
            .ok_or_else(|| Error::Format("sweep report without certificate".into()))?;
        out.write_record([
            p.sigma_p.to_string(),
            r.kl.unwrap_or(f64::NAN).to_string(),
            cert.inputs.emp_risk_hat.to_string(),
            cert.risk_upper.to_string(),
            r.metric_lower_bound.to_string(),
            r.final_holdout_metric.to_string(),
            r.vacuous.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Side-by-side lower bounds of the two certification routes for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: Task,
    pub metric_name: String,
    pub selfbound_lower: f64,
    pub selfbound_holdout: f64,
    pub hoeffding_lower: f64,
    pub baseline_holdout: f64,
}

pub fn comparison_row(selfbound: &RunReport, baseline: &RunReport) -> Result<ComparisonRow> {
    if selfbound.kind != RunKind::Selfbound || baseline.kind != RunKind::Baseline {
        return Err(Error::Config("comparison needs one self-bounded and one baseline report".into()));
    }
    if selfbound.config.task != baseline.config.task {
        return Err(Error::Config("comparison reports are for different tasks".into()));
    }
    Ok(ComparisonRow {
        task: selfbound.config.task,
        metric_name: selfbound.metric_name.clone(),
        selfbound_lower: selfbound.metric_lower_bound,
        selfbound_holdout: selfbound.final_holdout_metric,
        hoeffding_lower: baseline.metric_lower_bound,
        baseline_holdout: baseline.final_holdout_metric,
    })
}

pub fn write_comparison_csv<W: std::io::Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "task",
        "metric",
        "selfbound_lower",
        "hoeffding_lower",
        "selfbound_final_holdout",
        "baseline_final_holdout",
    ])?;
    for r in rows {
        out.write_record([
            r.task.to_string(),
            r.metric_name.clone(),
            r.selfbound_lower.to_string(),
            r.hoeffding_lower.to_string(),
            r.selfbound_holdout.to_string(),
            r.baseline_holdout.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small classification run that trains in well under a second.
    fn quick(task: Task) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(task);
        match task {
            Task::Classify => {
                c.n_examples = 600;
                c.hidden = 8;
            }
            Task::Segment => {
                c.n_examples = 120;
                c.hidden = 16;
            }
        }
        c.epochs_prior = 2;
        c.epochs_posterior = 3;
        c.decay_every = 2;
        c.n_model_samples = 10;
        c
    }

    #[test]
    fn selfbound_report_is_reproducible() {
        let config = quick(Task::Classify);
        let a = run_selfbounded(&config).unwrap();
        let json = a.report.to_json().unwrap();
        let echoed = RunReport::from_json(&json).unwrap().config;
        let b = run_selfbounded(&echoed).unwrap();
        assert_eq!(json, b.report.to_json().unwrap());
        assert_eq!(checkpoint::encode(&a.posterior), checkpoint::encode(&b.posterior));
        assert_eq!(a.report.split_sizes.bound, 270);
        assert_eq!(a.report.bound_set_estimate.as_ref().unwrap().n_examples, 270);
    }

    #[test]
    fn certificate_ignores_prefix_and_final_holdout() {
        let config = quick(Task::Classify);
        let prepared = prepare_data(&config).unwrap();
        let prior = prior_stage(&config, &prepared).unwrap();
        let posterior = posterior_stage(&config, &prepared, &prior).unwrap();
        let clean = certify_stage(&config, &prepared.data, &prepared.splits.bound, &prior, &posterior).unwrap();

        let mut poisoned = prepared.data.clone();
        for &i in prepared.splits.prefix.iter().chain(&prepared.splits.final_holdout) {
            poisoned[i].x.fill(f64::NAN);
        }
        let again = certify_stage(&config, &poisoned, &prepared.splits.bound, &prior, &posterior).unwrap();
        assert_eq!(clean, again);
    }

    #[test]
    fn more_model_samples_shrink_the_sampling_slack() {
        let mut config = quick(Task::Classify);
        config.n_model_samples = 100;
        let few = run_selfbounded(&config).unwrap().report.certificate.unwrap();
        config.n_model_samples = 1000;
        let many = run_selfbounded(&config).unwrap().report.certificate.unwrap();
        assert!(many.epsilon_sample < few.epsilon_sample);
        let slack = |c: &Certificate| c.q_intermediate - c.inputs.emp_risk_hat;
        assert!(slack(&many) < slack(&few));
    }

    #[test]
    fn baseline_reports_hoeffding_bound() {
        let config = quick(Task::Classify);
        let (report, timings) = run_baseline_hoeffding(&config).unwrap();
        let holdout = report.baseline_holdout_metric.unwrap();
        let n = report.split_sizes.baseline_holdout as u64;
        assert_eq!(report.hoeffding_lower, Some(hoeffding_lower_bound(holdout, n, config.delta).unwrap()));
        assert!(report.metric_lower_bound <= holdout);
        assert!(timings.stages.iter().any(|t| t.stage == "train-baseline"));
    }

    #[test]
    fn segmentation_run_completes() {
        let outcome = run_selfbounded(&quick(Task::Segment)).unwrap();
        assert_eq!(outcome.report.metric_name, "dsc");
        assert!((0.0..=1.0).contains(&outcome.report.final_holdout_metric));
    }

    #[test]
    fn sweep_shares_the_prior_mean() {
        let config = quick(Task::Classify);
        let points = run_sigma_sweep(&config, &[0.005, 0.02, 0.05]).unwrap();
        assert_eq!(points.len(), 3);
        assert!(points.windows(2).all(|w| w[0].sigma_p < w[1].sigma_p));
        assert!(points.iter().all(|p| p.prior_checkpoint == points[0].prior_checkpoint));
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &points).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        assert!(run_sigma_sweep(&config, &[]).is_err());
    }

    #[test]
    fn stage_failures_are_tagged() {
        let mut config = quick(Task::Classify);
        config.n_examples = 5;
        let err = run_selfbounded(&config).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "split", .. }), "{err}");
        let mut config = quick(Task::Classify);
        config.lr = 1e300;
        config.epochs_prior = 3;
        let err = run_selfbounded(&config).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "train-prior", .. }), "{err}");
    }

    #[test]
    fn vc_table_shape_and_csv() {
        let cells = run_vc_curve(&[100, 11_000_000], &[1_000, 1_000_000], 0.05).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(!cells[1].vacuous);
        assert!(cells[2].vacuous && cells[2].bound.is_infinite());
        let mut buf = Vec::new();
        write_vc_csv(&mut buf, &cells).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains(",inf,true"));
        assert!(run_vc_curve(&[], &[1], 0.05).is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let config = ExperimentConfig::defaults(Task::Segment);
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), config);
        assert!(serde_json::from_str::<ExperimentConfig>(&text.replace("\"seed\"", "\"sed\"")).is_err());
        assert!(RunReport::from_json("{\"format\":\"other\"}").is_err());
    }

    #[test]
    fn comparison_requires_matching_reports() {
        let config = quick(Task::Classify);
        let sb = run_selfbounded(&config).unwrap().report;
        let (bl, _) = run_baseline_hoeffding(&config).unwrap();
        let row = comparison_row(&sb, &bl).unwrap();
        assert_eq!(row.selfbound_lower, sb.metric_lower_bound);
        assert_eq!(row.hoeffding_lower, bl.metric_lower_bound);
        assert!(comparison_row(&bl, &sb).is_err());
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &[row]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("task,metric"));
    }
}
