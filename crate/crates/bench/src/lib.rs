//! Fixtures shared by the benchmarks.

use pbcert::divergence::PriorSpec;
use pbcert::experiment::ExperimentConfig;
use pbcert::stochnet::NetworkArchitecture;
use pbcert::training::init_network;
use pbcert::{LabeledExample, StochasticParamGroup, Task};

/// A freshly initialised network for `task` with its prior at the default
/// scale, together with a slice of generated data.
pub struct Fixture {
    pub arch: NetworkArchitecture,
    pub prior: PriorSpec,
    pub posterior: Vec<StochasticParamGroup>,
    pub data: Vec<LabeledExample>,
}

pub fn fixture(task: Task, n_examples: usize) -> Fixture {
    let mut config = ExperimentConfig::defaults(task);
    config.n_examples = n_examples;
    let arch = config.architecture();
    let mean = init_network(&arch, config.seed);
    let prior = PriorSpec::from_mean_network(&mean, NetworkArchitecture::is_stochastic_group, config.sigma_p)
        .expect("default sigma_p is valid");
    let posterior = prior.initial_posterior();
    let data = config.generate_data().expect("default data settings are valid");
    Fixture { arch, prior, posterior, data }
}
