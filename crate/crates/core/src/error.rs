use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("scale at index {index} is not strictly positive ({value})")]
    NonPositiveScale { index: usize, value: f64 },

    #[error("parameter groups do not align: {0}")]
    GroupMismatch(String),

    #[error("point-mass group `{0}` differs between posterior and prior; KL is infinite")]
    InfiniteKl(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("training diverged in {stage} at epoch {epoch}: loss = {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, domain: &'static str) -> Self {
        Error::Domain {
            name,
            value,
            domain,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            found,
        }
    }
}

/// Attaches a stage tag to errors raised by one step of an experiment pipeline.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
