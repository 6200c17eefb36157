//! Training under an equal pairs budget, the objective matrix, concept sweeps and filtered runs.

mod config;
mod experiments;
mod train;

pub use config::{Freeze, LedgerPolicy, TrainConfig};
pub use experiments::{
    half_of, run_ablation_matrix, run_concept_sweep, run_filtered, AblationRow, AblationTable, ComparisonRow,
    ConceptPoint, ConceptSweep, FilterRun, Stat,
};
pub use train::{
    check_compatible, train, train_with_hook, ComputeLedger, EvalPoint, RunRecord, Trainer, FINAL_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_FILE, RUN_RECORD_FILE,
};

use crate::eval::EvalError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::toyworld::ToyError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure at step {step}: {source}")]
    Diverged { step: u64, source: NumericsError },
    #[error("gradient check failed for {0}")]
    GradientMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("internal: {0}")]
    Internal(String),
}

impl HarnessError {
    /// Tags a numeric failure with the step it happened at.
    pub(crate) fn at_step(self, step: u64) -> Self {
        match self.numeric_source() {
            Some(source) => HarnessError::Diverged { step, source },
            None => self,
        }
    }

    fn numeric_source(&self) -> Option<NumericsError> {
        let n = match self {
            HarnessError::Numerics(n) | HarnessError::Loss(LossError::Numerics(n)) => n,
            HarnessError::Model(ModelError::Numerics(n)) => n,
            _ => return None,
        };
        matches!(n, NumericsError::NonFinite { .. } | NumericsError::NanGradient { .. }).then(|| n.clone())
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, HarnessError::Diverged { .. } | HarnessError::GradientMismatch(_)) || self.numeric_source().is_some()
    }

    /// Process exit code: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            3
        } else {
            2
        }
    }
}
