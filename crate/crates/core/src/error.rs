use thiserror::Error;

use crate::distributions::DistributionError;
use crate::effects::Constraint;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PplError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("site `{site}`: {source}")]
    Site {
        site: String,
        source: DistributionError,
    },
    #[error("site names must be non-empty")]
    EmptySiteName,
    #[error("duplicate site `{name}` in one execution")]
    DuplicateSite { name: String },
    #[error("cannot condition param site `{name}`")]
    ConditionedParam { name: String },
    #[error("param `{name}` already registered as {existing:?}, requested {requested:?}")]
    ConstraintMismatch {
        name: String,
        existing: Constraint,
        requested: Constraint,
    },
    #[error("param `{name}`: positive constraint needs a positive init, got {value}")]
    NonPositiveInit { name: String, value: f64 },
    #[error("scale factor must be positive and finite, got {factor}")]
    InvalidScale { factor: f64 },
    #[error("sample site `{name}` has no recorded log_prob")]
    MissingLogProb { name: String },
    #[error("model/guide mismatch: {0}")]
    ModelGuideMismatch(MatchReport),
    #[error("non-finite {what}{}", site.as_ref().map(|s| format!(" at site `{s}`")).unwrap_or_default())]
    NonFinite { what: String, site: Option<String> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dynamic structure: {0}")]
    DynamicStructure(String),
    #[error("latent site `{name}` has bounded or discrete support ({dist}); HMC needs unbounded continuous latents")]
    ConstrainedLatent { name: String, dist: &'static str },
    #[error("importance weights are all zero")]
    DegenerateWeights,
}

/// Offending site names from a model/guide comparison.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchReport {
    pub missing_in_guide: Vec<String>,
    pub extra_in_guide: Vec<String>,
    /// `(name, model shape, guide shape)`
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl MatchReport {
    pub fn is_empty(&self) -> bool {
        self.missing_in_guide.is_empty() && self.extra_in_guide.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl std::fmt::Display for MatchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.missing_in_guide.is_empty() {
            parts.push(format!("missing guide sites {:?}", self.missing_in_guide));
        }
        if !self.extra_in_guide.is_empty() {
            parts.push(format!("extra guide sites {:?}", self.extra_in_guide));
        }
        for (name, m, g) in &self.shape_mismatch {
            parts.push(format!("site `{name}` shape {m:?} (model) vs {g:?} (guide)"));
        }
        f.write_str(&parts.join("; "))
    }
}

pub type Result<T> = std::result::Result<T, PplError>;
