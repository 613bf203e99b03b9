//! Glue between raw data and the solver: standardization, the optional AFT
//! transform, and mapping fitted effects back to original units.

use serde::{Deserialize, Serialize};

use crate::aft::{prepare_aft, AftTransform};
use crate::data::{standardize, Dataset, FullEffects, Scaling, SparsityPattern, StandardizePolicy};
use crate::error::Result;

/// Raw data rewritten as the least-squares problem the solver sees.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub ls: Dataset,
    pub scaling: Scaling,
    pub aft: Option<AftTransform>,
}

impl PreparedData {
    pub fn new(raw: &Dataset) -> Result<Self> {
        Self::with_policy(raw, StandardizePolicy::for_dataset(raw))
    }

    pub fn with_policy(raw: &Dataset, policy: StandardizePolicy) -> Result<Self> {
        let (std, scaling) = standardize(raw, policy)?;
        if std.is_survival() {
            let t = prepare_aft(&std)?;
            Ok(Self { ls: t.dataset.clone(), scaling, aft: Some(t) })
        } else {
            Ok(Self { ls: std, scaling, aft: None })
        }
    }

    pub fn is_survival(&self) -> bool {
        self.aft.is_some()
    }

    /// Converts effects estimated on `self.ls` into an original-unit model.
    /// `pattern` is the selection reported by the estimator.
    pub fn to_model(&self, effects: &FullEffects, pattern: SparsityPattern) -> FittedModel {
        let intercept_std = match &self.aft {
            Some(t) => t.intercept(effects),
            None => self.scaling.y_center,
        };
        let (intercept, original) = self.scaling.to_original(effects, intercept_std);
        FittedModel { intercept, effects: original, pattern }
    }
}

/// A fitted model in the units of the raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub intercept: f64,
    pub effects: FullEffects,
    /// Selection on the fitting scale (interactions follow the estimator's
    /// own zero pattern, not the back-transformed one).
    pub pattern: SparsityPattern,
}

impl FittedModel {
    /// Predicted response (log-time for survival data) for raw rows.
    pub fn predict(&self, raw: &Dataset) -> Vec<f64> {
        raw.linear_predictor(&self.effects).into_iter().map(|v| v + self.intercept).collect()
    }
}
