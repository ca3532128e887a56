//! Analysis configuration file (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use selection_bounds::constraints::LevelConvention;
use selection_bounds::parametric::SignConstraint;
use selection_bounds::WeightBox;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandName {
    Mean,
    Ols,
    Iv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandConfig {
    pub kind: EstimandName,
    pub y: String,
    #[serde(default)]
    pub x: Option<String>,
    #[serde(default)]
    pub z: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_resamples() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintItem {
    ResponseRate {
        r: f64,
        #[serde(default = "one")]
        share: f64,
    },
    CovariateMean {
        column: String,
        qbar: f64,
        #[serde(default = "one")]
        share: f64,
    },
    /// `E[sum_c coefficients[c] * row[c] + intercept] <= 0` under the weights.
    LinearMoment {
        coefficients: BTreeMap<String, f64>,
        #[serde(default)]
        intercept: f64,
        #[serde(default = "one")]
        share: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ConstraintItem {
    pub fn share(&self) -> f64 {
        match self {
            ConstraintItem::ResponseRate { share, .. }
            | ConstraintItem::CovariateMean { share, .. }
            | ConstraintItem::LinearMoment { share, .. } => *share,
        }
    }

    fn columns(&self) -> Vec<String> {
        match self {
            ConstraintItem::ResponseRate { .. } => vec![],
            ConstraintItem::CovariateMean { column, .. } => vec![column.clone()],
            ConstraintItem::LinearMoment { coefficients, .. } => coefficients.keys().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default)]
    pub convention: LevelConvention,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default = "default_multistarts")]
    pub multistarts: usize,
    /// Number of interior splits scanned by `tune-split`.
    #[serde(default = "default_split_points")]
    pub split_points: usize,
    pub items: Vec<ConstraintItem>,
}

fn default_multistarts() -> usize {
    16
}

fn default_split_points() -> usize {
    10
}

impl ConstraintsConfig {
    /// `(alpha1, alpha2)` as significance levels.
    pub fn significance(&self) -> Result<(f64, f64), CliError> {
        let a1 = self
            .convention
            .significance(self.alpha1)
            .map_err(|e| CliError::config("constraints.alpha1", e.to_string()))?;
        let a2 = self
            .convention
            .significance(self.alpha2)
            .map_err(|e| CliError::config("constraints.alpha2", e.to_string()))?;
        Ok((a1, a2))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricConfig {
    #[serde(default)]
    pub link: selection_bounds::parametric::Link,
    pub columns: Vec<String>,
    #[serde(default)]
    pub signs: Option<Vec<SignConstraint>>,
    #[serde(default = "default_parametric_starts")]
    pub multistarts: usize,
}

fn default_parametric_starts() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    /// Round every used column to a multiple of this step before collapsing.
    #[serde(default)]
    pub bin_continuous: Option<f64>,
    /// Values of the estimand to test against the identified interval.
    #[serde(default)]
    pub test_values: Vec<f64>,
    pub estimand: EstimandConfig,
    #[serde(rename = "box")]
    pub weight_box: BoxConfig,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub constraints: Option<ConstraintsConfig>,
    #[serde(default)]
    pub parametric: Option<ParametricConfig>,
}

fn default_alpha() -> f64 {
    0.05
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            CliError::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weight_box(&self) -> Result<WeightBox, CliError> {
        WeightBox::new(self.weight_box.a, self.weight_box.b).map_err(|e| CliError::config("box", e.to_string()))
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bx = self.weight_box()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::config("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(step) = self.bin_continuous {
            if !(step > 0.0 && step.is_finite()) {
                return Err(CliError::config("bin_continuous", format!("must be positive, got {step}")));
            }
        }
        let e = &self.estimand;
        match e.kind {
            EstimandName::Mean => {}
            EstimandName::Ols if e.x.is_none() => return Err(CliError::config("estimand.x", "required for ols")),
            EstimandName::Iv if e.x.is_none() => return Err(CliError::config("estimand.x", "required for iv")),
            EstimandName::Iv if e.z.is_none() => return Err(CliError::config("estimand.z", "required for iv")),
            _ => {}
        }
        if let Some(b) = &self.bootstrap {
            if b.resamples < 2 {
                return Err(CliError::config("bootstrap.resamples", "at least 2 resamples are required"));
            }
        }
        if let Some(c) = &self.constraints {
            let (a1, a2) = c.significance()?;
            if !(a1 > 0.0 && a2 > 0.0 && a1 + a2 < 1.0) {
                return Err(CliError::config("constraints", format!("need alpha1, alpha2 > 0 with sum < 1, got {a1}, {a2}")));
            }
            if c.items.is_empty() {
                return Err(CliError::config("constraints.items", "at least one constraint is required"));
            }
            if c.multistarts == 0 {
                return Err(CliError::config("constraints.multistarts", "must be positive"));
            }
            if c.split_points == 0 {
                return Err(CliError::config("constraints.split_points", "must be positive"));
            }
            for (i, item) in c.items.iter().enumerate() {
                let field = format!("constraints.items[{i}]");
                if !(item.share() > 0.0 && item.share().is_finite()) {
                    return Err(CliError::config(format!("{field}.share"), "must be positive"));
                }
                match item {
                    ConstraintItem::ResponseRate { r, .. } => {
                        let inv = 1.0 / r;
                        if !(*r > 0.0 && *r <= 1.0) || inv < bx.lo() - 1e-12 || inv > bx.hi() + 1e-12 {
                            return Err(CliError::config(
                                format!("{field}.r"),
                                format!("1/r = {inv} lies outside the weight range [{}, {}]", bx.lo(), bx.hi()),
                            ));
                        }
                    }
                    ConstraintItem::CovariateMean { qbar, .. } if !qbar.is_finite() => {
                        return Err(CliError::config(format!("{field}.qbar"), "must be finite"));
                    }
                    ConstraintItem::LinearMoment { coefficients, intercept, .. } => {
                        if coefficients.is_empty() || coefficients.values().chain([intercept]).any(|v| !v.is_finite()) {
                            return Err(CliError::config(format!("{field}.coefficients"), "need finite coefficients"));
                        }
                    }
                    _ => {}
                }
            }
        }
        if let Some(p) = &self.parametric {
            if let Some(signs) = &p.signs {
                if signs.len() != p.columns.len() {
                    return Err(CliError::config(
                        "parametric.signs",
                        format!("expected {} entries, got {}", p.columns.len(), signs.len()),
                    ));
                }
            }
            if p.multistarts == 0 {
                return Err(CliError::config("parametric.multistarts", "must be positive"));
            }
        }
        Ok(())
    }

    /// Estimand columns in `(z, x, y)` order, as present.
    pub fn estimand_columns(&self) -> Vec<String> {
        let e = &self.estimand;
        match e.kind {
            EstimandName::Mean => vec![e.y.clone()],
            EstimandName::Ols => vec![e.x.clone().unwrap_or_default(), e.y.clone()],
            EstimandName::Iv => vec![e.z.clone().unwrap_or_default(), e.x.clone().unwrap_or_default(), e.y.clone()],
        }
    }

    /// Every column the analysis reads, without duplicates, estimand first.
    pub fn columns(&self) -> Vec<String> {
        let mut out = self.estimand_columns();
        let extra = self
            .constraints
            .iter()
            .flat_map(|c| c.items.iter().flat_map(|i| i.columns()))
            .chain(self.parametric.iter().flat_map(|p| p.columns.iter().cloned()));
        for c in extra {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }
}
