//! JSON experiment description and the two built-in presets.
//!
//! Matrices are row-major nested arrays. Unknown keys are rejected and parse
//! errors carry the JSON path of the offending value.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChanceConstraintSpec, DisturbanceLaw, LtiSystem, Polytope, QuadraticStageCost, RiskAllocation};
use crate::prs::{PrsMode, PrsShape, PrsSpec};
use crate::smpc::{ControllerSetup, ControllerVariant, SmpcConfig, TerminalSpec};

pub const PRESET_NAMES: [&str; 2] = ["table1", "appendixB"];

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub cost: CostSection,
    pub constraints: ConstraintSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub prs: PrsSpec,
    pub terminal: TerminalSection,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    pub sigma_w: Matrix,
    #[serde(default = "default_law")]
    pub disturbance: DisturbanceLaw,
}

fn default_law() -> DisturbanceLaw {
    DisturbanceLaw::Gaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(rename = "Q")]
    pub q_mat: Matrix,
    #[serde(default)]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r_mat: Matrix,
    #[serde(default)]
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum Allocation {
    #[default]
    Joint,
    PerRow(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// Rows act on `(x, u)`.
    #[serde(rename = "H")]
    pub h_mat: Matrix,
    pub h: Vec<f64>,
    pub p: f64,
    #[serde(default)]
    pub allocation: Allocation,
}

/// One controller or the full comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantSelection {
    All,
    One(ControllerVariant),
}

impl VariantSelection {
    pub fn variants(self) -> Vec<ControllerVariant> {
        match self {
            VariantSelection::All => ControllerVariant::TABLE_ORDER.to_vec(),
            VariantSelection::One(v) => vec![v],
        }
    }
}

impl FromStr for VariantSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(VariantSelection::All)
        } else {
            s.parse().map(VariantSelection::One)
        }
    }
}

impl fmt::Display for VariantSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSelection::All => f.write_str("all"),
            VariantSelection::One(v) => v.fmt(f),
        }
    }
}

impl Serialize for VariantSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariantSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub variant: VariantSelection,
    #[serde(rename = "K")]
    pub k: Matrix,
    #[serde(rename = "K_lqr", default, skip_serializing_if = "Option::is_none")]
    pub k_lqr: Option<Matrix>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub lambda_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalSection {
    Origin,
    HalfspaceFromTightening {
        #[serde(rename = "Kf")]
        kf: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(rename = "T")]
    pub t: usize,
    pub rollouts: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "out".into(),
        }
    }
}

fn matrix(name: &str, rows: &Matrix) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::config(format!("{name} must be a non-empty matrix")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::config(format!("{name} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector_or_zeros(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    match v.len() {
        0 => Ok(DVector::zeros(len)),
        l if l == len => Ok(DVector::from_column_slice(v)),
        l => Err(Error::dim(format!("{name} has length {l}, expected {len}"))),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(table1()),
            "appendixB" => Ok(appendix_b()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn variants(&self) -> Vec<ControllerVariant> {
        self.controller.variant.variants()
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.simulation.x0)
    }

    /// Builds and validates everything except the variant.
    pub fn controller_setup(&self) -> Result<ControllerSetup> {
        let sys = LtiSystem::new(
            matrix("A", &self.system.a)?,
            matrix("B", &self.system.b)?,
            matrix("sigma_w", &self.system.sigma_w)?,
            self.system.disturbance,
        )?;
        let (n, m) = (sys.state_dim(), sys.input_dim());
        let cost = QuadraticStageCost::new(
            matrix("Q", &self.cost.q_mat)?,
            vector_or_zeros("q", &self.cost.q, n)?,
            matrix("R", &self.cost.r_mat)?,
            vector_or_zeros("r", &self.cost.r, m)?,
        )?;
        cost.check_dims(&sys)?;
        let h_mat = matrix("H", &self.constraints.h_mat)?;
        if self.constraints.h.len() != h_mat.nrows() {
            return Err(Error::dim("h must have one entry per row of H"));
        }
        let set = Polytope::new(h_mat, DVector::from_column_slice(&self.constraints.h))?;
        let allocation = match &self.constraints.allocation {
            Allocation::Joint => RiskAllocation::Joint,
            Allocation::PerRow(levels) => RiskAllocation::PerRow(levels.clone()),
        };
        let chance = ChanceConstraintSpec::new(set, self.constraints.p, allocation)?;
        let terminal = match &self.terminal {
            TerminalSection::Origin => TerminalSpec::Origin,
            TerminalSection::HalfspaceFromTightening { kf } => {
                TerminalSpec::HalfspaceFromTightening { kf: matrix("Kf", kf)? }
            }
        };
        if self.simulation.x0.len() != n {
            return Err(Error::dim(format!(
                "x0 has length {}, expected {n}",
                self.simulation.x0.len()
            )));
        }
        Ok(ControllerSetup {
            sys,
            cost,
            chance,
            tube_gain: matrix("K", &self.controller.k)?,
            lqr_gain: self.controller.k_lqr.as_ref().map(|k| matrix("K_lqr", k)).transpose()?,
            terminal,
            horizon: self.controller.n,
            prs: self.prs,
            lambda_penalty: self.controller.lambda_penalty,
            tightening_steps: self.simulation.t + self.controller.n,
        })
    }

    pub fn smpc_config(&self, variant: ControllerVariant) -> Result<SmpcConfig> {
        SmpcConfig::new(&self.controller_setup()?, variant)
    }
}

fn scalar(v: f64) -> Matrix {
    vec![vec![v]]
}

fn table1() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemSection {
            a: scalar(1.0),
            b: scalar(1.0),
            sigma_w: scalar(1.0),
            disturbance: DisturbanceLaw::Gaussian,
        },
        cost: CostSection {
            q_mat: scalar(1.0),
            q: vec![0.0],
            r_mat: scalar(0.0),
            r: vec![0.0],
        },
        constraints: ConstraintSection {
            h_mat: vec![vec![0.0, 1.0], vec![0.0, -1.0]],
            h: vec![1.0, 1.0],
            p: 0.8061,
            allocation: Allocation::Joint,
        },
        controller: ControllerSection {
            variant: VariantSelection::All,
            k: scalar(-0.5),
            k_lqr: Some(scalar(-1.0)),
            n: 10,
            lambda_penalty: 0.0,
        },
        prs: PrsSpec::default(),
        terminal: TerminalSection::Origin,
        simulation: SimulationSection {
            t: 40,
            rollouts: 10_000,
            seed: 1,
            x0: vec![0.0],
        },
        output: OutputSection {
            directory: "out/table1".into(),
        },
    }
}

fn appendix_b() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemSection {
            a: scalar(0.75),
            b: scalar(1.0),
            sigma_w: scalar(1.0),
            disturbance: DisturbanceLaw::Gaussian,
        },
        cost: CostSection {
            q_mat: scalar(0.0),
            q: vec![0.0],
            r_mat: scalar(0.0),
            r: vec![1.0],
        },
        constraints: ConstraintSection {
            h_mat: vec![vec![-1.0, 0.0]],
            h: vec![2.0],
            p: 0.814,
            allocation: Allocation::Joint,
        },
        controller: ControllerSection {
            variant: VariantSelection::One(ControllerVariant::Proposed),
            k: scalar(0.0),
            k_lqr: None,
            n: 10,
            lambda_penalty: 0.0,
        },
        prs: PrsSpec {
            mode: PrsMode::GaussianExact,
            shape: PrsShape::SymmetricPerRow,
            stationary: true,
        },
        terminal: TerminalSection::HalfspaceFromTightening { kf: scalar(0.0) },
        simulation: SimulationSection {
            t: 40,
            rollouts: 10_000,
            seed: 1,
            x0: vec![0.0],
        },
        output: OutputSection {
            directory: "out/appendixB".into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_back() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("table2").is_err());
    }

    #[test]
    fn unknown_key_reports_path() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::preset("table1").unwrap().to_json()).unwrap();
        v["controller"]["horizon"] = 5.into();
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(Error::Parse { path, .. }) => assert!(path.starts_with("controller"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_matrix_rejected() {
        let mut cfg = ExperimentConfig::preset("table1").unwrap();
        cfg.constraints.h_mat = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(cfg.controller_setup().is_err());
    }

    #[test]
    fn variant_selection_strings() {
        assert_eq!("all".parse::<VariantSelection>().unwrap(), VariantSelection::All);
        assert_eq!(
            "case-min".parse::<VariantSelection>().unwrap(),
            VariantSelection::One(ControllerVariant::CaseMin)
        );
        assert!("best".parse::<VariantSelection>().is_err());
    }

    #[test]
    fn presets_build_every_variant() {
        let t1 = ExperimentConfig::preset("table1").unwrap();
        for v in t1.variants() {
            t1.smpc_config(v).unwrap();
        }
        let b = ExperimentConfig::preset("appendixB").unwrap();
        for v in [ControllerVariant::Proposed, ControllerVariant::Indirect] {
            b.smpc_config(v).unwrap();
        }
    }
}
