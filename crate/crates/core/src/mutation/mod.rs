//! Mutation analysis: data-file and code mutants, and scoring of an
//! assertion suite against them.

mod code;
mod data;
mod score;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use code::{mutate_code, CodeMutant};
pub use data::{detect_label_column, mutate_table, DataMutation};
pub use score::{
    default_property_kind, generate_mutants, materialize, run_mutant, score, score_mutants, verdict, Mutant,
    MutantOutcome, MUTANT_RECORD,
    MutantScore, MutationReport, RunVerdict, Skipped,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    AddOutliers,
    RepeatData,
    AddNulls,
    ModifyLabels,
    DataShift,
    RemoveZeroGrad,
    ModifyHyperparams,
    RemoveHyperparams,
    SwapApis,
    RemoveLayers,
}

impl Operator {
    pub const ALL: [Operator; 10] = [
        Operator::AddOutliers,
        Operator::RepeatData,
        Operator::AddNulls,
        Operator::ModifyLabels,
        Operator::DataShift,
        Operator::RemoveZeroGrad,
        Operator::ModifyHyperparams,
        Operator::RemoveHyperparams,
        Operator::SwapApis,
        Operator::RemoveLayers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::AddOutliers => "AddOutliers",
            Operator::RepeatData => "RepeatData",
            Operator::AddNulls => "AddNulls",
            Operator::ModifyLabels => "ModifyLabels",
            Operator::DataShift => "DataShift",
            Operator::RemoveZeroGrad => "RemoveZeroGrad",
            Operator::ModifyHyperparams => "ModifyHyperparams",
            Operator::RemoveHyperparams => "RemoveHyperparams",
            Operator::SwapApis => "SwapApis",
            Operator::RemoveLayers => "RemoveLayers",
        }
    }

    pub fn is_data(self) -> bool {
        matches!(
            self,
            Operator::AddOutliers
                | Operator::RepeatData
                | Operator::AddNulls
                | Operator::ModifyLabels
                | Operator::DataShift
        )
    }

    /// Kebab-case form used in mutant ids.
    pub fn slug(self) -> String {
        let mut out = String::new();
        for (i, c) in self.as_str().chars().enumerate() {
            if c.is_ascii_uppercase() && i > 0 {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
        }
        out
    }

    /// Parses `all` or a comma-separated list of operator names.
    pub fn parse_list(s: &str) -> Result<Vec<Operator>, Error> {
        if s.trim() == "all" {
            return Ok(Operator::ALL.to_vec());
        }
        s.split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<_>, _>>()
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Operator::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s) || o.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown mutation operator {s:?}")))
    }
}

/// Corruption rates and heuristics for the data operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationRates {
    pub outlier_row_rate: f64,
    pub outlier_factor: (f64, f64),
    pub repeat_row_rate: f64,
    pub null_column_rate: f64,
    pub null_cell_rate: f64,
    pub label_row_rate: f64,
    pub label_names: Vec<String>,
}

impl Default for MutationRates {
    fn default() -> Self {
        MutationRates {
            outlier_row_rate: 0.05,
            outlier_factor: (10.0, 100.0),
            repeat_row_rate: 0.10,
            null_column_rate: 0.10,
            null_cell_rate: 0.05,
            label_row_rate: 0.10,
            label_names: ["label", "labels", "target", "class", "y", "survived", "outcome"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Provenance record written as `mutant.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutantSpec {
    pub mutant_id: String,
    pub operator: Operator,
    pub seed: u64,
    pub site: String,
    pub workspace: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_names() {
        assert_eq!(Operator::RemoveZeroGrad.slug(), "remove-zero-grad");
        assert_eq!("swap-apis".parse::<Operator>().unwrap(), Operator::SwapApis);
        assert_eq!("AddNulls".parse::<Operator>().unwrap(), Operator::AddNulls);
        assert_eq!(Operator::parse_list("all").unwrap().len(), 10);
        assert_eq!(
            Operator::parse_list("AddNulls, DataShift").unwrap(),
            vec![Operator::AddNulls, Operator::DataShift]
        );
        assert!(Operator::parse_list("Nope").is_err());
    }
}
