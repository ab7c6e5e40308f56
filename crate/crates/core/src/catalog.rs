//! Declarative catalog of tracked ML APIs.
//!
//! The catalog is a single JSON document:
//!
//! ```json
//! {
//!   "version": 1,
//!   "entries": [
//!     {"name": "pandas.read_csv", "category": "DatasetInit",
//!      "required_params": [], "value_kind": "table"}
//!   ],
//!   "swap_groups": [["sklearn.preprocessing.StandardScaler",
//!                    "sklearn.preprocessing.MinMaxScaler"]],
//!   "seed_parameters": ["random_state", "seed"]
//! }
//! ```
//!
//! Entry names are either fully qualified (`pandas.read_csv`) or method
//! patterns (`*.fit`). Unknown fields are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("default_catalog.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    DatasetInit,
    DatasetTransform,
    ModelInit,
    MetricCall,
    TrainCall,
    LayerInit,
    OptimizerCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PropertyKind {
    Dataset,
    ModelArch,
    ModelPerf,
}

impl PropertyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PropertyKind::Dataset => "Dataset",
            PropertyKind::ModelArch => "ModelArch",
            PropertyKind::ModelPerf => "ModelPerf",
        }
    }
}

impl std::fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PropertyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "Dataset" => Ok(PropertyKind::Dataset),
            "ModelArch" => Ok(PropertyKind::ModelArch),
            "ModelPerf" => Ok(PropertyKind::ModelPerf),
            other => Err(format!("unknown property kind {other:?}")),
        }
    }
}

/// What a category is used for: producing a property, or feeding a mutator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Property(PropertyKind),
    /// Training and inference calls: hyperparameter sites, and inference
    /// results feed custom-metric lineage.
    Training,
    /// Layer constructors: RemoveLayers and hyperparameter sites.
    Layer,
    /// Optimizer construction and stepping: RemoveZeroGrad and learning rates.
    Optimizer,
}

impl Category {
    pub fn role(self) -> Role {
        match self {
            Category::DatasetInit | Category::DatasetTransform => {
                Role::Property(PropertyKind::Dataset)
            }
            Category::ModelInit => Role::Property(PropertyKind::ModelArch),
            Category::MetricCall => Role::Property(PropertyKind::ModelPerf),
            Category::TrainCall => Role::Training,
            Category::LayerInit => Role::Layer,
            Category::OptimizerCall => Role::Optimizer,
        }
    }

    pub fn property_kind(self) -> Option<PropertyKind> {
        match self.role() {
            Role::Property(k) => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Table,
    Model,
    Scalar,
    Array,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiEntry {
    pub name: String,
    pub category: Category,
    #[serde(default)]
    pub required_params: Vec<String>,
    pub value_kind: ValueKind,
}

impl ApiEntry {
    /// Last dotted segment, i.e. the callable's own name.
    pub fn callable(&self) -> &str {
        last_segment(&self.name)
    }

    /// Module part of a qualified name; `None` for method patterns.
    pub fn module(&self) -> Option<&str> {
        if self.is_method_pattern() {
            return None;
        }
        self.name.rsplit_once('.').map(|(m, _)| m)
    }

    pub fn is_method_pattern(&self) -> bool {
        self.name.starts_with("*.")
    }

    /// Inference calls produce predictions rather than a fitted model.
    pub fn is_inference(&self) -> bool {
        self.category == Category::TrainCall && self.value_kind != ValueKind::Model
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiCatalog {
    pub version: u32,
    pub entries: Vec<ApiEntry>,
    #[serde(default)]
    pub swap_groups: Vec<Vec<String>>,
    #[serde(default)]
    pub seed_parameters: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum MatchQuality {
    Fallback,
    Suffix,
    Exact,
}

impl ApiCatalog {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN.as_bytes()).expect("built-in catalog is valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let catalog: ApiCatalog =
            serde_json::from_slice(bytes).map_err(|e| Error::CatalogSchema(e.to_string()))?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let mut by_name = BTreeMap::new();
        for e in &self.entries {
            if e.name.is_empty() || e.name.split('.').any(str::is_empty) && !e.is_method_pattern() {
                return Err(Error::CatalogSchema(format!("bad entry name {:?}", e.name)));
            }
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(Error::CatalogSchema(format!("duplicate entry {:?}", e.name)));
            }
        }
        for (i, group) in self.swap_groups.iter().enumerate() {
            if group.len() < 2 {
                return Err(Error::CatalogSchema(format!(
                    "swap group {i} needs at least two members"
                )));
            }
            let mut cats = BTreeSet::new();
            for member in group {
                let entry = by_name.get(member.as_str()).ok_or_else(|| {
                    Error::CatalogSchema(format!("swap group {i}: unknown entry {member:?}"))
                })?;
                cats.insert(entry.category);
            }
            if cats.len() != 1 {
                return Err(Error::CatalogSchema(format!(
                    "swap group {i} mixes categories"
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ApiEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Finds the entry for a call path. `resolved` tells whether the path's
    /// head came from an import binding; unresolved receivers fall back to
    /// matching the callable name alone.
    pub fn lookup(&self, call_path: &str, resolved: bool) -> Option<&ApiEntry> {
        let mut best: Option<(MatchQuality, &ApiEntry)> = None;
        for entry in &self.entries {
            let Some(q) = match_quality(&entry.name, call_path, resolved) else {
                continue;
            };
            if best.map_or(true, |(b, _)| q > b) {
                best = Some((q, entry));
            }
        }
        best.map(|(_, e)| e)
    }

    /// Other members of the swap group containing `name`.
    pub fn swap_alternatives(&self, name: &str) -> Vec<&ApiEntry> {
        self.swap_groups
            .iter()
            .filter(|g| g.iter().any(|m| m == name))
            .flat_map(|g| g.iter().filter(|m| *m != name))
            .filter_map(|m| self.entry(m))
            .collect()
    }

    pub fn is_seed_parameter(&self, keyword: &str) -> bool {
        self.seed_parameters.iter().any(|p| p == keyword)
    }
}

pub fn load_catalog(path: &Path) -> Result<ApiCatalog> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ApiCatalog::from_json(&bytes)
}

fn last_segment(path: &str) -> &str {
    path.rsplit('.').next().unwrap_or(path)
}

fn match_quality(pattern: &str, call: &str, resolved: bool) -> Option<MatchQuality> {
    if let Some(suffix) = pattern.strip_prefix("*.") {
        let hit = call == suffix
            || call
                .strip_suffix(suffix)
                .is_some_and(|head| head.ends_with('.'));
        return hit.then_some(MatchQuality::Suffix);
    }
    if call == pattern {
        return Some(MatchQuality::Exact);
    }
    if !resolved && last_segment(call) == last_segment(pattern) {
        return Some(MatchQuality::Fallback);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_classifies_read_csv_as_dataset_init() {
        let cat = ApiCatalog::builtin();
        let e = cat.lookup("pandas.read_csv", true).unwrap();
        assert_eq!(e.category, Category::DatasetInit);
        assert_eq!(e.category.property_kind(), Some(PropertyKind::Dataset));
        for name in ["train_test_split", "accuracy_score", "r2_score", "fit", "predict"] {
            assert!(
                cat.entries.iter().any(|e| e.callable() == name),
                "missing {name}"
            );
        }
    }

    #[test]
    fn suffix_and_fallback_matching() {
        let cat = ApiCatalog::builtin();
        assert_eq!(cat.lookup("model.fit", false).unwrap().name, "*.fit");
        assert_eq!(cat.lookup("?.dropna", false).unwrap().name, "*.dropna");
        assert_eq!(
            cat.lookup("LogisticRegression", false).unwrap().name,
            "sklearn.linear_model.LogisticRegression"
        );
        assert!(cat.lookup("mylib.read_csv", true).is_none());
        assert!(cat.lookup("math.sqrt", true).is_none());
    }

    #[test]
    fn user_entries_extend_matching() {
        let json = br#"{"version": 1, "entries": [
            {"name": "xgboost.XGBClassifier", "category": "ModelInit", "value_kind": "model"}
        ]}"#;
        let cat = ApiCatalog::from_json(json).unwrap();
        let e = cat.lookup("xgboost.XGBClassifier", true).unwrap();
        assert_eq!(e.category.property_kind(), Some(PropertyKind::ModelArch));
    }

    #[test]
    fn schema_errors() {
        let dup = br#"{"version": 1, "entries": [
            {"name": "a.f", "category": "MetricCall", "value_kind": "scalar"},
            {"name": "a.f", "category": "MetricCall", "value_kind": "scalar"}]}"#;
        assert!(matches!(ApiCatalog::from_json(dup), Err(Error::CatalogSchema(_))));

        let bad_cat = br#"{"version": 1, "entries": [
            {"name": "a.f", "category": "Nope", "value_kind": "scalar"}]}"#;
        assert!(matches!(ApiCatalog::from_json(bad_cat), Err(Error::CatalogSchema(_))));

        let short_group = br#"{"version": 1, "entries": [
            {"name": "a.f", "category": "MetricCall", "value_kind": "scalar"}],
            "swap_groups": [["a.f"]]}"#;
        assert!(matches!(ApiCatalog::from_json(short_group), Err(Error::CatalogSchema(_))));

        let mixed = br#"{"version": 1, "entries": [
            {"name": "a.f", "category": "MetricCall", "value_kind": "scalar"},
            {"name": "a.g", "category": "ModelInit", "value_kind": "model"}],
            "swap_groups": [["a.f", "a.g"]]}"#;
        assert!(matches!(ApiCatalog::from_json(mixed), Err(Error::CatalogSchema(_))));

        let typo = br#"{"version": 1, "entries": [], "seed_params": []}"#;
        assert!(matches!(ApiCatalog::from_json(typo), Err(Error::CatalogSchema(_))));
    }

    #[test]
    fn loading_is_pure() {
        let a = ApiCatalog::from_json(BUILTIN.as_bytes()).unwrap();
        let b = ApiCatalog::from_json(BUILTIN.as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swap_alternatives() {
        let cat = ApiCatalog::builtin();
        let alts: Vec<_> = cat
            .swap_alternatives("sklearn.preprocessing.StandardScaler")
            .iter()
            .map(|e| e.callable().to_string())
            .collect();
        assert!(alts.contains(&"MinMaxScaler".to_string()));
        assert!(!alts.contains(&"StandardScaler".to_string()));
    }
}
