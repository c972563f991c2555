//! Class-name bookkeeping: ordered fine classes plus an optional total map
//! onto coarse groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::store::EmbeddingRecord;

/// Ordered class names with an optional fine→coarse grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMapping {
    /// Fine class names; order fixes the label ids used in embedding stores.
    pub classes: Vec<String>,
    /// Total map from fine class name to coarse group name, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<BTreeMap<String, String>>,
}

impl LabelMapping {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let m = LabelMapping { classes, coarse: None };
        m.validate()?;
        Ok(m)
    }

    pub fn with_coarse(classes: Vec<String>, coarse: BTreeMap<String, String>) -> Result<Self> {
        let m = LabelMapping {
            classes,
            coarse: Some(coarse),
        };
        m.validate()?;
        Ok(m)
    }

    /// The seven BRACS lesion types with the standard three-group coarsening.
    pub fn bracs() -> Self {
        let classes: Vec<String> = ["Normal", "Benign", "UDH", "ADH", "FEA", "DCIS", "Invasive"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut coarse = BTreeMap::new();
        for c in ["Normal", "Benign", "UDH"] {
            coarse.insert(c.to_string(), "benign-group".to_string());
        }
        for c in ["ADH", "FEA"] {
            coarse.insert(c.to_string(), "atypical".to_string());
        }
        for c in ["DCIS", "Invasive"] {
            coarse.insert(c.to_string(), "malignant".to_string());
        }
        LabelMapping {
            classes,
            coarse: Some(coarse),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidParameter("label mapping has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate class name '{c}'"
                )));
            }
        }
        if let Some(coarse) = &self.coarse {
            for c in &self.classes {
                if !coarse.contains_key(c) {
                    return Err(Error::InvalidParameter(format!(
                        "coarse map is not total: class '{c}' unmapped"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Coarse group names, ordered by first appearance over `classes`.
    pub fn coarse_classes(&self) -> Result<Vec<String>> {
        let coarse = self.coarse.as_ref().ok_or_else(|| {
            Error::InvalidParameter("label mapping has no coarse map".into())
        })?;
        let mut out: Vec<String> = Vec::new();
        for c in &self.classes {
            let g = coarse.get(c).ok_or_else(|| {
                Error::InvalidParameter(format!("coarse map is not total: class '{c}' unmapped"))
            })?;
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        Ok(out)
    }
}

/// Rewrites record labels through the coarse map. Returns the relabeled
/// records and the ordered coarse class names their new ids index into.
/// Unlabeled records pass through unchanged.
pub fn coarsen_labels(
    records: &[EmbeddingRecord],
    mapping: &LabelMapping,
) -> Result<(Vec<EmbeddingRecord>, Vec<String>)> {
    mapping.validate()?;
    let coarse = mapping.coarse.as_ref().ok_or_else(|| {
        Error::InvalidParameter("label mapping has no coarse map".into())
    })?;
    let coarse_classes = mapping.coarse_classes()?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let label = match r.label {
            None => None,
            Some(id) => {
                let fine = mapping.classes.get(id).ok_or_else(|| {
                    Error::Probe(format!(
                        "record '{}' has label id {id}, but the mapping has {} classes",
                        r.id,
                        mapping.classes.len()
                    ))
                })?;
                let group = coarse.get(fine).ok_or_else(|| {
                    Error::Probe(format!("class '{fine}' not in the coarse map"))
                })?;
                Some(
                    coarse_classes
                        .iter()
                        .position(|g| g == group)
                        .expect("group drawn from coarse_classes"),
                )
            }
        };
        out.push(EmbeddingRecord {
            id: r.id.clone(),
            vector: r.vector.clone(),
            label,
            split: r.split,
        });
    }
    Ok((out, coarse_classes))
}
