//! Hierarchical binary response datasets: validated containers, wide-CSV
//! interchange, Likert recoding, and forward simulation from the model.

mod io;
mod recode;
mod simulate;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_covariates, load_dataset, read_covariates, read_dataset, save_dataset, write_dataset};
pub use recode::{recode, RawDataset, RawGroup, RecodingRule};
pub use simulate::{redraw_responses, sample_prior, simulate_dataset, SimulateOptions, Sizes, SyntheticDesign, Truth};

/// Dense n × p matrix of binary responses, `None` marking a missing cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Option<bool>>,
}

impl ResponseMatrix {
    /// All-missing matrix.
    pub fn missing(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![None; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<bool>>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("response rows have differing lengths".into()));
        }
        Ok(Self {
            rows: n,
            cols,
            cells: rows.into_iter().flatten().collect(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<bool> {
        self.cells[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: Option<bool>) {
        self.cells[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Option<bool>] {
        &self.cells[i * self.cols..(i + 1) * self.cols]
    }

    pub fn observed(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// One group (school) of respondents sharing a block of group-level parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub respondent_ids: Vec<String>,
    pub responses: ResponseMatrix,
}

impl Group {
    pub fn size(&self) -> usize {
        self.responses.rows()
    }
}

/// Group-level covariate value: numeric where it parses, text otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovariateValue::Number(v) => write!(f, "{v}"),
            CovariateValue::Text(s) => f.write_str(s),
        }
    }
}

/// group_id → (covariate name → value).
pub type Covariates = BTreeMap<String, BTreeMap<String, CovariateValue>>;

/// Ragged collection of K group response matrices over a shared item set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseDataset {
    pub(crate) groups: Vec<Group>,
    item_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariates: Option<Covariates>,
}

impl ResponseDataset {
    pub fn new(groups: Vec<Group>, item_ids: Vec<String>) -> Result<Self> {
        let p = item_ids.len();
        let mut seen = HashSet::new();
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Duplicate(format!("item id {id:?}")));
            }
        }
        let mut seen = HashSet::new();
        for g in &groups {
            if !seen.insert(g.id.as_str()) {
                return Err(Error::Duplicate(format!("group id {:?}", g.id)));
            }
            if g.size() == 0 {
                return Err(Error::Value(format!("group {:?} has no respondents", g.id)));
            }
            if g.responses.cols() != p {
                return Err(Error::Shape(format!(
                    "group {:?} has {} item columns, expected {p}",
                    g.id,
                    g.responses.cols()
                )));
            }
            if g.respondent_ids.len() != g.size() {
                return Err(Error::Shape(format!(
                    "group {:?} has {} respondent ids for {} rows",
                    g.id,
                    g.respondent_ids.len(),
                    g.size()
                )));
            }
            let mut ids = HashSet::new();
            for r in &g.respondent_ids {
                if !ids.insert(r.as_str()) {
                    return Err(Error::Duplicate(format!("respondent ({:?}, {r:?})", g.id)));
                }
            }
        }
        Ok(Self {
            groups,
            item_ids,
            covariates: None,
        })
    }

    /// Attach covariates; every key must name an existing group.
    pub fn with_covariates(mut self, covariates: Covariates) -> Result<Self> {
        for key in covariates.keys() {
            if !self.groups.iter().any(|g| &g.id == key) {
                return Err(Error::Value(format!("covariates for unknown group {key:?}")));
            }
        }
        self.covariates = Some(covariates);
        Ok(self)
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    #[inline]
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, k: usize) -> &Group {
        &self.groups[k]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Group::size).collect()
    }

    pub fn total_respondents(&self) -> usize {
        self.groups.iter().map(Group::size).sum()
    }

    pub fn observed_cells(&self) -> usize {
        self.groups.iter().map(|g| g.responses.observed()).sum()
    }

    /// Same shape and labels, every response cell missing.
    pub fn masked(&self) -> Self {
        let mut out = self.clone();
        for g in &mut out.groups {
            g.responses = ResponseMatrix::missing(g.responses.rows(), g.responses.cols());
        }
        out
    }

    /// SHA-256 over a canonical rendering of ids and cells.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.item_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for g in &self.groups {
            h.update([1u8]);
            h.update(g.id.as_bytes());
            h.update([0u8]);
            for (i, r) in g.respondent_ids.iter().enumerate() {
                h.update(r.as_bytes());
                h.update([0u8]);
                for c in g.responses.row(i) {
                    h.update([match c {
                        None => 2u8,
                        Some(false) => 0,
                        Some(true) => 1,
                    }]);
                }
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
