//! JSON model files.
//!
//! Two shapes are accepted:
//!
//! ```json
//! {"nodes": [2, 3], "unary": [[1, 2], [1, 1, 1]],
//!  "edges": [{"pair": [0, 1], "table": [1, 1, 1, 1, 2, 1]}]}
//!
//! {"ising": {"edges": [[0, 1, 0.5]], "phi": [0.1, -0.2]}}
//! ```
//!
//! Pairwise tables are row-major over `(pair[0], pair[1])`. `unary` defaults to
//! all-ones tables. An Ising file may carry `nodes` but every entry must be 2.
//! Generated instances also record their `instance` config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    build_ising, InstanceConfig, IsingParams, ModelError, PairwiseModel, Topology,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model at {location}: {message}")]
    Invalid { location: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub pair: [usize; 2],
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingEntry {
    pub edges: Vec<(usize, usize, f64)>,
    pub phi: Vec<f64>,
}

/// On-disk representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unary: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<EdgeEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ising: Option<IsingEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceConfig>,
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        location: location.into(),
        message: message.into(),
    }
}

impl ModelFile {
    pub fn from_ising(params: &IsingParams, instance: Option<InstanceConfig>) -> Self {
        let edges = params
            .topology
            .edges()
            .iter()
            .zip(&params.theta)
            .map(|(&(a, b), &t)| (a, b, t))
            .collect();
        Self {
            nodes: None,
            unary: None,
            edges: None,
            ising: Some(IsingEntry {
                edges,
                phi: params.phi.clone(),
            }),
            instance,
        }
    }

    /// Validates and builds the model, reporting the first violation.
    pub fn to_model(&self) -> Result<PairwiseModel, FormatError> {
        match (&self.ising, &self.edges) {
            (Some(_), Some(_)) => Err(invalid("$", "both `ising` and `edges` present")),
            (Some(ising), None) => {
                if self.unary.is_some() {
                    return Err(invalid("unary", "not allowed alongside `ising`"));
                }
                build_ising(&self.ising_params(ising)?).map_err(Into::into)
            }
            (None, edges) => self.general_model(edges.as_deref().unwrap_or(&[])),
        }
    }

    fn ising_params(&self, ising: &IsingEntry) -> Result<IsingParams, FormatError> {
        let n = ising.phi.len();
        if let Some(nodes) = &self.nodes {
            if nodes.len() != n {
                return Err(invalid(
                    "nodes",
                    format!("{} nodes but {} fields", nodes.len(), n),
                ));
            }
            if let Some(i) = nodes.iter().position(|&c| c != 2) {
                return Err(invalid(format!("nodes[{i}]"), "Ising nodes must be binary"));
            }
        }
        for (i, p) in ising.phi.iter().enumerate() {
            if !p.is_finite() {
                return Err(invalid(format!("ising.phi[{i}]"), "not finite"));
            }
        }
        let mut pairs = Vec::with_capacity(ising.edges.len());
        let mut theta = Vec::with_capacity(ising.edges.len());
        for (e, &(a, b, t)) in ising.edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(invalid(
                    format!("ising.edges[{e}]"),
                    format!("node outside 0..{n}"),
                ));
            }
            if !t.is_finite() {
                return Err(invalid(format!("ising.edges[{e}][2]"), "theta not finite"));
            }
            pairs.push((a, b));
            theta.push(t);
        }
        let topology = topology_at(n, pairs, "ising.edges")?;
        Ok(IsingParams {
            topology,
            theta,
            phi: ising.phi.clone(),
        })
    }

    fn general_model(&self, edges: &[EdgeEntry]) -> Result<PairwiseModel, FormatError> {
        let cards = self
            .nodes
            .clone()
            .ok_or_else(|| invalid("nodes", "missing node cardinalities"))?;
        let n = cards.len();
        if let Some(i) = cards.iter().position(|&c| c < 2) {
            return Err(invalid(format!("nodes[{i}]"), "cardinality must be >= 2"));
        }
        let unary = match &self.unary {
            Some(u) => {
                if u.len() != n {
                    return Err(invalid("unary", format!("{} tables for {n} nodes", u.len())));
                }
                for (i, t) in u.iter().enumerate() {
                    check_entries(t, cards[i], &format!("unary[{i}]"))?;
                }
                u.clone()
            }
            None => cards.iter().map(|&c| vec![1.0; c]).collect(),
        };
        let mut pairs = Vec::with_capacity(edges.len());
        for (e, entry) in edges.iter().enumerate() {
            let [a, b] = entry.pair;
            if a >= n || b >= n {
                return Err(invalid(
                    format!("edges[{e}].pair"),
                    format!("node outside 0..{n}"),
                ));
            }
            check_entries(&entry.table, cards[a] * cards[b], &format!("edges[{e}].table"))?;
            pairs.push((a, b));
        }
        let topology = topology_at(n, pairs, "edges")?;
        let pairwise = edges.iter().map(|e| e.table.clone()).collect();
        PairwiseModel::new(topology, cards, unary, pairwise).map_err(Into::into)
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|source| FormatError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|source| FormatError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn topology_at(n: usize, pairs: Vec<(usize, usize)>, location: &str) -> Result<Topology, FormatError> {
    Topology::new(n, pairs).map_err(|e| invalid(location, e.to_string()))
}

fn check_entries(table: &[f64], expected: usize, location: &str) -> Result<(), FormatError> {
    if table.len() != expected {
        return Err(invalid(
            location,
            format!("{} entries, expected {expected}", table.len()),
        ));
    }
    if let Some(k) = table.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid(format!("{location}[{k}]"), "negative or non-finite entry"));
    }
    if !table.iter().any(|&v| v > 0.0) {
        return Err(invalid(location, "no strictly positive entry"));
    }
    Ok(())
}

/// Reads and validates a model file.
pub fn load_model(path: &Path) -> Result<PairwiseModel, FormatError> {
    ModelFile::read(path)?.to_model()
}
