//! Clinical priors: per-region relevance weights and the aging-prior margins.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("relevance table is empty")]
    Empty,
    #[error("bad relevance header {0:?}, expected `region_id,region_name,relevance`")]
    BadHeader(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate region id {0}")]
    DuplicateId(usize),
    #[error("missing region id {0} (ids must be exactly 1..=R)")]
    MissingId(usize),
    #[error("unknown relevance token {0:?}")]
    UnknownRelevance(String),
    #[error("invalid aging prior: {0}")]
    InvalidAgingPrior(String),
    #[error("non-finite age input")]
    NonFiniteAge,
    #[error("chronological age must be positive, got {0}")]
    NonPositiveAge(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceClass {
    Strong,
    Potential,
    None,
}

impl RelevanceClass {
    pub fn weight(self) -> f64 {
        match self {
            RelevanceClass::Strong => 1.0,
            RelevanceClass::Potential => 1e-2,
            RelevanceClass::None => 1e-3,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            RelevanceClass::Strong => "strong",
            RelevanceClass::Potential => "potential",
            RelevanceClass::None => "none",
        }
    }
}

impl FromStr for RelevanceClass {
    type Err = PriorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strong" => Ok(RelevanceClass::Strong),
            "potential" => Ok(RelevanceClass::Potential),
            "none" => Ok(RelevanceClass::None),
            _ => Err(PriorError::UnknownRelevance(s.to_string())),
        }
    }
}

impl fmt::Display for RelevanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceEntry {
    pub region_id: usize,
    pub region_name: String,
    pub class: RelevanceClass,
}

/// Region relevance classes, indexed by region id `1..=R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTable {
    entries: Vec<RelevanceEntry>,
}

const HARVARD_OXFORD_CORTICAL: [(&str, RelevanceClass); 48] = {
    use RelevanceClass::{None as N, Potential as P, Strong as S};
    [
        ("Frontal Pole", N),
        ("Insular Cortex", P),
        ("Superior Frontal Gyrus", S),
        ("Middle Frontal Gyrus", S),
        ("Inferior Frontal Gyrus, Triangular Part", P),
        ("Inferior Frontal Gyrus, Opercular Part", P),
        ("Precentral Gyrus", S),
        ("Temporal Pole", N),
        ("Superior Temporal Gyrus, Anterior Division", N),
        ("Superior Temporal Gyrus, Posterior Division", N),
        ("Middle Temporal Gyrus, Anterior Division", N),
        ("Middle Temporal Gyrus, Posterior Division", N),
        ("Temporooccipital Middle Temporal Gyrus", N),
        ("Inferior Temporal Gyrus, Anterior Division", N),
        ("Inferior Temporal Gyrus, Posterior Division", N),
        ("Temporooccipital Inferior Temporal Gyrus", N),
        ("Postcentral Gyrus", P),
        ("Superior Parietal Lobule", P),
        ("Supramarginal Gyrus, Anterior Division", N),
        ("Supramarginal Gyrus, Posterior Division", N),
        ("Angular Gyrus", P),
        ("Lateral Occipital Cortex, Superior Division", N),
        ("Lateral Occipital Cortex, Inferior Division", N),
        ("Intracalcarine Cortex", N),
        ("Medial Frontal Cortex", P),
        ("Juxtapositional Lobule Cortex (SMA)", S),
        ("Subcallosal Cortex", N),
        ("Paracingulate Gyrus", N),
        ("Anterior Cingulate Gyrus", N),
        ("Posterior Cingulate Gyrus", P),
        ("Precuneous Cortex", P),
        ("Cuneal Cortex", N),
        ("Orbitofrontal Cortex", N),
        ("Parahippocampal Gyrus, Anterior Division", N),
        ("Parahippocampal Gyrus, Posterior Division", N),
        ("Lingual Gyrus", N),
        ("Temporal Fusiform Cortex, Anterior Division", N),
        ("Temporal Fusiform Cortex, Posterior Division", N),
        ("Temporooccipital Fusiform Cortex", N),
        ("Occipital Fusiform Gyrus", N),
        ("Frontal Operculum Cortex", N),
        ("Central Opercular Cortex", N),
        ("Parietal Operculum Cortex", N),
        ("Planum Polare", N),
        ("Heschl's Gyrus", N),
        ("Planum Temporale", N),
        ("Supracalcarine Cortex", N),
        ("Occipital Pole", N),
    ]
};

/// The 48-region Harvard-Oxford cortical assignment.
pub fn default_relevance_table() -> RelevanceTable {
    let entries = HARVARD_OXFORD_CORTICAL
        .iter()
        .enumerate()
        .map(|(i, (name, class))| RelevanceEntry {
            region_id: i + 1,
            region_name: name.to_string(),
            class: *class,
        })
        .collect();
    RelevanceTable { entries }
}

impl RelevanceTable {
    /// Builds a table from entries in any order; ids must be exactly `1..=R`.
    pub fn new(mut entries: Vec<RelevanceEntry>) -> Result<Self, PriorError> {
        if entries.is_empty() {
            return Err(PriorError::Empty);
        }
        entries.sort_by_key(|e| e.region_id);
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].region_id == w[1].region_id)
        {
            return Err(PriorError::DuplicateId(w[0].region_id));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.region_id != i + 1 {
                return Err(PriorError::MissingId(i + 1));
            }
        }
        Ok(RelevanceTable { entries })
    }

    pub fn regions(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[RelevanceEntry] {
        &self.entries
    }

    pub fn class(&self, region_id: usize) -> RelevanceClass {
        self.entries[region_id - 1].class
    }

    pub fn set_class(&mut self, region_id: usize, class: RelevanceClass) {
        self.entries[region_id - 1].class = class;
    }

    /// Θ, indexed from 0 for region 1.
    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.class.weight()).collect()
    }

    pub fn ids_with(&self, class: RelevanceClass) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.region_id)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("region_id,region_name,relevance\n");
        for e in &self.entries {
            let name = if e.region_name.contains([',', '"']) {
                format!("\"{}\"", e.region_name.replace('"', "\"\""))
            } else {
                e.region_name.clone()
            };
            out.push_str(&format!("{},{},{}\n", e.region_id, name, e.class));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PriorError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(PriorError::Empty)?;
        let cols: Vec<String> = split_csv_line(header)
            .map_err(|msg| PriorError::Parse { line: 1, msg })?
            .into_iter()
            .map(|c| c.trim().to_string())
            .collect();
        if cols != ["region_id", "region_name", "relevance"] {
            return Err(PriorError::BadHeader(header.to_string()));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields =
                split_csv_line(line).map_err(|msg| PriorError::Parse { line: lineno, msg })?;
            if fields.len() != 3 {
                return Err(PriorError::Parse {
                    line: lineno,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let region_id: usize = fields[0].trim().parse().map_err(|_| PriorError::Parse {
                line: lineno,
                msg: format!("bad region id {:?}", fields[0]),
            })?;
            if region_id == 0 {
                return Err(PriorError::Parse {
                    line: lineno,
                    msg: "region id 0 is reserved for background".into(),
                });
            }
            entries.push(RelevanceEntry {
                region_id,
                region_name: fields[1].trim().to_string(),
                class: fields[2].parse()?,
            });
        }
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PriorError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn load_relevance_table(path: impl AsRef<Path>) -> Result<RelevanceTable, PriorError> {
    RelevanceTable::from_csv(&std::fs::read_to_string(path)?)
}

// Minimal RFC 4180 field splitter; region names may contain quoted commas.
fn split_csv_line(line: &str) -> Result<Vec<String>, String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                chars.next();
                cur.push('"');
            }
            ('"', true) => quoted = false,
            ('"', false) if cur.trim().is_empty() => {
                cur.clear();
                quoted = true;
            }
            (',', false) => fields.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    if quoted {
        return Err("unterminated quoted field".into());
    }
    fields.push(cur);
    Ok(fields)
}

/// Margins of the age-gap hinge and strength of the logit correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgingPriorParams {
    /// Minimum acceptable age gap for PD subjects, years.
    pub zeta: f64,
    /// Maximum acceptable age gap for everyone else, years.
    pub tau: f64,
    pub alpha: f64,
}

impl Default for AgingPriorParams {
    fn default() -> Self {
        AgingPriorParams {
            zeta: 9.5,
            tau: 4.5,
            alpha: 1.0,
        }
    }
}

impl AgingPriorParams {
    pub fn new(zeta: f64, tau: f64, alpha: f64) -> Result<Self, PriorError> {
        let p = AgingPriorParams { zeta, tau, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let AgingPriorParams { zeta, tau, alpha } = *self;
        if !(zeta.is_finite() && tau.is_finite() && alpha.is_finite()) {
            return Err(PriorError::InvalidAgingPrior(
                "values must be finite".into(),
            ));
        }
        if tau < 0.0 {
            return Err(PriorError::InvalidAgingPrior(format!(
                "tau={tau} must be >= 0"
            )));
        }
        if zeta <= tau {
            return Err(PriorError::InvalidAgingPrior(format!(
                "zeta={zeta} must exceed tau={tau}"
            )));
        }
        if alpha < 0.0 {
            return Err(PriorError::InvalidAgingPrior(format!(
                "alpha={alpha} must be >= 0"
            )));
        }
        Ok(())
    }
}

/// Predicted regional brain age minus chronological age, in years.
pub fn age_gap(predicted_age: f64, chronological_age: f64) -> Result<f64, PriorError> {
    if !predicted_age.is_finite() || !chronological_age.is_finite() {
        return Err(PriorError::NonFiniteAge);
    }
    if chronological_age <= 0.0 {
        return Err(PriorError::NonPositiveAge(chronological_age));
    }
    Ok(predicted_age - chronological_age)
}
