//! Subject records and the cohort manifest CSV
//! (`subject_id,path,age,label,is_healthy`).

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diagnoser::Label;
use crate::volume_io::{read_volume, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("subject {id}: {source}")]
    Volume { id: String, source: VolumeError },
    #[error("subject {0} has no scan path")]
    MissingPath(String),
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
}

pub const MANIFEST_HEADER: &str = "subject_id,path,age,label,is_healthy";

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub path: Option<PathBuf>,
    /// Chronological age in years.
    pub age: f64,
    /// `None` for unlabeled (prediction-only) cohorts.
    pub label: Option<Label>,
    /// Healthy control; implies `label == Some(Other)`.
    pub is_healthy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub record: SubjectRecord,
    pub volume: Volume3D,
}

pub type Cohort = Vec<Subject>;

pub fn format_manifest(records: &[SubjectRecord]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let path = r
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            path,
            r.age,
            label,
            u8::from(r.is_healthy)
        ));
    }
    out
}

/// Parses a manifest; relative paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<SubjectRecord>, CohortError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    if header != MANIFEST_HEADER.split(',').collect::<Vec<_>>() {
        return Err(CohortError::Parse {
            line: 1,
            msg: format!("expected header `{MANIFEST_HEADER}`"),
        });
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |msg: String| CohortError::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let id = f[0].to_string();
        if id.is_empty() {
            return Err(err("empty subject id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(CohortError::DuplicateId(id));
        }
        let path = (!f[1].is_empty()).then(|| {
            let p = PathBuf::from(f[1]);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        });
        let age: f64 = f[2]
            .parse()
            .map_err(|_| err(format!("bad age {:?}", f[2])))?;
        if !age.is_finite() || age <= 0.0 {
            return Err(err(format!("age must be positive, got {age}")));
        }
        let label = if f[3].is_empty() {
            None
        } else {
            Some(f[3].parse::<Label>().map_err(err)?)
        };
        let is_healthy = match f[4] {
            "1" | "true" => true,
            "0" | "false" | "" => false,
            other => return Err(err(format!("bad is_healthy {other:?}"))),
        };
        if is_healthy && label == Some(Label::Pd) {
            return Err(err("healthy subject cannot be labeled pd".into()));
        }
        records.push(SubjectRecord {
            id,
            path,
            age,
            label,
            is_healthy,
        });
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>, CohortError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes a manifest with paths made relative to its directory where possible.
pub fn write_manifest(
    path: impl AsRef<Path>,
    records: &[SubjectRecord],
) -> Result<(), CohortError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel: Vec<SubjectRecord> = records
        .iter()
        .map(|r| SubjectRecord {
            path: r.path.as_ref().map(|p| {
                p.strip_prefix(base)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|_| p.clone())
            }),
            ..r.clone()
        })
        .collect();
    std::fs::write(path, format_manifest(&rel)).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_cohort(records: &[SubjectRecord]) -> Result<Cohort, CohortError> {
    records
        .iter()
        .map(|r| {
            let path = r
                .path
                .as_ref()
                .ok_or_else(|| CohortError::MissingPath(r.id.clone()))?;
            let volume = read_volume(path).map_err(|source| CohortError::Volume {
                id: r.id.clone(),
                source,
            })?;
            Ok(Subject {
                record: r.clone(),
                volume,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let recs = vec![
            SubjectRecord {
                id: "sub-1".into(),
                path: Some(PathBuf::from("/data/a.nii")),
                age: 63.25,
                label: Some(Label::Pd),
                is_healthy: false,
            },
            SubjectRecord {
                id: "sub-2".into(),
                path: None,
                age: 70.0,
                label: None,
                is_healthy: false,
            },
        ];
        let text = format_manifest(&recs);
        assert_eq!(parse_manifest(&text, Path::new("/")).unwrap(), recs);
    }

    #[test]
    fn manifest_errors() {
        let base = Path::new(".");
        assert!(parse_manifest("a,b\n", base).is_err());
        let h = MANIFEST_HEADER;
        assert!(parse_manifest(&format!("{h}\ns,p,-1,pd,0\n"), base).is_err());
        assert!(parse_manifest(&format!("{h}\ns,p,60,pd,1\n"), base).is_err());
        assert!(matches!(
            parse_manifest(&format!("{h}\ns,p,60,pd,0\ns,p,61,other,1\n"), base),
            Err(CohortError::DuplicateId(_))
        ));
        assert!(parse_manifest("", base).unwrap().is_empty());
    }
}
