//! Skull strip, bias-field correction and registration through external
//! commands, with digest-checked caching and an atomically rewritten manifest.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::volume_io::Volume3D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("invalid tool config: {0}")]
    InvalidConfig(String),
    #[error("command not found: {0}")]
    CommandNotFound(String),
    #[error("{step} exited with status {code:?}")]
    NonZeroExit { step: Step, code: Option<i32> },
    #[error("{step} exited successfully but wrote no {path}")]
    OutputMissing { step: Step, path: PathBuf },
    #[error("volume dims {found:?} do not match the atlas grid {expected:?}")]
    DimMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("i/o error: {0}")]
    Io(String),
}

fn io_err(e: impl std::fmt::Display) -> PreprocessError {
    PreprocessError::Io(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Strip,
    Bias,
    Register,
}

impl Step {
    pub const ORDER: [Step; 3] = [Step::Strip, Step::Bias, Step::Register];
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Step::Strip => "strip",
            Step::Bias => "bias",
            Step::Register => "register",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub strip: String,
    pub bias: String,
    pub register: String,
    /// Standard-space template volume substituted for `{template}`.
    pub template: PathBuf,
    pub cache_dir: PathBuf,
    pub jobs: usize,
    /// Copy inputs straight to the output; for data already in template space.
    pub bypass: bool,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            strip: "hd-bet -i {input} -o {output}".into(),
            bias: "N4BiasFieldCorrection -i {input} -o {output}".into(),
            register: "antsRegistrationSyN.sh -f {template} -m {input} -o {output}".into(),
            template: PathBuf::from("MNI152_T1_1mm.nii"),
            cache_dir: PathBuf::from("preprocessed"),
            jobs: 1,
            bypass: false,
        }
    }
}

impl ToolConfig {
    pub fn template_for(&self, step: Step) -> &str {
        match step {
            Step::Strip => &self.strip,
            Step::Bias => &self.bias,
            Step::Register => &self.register,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        for step in Step::ORDER {
            let t = self.template_for(step);
            let mut required = vec!["{input}", "{output}"];
            if step == Step::Register {
                required.push("{template}");
            }
            for p in required {
                if !t.contains(p) {
                    return Err(PreprocessError::InvalidConfig(format!(
                        "{step} template {t:?} lacks the {p} placeholder"
                    )));
                }
            }
            if t.split_whitespace()
                .next()
                .is_none_or(|prog| prog.contains('{'))
            {
                return Err(PreprocessError::InvalidConfig(format!(
                    "{step} template must start with a program name"
                )));
            }
        }
        if self.jobs == 0 {
            return Err(PreprocessError::InvalidConfig(
                "jobs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Locates `program` as a path or on the executable search path.
pub fn resolve_program(program: &str) -> Option<PathBuf> {
    let is_exec = |p: &Path| p.is_file();
    if program.contains('/') {
        let p = PathBuf::from(program);
        return is_exec(&p).then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| is_exec(p))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Skipped,
    Ran,
    Bypassed,
    Failed,
    /// Not attempted because an earlier step failed.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub subject_id: String,
    pub input: PathBuf,
    pub steps: Vec<(Step, StepStatus)>,
    pub output: PathBuf,
    /// SHA-256 of the final volume; `None` when the subject failed.
    pub digest: Option<String>,
    pub cache_key: String,
    pub error: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl PipelineRecord {
    pub fn succeeded(&self) -> bool {
        self.digest.is_some()
            && self
                .steps
                .iter()
                .all(|(_, s)| !matches!(s, StepStatus::Failed | StepStatus::Pending))
    }

    pub fn skipped(&self) -> bool {
        self.steps.iter().all(|(_, s)| *s == StepStatus::Skipped)
    }
}

pub fn file_digest(path: &Path) -> Result<String, PreprocessError> {
    let bytes = std::fs::read(path).map_err(io_err)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub fn read_pipeline_manifest(cache_dir: &Path) -> Result<Vec<PipelineRecord>, PreprocessError> {
    let path = cache_dir.join(MANIFEST_NAME);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(format!("{}: {e}", path.display()))))
        .collect()
}

struct Manifest {
    dir: PathBuf,
    records: Vec<PipelineRecord>,
}

impl Manifest {
    fn latest(&self, id: &str) -> Option<&PipelineRecord> {
        self.records.iter().rev().find(|r| r.subject_id == id)
    }

    // Rewrites the whole file through a temporary and a rename.
    fn append(&mut self, record: PipelineRecord) -> Result<(), PreprocessError> {
        self.records.push(record);
        let tmp = self.dir.join(format!(".{MANIFEST_NAME}.tmp"));
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(io_err)?;
            writeln!(f, "{line}").map_err(io_err)?;
        }
        f.sync_all().map_err(io_err)?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST_NAME)).map_err(io_err)
    }
}

struct Resolved {
    programs: [PathBuf; 3],
    key_material: String,
}

fn resolve_all(cfg: &ToolConfig) -> Result<Resolved, PreprocessError> {
    let mut programs = Vec::with_capacity(3);
    let mut key_material = String::new();
    for step in Step::ORDER {
        let t = cfg.template_for(step);
        let prog = t.split_whitespace().next().unwrap_or_default();
        let path = resolve_program(prog)
            .ok_or_else(|| PreprocessError::CommandNotFound(prog.to_string()))?;
        key_material.push_str(&format!("{step}\0{}\0{t}\0", path.display()));
        programs.push(path);
    }
    key_material.push_str(&cfg.template.display().to_string());
    Ok(Resolved {
        programs: programs.try_into().expect("three steps"),
        key_material,
    })
}

fn bypass_key() -> String {
    "bypass".to_string()
}

fn cache_key(input_digest: &str, material: &str) -> String {
    hex::encode(Sha256::digest(
        format!("{input_digest}\0{material}").as_bytes(),
    ))
}

fn substitute(token: &str, input: &Path, output: &Path, template: &Path) -> String {
    token
        .replace("{input}", &input.display().to_string())
        .replace("{output}", &output.display().to_string())
        .replace("{template}", &template.display().to_string())
}

fn run_step(
    cfg: &ToolConfig,
    step: Step,
    program: &Path,
    input: &Path,
    output: &Path,
) -> Result<(), PreprocessError> {
    let args: Vec<String> = cfg
        .template_for(step)
        .split_whitespace()
        .skip(1)
        .map(|t| substitute(t, input, output, &cfg.template))
        .collect();
    let status = Command::new(program).args(&args).status().map_err(io_err)?;
    if !status.success() {
        return Err(PreprocessError::NonZeroExit {
            step,
            code: status.code(),
        });
    }
    if !output.is_file() {
        return Err(PreprocessError::OutputMissing {
            step,
            path: output.to_path_buf(),
        });
    }
    Ok(())
}

fn process_subject(
    cfg: &ToolConfig,
    resolved: &Option<Resolved>,
    manifest: &Mutex<Manifest>,
    id: &str,
    input: &Path,
) -> Result<PipelineRecord, PreprocessError> {
    let started = now();
    let output = cfg.cache_dir.join(format!("{id}.nii"));
    let mut record = PipelineRecord {
        subject_id: id.to_string(),
        input: input.to_path_buf(),
        steps: Step::ORDER
            .iter()
            .map(|&s| (s, StepStatus::Pending))
            .collect(),
        output: output.clone(),
        digest: None,
        cache_key: String::new(),
        error: None,
        started_unix: started,
        finished_unix: started,
    };
    let input_digest = match file_digest(input) {
        Ok(d) => d,
        Err(e) => {
            record.error = Some(format!("reading input: {e}"));
            record.steps[0].1 = StepStatus::Failed;
            return Ok(record);
        }
    };
    let material = resolved
        .as_ref()
        .map(|r| r.key_material.clone())
        .unwrap_or_else(bypass_key);
    record.cache_key = cache_key(&input_digest, &material);

    let cached = {
        let m = manifest.lock().expect("manifest lock");
        m.latest(id)
            .filter(|r| r.succeeded() && r.cache_key == record.cache_key && r.output == output)
            .and_then(|r| r.digest.clone())
    };
    if let Some(d) = cached {
        if output.is_file() && file_digest(&output).ok().as_deref() == Some(d.as_str()) {
            record
                .steps
                .iter_mut()
                .for_each(|s| s.1 = StepStatus::Skipped);
            record.digest = Some(d);
            record.finished_unix = now();
            return Ok(record);
        }
    }

    let tmp = cfg.cache_dir.join(".tmp").join(id);
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).map_err(io_err)?;
    let staged = tmp.join("final.nii");
    let outcome = match resolved {
        None => {
            let r = std::fs::copy(input, &staged).map(|_| ()).map_err(io_err);
            if r.is_ok() {
                record
                    .steps
                    .iter_mut()
                    .for_each(|s| s.1 = StepStatus::Bypassed);
            }
            r
        }
        Some(res) => {
            let mut current = input.to_path_buf();
            let mut result = Ok(());
            for (k, step) in Step::ORDER.into_iter().enumerate() {
                let out = tmp.join(format!("{step}.nii"));
                match run_step(cfg, step, &res.programs[k], &current, &out) {
                    Ok(()) => {
                        record.steps[k].1 = StepStatus::Ran;
                        current = out;
                    }
                    Err(e) => {
                        record.steps[k].1 = StepStatus::Failed;
                        result = Err(e);
                        break;
                    }
                }
            }
            result.and_then(|()| std::fs::rename(&current, &staged).map_err(io_err))
        }
    };
    match outcome.and_then(|()| {
        let d = file_digest(&staged)?;
        std::fs::rename(&staged, &output).map_err(io_err)?;
        Ok(d)
    }) {
        Ok(d) => record.digest = Some(d),
        Err(e) => {
            if !record.steps.iter().any(|s| s.1 == StepStatus::Failed) {
                if let Some(s) = record.steps.iter_mut().find(|s| s.1 == StepStatus::Pending) {
                    s.1 = StepStatus::Failed;
                }
            }
            record.error = Some(e.to_string());
        }
    }
    let _ = std::fs::remove_dir_all(&tmp);
    record.finished_unix = now();
    Ok(record)
}

/// Runs the three steps for each `(subject_id, raw_path)` unless a valid cached
/// output exists. Per-subject failures are recorded and do not stop the run.
pub fn run_pipeline(
    subjects: &[(String, PathBuf)],
    cfg: &ToolConfig,
) -> Result<Vec<PipelineRecord>, PreprocessError> {
    cfg.validate()?;
    let resolved = if cfg.bypass {
        None
    } else {
        Some(resolve_all(cfg)?)
    };
    std::fs::create_dir_all(&cfg.cache_dir).map_err(io_err)?;
    let mut seen = HashSet::new();
    for (id, _) in subjects {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(PreprocessError::InvalidConfig(format!(
                "unusable subject id {id:?}"
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(PreprocessError::InvalidConfig(format!(
                "duplicate subject id {id}"
            )));
        }
    }
    let manifest = Mutex::new(Manifest {
        dir: cfg.cache_dir.clone(),
        records: read_pipeline_manifest(&cfg.cache_dir)?,
    });
    let results: Vec<Mutex<Option<Result<PipelineRecord, PreprocessError>>>> =
        subjects.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((id, input)) = subjects.get(i) else {
            break;
        };
        let outcome = process_subject(cfg, &resolved, &manifest, id, input).and_then(|rec| {
            manifest
                .lock()
                .expect("manifest lock")
                .append(rec.clone())?;
            Ok(rec)
        });
        *results[i].lock().expect("result slot") = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(subjects.len().max(1)) {
            s.spawn(worker);
        }
    });
    results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("every subject processed")
        })
        .collect()
}

pub fn verify_processed(
    volume: &Volume3D,
    expected_dims: (usize, usize, usize),
) -> Result<(), PreprocessError> {
    if volume.dims() != expected_dims {
        return Err(PreprocessError::DimMismatch {
            expected: expected_dims,
            found: volume.dims(),
        });
    }
    Ok(())
}
