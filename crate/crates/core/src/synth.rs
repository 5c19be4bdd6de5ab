//! Seeded synthetic cohorts on a block atlas. Every region carries an intensity
//! offset linear in effective age; Strong regions of PD subjects age faster.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{write_manifest, Cohort, Subject, SubjectRecord};
use crate::diagnoser::Label;
use crate::priors::{default_relevance_table, RelevanceClass, RelevanceTable};
use crate::seed::derive_seed;
use crate::volume_io::{write_atlas, write_volume, AtlasVolume, Datatype, Volume3D};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("write failed: {0}")]
    Write(String),
}

/// Block grid along (D, H, W); 3·4·4 = 48 regions.
pub const GRID: (usize, usize, usize) = (3, 4, 4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// (D, H, W), each divisible by 4.
    pub dims: (usize, usize, usize),
    pub pd_fraction: f64,
    /// Fraction of non-PD subjects marked healthy (used for stage 2).
    pub healthy_fraction: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Years added to the effective age of Strong regions in PD subjects.
    pub acceleration: f64,
    /// Intensity units per effective-age year.
    pub gain: f64,
    /// Per-voxel noise standard deviation.
    pub noise_std: f64,
    /// Per-subject, per-region offset standard deviation.
    pub region_noise_std: f64,
    /// Mean tissue intensity before age effects.
    pub base_intensity: f64,
    /// Region baselines are drawn uniformly within ± this of `base_intensity`.
    pub baseline_spread: f64,
    /// Border voxels with label 0 and zero intensity.
    pub background_margin: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 200,
            dims: (32, 32, 32),
            pd_fraction: 0.5,
            healthy_fraction: 0.5,
            age_min: 50.0,
            age_max: 80.0,
            acceleration: 12.0,
            gain: 0.02,
            noise_std: 0.05,
            region_noise_std: 0.03,
            base_intensity: 1.0,
            baseline_spread: 0.2,
            background_margin: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let (d, h, w) = self.dims;
        if [d, h, w].iter().any(|&n| n == 0 || n % 4 != 0) {
            return bad(format!(
                "dims {d}x{h}x{w} must be positive and divisible by 4"
            ));
        }
        let m = self.background_margin;
        if [(w, GRID.2), (h, GRID.1), (d, GRID.0)]
            .iter()
            .any(|&(n, blocks)| n < 2 * m + blocks)
        {
            return bad(format!("background margin {m} leaves an empty region"));
        }
        if !(0.0..=1.0).contains(&self.pd_fraction) {
            return bad(format!("pd_fraction {} outside [0, 1]", self.pd_fraction));
        }
        if !(0.0..=1.0).contains(&self.healthy_fraction) {
            return bad(format!(
                "healthy_fraction {} outside [0, 1]",
                self.healthy_fraction
            ));
        }
        if !(self.age_min.is_finite()
            && self.age_max.is_finite()
            && 0.0 < self.age_min
            && self.age_min < self.age_max)
        {
            return bad(format!(
                "age range [{}, {}] is invalid",
                self.age_min, self.age_max
            ));
        }
        for (name, v) in [
            ("acceleration", self.acceleration),
            ("noise_std", self.noise_std),
            ("region_noise_std", self.region_noise_std),
            ("baseline_spread", self.baseline_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.gain.is_finite() || !self.base_intensity.is_finite() {
            return bad("gain and base_intensity must be finite".into());
        }
        Ok(())
    }

    /// Advisory messages that do not block generation.
    pub fn warnings(&self, zeta: f64, tau: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.acceleration <= zeta - tau {
            out.push(format!(
                "acceleration {} does not exceed zeta - tau = {}; both age-gap margins cannot hold",
                self.acceleration,
                zeta - tau
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthAtlas {
    pub atlas: AtlasVolume,
    pub table: RelevanceTable,
}

fn block_bounds(n: usize, margin: usize, blocks: usize) -> Vec<usize> {
    let inner = n - 2 * margin;
    (0..=blocks).map(|i| margin + i * inner / blocks).collect()
}

fn block_of(x: usize, bounds: &[usize]) -> Option<usize> {
    (0..bounds.len() - 1).find(|&i| bounds[i] <= x && x < bounds[i + 1])
}

/// Axis-aligned 3×4×4 block atlas; region id = (bd·4 + bh)·4 + bw + 1.
pub fn block_atlas(dims: (usize, usize, usize), margin: usize) -> AtlasVolume {
    let (d, h, w) = dims;
    let bw = block_bounds(w, margin, GRID.2);
    let bh = block_bounds(h, margin, GRID.1);
    let bd = block_bounds(d, margin, GRID.0);
    let mut labels = Vec::with_capacity(w * h * d);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let label = match (block_of(z, &bd), block_of(y, &bh), block_of(x, &bw)) {
                    (Some(k), Some(j), Some(i)) => ((k * GRID.1 + j) * GRID.2 + i + 1) as u16,
                    _ => 0,
                };
                labels.push(label);
            }
        }
    }
    AtlasVolume::new(dims, labels, GRID.0 * GRID.1 * GRID.2).expect("block atlas is valid")
}

pub fn synth_atlas(cfg: &SynthConfig) -> Result<SynthAtlas, SynthError> {
    cfg.validate()?;
    Ok(SynthAtlas {
        atlas: block_atlas(cfg.dims, cfg.background_margin),
        table: default_relevance_table(),
    })
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{:04}", i + 1)
}

/// Per-region baseline intensity, index 0 holding region 1. Fixed per seed.
pub fn region_baselines(cfg: &SynthConfig, regions: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1]));
    (0..regions)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            cfg.base_intensity + cfg.baseline_spread * u
        })
        .collect()
}

/// Labels and healthy flags for every subject.
fn assign_labels(cfg: &SynthConfig) -> Vec<(Label, bool)> {
    let n = cfg.n_subjects;
    let n_pd = (n as f64 * cfg.pd_fraction).round() as usize;
    let n_healthy = ((n - n_pd) as f64 * cfg.healthy_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 2])));
    let mut out = vec![(Label::Other, false); n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_pd {
            (Label::Pd, false)
        } else {
            (Label::Other, rank - n_pd < n_healthy)
        };
    }
    out
}

/// Effective age of a region: chronological age, plus the acceleration for
/// Strong regions of PD subjects.
pub fn effective_age(cfg: &SynthConfig, age: f64, label: Label, class: RelevanceClass) -> f64 {
    if label == Label::Pd && class == RelevanceClass::Strong {
        age + cfg.acceleration
    } else {
        age
    }
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<(Cohort, SynthAtlas), SynthError> {
    let sa = synth_atlas(cfg)?;
    let regions = sa.atlas.regions();
    let classes: Vec<RelevanceClass> = (1..=regions).map(|r| sa.table.class(r)).collect();
    let baselines = region_baselines(cfg, regions);
    let labels = assign_labels(cfg);
    let voxel_noise =
        Normal::new(0.0, cfg.noise_std).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let region_noise = Normal::new(0.0, cfg.region_noise_std)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;

    let cohort: Cohort = labels
        .par_iter()
        .enumerate()
        .map(|(i, &(label, is_healthy))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3, i as u64]));
            let age = rng.random_range(cfg.age_min..cfg.age_max);
            let level: Vec<f64> = (0..regions)
                .map(|r| {
                    baselines[r]
                        + cfg.gain * effective_age(cfg, age, label, classes[r])
                        + region_noise.sample(&mut rng)
                })
                .collect();
            let data: Vec<f64> = sa
                .atlas
                .labels()
                .iter()
                .map(|&l| match l {
                    0 => 0.0,
                    l => level[l as usize - 1] + voxel_noise.sample(&mut rng),
                })
                .collect();
            Subject {
                record: SubjectRecord {
                    id: subject_id(i),
                    path: None,
                    age,
                    label: Some(label),
                    is_healthy,
                },
                volume: Volume3D::new(cfg.dims, data).expect("finite synthetic volume"),
            }
        })
        .collect();
    Ok((cohort, sa))
}

pub struct WrittenCohort {
    pub manifest: PathBuf,
    pub atlas: PathBuf,
    pub relevance: PathBuf,
}

/// Writes `atlas.nii`, `relevance.csv`, `subjects/<id>.nii` (float32) and
/// `manifest.csv` under `dir`.
pub fn write_cohort(
    dir: &Path,
    cohort: &mut Cohort,
    sa: &SynthAtlas,
) -> Result<WrittenCohort, SynthError> {
    let werr = |e: &dyn std::fmt::Display| SynthError::Write(e.to_string());
    let subjects = dir.join("subjects");
    std::fs::create_dir_all(&subjects).map_err(|e| werr(&e))?;
    let atlas = dir.join("atlas.nii");
    write_atlas(&sa.atlas, &atlas).map_err(|e| werr(&e))?;
    let relevance = dir.join("relevance.csv");
    sa.table.save(&relevance).map_err(|e| werr(&e))?;
    for s in cohort.iter_mut() {
        let path = subjects.join(format!("{}.nii", s.record.id));
        write_volume(&s.volume, &path, Datatype::Float32).map_err(|e| werr(&e))?;
        s.record.path = Some(path);
    }
    let manifest = dir.join("manifest.csv");
    let records: Vec<SubjectRecord> = cohort.iter().map(|s| s.record.clone()).collect();
    write_manifest(&manifest, &records).map_err(|e| werr(&e))?;
    Ok(WrittenCohort {
        manifest,
        atlas,
        relevance,
    })
}

/// One fold of a cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified k-fold split. Each class is shuffled, then dealt round-robin
/// with a counter that carries over between classes. A class present at all
/// needs at least two members so every training side contains it.
pub fn split_cohort(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<Fold>, SynthError> {
    if folds < 2 {
        return Err(SynthError::Split(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if labels.len() < folds {
        return Err(SynthError::Split(format!(
            "{} subjects for {folds} folds",
            labels.len()
        )));
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut counter = 0usize;
    for (k, class) in [Label::Pd, Label::Other].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() == 1 {
            return Err(SynthError::Split(format!(
                "too few subjects per class: one {class} subject cannot appear on both sides of a split"
            )));
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            seed, 4, k as u64,
        ])));
        for i in members {
            assignment[i] = counter % folds;
            counter += 1;
        }
    }
    Ok((0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}
