use pd_diag::diagnoser::Label;
use pd_diag::nn::Parameters;
use pd_diag::priors::AgingPriorParams;
use pd_diag::synth::{generate_cohort, SynthConfig};
use pd_diag::training::{
    prepare_samples, train_stage, Architecture, IntensityNorm, ModelParams, Sample, TrainConfig,
    TrainError,
};

fn small_cohort(n: usize, seed: u64) -> (Vec<Sample>, IntensityNorm) {
    let cfg = SynthConfig {
        n_subjects: n,
        dims: (16, 16, 16),
        seed,
        ..SynthConfig::default()
    };
    let (cohort, sa) = generate_cohort(&cfg).unwrap();
    let norm = IntensityNorm::fit(cohort.iter().map(|s| &s.volume));
    (
        prepare_samples(&cohort, &sa.atlas, &sa.table, norm).unwrap(),
        norm,
    )
}

fn fresh(norm: IntensityNorm, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(8, 65.0, 10.0, Architecture::default(), seed);
    p.input_norm = norm;
    p
}

#[test]
fn stage_one_reduces_loss_on_small_cohort() {
    let (samples, norm) = small_cohort(12, 21);
    let config = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let out = train_stage(
        1,
        &samples,
        &config,
        fresh(norm, 1),
        &AgingPriorParams::default(),
    )
    .unwrap();
    let first = out.trace.first().unwrap().loss;
    let last = out.trace.last().unwrap().loss;
    assert_eq!(out.trace.len(), 15);
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn stage_two_at_exact_ages_and_zero_rate_is_stationary() {
    let (mut samples, norm) = small_cohort(8, 22);
    samples.iter_mut().for_each(|s| s.age = 65.0);
    let mut params = fresh(norm, 2);
    // Zero weights leave only the output centre: every prediction is 65.
    params.branch2.fill(0.0);
    let before = params.flatten();
    let config = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let out = train_stage(2, &samples, &config, params, &AgingPriorParams::default()).unwrap();
    assert!(out.trace.iter().all(|e| e.loss == 0.0));
    assert_eq!(out.params.flatten(), before);
}

#[test]
fn stage_two_only_moves_the_age_branch() {
    let (samples, norm) = small_cohort(8, 23);
    let params = fresh(norm, 3);
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train_stage(
        2,
        &samples,
        &config,
        params.clone(),
        &AgingPriorParams::default(),
    )
    .unwrap();
    assert_eq!(out.params.encoder, params.encoder);
    assert_eq!(out.params.fusion, params.fusion);
    assert_eq!(out.params.branch1, params.branch1);
    assert_ne!(out.params.branch2, params.branch2);
}

#[test]
fn no_fusion_keeps_projection_zero() {
    let (samples, norm) = small_cohort(8, 24);
    let arch = Architecture {
        fusion: false,
        aging: true,
    };
    let mut params = ModelParams::init(8, 65.0, 10.0, arch, 4);
    params.input_norm = norm;
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let prior = AgingPriorParams::default();
    for stage in 1..=3 {
        params = train_stage(stage, &samples, &config, params, &prior)
            .unwrap()
            .params;
        assert!(params.fusion.flatten().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let (samples, norm) = small_cohort(10, 25);
    let prior = AgingPriorParams::default();
    let run = |jobs| {
        let config = TrainConfig {
            epochs: 2,
            batch: 3,
            jobs,
            ..TrainConfig::default()
        };
        let mut p = fresh(norm, 5);
        let mut traces = Vec::new();
        for stage in 1..=3 {
            let out = train_stage(stage, &samples, &config, p, &prior).unwrap();
            traces.push(out.trace);
            p = out.params;
        }
        (p.flatten(), traces)
    };
    let (a, ta) = run(1);
    let (b, tb) = run(3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(ta, tb);
}

#[test]
fn stage_errors() {
    let (samples, norm) = small_cohort(6, 26);
    let prior = AgingPriorParams::default();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let p = fresh(norm, 6);
    assert!(matches!(
        train_stage(4, &samples, &config, p.clone(), &prior),
        Err(TrainError::InvalidStage(4))
    ));
    assert!(matches!(
        train_stage(1, &[], &config, p.clone(), &prior),
        Err(TrainError::EmptyCohort)
    ));
    let unhealthy: Vec<Sample> = samples.iter().filter(|s| !s.is_healthy).cloned().collect();
    assert!(matches!(
        train_stage(2, &unhealthy, &config, p.clone(), &prior),
        Err(TrainError::NoHealthy)
    ));
    let mut unlabeled = samples.clone();
    unlabeled[0].label = None;
    assert!(train_stage(1, &unlabeled, &config, p.clone(), &prior).is_err());
    let zero_batch = TrainConfig {
        batch: 0,
        ..config.clone()
    };
    assert!(train_stage(1, &samples, &zero_batch, p.clone(), &prior).is_err());
    let bad_prior = AgingPriorParams { zeta: 1.0, ..prior };
    assert!(train_stage(1, &samples, &config, p, &bad_prior).is_err());
    assert!(samples.iter().any(|s| s.label == Some(Label::Pd)));
}
