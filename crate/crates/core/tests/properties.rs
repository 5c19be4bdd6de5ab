use proptest::prelude::*;

use pd_diag::aggregator::{
    encode_dense, region_average_pool, upsample_fuse, weighted_aggregate, weighted_aggregate_with,
    AggregatedFeature, EncoderParams, FusionProjection,
};
use pd_diag::diagnoser::{
    age_loss, classify, cls_loss, correct_logits, decide, predict_brain_age, BranchParams, Label,
    Logits,
};
use pd_diag::priors::{age_gap, default_relevance_table, AgingPriorParams, RelevanceClass};
use pd_diag::seed::derive_seed;
use pd_diag::synth::{block_atlas, generate_cohort, split_cohort, SynthConfig};
use pd_diag::training::{adamw_step, cosine_lr, roc_auc, Confusion, Metrics, OptimState};
use pd_diag::volume_io::{
    decode_volume, encode_volume, onehot_atlas, parse_header, AtlasVolume, Datatype, Volume3D,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..7)
}

fn volume() -> impl Strategy<Value = Volume3D> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(-1e6f32..1e6, d.0 * d.1 * d.2)
            .prop_map(move |v| Volume3D::new(d, v.into_iter().map(f64::from).collect()).unwrap())
    })
}

fn atlas(regions: usize) -> impl Strategy<Value = AtlasVolume> {
    dims()
        .prop_filter("room for every region", move |d| d.0 * d.1 * d.2 >= regions)
        .prop_flat_map(move |d| {
            let n = d.0 * d.1 * d.2;
            (
                Just(d),
                prop::collection::vec(0..=regions as u16, n),
                Just(n),
            )
        })
        .prop_map(move |(d, mut labels, n)| {
            // Guarantee every region at least one voxel.
            for r in 1..=regions {
                labels[(r * 7919) % n] = r as u16;
            }
            let mut seen = vec![false; regions + 1];
            labels.iter().for_each(|&l| seen[l as usize] = true);
            for (r, _) in seen.iter().enumerate().skip(1).filter(|(_, s)| !**s) {
                let i = labels.iter().position(|&l| l == 0).unwrap_or(0);
                labels[i] = r as u16;
            }
            (d, labels)
        })
        .prop_filter_map("valid atlas", move |(d, labels)| {
            AtlasVolume::new(d, labels, regions).ok()
        })
}

fn byteswap_header(bytes: &mut [u8]) {
    let mut swap = |off: usize, w: usize| bytes[off..off + w].reverse();
    swap(0, 4);
    (0..8).for_each(|i| swap(40 + 2 * i, 2));
    swap(70, 2);
    swap(72, 2);
    (0..8).for_each(|i| swap(76 + 4 * i, 4));
    swap(108, 4);
    swap(112, 4);
}

proptest! {
    #[test]
    fn float32_round_trip_is_identity(v in volume()) {
        let bytes = encode_volume(&v, Datatype::Float32).unwrap();
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.header.datatype, Datatype::Float32);
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_parse_ignores_byte_order(v in volume()) {
        let mut bytes = encode_volume(&v, Datatype::Float32).unwrap();
        let le = parse_header(&bytes).unwrap();
        byteswap_header(&mut bytes);
        let mut be = parse_header(&bytes).unwrap();
        prop_assert_ne!(be.endianness, le.endianness);
        be.endianness = le.endianness;
        prop_assert_eq!(be, le);
    }

    #[test]
    fn onehot_partitions_voxels(a in atlas(5)) {
        let oh = onehot_atlas(&a);
        for (v, &l) in a.labels().iter().enumerate() {
            let total: u32 = (1..=5).map(|r| oh.get(r, v) as u32).sum();
            prop_assert_eq!(total, u32::from(l > 0));
        }
    }

    #[test]
    fn onehot_permutes_with_labels(a in atlas(4), perm in Just(vec![1u16, 2, 3, 4]).prop_shuffle()) {
        let relabeled: Vec<u16> = a.labels().iter().map(|&l| if l == 0 { 0 } else { perm[l as usize - 1] }).collect();
        let b = AtlasVolume::new(a.dims(), relabeled, 4).unwrap();
        let (oa, ob) = (onehot_atlas(&a), onehot_atlas(&b));
        prop_assert_eq!(&oa, &onehot_atlas(&a));
        for r in 1..=4 {
            prop_assert_eq!(oa.channel(r), ob.channel(perm[r - 1] as usize));
        }
    }

    #[test]
    fn class_change_moves_one_weight(region in 1usize..=48, k in 0usize..3) {
        let class = [RelevanceClass::Strong, RelevanceClass::Potential, RelevanceClass::None][k];
        let base = default_relevance_table();
        let mut t = base.clone();
        t.set_class(region, class);
        let changed = base.weights().iter().zip(t.weights()).filter(|(a, b)| *a != b).count();
        prop_assert_eq!(changed, usize::from(base.class(region) != class));
        prop_assert_eq!(t.weights()[region - 1], class.weight());
    }

    #[test]
    fn age_gap_antisymmetric(a in 0.1f64..200.0, b in 0.1f64..200.0) {
        prop_assert_eq!(age_gap(a, b).unwrap(), -age_gap(b, a).unwrap());
    }

    #[test]
    fn pooling_is_linear_and_bounded(
        a in atlas(3),
        seed in any::<u64>(),
        k1 in -3.0f64..3.0,
        k2 in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.labels().len();
        let mk = |rng: &mut ChaCha8Rng| {
            use rand::Rng;
            Volume3D::new(a.dims(), (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
        };
        let (v1, v2) = (mk(&mut rng), mk(&mut rng));
        let mix = Volume3D::new(
            a.dims(),
            v1.data().iter().zip(v2.data()).map(|(x, y)| k1 * x + k2 * y).collect(),
        )
        .unwrap();
        let (p1, p2, pm) = (
            region_average_pool(&v1, &a).unwrap(),
            region_average_pool(&v2, &a).unwrap(),
            region_average_pool(&mix, &a).unwrap(),
        );
        let lo = v1.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v1.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for r in 0..3 {
            prop_assert!((pm.0[r] - (k1 * p1.0[r] + k2 * p2.0[r])).abs() < 1e-9);
            prop_assert!(lo <= p1.0[r] && p1.0[r] <= hi);
        }
    }

    #[test]
    fn aggregate_rescale_and_affine(
        vals in prop::collection::vec(-5.0f64..5.0, 1..48),
        k in 0.001f64..1000.0,
        a in -4.0f64..4.0,
        b in -10.0f64..10.0,
    ) {
        let w: Vec<f64> = (0..vals.len()).map(|i| 1.0 / (1 + i % 5) as f64).collect();
        let base = weighted_aggregate_with(&vals, &w).unwrap();
        let scaled = weighted_aggregate_with(&vals, &w.iter().map(|x| x * k).collect::<Vec<_>>()).unwrap();
        let moved = weighted_aggregate_with(&vals.iter().map(|v| a * v + b).collect::<Vec<_>>(), &w).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * y.abs().max(1.0);
        prop_assert!(close(scaled.mean, base.mean) && close(scaled.std, base.std));
        prop_assert!(close(moved.mean, a * base.mean + b));
        prop_assert!(close(moved.std, a.abs() * base.std));
    }

    #[test]
    fn calibration_is_monotone_in_gap(
        pd in -3.0f64..3.0,
        ot in -3.0f64..3.0,
        alpha in 0.05f64..2.0,
        d1 in -5.0f64..12.0,
        step in 0.01f64..3.0,
    ) {
        let prior = AgingPriorParams { alpha, ..AgingPriorParams::default() };
        let z = Logits::new(pd, ot);
        let p = |d: f64| decide(correct_logits(z, d, &prior)).1;
        prop_assert!(p(d1 + step) > p(d1));
    }

    #[test]
    fn age_loss_is_convex_and_nonnegative(
        x in -40.0f64..40.0,
        y in -40.0f64..40.0,
        t in 0.0f64..1.0,
        pd in any::<bool>(),
    ) {
        let prior = AgingPriorParams::default();
        let label = if pd { Label::Pd } else { Label::Other };
        let f = |d: f64| age_loss(d, label, &prior);
        let mid = t * x + (1.0 - t) * y;
        prop_assert!(f(mid) <= t * f(x) + (1.0 - t) * f(y) + 1e-9);
        prop_assert!(f(x) >= 0.0);
    }

    #[test]
    fn cls_loss_properties(pd in -50.0f64..50.0, ot in -50.0f64..50.0, c in -100.0f64..100.0, is_pd in any::<bool>()) {
        let label = if is_pd { Label::Pd } else { Label::Other };
        let z = Logits::new(pd, ot);
        let l = cls_loss(z, label);
        prop_assert!(l >= 0.0);
        prop_assert!((cls_loss(Logits::new(pd + c, ot + c), label) - l).abs() < 1e-9);
        prop_assert!((cls_loss(Logits::new(pd, pd), label) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn decision_shift_invariant(pd in -50.0f64..50.0, ot in -50.0f64..50.0, c in -100.0f64..100.0) {
        prop_assume!((pd - ot).abs() > 1e-9);
        prop_assert_eq!(decide(Logits::new(pd + c, ot + c)).0, decide(Logits::new(pd, ot)).0);
    }

    #[test]
    fn auc_matches_pairwise_count(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn metric_identities(tp in 0usize..500, tn in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        let c = Confusion { tp, tn, fp, fn_ };
        let m = Metrics::from_confusion(c, None);
        match m.acc {
            Some(acc) => prop_assert!((acc * c.total() as f64 - (tp + tn) as f64).abs() < 1e-9),
            None => prop_assert_eq!(c.total(), 0),
        }
        match m.tpr {
            Some(tpr) => prop_assert!((tpr * (tp + fn_) as f64 - tp as f64).abs() < 1e-9),
            None => prop_assert_eq!(tp + fn_, 0),
        }
    }

    #[test]
    fn zero_rate_adamw_is_identity(
        params in prop::collection::vec(-10.0f64..10.0, 1..30),
        wd in 0.0f64..0.1,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<f64> = params.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut state = OptimState::new(params.len(), 1e-3, wd, 10);
        let mut p = params.clone();
        adamw_step(&mut p, &grads, &mut state, 0.0, None).unwrap();
        prop_assert_eq!(p, params);
    }

    #[test]
    fn cosine_rate_stays_in_range(total in 1u64..10_000, frac in 0.0f64..=1.0, base in 1e-6f64..1.0) {
        let step = (frac * total as f64) as u64;
        let lr = cosine_lr(step, total, base).unwrap();
        prop_assert!((0.0..=base).contains(&lr));
    }

    #[test]
    fn derived_seeds_are_pure(parts in prop::collection::vec(any::<u64>(), 0..5)) {
        prop_assert_eq!(derive_seed(&parts), derive_seed(&parts));
    }

    #[test]
    fn split_is_stratified_partition(
        labels in prop::collection::vec(any::<bool>(), 4..60),
        folds in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<Label> = labels.into_iter().map(|b| if b { Label::Pd } else { Label::Other }).collect();
        let n_pd = labels.iter().filter(|l| **l == Label::Pd).count();
        prop_assume!(labels.len() >= folds && n_pd != 1 && labels.len() - n_pd != 1);
        let split = split_cohort(&labels, folds, seed).unwrap();
        prop_assert_eq!(&split, &split_cohort(&labels, folds, seed).unwrap());
        let mut seen = vec![0; labels.len()];
        for f in &split {
            f.test.iter().for_each(|&i| seen[i] += 1);
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).cloned().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let pd_test = f.test.iter().filter(|&&i| labels[i] == Label::Pd).count();
            prop_assert!(pd_test.abs_diff(n_pd / folds) <= 1);
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn block_atlas_partitions_grid(
        d in 1usize..5, h in 1usize..5, w in 1usize..5, margin in 0usize..3,
    ) {
        let dims = (4 * d + 2 * margin, 4 * h + 2 * margin, 4 * w + 2 * margin);
        let a = block_atlas(dims, margin);
        let (dd, hh, ww) = dims;
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    let inside = [(z, dd), (y, hh), (x, ww)].iter().all(|&(i, n)| i >= margin && i < n - margin);
                    let l = a.labels()[(z * hh + y) * ww + x];
                    prop_assert_eq!(l > 0, inside);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_fusion_ignores_priors(seed in any::<u64>(), mean in -5.0f64..5.0, std in 0.0f64..3.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Volume3D::new((8, 8, 8), (0..512).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let enc = EncoderParams::init(4, &mut rng);
        let b1 = BranchParams::init(4, 2, &mut rng);
        let b2 = BranchParams::init(4, 1, &mut rng);
        let dense = encode_dense(&v, &enc).unwrap();
        let zero = FusionProjection::zeros(4);
        let a = upsample_fuse(&AggregatedFeature { mean, std }, &dense, &zero).unwrap();
        let table = default_relevance_table();
        let pooled = pd_diag::aggregator::RegionPooled((0..48).map(|i| i as f64).collect());
        let b = upsample_fuse(&weighted_aggregate(&pooled, &table).unwrap(), &dense, &zero).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(classify(&a, &b1).unwrap(), classify(&b, &b1).unwrap());
        prop_assert_eq!(predict_brain_age(&a, &b2).unwrap(), predict_brain_age(&b, &b2).unwrap());
    }

    #[test]
    fn acceleration_never_reduces_separation(lo in 0.0f64..20.0, extra in 0.0f64..20.0, seed in 0u64..1000) {
        let gap = |acc: f64| {
            let cfg = SynthConfig {
                n_subjects: 6,
                dims: (12, 16, 16),
                seed,
                acceleration: acc,
                noise_std: 0.0,
                region_noise_std: 0.0,
                ..SynthConfig::default()
            };
            let (cohort, sa) = generate_cohort(&cfg).unwrap();
            separation(&cohort, &sa, cfg.gain)
        };
        prop_assert!(gap(lo + extra) >= gap(lo) - 1e-12);
    }
}

// Smallest PD minus largest Other Strong-region mean, after removing the age term.
fn separation(
    cohort: &[pd_diag::cohort::Subject],
    sa: &pd_diag::synth::SynthAtlas,
    gain: f64,
) -> f64 {
    let strong = sa.table.ids_with(RelevanceClass::Strong);
    let mut pd_min = f64::INFINITY;
    let mut other_max = f64::NEG_INFINITY;
    for s in cohort {
        let p = region_average_pool(&s.volume, &sa.atlas).unwrap();
        let m = strong.iter().map(|&r| p.0[r - 1]).sum::<f64>() / strong.len() as f64
            - gain * s.record.age;
        if s.record.label == Some(Label::Pd) {
            pd_min = pd_min.min(m);
        } else {
            other_max = other_max.max(m);
        }
    }
    pd_min - other_max
}
