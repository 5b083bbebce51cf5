mod support;

use m2m_core::embedding::Domain;
use m2m_core::error::Error;
use m2m_core::reid::{
    average_precision, evaluate, extract_features, random_features, train_feature_learner, EvalReport,
    FeatureLearnerSpec, Scheme, Tag,
};
use m2m_core::synthdata::{synthesize, DatasetRecord, Split, SynthSpec};
use m2m_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{brute_force_eval as brute_force, eval_instance as instance, to_tensor, Instance};

fn run(x: &Instance, k: usize) -> Result<EvalReport, Error> {
    evaluate(&to_tensor(&x.q), &x.qt, &to_tensor(&x.g), &x.gt, k)
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for n in 0..200 {
        let x = instance(&mut rng, n % 2 == 0);
        let k = x.g.len();
        let oracle = brute_force(&x.q, &x.qt, &x.g, &x.gt, k);
        match (run(&x, k), oracle) {
            (Ok(r), Some((cmc, map, excluded))) => {
                assert_eq!(r.cmc, cmc, "instance {n}");
                assert_eq!(r.map, map, "instance {n}");
                assert_eq!(r.n_excluded_queries, excluded);
                assert_eq!((r.n_query, r.n_gallery), (x.q.len(), x.g.len()));
                checked += 1;
            }
            (Err(Error::Validation(_)), None) => {}
            (r, o) => panic!("instance {n}: {r:?} vs {o:?}"),
        }
    }
    assert!(checked > 150);
}

#[test]
fn average_precision_hand_cases() {
    assert_eq!(average_precision(&[1, 3]), (1.0 + 2.0 / 3.0) / 2.0);
    assert!((average_precision(&[1, 3]) - 0.833_333_333_333_333_3).abs() < 1e-15);
    let q = to_tensor(&[vec![0.0, 0.0]]);
    let g = to_tensor(&[vec![0.1, 0.0], vec![0.2, 0.0], vec![5.0, 0.0]]);
    let qt = [Tag { identity: 1, camera: 1 }];
    let gt = [
        Tag { identity: 1, camera: 2 },
        Tag { identity: 1, camera: 3 },
        Tag { identity: 2, camera: 2 },
    ];
    let r = evaluate(&q, &qt, &g, &gt, 3).unwrap();
    assert_eq!((r.map, r.rank1()), (1.0, 1.0));
    let gt = [
        Tag { identity: 1, camera: 2 },
        Tag { identity: 2, camera: 3 },
        Tag { identity: 1, camera: 2 },
    ];
    let g = to_tensor(&[vec![0.1, 0.0], vec![0.2, 0.0], vec![0.3, 0.0]]);
    let r = evaluate(&q, &qt, &g, &gt, 3).unwrap();
    assert_eq!(r.map, average_precision(&[1, 3]));
}

#[test]
fn no_valid_query_is_an_error() {
    let q = to_tensor(&[vec![0.0]]);
    let g = to_tensor(&[vec![1.0]]);
    let t = [Tag { identity: 1, camera: 1 }];
    assert!(matches!(evaluate(&q, &t, &g, &t, 1), Err(Error::Validation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn report_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = instance(&mut rng, seed % 2 == 0);
        let k = x.g.len();
        if let Ok(r) = run(&x, k) {
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(*r.cmc.last().unwrap() <= 1.0);
            prop_assert!((0.0..=1.0).contains(&r.map));

            // scaling features by 2 or 3 scales squared distances monotonically (exactly for integers)
            let mut scaled = Instance { q: x.q.clone(), qt: x.qt.clone(), g: x.g.clone(), gt: x.gt.clone() };
            let c = if seed % 2 == 0 { 3.0 } else { 2.0 };
            for v in scaled.q.iter_mut().chain(scaled.g.iter_mut()).flatten() {
                *v *= c;
            }
            let s = run(&scaled, k).unwrap();
            prop_assert_eq!(&s.cmc, &r.cmc);
            prop_assert_eq!(s.map, r.map);

            // a same-identity same-camera gallery item is ignored
        }
        let single = Instance { q: vec![x.q[0].clone()], qt: vec![x.qt[0]], g: x.g.clone(), gt: x.gt.clone() };
        if let Ok(r) = run(&single, k) {
            let mut extra = Instance { q: single.q.clone(), qt: single.qt.clone(), g: x.g.clone(), gt: x.gt.clone() };
            let at = seed as usize % (k + 1);
            extra.g.insert(at, x.q[0].clone());
            extra.gt.insert(at, x.qt[0]);
            let e = run(&extra, k).unwrap();
            prop_assert_eq!(&e.cmc, &r.cmc);
            prop_assert_eq!(e.map, r.map);
        }
    }

    #[test]
    fn gallery_order_does_not_matter_without_ties(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = instance(&mut rng, false);
        let k = x.g.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(seed as usize % k);
        let p = Instance {
            q: x.q.clone(),
            qt: x.qt.clone(),
            g: order.iter().map(|&i| x.g[i].clone()).collect(),
            gt: order.iter().map(|&i| x.gt[i]).collect(),
        };
        match (run(&x, k), run(&p, k)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.cmc, b.cmc);
                prop_assert_eq!(a.map, b.map);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
    }
}

fn identity_data() -> (Vec<DatasetRecord<f32>>, Vec<DatasetRecord<f32>>) {
    let spec = SynthSpec {
        n_identities: 24,
        n_test_identities: 1,
        ..SynthSpec::desk(2, 2, 31)
    };
    let records = synthesize::<f32>(&spec).unwrap();
    let train: Vec<_> = records
        .iter()
        .filter(|r| r.camera.domain == Domain::Source && r.split == Split::Train)
        .cloned()
        .collect();
    let target: Vec<_> = records
        .into_iter()
        .filter(|r| r.camera.domain == Domain::Target)
        .collect();
    (train, target)
}

#[test]
fn schemes_log_their_sample_counts() {
    let (train, _) = identity_data();
    let (fake, real): (Vec<_>, Vec<_>) = train.iter().cloned().partition(|r| r.camera.index == 1);
    let mut spec = FeatureLearnerSpec::desk(24, Scheme::Fake, 1);
    spec.fit.epochs = 1;
    let a = train_feature_learner(&spec, &fake, Some(&real)).unwrap();
    assert_eq!((a.log.n_fake, a.log.n_real), (fake.len(), 0));
    spec.scheme = Scheme::FakePlusReal;
    let b = train_feature_learner(&spec, &fake, Some(&real)).unwrap();
    assert_eq!((b.log.n_fake, b.log.n_real), (fake.len(), real.len()));
    assert!(train_feature_learner(&spec, &fake, None).is_err());
}

#[test]
fn mismatched_identities_are_rejected() {
    let (train, _) = identity_data();
    let fake: Vec<_> = train.iter().filter(|r| r.identity != 3).cloned().collect();
    let spec = FeatureLearnerSpec::desk(23, Scheme::FakePlusReal, 1);
    let err = train_feature_learner(&spec, &fake, Some(&train)).unwrap_err();
    assert!(
        matches!(err, Error::Validation(ref m) if m.contains("identity")),
        "{err}"
    );
    let spec = FeatureLearnerSpec::desk(7, Scheme::Fake, 1);
    assert!(matches!(
        train_feature_learner(&spec, &fake, None),
        Err(Error::Validation(_))
    ));
}

#[test]
fn desk_learner_fits_and_separates_identities() {
    let (train, _) = identity_data();
    let spec = FeatureLearnerSpec::desk(24, Scheme::Fake, 5);
    let model = train_feature_learner(&spec, &train, None).unwrap();
    assert!(
        model.log.train_accuracy >= 0.9,
        "train accuracy {}",
        model.log.train_accuracy
    );

    let again = train_feature_learner(&spec, &train, None).unwrap();
    assert_eq!(
        model.log.fit.epoch_loss[0].to_bits(),
        again.log.fit.epoch_loss[0].to_bits()
    );

    let images: Vec<&Tensor<f32>> = train.iter().map(|r| &r.image).collect();
    let f = extract_features(&model, &images).unwrap();
    let d = f.shape()[1];
    for row in f.data().chunks(d) {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6, "norm {n}");
    }
    let twice = extract_features(&model, &[images[0], images[0]]).unwrap();
    assert_eq!(twice.data()[..d], twice.data()[d..]);

    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
    for a in 0..train.len() {
        for b in a + 1..train.len() {
            let dist = m2m_core::reid::sq_distance(&f.data()[a * d..(a + 1) * d], &f.data()[b * d..(b + 1) * d]).sqrt();
            if train[a].identity == train[b].identity {
                intra += dist;
                ni += 1;
            } else {
                inter += dist;
                ne += 1;
            }
        }
    }
    assert!(intra / (ni as f64) < inter / (ne as f64));
}

#[test]
fn random_features_are_unit_rows() {
    let f = random_features::<f64>(7, 16, 3);
    for row in f.data().chunks(16) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
    }
    assert_eq!(f, random_features::<f64>(7, 16, 3));
}
