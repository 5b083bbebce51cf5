mod support;

use m2m_core::embedding::{DomainShape, SubDomainLabel};
use m2m_core::losses::{
    adversarial_loss, adversarial_loss_from_logits, compose_objectives, mask_identity_loss, reconstruction_loss,
    subdomain_classification_loss, LossTerms, LossWeights,
};
use m2m_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{
    adversarial_oracle, cross_entropy_oracle, mask_oracle, objectives_oracle as oracle_objectives, rand_shape,
    rand_tensor, reconstruction_oracle, rel,
};

#[test]
fn adversarial_matches_scalar_transliteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = rand_shape(&mut rng);
        let real = rand_tensor(&mut rng, &s, 0.01, 0.99);
        let fake = rand_tensor(&mut rng, &s, 0.01, 0.99);
        let oracle = adversarial_oracle(real.data(), fake.data());
        let got = adversarial_loss(&real, &fake).unwrap();
        assert!(rel(got.value, oracle) < 1e-12, "{} vs {oracle}", got.value);
        assert_eq!(got.clamp_events, 0);
    }
}

#[test]
fn adversarial_logit_form_matches_probability_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = rand_shape(&mut rng);
        let zr = rand_tensor(&mut rng, &s, -4.0, 4.0);
        let zf = rand_tensor(&mut rng, &s, -4.0, 4.0);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let oracle = zr.data().iter().map(|&z| sig(z).ln()).sum::<f64>() / zr.len() as f64
            + zf.data().iter().map(|&z| (1.0 - sig(z)).ln()).sum::<f64>() / zf.len() as f64;
        let got = adversarial_loss_from_logits(&zr, &zf);
        assert!(rel(got, oracle) < 1e-12);
    }
}

#[test]
fn adversarial_clamps_exact_extremes_and_rejects_out_of_range() {
    let real = Tensor::<f64>::full(&[1, 2, 2], 1.0);
    let fake = Tensor::<f64>::full(&[1, 2, 2], 0.0);
    let v = adversarial_loss(&real, &fake).unwrap();
    assert_eq!(v.clamp_events, 8);
    assert!(v.value <= 0.0 && v.value > -1e-6);
    let bad = Tensor::<f64>::full(&[1, 2, 2], 1.5);
    assert!(adversarial_loss(&bad, &fake).is_err());
}

#[test]
fn reconstruction_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let s = rand_shape(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let y = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let oracle = reconstruction_oracle(x.data(), y.data());
        assert!(rel(reconstruction_loss(&x, &y).unwrap(), oracle) < 1e-12);
    }
}

#[test]
fn mask_identity_hand_case() {
    // 3 channels, 2x2; one masked pixel where x = 1.0 and fake = 0.5.
    let mut x = vec![0.0; 12];
    let mut f = vec![0.0; 12];
    for c in 0..3 {
        x[c * 4] = 1.0;
        f[c * 4] = 0.5;
        x[c * 4 + 1] = 0.9;
        f[c * 4 + 1] = -0.9;
    }
    let x = Tensor::from_vec(&[3, 2, 2], x).unwrap();
    let f = Tensor::from_vec(&[3, 2, 2], f).unwrap();
    let m = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let oracle = (0.25 + 0.25 + 0.25) / 12.0;
    assert!(rel(mask_identity_loss(&x, &f, &m).unwrap(), oracle) < 1e-12);
}

#[test]
fn mask_identity_matches_oracle_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let s = rand_shape(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let y = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let plane = s[1] * s[2];
        let mask: Vec<f64> = (0..plane).map(|_| rng.random_range(0..2) as f64).collect();
        let oracle = mask_oracle(x.data(), y.data(), &mask, s[0]);
        let m = Tensor::from_vec(&[1, s[1], s[2]], mask).unwrap();
        let got = mask_identity_loss(&x, &y, &m).unwrap();
        if oracle == 0.0 {
            assert_eq!(got, 0.0);
        } else {
            assert!(rel(got, oracle) < 1e-12);
        }
    }
}

#[test]
fn mask_outside_unit_interval_rejected() {
    let x = Tensor::<f64>::zeros(&[3, 2, 2]);
    let m = Tensor::<f64>::full(&[1, 2, 2], 2.0);
    assert!(mask_identity_loss(&x, &x, &m).is_err());
}

#[test]
fn cross_entropy_matches_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = DomainShape::new(6, 6, 8, 8).unwrap();
    for _ in 0..100 {
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let oracle = cross_entropy_oracle(&logits, 2);
        let got = subdomain_classification_loss(&logits, SubDomainLabel::source(3), &shape).unwrap();
        assert!(rel(got, oracle) < 1e-12);
    }
}

#[test]
fn cross_entropy_length_mismatch_rejected() {
    let shape = DomainShape::new(6, 8, 8, 8).unwrap();
    assert!(subdomain_classification_loss(&[0.0f64; 6], SubDomainLabel::target(1), &shape).is_err());
}

fn terms(t: &[f64; 6]) -> LossTerms {
    LossTerms {
        adv_s2t: t[0],
        adv_t2s: t[1],
        rec: t[2],
        mask: t[3],
        dom_real: t[4],
        dom_fake: t[5],
    }
}

#[test]
fn composition_matches_transliteration_with_preset_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let t: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let (d, g) = compose_objectives(&terms(&t), &LossWeights::PAPER).unwrap();
        let (od, og) = oracle_objectives(&t, (1.0, 100.0, 10.0));
        assert!(rel(d, od) < 1e-9 || (d - od).abs() < 1e-12);
        assert!(rel(g, og) < 1e-9 || (g - og).abs() < 1e-12);
    }
}

#[test]
fn composition_is_linear_with_printed_coefficients() {
    let w = LossWeights {
        lambda1: 1.5,
        lambda2: 7.0,
        lambda3: 0.25,
    };
    let expected = [
        (-1.0, 1.0),
        (-1.0, 1.0),
        (0.0, 0.25),
        (0.0, 7.0),
        (1.5, 0.0),
        (0.0, 1.5),
    ];
    for (k, &(cd, cg)) in expected.iter().enumerate() {
        let mut t = [0.0; 6];
        t[k] = 1.0;
        let (d, g) = compose_objectives(&terms(&t), &w).unwrap();
        assert_eq!((d, g), (cd, cg), "term {k}");
    }
}

#[test]
fn nan_term_is_a_labeled_numeric_error() {
    let mut t = [0.0; 6];
    t[3] = f64::NAN;
    let e = compose_objectives(&terms(&t), &LossWeights::PAPER).unwrap_err();
    assert!(e.to_string().contains("mask"));
    assert_eq!(e.exit_code(), 3);
}

proptest! {
    #[test]
    fn reconstruction_and_mask_are_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_shape(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let y = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[1, s[1], s[2]], 0.0, 1.0).map(|v| v.round());
        let r1 = reconstruction_loss(&x, &y).unwrap();
        prop_assert_eq!(r1, reconstruction_loss(&y, &x).unwrap());
        prop_assert!(r1 > 0.0);
        prop_assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let m1 = mask_identity_loss(&x, &y, &m).unwrap();
        prop_assert_eq!(m1, mask_identity_loss(&y, &x, &m).unwrap());
        prop_assert!(m1 >= 0.0);
        prop_assert_eq!(mask_identity_loss(&x, &x, &m).unwrap(), 0.0);
    }

    #[test]
    fn enlarging_mask_never_decreases_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_shape(&mut rng);
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let y = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let small = rand_tensor(&mut rng, &[1, s[1], s[2]], 0.0, 1.0).map(|v| (v > 0.6) as u8 as f64);
        let extra = rand_tensor(&mut rng, &[1, s[1], s[2]], 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
        let big = small.zip_map(&extra, |a, b| a.max(b));
        prop_assert!(mask_identity_loss(&x, &y, &big).unwrap() >= mask_identity_loss(&x, &y, &small).unwrap());
    }

    #[test]
    fn adversarial_is_nonpositive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_shape(&mut rng);
        let r = rand_tensor(&mut rng, &s, 0.0, 1.0);
        let f = rand_tensor(&mut rng, &s, 0.0, 1.0);
        prop_assert!(adversarial_loss(&r, &f).unwrap().value <= 0.0);
    }
}
