//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use m2m_core::embedding::DomainShape;
use m2m_core::losses::{AdversarialForm, LossWeights};
use m2m_core::networks::{DiscriminatorSpec, GeneratorSpec, Norm, Preset};
use m2m_core::params::ParamId;
use m2m_core::reid::Tag;
use m2m_core::trainer::{evaluate_objective, step_gradients, Batch, GanModels, GradientGates, Phase};
use m2m_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random `(c, h, w)` with `c <= 3`, `h, w <= 4`.
pub fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ]
}

// ---------------------------------------------------------------------------
// Loss transliterations

pub fn adversarial_oracle(real: &[f64], fake: &[f64]) -> f64 {
    let mut a = 0.0;
    for &p in real {
        a += p.ln();
    }
    let mut b = 0.0;
    for &p in fake {
        b += (1.0 - p).ln();
    }
    a / real.len() as f64 + b / fake.len() as f64
}

pub fn reconstruction_oracle(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += (a - b).abs();
    }
    acc / x.len() as f64
}

/// `mask` is one plane broadcast over `channels`.
pub fn mask_oracle(x: &[f64], y: &[f64], mask: &[f64], channels: usize) -> f64 {
    let plane = mask.len();
    let mut acc = 0.0;
    for c in 0..channels {
        for p in 0..plane {
            let i = c * plane + p;
            let d = x[i] * mask[p] - y[i] * mask[p];
            acc += d * d;
        }
    }
    acc / x.len() as f64
}

/// Negative log softmax probability of class `label` (0-based).
pub fn cross_entropy_oracle(logits: &[f64], label: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[label].exp() / z).ln()
}

/// `(L_D, L_G)` from terms `[adv_s2t, adv_t2s, rec, mask, dom_real, dom_fake]`.
pub fn objectives_oracle(t: &[f64; 6], l: (f64, f64, f64)) -> (f64, f64) {
    let [adv_s2t, adv_t2s, rec, mask, dom_real, dom_fake] = *t;
    (
        -adv_s2t - adv_t2s + l.0 * dom_real,
        adv_s2t + adv_t2s + l.0 * dom_fake + l.1 * mask + l.2 * rec,
    )
}

// ---------------------------------------------------------------------------
// Retrieval metrics by direct counting

/// `(cmc, map, excluded queries)`. Rank of each valid gallery item is one
/// plus the number of valid items that are closer, or equally close with a
/// lower index.
pub fn brute_force_eval(
    q: &[Vec<f64>],
    qt: &[Tag],
    g: &[Vec<f64>],
    gt: &[Tag],
    k: usize,
) -> Option<(Vec<f64>, f64, usize)> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut hits = vec![0usize; k];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (qi, tag) in qt.iter().enumerate() {
        let ok: Vec<usize> = (0..g.len())
            .filter(|&i| !(gt[i].identity == tag.identity && gt[i].camera == tag.camera))
            .collect();
        let rank_of = |i: usize| {
            let di = dist(&q[qi], &g[i]);
            1 + ok
                .iter()
                .filter(|&&j| {
                    let dj = dist(&q[qi], &g[j]);
                    dj < di || (dj == di && j < i)
                })
                .count()
        };
        let mut rel: Vec<usize> = ok
            .iter()
            .filter(|&&i| gt[i].identity == tag.identity)
            .map(|&i| rank_of(i))
            .collect();
        if rel.is_empty() {
            continue;
        }
        rel.sort_unstable();
        valid += 1;
        for (kk, h) in hits.iter_mut().enumerate() {
            if rel[0] <= kk + 1 {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for (n, &r) in rel.iter().enumerate() {
            ap += (n + 1) as f64 / r as f64;
        }
        ap_sum += ap / rel.len() as f64;
    }
    (valid > 0).then(|| {
        (
            hits.iter().map(|&h| h as f64 / valid as f64).collect(),
            ap_sum / valid as f64,
            qt.len() - valid,
        )
    })
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::from_vec(&[rows.len(), d], rows.concat()).unwrap()
}

pub struct Instance {
    pub q: Vec<Vec<f64>>,
    pub qt: Vec<Tag>,
    pub g: Vec<Vec<f64>>,
    pub gt: Vec<Tag>,
}

/// Up to 5 queries and 20 gallery items with 3-d features; `integer`
/// features produce distance ties.
pub fn eval_instance(rng: &mut ChaCha8Rng, integer: bool) -> Instance {
    let nq = rng.random_range(1..=5);
    let ng = rng.random_range(1..=20);
    let feat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..3)
            .map(|_| {
                if integer {
                    rng.random_range(0..3) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect()
    };
    let tag = |rng: &mut ChaCha8Rng| Tag {
        identity: rng.random_range(0..4),
        camera: rng.random_range(1..=3),
    };
    Instance {
        q: (0..nq).map(|_| feat(rng)).collect(),
        qt: (0..nq).map(|_| tag(rng)).collect(),
        g: (0..ng).map(|_| feat(rng)).collect(),
        gt: (0..ng).map(|_| tag(rng)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Generator gradient check

pub const FD_STEP: f64 = 1e-6;

/// Tiny pair of generators (base width 1, one residual block) on 8x8 images
/// with M = N = 2, plus small frozen discriminators.
pub fn tiny_models(seed: u64) -> GanModels<f64> {
    let shape = DomainShape::new(2, 2, 8, 8).unwrap();
    let gen = GeneratorSpec {
        in_channels: shape.embedded_channels(),
        base_width: 1,
        n_res_blocks: 1,
        norm: Norm::Instance,
        preset: Preset::Desk,
    };
    let disc = |n| DiscriminatorSpec {
        n_classes: n,
        patch_output: true,
        base_width: 2,
        n_down: 2,
        n_extra: 0,
        head_kernel: 2,
        slope_milli: 200,
        preset: Preset::Desk,
    };
    GanModels::from_specs(shape, gen, disc(2), disc(2), seed).unwrap()
}

pub fn tiny_batch(seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = |rng: &mut ChaCha8Rng| rand_tensor(rng, &[1, 1, 8, 8], 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
    Batch {
        xs: rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0),
        ms: mask(&mut rng),
        s_slots: vec![(0, 1)],
        xt: rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0),
        mt: mask(&mut rng),
        t_slots: vec![(1, 0)],
    }
}

pub struct GradCheck {
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares the analytic generator-objective gradient with central
/// differences over every generator parameter. Relative error uses a
/// denominator floor of 1e-3.
pub fn generator_gradcheck(models: &mut GanModels<f64>, batch: &Batch<f64>) -> GradCheck {
    let w = LossWeights::PAPER;
    let n_params = models.g.params().count() + models.g_bar.params().count();
    let sg = step_gradients(
        models,
        batch,
        &w,
        AdversarialForm::Log,
        Phase::G,
        GradientGates::default(),
    )
    .unwrap();
    let mut worst = (0.0f64, String::new());
    for role in 0..2 {
        let n_arrays = if role == 0 {
            models.g.params().len()
        } else {
            models.g_bar.params().len()
        };
        for a in 0..n_arrays {
            let len = models.stores()[role].get(ParamId(a)).len();
            for e in 0..len {
                let f = |models: &mut GanModels<f64>, delta: f64| {
                    models.stores_mut()[role].get_mut(ParamId(a)).data_mut()[e] += delta;
                    let v = evaluate_objective(models, batch, &w, AdversarialForm::Log, Phase::G)
                        .unwrap()
                        .total_g;
                    models.stores_mut()[role].get_mut(ParamId(a)).data_mut()[e] -= delta;
                    v
                };
                let num = (f(models, FD_STEP) - f(models, -FD_STEP)) / (2.0 * FD_STEP);
                let ana = sg.grads[role][a].as_ref().map(|g| g.data()[e]).unwrap_or(0.0);
                let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
                if err > worst.0 {
                    worst = (
                        err,
                        format!("role {role} array {a} elem {e}: analytic {ana} numeric {num}"),
                    );
                }
            }
        }
    }
    GradCheck {
        n_params,
        max_rel_error: worst.0,
        worst: worst.1,
    }
}
