//! Adversarial, cycle-reconstruction, masked identity and sub-domain
//! classification losses, and their composition into the discriminator and
//! generator objectives.
//!
//! Each loss has a tape form used for training and a plain tensor form that
//! evaluates the same tape ops on constants. Patch maps and images are
//! reduced by their mean.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::{DomainShape, SubDomainLabel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    /// λ₁ = 1 (classification), λ₂ = 100 (mask), λ₃ = 10 (reconstruction).
    pub const PAPER: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 100.0,
        lambda3: 10.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PAPER
    }
}

/// Per-step loss terms. `rec` and `total_g` are NaN on discriminator steps,
/// which do not run the cycle pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_s2t: f64,
    pub adv_t2s: f64,
    pub rec: f64,
    pub mask: f64,
    pub dom_real: f64,
    pub dom_fake: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 8] = [
        "adv_s2t", "adv_t2s", "rec", "mask", "dom_real", "dom_fake", "total_D", "total_G",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_s2t,
            self.adv_t2s,
            self.rec,
            self.mask,
            self.dom_real,
            self.dom_fake,
            self.total_d,
            self.total_g,
        ]
    }

    /// Bitwise equality, treating NaN payloads as equal only when identical.
    pub fn bit_eq(&self, other: &LossReport) -> bool {
        self.values()
            .iter()
            .zip(other.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Which adversarial objective is used. `Log` is the default and matches the
/// printed minimax form; `LeastSquares` is an opt-in stabilizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    #[default]
    Log,
    LeastSquares,
}

impl AdversarialForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(AdversarialForm::Log),
            "least_squares" => Ok(AdversarialForm::LeastSquares),
            other => Err(Error::validation(format!("unknown adversarial form {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdversarialForm::Log => "log",
            AdversarialForm::LeastSquares => "least_squares",
        }
    }
}

/// Value of the adversarial objective plus how many probabilities had to be
/// clamped away from exactly 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialValue<T> {
    pub value: T,
    pub clamp_events: usize,
}

// ---------------------------------------------------------------------------
// Tape forms

/// `mean log D(real) + mean log(1 - D(fake))` from pre-sigmoid patch maps,
/// using `log σ(z) = -softplus(-z)` and `log(1 - σ(z)) = -softplus(z)`.
pub fn adversarial_from_logits_on_tape<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Var {
    let neg_real = tape.scale(real_logits, -1.0);
    let sp_real = tape.softplus(neg_real);
    let sp_fake = tape.softplus(fake_logits);
    let m_real = tape.mean(sp_real);
    let m_fake = tape.mean(sp_fake);
    let s = tape.add(m_real, m_fake).expect("scalar shapes");
    tape.scale(s, -1.0)
}

/// Least-squares adversarial term. On the discriminator side it returns
/// `-(mean (D(real) - 1)² + mean D(fake)²)` so that `L_D = -adv` is the usual
/// least-squares discriminator loss; on the generator side it returns
/// `mean (D(fake) - 1)²`.
pub fn least_squares_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    real_logits: Var,
    fake_logits: Var,
    generator_side: bool,
) -> Result<Var> {
    let ones_f = tape.constant(Tensor::ones(tape.shape(fake_logits)));
    if generator_side {
        let d = tape.sub(fake_logits, ones_f)?;
        let sq = tape.square(d);
        return Ok(tape.mean(sq));
    }
    let ones_r = tape.constant(Tensor::ones(tape.shape(real_logits)));
    let dr = tape.sub(real_logits, ones_r)?;
    let sr = tape.square(dr);
    let mr = tape.mean(sr);
    let sf = tape.square(fake_logits);
    let mf = tape.mean(sf);
    let s = tape.add(mr, mf)?;
    Ok(tape.scale(s, -1.0))
}

/// `mean |x - y|`.
pub fn reconstruction_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let d = tape.sub(x, y)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `mean((x·m - f·m)²)` over all `batch·c·h·w` elements; `mask` is
/// `(batch, 1, h, w)` and broadcast over channels.
pub fn mask_identity_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, fake: Var, mask: &Tensor<T>) -> Result<Var> {
    let xm = tape.mul_mask(x, mask.clone())?;
    let fm = tape.mul_mask(fake, mask.clone())?;
    let d = tape.sub(xm, fm)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean cross entropy of `(batch, k)` logits against 0-based class slots.
pub fn classification_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, slots: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, slots)
}

// ---------------------------------------------------------------------------
// Tensor forms

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn clamp_probs<T: Scalar>(p: &Tensor<T>, events: &mut usize) -> Result<Tensor<T>> {
    let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
    let mut out = p.clone();
    for v in out.data_mut() {
        if !(*v >= T::zero() && *v <= T::one()) {
            return Err(Error::validation(format!("discriminator score {v} outside [0, 1]")));
        }
        if *v < lo {
            *v = lo;
            *events += 1;
        } else if *v > hi {
            *v = hi;
            *events += 1;
        }
    }
    Ok(out)
}

/// `mean log D(real) + mean log(1 - D(fake))` for probability patch maps of
/// one (source camera, target camera) pair. Always `<= 0`.
pub fn adversarial_loss<T: Scalar>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<AdversarialValue<T>> {
    let mut clamp_events = 0;
    let real = clamp_probs(real_scores, &mut clamp_events)?;
    let fake = clamp_probs(fake_scores, &mut clamp_events)?;
    let mut tape = Tape::new();
    let r = tape.constant(real);
    let f = tape.constant(fake.map(|v| T::one() - v));
    let lr = tape.log(r);
    let lf = tape.log(f);
    let mr = tape.mean(lr);
    let mf = tape.mean(lf);
    let s = tape.add(mr, mf)?;
    Ok(AdversarialValue {
        value: tape.value(s).item(),
        clamp_events,
    })
}

/// Same objective as [`adversarial_loss`] evaluated from pre-sigmoid logits.
pub fn adversarial_loss_from_logits<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> T {
    let mut tape = Tape::new();
    let r = tape.constant(real_logits.clone());
    let f = tape.constant(fake_logits.clone());
    let v = adversarial_from_logits_on_tape(&mut tape, r, f);
    tape.value(v).item()
}

/// L1 distance normalized by element count.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_cycled: &Tensor<T>) -> Result<T> {
    check_same(x, x_cycled, "reconstruction_loss")?;
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x_cycled.clone());
    let v = reconstruction_on_tape(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

/// Masked squared error normalized by the total element count of `x`.
/// `x` and `x_fake` are `(c, h, w)` or `(batch, c, h, w)`; `mask` has a single
/// channel with values in `[0, 1]`.
pub fn mask_identity_loss<T: Scalar>(x: &Tensor<T>, x_fake: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    check_same(x, x_fake, "mask_identity_loss")?;
    if let Some(v) = mask.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::validation(format!("mask value {v} outside [0, 1]")));
    }
    let s = x.shape();
    let (x4, f4, m4) = match s.len() {
        3 => (
            x.clone().reshape(&[1, s[0], s[1], s[2]])?,
            x_fake.clone().reshape(&[1, s[0], s[1], s[2]])?,
            mask.clone().reshape(&[1, 1, s[1], s[2]])?,
        ),
        4 => (x.clone(), x_fake.clone(), mask.clone().reshape(&[s[0], 1, s[2], s[3]])?),
        _ => return Err(Error::shape(format!("mask_identity_loss: image shape {s:?}"))),
    };
    let mut tape = Tape::new();
    let a = tape.constant(x4);
    let b = tape.constant(f4);
    let v = mask_identity_on_tape(&mut tape, a, b, &m4)?;
    Ok(tape.value(v).item())
}

/// `-log softmax(logits)[label.index - 1]`; the logits must cover the
/// cameras of `label.domain`.
pub fn subdomain_classification_loss<T: Scalar>(logits: &[T], label: SubDomainLabel, shape: &DomainShape) -> Result<T> {
    let k = shape.cameras(label.domain);
    if logits.len() != k {
        return Err(Error::shape(format!(
            "{} classifier has {k} classes, got {} logits",
            label.domain.name(),
            logits.len()
        )));
    }
    label.validate(shape)?;
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(&[1, k], logits.to_vec())?);
    let v = classification_on_tape(&mut tape, l, &[label.slot()])?;
    Ok(tape.value(v).item())
}

/// Individual terms entering the two objectives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub adv_s2t: f64,
    pub adv_t2s: f64,
    pub rec: f64,
    pub mask: f64,
    pub dom_real: f64,
    pub dom_fake: f64,
}

/// `L_D = -adv_s2t - adv_t2s + λ₁·dom_real` and
/// `L_G = adv_s2t + adv_t2s + λ₁·dom_fake + λ₂·mask + λ₃·rec`.
pub fn compose_objectives(terms: &LossTerms, w: &LossWeights) -> Result<(f64, f64)> {
    w.validate()?;
    for (name, v) in [
        ("adv_s2t", terms.adv_s2t),
        ("adv_t2s", terms.adv_t2s),
        ("rec", terms.rec),
        ("mask", terms.mask),
        ("dom_real", terms.dom_real),
        ("dom_fake", terms.dom_fake),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("non-finite loss term {v}")));
        }
    }
    Ok((discriminator_objective(terms, w), generator_objective(terms, w)))
}

pub fn discriminator_objective(terms: &LossTerms, w: &LossWeights) -> f64 {
    -terms.adv_s2t - terms.adv_t2s + w.lambda1 * terms.dom_real
}

pub fn generator_objective(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.adv_s2t + terms.adv_t2s + w.lambda1 * terms.dom_fake + w.lambda2 * terms.mask + w.lambda3 * terms.rec
}

impl LossReport {
    pub fn from_terms(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
        let (total_d, total_g) = compose_objectives(terms, w)?;
        Ok(LossReport {
            adv_s2t: terms.adv_s2t,
            adv_t2s: terms.adv_t2s,
            rec: terms.rec,
            mask: terms.mask,
            dom_real: terms.dom_real,
            dom_fake: terms.dom_fake,
            total_d,
            total_g,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn uninformative_discriminator() {
        let v = adversarial_loss(&t(&[1, 2, 2], 0.5), &t(&[1, 2, 2], 0.5)).unwrap();
        assert!((v.value - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(v.clamp_events, 0);
    }

    #[test]
    fn perfect_discriminator_reaches_supremum() {
        let v = adversarial_loss(&t(&[1, 2, 2], 1.0 - PROB_EPS), &t(&[1, 2, 2], PROB_EPS)).unwrap();
        assert!(v.value <= 0.0 && v.value > -1e-6);
    }

    #[test]
    fn exact_zero_and_one_are_clamped_and_counted() {
        let v = adversarial_loss(&t(&[1, 2, 2], 1.0), &t(&[1, 2, 2], 0.0)).unwrap();
        assert_eq!(v.clamp_events, 8);
        assert!(v.value.is_finite());
    }

    #[test]
    fn out_of_range_score_is_domain_error() {
        assert!(matches!(
            adversarial_loss(&t(&[1, 1, 1], 1.5), &t(&[1, 1, 1], 0.5)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn logits_form_agrees_with_probability_form() {
        let rl = Tensor::from_vec(&[1, 2, 2], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let fl = Tensor::from_vec(&[1, 2, 2], vec![-0.7, 1.1, -3.0, 0.4]).unwrap();
        let sig = |x: &Tensor<f64>| x.map(crate::autograd::sigmoid);
        let p = adversarial_loss(&sig(&rl), &sig(&fl)).unwrap().value;
        let l = adversarial_loss_from_logits(&rl, &fl);
        assert!((p - l).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_arithmetic() {
        assert_eq!(
            reconstruction_loss(&t(&[3, 4, 4], 0.2), &t(&[3, 4, 4], 0.2)).unwrap(),
            0.0
        );
        let v = reconstruction_loss(&t(&[3, 4, 4], 0.2), &t(&[3, 4, 4], -0.3)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(reconstruction_loss(&t(&[3, 4, 4], 0.2), &t(&[3, 4, 3], 0.2)).is_err());
    }

    #[test]
    fn mask_edge_cases() {
        let x = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let y = x.map(|v| -v);
        assert_eq!(mask_identity_loss(&x, &y, &t(&[1, 2, 2], 0.0)).unwrap(), 0.0);
        assert_eq!(mask_identity_loss(&x, &x, &t(&[1, 2, 2], 1.0)).unwrap(), 0.0);
        assert!(matches!(
            mask_identity_loss(&x, &y, &t(&[1, 2, 2], 2.0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let shape = DomainShape::new(6, 8, 8, 8).unwrap();
        let v = subdomain_classification_loss(&[0.0; 8], SubDomainLabel::target(5), &shape).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-14);
        let mut logits = [0.0; 8];
        logits[2] = 10.0;
        let v = subdomain_classification_loss(&logits, SubDomainLabel::target(3), &shape).unwrap();
        assert!(v < 7.0 * (-10f64).exp() + 1e-15);
        // two-way classifier: ln(1 + e^-10)
        let v =
            subdomain_classification_loss(&[10.0, 0.0, 0.0, 0.0, 0.0, 0.0], SubDomainLabel::source(1), &shape).unwrap();
        assert!(v < 5.0 * (-10f64).exp() + 1e-15);
        let two = DomainShape::new(2, 2, 8, 8).unwrap();
        let v = subdomain_classification_loss(&[0.0, 10.0], SubDomainLabel::source(2), &two).unwrap();
        assert!(v < 1e-4);
        assert!(subdomain_classification_loss(&[0.0; 6], SubDomainLabel::target(1), &shape).is_err());
    }

    #[test]
    fn compose_arithmetic() {
        let w = LossWeights::PAPER;
        assert_eq!(compose_objectives(&LossTerms::default(), &w).unwrap(), (0.0, 0.0));
        let terms = LossTerms {
            adv_s2t: -1.0,
            adv_t2s: -1.0,
            dom_real: 2.0,
            ..Default::default()
        };
        assert_eq!(compose_objectives(&terms, &w).unwrap().0, 4.0);
        let bad = LossTerms {
            mask: f64::NAN,
            ..Default::default()
        };
        match compose_objectives(&bad, &w) {
            Err(Error::Numeric { term, .. }) => assert_eq!(term, "mask"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
