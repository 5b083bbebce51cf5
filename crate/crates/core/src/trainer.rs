//! Alternating minimax training of the two generators and the two
//! discriminator/classifier pairs.
//!
//! One iteration is `d_steps_per_g_step` discriminator updates followed by a
//! single generator update; the learning-rate schedule is indexed by
//! completed generator updates. Each batch holds `batch_size / 2` source and
//! `batch_size / 2` target images; every source element draws a uniform
//! target camera and every target element a uniform source camera.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::embedding::{embed_on_tape, Domain, DomainShape, SubDomainLabel};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_from_logits_on_tape, classification_on_tape, discriminator_objective, generator_objective,
    least_squares_on_tape, mask_identity_on_tape, reconstruction_on_tape, AdversarialForm, LossReport, LossTerms,
    LossWeights,
};
use crate::networks::{
    build_discriminator, build_generator, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Preset,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, stage_rng};
use crate::synthdata::{mask_of, DatasetRecord, Split, SynthSpec};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub decay_start_iter: u64,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub preset: Preset,
    pub adversarial: AdversarialForm,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

/// Keys accepted by [`TrainConfig::parse`], in file order.
pub const CONFIG_KEYS: [&str; 14] = [
    "preset",
    "total_iters",
    "decay_start_iter",
    "base_lr",
    "adam_beta1",
    "adam_beta2",
    "batch_size",
    "d_steps_per_g_step",
    "lambda1",
    "lambda2",
    "lambda3",
    "seed",
    "adversarial",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            total_iters: 200_000,
            decay_start_iter: 100_000,
            base_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 16,
            d_steps_per_g_step: 5,
            weights: LossWeights::PAPER,
            seed: 0,
            preset: Preset::Paper,
            adversarial: AdversarialForm::Log,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            total_iters: 2_000,
            decay_start_iter: 1_000,
            base_lr: 2e-4,
            batch_size: 8,
            preset: Preset::Desk,
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_start_iter == 0 || self.decay_start_iter > self.total_iters {
            return Err(Error::validation(format!(
                "need 0 < decay_start_iter ({}) <= total_iters ({})",
                self.decay_start_iter, self.total_iters
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::validation(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{k} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::validation(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(Error::validation("d_steps_per_g_step must be >= 1"));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::validation(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "preset" => self.preset = Preset::parse(value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "decay_start_iter" => self.decay_start_iter = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "d_steps_per_g_step" => self.d_steps_per_g_step = num(key, value)?,
            "lambda1" => self.weights.lambda1 = num(key, value)?,
            "lambda2" => self.weights.lambda2 = num(key, value)?,
            "lambda3" => self.weights.lambda3 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "adversarial" => self.adversarial = AdversarialForm::parse(value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line
    /// selects the defaults that the remaining keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => Self::for_preset(Preset::parse(v)?),
            None => Self::desk(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "preset" => self.preset.name().into(),
            "total_iters" => self.total_iters.to_string(),
            "decay_start_iter" => self.decay_start_iter.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "d_steps_per_g_step" => self.d_steps_per_g_step.to_string(),
            "lambda1" => self.weights.lambda1.to_string(),
            "lambda2" => self.weights.lambda2.to_string(),
            "lambda3" => self.weights.lambda3.to_string(),
            "seed" => self.seed.to_string(),
            "adversarial" => self.adversarial.name().into(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => String::new(),
        }
    }

    /// [`content_hash`] of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        content_hash(self.to_text().as_bytes())
    }
}

/// Git-style blob digest: SHA-256 of `"blob {len}\0"` followed by the bytes,
/// as lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Splits `key = value` lines, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::validation(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// `base_lr` before `decay_start_iter`, then linear decay reaching 0 at
/// `total_iters`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::validation(format!(
            "iteration {iter} outside 0..={}",
            cfg.total_iters
        )));
    }
    if iter < cfg.decay_start_iter {
        return Ok(cfg.base_lr);
    }
    let span = (cfg.total_iters - cfg.decay_start_iter) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    Ok(cfg.base_lr * ((cfg.total_iters - iter) as f64 / span))
}

// ---------------------------------------------------------------------------
// Models

/// `g`: source to target, `g_bar`: target to source, `d_s`/`d_t`:
/// discriminators with shared classifier heads over `M`/`N` cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModels<T> {
    pub shape: DomainShape,
    pub g: Generator<T>,
    pub g_bar: Generator<T>,
    pub d_s: Discriminator<T>,
    pub d_t: Discriminator<T>,
}

pub const MODEL_ROLES: [&str; 4] = ["g", "g_bar", "d_s", "d_t"];

impl<T: Scalar> GanModels<T> {
    pub fn build(shape: DomainShape, preset: Preset, seed: u64) -> Result<Self> {
        let gs = GeneratorSpec::for_shape(preset, &shape);
        Self::from_specs(
            shape,
            gs,
            DiscriminatorSpec::for_preset(preset, shape.m),
            DiscriminatorSpec::for_preset(preset, shape.n),
            seed,
        )
    }

    pub fn from_specs(
        shape: DomainShape,
        gen: GeneratorSpec,
        d_s: DiscriminatorSpec,
        d_t: DiscriminatorSpec,
        seed: u64,
    ) -> Result<Self> {
        shape.validate()?;
        gen.check_shape(&shape)?;
        if d_s.n_classes != shape.m || d_t.n_classes != shape.n {
            return Err(Error::validation(format!(
                "discriminator classes ({}, {}) do not match M={} N={}",
                d_s.n_classes, d_t.n_classes, shape.m, shape.n
            )));
        }
        for (spec, name) in [(&d_s, "d_s"), (&d_t, "d_t")] {
            if spec.patch_extent(shape.h, shape.w).is_none() {
                return Err(Error::validation(format!(
                    "{name}: {}x{} images are too small for the discriminator",
                    shape.h, shape.w
                )));
            }
        }
        Ok(GanModels {
            shape,
            g: build_generator(gen, derive_seed(seed, "init", 0))?,
            g_bar: build_generator(gen, derive_seed(seed, "init", 1))?,
            d_s: build_discriminator(d_s, derive_seed(seed, "init", 2))?,
            d_t: build_discriminator(d_t, derive_seed(seed, "init", 3))?,
        })
    }

    pub fn stores(&self) -> [&ParamStore<T>; 4] {
        [
            self.g.params(),
            self.g_bar.params(),
            self.d_s.params(),
            self.d_t.params(),
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 4] {
        [
            &mut self.g.model.params,
            &mut self.g_bar.model.params,
            &mut self.d_s.model.params,
            &mut self.d_t.model.params,
        ]
    }

    pub fn generator_checksum(&self) -> (u64, u64) {
        (self.g.params().checksum(), self.g_bar.params().checksum())
    }

    pub fn discriminator_checksum(&self) -> (u64, u64) {
        (self.d_s.params().checksum(), self.d_t.params().checksum())
    }

    /// Translates a batch `(b, 3, h, w)` from `from` domain; `slots` are
    /// (source slot, target slot) pairs. Source images go through `g`,
    /// target images through `g_bar`.
    pub fn translate_batch(&self, images: &Tensor<T>, slots: &[(usize, usize)], from: Domain) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let gen = match from {
            Domain::Source => &self.g,
            Domain::Target => &self.g_bar,
        };
        let bound = gen.params().bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let e = embed_on_tape(&mut tape, x, slots, &self.shape)?;
        let y = gen.forward(&mut tape, &bound, e)?;
        Ok(tape.value(y).clone())
    }

    /// Translates one `(3, h, w)` image between sub-domains.
    pub fn translate(&self, image: &Tensor<T>, src: SubDomainLabel, tgt: SubDomainLabel) -> Result<Tensor<T>> {
        let slots = crate::embedding::condition_slots(src, tgt, &self.shape)?;
        if image.shape() != [3, self.shape.h, self.shape.w] {
            return Err(Error::shape(format!(
                "expected image (3, {}, {}), got {:?}",
                self.shape.h,
                self.shape.w,
                image.shape()
            )));
        }
        let batch = Tensor::stack(&[image])?;
        Ok(self.translate_batch(&batch, &[slots], src.domain)?.index0(0))
    }
}

// ---------------------------------------------------------------------------
// Data

/// One training image with its foreground mask and 0-based camera slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData<T> {
    pub shape: DomainShape,
    pub source: Vec<Sample<T>>,
    pub target: Vec<Sample<T>>,
}

impl<T: Scalar> TrainData<T> {
    /// Training split of `records`; masks come from the records or from
    /// `oracle`. Every camera of both domains must be present.
    pub fn from_records(records: &[DatasetRecord<T>], shape: DomainShape, oracle: Option<&SynthSpec>) -> Result<Self> {
        Self::from_split(records, shape, oracle, Split::Train)
    }

    pub fn from_split(
        records: &[DatasetRecord<T>],
        shape: DomainShape,
        oracle: Option<&SynthSpec>,
        split: Split,
    ) -> Result<Self> {
        let mut data = TrainData {
            shape,
            source: Vec::new(),
            target: Vec::new(),
        };
        for r in records.iter().filter(|r| r.split == split) {
            r.camera.validate(&shape)?;
            if r.image.shape() != [3, shape.h, shape.w] {
                return Err(Error::shape(format!("{}: image {:?}", r.name, r.image.shape())));
            }
            let s = Sample {
                image: r.image.clone(),
                mask: mask_of(r, oracle)?,
                slot: r.camera.slot(),
            };
            match r.camera.domain {
                Domain::Source => data.source.push(s),
                Domain::Target => data.target.push(s),
            }
        }
        let mut missing = Vec::new();
        for (domain, samples) in [(Domain::Source, &data.source), (Domain::Target, &data.target)] {
            for c in 0..shape.cameras(domain) {
                if !samples.iter().any(|s| s.slot == c) {
                    missing.push(format!("{} camera {}", domain.name(), c + 1));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::validation(format!(
                "dataset is missing sub-domain(s): {}",
                missing.join(", ")
            )));
        }
        Ok(data)
    }
}

/// Half source, half target images with their sampled opposite cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub xs: Tensor<T>,
    pub ms: Tensor<T>,
    /// (camera slot of the image, sampled target slot).
    pub s_slots: Vec<(usize, usize)>,
    pub xt: Tensor<T>,
    pub mt: Tensor<T>,
    /// (sampled source slot, camera slot of the image).
    pub t_slots: Vec<(usize, usize)>,
}

pub fn sample_batch<T: Scalar>(rng: &mut ChaCha8Rng, data: &TrainData<T>, batch_size: usize) -> Result<Batch<T>> {
    let half = batch_size / 2;
    let (m, n) = (data.shape.m, data.shape.n);
    let mut xs = Vec::with_capacity(half);
    let mut ms = Vec::with_capacity(half);
    let mut s_slots = Vec::with_capacity(half);
    for _ in 0..half {
        let s = &data.source[rng.random_range(0..data.source.len())];
        let j = rng.random_range(0..n);
        xs.push(&s.image);
        ms.push(&s.mask);
        s_slots.push((s.slot, j));
    }
    let mut xt = Vec::with_capacity(half);
    let mut mt = Vec::with_capacity(half);
    let mut t_slots = Vec::with_capacity(half);
    for _ in 0..half {
        let t = &data.target[rng.random_range(0..data.target.len())];
        let i = rng.random_range(0..m);
        xt.push(&t.image);
        mt.push(&t.mask);
        t_slots.push((i, t.slot));
    }
    Ok(Batch {
        xs: Tensor::stack(&xs)?,
        ms: Tensor::stack(&ms)?,
        s_slots,
        xt: Tensor::stack(&xt)?,
        mt: Tensor::stack(&mt)?,
        t_slots,
    })
}

// ---------------------------------------------------------------------------
// Steps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    D,
    G,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::D => "D",
            Phase::G => "G",
        }
    }
}

/// Per-term switches. A closed gate keeps the term in the report but
/// detaches it from the objective, so it contributes no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientGates {
    pub dom: bool,
    pub mask: bool,
    pub rec: bool,
}

impl Default for GradientGates {
    fn default() -> Self {
        GradientGates {
            dom: true,
            mask: true,
            rec: true,
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the generator update this step belongs to.
    pub iteration: u64,
    pub phase: Phase,
    pub lr: f64,
    /// False when the step was skipped for a non-finite gradient.
    pub applied: bool,
    pub report: LossReport,
}

struct Binds {
    g: Bound,
    g_bar: Bound,
    d_s: Bound,
    d_t: Bound,
}

struct TermVars {
    adv_s2t: Var,
    adv_t2s: Var,
    rec: Option<Var>,
    mask: Var,
    dom_real: Var,
    dom_fake: Var,
}

fn detach<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Var {
    let value = tape.value(v).clone();
    tape.constant(value)
}

fn adversarial<T: Scalar>(
    tape: &mut Tape<T>,
    form: AdversarialForm,
    real: Var,
    fake: Var,
    phase: Phase,
) -> Result<Var> {
    match form {
        AdversarialForm::Log => Ok(adversarial_from_logits_on_tape(tape, real, fake)),
        AdversarialForm::LeastSquares => least_squares_on_tape(tape, real, fake, phase == Phase::G),
    }
}

/// Builds every loss term on `tape`. The cycle pass runs only for the
/// generator phase.
fn build_terms<T: Scalar>(
    tape: &mut Tape<T>,
    models: &GanModels<T>,
    b: &Binds,
    batch: &Batch<T>,
    form: AdversarialForm,
    phase: Phase,
) -> Result<TermVars> {
    let shape = &models.shape;
    let xs = tape.constant(batch.xs.clone());
    let xt = tape.constant(batch.xt.clone());
    let es = embed_on_tape(tape, xs, &batch.s_slots, shape)?;
    let fake_t = models.g.forward(tape, &b.g, es)?;
    let et = embed_on_tape(tape, xt, &batch.t_slots, shape)?;
    let fake_s = models.g_bar.forward(tape, &b.g_bar, et)?;

    let dt_real = models.d_t.forward(tape, &b.d_t, xt)?;
    let dt_fake = models.d_t.forward(tape, &b.d_t, fake_t)?;
    let ds_real = models.d_s.forward(tape, &b.d_s, xs)?;
    let ds_fake = models.d_s.forward(tape, &b.d_s, fake_s)?;

    let adv_s2t = adversarial(tape, form, dt_real.realness_logits, dt_fake.realness_logits, phase)?;
    let adv_t2s = adversarial(tape, form, ds_real.realness_logits, ds_fake.realness_logits, phase)?;

    let s_cam: Vec<usize> = batch.s_slots.iter().map(|p| p.0).collect();
    let s_tgt: Vec<usize> = batch.s_slots.iter().map(|p| p.1).collect();
    let t_src: Vec<usize> = batch.t_slots.iter().map(|p| p.0).collect();
    let t_cam: Vec<usize> = batch.t_slots.iter().map(|p| p.1).collect();
    let dr_s = classification_on_tape(tape, ds_real.class_logits, &s_cam)?;
    let dr_t = classification_on_tape(tape, dt_real.class_logits, &t_cam)?;
    let dom_real = tape.add(dr_s, dr_t)?;
    // Fakes are judged by the classifier of the domain they were translated
    // into, against the camera they were asked to imitate.
    let df_t = classification_on_tape(tape, dt_fake.class_logits, &s_tgt)?;
    let df_s = classification_on_tape(tape, ds_fake.class_logits, &t_src)?;
    let dom_fake = tape.add(df_t, df_s)?;

    let mk_s = mask_identity_on_tape(tape, xs, fake_t, &batch.ms)?;
    let mk_t = mask_identity_on_tape(tape, xt, fake_s, &batch.mt)?;
    let mask = tape.add(mk_s, mk_t)?;

    let rec = if phase == Phase::G {
        let es2 = embed_on_tape(tape, fake_t, &batch.s_slots, shape)?;
        let cyc_s = models.g_bar.forward(tape, &b.g_bar, es2)?;
        let et2 = embed_on_tape(tape, fake_s, &batch.t_slots, shape)?;
        let cyc_t = models.g.forward(tape, &b.g, et2)?;
        let r_s = reconstruction_on_tape(tape, xs, cyc_s)?;
        let r_t = reconstruction_on_tape(tape, xt, cyc_t)?;
        Some(tape.add(r_s, r_t)?)
    } else {
        None
    };
    Ok(TermVars {
        adv_s2t,
        adv_t2s,
        rec,
        mask,
        dom_real,
        dom_fake,
    })
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Option<Var>) -> f64 {
    v.map(|v| tape.value(v).item().as_f64()).unwrap_or(f64::NAN)
}

/// Gradients, loss report and objective value of one step.
pub struct StepGradients<T> {
    pub report: LossReport,
    /// Parallel to the optimized stores: `[d_s, d_t]` or `[g, g_bar]`.
    pub grads: [Vec<Option<Tensor<T>>>; 2],
}

impl<T: Scalar> StepGradients<T> {
    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(Tensor::all_finite)
    }
}

/// Evaluates the phase objective and its gradients without updating.
pub fn step_gradients<T: Scalar>(
    models: &GanModels<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    form: AdversarialForm,
    phase: Phase,
    gates: GradientGates,
) -> Result<StepGradients<T>> {
    let mut tape = Tape::new();
    let gen_trainable = phase == Phase::G;
    let b = Binds {
        g: models.g.params().bind(&mut tape, gen_trainable),
        g_bar: models.g_bar.params().bind(&mut tape, gen_trainable),
        d_s: models.d_s.params().bind(&mut tape, !gen_trainable),
        d_t: models.d_t.params().bind(&mut tape, !gen_trainable),
    };
    let t = build_terms(&mut tape, models, &b, batch, form, phase)?;
    let (l1, l2, l3) = (weights.lambda1, weights.lambda2, weights.lambda3);
    let root = match phase {
        Phase::D => {
            let dom = if gates.dom {
                t.dom_real
            } else {
                detach(&mut tape, t.dom_real)
            };
            tape.weighted_sum(&[(t.adv_s2t, -1.0), (t.adv_t2s, -1.0), (dom, l1)])?
        }
        Phase::G => {
            let dom = if gates.dom {
                t.dom_fake
            } else {
                detach(&mut tape, t.dom_fake)
            };
            let mask = if gates.mask { t.mask } else { detach(&mut tape, t.mask) };
            let rec = t.rec.expect("cycle pass");
            let rec = if gates.rec { rec } else { detach(&mut tape, rec) };
            tape.weighted_sum(&[(t.adv_s2t, 1.0), (t.adv_t2s, 1.0), (dom, l1), (mask, l2), (rec, l3)])?
        }
    };
    let report = report_of(&tape, &t, weights);
    let mut grads = tape.backward(root);
    let mut take = |bound: &Bound| -> Vec<Option<Tensor<T>>> { bound.vars.iter().map(|&v| grads.take(v)).collect() };
    let grads = match phase {
        Phase::D => [take(&b.d_s), take(&b.d_t)],
        Phase::G => [take(&b.g), take(&b.g_bar)],
    };
    Ok(StepGradients { report, grads })
}

/// Loss report of one phase without computing gradients.
pub fn evaluate_objective<T: Scalar>(
    models: &GanModels<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    form: AdversarialForm,
    phase: Phase,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let b = Binds {
        g: models.g.params().bind(&mut tape, false),
        g_bar: models.g_bar.params().bind(&mut tape, false),
        d_s: models.d_s.params().bind(&mut tape, false),
        d_t: models.d_t.params().bind(&mut tape, false),
    };
    let t = build_terms(&mut tape, models, &b, batch, form, phase)?;
    Ok(report_of(&tape, &t, weights))
}

fn report_of<T: Scalar>(tape: &Tape<T>, t: &TermVars, weights: &LossWeights) -> LossReport {
    let terms = LossTerms {
        adv_s2t: scalar_of(tape, Some(t.adv_s2t)),
        adv_t2s: scalar_of(tape, Some(t.adv_t2s)),
        rec: scalar_of(tape, t.rec),
        mask: scalar_of(tape, Some(t.mask)),
        dom_real: scalar_of(tape, Some(t.dom_real)),
        dom_fake: scalar_of(tape, Some(t.dom_fake)),
    };
    LossReport {
        adv_s2t: terms.adv_s2t,
        adv_t2s: terms.adv_t2s,
        rec: terms.rec,
        mask: terms.mask,
        dom_real: terms.dom_real,
        dom_fake: terms.dom_fake,
        total_d: discriminator_objective(&terms, weights),
        total_g: generator_objective(&terms, weights),
    }
}

// ---------------------------------------------------------------------------
// State

/// Non-finite gradients tolerated in a row before training aborts.
pub const MAX_NONFINITE_STREAK: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub cfg: TrainConfig,
    pub models: GanModels<T>,
    /// Optimizers in [`MODEL_ROLES`] order.
    pub adam: [Adam<T>; 4],
    /// Completed generator updates.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
    pub nonfinite_streak: u32,
    pub gates: GradientGates,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: TrainConfig, shape: DomainShape) -> Result<Self> {
        cfg.validate()?;
        let models = GanModels::build(shape, cfg.preset, cfg.seed)?;
        Self::with_models(cfg, models)
    }

    pub fn with_models(cfg: TrainConfig, models: GanModels<T>) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.adam();
        let adam = [
            Adam::new(a, models.g.params()),
            Adam::new(a, models.g_bar.params()),
            Adam::new(a, models.d_s.params()),
            Adam::new(a, models.d_t.params()),
        ];
        Ok(TrainState {
            rng: stage_rng(cfg.seed, "batches", 0),
            cfg,
            models,
            adam,
            iteration: 0,
            history: Vec::new(),
            nonfinite_streak: 0,
            gates: GradientGates::default(),
        })
    }

    /// Learning rate of the iteration currently in progress.
    pub fn current_lr(&self) -> Result<f64> {
        lr_schedule(self.iteration.min(self.cfg.total_iters), &self.cfg)
    }

    fn apply(&mut self, batch: &Batch<T>, phase: Phase) -> Result<StepRecord> {
        let lr = self.current_lr()?;
        let sg = step_gradients(
            &self.models,
            batch,
            &self.cfg.weights,
            self.cfg.adversarial,
            phase,
            self.gates,
        )?;
        let finite = sg.all_finite();
        if finite {
            self.nonfinite_streak = 0;
            let [ga, gb] = &sg.grads;
            let [ag, agb, ads, adt] = &mut self.adam;
            match phase {
                Phase::D => {
                    ads.update(&mut self.models.d_s.model.params, ga, lr)?;
                    adt.update(&mut self.models.d_t.model.params, gb, lr)?;
                }
                Phase::G => {
                    ag.update(&mut self.models.g.model.params, ga, lr)?;
                    agb.update(&mut self.models.g_bar.model.params, gb, lr)?;
                }
            }
        } else {
            self.nonfinite_streak += 1;
        }
        let rec = StepRecord {
            iteration: self.iteration + 1,
            phase,
            lr,
            applied: finite,
            report: sg.report,
        };
        self.history.push(rec);
        if self.nonfinite_streak >= MAX_NONFINITE_STREAK {
            return Err(Error::Divergence(format!(
                "{} consecutive non-finite gradients at iteration {} ({} step)",
                self.nonfinite_streak,
                self.iteration + 1,
                phase.name()
            )));
        }
        Ok(rec)
    }

    /// One discriminator update; generators stay bit-unchanged.
    pub fn train_step_d(&mut self, batch: &Batch<T>) -> Result<StepRecord> {
        self.apply(batch, Phase::D)
    }

    /// One generator update; discriminators stay bit-unchanged. Advances the
    /// iteration counter.
    pub fn train_step_g(&mut self, batch: &Batch<T>) -> Result<StepRecord> {
        let r = self.apply(batch, Phase::G)?;
        self.iteration += 1;
        Ok(r)
    }

    /// `d_steps_per_g_step` discriminator updates then one generator update,
    /// each on a freshly sampled batch.
    pub fn run_iteration(&mut self, data: &TrainData<T>) -> Result<()> {
        if self.iteration >= self.cfg.total_iters {
            return Err(Error::validation("training already finished"));
        }
        for _ in 0..self.cfg.d_steps_per_g_step {
            let b = sample_batch(&mut self.rng, data, self.cfg.batch_size)?;
            self.train_step_d(&b)?;
        }
        let b = sample_batch(&mut self.rng, data, self.cfg.batch_size)?;
        self.train_step_g(&b)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss log

pub fn loss_log_header() -> String {
    let mut s = String::from("iteration,phase,lr");
    for c in LossReport::COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s
}

pub fn loss_log_row(r: &StepRecord) -> String {
    let mut s = format!("{},{},{}", r.iteration, r.phase.name(), r.lr);
    for v in r.report.values() {
        let _ = write!(s, ",{v}");
    }
    s
}

pub fn write_loss_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut s = loss_log_header();
    s.push('\n');
    for r in records {
        s.push_str(&loss_log_row(r));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::file(path, e.to_string()))
}

/// Parses a loss log back into `(iteration, phase, lr, report)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(loss_log_header().as_str()) {
        return Err(Error::file(path, "unexpected loss log header"));
    }
    let bad = |n: usize| Error::file(path, format!("malformed row {n}"));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(n + 2));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n + 2));
            let v: Vec<f64> = (3..11).map(num).collect::<Result<_>>()?;
            Ok(StepRecord {
                iteration: f[0].parse().map_err(|_| bad(n + 2))?,
                phase: match f[1] {
                    "D" => Phase::D,
                    "G" => Phase::G,
                    _ => return Err(bad(n + 2)),
                },
                lr: num(2)?,
                applied: true,
                report: LossReport {
                    adv_s2t: v[0],
                    adv_t2s: v[1],
                    rec: v[2],
                    mask: v[3],
                    dom_real: v[4],
                    dom_fake: v[5],
                    total_d: v[6],
                    total_g: v[7],
                },
            })
        })
        .collect()
}

/// Checks that every generator update is preceded by exactly `d_steps`
/// discriminator updates.
pub fn audit_cadence(records: &[StepRecord], d_steps: usize) -> Result<usize> {
    let mut run = 0;
    let mut g_steps = 0;
    for r in records {
        match r.phase {
            Phase::D => run += 1,
            Phase::G => {
                if run != d_steps {
                    return Err(Error::validation(format!(
                        "iteration {}: {run} discriminator steps before the generator step, expected {d_steps}",
                        r.iteration
                    )));
                }
                run = 0;
                g_steps += 1;
            }
        }
    }
    Ok(g_steps)
}

// ---------------------------------------------------------------------------
// Driver

/// Output locations of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("iter_{iteration:06}.m2m"))
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("checkpoints").join("latest.m2m")
    }
}

/// Runs iterations until `total_iters`, calling `on_iteration` after each
/// generator update. With `out`, appends to the loss log and writes
/// checkpoints every `checkpoint_every` iterations and at the end; on
/// divergence the last checkpoint written stays in place.
pub fn train_from<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    out: Option<&TrainOutputs>,
    on_iteration: &mut dyn FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    if data.shape != state.models.shape {
        return Err(Error::validation(format!(
            "dataset shape {:?} does not match models {:?}",
            data.shape, state.models.shape
        )));
    }
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(o.dir.join("checkpoints")).map_err(|e| Error::file(&o.dir, e.to_string()))?;
            let path = o.loss_log();
            let fresh = !path.exists() || state.iteration == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::file(&path, e.to_string()))?;
            if fresh {
                writeln!(f, "{}", loss_log_header()).map_err(|e| Error::file(&path, e.to_string()))?;
            }
            Some((f, path))
        }
        None => None,
    };
    while state.iteration < state.cfg.total_iters {
        let before = state.history.len();
        let result = state.run_iteration(data);
        if let Some((f, path)) = &mut log {
            for r in &state.history[before..] {
                writeln!(f, "{}", loss_log_row(r)).map_err(|e| Error::file(&*path, e.to_string()))?;
            }
        }
        result?;
        on_iteration(state)?;
        if let Some(o) = out {
            let every = state.cfg.checkpoint_every;
            let last = state.iteration == state.cfg.total_iters;
            if last || (every > 0 && state.iteration % every == 0) {
                crate::checkpoint::save_checkpoint(&o.checkpoint(state.iteration), state)?;
                crate::checkpoint::save_checkpoint(&o.latest(), state)?;
            }
        }
    }
    Ok(())
}

/// Fresh training run from `cfg`.
pub fn train<T: Scalar>(cfg: TrainConfig, data: &TrainData<T>, out: Option<&TrainOutputs>) -> Result<TrainState<T>> {
    let mut state = TrainState::new(cfg, data.shape)?;
    train_from(&mut state, data, out, &mut |_| Ok(()))?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Mean cycle L1 over held-out images: source image `k` is sent to target
/// camera `k mod N` and back, target image `k` to source camera `k mod M`.
pub fn heldout_reconstruction<T: Scalar>(models: &GanModels<T>, data: &TrainData<T>) -> Result<f64> {
    let shape = models.shape;
    let mut total = 0.0;
    let mut count = 0usize;
    for (from, samples) in [(Domain::Source, &data.source), (Domain::Target, &data.target)] {
        for chunk in samples.chunks(16).enumerate() {
            let (ci, ch) = chunk;
            let images: Vec<&Tensor<T>> = ch.iter().map(|s| &s.image).collect();
            let x = Tensor::stack(&images)?;
            let slots: Vec<(usize, usize)> = ch
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let idx = ci * 16 + k;
                    match from {
                        Domain::Source => (s.slot, idx % shape.n),
                        Domain::Target => (idx % shape.m, s.slot),
                    }
                })
                .collect();
            let fake = models.translate_batch(&x, &slots, from)?;
            let back = models.translate_batch(&fake, &slots, from.other())?;
            for (a, b) in x.data().iter().zip(back.data()) {
                total += (a.as_f64() - b.as_f64()).abs();
            }
            count += x.len();
        }
    }
    Ok(total / count.max(1) as f64)
}
