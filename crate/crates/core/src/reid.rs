//! Identity feature learning on translated images and CMC/mAP evaluation.
//!
//! Evaluation follows the cross-camera protocol: for each query, gallery
//! images with the same identity and the same camera are discarded, the
//! rest are ranked by Euclidean distance between L2-normalized features
//! (ties broken by gallery index), and images of the query identity count
//! as relevant.

use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{check_extents, push_array, read_array, read_container, write_container, ArrayEntry};
use crate::error::{Error, Result};
use crate::networks::{build_classifier, Classifier, ClassifierSpec, Preset};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, stage_rng};
use crate::synthdata::DatasetRecord;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Classifier fitting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The learning rate is multiplied by 0.1 every `lr_step` epochs; 0 disables decay.
    pub lr_step: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            0 => self.base_lr,
            s => self.base_lr * 0.1f64.powi((epoch / s) as i32),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training with Adam (β₁ = 0.9) and step decay.
pub fn fit_classifier<T: Scalar>(
    model: &mut Classifier<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
    cfg: &FitConfig,
) -> Result<FitLog> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::validation(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::validation("epochs and batch_size must be positive"));
    }
    let adam_cfg = AdamConfig {
        beta1: 0.9,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, model.params());
    let mut rng = stage_rng(cfg.seed, "fit-order", 0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = FitLog::default();
    let k = model.spec.n_classes;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor<T>> = chunk.iter().map(|&i| images[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&batch)?);
            let out = model.forward(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(out.logits, &y)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::numeric(
                    "classifier",
                    format!("non-finite loss at epoch {epoch}"),
                ));
            }
            loss_sum += lv * chunk.len() as f64;
            for (row, &t) in tape.value(out.logits).data().chunks(k).zip(&y) {
                correct += (argmax(row) == t) as usize;
            }
            let mut grads = tape.backward(loss);
            let g: Vec<Option<Tensor<T>>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
            adam.update(model.params_mut(), &g, lr)?;
        }
        log.epoch_loss.push(loss_sum / images.len() as f64);
        log.epoch_accuracy.push(correct as f64 / images.len() as f64);
    }
    Ok(log)
}

/// Argmax class per image, lowest index on ties.
pub fn predict<T: Scalar>(model: &Classifier<T>, images: &[&Tensor<T>]) -> Result<Vec<usize>> {
    let k = model.spec.n_classes;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let (_, logits) = model.infer(&Tensor::stack(chunk)?)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hit = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Feature learner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fake,
    FakePlusReal,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fake" => Ok(Scheme::Fake),
            "fake_plus_real" | "fake+real" => Ok(Scheme::FakePlusReal),
            _ => Err(Error::validation(format!("unknown scheme {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fake => "fake",
            Scheme::FakePlusReal => "fake_plus_real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureLearnerSpec {
    pub backbone: Preset,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub scheme: Scheme,
    pub fit: FitConfig,
}

impl FeatureLearnerSpec {
    pub fn desk(n_classes: usize, scheme: Scheme, seed: u64) -> Self {
        FeatureLearnerSpec {
            backbone: Preset::Desk,
            embedding_dim: 64,
            n_classes,
            scheme,
            fit: FitConfig {
                epochs: 60,
                batch_size: 16,
                base_lr: 1e-2,
                lr_step: 40,
                seed,
            },
        }
    }

    /// 512-dimensional embedding head on a 64-filter trunk.
    pub fn paper(n_classes: usize, scheme: Scheme, seed: u64) -> Self {
        FeatureLearnerSpec {
            backbone: Preset::Paper,
            embedding_dim: 512,
            n_classes,
            scheme,
            fit: FitConfig {
                epochs: 60,
                batch_size: 32,
                base_lr: 1e-3,
                lr_step: 40,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::validation(format!(
                "embedding_dim must be >= 8, got {}",
                self.embedding_dim
            )));
        }
        if self.backbone == Preset::Paper && self.embedding_dim != 512 {
            return Err(Error::validation("paper backbone uses a 512-dimensional embedding"));
        }
        Ok(())
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        let mut s = ClassifierSpec::desk(self.embedding_dim, self.n_classes);
        if self.backbone == Preset::Paper {
            s.base_width = 64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainLog {
    pub scheme: Scheme,
    pub n_fake: usize,
    pub n_real: usize,
    pub n_identities: usize,
    pub fit: FitLog,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FeatureModel<T> {
    pub spec: FeatureLearnerSpec,
    pub classifier: Classifier<T>,
    /// Class index to identity label.
    pub identities: Vec<u32>,
    pub log: FeatureTrainLog,
}

/// Trains an identity classifier on fakes, or on fakes plus the real source
/// images they came from.
pub fn train_feature_learner<T: Scalar>(
    spec: &FeatureLearnerSpec,
    fake: &[DatasetRecord<T>],
    real_source: Option<&[DatasetRecord<T>]>,
) -> Result<FeatureModel<T>> {
    spec.validate()?;
    if fake.is_empty() {
        return Err(Error::validation("no fake images to learn from"));
    }
    let fake_ids: BTreeSet<u32> = fake.iter().map(|r| r.identity).collect();
    let mut samples: Vec<&DatasetRecord<T>> = fake.iter().collect();
    let mut n_real = 0;
    if spec.scheme == Scheme::FakePlusReal {
        let real = real_source.ok_or_else(|| Error::validation("fake_plus_real needs the real source set"))?;
        let real_ids: BTreeSet<u32> = real.iter().map(|r| r.identity).collect();
        if real_ids != fake_ids {
            let only_fake: Vec<_> = fake_ids.difference(&real_ids).take(5).collect();
            let only_real: Vec<_> = real_ids.difference(&fake_ids).take(5).collect();
            return Err(Error::validation(format!(
                "identity sets differ between fake and real inputs (fake only: {only_fake:?}, real only: {only_real:?})"
            )));
        }
        n_real = real.len();
        samples.extend(real.iter());
    }
    let identities: Vec<u32> = fake_ids.into_iter().collect();
    if spec.n_classes != identities.len() {
        return Err(Error::validation(format!(
            "spec has {} classes but the data has {} identities",
            spec.n_classes,
            identities.len()
        )));
    }
    let labels: Vec<usize> = samples
        .iter()
        .map(|r| identities.binary_search(&r.identity).expect("known identity"))
        .collect();
    let images: Vec<&Tensor<T>> = samples.iter().map(|r| &r.image).collect();
    let mut classifier = build_classifier(spec.classifier_spec(), derive_seed(spec.fit.seed, "reid-init", 0))?;
    let fit = fit_classifier(&mut classifier, &images, &labels, &spec.fit)?;
    let train_accuracy = accuracy(&predict(&classifier, &images)?, &labels);
    Ok(FeatureModel {
        spec: *spec,
        classifier,
        identities,
        log: FeatureTrainLog {
            scheme: spec.scheme,
            n_fake: fake.len(),
            n_real,
            n_identities: spec.n_classes,
            fit,
            train_accuracy,
        },
    })
}

/// L2-normalizes each row in place.
pub fn normalize_rows<T: Scalar>(x: &mut Tensor<T>) {
    let d = x.shape()[1];
    for row in x.data_mut().chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            for v in row {
                *v /= n;
            }
        }
    }
}

/// `(n, embedding_dim)` L2-normalized embedding-layer outputs.
pub fn extract_features<T: Scalar>(model: &FeatureModel<T>, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let d = model.spec.embedding_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(64) {
        let (emb, _) = model.classifier.infer(&Tensor::stack(chunk)?)?;
        data.extend_from_slice(emb.data());
    }
    let mut f = Tensor::from_vec(&[images.len(), d], data)?;
    normalize_rows(&mut f);
    Ok(f)
}

/// Image-independent Gaussian features, L2-normalized.
pub fn random_features<T: Scalar>(n: usize, dim: usize, seed: u64) -> Tensor<T> {
    let mut rng = stage_rng(seed, "random-features", 0);
    let data = (0..n * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        })
        .collect();
    let mut f = Tensor::from_vec(&[n, dim], data).expect("shape");
    normalize_rows(&mut f);
    f
}

// ---------------------------------------------------------------------------
// Persistence

const FEATURE_MAGIC: &str = "m2m-features 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub dtype: String,
    pub spec: FeatureLearnerSpec,
    pub classifier_seed: u64,
    pub identities: Vec<u32>,
    pub log: FeatureTrainLog,
    /// Caller-supplied run description, stored verbatim.
    pub provenance: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// Single-file feature model in the checkpoint container format.
pub fn save_feature_model<T: Scalar>(
    path: &Path,
    model: &FeatureModel<T>,
    provenance: serde_json::Value,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.classifier.params().iter() {
        push_array(name.to_string(), t, &mut arrays, &mut payload);
    }
    let manifest = FeatureManifest {
        dtype: T::DTYPE.name().into(),
        spec: model.spec,
        classifier_seed: model.classifier.model.seed,
        identities: model.identities.clone(),
        log: model.log.clone(),
        provenance,
        arrays,
    };
    write_container(path, FEATURE_MAGIC, &serde_json::to_string_pretty(&manifest)?, &payload)
}

pub fn load_feature_model<T: Scalar>(path: &Path) -> Result<(FeatureModel<T>, FeatureManifest)> {
    let (json, payload) = read_container(path, FEATURE_MAGIC)?;
    let manifest: FeatureManifest =
        serde_json::from_slice(&json).map_err(|e| Error::file(path, format!("manifest: {e}")))?;
    check_extents(path, &manifest.arrays, &payload)?;
    manifest.spec.validate()?;
    let mut classifier = build_classifier::<T>(manifest.spec.classifier_spec(), manifest.classifier_seed)?;
    let names: Vec<String> = classifier.params().iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        classifier
            .params_mut()
            .assign(&n, read_array(&manifest.arrays, &payload, &n)?)?;
    }
    let model = FeatureModel {
        spec: manifest.spec,
        classifier,
        identities: manifest.identities.clone(),
        log: manifest.log.clone(),
    };
    Ok((model, manifest))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Identity and camera of a query or gallery image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub identity: u32,
    pub camera: usize,
}

impl Tag {
    pub fn of<T>(r: &DatasetRecord<T>) -> Self {
        Tag {
            identity: r.identity,
            camera: r.camera.index,
        }
    }
}

pub const PROTOCOL: &str = "cross-camera: same-identity same-camera gallery entries excluded; \
squared Euclidean distance on L2-normalized features; ties broken by gallery index; \
queries without a valid match excluded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    pub n_excluded_queries: usize,
    pub protocol: String,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Squared Euclidean distance accumulated in f64 in index order.
pub fn sq_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Mean of `hits_at(r) / r` over the 1-based ranks `r` of relevant items,
/// summed in rank order.
pub fn average_precision(relevant_ranks: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &r) in relevant_ranks.iter().enumerate() {
        s += (i + 1) as f64 / r as f64;
    }
    s / relevant_ranks.len() as f64
}

pub fn evaluate<T: Scalar>(
    query: &Tensor<T>,
    query_tags: &[Tag],
    gallery: &Tensor<T>,
    gallery_tags: &[Tag],
    k: usize,
) -> Result<EvalReport> {
    let (nq, ng) = (query_tags.len(), gallery_tags.len());
    if nq == 0 || ng == 0 || k == 0 {
        return Err(Error::validation("evaluation needs queries, gallery images and K >= 1"));
    }
    if query.shape().len() != 2
        || gallery.shape().len() != 2
        || query.shape()[0] != nq
        || gallery.shape()[0] != ng
        || query.shape()[1] != gallery.shape()[1]
    {
        return Err(Error::shape(format!(
            "features {:?} / {:?} for {nq} queries and {ng} gallery images",
            query.shape(),
            gallery.shape()
        )));
    }
    let d = query.shape()[1];
    let mut hits = vec![0usize; k];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (qi, qt) in query_tags.iter().enumerate() {
        let qf = &query.data()[qi * d..(qi + 1) * d];
        let mut ranked: Vec<(f64, usize)> = gallery_tags
            .iter()
            .enumerate()
            .filter(|(_, gt)| !(gt.identity == qt.identity && gt.camera == qt.camera))
            .map(|(gi, _)| (sq_distance(qf, &gallery.data()[gi * d..(gi + 1) * d]), gi))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ranks: Vec<usize> = ranked
            .iter()
            .enumerate()
            .filter(|(_, &(_, gi))| gallery_tags[gi].identity == qt.identity)
            .map(|(pos, _)| pos + 1)
            .collect();
        let Some(&first) = ranks.first() else { continue };
        valid += 1;
        for h in hits.iter_mut().skip(first - 1) {
            *h += 1;
        }
        ap_sum += average_precision(&ranks);
    }
    if valid == 0 {
        return Err(Error::validation("no query has a valid cross-camera match"));
    }
    Ok(EvalReport {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: ap_sum / valid as f64,
        n_query: nq,
        n_gallery: ng,
        n_excluded_queries: nq - valid,
        protocol: PROTOCOL.into(),
    })
}

// ---------------------------------------------------------------------------
// Plotting

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// CMC curve on a 320x240 canvas: rank on x, accuracy 0..1 on y, grid
/// lines at 0.25 steps.
pub fn plot_cmc(report: &EvalReport, path: &Path) -> Result<()> {
    let (w, h) = (320i64, 240i64);
    let (l, r, t, b) = (30i64, 10i64, 10i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let gray = Rgb([210, 210, 210]);
    let black = Rgb([0, 0, 0]);
    let to_y = |v: f64| b_y(h, b, t, v);
    for q in 0..=4 {
        let y = to_y(q as f64 / 4.0);
        draw_line(&mut img, (l, y), (w - r, y), gray);
    }
    draw_line(&mut img, (l, t), (l, h - b), black);
    draw_line(&mut img, (l, h - b), (w - r, h - b), black);
    let n = report.cmc.len();
    let to_x = |i: usize| {
        if n <= 1 {
            l
        } else {
            l + (i as i64 * (w - l - r)) / (n as i64 - 1)
        }
    };
    let blue = Rgb([30, 80, 200]);
    let pts: Vec<(i64, i64)> = report
        .cmc
        .iter()
        .enumerate()
        .map(|(i, &v)| (to_x(i), to_y(v)))
        .collect();
    for pair in pts.windows(2) {
        draw_line(&mut img, pair[0], pair[1], blue);
    }
    for &(x, y) in &pts {
        for d in -1..=1 {
            draw_line(&mut img, (x - 1, y + d), (x + 1, y + d), blue);
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::file(path, e.to_string()))
}

fn b_y(h: i64, b: i64, t: i64, v: f64) -> i64 {
    let span = (h - b - t) as f64;
    (h - b) - (v.clamp(0.0, 1.0) * span).round() as i64
}
