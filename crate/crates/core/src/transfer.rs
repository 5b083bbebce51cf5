//! Fake-image generation with a trained model, plus the measurements and
//! figures built on top of it: camera probe, style statistics, masked
//! reconstruction error and image grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::embedding::{Domain, DomainShape, SubDomainLabel};
use crate::error::{Error, Result};
use crate::imageio;
use crate::networks::{build_classifier, Classifier, ClassifierSpec};
use crate::reid::{accuracy, fit_classifier, predict, FitConfig, FitLog};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, stage_rng};
use crate::synthdata::{record_stem, write_records, DatasetManifest, DatasetRecord};
use crate::tensor::Tensor;
use crate::trainer::GanModels;

const CHUNK: usize = 32;

/// Translates every source-domain record into each of the `N` target
/// cameras. Fakes keep the source identity, split, sequence number and mask;
/// `source_camera` records where they came from.
pub fn generate_fakes<T: Scalar>(
    models: &GanModels<T>,
    source: &[DatasetRecord<T>],
    shape: &DomainShape,
) -> Result<Vec<DatasetRecord<T>>> {
    if models.shape != *shape {
        return Err(Error::validation(format!(
            "checkpoint was trained for M={} N={} {}x{}, dataset is M={} N={} {}x{}",
            models.shape.m, models.shape.n, models.shape.h, models.shape.w, shape.m, shape.n, shape.h, shape.w
        )));
    }
    let source: Vec<&DatasetRecord<T>> = source.iter().filter(|r| r.camera.domain == Domain::Source).collect();
    for r in &source {
        r.camera.validate(shape)?;
        if r.image.shape() != [3, shape.h, shape.w] {
            return Err(Error::shape(format!("{}: image {:?}", r.name, r.image.shape())));
        }
    }
    let mut out = Vec::with_capacity(source.len() * shape.n);
    for j in 1..=shape.n {
        for chunk in source.chunks(CHUNK) {
            let images: Vec<&Tensor<T>> = chunk.iter().map(|r| &r.image).collect();
            let slots: Vec<(usize, usize)> = chunk.iter().map(|r| (r.camera.slot(), j - 1)).collect();
            let fakes = models.translate_batch(&Tensor::stack(&images)?, &slots, Domain::Source)?;
            for (k, r) in chunk.iter().enumerate() {
                out.push(DatasetRecord {
                    image: fakes.index0(k),
                    identity: r.identity,
                    camera: SubDomainLabel::target(j),
                    mask: r.mask.clone(),
                    split: r.split,
                    seq: r.seq,
                    source_camera: Some(r.camera.index),
                    name: record_stem(r.identity, j, Some(r.camera.index), r.seq),
                });
            }
        }
    }
    out.sort_by(|a, b| (a.split, &a.name).cmp(&(b.split, &b.name)));
    Ok(out)
}

/// Writes fakes in the synthetic layout with a `dataset.json` of kind
/// `fakes`; `provenance` is stored verbatim in the manifest.
pub fn write_fakes<T: Scalar>(
    root: &Path,
    fakes: &[DatasetRecord<T>],
    shape: DomainShape,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::file(root, e.to_string()))?;
    write_records(root, fakes)?;
    let mut manifest = DatasetManifest::build("fakes", shape, None, fakes);
    manifest.provenance = provenance;
    manifest.write(root)
}

// ---------------------------------------------------------------------------
// Camera probe

/// Classifier predicting the camera of an image within one domain.
#[derive(Debug, Clone)]
pub struct CameraProbe<T> {
    pub domain: Domain,
    pub classifier: Classifier<T>,
    pub fit: FitLog,
    /// Accuracy on the records not used for fitting.
    pub heldout_accuracy: f64,
}

impl<T: Scalar> CameraProbe<T> {
    /// Fits on `train` and scores on `heldout`; only records of `domain` are used.
    pub fn fit(
        train: &[&DatasetRecord<T>],
        heldout: &[&DatasetRecord<T>],
        domain: Domain,
        shape: &DomainShape,
        cfg: &FitConfig,
    ) -> Result<Self> {
        let n = shape.cameras(domain);
        let pick = |rs: &[&DatasetRecord<T>]| -> (Vec<Tensor<T>>, Vec<usize>) {
            rs.iter()
                .filter(|r| r.camera.domain == domain)
                .map(|r| (r.image.clone(), r.camera.slot()))
                .unzip()
        };
        let (xs, ys) = pick(train);
        let (hx, hy) = pick(heldout);
        if hx.is_empty() {
            return Err(Error::validation("camera probe needs held-out images"));
        }
        let spec = ClassifierSpec::desk(16, n);
        let mut classifier = build_classifier::<T>(spec, derive_seed(cfg.seed, "camera-probe", 0))?;
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        let fit = fit_classifier(&mut classifier, &refs, &ys, cfg)?;
        let hrefs: Vec<&Tensor<T>> = hx.iter().collect();
        let heldout_accuracy = accuracy(&predict(&classifier, &hrefs)?, &hy);
        Ok(CameraProbe {
            domain,
            classifier,
            fit,
            heldout_accuracy,
        })
    }

    /// Predicted 1-based camera per image.
    pub fn cameras(&self, images: &[&Tensor<T>]) -> Result<Vec<usize>> {
        Ok(predict(&self.classifier, images)?.into_iter().map(|s| s + 1).collect())
    }

    /// Fraction of records classified as their own `camera`.
    pub fn agreement(&self, records: &[&DatasetRecord<T>]) -> Result<f64> {
        let images: Vec<&Tensor<T>> = records.iter().map(|r| &r.image).collect();
        let truth: Vec<usize> = records.iter().map(|r| r.camera.index).collect();
        Ok(accuracy(&self.cameras(&images)?, &truth))
    }
}

/// Probe training settings used by the acceptance harness and the CLI.
pub fn probe_fit_config(seed: u64) -> FitConfig {
    FitConfig {
        epochs: 6,
        batch_size: 32,
        base_lr: 2e-3,
        lr_step: 0,
        seed: derive_seed(seed, "camera-probe", 1),
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// Per-channel mean over a set of `(3, h, w)` images.
pub fn channel_means<T: Scalar>(images: &[&Tensor<T>]) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for im in images {
        let plane = im.len() / 3;
        for (c, s) in sums.iter_mut().enumerate() {
            *s += im.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        count += plane;
    }
    sums.map(|s| s / count.max(1) as f64)
}

pub fn euclid3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Squared error between two images, averaged over foreground pixels
/// (all channels) and over the whole image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedError {
    pub foreground: f64,
    pub full: f64,
}

pub fn masked_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> Result<MaskedError> {
    if a.shape() != b.shape() || a.shape().len() != 3 || mask.shape() != [1, a.shape()[1], a.shape()[2]] {
        return Err(Error::shape(format!(
            "masked error on {:?}, {:?} with mask {:?}",
            a.shape(),
            b.shape(),
            mask.shape()
        )));
    }
    let plane = mask.len();
    let (mut fg, mut fg_n, mut all) = (0.0, 0usize, 0.0);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let d = x.as_f64() - y.as_f64();
        all += d * d;
        if mask.data()[i % plane].as_f64() > 0.5 {
            fg += d * d;
            fg_n += 1;
        }
    }
    if fg_n == 0 {
        return Err(Error::validation("mask has no foreground pixels"));
    }
    Ok(MaskedError {
        foreground: fg / fg_n as f64,
        full: all / a.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Figures

pub const GRID_GAP: u32 = 2;
pub const GRID_BACKGROUND: Rgb<u8> = Rgb([64, 64, 64]);

/// Tiles equally sized cells row by row, `GRID_GAP` pixels apart. An
/// optional header row of camera markers (cell `c` shows `c + 1` bars)
/// is placed above.
pub fn compose_grid(rows: &[Vec<RgbImage>], header: bool) -> Result<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::validation("empty grid selection"))?;
    let (cw, ch) = first.dimensions();
    let cols = rows[0].len();
    if rows
        .iter()
        .any(|r| r.len() != cols || r.iter().any(|c| c.dimensions() != (cw, ch)))
    {
        return Err(Error::validation("grid rows must have equally sized cells"));
    }
    let n_rows = rows.len() + header as usize;
    let width = cols as u32 * (cw + GRID_GAP) + GRID_GAP;
    let height = n_rows as u32 * (ch + GRID_GAP) + GRID_GAP;
    let mut img = RgbImage::from_pixel(width, height, GRID_BACKGROUND);
    let origin = |r: usize, c: usize| {
        (
            GRID_GAP + c as u32 * (cw + GRID_GAP),
            GRID_GAP + r as u32 * (ch + GRID_GAP),
        )
    };
    if header {
        for c in 0..cols {
            let (x0, y0) = origin(0, c);
            let bars = c as u32 + 1;
            let pitch = (cw / (bars + 1)).max(1);
            for b in 1..=bars {
                let x = x0 + (b * pitch).min(cw - 1);
                for y in y0 + ch / 4..y0 + 3 * ch / 4 {
                    img.put_pixel(x, y, Rgb([255, 255, 255]));
                }
            }
        }
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x0, y0) = origin(r + header as usize, c);
            for (x, y, px) in cell.enumerate_pixels() {
                img.put_pixel(x0 + x, y0 + y, *px);
            }
        }
    }
    Ok(img)
}

/// Top-left pixel of grid cell `(row, col)`, counting the header row.
pub fn grid_cell_origin(row: usize, col: usize, cell: (u32, u32)) -> (u32, u32) {
    (
        GRID_GAP + col as u32 * (cell.0 + GRID_GAP),
        GRID_GAP + row as u32 * (cell.1 + GRID_GAP),
    )
}

/// Grid over the records of one domain: columns are the cameras present,
/// rows are `n_rows` identities sampled with `seed` among those seen by
/// every camera. Each cell shows the identity's lowest-sequence image in
/// that camera.
pub fn record_grid<T: Scalar>(
    records: &[DatasetRecord<T>],
    domain: Domain,
    n_rows: usize,
    seed: u64,
) -> Result<RgbImage> {
    let mut cells: BTreeMap<(u32, usize), &DatasetRecord<T>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.camera.domain == domain) {
        let slot = cells.entry((r.identity, r.camera.index)).or_insert(r);
        if r.seq < slot.seq {
            *slot = r;
        }
    }
    let cams: BTreeSet<usize> = cells.keys().map(|k| k.1).collect();
    let ids: BTreeSet<u32> = cells.keys().map(|k| k.0).collect();
    let complete: Vec<u32> = ids
        .into_iter()
        .filter(|id| cams.iter().all(|c| cells.contains_key(&(*id, *c))))
        .collect();
    if complete.is_empty() || n_rows == 0 {
        return Err(Error::validation(format!(
            "no {} identity is present in every camera",
            domain.name()
        )));
    }
    let mut rng = stage_rng(seed, "grid", 0);
    let mut picked: Vec<u32> = sample(&mut rng, complete.len(), n_rows.min(complete.len()))
        .into_iter()
        .map(|i| complete[i])
        .collect();
    picked.sort_unstable();
    let rows = picked
        .iter()
        .map(|id| {
            cams.iter()
                .map(|c| imageio::tensor_to_rgb(&cells[&(*id, *c)].image))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    compose_grid(&rows, true)
}
