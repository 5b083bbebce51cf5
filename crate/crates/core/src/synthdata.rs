//! Synthetic multi-camera benchmark and dataset directory I/O.
//!
//! Identities are parameterized foreground shapes (shape x fill color x
//! size); cameras are parametric style transforms (hue rotation, contrast,
//! brightness, background color, box blur). Masks are exact foreground
//! indicators, so they can be recomputed analytically from the spec.
//!
//! Directory layout written by [`generate_synthetic`]:
//!
//! ```text
//! root/dataset.json
//! root/{source,target}/{train,query,gallery}/{identity:04}_c{camera}_{seq:05}.png
//! root/{source,target}/{train,query,gallery}/{identity:04}_c{camera}_{seq:05}_mask.png
//! ```
//!
//! Translated images add the source camera: `{identity:04}_c{camera}_s{src}_{seq:05}.png`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Domain, DomainShape, SubDomainLabel};
use crate::error::{Error, Result};
use crate::imageio;
use crate::scalar::Scalar;
use crate::seeds::stage_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn market_dir(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord<T> {
    pub image: Tensor<T>,
    pub identity: u32,
    pub camera: SubDomainLabel,
    pub mask: Option<Tensor<T>>,
    pub split: Split,
    /// Sequence number from the filename.
    pub seq: u32,
    /// Originating source camera, set on translated images.
    pub source_camera: Option<usize>,
    /// File stem.
    pub name: String,
}

impl<T: Scalar> DatasetRecord<T> {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("{}: image shape {s:?}", self.name)));
        }
        if let Some(m) = &self.mask {
            if m.shape() != [1, s[1], s[2]] {
                return Err(Error::shape(format!(
                    "{}: mask shape {:?} does not match image {:?}",
                    self.name,
                    m.shape(),
                    s
                )));
            }
        }
        Ok(())
    }
}

/// Canonical file stem for a record.
pub fn record_stem(identity: u32, camera: usize, source_camera: Option<usize>, seq: u32) -> String {
    match source_camera {
        Some(s) => format!("{identity:04}_c{camera}_s{s}_{seq:05}"),
        None => format!("{identity:04}_c{camera}_{seq:05}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedName {
    pub identity: u32,
    pub camera: usize,
    pub source_camera: Option<usize>,
    pub seq: u32,
}

fn digits(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Parses `{identity}_c{camera}[_s{src}]_{seq}`.
pub fn parse_synthetic_name(stem: &str) -> Option<ParsedName> {
    let parts: Vec<&str> = stem.split('_').collect();
    let (src, seq) = match parts.len() {
        3 => (None, parts[2]),
        4 => (Some(digits(parts[2].strip_prefix('s')?)? as usize), parts[3]),
        _ => return None,
    };
    Some(ParsedName {
        identity: digits(parts[0])?,
        camera: digits(parts[1].strip_prefix('c')?)? as usize,
        source_camera: src,
        seq: digits(seq)?,
    })
}

/// Parses Market-1501 style names, `{identity}_c{camera}s{seq}_{frame}_{det}`.
/// Returns `Ok(None)` for junk images (identity -1).
pub fn parse_market_name(stem: &str) -> Option<Option<ParsedName>> {
    let mut parts = stem.split('_');
    let id = parts.next()?;
    if id == "-1" {
        return Some(None);
    }
    let identity = digits(id)?;
    let cam_tok = parts.next()?.strip_prefix('c')?;
    let end = cam_tok.find(|c: char| !c.is_ascii_digit()).unwrap_or(cam_tok.len());
    let camera = digits(&cam_tok[..end])? as usize;
    let rest = &cam_tok[end..];
    let seq = match rest.strip_prefix('s') {
        Some(s) => digits(s)?,
        None if rest.is_empty() => 0,
        None => return None,
    };
    let frame = parts.next().map(digits).unwrap_or(Some(0))?;
    Some(Some(ParsedName {
        identity,
        camera,
        source_camera: None,
        seq: seq.wrapping_mul(1_000_000).wrapping_add(frame),
    }))
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub hue_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub background: [f64; 3],
    pub blur_radius: usize,
}

impl CameraStyle {
    pub fn neutral() -> Self {
        CameraStyle {
            hue_degrees: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            background: [-0.4, -0.4, -0.4],
            blur_radius: 0,
        }
    }

    /// Built-in style for camera `k` (0-based) of `count`.
    pub fn default_for(domain: Domain, k: usize, count: usize) -> Self {
        let f = k as f64 / count.max(1) as f64;
        let tau = std::f64::consts::TAU;
        let (angle, level) = match domain {
            Domain::Source => (tau * f, -0.25),
            Domain::Target => (tau * (f + 0.5 / count.max(1) as f64) + 1.0, 0.15),
        };
        let bg = [
            level + 0.45 * angle.cos(),
            level + 0.45 * (angle - tau / 3.0).cos(),
            level + 0.45 * (angle + tau / 3.0).cos(),
        ];
        match domain {
            Domain::Source => CameraStyle {
                hue_degrees: 25.0 * f,
                brightness: -0.05 + 0.1 * f,
                contrast: 1.0 - 0.1 * f,
                background: bg,
                blur_radius: 0,
            },
            Domain::Target => CameraStyle {
                hue_degrees: -30.0 + 50.0 * f,
                brightness: 0.1 - 0.15 * f,
                contrast: 0.85 + 0.2 * f,
                background: bg,
                blur_radius: k % 2,
            },
        }
    }

    fn key(&self) -> [u64; 7] {
        [
            self.hue_degrees.to_bits(),
            self.brightness.to_bits(),
            self.contrast.to_bits(),
            self.background[0].to_bits(),
            self.background[1].to_bits(),
            self.background[2].to_bits(),
            self.blur_radius as u64,
        ]
    }

    /// Hue rotation about the gray axis, then contrast gain, brightness
    /// offset and clipping to `[-1, 1]`.
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let th = self.hue_degrees.to_radians();
        let (s, c) = th.sin_cos();
        let k = 1.0 / 3f64.sqrt();
        let t = (1.0 - c) * k * k;
        let sk = s * k;
        let rot = [
            [c + t, t - sk, t + sk],
            [t + sk, c + t, t - sk],
            [t - sk, t + sk, c + t],
        ];
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(rot.iter()) {
            let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            *o = (self.contrast * v + self.brightness).clamp(-1.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Whether point `(dx, dy)` relative to the center lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            ShapeKind::Cross => {
                let (ax, ay) = (dx.abs(), dy.abs());
                (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3025 * r * r
            }
        }
    }
}

pub const PALETTE: [[f64; 3]; 8] = [
    [0.7, -0.6, -0.6],
    [-0.6, 0.7, -0.6],
    [-0.6, -0.5, 0.7],
    [0.7, 0.7, -0.6],
    [0.7, -0.6, 0.7],
    [-0.6, 0.7, 0.7],
    [0.7, 0.1, -0.7],
    [0.6, 0.6, 0.6],
];

pub const SIZE_FRACTIONS: [f64; 3] = [0.2, 0.26, 0.32];

/// Number of distinct identity appearances.
pub const APPEARANCES: usize = 6 * 8 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub size_fraction: f64,
}

impl Appearance {
    pub fn from_code(code: usize) -> Self {
        Appearance {
            shape: ShapeKind::ALL[code % 6],
            color: PALETTE[(code / 6) % 8],
            size_fraction: SIZE_FRACTIONS[(code / 48) % 3],
        }
    }
}

/// Rasterizes a shape at pixel centers; returns `h * w` indicators.
pub fn rasterize(shape: ShapeKind, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Training identities per domain.
    pub n_identities: usize,
    /// Query/gallery identities per domain.
    pub n_test_identities: usize,
    pub m: usize,
    pub n: usize,
    pub images_per_camera: usize,
    pub source_styles: Vec<CameraStyle>,
    pub target_styles: Vec<CameraStyle>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk benchmark: 32x32 images with built-in camera styles.
    pub fn desk(m: usize, n: usize, seed: u64) -> Self {
        SynthSpec {
            n_identities: 24,
            n_test_identities: 12,
            m,
            n,
            images_per_camera: 4,
            source_styles: (0..m).map(|k| CameraStyle::default_for(Domain::Source, k, m)).collect(),
            target_styles: (0..n).map(|k| CameraStyle::default_for(Domain::Target, k, n)).collect(),
            height: 32,
            width: 32,
            seed,
        }
    }

    pub fn shape(&self) -> Result<DomainShape> {
        DomainShape::new(self.m, self.n, self.height, self.width)
    }

    pub fn styles(&self, domain: Domain) -> &[CameraStyle] {
        match domain {
            Domain::Source => &self.source_styles,
            Domain::Target => &self.target_styles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if self.m < 2 || self.n < 2 {
            return Err(Error::validation(
                "synthetic identities must appear in at least two cameras; need M >= 2 and N >= 2",
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::validation("synthetic images must be at least 16x16"));
        }
        if self.source_styles.len() != self.m || self.target_styles.len() != self.n {
            return Err(Error::validation(format!(
                "style count ({}, {}) does not match cameras ({}, {})",
                self.source_styles.len(),
                self.target_styles.len(),
                self.m,
                self.n
            )));
        }
        if self.n_identities == 0 || self.n_test_identities == 0 || self.images_per_camera == 0 {
            return Err(Error::validation("identity and image counts must be positive"));
        }
        if 2 * (self.n_identities + self.n_test_identities) > APPEARANCES {
            return Err(Error::validation(format!(
                "at most {APPEARANCES} identities across both domains"
            )));
        }
        let mut seen: Vec<([u64; 7], String)> = Vec::new();
        for d in [Domain::Source, Domain::Target] {
            for (k, st) in self.styles(d).iter().enumerate() {
                let label = format!("{} camera {}", d.name(), k + 1);
                if let Some((_, other)) = seen.iter().find(|(key, _)| *key == st.key()) {
                    return Err(Error::validation(format!(
                        "camera style collision between {other} and {label}"
                    )));
                }
                seen.push((st.key(), label));
            }
        }
        Ok(())
    }

    fn ids_per_domain(&self) -> u32 {
        (self.n_identities + self.n_test_identities) as u32
    }

    /// Appearance code assigned to an identity label.
    pub fn appearance(&self, identity: u32) -> Appearance {
        let mut codes: Vec<usize> = (0..APPEARANCES).collect();
        codes.shuffle(&mut stage_rng(self.seed, "synth-identities", 0));
        Appearance::from_code(codes[identity as usize % APPEARANCES])
    }

    /// Foreground center for an image.
    pub fn placement(&self, domain: Domain, seq: u32) -> (f64, f64) {
        let code = ((domain == Domain::Target) as u64) << 32 | seq as u64;
        let mut rng = stage_rng(self.seed, "synth-jitter", code);
        let j = (self.height.min(self.width) / 16).max(1) as i64;
        let dx = rng.random_range(-j..=j) as f64;
        let dy = rng.random_range(-j..=j) as f64;
        (self.width as f64 / 2.0 + dx, self.height as f64 / 2.0 + dy)
    }

    /// Analytic foreground mask, `h * w` indicators.
    pub fn mask_bits(&self, domain: Domain, identity: u32, seq: u32) -> Vec<bool> {
        let app = self.appearance(identity);
        let (cx, cy) = self.placement(domain, seq);
        let r = app.size_fraction * self.height.min(self.width) as f64;
        rasterize(app.shape, cx, cy, r, self.height, self.width)
    }

    fn render(&self, domain: Domain, identity: u32, camera: usize, seq: u32) -> (Vec<u8>, Vec<bool>) {
        let (h, w) = (self.height, self.width);
        let app = self.appearance(identity);
        let mask = self.mask_bits(domain, identity, seq);
        let style = &self.styles(domain)[camera - 1];
        let fg = style.apply(app.color);
        let bg = style.apply(style.background);
        let mut planes = vec![0.0f64; 3 * h * w];
        for (p, &m) in mask.iter().enumerate() {
            let v = if m { fg } else { bg };
            for c in 0..3 {
                planes[c * h * w + p] = v[c];
            }
        }
        box_blur(&mut planes, h, w, style.blur_radius);
        let bytes = planes.iter().map(|&v| imageio::to_byte(v)).collect();
        (bytes, mask)
    }
}

fn box_blur(planes: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let ri = r as isize;
    let n = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for plane in planes.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -ri..=ri {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += plane[y * w + xx];
                }
                tmp[y * w + x] = s / n;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -ri..=ri {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[yy * w + x];
                }
                plane[y * w + x] = s / n;
            }
        }
    }
}

fn bytes_to_tensor<T: Scalar>(bytes: &[u8], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_vec(&[3, h, w], bytes.iter().map(|&b| imageio::to_unit(b)).collect()).expect("shape")
}

fn bits_to_mask<T: Scalar>(bits: &[bool], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_vec(
        &[1, h, w],
        bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    )
    .expect("shape")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitListing {
    pub domain: Domain,
    pub split: Split,
    pub files: Vec<String>,
}

/// `dataset.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub shape: DomainShape,
    pub spec: Option<SynthSpec>,
    pub counts: Vec<(String, usize)>,
    pub splits: Vec<SplitListing>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl DatasetManifest {
    pub fn build<T>(kind: &str, shape: DomainShape, spec: Option<SynthSpec>, records: &[DatasetRecord<T>]) -> Self {
        let mut splits: Vec<SplitListing> = Vec::new();
        for d in [Domain::Source, Domain::Target] {
            for s in Split::ALL {
                let files: Vec<String> = records
                    .iter()
                    .filter(|r| r.camera.domain == d && r.split == s)
                    .map(|r| format!("{}.png", r.name))
                    .collect();
                if !files.is_empty() {
                    splits.push(SplitListing {
                        domain: d,
                        split: s,
                        files,
                    });
                }
            }
        }
        let counts = splits
            .iter()
            .map(|l| (format!("{}/{}", l.domain.name(), l.split.name()), l.files.len()))
            .collect();
        DatasetManifest {
            kind: kind.into(),
            shape,
            spec,
            counts,
            splits,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("dataset.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e.to_string()))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::file(&path, e.to_string()))
    }
}

fn canonical_order<T>(records: &mut [DatasetRecord<T>]) {
    records.sort_by(|a, b| (a.camera.domain, a.split, &a.name).cmp(&(b.camera.domain, b.split, &b.name)));
}

/// Renders the benchmark in memory, in canonical order.
pub fn synthesize<T: Scalar>(spec: &SynthSpec) -> Result<Vec<DatasetRecord<T>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut jobs = Vec::new();
    for (dn, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let cams = if domain == Domain::Source { spec.m } else { spec.n };
        let base = dn as u32 * spec.ids_per_domain();
        let mut seq = 0u32;
        for local in 0..spec.ids_per_domain() {
            let identity = base + local;
            let test_idx = local.checked_sub(spec.n_identities as u32);
            for cam in 1..=cams {
                let split = match test_idx {
                    None => Split::Train,
                    Some(t) if (t as usize % cams) + 1 == cam => Split::Query,
                    Some(_) => Split::Gallery,
                };
                for _ in 0..spec.images_per_camera {
                    seq += 1;
                    jobs.push((domain, identity, cam, seq, split));
                }
            }
        }
    }
    let mut records: Vec<DatasetRecord<T>> = jobs
        .into_par_iter()
        .map(|(domain, identity, cam, seq, split)| {
            let (bytes, mask) = spec.render(domain, identity, cam, seq);
            DatasetRecord {
                image: bytes_to_tensor(&bytes, h, w),
                identity,
                camera: SubDomainLabel { domain, index: cam },
                mask: Some(bits_to_mask(&mask, h, w)),
                split,
                seq,
                source_camera: None,
                name: record_stem(identity, cam, None, seq),
            }
        })
        .collect();
    canonical_order(&mut records);
    Ok(records)
}

/// Directory holding one (domain, split) of a synthetic-layout dataset.
pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.name()).join(split.name())
}

/// Writes records in the synthetic layout (images plus mask siblings).
pub fn write_records<T: Scalar>(root: &Path, records: &[DatasetRecord<T>]) -> Result<()> {
    for d in [Domain::Source, Domain::Target] {
        for s in Split::ALL {
            if records.iter().any(|r| r.camera.domain == d && r.split == s) {
                let dir = split_dir(root, d, s);
                fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e.to_string()))?;
            }
        }
    }
    records.par_iter().try_for_each(|r| {
        let dir = split_dir(root, r.camera.domain, r.split);
        imageio::save_rgb(&r.image, &dir.join(format!("{}.png", r.name)))?;
        if let Some(m) = &r.mask {
            imageio::save_mask(m, &dir.join(format!("{}_mask.png", r.name)))?;
        }
        Ok(())
    })
}

/// Renders the benchmark to `root` and returns the in-memory records.
pub fn generate_synthetic<T: Scalar>(spec: &SynthSpec, root: &Path) -> Result<Vec<DatasetRecord<T>>> {
    let records = synthesize::<T>(spec)?;
    fs::create_dir_all(root).map_err(|e| Error::file(root, e.to_string()))?;
    write_records(root, &records)?;
    DatasetManifest::build("synthetic", spec.shape()?, Some(spec.clone()), &records).write(root)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `{source,target}/{train,query,gallery}` with the synthetic filename grammar.
    Synthetic,
    /// `bounding_box_train`, `query`, `bounding_box_test` for one domain.
    MarketStyle(Domain),
}

impl Layout {
    pub fn parse(s: &str, domain: Domain) -> Result<Self> {
        match s {
            "synthetic" => Ok(Layout::Synthetic),
            "market_style" | "market" => Ok(Layout::MarketStyle(domain)),
            _ => Err(Error::validation(format!("unknown dataset layout {s:?}"))),
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::file(dir, e.to_string()))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.ends_with("_mask") {
            continue;
        }
        out.push(p);
    }
    out.sort();
    Ok(out)
}

struct Pending {
    path: PathBuf,
    parsed: ParsedName,
    domain: Domain,
    split: Split,
}

/// Loads a dataset directory, validating labels against `shape`. Images
/// whose size differs from `(shape.h, shape.w)` are resized.
pub fn load_dataset<T: Scalar>(root: &Path, layout: Layout, shape: &DomainShape) -> Result<Vec<DatasetRecord<T>>> {
    if !root.is_dir() {
        return Err(Error::file(root, "dataset directory does not exist"));
    }
    let mut pending = Vec::new();
    let mut dirs: Vec<(PathBuf, Domain, Split)> = Vec::new();
    match layout {
        Layout::Synthetic => {
            for d in [Domain::Source, Domain::Target] {
                for s in Split::ALL {
                    dirs.push((split_dir(root, d, s), d, s));
                }
            }
        }
        Layout::MarketStyle(d) => {
            for s in Split::ALL {
                dirs.push((root.join(s.market_dir()), d, s));
            }
        }
    }
    for (dir, domain, split) in dirs {
        if !dir.is_dir() {
            continue;
        }
        for path in list_images(&dir)? {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            let parsed = match layout {
                Layout::Synthetic => parse_synthetic_name(&stem).map(Some),
                Layout::MarketStyle(_) => parse_market_name(&stem),
            };
            let parsed = match parsed {
                Some(Some(p)) => p,
                Some(None) => continue,
                None => return Err(Error::file(&path, "malformed filename")),
            };
            let label = SubDomainLabel {
                domain,
                index: parsed.camera,
            };
            label
                .validate(shape)
                .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
            pending.push(Pending {
                path,
                parsed,
                domain,
                split,
            });
        }
    }
    let size = Some((shape.h, shape.w));
    let mut records: Vec<DatasetRecord<T>> = pending
        .into_par_iter()
        .map(|p| {
            let image = imageio::load_rgb::<T>(&p.path, size)?;
            let stem = p.path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            let mask_path = p.path.with_file_name(format!("{stem}_mask.png"));
            let mask = if mask_path.is_file() {
                Some(imageio::load_mask::<T>(&mask_path, size)?)
            } else {
                None
            };
            let r = DatasetRecord {
                image,
                identity: p.parsed.identity,
                camera: SubDomainLabel {
                    domain: p.domain,
                    index: p.parsed.camera,
                },
                mask,
                split: p.split,
                seq: p.parsed.seq,
                source_camera: p.parsed.source_camera,
                name: stem,
            };
            r.validate()?;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    canonical_order(&mut records);
    check_subdomains(&records, shape)?;
    Ok(records)
}

/// Every camera of every domain present in `records` must occur.
pub fn check_subdomains<T>(records: &[DatasetRecord<T>], shape: &DomainShape) -> Result<()> {
    for d in [Domain::Source, Domain::Target] {
        let present: BTreeSet<usize> = records
            .iter()
            .filter(|r| r.camera.domain == d)
            .map(|r| r.camera.index)
            .collect();
        if present.is_empty() {
            continue;
        }
        let missing: Vec<String> = (1..=shape.cameras(d))
            .filter(|c| !present.contains(c))
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::validation(format!(
                "{} domain has no images for camera(s) {}",
                d.name(),
                missing.join(", ")
            )));
        }
    }
    Ok(())
}

/// Stored mask, or the analytic one when `oracle` describes the dataset.
pub fn mask_of<T: Scalar>(record: &DatasetRecord<T>, oracle: Option<&SynthSpec>) -> Result<Tensor<T>> {
    if let Some(m) = &record.mask {
        return Ok(m.clone());
    }
    match (oracle, record.source_camera) {
        (Some(spec), None) => {
            let bits = spec.mask_bits(record.camera.domain, record.identity, record.seq);
            Ok(bits_to_mask(&bits, spec.height, spec.width))
        }
        _ => Err(Error::MaskUnavailable(record.name.clone())),
    }
}

/// Records of one domain and split, in order.
pub fn select<T>(records: &[DatasetRecord<T>], domain: Domain, split: Split) -> Vec<&DatasetRecord<T>> {
    records
        .iter()
        .filter(|r| r.camera.domain == domain && r.split == split)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_synthetic_names() {
        let p = parse_synthetic_name("0007_c3_00012").unwrap();
        assert_eq!((p.identity, p.camera, p.source_camera, p.seq), (7, 3, None, 12));
        let p = parse_synthetic_name("0007_c3_s2_00012").unwrap();
        assert_eq!(p.source_camera, Some(2));
        assert!(parse_synthetic_name("0007_x3_00012").is_none());
        assert!(parse_synthetic_name("abc").is_none());
    }

    #[test]
    fn parses_market_names() {
        let p = parse_market_name("0002_c1s1_000451_03").unwrap().unwrap();
        assert_eq!((p.identity, p.camera), (2, 1));
        assert_eq!(parse_market_name("-1_c3s2_001_01"), Some(None));
        assert!(parse_market_name("zz_c1s1_0_0").is_none());
    }

    #[test]
    fn stem_roundtrips() {
        let s = record_stem(12, 2, Some(1), 345);
        let p = parse_synthetic_name(&s).unwrap();
        assert_eq!((p.identity, p.camera, p.source_camera, p.seq), (12, 2, Some(1), 345));
    }

    #[test]
    fn zero_hue_is_identity_rotation() {
        let st = CameraStyle::neutral();
        let v = st.apply([0.3, -0.2, 0.5]);
        for (a, b) in v.iter().zip([0.3, -0.2, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_styles_are_distinct() {
        SynthSpec::desk(4, 6, 1).validate().unwrap();
    }
}
