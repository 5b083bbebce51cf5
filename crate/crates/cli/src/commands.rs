//! Command implementations shared by the subcommands and `run-recipe`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use m2m_core::checkpoint::{checkpoint_dtype, load_checkpoint, load_models};
use m2m_core::embedding::{Domain, DomainShape, SubDomainLabel};
use m2m_core::imageio;
use m2m_core::networks::Preset;
use m2m_core::reid::{
    evaluate, extract_features, load_feature_model, plot_cmc, random_features, save_feature_model,
    train_feature_learner, EvalReport, FeatureLearnerSpec, Scheme, Tag,
};
use m2m_core::synthdata::{
    generate_synthetic, load_dataset, select, DatasetManifest, DatasetRecord, Layout, Split, SynthSpec,
};
use m2m_core::trainer::{content_hash, train_from, TrainConfig, TrainData, TrainOutputs, TrainState};
use m2m_core::transfer::{compose_grid, generate_fakes, record_grid, write_fakes};
use m2m_core::{DType, Error, Scalar};
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::Settings;

/// Provenance block echoed into every artifact.
pub fn provenance(command: &str, settings: &Settings, seed: u64, extra: Value) -> Value {
    let text = settings.to_text();
    json!({
        "command": command,
        "settings": settings.to_json(),
        "seed": seed,
        "settings_hash": content_hash(text.as_bytes()),
        "inputs": extra,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()).into())
        }
        _ => Ok(()),
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::file(path, e.to_string()))?;
    Ok(())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    Ok(content_hash(&bytes))
}

pub fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "source" | "s" => Ok(Domain::Source),
        "target" | "t" => Ok(Domain::Target),
        _ => Err(Error::validation(format!("unknown domain {s:?}; expected source or target")).into()),
    }
}

// ---------------------------------------------------------------------------
// Data

/// A dataset on disk: one synthetic-layout root, or a pair of
/// Market-style directories.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(PathBuf),
    Market {
        source: PathBuf,
        target: PathBuf,
        shape: DomainShape,
    },
}

pub struct Dataset {
    pub records: Vec<DatasetRecord<f32>>,
    pub hash: String,
}

impl DataSource {
    pub fn load<T: Scalar>(&self) -> Result<(Vec<DatasetRecord<T>>, DomainShape, Option<SynthSpec>, String)> {
        match self {
            DataSource::Synthetic(root) => {
                let manifest = DatasetManifest::read(root)?;
                let records = load_dataset::<T>(root, Layout::Synthetic, &manifest.shape)?;
                let hash = file_hash(&root.join("dataset.json"))?;
                Ok((records, manifest.shape, manifest.spec, hash))
            }
            DataSource::Market { source, target, shape } => {
                let mut records = load_dataset::<T>(source, Layout::MarketStyle(Domain::Source), shape)?;
                records.extend(load_dataset::<T>(target, Layout::MarketStyle(Domain::Target), shape)?);
                let names: String = records.iter().map(|r| format!("{}\n", r.name)).collect();
                Ok((records, *shape, None, content_hash(names.as_bytes())))
            }
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let (records, _, _, hash) = self.load::<f32>()?;
        Ok(Dataset { records, hash })
    }
}

// ---------------------------------------------------------------------------
// synth-data

pub fn synth_spec(settings: &Settings) -> Result<SynthSpec> {
    let m = settings.get_or("m", 2usize)?;
    let n = settings.get_or("n", 2usize)?;
    let seed = settings.get_or("seed", 0u64)?;
    let d = SynthSpec::desk(m, n, seed);
    let spec = SynthSpec {
        n_identities: settings.get_or("n_identities", d.n_identities)?,
        n_test_identities: settings.get_or("n_test_identities", d.n_test_identities)?,
        images_per_camera: settings.get_or("images_per_camera", d.images_per_camera)?,
        height: settings.get_or("height", d.height)?,
        width: settings.get_or("width", d.width)?,
        ..d
    };
    spec.validate()?;
    Ok(spec)
}

pub fn synth_data(out: &Path, spec: &SynthSpec, prov: Value) -> Result<usize> {
    let records = generate_synthetic::<f32>(spec, out)?;
    let mut manifest = DatasetManifest::read(out)?;
    manifest.provenance = prov;
    manifest.write(out)?;
    Ok(records.len())
}

// ---------------------------------------------------------------------------
// train-gan

pub fn train_config(settings: &Settings) -> Result<TrainConfig> {
    let preset = settings
        .raw("preset")
        .map(Preset::parse)
        .transpose()?
        .unwrap_or(Preset::Desk);
    let mut cfg = TrainConfig::for_preset(preset);
    for key in m2m_core::trainer::CONFIG_KEYS {
        if key == "preset" {
            continue;
        }
        if let Some(v) = settings.raw(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

pub fn parse_dtype(settings: &Settings) -> Result<DType> {
    match settings.raw("dtype").unwrap_or("f32") {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        d => Err(Error::validation(format!("dtype must be f32 or f64, got {d:?}")).into()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iteration: u64,
    pub resumed_from: Option<u64>,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub last_g_report: Option<m2m_core::losses::LossReport>,
}

pub fn train_gan(
    data: &DataSource,
    out: &Path,
    cfg: TrainConfig,
    dtype: DType,
    resume: bool,
    prov: Value,
) -> Result<TrainSummary> {
    match dtype {
        DType::F32 => train_gan_t::<f32>(data, out, cfg, resume, prov),
        DType::F64 => train_gan_t::<f64>(data, out, cfg, resume, prov),
    }
}

fn train_gan_t<T: Scalar>(
    data: &DataSource,
    out: &Path,
    cfg: TrainConfig,
    resume: bool,
    prov: Value,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let (records, shape, spec, data_hash) = data.load::<T>()?;
    let train = TrainData::from_records(&records, shape, spec.as_ref())?;
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    fs::create_dir_all(out).map_err(|e| Error::file(out, e.to_string()))?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| Error::file(out, e.to_string()))?;
    let latest = outputs.latest();
    let mut state = if resume && latest.exists() {
        let st = load_checkpoint::<T>(&latest)?;
        if st.cfg != cfg {
            return Err(Error::validation(format!(
                "{} was written with config {}, requested {}",
                latest.display(),
                st.cfg.hash(),
                cfg.hash()
            ))
            .into());
        }
        st
    } else {
        TrainState::<T>::new(cfg.clone(), shape)?
    };
    let resumed_from = (state.iteration > 0).then_some(state.iteration);
    let every = (cfg.total_iters / 10).max(1);
    train_from(&mut state, &train, Some(&outputs), &mut |s| {
        if s.iteration % every == 0 {
            if let Some(r) = s.history.last() {
                eprintln!(
                    "iter {:>6}/{}  lr {:.2e}  rec {:.4}  mask {:.4}  total_G {:.4}",
                    s.iteration, s.cfg.total_iters, r.lr, r.report.rec, r.report.mask, r.report.total_g
                );
            }
        }
        Ok(())
    })?;
    let summary = TrainSummary {
        iteration: state.iteration,
        resumed_from,
        config_hash: cfg.hash(),
        checkpoint: outputs.checkpoint(state.iteration),
        last_g_report: state
            .history
            .iter()
            .rev()
            .find(|r| r.phase == m2m_core::trainer::Phase::G)
            .map(|r| r.report),
    };
    write_json(
        &out.join("run.json"),
        &json!({ "provenance": prov, "data_hash": data_hash, "config": cfg, "summary": summary }),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// generate-fakes

pub fn fakes(checkpoint: &Path, data: &DataSource, out: &Path, prov: Value) -> Result<usize> {
    match checkpoint_dtype(checkpoint)? {
        DType::F32 => fakes_t::<f32>(checkpoint, data, out, prov),
        DType::F64 => fakes_t::<f64>(checkpoint, data, out, prov),
    }
}

fn fakes_t<T: Scalar>(checkpoint: &Path, data: &DataSource, out: &Path, prov: Value) -> Result<usize> {
    let models = load_models::<T>(checkpoint)?;
    let (records, shape, _, data_hash) = data.load::<T>()?;
    let fakes = generate_fakes(&models, &records, &shape)?;
    let prov = json!({
        "run": prov,
        "checkpoint": checkpoint.display().to_string(),
        "checkpoint_hash": file_hash(checkpoint)?,
        "data_hash": data_hash,
    });
    write_fakes(out, &fakes, shape, prov)?;
    Ok(fakes.len())
}

// ---------------------------------------------------------------------------
// train-reid

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReidInput {
    Fake,
    FakePlusReal,
    /// Real labeled source images only, no translation.
    Direct,
}

pub fn reid_spec(settings: &Settings, n_classes: usize, scheme: Scheme) -> Result<FeatureLearnerSpec> {
    let backbone = settings
        .raw("backbone")
        .map(Preset::parse)
        .transpose()?
        .unwrap_or(Preset::Desk);
    let seed = settings.get_or("seed", 0u64)?;
    let base = match backbone {
        Preset::Desk => FeatureLearnerSpec::desk(n_classes, scheme, seed),
        Preset::Paper => FeatureLearnerSpec::paper(n_classes, scheme, seed),
    };
    let fit = &base.fit;
    let spec = FeatureLearnerSpec {
        embedding_dim: settings.get_or("embedding_dim", base.embedding_dim)?,
        fit: m2m_core::reid::FitConfig {
            epochs: settings.get_or("epochs", fit.epochs)?,
            batch_size: settings.get_or("batch_size", fit.batch_size)?,
            base_lr: settings.get_or("base_lr", fit.base_lr)?,
            lr_step: settings.get_or("lr_step", fit.lr_step)?,
            seed,
        },
        ..base
    };
    spec.validate()?;
    Ok(spec)
}

pub fn reid_input(settings: &Settings) -> Result<ReidInput> {
    match (settings.raw("baseline"), settings.raw("scheme")) {
        (Some("direct"), None) => Ok(ReidInput::Direct),
        (Some("direct"), Some(s)) => {
            Err(Error::validation(format!("baseline=direct cannot be combined with scheme {s}")).into())
        }
        (Some(b), _) => Err(Error::validation(format!("unknown training baseline {b:?}; expected direct")).into()),
        (None, s) => match Scheme::parse(s.unwrap_or("fake"))? {
            Scheme::Fake => Ok(ReidInput::Fake),
            Scheme::FakePlusReal => Ok(ReidInput::FakePlusReal),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReidSummary {
    pub input: String,
    pub n_fake: usize,
    pub n_real: usize,
    pub n_identities: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Trains on the training split of the fakes (and, for `fake_plus_real`,
/// the real source images they came from).
pub fn train_reid(
    fakes_dir: Option<&Path>,
    real: &DataSource,
    input: ReidInput,
    settings: &Settings,
    out: &Path,
    prov: Value,
) -> Result<ReidSummary> {
    let real = real.dataset()?;
    let real_train: Vec<DatasetRecord<f32>> = select(&real.records, Domain::Source, Split::Train)
        .into_iter()
        .cloned()
        .collect();
    let (fake_train, fake_hash) = match (input, fakes_dir) {
        (ReidInput::Direct, _) => (Vec::new(), Value::Null),
        (_, Some(dir)) => {
            let f = DataSource::Synthetic(dir.to_path_buf()).dataset()?;
            let train: Vec<_> = f.records.into_iter().filter(|r| r.split == Split::Train).collect();
            (train, Value::String(f.hash))
        }
        (_, None) => return Err(Error::validation("this scheme needs --fakes").into()),
    };
    let primary = if input == ReidInput::Direct {
        &real_train
    } else {
        &fake_train
    };
    let n_classes = primary.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len();
    let scheme = if input == ReidInput::FakePlusReal {
        Scheme::FakePlusReal
    } else {
        Scheme::Fake
    };
    let spec = reid_spec(settings, n_classes, scheme)?;
    let model = train_feature_learner(&spec, primary, Some(&real_train))?;
    let prov = json!({ "run": prov, "fakes_hash": fake_hash, "real_hash": real.hash });
    save_feature_model(out, &model, prov)?;
    Ok(ReidSummary {
        input: match input {
            ReidInput::Fake => "fake",
            ReidInput::FakePlusReal => "fake_plus_real",
            ReidInput::Direct => "direct",
        }
        .into(),
        n_fake: if input == ReidInput::Direct {
            0
        } else {
            model.log.n_fake
        },
        n_real: if input == ReidInput::Direct {
            model.log.n_fake
        } else {
            model.log.n_real
        },
        n_identities: model.log.n_identities,
        train_accuracy: model.log.train_accuracy,
        final_loss: model.log.fit.epoch_loss.last().copied().unwrap_or(f64::NAN),
    })
}

// ---------------------------------------------------------------------------
// evaluate

pub enum Features {
    Model(PathBuf),
    Random { dim: usize, seed: u64 },
}

/// Target-domain query against target-domain gallery.
pub fn evaluate_cmd(features: &Features, data: &DataSource, k: usize, out: &Path, prov: Value) -> Result<EvalReport> {
    let ds = data.dataset()?;
    let query = select(&ds.records, Domain::Target, Split::Query);
    let gallery = select(&ds.records, Domain::Target, Split::Gallery);
    let qt: Vec<Tag> = query.iter().map(|r| Tag::of(*r)).collect();
    let gt: Vec<Tag> = gallery.iter().map(|r| Tag::of(*r)).collect();
    let (qf, gf, model_hash) = match features {
        Features::Model(path) => {
            let (model, _) = load_feature_model::<f32>(path)?;
            let qi: Vec<_> = query.iter().map(|r| &r.image).collect();
            let gi: Vec<_> = gallery.iter().map(|r| &r.image).collect();
            (
                extract_features(&model, &qi)?,
                extract_features(&model, &gi)?,
                Value::String(file_hash(path)?),
            )
        }
        Features::Random { dim, seed } => (
            random_features::<f32>(query.len(), *dim, m2m_core::seeds::derive_seed(*seed, "eval-random", 0)),
            random_features::<f32>(
                gallery.len(),
                *dim,
                m2m_core::seeds::derive_seed(*seed, "eval-random", 1),
            ),
            Value::Null,
        ),
    };
    let k = k.min(gallery.len()).max(1);
    let report = evaluate(&qf, &qt, &gf, &gt, k)?;
    fs::create_dir_all(out).map_err(|e| Error::file(out, e.to_string()))?;
    let mut doc = serde_json::to_value(&report)?;
    doc["provenance"] = json!({ "run": prov, "model_hash": model_hash, "data_hash": ds.hash });
    write_json(&out.join("eval.json"), &doc)?;
    plot_cmc(&report, &out.join("cmc.png"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// translate / grid

pub fn translate(
    checkpoint: &Path,
    image: &Path,
    src: SubDomainLabel,
    tgt: SubDomainLabel,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    match checkpoint_dtype(checkpoint)? {
        DType::F32 => translate_t::<f32>(checkpoint, image, src, tgt, out),
        DType::F64 => translate_t::<f64>(checkpoint, image, src, tgt, out),
    }
}

fn translate_t<T: Scalar>(
    checkpoint: &Path,
    image: &Path,
    src: SubDomainLabel,
    tgt: SubDomainLabel,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let models = load_models::<T>(checkpoint)?;
    src.validate(&models.shape)?;
    tgt.validate(&models.shape)?;
    let x = imageio::load_rgb::<T>(image, Some((models.shape.h, models.shape.w)))?;
    let y = models.translate(&x, src, tgt)?;
    ensure_parent(out)?;
    imageio::save_rgb(&y, out)?;
    let pair = compose_grid(&[vec![imageio::tensor_to_rgb(&x)?, imageio::tensor_to_rgb(&y)?]], false)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("translated");
    let side = out.with_file_name(format!("{stem}_pair.png"));
    pair.save(&side).map_err(|e| Error::file(&side, e.to_string()))?;
    Ok((out.to_path_buf(), side))
}

pub fn grid(data: &DataSource, domain: Domain, rows: usize, seed: u64, out: &Path) -> Result<(u32, u32)> {
    let ds = data.dataset()?;
    let img = record_grid(&ds.records, domain, rows, seed)?;
    ensure_parent(out)?;
    img.save(out).map_err(|e| Error::file(out, e.to_string()))?;
    Ok(img.dimensions())
}
