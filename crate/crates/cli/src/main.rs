//! `m2m`: experiment driver.
//!
//! Every subcommand takes an optional `--config FILE` of `key = value` lines
//! followed by `--key value` overrides. Unknown keys are rejected.
//! Exit codes: 0 success, 2 validation, 3 numeric divergence, 4 I/O.

mod commands;
mod recipe;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use m2m_core::cost::cost_report;
use m2m_core::embedding::{DomainShape, SubDomainLabel};
use m2m_core::networks::Preset;
use m2m_core::Error;
use serde_json::json;

use commands::{DataSource, Features};
use settings::Settings;

#[derive(Parser)]
#[command(
    name = "m2m",
    version,
    about = "Many-to-many camera style transfer for person re-identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-domain dataset.
    /// Keys: out, m, n, seed, n_identities, n_test_identities, images_per_camera, height, width.
    SynthData(Common),
    /// Train the unified generator and discriminators.
    /// Keys: data (or source_dir, target_dir, m, n, height, width), out, dtype, resume, and the training config keys.
    TrainGan(Common),
    /// Translate every source image to every target camera.
    /// Keys: checkpoint, data, out.
    GenerateFakes(Common),
    /// Train a feature learner on fakes.
    /// Keys: fakes, data, out, scheme (fake | fake_plus_real) or baseline=direct, backbone, seed, embedding_dim, epochs, batch_size, base_lr, lr_step.
    TrainReid(Common),
    /// Rank the target query split against the target gallery.
    /// Keys: model (or random_dim, seed), data, k, out.
    Evaluate(Common),
    /// Run every stage, resuming from completion markers.
    /// Keys: out, seed, m, n, dtype, k, synth.*, gan.*, reid.*.
    RunRecipe(Common),
    /// Parameter counts for separate per-pair models versus one unified model.
    /// Keys: m, n, preset, format (text | json | csv), out.
    CostReport(Common),
    /// Translate one image between camera sub-domains.
    /// Keys: checkpoint, image, src, tgt, out.
    Translate(Common),
    /// Tile one image per identity and camera.
    /// Keys: data, domain, rows, seed, out.
    Grid(Common),
}

fn required(s: &Settings, key: &str) -> Result<String> {
    s.raw(key)
        .map(str::to_string)
        .ok_or_else(|| Error::validation(format!("missing required setting --{}", key.replace('_', "-"))).into())
}

fn path_of(s: &Settings, key: &str) -> Result<PathBuf> {
    required(s, key).map(PathBuf::from)
}

fn data_source(s: &Settings) -> Result<DataSource> {
    match (s.raw("data"), s.raw("source_dir"), s.raw("target_dir")) {
        (Some(d), None, None) => Ok(DataSource::Synthetic(PathBuf::from(d))),
        (None, Some(src), Some(tgt)) => {
            let shape = DomainShape::new(
                s.get_or("m", 0usize)?,
                s.get_or("n", 0usize)?,
                s.get_or("height", 0usize)?,
                s.get_or("width", 0usize)?,
            )?;
            Ok(DataSource::Market {
                source: src.into(),
                target: tgt.into(),
                shape,
            })
        }
        _ => Err(Error::validation("give either --data DIR or both --source-dir and --target-dir").into()),
    }
}

fn seed_of(s: &Settings) -> Result<u64> {
    Ok(s.get_or("seed", 0u64)?)
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::SynthData(c) => ("synth-data", c),
        Command::TrainGan(c) => ("train-gan", c),
        Command::GenerateFakes(c) => ("generate-fakes", c),
        Command::TrainReid(c) => ("train-reid", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::RunRecipe(c) => ("run-recipe", c),
        Command::CostReport(c) => ("cost-report", c),
        Command::Translate(c) => ("translate", c),
        Command::Grid(c) => ("grid", c),
    };
    let s = Settings::load(common.config.as_deref(), &common.overrides)?;
    let prov = |extra| commands::provenance(name, &s, seed_of(&s).unwrap_or(0), extra);

    match cli.command {
        Command::SynthData(_) => {
            let out = path_of(&s, "out")?;
            let spec = commands::synth_spec(&s)?;
            s.finish()?;
            let count = commands::synth_data(&out, &spec, prov(json!(null)))?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::TrainGan(_) => {
            let data = data_source(&s)?;
            let out = path_of(&s, "out")?;
            let dtype = commands::parse_dtype(&s)?;
            let resume = s.get_or("resume", true)?;
            let cfg = commands::train_config(&s)?;
            s.finish()?;
            let summary = commands::train_gan(&data, &out, cfg, dtype, resume, prov(json!(null)))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::GenerateFakes(_) => {
            let checkpoint = path_of(&s, "checkpoint")?;
            let data = data_source(&s)?;
            let out = path_of(&s, "out")?;
            s.finish()?;
            let count = commands::fakes(&checkpoint, &data, &out, prov(json!(null)))?;
            println!("wrote {count} fakes to {}", out.display());
        }
        Command::TrainReid(_) => {
            let data = data_source(&s)?;
            let fakes = s.raw("fakes").map(PathBuf::from);
            let out = path_of(&s, "out")?;
            let input = commands::reid_input(&s)?;
            commands::reid_spec(&s, 1, m2m_core::reid::Scheme::Fake)?;
            s.finish()?;
            let summary = commands::train_reid(fakes.as_deref(), &data, input, &s, &out, prov(json!(null)))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate(_) => {
            let data = data_source(&s)?;
            let out = path_of(&s, "out")?;
            let k = s.get_or("k", 10usize)?;
            let features = match (s.raw("model"), s.get::<usize>("random_dim")?) {
                (Some(m), None) => Features::Model(m.into()),
                (None, Some(dim)) => Features::Random {
                    dim,
                    seed: seed_of(&s)?,
                },
                _ => return Err(Error::validation("give exactly one of --model FILE or --random-dim D").into()),
            };
            s.finish()?;
            let report = commands::evaluate_cmd(&features, &data, k, &out, prov(json!(null)))?;
            println!(
                "rank-1 {:.4}  mAP {:.4}  ({} queries)",
                report.rank1(),
                report.map,
                report.n_query
            );
        }
        Command::RunRecipe(_) => {
            let out = path_of(&s, "out")?;
            let recipe = recipe::Recipe::new(&out, s.without("out"));
            let rows = recipe.run(|line| eprintln!("{line}"))?;
            println!("{:<16} {:>7} {:>7} {:>7}", "features", "rank-1", "rank-5", "mAP");
            for r in rows {
                println!("{:<16} {:>7.4} {:>7.4} {:>7.4}", r.features, r.rank1, r.rank5, r.map);
            }
        }
        Command::CostReport(_) => {
            let m = s.get_or("m", 6usize)?;
            let n = s.get_or("n", 15usize)?;
            let preset = s.raw("preset").map(Preset::parse).transpose()?.unwrap_or(Preset::Paper);
            let format = s.raw("format").unwrap_or("text").to_string();
            let out = s.raw("out").map(PathBuf::from);
            s.finish()?;
            let report = cost_report(m, n, preset)?;
            let text = match format.as_str() {
                "json" => serde_json::to_string_pretty(&report)? + "\n",
                "csv" => report.to_csv(),
                "text" => report.summary(),
                f => return Err(Error::validation(format!("format must be text, json or csv, got {f:?}")).into()),
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Translate(_) => {
            let checkpoint = path_of(&s, "checkpoint")?;
            let image = path_of(&s, "image")?;
            let src = SubDomainLabel::source(
                s.get::<usize>("src")?
                    .ok_or_else(|| Error::validation("missing --src"))?,
            );
            let tgt = SubDomainLabel::target(
                s.get::<usize>("tgt")?
                    .ok_or_else(|| Error::validation("missing --tgt"))?,
            );
            let out = path_of(&s, "out")?;
            s.finish()?;
            let (img, pair) = commands::translate(&checkpoint, &image, src, tgt, &out)?;
            println!("wrote {} and {}", img.display(), pair.display());
        }
        Command::Grid(_) => {
            let data = data_source(&s)?;
            let domain = commands::parse_domain(s.raw("domain").unwrap_or("source"))?;
            let rows = s.get_or("rows", 3usize)?;
            let seed = seed_of(&s)?;
            let out = path_of(&s, "out")?;
            s.finish()?;
            let (w, h) = commands::grid(&data, domain, rows, seed, &out)?;
            println!("wrote {}x{} grid to {}", w, h, out.display());
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::file(path, e.to_string()).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("M2M_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: M2M_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
