//! `run-recipe`: synth -> train-gan -> generate-fakes -> train-reid ->
//! evaluate, with stage-completion markers.
//!
//! Settings: `seed`, `m`, `n`, `dtype`, `k`, plus sections `synth.*`,
//! `gan.*` and `reid.*` forwarded to the stage commands. Stage seeds are
//! `derive_seed(seed, "recipe-<stage>", counter)` unless the section sets
//! its own `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use m2m_core::reid::EvalReport;
use m2m_core::seeds::derive_seed;
use m2m_core::trainer::content_hash;
use m2m_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::commands::{self, DataSource, Features, ReidInput};
use crate::settings::Settings;

pub struct Recipe {
    pub out: PathBuf,
    pub settings: Settings,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecipeRow {
    pub features: String,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
}

impl Recipe {
    pub fn new(out: &Path, settings: Settings) -> Self {
        let hash = content_hash(settings.to_text().as_bytes());
        Recipe {
            out: out.to_path_buf(),
            settings,
            hash,
        }
    }

    fn marker(&self, stage: &str) -> PathBuf {
        self.out.join("stages").join(format!("{stage}.done"))
    }

    /// True if `stage` finished under this recipe; an existing marker from a
    /// different recipe is an error.
    fn done(&self, stage: &str) -> Result<bool> {
        let path = self.marker(stage);
        if !path.exists() {
            return Ok(false);
        }
        let recorded = fs::read_to_string(&path).map_err(|e| Error::file(&path, e.to_string()))?;
        if recorded.trim() != self.hash {
            return Err(Error::validation(format!(
                "{} belongs to recipe {}, not {}; use a fresh output directory",
                path.display(),
                recorded.trim(),
                self.hash
            ))
            .into());
        }
        Ok(true)
    }

    fn complete(&self, stage: &str) -> Result<()> {
        let path = self.marker(stage);
        fs::create_dir_all(path.parent().expect("marker dir")).map_err(|e| Error::file(&self.out, e.to_string()))?;
        fs::write(&path, format!("{}\n", self.hash)).map_err(|e| Error::file(&path, e.to_string()))?;
        Ok(())
    }

    fn provenance(&self, stage: &str, section: &Settings, seed: u64) -> Value {
        json!({
            "recipe_hash": self.hash,
            "stage": stage,
            "root_seed": self.root_seed(),
            "stage_seed": seed,
            "settings": section.to_json(),
        })
    }

    fn root_seed(&self) -> u64 {
        self.settings.get_or("seed", 0u64).unwrap_or(0)
    }

    fn section(&self, name: &str, counter: u64) -> Result<(Settings, u64)> {
        let pairs = self.settings.section(name);
        let explicit = pairs.iter().find(|(k, _)| k == "seed").map(|(_, v)| v.clone());
        let seed = match explicit {
            Some(v) => v
                .parse()
                .map_err(|_| Error::validation(format!("{name}.seed: cannot parse {v:?}")))?,
            None => derive_seed(self.root_seed(), &format!("recipe-{name}"), counter),
        };
        let mut all: Vec<(String, String)> = pairs.into_iter().filter(|(k, _)| k != "seed").collect();
        all.push(("seed".into(), seed.to_string()));
        Ok((
            Settings::from_pairs(all.iter().map(|(k, v)| (k.as_str(), v.clone()))),
            seed,
        ))
    }

    pub fn run(&self, mut log: impl FnMut(&str)) -> Result<Vec<RecipeRow>> {
        let s = &self.settings;
        let m = s.get_or("m", 2usize)?;
        let n = s.get_or("n", 2usize)?;
        let k = s.get_or("k", 10usize)?;
        let dtype = commands::parse_dtype(s)?;
        let (synth, synth_seed) = self.section("synth", 0)?;
        let (gan, gan_seed) = self.section("gan", 0)?;
        let (reid, reid_seed) = self.section("reid", 0)?;
        s.finish()?;
        fs::create_dir_all(&self.out).map_err(|e| Error::file(&self.out, e.to_string()))?;
        fs::write(self.out.join("recipe.txt"), s.to_text()).map_err(|e| Error::file(&self.out, e.to_string()))?;

        let data_dir = self.out.join("data");
        let data = DataSource::Synthetic(data_dir.clone());
        if self.done("synth")? {
            log("synth: already complete");
        } else {
            let extra = self.settings.section("synth");
            let mut pairs = vec![
                ("m", m.to_string()),
                ("n", n.to_string()),
                ("seed", synth_seed.to_string()),
            ];
            pairs.extend(
                extra
                    .iter()
                    .filter(|(k, _)| k != "seed")
                    .map(|(k, v)| (k.as_str(), v.clone())),
            );
            let st = Settings::from_pairs(pairs);
            let spec = commands::synth_spec(&st)?;
            st.finish()?;
            let count = commands::synth_data(&data_dir, &spec, self.provenance("synth", &synth, synth_seed))?;
            self.complete("synth")?;
            log(&format!("synth: {count} images in {}", data_dir.display()));
        }

        let gan_dir = self.out.join("gan");
        let cfg = commands::train_config(&gan)?;
        gan.finish()?;
        let checkpoint = gan_dir.join("checkpoints").join("latest.m2m");
        if self.done("train-gan")? {
            log("train-gan: already complete");
        } else {
            let summary = commands::train_gan(
                &data,
                &gan_dir,
                cfg,
                dtype,
                true,
                self.provenance("train-gan", &gan, gan_seed),
            )?;
            self.complete("train-gan")?;
            log(&format!(
                "train-gan: {} iterations{}",
                summary.iteration,
                summary
                    .resumed_from
                    .map(|i| format!(" (resumed at {i})"))
                    .unwrap_or_default()
            ));
        }

        let fakes_dir = self.out.join("fakes");
        if self.done("generate-fakes")? {
            log("generate-fakes: already complete");
        } else {
            let count = commands::fakes(
                &checkpoint,
                &data,
                &fakes_dir,
                self.provenance("generate-fakes", &gan, gan_seed),
            )?;
            self.complete("generate-fakes")?;
            log(&format!("generate-fakes: {count} images in {}", fakes_dir.display()));
        }

        let reid_dir = self.out.join("reid");
        let inputs = [
            ("fake", ReidInput::Fake),
            ("fake_plus_real", ReidInput::FakePlusReal),
            ("direct", ReidInput::Direct),
        ];
        if self.done("train-reid")? {
            log("train-reid: already complete");
        } else {
            for (name, input) in inputs {
                let summary = commands::train_reid(
                    Some(&fakes_dir),
                    &data,
                    input,
                    &reid,
                    &reid_dir.join(format!("{name}.m2mf")),
                    self.provenance("train-reid", &reid, reid_seed),
                )?;
                log(&format!(
                    "train-reid {name}: {} fake + {} real images, train accuracy {:.3}",
                    summary.n_fake, summary.n_real, summary.train_accuracy
                ));
            }
            reid.finish()?;
            self.complete("train-reid")?;
        }

        let eval_dir = self.out.join("eval");
        let mut rows = Vec::new();
        let dim = commands::reid_spec(&reid, 1, m2m_core::reid::Scheme::Fake)?.embedding_dim;
        let features: Vec<(String, Features)> = inputs
            .iter()
            .map(|(name, _)| (name.to_string(), Features::Model(reid_dir.join(format!("{name}.m2mf")))))
            .chain(std::iter::once((
                "random".to_string(),
                Features::Random {
                    dim,
                    seed: derive_seed(self.root_seed(), "recipe-random", 0),
                },
            )))
            .collect();
        let already = self.done("evaluate")?;
        for (name, f) in &features {
            let dir = eval_dir.join(name);
            let report = if already {
                let text = fs::read_to_string(dir.join("eval.json")).map_err(|e| Error::file(&dir, e.to_string()))?;
                serde_json::from_str::<EvalReport>(&text)?
            } else {
                commands::evaluate_cmd(f, &data, k, &dir, self.provenance("evaluate", &reid, reid_seed))?
            };
            rows.push(RecipeRow {
                features: name.clone(),
                rank1: report.rank1(),
                rank5: report.cmc.get(4).or(report.cmc.last()).copied().unwrap_or(0.0),
                map: report.map,
            });
        }
        if !already {
            commands::write_json(
                &self.out.join("summary.json"),
                &json!({ "recipe_hash": self.hash, "root_seed": self.root_seed(), "rows": rows }),
            )?;
            let mut csv = String::from("features,rank1,rank5,map\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.features, r.rank1, r.rank5, r.map));
            }
            fs::write(self.out.join("summary.csv"), csv).map_err(|e| Error::file(&self.out, e.to_string()))?;
            self.complete("evaluate")?;
        }
        Ok(rows)
    }
}
