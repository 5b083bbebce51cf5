//! Parameter cost of one conditional model versus one translation model per
//! camera pair.
//!
//! The per-pair baseline is an unconditional generator (3 input channels)
//! plus a PatchGAN discriminator without a classifier head. The unified count
//! comes from building `G`, `Ḡ`, `D_s` and `D_t` and summing their arrays.

use serde::{Deserialize, Serialize};

use crate::embedding::DomainShape;
use crate::error::{Error, Result};
use crate::networks::{count_parameters, DiscriminatorSpec, GeneratorSpec, Preset};
use crate::trainer::GanModels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnifiedCount {
    pub g: usize,
    pub g_bar: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub total: usize,
    /// Both generators' input convolutions, the only layers sized by `M + N`.
    pub first_layers: usize,
    /// Classifier heads of `D_s` and `D_t`, sized by `M` and `N`.
    pub class_heads: usize,
    /// Everything else; does not depend on `M` or `N`.
    pub invariant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: Preset,
    pub m: usize,
    pub n: usize,
    /// Number of camera-to-camera mappings, `M·N`.
    pub mappings: usize,
    pub per_pair: usize,
    /// `per_pair · M · N`.
    pub separate_total: usize,
    pub unified: UnifiedCount,
    /// unified / separate.
    pub ratio: f64,
}

/// Image side used when building models for counting.
fn build_side(preset: Preset) -> usize {
    match preset {
        Preset::Paper => 256,
        Preset::Desk => 32,
    }
}

/// Generator plus discriminator for one unconditional mapping.
pub fn per_pair_parameters(preset: Preset) -> usize {
    let shape = DomainShape { m: 1, n: 1, h: 0, w: 0 };
    let g = GeneratorSpec {
        in_channels: 3,
        ..GeneratorSpec::for_shape(preset, &shape)
    };
    let d = DiscriminatorSpec::for_preset(preset, 1);
    let d_count: usize = d
        .trunk_layers()
        .iter()
        .chain(std::iter::once(&d.realness_head()))
        .map(|l| l.param_count())
        .sum();
    g.param_count() + d_count
}

pub fn cost_report(m: usize, n: usize, preset: Preset) -> Result<CostReport> {
    if m < 1 || n < 1 {
        return Err(Error::validation(format!(
            "cost report needs M, N >= 1, got M={m} N={n}"
        )));
    }
    let side = build_side(preset);
    let shape = DomainShape::new(m, n, side, side)?;
    let models = GanModels::<f32>::build(shape, preset, 0)?;
    let count =
        |s: &crate::params::ParamStore<f32>, name: &str| -> usize { s.id(name).map(|id| s.get(id).len()).unwrap_or(0) };
    let g = count_parameters(&models.g.model);
    let g_bar = count_parameters(&models.g_bar.model);
    let d_s = count_parameters(&models.d_s.model);
    let d_t = count_parameters(&models.d_t.model);
    let total = g + g_bar + d_s + d_t;
    let first_layers: usize = [models.g.params(), models.g_bar.params()]
        .iter()
        .map(|s| count(s, "in.weight") + count(s, "in.bias"))
        .sum();
    let class_heads: usize = [models.d_s.params(), models.d_t.params()]
        .iter()
        .map(|s| count(s, "classifier.weight") + count(s, "classifier.bias"))
        .sum();
    let per_pair = per_pair_parameters(preset);
    let separate_total = per_pair * m * n;
    Ok(CostReport {
        preset,
        m,
        n,
        mappings: m * n,
        per_pair,
        separate_total,
        unified: UnifiedCount {
            g,
            g_bar,
            d_s,
            d_t,
            total,
            first_layers,
            class_heads,
            invariant: total - first_layers - class_heads,
        },
        ratio: total as f64 / separate_total as f64,
    })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let u = &self.unified;
        format!(
            "preset,m,n,mappings,per_pair,separate_total,unified_total,first_layers,class_heads,invariant,ratio\n\
             {},{},{},{},{},{},{},{},{},{},{}\n",
            self.preset.name(),
            self.m,
            self.n,
            self.mappings,
            self.per_pair,
            self.separate_total,
            u.total,
            u.first_layers,
            u.class_heads,
            u.invariant,
            self.ratio
        )
    }

    pub fn summary(&self) -> String {
        let mega = |v: usize| v as f64 / 1e6;
        format!(
            "{} preset, M={} N={}: {} transferring mappings\n\
             per-pair model: {:.2}M parameters\n\
             separate models: {:.2}M = {:.2}M x {} x {}\n\
             unified model: {:.2}M (G {:.2}M, G_bar {:.2}M, D_s {:.2}M, D_t {:.2}M)\n\
             unified / separate = {:.6} (1/{:.1})\n",
            self.preset.name(),
            self.m,
            self.n,
            self.mappings,
            mega(self.per_pair),
            mega(self.separate_total),
            mega(self.per_pair),
            self.m,
            self.n,
            mega(self.unified.total),
            mega(self.unified.g),
            mega(self.unified.g_bar),
            mega(self.unified.d_s),
            mega(self.unified.d_t),
            self.ratio,
            1.0 / self.ratio
        )
    }
}
