//! Conditional generator, PatchGAN discriminator with a shared sub-domain
//! classifier head, and a small CNN classifier.
//!
//! Every architecture is described by a flat list of [`LayerSpec`]s so the
//! parameter count of a configuration is available without building it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::DomainShape;
use crate::error::{Error, Result};
use crate::kernels::Geometry;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::validation(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        k: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    Linear,
}

/// One parameterized layer: weight plus bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { k, stride, pad },
            c_in,
            c_out,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { k, .. } => vec![self.c_out, self.c_in, k, k],
            LayerKind::ConvTranspose { k, .. } => vec![self.c_in, self.c_out, k, k],
            LayerKind::Linear => vec![self.c_out, self.c_in],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { k, .. } | LayerKind::ConvTranspose { k, .. } => k * k * self.c_in,
            LayerKind::Linear => self.c_in,
        }
    }

    /// `k·k·c_in·c_out + c_out` for convolutions, `c_in·c_out + c_out` for linear maps.
    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.c_out
    }
}

fn build_store<T: Scalar>(
    layers: &[LayerSpec],
    seed: u64,
    weight_init: impl Fn(&LayerSpec) -> Init,
) -> Result<(ParamStore<T>, Vec<(ParamId, ParamId)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(layers.len());
    for l in layers {
        let w = store.add(
            format!("{}.weight", l.name),
            weight_init(l).sample(&l.weight_shape(), &mut rng),
        )?;
        let b = store.add(format!("{}.bias", l.name), Init::Zeros.sample(&[l.c_out], &mut rng))?;
        ids.push((w, b));
    }
    Ok((store, ids))
}

/// Architecture of a network, recorded alongside its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
    Classifier(ClassifierSpec),
}

/// Named parameter arrays with the spec and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterizedModel<T> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: ParamStore<T>,
}

pub fn count_parameters<T: Scalar>(model: &ParameterizedModel<T>) -> usize {
    model.params.count()
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
    pub norm: Norm,
    pub preset: Preset,
}

impl GeneratorSpec {
    /// Preset configuration for a domain shape: paper = 64 filters and six
    /// residual blocks, desk = 16 filters and two.
    pub fn for_shape(preset: Preset, shape: &DomainShape) -> Self {
        let (base_width, n_res_blocks) = match preset {
            Preset::Paper => (64, 6),
            Preset::Desk => (16, 2),
        };
        GeneratorSpec {
            in_channels: shape.embedded_channels(),
            base_width,
            n_res_blocks,
            norm: Norm::Instance,
            preset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 5 {
            return Err(Error::validation(format!(
                "generator needs at least 5 input channels, got {}",
                self.in_channels
            )));
        }
        if self.n_res_blocks < 1 || self.base_width < 1 {
            return Err(Error::validation("generator needs width >= 1 and >= 1 residual block"));
        }
        if self.preset == Preset::Paper && self.n_res_blocks != 6 {
            return Err(Error::validation("paper preset uses six residual blocks"));
        }
        Ok(())
    }

    pub fn check_shape(&self, shape: &DomainShape) -> Result<()> {
        if self.in_channels != shape.embedded_channels() {
            return Err(Error::validation(format!(
                "generator takes {} channels but M={} N={} needs {}",
                self.in_channels,
                shape.m,
                shape.n,
                shape.embedded_channels()
            )));
        }
        if shape.h % 4 != 0 || shape.w % 4 != 0 {
            return Err(Error::validation(format!(
                "generator needs image sides divisible by 4, got {}x{}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let b = self.base_width;
        let mut l = vec![
            LayerSpec::conv("in", self.in_channels, b, 7, 1, 3),
            LayerSpec::conv("down1", b, 2 * b, 3, 2, 1),
            LayerSpec::conv("down2", 2 * b, 4 * b, 3, 2, 1),
        ];
        for i in 0..self.n_res_blocks {
            l.push(LayerSpec::conv(format!("res{i}.conv1"), 4 * b, 4 * b, 3, 1, 1));
            l.push(LayerSpec::conv(format!("res{i}.conv2"), 4 * b, 4 * b, 3, 1, 1));
        }
        for (name, c_in, c_out) in [("up1", 4 * b, 2 * b), ("up2", 2 * b, b)] {
            l.push(LayerSpec {
                name: name.into(),
                kind: LayerKind::ConvTranspose {
                    k: 3,
                    stride: 2,
                    pad: 1,
                    out_pad: 1,
                },
                c_in,
                c_out,
            });
        }
        l.push(LayerSpec::conv("out", b, 3, 7, 1, 3));
        l
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }
}

/// Image-to-image generator conditioned on the embedded camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub model: ParameterizedModel<T>,
    layers: Vec<LayerSpec>,
    ids: Vec<(ParamId, ParamId)>,
}

pub fn build_generator<T: Scalar>(spec: GeneratorSpec, seed: u64) -> Result<Generator<T>> {
    spec.validate()?;
    let layers = spec.layers();
    let (params, ids) = build_store(&layers, seed, |_| Init::Normal(0.02))?;
    Ok(Generator {
        spec,
        model: ParameterizedModel {
            spec: ModelSpec::Generator(spec),
            seed,
            params,
        },
        layers,
        ids,
    })
}

fn apply_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    l: &LayerSpec,
    ids: (ParamId, ParamId),
    x: Var,
) -> Result<Var> {
    let (w, b) = (bound.var(ids.0), Some(bound.var(ids.1)));
    match l.kind {
        LayerKind::Conv { stride, pad, .. } => tape.conv2d(x, w, b, stride, pad),
        LayerKind::ConvTranspose {
            stride, pad, out_pad, ..
        } => tape.conv_transpose2d(x, w, b, stride, pad, out_pad),
        LayerKind::Linear => tape.linear(x, w, b),
    }
}

impl<T: Scalar> Generator<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.model.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.params
    }

    /// `x (batch, in_channels, h, w) -> (batch, 3, h, w)` in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} input channels, got {s:?}",
                self.spec.in_channels
            )));
        }
        let mut it = self.layers.iter().zip(self.ids.iter().copied());
        let mut next = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            let (l, ids) = it.next().expect("layer list");
            apply_layer(tape, bound, l, ids, x)
        };
        let mut h = x;
        for _ in 0..3 {
            h = next(tape, h)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h);
        }
        for _ in 0..self.spec.n_res_blocks {
            let mut r = next(tape, h)?;
            r = tape.instance_norm(r, NORM_EPS)?;
            r = tape.relu(r);
            r = next(tape, r)?;
            r = tape.instance_norm(r, NORM_EPS)?;
            h = tape.add(h, r)?;
        }
        for _ in 0..2 {
            h = next(tape, h)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h);
        }
        h = next(tape, h)?;
        let out = tape.tanh(h);
        if tape.shape(out)[2..] != s[2..] {
            return Err(Error::shape(format!(
                "generator output {:?} does not match input {s:?}; sides must be divisible by 4",
                tape.shape(out)
            )));
        }
        Ok(out)
    }

    /// Forward pass without gradient tracking.
    pub fn translate(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

// ---------------------------------------------------------------------------
// Discriminator

/// PatchGAN trunk shared by a realness head and a sub-domain classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub n_classes: usize,
    pub patch_output: bool,
    pub base_width: usize,
    /// Stride-2 4x4 convolutions; widths double after the first.
    pub n_down: usize,
    /// Additional stride-1 4x4 convolutions, doubling width.
    pub n_extra: usize,
    pub head_kernel: usize,
    pub slope_milli: u32,
    pub preset: Preset,
}

impl DiscriminatorSpec {
    /// paper: six stride-2 layers from 64 to 2048 filters with a 3x3
    /// realness head; desk: the 70x70-receptive-field layout (three stride-2,
    /// one stride-1, 4x4 head) from 16 filters.
    pub fn for_preset(preset: Preset, n_classes: usize) -> Self {
        match preset {
            Preset::Paper => DiscriminatorSpec {
                n_classes,
                patch_output: true,
                base_width: 64,
                n_down: 6,
                n_extra: 0,
                head_kernel: 3,
                slope_milli: 10,
                preset,
            },
            Preset::Desk => DiscriminatorSpec {
                n_classes,
                patch_output: true,
                base_width: 16,
                n_down: 3,
                n_extra: 1,
                head_kernel: 4,
                slope_milli: 200,
                preset,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 {
            return Err(Error::validation("discriminator needs at least one class"));
        }
        if !self.patch_output {
            return Err(Error::validation("discriminator always emits a patch map"));
        }
        if self.n_down + self.n_extra < 1 || self.base_width < 1 || self.head_kernel < 1 {
            return Err(Error::validation("discriminator needs at least one trunk layer"));
        }
        Ok(())
    }

    pub fn slope(&self) -> f64 {
        self.slope_milli as f64 / 1000.0
    }

    pub fn trunk_width(&self) -> usize {
        self.base_width << (self.n_down + self.n_extra - 1)
    }

    pub fn trunk_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for i in 0..self.n_down + self.n_extra {
            let c_out = self.base_width << i;
            let stride = if i < self.n_down { 2 } else { 1 };
            layers.push(LayerSpec::conv(format!("trunk{i}"), c_in, c_out, 4, stride, 1));
            c_in = c_out;
        }
        layers
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = self.trunk_layers();
        layers.push(self.realness_head());
        layers.push(self.classifier_head());
        layers
    }

    pub fn realness_head(&self) -> LayerSpec {
        LayerSpec::conv("realness", self.trunk_width(), 1, self.head_kernel, 1, 1)
    }

    pub fn classifier_head(&self) -> LayerSpec {
        LayerSpec {
            name: "classifier".into(),
            kind: LayerKind::Linear,
            c_in: self.trunk_width(),
            c_out: self.n_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }

    /// Side length of the input window seen by one realness-map entry.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        let mut convs: Vec<(usize, usize)> = self
            .trunk_layers()
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { k, stride, .. } => (k, stride),
                _ => unreachable!(),
            })
            .collect();
        convs.push((self.head_kernel, 1));
        for (k, s) in convs {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Spatial extent of the realness map for an `h x w` input.
    pub fn patch_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut dims = (h, w);
        for l in self.trunk_layers().iter().chain(std::iter::once(&self.realness_head())) {
            if let LayerKind::Conv { k, stride, pad } = l.kind {
                dims = (
                    Geometry::conv_out(dims.0, k, stride, pad)?,
                    Geometry::conv_out(dims.1, k, stride, pad)?,
                );
            }
        }
        Some(dims)
    }
}

/// Realness patch scores (probabilities) and sub-domain logits for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub realness_map: Tensor<T>,
    pub class_logits: Vec<T>,
}

/// Tape handles of a discriminator forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorVars {
    /// Pre-sigmoid patch map `(batch, 1, h', w')`.
    pub realness_logits: Var,
    /// `(batch, n_classes)`.
    pub class_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub model: ParameterizedModel<T>,
    layers: Vec<LayerSpec>,
    ids: Vec<(ParamId, ParamId)>,
}

pub fn build_discriminator<T: Scalar>(spec: DiscriminatorSpec, seed: u64) -> Result<Discriminator<T>> {
    spec.validate()?;
    let layers = spec.layers();
    let (params, ids) = build_store(&layers, seed, |l| Init::FanInUniform(l.fan_in()))?;
    Ok(Discriminator {
        spec,
        model: ParameterizedModel {
            spec: ModelSpec::Discriminator(spec),
            seed,
            params,
        },
        layers,
        ids,
    })
}

impl<T: Scalar> Discriminator<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.model.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.params
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<DiscriminatorVars> {
        let n_trunk = self.spec.n_down + self.spec.n_extra;
        let slope = self.spec.slope();
        let mut h = x;
        for i in 0..n_trunk {
            h = apply_layer(tape, bound, &self.layers[i], self.ids[i], h)?;
            h = tape.leaky_relu(h, slope);
        }
        let realness_logits = apply_layer(tape, bound, &self.layers[n_trunk], self.ids[n_trunk], h)?;
        let pooled = tape.global_avg_pool(h)?;
        let class_logits = apply_layer(tape, bound, &self.layers[n_trunk + 1], self.ids[n_trunk + 1], pooled)?;
        Ok(DiscriminatorVars {
            realness_logits,
            class_logits,
        })
    }

    /// Per-image outputs for a batch `(batch, 3, h, w)`, without gradients.
    pub fn evaluate(&self, images: &Tensor<T>) -> Result<Vec<DiscriminatorOutput<T>>> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        let probs = tape.sigmoid(out.realness_logits);
        let maps = tape.value(probs);
        let logits = tape.value(out.class_logits);
        let batch = images.shape()[0];
        let k = self.spec.n_classes;
        Ok((0..batch)
            .map(|b| DiscriminatorOutput {
                realness_map: maps.index0(b),
                class_logits: logits.data()[b * k..(b + 1) * k].to_vec(),
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Small CNN classifier (re-identification backbone and camera probe)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub base_width: usize,
    pub n_blocks: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
}

impl ClassifierSpec {
    /// Four 3x3 conv blocks, global pooling, an embedding layer and a linear
    /// classifier.
    pub fn desk(embedding_dim: usize, n_classes: usize) -> Self {
        ClassifierSpec {
            base_width: 16,
            n_blocks: 4,
            embedding_dim,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::validation(format!(
                "embedding_dim must be >= 8, got {}",
                self.embedding_dim
            )));
        }
        if self.n_classes < 1 || self.n_blocks < 1 || self.base_width < 1 {
            return Err(Error::validation("classifier needs >= 1 class, block and filter"));
        }
        Ok(())
    }

    fn width(&self, i: usize) -> usize {
        self.base_width << i.min(2)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for i in 0..self.n_blocks {
            let c_out = self.width(i);
            let stride = if i + 1 < self.n_blocks { 2 } else { 1 };
            layers.push(LayerSpec::conv(format!("block{i}"), c_in, c_out, 3, stride, 1));
            c_in = c_out;
        }
        layers.push(LayerSpec {
            name: "embedding".into(),
            kind: LayerKind::Linear,
            c_in,
            c_out: self.embedding_dim,
        });
        layers.push(LayerSpec {
            name: "classifier".into(),
            kind: LayerKind::Linear,
            c_in: self.embedding_dim,
            c_out: self.n_classes,
        });
        layers
    }
}

/// Tape handles of a classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub spec: ClassifierSpec,
    pub model: ParameterizedModel<T>,
    layers: Vec<LayerSpec>,
    ids: Vec<(ParamId, ParamId)>,
}

pub fn build_classifier<T: Scalar>(spec: ClassifierSpec, seed: u64) -> Result<Classifier<T>> {
    spec.validate()?;
    let layers = spec.layers();
    let (params, ids) = build_store(&layers, seed, |l| Init::FanInUniform(l.fan_in()))?;
    Ok(Classifier {
        spec,
        model: ParameterizedModel {
            spec: ModelSpec::Classifier(spec),
            seed,
            params,
        },
        layers,
        ids,
    })
}

impl<T: Scalar> Classifier<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.model.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.params
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<ClassifierVars> {
        let mut h = x;
        for i in 0..self.spec.n_blocks {
            h = apply_layer(tape, bound, &self.layers[i], self.ids[i], h)?;
            h = tape.leaky_relu(h, 0.1);
        }
        let pooled = tape.global_avg_pool(h)?;
        let nb = self.spec.n_blocks;
        let embedding = apply_layer(tape, bound, &self.layers[nb], self.ids[nb], pooled)?;
        let act = tape.leaky_relu(embedding, 0.1);
        let logits = apply_layer(tape, bound, &self.layers[nb + 1], self.ids[nb + 1], act)?;
        Ok(ClassifierVars { embedding, logits })
    }

    /// Embeddings and logits for a batch, without gradients.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok((tape.value(out.embedding).clone(), tape.value(out.logits).clone()))
    }
}

/// Rebuilds a model skeleton from its spec and copies parameters by name.
pub fn load_params_into<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::validation(format!(
            "parameter count mismatch: model has {} arrays, checkpoint {}",
            dst.len(),
            src.len()
        )));
    }
    for (name, t) in src.iter() {
        dst.assign(name, t.clone())?;
    }
    Ok(())
}
