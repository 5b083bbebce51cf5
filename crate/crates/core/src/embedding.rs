//! Sub-domain labels and the one-hot channel embedding that conditions the
//! generators.
//!
//! Layout of an embedded input with `M` source and `N` target cameras:
//! channels `0..3` hold RGB, channels `3..3+M` the source-camera block and
//! channels `3+M..3+M+N` the target-camera block. Exactly one plane of each
//! block is all-ones. The source block always carries the source-camera
//! slot, whichever direction the translation runs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

/// Camera sub-domain; `index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubDomainLabel {
    pub domain: Domain,
    pub index: usize,
}

impl SubDomainLabel {
    pub fn source(index: usize) -> Self {
        SubDomainLabel {
            domain: Domain::Source,
            index,
        }
    }

    pub fn target(index: usize) -> Self {
        SubDomainLabel {
            domain: Domain::Target,
            index,
        }
    }

    /// 0-based position within its domain's block.
    pub fn slot(self) -> usize {
        self.index - 1
    }

    pub fn validate(self, shape: &DomainShape) -> Result<()> {
        let limit = shape.cameras(self.domain);
        if self.index == 0 || self.index > limit {
            return Err(Error::validation(format!(
                "{} camera {} out of range 1..={}",
                self.domain.name(),
                self.index,
                limit
            )));
        }
        Ok(())
    }
}

/// Camera counts and image size shared by every model of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainShape {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl DomainShape {
    pub fn new(m: usize, n: usize, h: usize, w: usize) -> Result<Self> {
        let s = DomainShape { m, n, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::validation(format!(
                "need at least one camera per domain, got M={} N={}",
                self.m, self.n
            )));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::validation(format!("image size {}x{} below 8x8", self.h, self.w)));
        }
        Ok(())
    }

    pub fn cameras(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.m,
            Domain::Target => self.n,
        }
    }

    /// Channels of an embedded input, `M + N + 3`.
    pub fn embedded_channels(&self) -> usize {
        self.m + self.n + 3
    }
}

/// Image with its one-hot condition planes attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInput<T> {
    pub data: Tensor<T>,
    pub shape: DomainShape,
    pub src: SubDomainLabel,
    pub tgt: SubDomainLabel,
}

/// Orders a translation direction into (source-camera slot, target-camera slot).
pub fn condition_slots(src: SubDomainLabel, tgt: SubDomainLabel, shape: &DomainShape) -> Result<(usize, usize)> {
    src.validate(shape)?;
    tgt.validate(shape)?;
    match (src.domain, tgt.domain) {
        (Domain::Source, Domain::Target) => Ok((src.slot(), tgt.slot())),
        (Domain::Target, Domain::Source) => Ok((tgt.slot(), src.slot())),
        _ => Err(Error::validation(format!(
            "translation must cross domains, got {} -> {}",
            src.domain.name(),
            tgt.domain.name()
        ))),
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>, shape: &DomainShape) -> Result<()> {
    if image.shape() != [3, shape.h, shape.w] {
        return Err(Error::shape(format!(
            "expected image (3, {}, {}), got {:?}",
            shape.h,
            shape.w,
            image.shape()
        )));
    }
    let (lo, hi) = (T::lit(-1.0), T::one());
    if let Some(v) = image.data().iter().find(|&&v| !(v >= lo && v <= hi)) {
        return Err(Error::validation(format!("image value {v} outside [-1, 1]")));
    }
    Ok(())
}

pub fn embed_labels<T: Scalar>(
    image: &Tensor<T>,
    src: SubDomainLabel,
    tgt: SubDomainLabel,
    shape: &DomainShape,
) -> Result<EmbeddedInput<T>> {
    shape.validate()?;
    let (s_slot, t_slot) = condition_slots(src, tgt, shape)?;
    check_image(image, shape)?;
    let plane = shape.h * shape.w;
    let mut data = Vec::with_capacity(shape.embedded_channels() * plane);
    data.extend_from_slice(image.data());
    for ch in 0..shape.m {
        let v = if ch == s_slot { T::one() } else { T::zero() };
        data.extend(std::iter::repeat_n(v, plane));
    }
    for ch in 0..shape.n {
        let v = if ch == t_slot { T::one() } else { T::zero() };
        data.extend(std::iter::repeat_n(v, plane));
    }
    Ok(EmbeddedInput {
        data: Tensor::from_vec(&[shape.embedded_channels(), shape.h, shape.w], data)?,
        shape: *shape,
        src,
        tgt,
    })
}

pub fn strip_labels<T: Scalar>(x: &EmbeddedInput<T>) -> Result<Tensor<T>> {
    let s = &x.shape;
    if x.data.shape() != [s.embedded_channels(), s.h, s.w] {
        return Err(Error::shape(format!(
            "embedded input {:?} does not match M={} N={}",
            x.data.shape(),
            s.m,
            s.n
        )));
    }
    let n = 3 * s.h * s.w;
    Tensor::from_vec(&[3, s.h, s.w], x.data.data()[..n].to_vec())
}

/// Constant `(batch, M + N, h, w)` condition planes for a batch of slot pairs.
pub fn condition_planes<T: Scalar>(slots: &[(usize, usize)], shape: &DomainShape) -> Tensor<T> {
    let plane = shape.h * shape.w;
    let c = shape.m + shape.n;
    let mut data = vec![T::zero(); slots.len() * c * plane];
    for (b, &(s, t)) in slots.iter().enumerate() {
        for ch in [s, shape.m + t] {
            let start = (b * c + ch) * plane;
            data[start..start + plane].fill(T::one());
        }
    }
    Tensor::from_vec(&[slots.len(), c, shape.h, shape.w], data).expect("shape")
}

/// Batched embedding on a tape: `images (batch, 3, h, w)` concatenated with
/// the condition planes; gradients flow back to `images`.
pub fn embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    slots: &[(usize, usize)],
    shape: &DomainShape,
) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s != [slots.len(), 3, shape.h, shape.w] {
        return Err(Error::shape(format!(
            "embed: images {s:?} for {} slot pairs at {}x{}",
            slots.len(),
            shape.h,
            shape.w
        )));
    }
    for &(si, ti) in slots {
        if si >= shape.m || ti >= shape.n {
            return Err(Error::validation(format!(
                "condition slot ({si}, {ti}) out of range for M={} N={}",
                shape.m, shape.n
            )));
        }
    }
    let planes = tape.constant(condition_planes(slots, shape));
    tape.concat_channels(&[images, planes])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor<f64> {
        let data = (0..3 * h * w).map(|i| ((i as f64) * 0.37).sin()).collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    fn plane_is(x: &Tensor<f64>, ch: usize, v: f64) -> bool {
        let s = x.shape();
        let plane = s[1] * s[2];
        x.data()[ch * plane..(ch + 1) * plane].iter().all(|&p| p == v)
    }

    #[test]
    fn six_by_eight_layout() {
        let shape = DomainShape::new(6, 8, 32, 32).unwrap();
        let x = embed_labels(
            &image(32, 32),
            SubDomainLabel::source(2),
            SubDomainLabel::target(3),
            &shape,
        )
        .unwrap();
        assert_eq!(x.data.shape(), &[17, 32, 32]);
        assert!(plane_is(&x.data, 4, 1.0));
        for ch in [3, 5, 6, 7, 8] {
            assert!(plane_is(&x.data, ch, 0.0));
        }
        assert!(plane_is(&x.data, 11, 1.0));
        for ch in [9, 10, 12, 13, 14, 15, 16] {
            assert!(plane_is(&x.data, ch, 0.0));
        }
        assert_eq!(strip_labels(&x).unwrap(), image(32, 32));
    }

    #[test]
    fn single_camera_case() {
        let shape = DomainShape::new(1, 1, 8, 8).unwrap();
        let x = embed_labels(
            &image(8, 8),
            SubDomainLabel::source(1),
            SubDomainLabel::target(1),
            &shape,
        )
        .unwrap();
        assert_eq!(x.data.shape(), &[5, 8, 8]);
        assert!(plane_is(&x.data, 3, 1.0));
        assert!(plane_is(&x.data, 4, 1.0));
    }

    #[test]
    fn reverse_direction_keeps_block_roles() {
        let shape = DomainShape::new(3, 2, 8, 8).unwrap();
        let img = image(8, 8);
        let fwd = embed_labels(&img, SubDomainLabel::source(3), SubDomainLabel::target(1), &shape).unwrap();
        let rev = embed_labels(&img, SubDomainLabel::target(1), SubDomainLabel::source(3), &shape).unwrap();
        assert_eq!(fwd.data, rev.data);
        assert_eq!(rev.src, SubDomainLabel::target(1));
    }

    #[test]
    fn out_of_range_and_bad_shape_rejected() {
        let shape = DomainShape::new(2, 2, 8, 8).unwrap();
        let err = embed_labels(
            &image(8, 8),
            SubDomainLabel::source(3),
            SubDomainLabel::target(1),
            &shape,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
        let err = embed_labels(
            &image(8, 9),
            SubDomainLabel::source(1),
            SubDomainLabel::target(1),
            &shape,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = embed_labels(
            &image(8, 8),
            SubDomainLabel::source(1),
            SubDomainLabel::source(2),
            &shape,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn zero_rgb_strips_to_zero() {
        let shape = DomainShape::new(2, 3, 8, 8).unwrap();
        let x = embed_labels(
            &Tensor::zeros(&[3, 8, 8]),
            SubDomainLabel::source(1),
            SubDomainLabel::target(2),
            &shape,
        )
        .unwrap();
        assert_eq!(strip_labels(&x).unwrap(), Tensor::<f64>::zeros(&[3, 8, 8]));
    }

    #[test]
    fn tape_embedding_matches_tensor_embedding() {
        let shape = DomainShape::new(2, 3, 8, 8).unwrap();
        let img = image(8, 8);
        let want = embed_labels(&img, SubDomainLabel::source(2), SubDomainLabel::target(3), &shape).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(img.clone().reshape(&[1, 3, 8, 8]).unwrap());
        let e = embed_on_tape(&mut tape, x, &[(1, 2)], &shape).unwrap();
        assert_eq!(tape.value(e).data(), want.data.data());
    }
}
