use m2m_core::embedding::{embed_labels, strip_labels, DomainShape, SubDomainLabel};
use m2m_core::Tensor;
use proptest::prelude::*;

fn case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64, bool)> {
    (1usize..=16, 1usize..=16, 8usize..=12, 8usize..=12).prop_flat_map(|(m, n, h, w)| {
        (
            Just(m),
            Just(n),
            Just(h),
            Just(w),
            1..=m,
            1..=n,
            any::<u64>(),
            any::<bool>(),
        )
    })
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed | 1;
    let data = (0..3 * h * w)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn one_hot_layout_shape_and_roundtrip((m, n, h, w, i, j, seed, reverse) in case()) {
        let shape = DomainShape::new(m, n, h, w).unwrap();
        let img = image(h, w, seed);
        let (src, tgt) = if reverse {
            (SubDomainLabel::target(j), SubDomainLabel::source(i))
        } else {
            (SubDomainLabel::source(i), SubDomainLabel::target(j))
        };
        let e = embed_labels(&img, src, tgt, &shape).unwrap();
        prop_assert_eq!(e.data.shape(), &[m + n + 3, h, w][..]);
        let plane = h * w;
        let d = e.data.data();
        prop_assert_eq!(&d[..3 * plane], img.data());
        let mut ones = 0;
        let mut zeros = 0;
        for c in 3..m + n + 3 {
            let p = &d[c * plane..(c + 1) * plane];
            let hot = c == 3 + i - 1 || c == 3 + m + j - 1;
            if p.iter().all(|&v| v == 1.0) {
                prop_assert!(hot, "channel {} unexpectedly hot", c);
                ones += 1;
            } else if p.iter().all(|&v| v == 0.0) {
                prop_assert!(!hot, "channel {} unexpectedly cold", c);
                zeros += 1;
            } else {
                prop_assert!(false, "channel {} is not constant", c);
            }
        }
        prop_assert_eq!(ones, 2);
        prop_assert_eq!(zeros, m + n - 2);
        let src_mass: f64 = d[3 * plane..(3 + m) * plane].iter().sum();
        let tgt_mass: f64 = d[(3 + m) * plane..].iter().sum();
        prop_assert_eq!(src_mass, plane as f64);
        prop_assert_eq!(tgt_mass, plane as f64);
        prop_assert_eq!(strip_labels(&e).unwrap(), img);
    }

    #[test]
    fn embedding_is_injective_in_labels((m, n, h, w, i, j, seed, _r) in case(), di in 0usize..16, dj in 0usize..16) {
        let shape = DomainShape::new(m, n, h, w).unwrap();
        let img = image(h, w, seed);
        let (i2, j2) = ((i - 1 + di) % m + 1, (j - 1 + dj) % n + 1);
        let a = embed_labels(&img, SubDomainLabel::source(i), SubDomainLabel::target(j), &shape).unwrap();
        let b = embed_labels(&img, SubDomainLabel::source(i2), SubDomainLabel::target(j2), &shape).unwrap();
        prop_assert_eq!(a.data == b.data, (i, j) == (i2, j2));
    }
}
