use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use tph_core::nnblocks::encoder::{attention_weights, encode_feature_map};
use tph_core::nnblocks::head::decode_dense;
use tph_core::nnblocks::{
    cbam_forward, default_heads, transformer_encoder_forward, CbamParams, EncoderParams,
};

fn tokens(width: usize) -> impl Strategy<Value = Array2<f64>> {
    (1usize..12).prop_flat_map(move |n| {
        prop::collection::vec(-50.0..50.0f64, n * width)
            .prop_map(move |v| Array2::from_shape_vec((n, width), v).unwrap())
    })
}

fn feature_map() -> impl Strategy<Value = Array3<f64>> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        prop::collection::vec(-100.0..100.0f64, 8 * h * w)
            .prop_map(move |v| Array3::from_shape_vec((8, h, w), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(x in tokens(8), seed in 0u64..1000) {
        let p = EncoderParams::random(8, 2, 2, seed).unwrap();
        for a in attention_weights(x.view(), &p).unwrap() {
            for row in a.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn encoder_is_shape_preserving_and_equivariant(x in tokens(8), seed in 0u64..1000, shift in 1usize..11) {
        let p = EncoderParams::random(8, 4, 2, seed).unwrap();
        let out = transformer_encoder_forward(x.view(), &p, None).unwrap();
        prop_assert_eq!(out.dim(), x.dim());
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pout = transformer_encoder_forward(x.select(Axis(0), &perm).view(), &p, None).unwrap();
        prop_assert_eq!(pout, out.select(Axis(0), &perm));
    }

    #[test]
    fn feature_map_encoding_keeps_shape(f in feature_map(), seed in 0u64..1000) {
        let p = EncoderParams::random(8, 2, 2, seed).unwrap();
        prop_assert_eq!(encode_feature_map(f.view(), &p).unwrap().dim(), f.dim());
    }

    #[test]
    fn cbam_shrinks_every_element(f in feature_map(), seed in 0u64..1000, kernel in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let p = CbamParams::random(8, 4, kernel, seed).unwrap();
        let out = cbam_forward(f.view(), &p).unwrap();
        prop_assert_eq!(out.dim(), f.dim());
        for (o, i) in out.iter().zip(f.iter()) {
            prop_assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn decoded_centers_stay_near_their_cell(
        head in 0usize..4,
        logits in prop::collection::vec(-60.0..60.0f64, 3 * 2 * 3 * 7),
    ) {
        let spec = &default_heads(2)[head];
        let raw = Array4::from_shape_vec((3, 2, 3, 7), logits).unwrap();
        let dense = decode_dense(raw.view(), spec).unwrap();
        let s = spec.stride as f64;
        for ((_, y, x, ch), v) in dense.indexed_iter() {
            let cell = match ch {
                0 => x as f64,
                1 => y as f64,
                2 | 3 => {
                    prop_assert!(*v >= 0.0);
                    continue;
                }
                _ => {
                    prop_assert!((0.0..=1.0).contains(v));
                    continue;
                }
            };
            prop_assert!(*v >= (cell - 0.5) * s && *v <= (cell + 1.5) * s);
        }
    }
}
