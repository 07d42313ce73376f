//! Property tests for the structural invariants of the kernels and the data
//! path.

use proptest::prelude::*;

use ugnn_core::data;
use ugnn_core::{Real, Tape, Tensor};

proptest! {
    /// Channel softmax yields a distribution for arbitrary finite logits,
    /// including magnitudes up to 1e4.
    #[test]
    fn softmax_sums_to_one(
        c in 1usize..5,
        hw in 1usize..7,
        raw in proptest::collection::vec(-1.0e4f64..1.0e4, 1..150),
    ) {
        let numel = c * hw * hw;
        let data: Vec<Real> = (0..numel).map(|i| raw[i % raw.len()] as Real).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[c, hw, hw], data).unwrap());
        let y = tape.softmax_channels(x).unwrap();
        let out = tape.value(y);
        for p in 0..hw * hw {
            let mut total = 0.0 as Real;
            for ch in 0..c {
                let v = out.data()[ch * hw * hw + p];
                prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v));
                total += v;
            }
            prop_assert!((total - 1.0).abs() <= 1e-6, "pixel {p}: {total}");
        }
    }

    /// 3x3/stride-1/padding-1 convolution preserves spatial dimensions.
    #[test]
    fn padded_conv_preserves_dims(
        c_in in 1usize..3,
        c_out in 1usize..3,
        h in 1usize..9,
        w in 1usize..9,
        seed in 0u64..1000,
    ) {
        let mut state = seed.wrapping_add(1);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as Real / (1u64 << 31) as Real) - 1.0
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[c_in, h, w], (0..c_in*h*w).map(|_| next()).collect()).unwrap());
        let k = tape.leaf(&Tensor::new(&[c_out, c_in, 3, 3], (0..c_out*c_in*9).map(|_| next()).collect()).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[c_out]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        prop_assert_eq!(tape.shape(y), &[c_out, h, w]);
    }

    /// Max pooling then 2x2/stride-2 transposed convolution restores the
    /// original spatial shape (values need not match).
    #[test]
    fn pool_then_transpose_restores_shape(
        c in 1usize..4,
        half_h in 1usize..6,
        half_w in 1usize..6,
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[c, h, w], 0.5));
        let pooled = tape.maxpool2(x).unwrap();
        let k = tape.leaf(&Tensor::full(&[c, c, 2, 2], 0.1));
        let b = tape.leaf(&Tensor::zeros(&[c]));
        let restored = tape.conv_transpose2(pooled, k, b).unwrap();
        prop_assert_eq!(tape.shape(restored), &[c, h, w]);
    }

    /// Nearest-neighbor mask resizing never invents label values.
    #[test]
    fn mask_resize_never_invents_labels(
        h in 1usize..12,
        w in 1usize..12,
        out_h in 1usize..12,
        out_w in 1usize..12,
        labels in proptest::collection::vec(0u8..6, 1..150),
    ) {
        let src: Vec<u8> = (0..h * w).map(|i| labels[i % labels.len()]).collect();
        let out = data::resize_nearest_mask(&src, h, w, out_h, out_w);
        prop_assert_eq!(out.len(), out_h * out_w);
        let allowed: std::collections::BTreeSet<u8> = src.iter().copied().collect();
        prop_assert!(out.iter().all(|l| allowed.contains(l)));
    }
}
