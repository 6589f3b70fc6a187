use powshift::fuse::{fxp_apply_wide, fxp_encode};
use powshift::kernels::{
    activation_lut, build_lut, conv2d_float, conv2d_int_bac, conv2d_int_mac, maxpool2_int8,
    ActivationKind, Int8Tensor,
};
use powshift::quantize::{
    pack_nibbles, quantize_pot, unpack_nibbles, AffineParams, PotCode, PotTensor,
};
use proptest::prelude::*;

fn layer() -> impl Strategy<Value = (Int8Tensor, PotTensor, i8, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..4, 0usize..3, 1usize..3).prop_flat_map(
        |(c_in, c_out, k, pad, stride)| {
            let min = k.saturating_sub(2 * pad).max(1);
            (min..10, min..10).prop_flat_map(move |(h, w)| {
                let n_w = c_out * c_in * k * k;
                (
                    prop::collection::vec(any::<i8>(), c_in * h * w),
                    prop::collection::vec(0u8..16, n_w),
                    any::<i8>(),
                    0.01f64..4.0,
                )
                    .prop_map(move |(x, codes, z, scale)| {
                        let codes: Vec<PotCode> =
                            codes.into_iter().map(PotCode::from_bits).collect();
                        let x = Int8Tensor {
                            shape: [1, c_in, h, w],
                            data: x,
                            q: AffineParams {
                                scale: 0.05,
                                zero_point: z,
                            },
                        };
                        let pot =
                            PotTensor::from_codes([c_out, c_in, k, k], &codes, scale).unwrap();
                        (x, pot, z, stride, pad)
                    })
            })
        },
    )
}

proptest! {
    #[test]
    fn shift_accumulate_matches_multiply((x, pot, z, stride, pad) in layer()) {
        let bac = conv2d_int_bac(&x, &pot, z, stride, pad).unwrap();
        let mac = conv2d_int_mac(&x, &pot.int_weights(), pot.shape(), z, stride, pad).unwrap();
        prop_assert_eq!(bac, mac);
    }

    #[test]
    fn integer_conv_scales_to_float_conv((x, pot, z, stride, pad) in layer()) {
        // The accumulator times the input and weight steps is the float conv
        // of the dequantized operands, with padding at the real value zero.
        let acc = conv2d_int_mac(&x, &pot.int_weights(), pot.shape(), z, stride, pad).unwrap();
        let unit = pot.scale() / 128.0;
        let w: Vec<f64> = pot.int_weights().iter().map(|&v| v as f64 * unit).collect();
        let c_out = pot.shape()[0];
        let y = conv2d_float(&x.dequantize(), &w, pot.shape(), &vec![0.0; c_out], stride, pad).unwrap();
        for (a, f) in acc.data.iter().zip(&y.data) {
            let scaled = *a as f64 * x.q.scale * unit;
            prop_assert!((scaled - f).abs() <= 1e-9 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn nibble_packing_round_trips(codes in prop::collection::vec(0u8..16, 0..100)) {
        let packed = pack_nibbles(&codes);
        prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
        prop_assert_eq!(unpack_nibbles(&packed, codes.len()), codes);
    }

    #[test]
    fn pot_codes_are_nearest_in_log_domain(w in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let s = w.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
        let t = quantize_pot(&w, [w.len(), 1, 1, 1], s).unwrap();
        for (i, &v) in w.iter().enumerate() {
            let c = t.code(i);
            prop_assert_eq!(c.is_negative(), v < 0.0);
            let level = s * (-(c.exp() as f64)).exp2();
            for e in 0..=7 {
                let other = s * (-(e as f64)).exp2();
                let d_pick = (v.abs().max(1e-300).log2() - level.log2()).abs();
                let d_other = (v.abs().max(1e-300).log2() - other.log2()).abs();
                prop_assert!(d_pick <= d_other + 1e-9);
            }
        }
    }

    #[test]
    fn fixed_point_multiplier_is_accurate(factor in 1e-6f64..1e3, value in -1_000_000i64..1_000_000) {
        let fm = fxp_encode(factor).unwrap();
        prop_assert!((fm.to_f64() - factor).abs() <= factor * 2f64.powi(-30));
        let exact = value as f64 * factor;
        prop_assert!((fxp_apply_wide(value, fm) as f64 - exact).abs() <= 0.5 + exact.abs() * 2f64.powi(-29));
    }

    #[test]
    fn relu_table_is_exact_with_shared_quantizer(scale in 1e-3f64..1.0, z in any::<i8>(), x in prop::collection::vec(any::<i8>(), 1..64)) {
        let q = AffineParams { scale, zero_point: z };
        let table = build_lut(|v| ActivationKind::Relu.apply(v), q, q);
        let t = Int8Tensor { shape: [1, 1, 1, x.len()], data: x.clone(), q };
        let y = activation_lut(&t, &table, q);
        for (a, b) in x.iter().zip(&y.data) {
            prop_assert_eq!(*b, (*a).max(z));
        }
    }

    #[test]
    fn int8_max_pool_commutes_with_dequantize(h in 2usize..9, w in 2usize..9, data in prop::collection::vec(any::<i8>(), 64)) {
        let q = AffineParams { scale: 0.1, zero_point: 3 };
        let t = Int8Tensor { shape: [1, 1, h, w], data: data[..h * w].to_vec(), q };
        let pooled = maxpool2_int8(&t).dequantize();
        let (reference, _) = powshift::kernels::maxpool2(&t.dequantize().data, t.shape);
        prop_assert_eq!(pooled.data, reference);
    }
}
