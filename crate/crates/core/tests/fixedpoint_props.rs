use proptest::prelude::*;
use xbar_core::fixedpoint::{
    input_sign_bit, recombine_streams, rescale_round_even, shift_and_add, slice_weight, stream_input, FxpFormat,
    SignChannel, SliceScheme,
};

fn width_of(bits: u32) -> impl Strategy<Value = u32> {
    prop::sample::select(
        (1..=bits.min(8))
            .filter(move |w| bits.is_multiple_of(*w))
            .collect::<Vec<_>>(),
    )
}

fn scheme() -> impl Strategy<Value = SliceScheme> {
    (
        prop::sample::select(vec![4u32, 8, 16]),
        prop::sample::select(vec![4u32, 8, 16]),
    )
        .prop_flat_map(|(wb, ib)| (Just(wb), width_of(wb), Just(ib), width_of(ib)))
        .prop_map(|(wb, sw, ib, stw)| SliceScheme::new(wb, sw, ib, stw).unwrap())
}

fn format() -> impl Strategy<Value = FxpFormat> {
    prop::sample::select(vec![4u32, 8, 16, 32])
        .prop_flat_map(|bits| (Just(bits), 0..bits))
        .prop_map(|(bits, frac)| FxpFormat::q(bits, frac))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn weight_slices_recombine((s, frac) in (scheme(), 0.0f64..1.0)) {
        let max = (1i64 << (s.weight_bits - 1)) - 1;
        let code = -max + ((2 * max) as f64 * frac).round() as i64;
        let (pos, neg) = slice_weight(code, &s).unwrap();
        prop_assert_eq!(pos.recombine(&s) + neg.recombine(&s), code);
        prop_assert!(pos.slices.iter().chain(&neg.slices).all(|&v| v <= s.slice_max()));
        prop_assert!(pos.slices.iter().all(|&v| v == 0) || neg.slices.iter().all(|&v| v == 0));
        prop_assert_eq!(pos.sign_channel, SignChannel::Positive);
    }

    #[test]
    fn most_negative_weight_is_rejected(s in scheme()) {
        prop_assert!(slice_weight(-(1i64 << (s.weight_bits - 1)), &s).is_err());
    }

    #[test]
    fn input_streams_recombine((s, frac) in (scheme(), 0.0f64..1.0)) {
        let half = 1i64 << (s.input_bits - 1);
        let code = -half + ((2 * half - 1) as f64 * frac).round() as i64;
        let streams = stream_input(code, &s).unwrap();
        prop_assert_eq!(streams.len(), s.n_streams());
        prop_assert!(streams.iter().all(|&v| v <= s.stream_max()));
        prop_assert_eq!(recombine_streams(&streams, &s), code);
    }

    #[test]
    fn shift_and_add_reproduces_the_dot_product(s in scheme(), seed in any::<u64>(), n in 1usize..12) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (ihalf, wmax) = (1i64 << (s.input_bits - 1), (1i64 << (s.weight_bits - 1)) - 1);
        let x: Vec<i64> = (0..n).map(|_| rng.random_range(-ihalf..ihalf)).collect();
        let w: Vec<i64> = (0..n).map(|_| rng.random_range(-wmax..=wmax)).collect();
        let streams: Vec<Vec<u32>> = x.iter().map(|&c| stream_input(c, &s).unwrap()).collect();
        let slices: Vec<_> = w.iter().map(|&c| slice_weight(c, &s).unwrap()).collect();
        let mut total = 0.0;
        for channel in [SignChannel::Positive, SignChannel::Negative] {
            let pick = |i: usize| if channel == SignChannel::Positive { &slices[i].0 } else { &slices[i].1 };
            let partials: Vec<Vec<f64>> = (0..s.n_streams())
                .map(|st| (0..s.n_slices())
                    .map(|k| (0..n).map(|i| (streams[i][st] * pick(i).slices[k]) as f64).sum())
                    .collect())
                .collect();
            let sign: Vec<f64> = (0..s.n_slices())
                .map(|k| (0..n).map(|i| (input_sign_bit(x[i]) * pick(i).slices[k]) as f64).sum())
                .collect();
            total += shift_and_add(&partials, Some(&sign), &s, channel);
        }
        let want: i64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        prop_assert_eq!(total, want as f64);
    }

    #[test]
    fn rescale_matches_float_rounding(code in -(1i64 << 40)..(1i64 << 40), from in 0u32..30, to in 0u32..30) {
        let got = rescale_round_even(code as i128, from, to);
        let want = (code as f64 * 2f64.powi(to as i32 - from as i32)).round_ties_even();
        prop_assert_eq!(got as f64, want);
    }

    #[test]
    fn rescale_up_then_down_is_identity(code in any::<i64>(), frac in 0u32..40, up in 0u32..40) {
        let wide = rescale_round_even(code as i128, frac, frac + up);
        prop_assert_eq!(rescale_round_even(wide, frac + up, frac), code as i128);
    }

    #[test]
    fn quantize_is_nearest_within_range(f in format(), t in -1.5f64..1.5) {
        let x = t * f.max_value();
        let (code, sat) = f.quantize_flagged(x);
        prop_assert!(code >= f.min_code() && code <= f.max_code());
        let err = (f.dequantize(code) - x).abs();
        if x >= f.min_value() - f.step() / 2.0 && x <= f.max_value() + f.step() / 2.0 {
            prop_assert!(err <= f.step() / 2.0, "err {} step {}", err, f.step());
        }
        prop_assert_eq!(sat, x < f.min_value() - f.step() / 2.0 || x > f.max_value() + f.step() / 2.0);
    }

    #[test]
    fn quantize_is_monotone(f in format(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f.quantize(lo * f.max_value()) <= f.quantize(hi * f.max_value()));
    }

    #[test]
    fn dequantized_codes_are_fixed_points(f in format(), t in 0.0f64..1.0) {
        let code = f.min_code() + ((f.max_code() - f.min_code()) as f64 * t) as i64;
        prop_assert_eq!(f.quantize(f.dequantize(code)), code);
    }
}
