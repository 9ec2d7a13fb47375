use fxlink::autoencoder::{
    calibrate_ranges, end_to_end_with, random_bits, AutoencoderModel, ChannelDraw, Engine, LinkConfig, ModelShape,
};
use fxlink::fixedpoint::{dequantize, fx_add, fx_mul, quantize, QFormat};
use fxlink::metrics::{estimate_latency, evm, relative_rms, LatencyConfig};
use fxlink::ofdmlink::{
    add_cp, fft, from_reals, ifft, qam4_demodulate, qam4_modulate, remove_cp, to_reals, ChannelKind, OfdmConfig,
    OfdmModem,
};
use fxlink::paramdelivery::{quantize_model, verify, ModelArtifact};
use fxlink::{seed, Complex64};
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::ToPrimitive;
use proptest::prelude::*;

fn format() -> impl Strategy<Value = QFormat> {
    (QFormat::MIN_TOTAL_BITS..=QFormat::MAX_TOTAL_BITS)
        .prop_flat_map(|total| (Just(total), 0..=total - 2))
        .prop_map(|(t, i)| QFormat::new(t, i).unwrap())
}

fn complex_vec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), n)
        .prop_map(|v| v.into_iter().map(|(r, i)| Complex64::new(r, i)).collect())
}

proptest! {
    #[test]
    fn quantize_lands_on_grid_within_half_step(q in format(), x in -300.0f64..300.0) {
        let v = dequantize(quantize(x, q).unwrap());
        prop_assert!(q.is_on_grid(v));
        if x >= q.min_value() && x <= q.max_value() {
            prop_assert!((v - x).abs() <= q.step() / 2.0);
        } else {
            prop_assert!(v == q.min_value() || v == q.max_value());
        }
    }

    #[test]
    fn quantize_is_monotone_and_idempotent(q in format(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ql, qh) = (dequantize(quantize(lo, q).unwrap()), dequantize(quantize(hi, q).unwrap()));
        prop_assert!(ql <= qh);
        prop_assert_eq!(dequantize(quantize(ql, q).unwrap()), ql);
    }

    #[test]
    fn fx_mul_matches_bigint_rounding(q in format(), a in any::<i32>(), b in any::<i32>()) {
        let clamp = |r: i32| r.clamp(q.min_raw(), q.max_raw());
        let (ra, rb) = (clamp(a), clamp(b));
        let x = quantize(q.raw_to_real(ra), q).unwrap();
        let y = quantize(q.raw_to_real(rb), q).unwrap();
        let got = fx_mul(x, y).unwrap().raw();
        let scale = BigInt::from(1u64 << q.frac_bits());
        let prod = BigInt::from(ra) * BigInt::from(rb);
        let (quot, rem) = prod.div_mod_floor(&scale);
        let twice = rem * 2;
        let r = if twice > scale || (twice == scale && quot.is_odd()) { quot + 1 } else { quot };
        let want = r.clamp(BigInt::from(q.min_raw()), BigInt::from(q.max_raw())).to_i64().unwrap();
        prop_assert_eq!(got as i64, want);
    }

    #[test]
    fn fx_add_is_commutative_and_saturating(q in format(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (x, y) = (quantize(a, q).unwrap(), quantize(b, q).unwrap());
        let s = fx_add(x, y).unwrap();
        prop_assert_eq!(s, fx_add(y, x).unwrap());
        let exact = x.raw() as i64 + y.raw() as i64;
        prop_assert_eq!(s.raw() as i64, exact.clamp(q.min_raw() as i64, q.max_raw() as i64));
    }

    #[test]
    fn fft_round_trip_and_linearity(k in 0u32..8, seed_a in any::<u64>()) {
        let n = 1usize << k;
        let mut rng = seed::stream(seed_a, 0, 0);
        let x: Vec<Complex64> = (0..n).map(|_| fxlink::ofdmlink::complex_gaussian(&mut rng, 1.0)).collect();
        let y: Vec<Complex64> = (0..n).map(|_| fxlink::ofdmlink::complex_gaussian(&mut rng, 1.0)).collect();
        let back = ifft(&fft(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).norm() < 1e-12);
        }
        let sum: Vec<Complex64> = x.iter().zip(&y).map(|(a, b)| a + b * 2.0).collect();
        let (fs, fx, fy) = (fft(&sum).unwrap(), fft(&x).unwrap(), fft(&y).unwrap());
        for i in 0..n {
            prop_assert!((fs[i] - fx[i] - fy[i] * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn cyclic_prefix_round_trip(x in complex_vec(16), cp in 0usize..16) {
        let with = add_cp(&x, cp).unwrap();
        prop_assert_eq!(with.len(), 16 + cp);
        prop_assert_eq!(&with[..cp], &x[16 - cp..]);
        prop_assert_eq!(remove_cp(&with, cp).unwrap(), x);
    }

    #[test]
    fn modem_round_trip(x in complex_vec(32)) {
        let modem = OfdmModem::new(&OfdmConfig::default()).unwrap();
        let back = modem.receive(&modem.transmit(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn qam4_and_real_packing_round_trip(bits in prop::collection::vec(0u8..2, 0..64usize)) {
        let bits: Vec<u8> = bits[..bits.len() / 2 * 2].to_vec();
        let sym = qam4_modulate(&bits).unwrap();
        for s in &sym {
            prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(qam4_demodulate(&sym), bits);
        prop_assert_eq!(from_reals(&to_reals(&sym)).unwrap(), sym);
    }

    #[test]
    fn error_metrics_are_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..40), noise in 0.0f64..0.5, c in 0.01f64..100.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let t: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + noise * ((i % 3) as f64 - 1.0)).collect();
        let base = relative_rms(&v, &t).unwrap();
        let vs: Vec<f64> = v.iter().map(|x| x * c).collect();
        let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
        prop_assert!((relative_rms(&vs, &ts).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
        prop_assert_eq!(relative_rms(&v, &v).unwrap(), 0.0);
        let z: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, -x)).collect();
        prop_assert_eq!(evm(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn latency_cycles_follow_the_mac_array(p in 1u64..2048, d in 0u64..16, dims in prop::collection::vec(1usize..600, 2..6)) {
        let cfg = LatencyConfig { parallel_macs: p, pipeline_depth: d, ..LatencyConfig::default() };
        let est = estimate_latency(&dims, &cfg, &OfdmConfig::default()).unwrap();
        prop_assert_eq!(est.layers.len(), dims.len() - 1);
        for (l, w) in est.layers.iter().zip(dims.windows(2)) {
            let macs = (w[0] * w[1]) as u64;
            prop_assert_eq!(l.macs, macs);
            prop_assert_eq!(l.cycles, macs.div_ceil(p) + d);
        }
        let more = LatencyConfig { parallel_macs: p * 2, ..cfg };
        let faster = estimate_latency(&dims, &more, &OfdmConfig::default()).unwrap();
        prop_assert!(faster.layers.iter().zip(&est.layers).all(|(a, b)| a.cycles <= b.cycles));
    }
}

fn small_model(seed_value: u64, layers: usize) -> AutoencoderModel {
    AutoencoderModel::init(
        &OfdmConfig::default(),
        1.0,
        ModelShape {
            n_layers: layers,
            hidden_width: 24,
        },
        LinkConfig::new(ChannelKind::Rayleigh),
        seed_value,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn artifacts_round_trip_bit_exactly(s in any::<u64>(), layers in 2usize..7, quantized in any::<bool>()) {
        let m = small_model(s, layers);
        let q = QFormat::new(16, 3).unwrap();
        let (model, fmt) = if quantized { (quantize_model(&m, q).unwrap().model, Some(q)) } else { (m, None) };
        let bytes = ModelArtifact::from_model(&model, fmt).to_bytes();
        let parsed = ModelArtifact::parse(&bytes).unwrap();
        prop_assert!(parsed.checksum_ok);
        prop_assert_eq!(parsed.to_bytes(), bytes);
        let back = parsed.to_model().unwrap();
        prop_assert_eq!(back, model);
        let report = verify(&parsed);
        prop_assert!(report.passed(), "{:?}", report.problems);
        prop_assert_eq!(report.grid_violations, fmt.map(|_| 0));
    }

    #[test]
    fn single_byte_corruption_is_detected(s in any::<u64>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let m = small_model(s, 3);
        let mut bytes = ModelArtifact::from_model(&m, None).to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        if let Ok(a) = ModelArtifact::parse(&bytes) { prop_assert!(!a.checksum_ok || a.to_model().is_err()) }
    }

    #[test]
    fn calibration_preserves_link_decisions(s in any::<u64>(), layers in 3usize..7) {
        let mut m = small_model(s, layers);
        let before = m.clone();
        calibrate_ranges(&mut m, [10.0, 20.0], &mut seed::stream(s, seed::TRAIN, 1)).unwrap();
        let modem = OfdmModem::new(&m.ofdm).unwrap();
        let mut rng = seed::stream(s, seed::EVAL, 0);
        for _ in 0..20 {
            let bits = random_bits(m.info_len(), &mut rng);
            let draw = ChannelDraw::draw(ChannelKind::Rayleigh, m.coded_len() / 2, 15.0, &mut rng);
            let a = end_to_end_with(Engine::Float(&before), &bits, &draw, Some(&modem)).unwrap();
            let b = end_to_end_with(Engine::Float(&m), &bits, &draw, Some(&modem)).unwrap();
            for (x, y) in a.taps.decoded.iter().zip(&b.taps.decoded) {
                prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
            }
        }
    }
}
