use proptest::prelude::*;
use trikv::rope::{evaluate_trig_series, logit_bands, logit_exact, rotate, trig_coefficients};
use trikv::{FrequencySpec, HeadVector};

/// qᵀ·R(−Δ)·k with R built as explicit 2×2 blocks, since
/// R(p_q)ᵀR(p_k) = R(p_k − p_q).
fn matrix_logit(q: &[f64], k: &[f64], delta: f64, theta: f64) -> f64 {
    let d = q.len();
    let mut total = 0.0;
    for f in 0..d / 2 {
        let w = theta.powf(-2.0 * f as f64 / d as f64);
        let (s, c) = (-w * delta).sin_cos();
        let (q0, q1, k0, k1) = (q[2 * f], q[2 * f + 1], k[2 * f], k[2 * f + 1]);
        total += q0 * (c * k0 - s * k1) + q1 * (s * k0 + c * k1);
    }
    total
}

fn scale(q: &[f64], k: &[f64]) -> f64 {
    q.chunks(2)
        .zip(k.chunks(2))
        .map(|(a, b)| a[0].hypot(a[1]) * b[0].hypot(b[1]))
        .sum::<f64>()
        .max(f64::MIN_POSITIVE)
}

fn pair(max_bands: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_bands).prop_flat_map(|b| {
        (
            prop::collection::vec(-10.0..10.0f64, 2 * b),
            prop::collection::vec(-10.0..10.0f64, 2 * b),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn forms_agree_with_matrix_oracle((q, k) in pair(64), pk in 0u64..1 << 20, gap in 0u64..1 << 16) {
        let spec = FrequencySpec::new(q.len(), 10_000.0).unwrap();
        let qv = HeadVector::from_interleaved(&q).unwrap();
        let kv = HeadVector::from_interleaved(&k).unwrap();
        let pq = pk + gap;
        let exact = logit_exact(&qv, pq, &kv, pk, &spec).unwrap();
        let bands = logit_bands(&qv, pq, &kv, pk, &spec).unwrap();
        let series = evaluate_trig_series(&trig_coefficients(&qv, &kv).unwrap(), gap as f64, &spec).unwrap();
        let oracle = matrix_logit(&q, &k, gap as f64, 10_000.0);
        let s = scale(&q, &k);
        prop_assert!((exact - oracle).abs() / s <= 1e-9);
        prop_assert!((bands - oracle).abs() / s <= 1e-9);
        prop_assert!((series - oracle).abs() / s <= 1e-9);
    }

    #[test]
    fn rotation_identity_and_norms((v, _) in pair(32), p in 0u64..1 << 20) {
        let spec = FrequencySpec::new(v.len(), 10_000.0).unwrap();
        let hv = HeadVector::from_interleaved(&v).unwrap();
        prop_assert_eq!(rotate(&hv, 0, &spec).unwrap(), hv.clone());
        let r = rotate(&hv, p, &spec).unwrap();
        for (a, b) in hv.band_norms().iter().zip(r.band_norms()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn rotation_composes((v, _) in pair(32), p1 in 0u64..1 << 19, p2 in 0u64..1 << 19) {
        let spec = FrequencySpec::new(v.len(), 10_000.0).unwrap();
        let hv = HeadVector::from_interleaved(&v).unwrap();
        let twice = rotate(&rotate(&hv, p1, &spec).unwrap(), p2, &spec).unwrap();
        let once = rotate(&hv, p1 + p2, &spec).unwrap();
        for (a, b) in twice.to_interleaved().iter().zip(once.to_interleaved()) {
            prop_assert!((a - b).abs() <= 1e-10 * 10.0);
        }
    }

    #[test]
    fn logit_is_shift_invariant((q, k) in pair(32), pk in 0u64..1 << 18, gap in 0u64..1 << 12, s in 0u64..1 << 18) {
        let spec = FrequencySpec::new(q.len(), 10_000.0).unwrap();
        let qv = HeadVector::from_interleaved(&q).unwrap();
        let kv = HeadVector::from_interleaved(&k).unwrap();
        let a = logit_exact(&qv, pk + gap, &kv, pk, &spec).unwrap();
        let b = logit_exact(&qv, pk + gap + s, &kv, pk + s, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * scale(&q, &k).max(1.0));
    }

    #[test]
    fn other_bases_agree((q, k) in pair(16), theta in 1.5f64..1e6, gap in 0u64..4096) {
        let spec = FrequencySpec::new(q.len(), theta).unwrap();
        let qv = HeadVector::from_interleaved(&q).unwrap();
        let kv = HeadVector::from_interleaved(&k).unwrap();
        let b = logit_bands(&qv, gap, &kv, 0, &spec).unwrap();
        prop_assert!((b - matrix_logit(&q, &k, gap as f64, theta)).abs() / scale(&q, &k) <= 1e-9);
    }
}

#[test]
fn causality_and_shape_errors() {
    let spec = FrequencySpec::new(4, 10_000.0).unwrap();
    let v = HeadVector::from_interleaved(&[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(logit_exact(&v, 3, &v, 4, &spec).is_err());
    let short = HeadVector::from_interleaved(&[1.0, 0.0]).unwrap();
    assert!(logit_bands(&v, 4, &short, 0, &spec).is_err());
    assert!(FrequencySpec::new(3, 10_000.0).is_err());
    assert!(FrequencySpec::new(4, 1.0).is_err());
}
