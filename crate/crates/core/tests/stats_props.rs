use proptest::prelude::*;
use trikv::stats::{calibrate, mean_resultant_length, QkTrace};
use trikv::{BandVector, FrequencySpec};

fn band() -> impl Strategy<Value = BandVector> {
    (-5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b)| BandVector::new(a, b))
}

/// Two-pass MRL with compensated sums.
fn mrl_oracle(samples: &[BandVector]) -> f64 {
    let re = neumaier(samples.iter().map(|s| s.re));
    let im = neumaier(samples.iter().map(|s| s.im));
    let norms = neumaier(samples.iter().map(|s| s.re.hypot(s.im)));
    if norms == 0.0 {
        0.0
    } else {
        (re.hypot(im) / norms).min(1.0)
    }
}

fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + c
}

fn trace_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..40, 1usize..3, 1usize..3, 1usize..4).prop_flat_map(|(t, hk, g, b)| {
        let hq = hk * g;
        let d = 2 * b;
        (
            Just(t),
            Just(hq),
            Just(hk),
            prop::collection::vec(-3.0..3.0f64, t * hq * d),
            prop::collection::vec(-3.0..3.0f64, t * hk * d),
        )
    })
}

fn token_major(data: &[f64], order: &[usize], stride: usize) -> Vec<f64> {
    order
        .iter()
        .flat_map(|&t| data[t * stride..(t + 1) * stride].iter().copied())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mrl_bounded_and_matches_oracle(samples in prop::collection::vec(band(), 1..200)) {
        let r = mean_resultant_length(&samples).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r - mrl_oracle(&samples)).abs() <= 1e-10);
    }

    #[test]
    fn mrl_scale_and_rotation_invariant(samples in prop::collection::vec(band(), 1..200), c in 1e-3..1e3f64, angle in -10.0..10.0f64) {
        let r = mean_resultant_length(&samples).unwrap();
        let scaled: Vec<_> = samples.iter().map(|s| s.scale(c)).collect();
        let rotated: Vec<_> = samples.iter().map(|s| s.rotate(angle)).collect();
        prop_assert!((mean_resultant_length(&scaled).unwrap() - r).abs() <= 1e-10);
        prop_assert!((mean_resultant_length(&rotated).unwrap() - r).abs() <= 1e-10);
    }

    #[test]
    fn calibration_matches_two_pass_and_ignores_order(
        (t, hq, hk, q, k) in trace_strategy(),
        shuffle_seed in any::<u64>(),
        angle in -3.0..3.0f64,
    ) {
        let d = q.len() / (t * hq);
        let spec = FrequencySpec::new(d, 10_000.0).unwrap();
        let trace = QkTrace::new(hq, hk, d, q.clone(), k.clone(), None).unwrap();
        let cal = calibrate(&trace, &spec).unwrap();

        // two-pass oracle per statistic
        for head in &cal.heads {
            let kh = head.q_head_index / (hq / hk);
            prop_assert_eq!(head.k_head_index, kh);
            for (f, b) in head.bands.iter().enumerate() {
                let qs: Vec<BandVector> = (0..t)
                    .map(|i| {
                        let o = (i * hq + head.q_head_index) * d + 2 * f;
                        BandVector::new(q[o], q[o + 1])
                    })
                    .collect();
                let ks: Vec<BandVector> = (0..t)
                    .map(|i| {
                        let o = (i * hk + kh) * d + 2 * f;
                        BandVector::new(k[o], k[o + 1])
                    })
                    .collect();
                let n = t as f64;
                let mq_re = neumaier(qs.iter().map(|s| s.re)) / n;
                let mq_im = neumaier(qs.iter().map(|s| s.im)) / n;
                let mnq = neumaier(qs.iter().map(|s| s.norm())) / n;
                let mnk = neumaier(ks.iter().map(|s| s.norm())) / n;
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
                prop_assert!(close(b.mean_q.re, mq_re));
                prop_assert!(close(b.mean_q.im, mq_im));
                prop_assert!(close(b.mean_norm_q, mnq));
                prop_assert!(close(b.mean_norm_k, mnk));
                prop_assert!(close(b.mrl_q, mrl_oracle(&qs)));
                prop_assert!(close(b.mrl_k, mrl_oracle(&ks)));
                prop_assert!((0.0..=1.0).contains(&b.mrl_q) && (0.0..=1.0).contains(&b.mrl_k));
            }
        }

        // permutation
        let mut order: Vec<usize> = (0..t).collect();
        let mut s = shuffle_seed;
        for i in (1..t).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted = QkTrace::new(hq, hk, d, token_major(&q, &order, hq * d), token_major(&k, &order, hk * d), None).unwrap();
        let cal2 = calibrate(&permuted, &spec).unwrap();
        for (a, b) in cal.heads.iter().zip(&cal2.heads) {
            for (x, y) in a.bands.iter().zip(&b.bands) {
                prop_assert!((x.mean_q.re - y.mean_q.re).abs() <= 1e-12);
                prop_assert!((x.mean_q.im - y.mean_q.im).abs() <= 1e-12);
                prop_assert!((x.mrl_q - y.mrl_q).abs() <= 1e-12);
                prop_assert!((x.mrl_k - y.mrl_k).abs() <= 1e-12);
            }
        }

        // rotating every band-0 query sample by a common angle rotates mean_q
        let mut rq = q.clone();
        for i in 0..t * hq {
            let o = i * d;
            let v = BandVector::new(q[o], q[o + 1]).rotate(angle);
            rq[o] = v.re;
            rq[o + 1] = v.im;
        }
        let rotated = calibrate(&QkTrace::new(hq, hk, d, rq, k.clone(), None).unwrap(), &spec).unwrap();
        for (a, b) in cal.heads.iter().zip(&rotated.heads) {
            let expected = a.bands[0].mean_q.rotate(angle);
            prop_assert!((b.bands[0].mean_q.re - expected.re).abs() <= 1e-10);
            prop_assert!((b.bands[0].mean_q.im - expected.im).abs() <= 1e-10);
            prop_assert!((b.bands[0].mrl_q - a.bands[0].mrl_q).abs() <= 1e-10);
        }
    }

    #[test]
    fn trace_bytes_round_trip((t, hq, hk, q, k) in trace_strategy(), explicit in any::<bool>()) {
        let d = q.len() / (t * hq);
        let q: Vec<f64> = q.iter().map(|&x| x as f32 as f64).collect();
        let k: Vec<f64> = k.iter().map(|&x| x as f32 as f64).collect();
        let positions = explicit.then(|| (0..t as u64).map(|i| i * 3 + 1).collect());
        let trace = QkTrace::new(hq, hk, d, q, k, positions).unwrap();
        let bytes = trace.to_bytes();
        let back = QkTrace::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert_eq!(&back, &trace);
        prop_assert!(QkTrace::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn mrl_reference_cases() {
    let same = vec![BandVector::new(0.3, -0.4); 17];
    assert!((mean_resultant_length(&same).unwrap() - 1.0).abs() <= 1e-12);
    let antipodal = [BandVector::new(1.0, 2.0), BandVector::new(-1.0, -2.0)];
    assert_eq!(mean_resultant_length(&antipodal).unwrap(), 0.0);
    assert_eq!(mean_resultant_length(&[BandVector::ZERO; 3]).unwrap(), 0.0);
    assert!(mean_resultant_length(&[]).is_err());
}
