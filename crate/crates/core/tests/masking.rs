use asr_core::features::{FeatureMatrix, FEATURE_DIM};
use asr_core::grad::{Array, ParamStore, Tape};
use asr_core::mask::*;
use asr_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn features(t: usize, seed: u64) -> FeatureMatrix {
    let mut rng = stream(seed, 6, 0);
    FeatureMatrix::from_frames((0..t * FEATURE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn cardinality_for_every_length() {
    for t in 1..200usize {
        let want = ((0.15 * t as f64).round() as usize).max(1);
        assert_eq!(mask_count(t), want, "T = {t}");
        let s = apply_mask(&features(t, t as u64), &mut stream(1, 0, t as u64));
        assert_eq!(s.mask.ones(), want);
        assert_eq!(s.branches.len(), want);
    }
}

#[test]
fn branch_frequencies() {
    let mut counts = [0usize; 3];
    let mut n = 0;
    let mut i = 0;
    while n < 20_000 {
        let s = apply_mask(&features(100, i), &mut stream(7, 0, i));
        for (_, b) in &s.branches {
            counts[match b {
                MaskBranch::Noise => 0,
                MaskBranch::Zero => 1,
                MaskBranch::Keep => 2,
            }] += 1;
            n += 1;
        }
        i += 1;
    }
    for (c, p) in counts.iter().zip([0.8, 0.1, 0.1]) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?} of {n}");
    }
}

#[test]
fn noise_moments_follow_utterance_statistics() {
    // with constant neighbours, noisy - mean(neighbours) = ξ ~ N(μ, δ)
    let t = 400;
    let mut rng = stream(3, 0, 0);
    let mut data = Vec::with_capacity(t * FEATURE_DIM);
    for r in 0..t {
        for d in 0..FEATURE_DIM {
            data.push(if r % 2 == 0 { d as f64 * 0.1 } else { rng.random_range(-1.0..1.0) });
        }
    }
    let clean = FeatureMatrix::from_frames(data).unwrap();
    let stats = compute_noise_stats(&clean);
    let odd: Vec<usize> = (1..t - 1).step_by(2).collect();
    let mut xi = vec![Vec::new(); FEATURE_DIM];
    for rep in 0..20 {
        let draws = vec![0.0; odd.len()];
        let s = apply_mask_with(&clean, &odd, &draws, &mut stream(rep, 1, 0));
        for &r in &odd {
            for d in 0..FEATURE_DIM {
                xi[d].push(s.noisy.row(r)[d] - d as f64 * 0.1);
            }
        }
    }
    for d in 0..FEATURE_DIM {
        let n = xi[d].len() as f64;
        let m = xi[d].iter().sum::<f64>() / n;
        let sd = (xi[d].iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m - stats.mu[d]).abs() < 4.0 * stats.delta[d] / n.sqrt() + 1e-12, "dim {d}");
        assert!((sd - stats.delta[d]).abs() < 0.05 * stats.delta[d] + 1e-12, "dim {d}");
    }
}

#[test]
fn masked_loss_gradient_is_supported_on_masked_rows() {
    for seed in 0..20u64 {
        let t = 30;
        let clean = features(t, seed);
        let recon = features(t, seed + 100);
        let s = apply_mask(&clean, &mut stream(seed, 2, 0));
        let mut store = ParamStore::new();
        let id = store.add("recon", Array::new(vec![t, FEATURE_DIM], recon.data().to_vec()).unwrap(), true);
        let mut tape = Tape::new();
        let r = tape.param(&store, id).unwrap();
        let loss = masked_mae_on_tape(&mut tape, &clean, r, &s.mask, MaeNormalization::default()).unwrap();
        let plain = masked_mae_loss(&clean, &recon, &s.mask, MaeNormalization::default()).unwrap();
        assert!((tape.value(loss).item().unwrap() - plain).abs() < 1e-12);
        tape.backward(loss, &mut store).unwrap();
        let g = store.grad(id).data();
        let mut masked_nonzero = false;
        for row in 0..t {
            let gr = &g[row * FEATURE_DIM..(row + 1) * FEATURE_DIM];
            if s.mask.get(row) {
                masked_nonzero |= gr.iter().any(|&v| v != 0.0);
            } else {
                assert!(gr.iter().all(|&v| v == 0.0), "row {row}");
            }
        }
        assert!(masked_nonzero);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_selected_rows_change(t in 1usize..80, seed in 0u64..10_000) {
        let clean = features(t, seed);
        let s = apply_mask(&clean, &mut stream(seed, 3, 0));
        prop_assert_eq!(&s.clean, &clean);
        for r in 0..t {
            if !s.mask.get(r) {
                prop_assert_eq!(s.noisy.row(r), clean.row(r));
            }
        }
        for &(r, b) in &s.branches {
            prop_assert!(s.mask.get(r));
            match b {
                MaskBranch::Keep => prop_assert_eq!(s.noisy.row(r), clean.row(r)),
                MaskBranch::Zero => prop_assert!(s.noisy.row(r).iter().all(|&v| v == 0.0)),
                MaskBranch::Noise => {}
            }
        }
    }

    #[test]
    fn same_stream_same_mask(t in 1usize..60, seed in 0u64..10_000) {
        let clean = features(t, seed);
        let a = apply_mask(&clean, &mut stream(seed, 0, 1));
        let b = apply_mask(&clean, &mut stream(seed, 0, 1));
        prop_assert_eq!(a.noisy, b.noisy);
        prop_assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss(t in 1usize..40, seed in 0u64..1000) {
        let clean = features(t, seed);
        let s = apply_mask(&clean, &mut stream(seed, 4, 0));
        for norm in [MaeNormalization::PerMaskedFrame, MaeNormalization::Sum] {
            prop_assert_eq!(masked_mae_loss(&clean, &clean, &s.mask, norm).unwrap(), 0.0);
        }
    }
}
