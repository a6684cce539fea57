use asr_core::grad::conv::*;
use asr_core::grad::{finite_difference_check, Array, NormMode, ParamStore, Tape};
use asr_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = stream(seed, 1, 0);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so that every output coordinate carries a distinct gradient.
fn probe(tape: &mut Tape, v: asr_core::grad::Var, seed: u64) -> asr_core::Result<asr_core::grad::Var> {
    let w = tape.constant(random(tape.shape(v), seed))?;
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check(store: &mut ParamStore, f: impl FnMut(&ParamStore, &mut Tape) -> asr_core::Result<asr_core::grad::Var>) -> f64 {
    finite_difference_check(store, 1e-6, 64, f).unwrap().max_rel_error
}

#[test]
fn elementwise_and_reductions() {
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[3, 4], 1), true);
    let b = s.add("b", random(&[3, 4], 2), true);
    let bias = s.add("bias", random(&[4], 3), true);
    let err = check(&mut s, |s, t| {
        let (x, y, c) = (t.param(s, a)?, t.param(s, b)?, t.param(s, bias)?);
        let u = t.add(x, y)?;
        let u = t.sub(u, y)?;
        let u = t.mul(u, y)?;
        let u = t.add_bias(u, c)?;
        let th = t.tanh(u);
        let sg = t.sigmoid(x);
        let ab = t.abs(y);
        let m = t.mean(ab);
        let k = t.scale(m, 0.7);
        let z = t.add(th, sg)?;
        let z = probe(t, z, 9)?;
        t.add(z, k)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn matmul_softmax() {
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[5, 3], 4), true);
    let b = s.add("b", random(&[3, 6], 5), true);
    let err = check(&mut s, |s, t| {
        let (x, y) = (t.param(s, a)?, t.param(s, b)?);
        let m = t.matmul(x, y)?;
        let p = t.softmax(m)?;
        probe(t, p, 3)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn structural_ops() {
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[2, 4, 3], 6), true);
    let b = s.add("b", random(&[2, 2, 3], 7), true);
    let err = check(&mut s, |s, t| {
        let (x, y) = (t.param(s, a)?, t.param(s, b)?);
        let c = t.concat(&[x, y], 1)?;
        let c = t.slice(c, 1, 1, 4)?;
        let c = t.reverse(c)?;
        let c = t.swap_leading(c)?;
        let c = t.reshape(c, vec![4, 6])?;
        probe(t, c, 8)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn convolutions_with_strides() {
    for stride in [(1, 1), (2, 1), (2, 2), (3, 2)] {
        let mut s = ParamStore::new();
        let x = s.add("x", random(&[2, 7, 5], 10), true);
        let w = s.add("w", random(&[3, 2, 3, 2], 11), true);
        let b = s.add("b", random(&[3], 12), true);
        let wt = s.add("wt", random(&[3, 2, 3, 3], 13), true);
        let bt = s.add("bt", random(&[2], 14), true);
        let err = check(&mut s, |s, t| {
            let (xv, wv, bv) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
            let y = t.conv2d(xv, wv, Some(bv), stride)?;
            let (wtv, btv) = (t.param(s, wt)?, t.param(s, bt)?);
            let z = t.conv_transpose2d(y, wtv, Some(btv), stride, (7, 5))?;
            probe(t, z, 15)
        });
        assert!(err < 1e-4, "stride {stride:?}: {err}");
    }
}

#[test]
fn batch_norm_both_modes() {
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[4, 3, 5], 20), true);
    let g = s.add("g", random(&[3], 21), true);
    let b = s.add("b", random(&[3], 22), true);
    let err = check(&mut s, |s, t| {
        let (xv, gv, bv) = (t.param(s, x)?, t.param(s, g)?, t.param(s, b)?);
        let (y, _) = t.batch_norm(xv, gv, bv, 1, NormMode::Batch, 1e-5)?;
        probe(t, y, 23)
    });
    assert!(err < 1e-4, "{err}");
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    let err = check(&mut s, |s, t| {
        let (xv, gv, bv) = (t.param(s, x)?, t.param(s, g)?, t.param(s, b)?);
        let (y, stats) = t.batch_norm(xv, gv, bv, 1, NormMode::Running { mean: &mean, var: &var }, 1e-5)?;
        assert!(stats.is_none());
        probe(t, y, 24)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dropout_gradient_follows_the_mask() {
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[50], 30), true);
    let err = check(&mut s, |s, t| {
        let v = t.param(s, x)?;
        let mut rng = stream(5, 0, 0);
        let d = t.dropout(v, 0.3, &mut rng)?;
        probe(t, d, 31)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dropout_statistics() {
    let n = 200_000;
    let rate = 0.1;
    let mut t = Tape::new();
    let x = t.constant(Array::full(&[n], 1.0)).unwrap();
    let mut rng = stream(42, 0, 0);
    let d = t.dropout(x, rate, &mut rng).unwrap();
    let v = t.value(d).data();
    let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64;
    let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
    assert!((zeros - n as f64 * rate).abs() < 4.0 * sigma);
    assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.9).abs() < 1e-15));
    let mean = v.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
}

#[test]
fn batch_norm_statistics_are_biased_moments() {
    let xs = random(&[6, 2, 4], 50);
    let mut t = Tape::new();
    let x = t.constant(xs.clone()).unwrap();
    let g = t.constant(Array::full(&[2], 1.0)).unwrap();
    let b = t.constant(Array::zeros(&[2])).unwrap();
    let (y, stats) = t.batch_norm(x, g, b, 1, NormMode::Batch, 0.0).unwrap();
    let stats = stats.unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..6).flat_map(|o| xs.data()[(o * 2 + c) * 4..(o * 2 + c + 1) * 4].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 24.0;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 24.0;
        assert!((stats.mean[c] - m).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
        let out: Vec<f64> = (0..6).flat_map(|o| t.value(y).data()[(o * 2 + c) * 4..(o * 2 + c + 1) * 4].to_vec()).collect();
        let om = out.iter().sum::<f64>() / 24.0;
        let ov = out.iter().map(|v| (v - om).powi(2)).sum::<f64>() / 24.0;
        assert!(om.abs() < 1e-12 && (ov - 1.0).abs() < 1e-9);
    }
}

fn naive_conv(x: &Array, w: &Array, stride: (usize, usize)) -> Vec<f64> {
    let (cin, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kt, kf) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ot, of) = (t.div_ceil(stride.0), f.div_ceil(stride.1));
    let pad = |k: usize, s: usize, n: usize, o: usize| ((o - 1) * s + k).saturating_sub(n) / 2;
    let (pt, pf) = (pad(kt, stride.0, t, ot), pad(kf, stride.1, f, of));
    let mut out = vec![0.0; cout * ot * of];
    for co in 0..cout {
        for i in 0..ot {
            for j in 0..of {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for a in 0..kt {
                        for b in 0..kf {
                            let (ti, fj) = ((i * stride.0 + a) as isize - pt as isize, (j * stride.1 + b) as isize - pf as isize);
                            if ti >= 0 && fj >= 0 && (ti as usize) < t && (fj as usize) < f {
                                acc += x.data()[(ci * t + ti as usize) * f + fj as usize]
                                    * w.data()[((co * cin + ci) * kt + a) * kf + b];
                            }
                        }
                    }
                }
                out[(co * ot + i) * of + j] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum(
        cin in 1usize..3, cout in 1usize..3, t in 1usize..9, f in 1usize..7,
        kt in 1usize..5, kf in 1usize..4, st in 1usize..4, sf in 1usize..3, seed in 0u64..1000,
    ) {
        let x = random(&[cin, t, f], seed);
        let w = random(&[cout, cin, kt, kf], seed + 1);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap());
        let y = tape.conv2d(xv, wv, None, (st, sf)).unwrap();
        let want = naive_conv(&x, &w, (st, sf));
        prop_assert_eq!(tape.shape(y), &[cout, t.div_ceil(st), f.div_ceil(sf)][..]);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_the_adjoint(
        cin in 1usize..3, cout in 1usize..3, t in 1usize..9, f in 1usize..6,
        kt in 1usize..4, kf in 1usize..4, st in 1usize..3, seed in 0u64..1000,
    ) {
        // <conv(x), y> == <x, conv_transpose(y)>
        let x = random(&[cin, t, f], seed);
        let w = random(&[cout, cin, kt, kf], seed + 1);
        let y = random(&[cout, t.div_ceil(st), f], seed + 2);
        let mut tape = Tape::new();
        let (xv, wv, yv) = (tape.constant(x.clone()).unwrap(), tape.constant(w).unwrap(), tape.constant(y.clone()).unwrap());
        let cx = tape.conv2d(xv, wv, None, (st, 1)).unwrap();
        // the transpose kernel is laid out [Cin', Cout', ..] with Cin' = cout
        // the conv kernel [Cout, Cin, ..] is already the transpose layout
        let ty = tape.conv_transpose2d(yv, wv, None, (st, 1), (t, f)).unwrap();
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let mut a = random(&[rows, cols], seed);
        a.data_mut().iter_mut().for_each(|v| *v *= scale);
        let x = tape.constant(a).unwrap();
        let p = tape.softmax(x).unwrap();
        for r in tape.value(p).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col(
        c in 1usize..3, t in 1usize..9, f in 1usize..7, kt in 1usize..5, kf in 1usize..4,
        st in 1usize..4, sf in 1usize..3, seed in 0u64..1000,
    ) {
        let g = ConvGeometry::same(c, t, f, (kt, kf), (st, sf));
        let x = random(&[c * t * f], seed);
        let col = random(&[g.patch_len() * g.positions()], seed + 1);
        let ux = g.im2col(x.data());
        let mut back = vec![0.0; c * t * f];
        g.col2im(col.data(), &mut back);
        let lhs: f64 = ux.iter().zip(col.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }
}
