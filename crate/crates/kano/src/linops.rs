//! Dense linear-operator kernels shared by the degradation model and the
//! differentiation tape: strided blur-downsample, its exact adjoint
//! (including the adjoint of replicate padding), the kernel-side gradient
//! contraction, and the small conv/pool ops used by the correction network.
//!
//! All three blur routines realize the same bilinear form
//! `<blur_down(x, k, s), r> = <x, blur_down_adjoint(r, k, s)> = <k, kernel_grad(x, r, s)>`
//! so each doubles as the backward rule of the others.

use ndarray::{Array2, Array3, Array4};

/// Edge-replicate pad by `m` on both spatial axes.
pub fn replicate_pad(x: &Array3<f64>, m: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * m, w + 2 * m));
    for ci in 0..c {
        for i in 0..h + 2 * m {
            let si = i.saturating_sub(m).min(h - 1);
            for j in 0..w + 2 * m {
                let sj = j.saturating_sub(m).min(w - 1);
                out[[ci, i, j]] = x[[ci, si, sj]];
            }
        }
    }
    out
}

/// Adjoint of `replicate_pad`: fold every padded cell back onto its source.
pub fn replicate_pad_adjoint(xp: &Array3<f64>, m: usize, h: usize, w: usize) -> Array3<f64> {
    let c = xp.dim().0;
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h + 2 * m {
            let si = i.saturating_sub(m).min(h - 1);
            for j in 0..w + 2 * m {
                let sj = j.saturating_sub(m).min(w - 1);
                out[[ci, si, sj]] += xp[[ci, i, j]];
            }
        }
    }
    out
}

/// Per-channel correlation with `k` under replicate padding, sampled at
/// stride `s` with offset 0: `y[c,i,j] = sum_{p,q} k[p,q] xpad[c, i*s+p, j*s+q]`.
/// Requires H and W divisible by `s` and odd kernel size.
pub fn blur_down_core(x: &Array3<f64>, k: &Array2<f64>, s: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ks = k.dim().0;
    debug_assert_eq!(k.dim().0, k.dim().1);
    debug_assert_eq!(ks % 2, 1);
    debug_assert!(h % s == 0 && w % s == 0);
    let m = ks / 2;
    let xp = replicate_pad(x, m);
    let (ho, wo) = (h / s, w / s);
    let mut y = Array3::zeros((c, ho, wo));
    let kflat = k.as_slice().unwrap();
    let xps = xp.as_slice().unwrap();
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    for ci in 0..c {
        let base_c = ci * ph * pw;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for p in 0..ks {
                    let row = base_c + (i * s + p) * pw + j * s;
                    let xr = &xps[row..row + ks];
                    let kr = &kflat[p * ks..(p + 1) * ks];
                    for q in 0..ks {
                        acc += kr[q] * xr[q];
                    }
                }
                y[[ci, i, j]] = acc;
            }
        }
    }
    y
}

/// Exact adjoint of `blur_down_core` in its image argument.
pub fn blur_down_adjoint_core(
    r: &Array3<f64>,
    k: &Array2<f64>,
    s: usize,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let (c, ho, wo) = r.dim();
    let ks = k.dim().0;
    let m = ks / 2;
    debug_assert_eq!(ho * s, h);
    debug_assert_eq!(wo * s, w);
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let mut buf = Array3::zeros((c, ph, pw));
    let kflat = k.as_slice().unwrap();
    {
        let bs = buf.as_slice_mut().unwrap();
        for ci in 0..c {
            let base_c = ci * ph * pw;
            for i in 0..ho {
                for j in 0..wo {
                    let rv = r[[ci, i, j]];
                    if rv == 0.0 {
                        continue;
                    }
                    for p in 0..ks {
                        let row = base_c + (i * s + p) * pw + j * s;
                        let br = &mut bs[row..row + ks];
                        let kr = &kflat[p * ks..(p + 1) * ks];
                        for q in 0..ks {
                            br[q] += kr[q] * rv;
                        }
                    }
                }
            }
        }
    }
    replicate_pad_adjoint(&buf, m, h, w)
}

/// Gradient of the bilinear form w.r.t. the kernel:
/// `g[p,q] = sum_{c,i,j} xpad[c, i*s+p, j*s+q] r[c,i,j]`.
pub fn kernel_grad_core(x: &Array3<f64>, r: &Array3<f64>, s: usize, ksize: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (cr, ho, wo) = r.dim();
    debug_assert_eq!(c, cr);
    debug_assert_eq!(ho * s, h);
    debug_assert_eq!(wo * s, w);
    let m = ksize / 2;
    let xp = replicate_pad(x, m);
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let xps = xp.as_slice().unwrap();
    let mut g = Array2::zeros((ksize, ksize));
    let gs = g.as_slice_mut().unwrap();
    for ci in 0..c {
        let base_c = ci * ph * pw;
        for i in 0..ho {
            for j in 0..wo {
                let rv = r[[ci, i, j]];
                if rv == 0.0 {
                    continue;
                }
                for p in 0..ksize {
                    let row = base_c + (i * s + p) * pw + j * s;
                    let xr = &xps[row..row + ksize];
                    let gr = &mut gs[p * ksize..(p + 1) * ksize];
                    for q in 0..ksize {
                        gr[q] += xr[q] * rv;
                    }
                }
            }
        }
    }
    g
}

/// Multi-channel 3x3-style conv, stride 1, replicate "same" padding.
/// `w` has shape `(c_out, c_in, k, k)` with odd `k`.
pub fn conv2d_core(x: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
    let (cin, h, wid) = x.dim();
    let (cout, cin2, ks, _) = w.dim();
    debug_assert_eq!(cin, cin2);
    let m = ks / 2;
    let xp = replicate_pad(x, m);
    let (ph, pw) = (h + 2 * m, wid + 2 * m);
    let xps = xp.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut y = Array3::zeros((cout, h, wid));
    let ys = y.as_slice_mut().unwrap();
    for o in 0..cout {
        for ci in 0..cin {
            let base_c = ci * ph * pw;
            let wbase = (o * cin + ci) * ks * ks;
            for i in 0..h {
                let yrow = o * h * wid + i * wid;
                for p in 0..ks {
                    let xrow = base_c + (i + p) * pw;
                    let wr = &ws[wbase + p * ks..wbase + (p + 1) * ks];
                    for q in 0..ks {
                        let wv = wr[q];
                        if wv == 0.0 {
                            continue;
                        }
                        let xr = &xps[xrow + q..xrow + q + wid];
                        let yr = &mut ys[yrow..yrow + wid];
                        for j in 0..wid {
                            yr[j] += wv * xr[j];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `conv2d_core` w.r.t. its input.
pub fn conv2d_grad_input(gy: &Array3<f64>, w: &Array4<f64>, h: usize, wid: usize) -> Array3<f64> {
    let (cout, _, _) = gy.dim();
    let (_, cin, ks, _) = w.dim();
    let m = ks / 2;
    let (ph, pw) = (h + 2 * m, wid + 2 * m);
    let mut buf = Array3::zeros((cin, ph, pw));
    {
        let bs = buf.as_slice_mut().unwrap();
        let ws = w.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        for o in 0..cout {
            for ci in 0..cin {
                let base_c = ci * ph * pw;
                let wbase = (o * cin + ci) * ks * ks;
                for i in 0..h {
                    let grow = o * h * wid + i * wid;
                    for p in 0..ks {
                        let brow = base_c + (i + p) * pw;
                        let wr = &ws[wbase + p * ks..wbase + (p + 1) * ks];
                        for q in 0..ks {
                            let wv = wr[q];
                            if wv == 0.0 {
                                continue;
                            }
                            let gr = &gys[grow..grow + wid];
                            let br = &mut bs[brow + q..brow + q + wid];
                            for j in 0..wid {
                                br[j] += wv * gr[j];
                            }
                        }
                    }
                }
            }
        }
    }
    replicate_pad_adjoint(&buf, m, h, wid)
}

/// Gradient of `conv2d_core` w.r.t. its weights.
pub fn conv2d_grad_weight(gy: &Array3<f64>, x: &Array3<f64>, ks: usize) -> Array4<f64> {
    let (cin, h, wid) = x.dim();
    let (cout, _, _) = gy.dim();
    let m = ks / 2;
    let xp = replicate_pad(x, m);
    let pw = wid + 2 * m;
    let xps = xp.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let ph = h + 2 * m;
    let mut gw = Array4::zeros((cout, cin, ks, ks));
    for o in 0..cout {
        for ci in 0..cin {
            let base_c = ci * ph * pw;
            for p in 0..ks {
                for q in 0..ks {
                    let mut acc = 0.0;
                    for i in 0..h {
                        let grow = o * h * wid + i * wid;
                        let xrow = base_c + (i + p) * pw + q;
                        let gr = &gys[grow..grow + wid];
                        let xr = &xps[xrow..xrow + wid];
                        for j in 0..wid {
                            acc += gr[j] * xr[j];
                        }
                    }
                    gw[[o, ci, p, q]] = acc;
                }
            }
        }
    }
    gw
}

/// 2x2 average pooling (H, W must be even).
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let mut y = Array3::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                y[[ci, i, j]] = 0.25
                    * (x[[ci, 2 * i, 2 * j]]
                        + x[[ci, 2 * i, 2 * j + 1]]
                        + x[[ci, 2 * i + 1, 2 * j]]
                        + x[[ci, 2 * i + 1, 2 * j + 1]]);
            }
        }
    }
    y
}

pub fn avg_pool2_adjoint(gy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gy.dim();
    let mut gx = Array3::zeros((c, h2 * 2, w2 * 2));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let v = 0.25 * gy[[ci, i, j]];
                gx[[ci, 2 * i, 2 * j]] = v;
                gx[[ci, 2 * i, 2 * j + 1]] = v;
                gx[[ci, 2 * i + 1, 2 * j]] = v;
                gx[[ci, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    gx
}

/// 2x nearest-neighbor upsampling.
pub fn up_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for i in 0..h * 2 {
            for j in 0..w * 2 {
                y[[ci, i, j]] = x[[ci, i / 2, j / 2]];
            }
        }
    }
    y
}

pub fn up_nearest2_adjoint(gy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gy.dim();
    let mut gx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                gx[[ci, i / 2, j / 2]] += gy[[ci, i, j]];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand2(rng: &mut ChaCha8Rng, k: usize) -> Array2<f64> {
        Array::from_shape_fn((k, k), |_| rng.gen_range(-1.0..1.0))
    }

    fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    /// Independent quadruple-loop evaluation of the blur-downsample, padding
    /// done by index clamping instead of a materialized buffer.
    fn blur_down_naive(x: &Array3<f64>, k: &Array2<f64>, s: usize) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let ks = k.dim().0;
        let m = ks as isize / 2;
        let mut y = Array3::zeros((c, h / s, w / s));
        for ci in 0..c {
            for i in 0..h / s {
                for j in 0..w / s {
                    let mut acc = 0.0;
                    for p in 0..ks {
                        for q in 0..ks {
                            let ii = ((i * s + p) as isize - m).clamp(0, h as isize - 1) as usize;
                            let jj = ((j * s + q) as isize - m).clamp(0, w as isize - 1) as usize;
                            acc += k[[p, q]] * x[[ci, ii, jj]];
                        }
                    }
                    y[[ci, i, j]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn blur_down_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = rand3(&mut rng, 1, 8, 8);
            let k = rand2(&mut rng, 3);
            let y = blur_down_core(&x, &k, 2);
            let y2 = blur_down_naive(&x, &k, 2);
            for (a, b) in y.iter().zip(y2.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity_all_kernel_stride_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &ks in &[1usize, 3, 11] {
            for &s in &[1usize, 2, 3, 4] {
                for _ in 0..10 {
                    let (h, w) = (24, 24);
                    let x = rand3(&mut rng, 2, h, w);
                    let r = rand3(&mut rng, 2, h / s, w / s);
                    let k = rand2(&mut rng, ks);
                    let lhs = dot3(&blur_down_core(&x, &k, s), &r);
                    let rhs = dot3(&x, &blur_down_adjoint_core(&r, &k, s, h, w));
                    let nx = dot3(&x, &x).sqrt();
                    let nr = dot3(&r, &r).sqrt();
                    assert!(
                        (lhs - rhs).abs() <= 1e-10 * nx * nr,
                        "k={ks} s={s}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn kernel_grad_closes_the_bilinear_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (h, w, s, ks) = (12, 12, 2, 5);
            let x = rand3(&mut rng, 3, h, w);
            let r = rand3(&mut rng, 3, h / s, w / s);
            let k = rand2(&mut rng, ks);
            let lhs = dot3(&blur_down_core(&x, &k, s), &r);
            let g = kernel_grad_core(&x, &r, s, ks);
            let rhs: f64 = g.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv2d_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, cout, h, w, ks) = (3, 4, 6, 7, 3);
        let x = rand3(&mut rng, cin, h, w);
        let wt = Array::from_shape_fn((cout, cin, ks, ks), |_| rng.gen_range(-1.0..1.0));
        let gy = rand3(&mut rng, cout, h, w);
        let y = conv2d_core(&x, &wt);
        let lhs = dot3(&y, &gy);
        // input side
        let gx = conv2d_grad_input(&gy, &wt, h, w);
        let rhs = dot3(&x, &gx);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        // weight side
        let gw = conv2d_grad_weight(&gy, &x, ks);
        let rhs2: f64 = gw.iter().zip(wt.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs2).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand3(&mut rng, 2, 8, 8);
        let gy = rand3(&mut rng, 2, 4, 4);
        let lhs = dot3(&avg_pool2(&x), &gy);
        let rhs = dot3(&x, &avg_pool2_adjoint(&gy));
        assert!((lhs - rhs).abs() <= 1e-12);

        let x2 = rand3(&mut rng, 2, 4, 4);
        let gy2 = rand3(&mut rng, 2, 8, 8);
        let lhs = dot3(&up_nearest2(&x2), &gy2);
        let rhs = dot3(&x2, &up_nearest2_adjoint(&gy2));
        assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn delta_kernel_stride_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand3(&mut rng, 1, 6, 6);
        let k = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let y = blur_down_core(&x, &k, 1);
        assert_eq!(x, y);
        let z = blur_down_adjoint_core(&x, &k, 1, 6, 6);
        assert_eq!(x, z);
    }
}
