//! Dense kernels used by the forward/backward passes.
//!
//! Everything is written so that each output row is computed from its input
//! row with a fixed accumulation order, independent of how many other rows
//! the matrix has. That makes per-position results bit-identical under
//! insertion, removal, or permutation of unrelated positions, which the
//! re-ranking contract relies on.

use ndarray::{Array1, Array2};

/// Dot product with four independent accumulators (fixed reduction tree,
/// auto-vectorizable).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s2) + (s1 + s3) + tail
}

const ROW_TILE: usize = 4;
const COL_TILE: usize = 8;

/// out = x @ w (+ bias), with w stored d_in x d_out.
///
/// Register-tiled over ROW_TILE x COL_TILE blocks. Rows are zero-padded to a
/// full tile so every row runs the identical instruction sequence, and each
/// out[i][o] accumulates over d_in in ascending order; a row's result is
/// therefore bit-identical no matter how many other rows the input has.
pub(crate) fn matmul(x: &Array2<f64>, w: &Array2<f64>, bias: Option<&Array1<f64>>) -> Array2<f64> {
    let (t, d_in) = x.dim();
    let (wd_in, d_out) = w.dim();
    debug_assert_eq!(d_in, wd_in);
    let mut out = Array2::zeros((t, d_out));
    if t == 0 {
        return out;
    }
    let ws = w.as_slice().unwrap();

    let padded_rows = t.div_ceil(ROW_TILE) * ROW_TILE;
    let mut xbuf = vec![0.0f64; padded_rows * d_in];
    xbuf[..t * d_in].copy_from_slice(x.as_slice().unwrap());
    let mut obuf = vec![0.0f64; padded_rows * d_out];

    // Pack each column tile of w contiguously: the kernel then streams
    // 8-wide rows without the 4 KiB stride that aliases L1 sets.
    let col_tiles = d_out / COL_TILE;
    let mut wpack = vec![0.0f64; col_tiles * d_in * COL_TILE];
    for c0 in 0..col_tiles {
        let o0 = c0 * COL_TILE;
        let dst = &mut wpack[c0 * d_in * COL_TILE..(c0 + 1) * d_in * COL_TILE];
        for k in 0..d_in {
            dst[k * COL_TILE..(k + 1) * COL_TILE]
                .copy_from_slice(&ws[k * d_out + o0..k * d_out + o0 + COL_TILE]);
        }
    }

    for i0 in (0..padded_rows).step_by(ROW_TILE) {
        let x0 = &xbuf[i0 * d_in..(i0 + 1) * d_in];
        let x1 = &xbuf[(i0 + 1) * d_in..(i0 + 2) * d_in];
        let x2 = &xbuf[(i0 + 2) * d_in..(i0 + 3) * d_in];
        let x3 = &xbuf[(i0 + 3) * d_in..(i0 + 4) * d_in];
        for c0 in 0..col_tiles {
            let block = &wpack[c0 * d_in * COL_TILE..(c0 + 1) * d_in * COL_TILE];
            let mut acc = [[0.0f64; COL_TILE]; ROW_TILE];
            for k in 0..d_in {
                let wrow = &block[k * COL_TILE..(k + 1) * COL_TILE];
                let xv = [x0[k], x1[k], x2[k], x3[k]];
                for r in 0..ROW_TILE {
                    for c in 0..COL_TILE {
                        acc[r][c] += xv[r] * wrow[c];
                    }
                }
            }
            let o0 = c0 * COL_TILE;
            for r in 0..ROW_TILE {
                let orow = &mut obuf[(i0 + r) * d_out + o0..(i0 + r) * d_out + o0 + COL_TILE];
                orow.copy_from_slice(&acc[r]);
            }
        }
        // column remainder: same ascending-k accumulation per element
        for o in col_tiles * COL_TILE..d_out {
            let mut acc = [0.0f64; ROW_TILE];
            for k in 0..d_in {
                let wv = ws[k * d_out + o];
                acc[0] += x0[k] * wv;
                acc[1] += x1[k] * wv;
                acc[2] += x2[k] * wv;
                acc[3] += x3[k] * wv;
            }
            for r in 0..ROW_TILE {
                obuf[(i0 + r) * d_out + o] = acc[r];
            }
        }
    }

    let os = out.as_slice_mut().unwrap();
    os.copy_from_slice(&obuf[..t * d_out]);
    if let Some(b) = bias {
        let bs = b.as_slice().unwrap();
        for i in 0..t {
            let orow = &mut os[i * d_out..(i + 1) * d_out];
            for (o, bv) in orow.iter_mut().zip(bs) {
                *o += bv;
            }
        }
    }
    out
}

/// dx = dy @ w^T for w stored d_in x d_out; each dx[i][k] is a dot of two
/// contiguous rows. Rows are padded to pairs so both take the same path.
pub(crate) fn matmul_wt(dy: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (t, d_out) = dy.dim();
    let (d_in, wd_out) = w.dim();
    debug_assert_eq!(d_out, wd_out);
    let mut dx = Array2::zeros((t, d_in));
    if t == 0 {
        return dx;
    }
    let ws = w.as_slice().unwrap();

    let padded = t.div_ceil(2) * 2;
    let mut ybuf = vec![0.0f64; padded * d_out];
    ybuf[..t * d_out].copy_from_slice(dy.as_slice().unwrap());
    let mut obuf = vec![0.0f64; padded * d_in];

    for i0 in (0..padded).step_by(2) {
        let y0 = &ybuf[i0 * d_out..(i0 + 1) * d_out];
        let y1 = &ybuf[(i0 + 1) * d_out..(i0 + 2) * d_out];
        for k in 0..d_in {
            let wrow = &ws[k * d_out..(k + 1) * d_out];
            let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
            let (mut b0, mut b1, mut b2, mut b3) = (0.0, 0.0, 0.0, 0.0);
            let chunks = d_out / 4;
            for c in 0..chunks {
                let o = c * 4;
                a0 += y0[o] * wrow[o];
                a1 += y0[o + 1] * wrow[o + 1];
                a2 += y0[o + 2] * wrow[o + 2];
                a3 += y0[o + 3] * wrow[o + 3];
                b0 += y1[o] * wrow[o];
                b1 += y1[o + 1] * wrow[o + 1];
                b2 += y1[o + 2] * wrow[o + 2];
                b3 += y1[o + 3] * wrow[o + 3];
            }
            let mut atail = 0.0;
            let mut btail = 0.0;
            for o in chunks * 4..d_out {
                atail += y0[o] * wrow[o];
                btail += y1[o] * wrow[o];
            }
            obuf[i0 * d_in + k] = (a0 + a2) + (a1 + a3) + atail;
            obuf[(i0 + 1) * d_in + k] = (b0 + b2) + (b1 + b3) + btail;
        }
    }
    dx.as_slice_mut().unwrap().copy_from_slice(&obuf[..t * d_in]);
    dx
}

/// acc += x^T @ y, for parameter-gradient accumulation
/// (x: t x m, y: t x n, acc: m x n).
pub(crate) fn add_xt_y(acc: &mut Array2<f64>, x: &Array2<f64>, y: &Array2<f64>, scale: f64) {
    let (t, m) = x.dim();
    let (ty, n) = y.dim();
    debug_assert_eq!(t, ty);
    debug_assert_eq!(acc.dim(), (m, n));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice().unwrap();
    let accs = acc.as_slice_mut().unwrap();
    for i in 0..t {
        let xrow = &xs[i * m..(i + 1) * m];
        let yrow = &ys[i * n..(i + 1) * n];
        for (k, &xv) in xrow.iter().enumerate() {
            let arow = &mut accs[k * n..(k + 1) * n];
            let sxv = scale * xv;
            for (a, yv) in arow.iter_mut().zip(yrow) {
                *a += sxv * yv;
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise layer normalization (gamma/beta applied by the caller when they
/// are not identity; this model keeps them frozen at identity).
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub invstd: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut invstd = Vec::with_capacity(t);
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    for i in 0..t {
        let row = x.row(i);
        let rs = row.as_slice().unwrap();
        let mean = rs.iter().sum::<f64>() / d as f64;
        let var = rs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        invstd.push(inv);
        for k in 0..d {
            let xh = (rs[k] - mean) * inv;
            xhat[[i, k]] = xh;
            out[[i, k]] = gs[k] * xh + bs[k];
        }
    }
    (out, LnCache { xhat, invstd })
}

/// dx for layer norm given dy and the forward cache.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    cache: &LnCache,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    let gs = gamma.as_slice().unwrap();
    for i in 0..t {
        let dyr = dy.row(i);
        let dyr = dyr.as_slice().unwrap();
        let xhr = cache.xhat.row(i);
        let xhr = xhr.as_slice().unwrap();
        let inv = cache.invstd[i];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for k in 0..d {
            let dxh = dyr[k] * gs[k];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhr[k];
        }
        let m1 = sum_dxhat / d as f64;
        let m2 = sum_dxhat_xhat / d as f64;
        for k in 0..d {
            let dxh = dyr[k] * gs[k];
            dx[[i, k]] = inv * (dxh - m1 - xhr[k] * m2);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn matmul_matches_ndarray_dot() {
        let x = arr2(&[[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]);
        let w = arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]]);
        let bias = Array1::from(vec![0.1, -0.2]);
        let got = matmul(&x, &w, Some(&bias));
        let want = x.dot(&w) + &bias;
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_other_rows() {
        let w = Array2::from_shape_fn((8, 6), |(i, j)| ((i * 7 + j) as f64).sin());
        let x3 = Array2::from_shape_fn((3, 8), |(i, j)| ((i + j) as f64).cos());
        let x5 = {
            let mut m = Array2::from_shape_fn((5, 8), |(i, j)| ((i * j) as f64).sin());
            for j in 0..8 {
                m[[2, j]] = x3[[1, j]];
            }
            m
        };
        let y3 = matmul(&x3, &w, None);
        let y5 = matmul(&x5, &w, None);
        for j in 0..6 {
            assert_eq!(y3[[1, j]].to_bits(), y5[[2, j]].to_bits());
        }
    }

    #[test]
    fn matmul_wt_is_transpose_product() {
        let dy = arr2(&[[1.0, -2.0], [3.0, 0.5]]);
        let w = arr2(&[[2.0, 1.0], [0.0, -1.0], [1.0, 1.0]]);
        let got = matmul_wt(&dy, &w);
        let want = dy.dot(&w.t());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]]);
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5);
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // constant row maps to ~zero under the epsilon guard
        assert!(y.row(1).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "at {x}");
        }
    }
}

#[cfg(test)]
mod bench_tmp {
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn matmul_throughput() {
        for (t, din, dout) in
            [(50usize, 128usize, 512usize), (50, 512, 128), (50, 128, 128), (560, 128, 512)]
        {
            let x = Array2::from_shape_fn((t, din), |(i, j)| ((i * j) as f64 * 0.001).sin());
            let w = Array2::from_shape_fn((din, dout), |(i, j)| ((i + j) as f64 * 0.001).cos());
            let reps = (200_000_000 / (t * din * dout)).max(10);
            let start = Instant::now();
            let mut acc = 0.0;
            for _ in 0..reps {
                acc += matmul(&x, &w, None)[[0, 0]];
            }
            let dt = start.elapsed().as_secs_f64();
            let gflops = (2.0 * (t * din * dout) as f64 * reps as f64) / dt / 1e9;
            println!("ikj   {t}x{din}x{dout}: {gflops:.2} GFLOP/s ({acc:.1})");

            let start = Instant::now();
            let mut acc = 0.0;
            for _ in 0..reps {
                acc += x.dot(&w)[[0, 0]];
            }
            let dt = start.elapsed().as_secs_f64();
            let gflops = (2.0 * (t * din * dout) as f64 * reps as f64) / dt / 1e9;
            println!("dgemm {t}x{din}x{dout}: {gflops:.2} GFLOP/s ({acc:.1})");
        }
    }
}

#[cfg(test)]
mod bench_pass {
    use crate::backbone::*;
    use ndarray::{Array1, Array2};
    use std::time::Instant;

    #[test]
    #[ignore]
    fn pass_timings() {
        let cfg = BackboneConfig::desk(1000);
        let params = BackboneParams::init(cfg, 0).unwrap();
        let base = TokenStream::from_tokens(&(0..17u32).collect::<Vec<_>>());
        let cands: Vec<Array1<f64>> =
            (0..33).map(|c| Array1::from_shape_fn(128, |i| ((i + c) as f64 * 0.1).sin())).collect();
        let stream = base.with_candidates(&cands);

        let reps = 50;
        let start = Instant::now();
        for _ in 0..reps {
            let _ = forward(&params, &stream, ForwardOpts::inference()).unwrap();
        }
        println!("fwd inference T={}: {:.2} ms", stream.len(), start.elapsed().as_secs_f64() * 1e3 / reps as f64);

        let start = Instant::now();
        for _ in 0..reps {
            let _ = forward(&params, &stream, ForwardOpts::recorded()).unwrap();
        }
        println!("fwd recorded  T={}: {:.2} ms", stream.len(), start.elapsed().as_secs_f64() * 1e3 / reps as f64);

        let out = forward(&params, &stream, ForwardOpts::recorded()).unwrap();
        let dh = Array2::from_shape_fn((stream.len(), 128), |(i, j)| ((i * j) as f64 * 1e-3).sin());
        let start = Instant::now();
        for _ in 0..reps {
            let _ = backward(&params, &stream, out.cache.as_ref().unwrap(), &dh, None);
        }
        println!("backward      T={}: {:.2} ms", stream.len(), start.elapsed().as_secs_f64() * 1e3 / reps as f64);

        let item = TokenStream::from_tokens(&(0..22u32).collect::<Vec<_>>());
        let start = Instant::now();
        for _ in 0..reps {
            let _ = forward(&params, &item, ForwardOpts::inference()).unwrap();
        }
        println!("item fwd T=22: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
}
