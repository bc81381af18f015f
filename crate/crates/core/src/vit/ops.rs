//! Dense building blocks with their reverse-mode counterparts. Activations
//! are row-major slices; gradients of weights are accumulated into the
//! caller's buffers.

pub(crate) const LN_EPS: f64 = 1e-6;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[i, o] = b[o] + sum_k x[i, k] * w[o, k]`.
pub(crate) fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        let yi = &mut y[i * dout..(i + 1) * dout];
        for o in 0..dout {
            yi[o] = b[o] + dot(xi, &w[o * din..(o + 1) * din]);
        }
    }
    y
}

/// Returns `dx`; accumulates into `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        let dyi = &dy[i * dout..(i + 1) * dout];
        let dxi = &mut dx[i * din..(i + 1) * din];
        for o in 0..dout {
            let g = dyi[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, &w[o * din..(o + 1) * din], dxi);
            axpy(g, xi, &mut dw[o * din..(o + 1) * din]);
        }
    }
    dx
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let h = (row[k] - mean) * r;
            xhat[i * d + k] = h;
            y[i * d + k] = g[k] * h + b[k];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        for k in 0..d {
            dg[k] += dyi[k] * xh[k];
            db[k] += dyi[k];
            dxhat[k] = dyi[k] * g[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let r = cache.rstd[i];
        for k in 0..d {
            dx[i * d + k] = r * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head scaled dot-product attention over `[n, d]` projections.
/// Returns the concatenated head outputs and per-head probability matrices.
pub(crate) fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                s[i * n + j] = scale * dot(qi, &k[j * d + off..j * d + off + dh]);
            }
        }
        softmax_rows(&mut s, n);
        for i in 0..n {
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..n {
                axpy(s[i * n + j], &v[j * d + off..j * d + off + dh], oi);
            }
        }
        probs.push(s);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` given the upstream gradient of the concatenated
/// head outputs.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[Vec<f64>],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut ds = vec![0.0; n * n];
    for (h, a) in probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..n {
            let doi = &dout[i * d + off..i * d + off + dh];
            // dA[i, j] = <dO_i, v_j>; dv_j += A[i, j] dO_i
            let mut row_dot = 0.0;
            for j in 0..n {
                let da = dot(doi, &v[j * d + off..j * d + off + dh]);
                ds[i * n + j] = da;
                row_dot += da * a[i * n + j];
                axpy(a[i * n + j], doi, &mut dv[j * d + off..j * d + off + dh]);
            }
            for j in 0..n {
                ds[i * n + j] = scale * a[i * n + j] * (ds[i * n + j] - row_dot);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let g = ds[i * n + j];
                if g == 0.0 {
                    continue;
                }
                let (kj, qi) = (j * d + off, i * d + off);
                for t in 0..dh {
                    dq[qi + t] += g * k[kj + t];
                    dk[kj + t] += g * q[qi + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// `(lo, hi, frac)` source taps for 2x bilinear upsampling with half-pixel
/// centres (`align_corners = false`).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// `[c, h, w] -> [c, 2h, 2w]`.
pub(crate) fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    dx
}

/// Pointwise channel mixing: `[cin, p] -> [cout, p]`.
pub(crate) fn conv1x1(x: &[f64], cin: usize, p: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * p];
    for o in 0..cout {
        let yo = &mut y[o * p..(o + 1) * p];
        yo.fill(b[o]);
        for i in 0..cin {
            axpy(w[o * cin + i], &x[i * p..(i + 1) * p], yo);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_backward(
    x: &[f64],
    cin: usize,
    p: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; cin * p];
    for o in 0..cout {
        let dyo = &dy[o * p..(o + 1) * p];
        db[o] += dyo.iter().sum::<f64>();
        for i in 0..cin {
            dw[o * cin + i] += dot(dyo, &x[i * p..(i + 1) * p]);
            axpy(w[o * cin + i], dyo, &mut dx[i * p..(i + 1) * p]);
        }
    }
    dx
}

/// Valid output index range for a tap offset of `k - 1` with zero padding 1.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// 3x3 convolution, stride 1, zero padding 1: `[cin, h, w] -> [cout, h, w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let hw = h * w;
    let mut y = vec![0.0; cout * hw];
    for o in 0..cout {
        let yo = &mut y[o * hw..(o + 1) * hw];
        yo.fill(b[o]);
        for i in 0..cin {
            let xi = &x[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let (ya, yb) = tap_range(ky, h);
                for kx in 0..3 {
                    let (xa, xb) = tap_range(kx, w);
                    let wv = wt[((o * cin + i) * 3 + ky) * 3 + kx];
                    for yy in ya..yb {
                        let sy = yy + ky - 1;
                        let src = &xi[sy * w + xa + kx - 1..sy * w + xb + kx - 1];
                        axpy(wv, src, &mut yo[yy * w + xa..yy * w + xb]);
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let mut dx = vec![0.0; cin * hw];
    for o in 0..cout {
        let dyo = &dy[o * hw..(o + 1) * hw];
        db[o] += dyo.iter().sum::<f64>();
        for i in 0..cin {
            let xi = &x[i * hw..(i + 1) * hw];
            let dxi = &mut dx[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let (ya, yb) = tap_range(ky, h);
                for kx in 0..3 {
                    let (xa, xb) = tap_range(kx, w);
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for yy in ya..yb {
                        let sy = yy + ky - 1;
                        let g = &dyo[yy * w + xa..yy * w + xb];
                        let s0 = sy * w + xa + kx - 1;
                        let s1 = sy * w + xb + kx - 1;
                        acc += dot(g, &xi[s0..s1]);
                        axpy(wv, g, &mut dxi[s0..s1]);
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks `backward` against central differences of `sum(dy * f(x))`.
    fn check_input_grad(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], dy: &[f64], dx: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fu: f64 = f(&up).iter().zip(dy).map(|(a, b)| a * b).sum();
            let fd: f64 = f(&dn).iter().zip(dy).map(|(a, b)| a * b).sum();
            let num = (fu - fd) / (2.0 * h);
            assert!((num - dx[i]).abs() <= 1e-6 * (1.0 + num.abs()), "{i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn conv3x3_input_gradient() {
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let x = rand_vec(cin * h * w, 1);
        let wt = rand_vec(cout * cin * 9, 2);
        let b = rand_vec(cout, 3);
        let dy = rand_vec(cout * h * w, 4);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; cout];
        let dx = conv3x3_backward(&x, cin, h, w, &wt, cout, &dy, &mut dw, &mut db);
        check_input_grad(&|xx| conv3x3(xx, cin, h, w, &wt, &b, cout), &x, &dy, &dx);
        check_input_grad(&|ww| conv3x3(&x, cin, h, w, ww, &b, cout), &wt, &dy, &dw);
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let (cin, cout, h, w) = (2, 2, 3, 4);
        let x = rand_vec(cin * h * w, 5);
        let wt = rand_vec(cout * cin * 9, 6);
        let b = rand_vec(cout, 7);
        let y = conv3x3(&x, cin, h, w, &wt, &b, cout);
        for o in 0..cout {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    acc += wt[((o * cin + i) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[i * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    let got = y[o * h * w + yy as usize * w + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_gradient_is_adjoint() {
        let (c, h, w) = (2, 3, 4);
        let x = rand_vec(c * h * w, 8);
        let dy = rand_vec(c * 4 * h * w, 9);
        let dx = upsample2x_backward(&dy, c, h, w);
        check_input_grad(&|xx| upsample2x(xx, c, h, w), &x, &dy, &dx);
        // Constant maps stay constant.
        let up = upsample2x(&vec![0.7; 6], 1, 2, 3);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_gradient() {
        let (n, d) = (3, 5);
        let x = rand_vec(n * d, 10);
        let g = rand_vec(d, 11);
        let b = rand_vec(d, 12);
        let dy = rand_vec(n * d, 13);
        let (_, cache) = layer_norm(&x, n, d, &g, &b);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layer_norm_backward(&dy, &cache, n, d, &g, &mut dg, &mut db);
        check_input_grad(&|xx| layer_norm(xx, n, d, &g, &b).0, &x, &dy, &dx);
    }

    #[test]
    fn attention_gradient_and_rows() {
        let (n, d, heads) = (4, 6, 2);
        let q = rand_vec(n * d, 14);
        let k = rand_vec(n * d, 15);
        let v = rand_vec(n * d, 16);
        let dy = rand_vec(n * d, 17);
        let (_, probs) = attention(&q, &k, &v, n, d, heads);
        for p in &probs {
            for row in p.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &probs, &dy, n, d, heads);
        check_input_grad(&|qq| attention(qq, &k, &v, n, d, heads).0, &q, &dy, &dq);
        check_input_grad(&|kk| attention(&q, kk, &v, n, d, heads).0, &k, &dy, &dk);
        check_input_grad(&|vv| attention(&q, &k, vv, n, d, heads).0, &v, &dy, &dv);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
