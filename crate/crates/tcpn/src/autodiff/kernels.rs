//! Dense numeric kernels shared by the tape ops. All matrices are row-major
//! f64 slices; shapes are passed explicitly and trusted by callers.

/// out[m,n] += is NOT the contract: out must be zeroed by the caller.
/// a [m,k] . b [k,n], ikj loop order so the inner loop streams both b and out.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a [m,k] . b^T with b [n,k]: out[i,j] = dot(a_i, b_j). Rows of both operands
/// stream contiguously.
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// a^T . b with a [k,m], b [k,n] -> out [m,n]; accumulates over the shared
/// leading axis one slab at a time.
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Unfold x [h,w,ci] into cols [ho*wo, kh*kw*ci] for a stride-s, zero-padded
/// convolution. Out-of-bounds taps stay zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * ci;
    debug_assert_eq!(cols.len(), ho * wo * k);
    for c in cols.iter_mut() {
        *c = 0.0;
    }
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * ci;
                    let dst = (ky * kw + kx) * ci;
                    row[dst..dst + ci].copy_from_slice(&x[src..src + ci]);
                }
            }
        }
    }
}

/// Adjoint of `im2col`: fold cols back onto the input grid, accumulating
/// overlapping taps. dx must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * ci;
    debug_assert_eq!(cols.len(), ho * wo * k);
    debug_assert_eq!(dx.len(), h * w * ci);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * ci;
                    let src = (ky * kw + kx) * ci;
                    for (o, g) in dx[dst..dst + ci].iter_mut().zip(&row[src..src + ci]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
