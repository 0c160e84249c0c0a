//! Raw forward/backward loops for the spatial ops. All inner loops run in a
//! fixed order so results are bit-reproducible.

/// Geometry of a 2-D convolution over NCHW data with square kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// `C[m×n] += A[m×k] · B[k×n]`. `A` is addressed through `(row, col)`
/// strides; `B` and `C` are row-major and dense. Every element of `C` is
/// accumulated over `k` in increasing order with separate multiply and add,
/// so all code paths give identical bits.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(m, n, k, a, a_rs, a_cs, b, c) };
            return;
        }
    }
    gemm_blocked::<4, 4>(m, n, k, a, a_rs, a_cs, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(m: usize, n: usize, k: usize, a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], c: &mut [f64]) {
    gemm_blocked::<4, 8>(m, n, k, a, a_rs, a_cs, b, c);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_blocked<const MR: usize, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    c: &mut [f64],
) {
    let n_main = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < n_main {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            assert!(k == 0 || ((i + MR - 1) * a_rs + (k - 1) * a_cs < a.len() && (k - 1) * n + j + NR <= b.len()));
            for kk in 0..k {
                // SAFETY: the largest indices touched were bounds-checked above.
                let bv: [f64; NR] = unsafe { *(b.as_ptr().add(kk * n + j) as *const [f64; NR]) };
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = unsafe { *a.get_unchecked((i + r) * a_rs + kk * a_cs) };
                    for q in 0..NR {
                        row[q] += av * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_row_tail(r, n_main, n, k, a, a_rs, a_cs, b, c);
        }
        i += MR;
    }
    for r in i..m {
        gemm_row_tail(r, 0, n, k, a, a_rs, a_cs, b, c);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_row_tail(r: usize, j0: usize, n: usize, k: usize, a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], c: &mut [f64]) {
    for j in j0..n {
        let mut acc = c[r * n + j];
        for kk in 0..k {
            acc += a[r * a_rs + kk * a_cs] * b[kk * n + j];
        }
        c[r * n + j] = acc;
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (r, p) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.batch * g.c_out * p];
    let mut cols = vec![0.0; r * p];
    let in_stride = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
        let out_n = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for co in 0..g.c_out {
            out_n[co * p..(co + 1) * p].fill(bias[co]);
        }
        gemm_acc(g.c_out, p, r, weight, r, 1, &cols, out_n);
    }
    out
}

/// Gradients of a convolution. Each requested output is accumulated over
/// the batch in order.
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let (r, p) = (g.rows(), g.cols());
    let in_stride = g.c_in * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; g.batch * in_stride]);
    let mut dw = want_dw.then(|| vec![0.0; g.c_out * r]);
    let mut db = want_db.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; r * p];
    let mut cols_t = vec![0.0; if want_dw { r * p } else { 0 }];
    let mut dcols = vec![0.0; if want_dx { r * p } else { 0 }];
    for n in 0..g.batch {
        let dout_n = &dout[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(db) = db.as_mut() {
            for co in 0..g.c_out {
                db[co] += dout_n[co * p..(co + 1) * p].iter().fold(0.0, |a, v| a + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
            for ri in 0..r {
                for pi in 0..p {
                    cols_t[pi * r + ri] = cols[ri * p + pi];
                }
            }
            gemm_acc(g.c_out, r, p, dout_n, p, 1, &cols_t, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            gemm_acc(r, p, g.c_out, weight, 1, r, dout_n, &mut dcols);
            col2im_add(g, &dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Saved statistics of a group normalization forward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupNormSaved {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    shape: &[usize],
    groups: usize,
    eps: f64,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, GroupNormSaved) {
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let per_group = c / groups * spatial;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n * groups];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * (c / groups)) * spatial;
            let seg = &x[start..start + per_group];
            let mean = seg.iter().fold(0.0, |a, v| a + v) / per_group as f64;
            let var = seg.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / per_group as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[ni * groups + gi] = rs;
            for (j, &v) in seg.iter().enumerate() {
                let ch = gi * (c / groups) + j / spatial;
                let xh = (v - mean) * rs;
                xhat[start + j] = xh;
                y[start + j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, GroupNormSaved { xhat, rstd })
}

pub(crate) fn group_norm_backward(
    shape: &[usize],
    groups: usize,
    saved: &GroupNormSaved,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let per_group = c / groups * spatial;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * (c / groups)) * spatial;
            let rs = saved.rstd[ni * groups + gi];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..per_group {
                let ch = gi * (c / groups) + j / spatial;
                let d = dy[start + j];
                let xh = saved.xhat[start + j];
                dgamma[ch] += d * xh;
                dbeta[ch] += d;
                let dxh = d * gamma[ch];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh;
            }
            let m = per_group as f64;
            let (mean_d, mean_dx) = (sum_dxhat / m, sum_dxhat_xhat / m);
            for j in 0..per_group {
                let ch = gi * (c / groups) + j / spatial;
                let xh = saved.xhat[start + j];
                let dxh = dy[start + j] * gamma[ch];
                dx[start + j] = rs * (dxh - mean_d - xh * mean_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// One bilinear tap: flat plane offset and weight. Corners with zero
/// weight or outside the grid are never emitted.
#[derive(Clone, Copy)]
struct Tap {
    offset: usize,
    weight: f64,
}

/// Bilinear corners of `(sy, sx)`; out-of-grid corners contribute zero.
fn corners(h: usize, w: usize, sy: f64, sx: f64) -> ([Option<Tap>; 4], f64, f64, isize, isize) {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let wy = sy - y0;
    let wx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize, weight: f64| -> Option<Tap> {
        (weight != 0.0 && yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize).then(|| Tap {
            offset: yy as usize * w + xx as usize,
            weight,
        })
    };
    (
        [
            at(y0, x0, (1.0 - wy) * (1.0 - wx)),
            at(y0, x0 + 1, (1.0 - wy) * wx),
            at(y0 + 1, x0, wy * (1.0 - wx)),
            at(y0 + 1, x0 + 1, wy * wx),
        ],
        wy,
        wx,
        y0,
        x0,
    )
}

fn fetch(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Backward bilinear warp of `feat` [N,C,H,W] by `flow` [N,2,H,W]
/// (channel 0 = dx, channel 1 = dy) with zero padding.
pub(crate) fn warp_forward(shape: &[usize], feat: &[f64], flow: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut out = vec![0.0; feat.len()];
    for ni in 0..n {
        let fl = &flow[ni * 2 * hw..(ni + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + fl[p];
                let sy = y as f64 + fl[hw + p];
                let (taps, ..) = corners(h, w, sy, sx);
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let plane = &feat[base..base + hw];
                    let mut acc = 0.0;
                    let mut first = true;
                    for t in taps.iter().flatten() {
                        let v = t.weight * plane[t.offset];
                        if first {
                            acc = v;
                            first = false;
                        } else {
                            acc += v;
                        }
                    }
                    out[base + p] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn warp_backward(
    shape: &[usize],
    feat: &[f64],
    flow: &[f64],
    dout: &[f64],
    want_dfeat: bool,
    want_dflow: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut dfeat = want_dfeat.then(|| vec![0.0; feat.len()]);
    let mut dflow = want_dflow.then(|| vec![0.0; flow.len()]);
    for ni in 0..n {
        let fl = &flow[ni * 2 * hw..(ni + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + fl[p];
                let sy = y as f64 + fl[hw + p];
                let (taps, wy, wx, y0, x0) = corners(h, w, sy, sx);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let d = dout[base + p];
                    if let Some(df) = dfeat.as_mut() {
                        for t in taps.iter().flatten() {
                            df[base + t.offset] += t.weight * d;
                        }
                    }
                    if want_dflow {
                        let plane = &feat[base..base + hw];
                        let v00 = fetch(plane, h, w, y0, x0);
                        let v01 = fetch(plane, h, w, y0, x0 + 1);
                        let v10 = fetch(plane, h, w, y0 + 1, x0);
                        let v11 = fetch(plane, h, w, y0 + 1, x0 + 1);
                        gx += d * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                        gy += d * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                }
                if let Some(dfl) = dflow.as_mut() {
                    dfl[ni * 2 * hw + p] += gx;
                    dfl[ni * 2 * hw + hw + p] += gy;
                }
            }
        }
    }
    (dfeat, dflow)
}

pub(crate) fn upsample_forward(shape: &[usize], factor: usize, x: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; nc * oh * ow];
    for plane in 0..nc {
        for oy in 0..oh {
            let src = &x[(plane * h + oy / factor) * w..(plane * h + oy / factor + 1) * w];
            let dst = &mut out[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / factor];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(shape: &[usize], factor: usize, dout: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; nc * h * w];
    for plane in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(plane * h + oy / factor) * w + ox / factor] += dout[(plane * oh + oy) * ow + ox];
            }
        }
    }
    dx
}
