//! Raw loops shared by the forward and backward passes.

/// Geometry of a batched matrix product `C = A · B` (or `A · Bᵀ`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_batched: bool,
    pub b_transposed: bool,
}

impl MatmulDims {
    fn b_offset(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}

pub(crate) fn matmul_forward(a: &[f64], b: &[f64], d: MatmulDims) -> Vec<f64> {
    let MatmulDims { batch, m, k, n, .. } = d;
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[d.b_offset(bi)..d.b_offset(bi) + k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        if d.b_transposed {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
                }
            }
        } else {
            for i in 0..m {
                let cr = &mut c[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    axpy(av, &b[kk * n..(kk + 1) * n], cr);
                }
            }
        }
    }
    c
}

/// Accumulates dA and/or dB for `C = A·B` (or `A·Bᵀ`) given dC.
pub(crate) fn matmul_backward(a: &[f64], b: &[f64], dc: &[f64], d: MatmulDims, mut da: Option<&mut [f64]>, mut db: Option<&mut [f64]>) {
    let MatmulDims { batch, m, k, n, .. } = d;
    for bi in 0..batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let boff = d.b_offset(bi);
        let b_b = &b[boff..boff + k * n];
        let dc_b = &dc[bi * m * n..(bi + 1) * m * n];
        if let Some(da) = da.as_deref_mut() {
            let da = &mut da[bi * m * k..(bi + 1) * m * k];
            for i in 0..m {
                let dcr = &dc_b[i * n..(i + 1) * n];
                let dar = &mut da[i * k..(i + 1) * k];
                if d.b_transposed {
                    for (j, &g) in dcr.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, &b_b[j * k..(j + 1) * k], dar);
                        }
                    }
                } else {
                    for (kk, v) in dar.iter_mut().enumerate() {
                        *v += dot(dcr, &b_b[kk * n..(kk + 1) * n]);
                    }
                }
            }
        }
        if let Some(db) = db.as_deref_mut() {
            let db = &mut db[boff..boff + k * n];
            for i in 0..m {
                let dcr = &dc_b[i * n..(i + 1) * n];
                let ar = &a_b[i * k..(i + 1) * k];
                if d.b_transposed {
                    for (j, &g) in dcr.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, ar, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                } else {
                    for (kk, &av) in ar.iter().enumerate() {
                        if av != 0.0 {
                            axpy(av, dcr, &mut db[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent lanes so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Range of output columns whose tap `kx` lands inside the input row.
    fn valid_out(&self, tap: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        // input = out*stride + tap - padding must lie in [0, extent_in)
        let lo = if tap >= self.padding { 0 } else { (self.padding - tap).div_ceil(self.stride) };
        let hi_num = extent_in + self.padding;
        let hi = if hi_num > tap { ((hi_num - tap - 1) / self.stride + 1).min(extent_out) } else { 0 };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.h_out * d.w_out];
    conv2d_loops(d, |xi, wi, oi| out[oi] += w[wi] * x[xi]);
    out
}

pub(crate) fn conv2d_backward(x: &[f64], w: &[f64], dout: &[f64], d: ConvDims, dx: Option<&mut [f64]>, dw: Option<&mut [f64]>) {
    if let Some(dx) = dx {
        conv2d_loops(d, |xi, wi, oi| dx[xi] += w[wi] * dout[oi]);
    }
    if let Some(dw) = dw {
        conv2d_loops(d, |xi, wi, oi| dw[wi] += x[xi] * dout[oi]);
    }
}

/// Visits every (input, weight, output) flat-index triple of a strided,
/// zero-padded cross-correlation.
#[inline]
fn conv2d_loops(d: ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    for n in 0..d.n {
        for co in 0..d.c_out {
            let obase = (n * d.c_out + co) * d.h_out * d.w_out;
            for ci in 0..d.c_in {
                let xbase = (n * d.c_in + ci) * d.h * d.w;
                let wbase = (co * d.c_in + ci) * d.k * d.k;
                for ky in 0..d.k {
                    let (oy_lo, oy_hi) = d.valid_out(ky, d.h, d.h_out);
                    for kx in 0..d.k {
                        let (ox_lo, ox_hi) = d.valid_out(kx, d.w, d.w_out);
                        let wi = wbase + ky * d.k + kx;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.padding;
                            let xrow = xbase + iy * d.w;
                            let orow = obase + oy * d.w_out;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.padding;
                                f(xrow + ix, wi, orow + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One bilinear lookup in pixel coordinates on a channel-last `[H, W, C]` map,
/// with coordinates clamped to the pixel grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the coordinate was strictly inside the grid along each axis
    /// (clamped coordinates carry no coordinate gradient).
    pub inside_x: bool,
    pub inside_y: bool,
}

impl BilinearTap {
    pub fn new(px: f64, py: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, inside_x) = axis_tap(px, w);
        let (y0, y1, fy, inside_y) = axis_tap(py, h);
        Self { x0, x1, y0, y1, fx, fy, inside_x, inside_y }
    }
}

fn axis_tap(p: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let inside = p >= 0.0 && p <= max;
    let pc = p.clamp(0.0, max);
    let i0 = (pc.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, pc - i0 as f64, inside)
}

pub(crate) fn bilinear_forward(map: &[f64], points: &[f64], batch: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * p * c];
    for b in 0..batch {
        let m = &map[b * h * w * c..(b + 1) * h * w * c];
        for q in 0..p {
            let pi = (b * p + q) * 2;
            let t = BilinearTap::new(points[pi] * w as f64 - 0.5, points[pi + 1] * h as f64 - 0.5, h, w);
            let o = &mut out[(b * p + q) * c..(b * p + q + 1) * c];
            let corners = [
                ((1.0 - t.fx) * (1.0 - t.fy), t.y0, t.x0),
                (t.fx * (1.0 - t.fy), t.y0, t.x1),
                ((1.0 - t.fx) * t.fy, t.y1, t.x0),
                (t.fx * t.fy, t.y1, t.x1),
            ];
            for (wt, y, x) in corners {
                if wt != 0.0 {
                    axpy(wt, &m[(y * w + x) * c..(y * w + x + 1) * c], o);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward(
    map: &[f64],
    points: &[f64],
    dout: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
    mut dmap: Option<&mut [f64]>,
    mut dpoints: Option<&mut [f64]>,
) {
    for b in 0..batch {
        let mbase = b * h * w * c;
        for q in 0..p {
            let pi = (b * p + q) * 2;
            let t = BilinearTap::new(points[pi] * w as f64 - 0.5, points[pi + 1] * h as f64 - 0.5, h, w);
            let g = &dout[(b * p + q) * c..(b * p + q + 1) * c];
            let idx = |y: usize, x: usize| mbase + (y * w + x) * c;
            if let Some(dm) = dmap.as_deref_mut() {
                let corners = [
                    ((1.0 - t.fx) * (1.0 - t.fy), t.y0, t.x0),
                    (t.fx * (1.0 - t.fy), t.y0, t.x1),
                    ((1.0 - t.fx) * t.fy, t.y1, t.x0),
                    (t.fx * t.fy, t.y1, t.x1),
                ];
                for (wt, y, x) in corners {
                    if wt != 0.0 {
                        axpy(wt, g, &mut dm[idx(y, x)..idx(y, x) + c]);
                    }
                }
            }
            if let Some(dp) = dpoints.as_deref_mut() {
                let v00 = &map[idx(t.y0, t.x0)..idx(t.y0, t.x0) + c];
                let v01 = &map[idx(t.y0, t.x1)..idx(t.y0, t.x1) + c];
                let v10 = &map[idx(t.y1, t.x0)..idx(t.y1, t.x0) + c];
                let v11 = &map[idx(t.y1, t.x1)..idx(t.y1, t.x1) + c];
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ch in 0..c {
                    let dx = (1.0 - t.fy) * (v01[ch] - v00[ch]) + t.fy * (v11[ch] - v10[ch]);
                    let dy = (1.0 - t.fx) * (v10[ch] - v00[ch]) + t.fx * (v11[ch] - v01[ch]);
                    gx += g[ch] * dx;
                    gy += g[ch] * dy;
                }
                if t.inside_x {
                    dp[pi] += gx * w as f64;
                }
                if t.inside_y {
                    dp[pi + 1] += gy * h as f64;
                }
            }
        }
    }
}
