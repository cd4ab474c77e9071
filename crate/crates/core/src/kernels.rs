//! Numeric kernels behind the graph ops: convolution, matrix multiply,
//! pooling, bilinear rotation, HSV color conversion, and the loss heads.
//!
//! Everything is plain f32 loops over row-major buffers. Parallel paths only
//! write disjoint output regions, so results are bitwise identical at any
//! thread count.

use rayon::prelude::*;

pub const HUE_MAX: f32 = 2.0 * std::f32::consts::PI;

/// Work threshold below which kernels stay single-threaded.
const PAR_MIN_FLOPS: usize = 2_000_000;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row_job = |i: usize, out_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[l * n..(l + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_MIN_FLOPS && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
}

/// da[m,k] += dout[m,n] * b^T ; db[k,n] += a^T * dout
pub fn matmul_backward(
    a: &[f32],
    b: &[f32],
    dout: &[f32],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    if let Some(da) = da {
        let row_job = |i: usize, da_row: &mut [f32]| {
            let dout_row = &dout[i * n..(i + 1) * n];
            for (l, dv) in da_row.iter_mut().enumerate() {
                let b_row = &b[l * n..(l + 1) * n];
                let mut acc = 0.0;
                for (x, y) in dout_row.iter().zip(b_row) {
                    acc += x * y;
                }
                *dv += acc;
            }
        };
        if m * k * n >= PAR_MIN_FLOPS && m > 1 {
            da.par_chunks_mut(k)
                .enumerate()
                .for_each(|(i, row)| row_job(i, row));
        } else {
            for (i, row) in da.chunks_mut(k).enumerate() {
                row_job(i, row);
            }
        }
    }
    if let Some(db) = db {
        // db rows are accumulated serially; each output row touched by all i.
        for i in 0..m {
            let dout_row = &dout[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (l, &av) in a_row.iter().enumerate() {
                if av != 0.0 {
                    let db_row = &mut db[l * n..(l + 1) * n];
                    for (d, &g) in db_row.iter_mut().zip(dout_row) {
                        *d += av * g;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d (stride 1, explicit zero padding)
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad - self.kw + 1
    }
}

/// Direct convolution; one image at a time so the batch can run in parallel.
pub fn conv2d(x: &[f32], w: &[f32], b: &[f32], d: &ConvDims, out: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_plane = d.in_h * d.in_w;
    let out_plane = oh * ow;
    let x_img = d.in_c * in_plane;
    let out_img = d.out_c * out_plane;

    let img_job = |n: usize, out_n: &mut [f32]| {
        let x_n = &x[n * x_img..(n + 1) * x_img];
        for co in 0..d.out_c {
            let out_co = &mut out_n[co * out_plane..(co + 1) * out_plane];
            out_co.fill(b[co]);
            for ci in 0..d.in_c {
                let x_c = &x_n[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = w[((co * d.in_c + ci) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi + kh) as isize - d.pad as isize;
                            if ii < 0 || ii >= d.in_h as isize {
                                continue;
                            }
                            let x_row = &x_c[ii as usize * d.in_w..(ii as usize + 1) * d.in_w];
                            let out_row = &mut out_co[oi * ow..(oi + 1) * ow];
                            let shift = kw as isize - d.pad as isize;
                            let (oj_lo, oj_hi) = valid_range(shift, ow, d.in_w);
                            for oj in oj_lo..oj_hi {
                                out_row[oj] += wv * x_row[(oj as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
    };

    let flops = d.batch * d.out_c * d.in_c * d.kh * d.kw * out_plane;
    if flops >= PAR_MIN_FLOPS && d.batch > 1 {
        out.par_chunks_mut(out_img)
            .enumerate()
            .for_each(|(n, chunk)| img_job(n, chunk));
    } else {
        for (n, chunk) in out.chunks_mut(out_img).enumerate() {
            img_job(n, chunk);
        }
    }
}

/// Output-column range for which `oj + shift` lands inside `[0, in_w)`.
fn valid_range(shift: isize, ow: usize, in_w: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((in_w as isize - shift).max(0) as usize).min(ow);
    (lo.min(hi), hi)
}

pub fn conv2d_backward_input(w: &[f32], dout: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_plane = d.in_h * d.in_w;
    let out_plane = oh * ow;
    let dx_img = d.in_c * in_plane;
    let dout_img = d.out_c * out_plane;

    let img_job = |n: usize, dx_n: &mut [f32]| {
        let dout_n = &dout[n * dout_img..(n + 1) * dout_img];
        for co in 0..d.out_c {
            let dout_co = &dout_n[co * out_plane..(co + 1) * out_plane];
            for ci in 0..d.in_c {
                let dx_c = &mut dx_n[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = w[((co * d.in_c + ci) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi + kh) as isize - d.pad as isize;
                            if ii < 0 || ii >= d.in_h as isize {
                                continue;
                            }
                            let dout_row = &dout_co[oi * ow..(oi + 1) * ow];
                            let dx_row =
                                &mut dx_c[ii as usize * d.in_w..(ii as usize + 1) * d.in_w];
                            let shift = kw as isize - d.pad as isize;
                            let (oj_lo, oj_hi) = valid_range(shift, ow, d.in_w);
                            for oj in oj_lo..oj_hi {
                                dx_row[(oj as isize + shift) as usize] += wv * dout_row[oj];
                            }
                        }
                    }
                }
            }
        }
    };

    let flops = d.batch * d.out_c * d.in_c * d.kh * d.kw * out_plane;
    if flops >= PAR_MIN_FLOPS && d.batch > 1 {
        dx.par_chunks_mut(dx_img)
            .enumerate()
            .for_each(|(n, chunk)| img_job(n, chunk));
    } else {
        for (n, chunk) in dx.chunks_mut(dx_img).enumerate() {
            img_job(n, chunk);
        }
    }
}

pub fn conv2d_backward_params(
    x: &[f32],
    dout: &[f32],
    d: &ConvDims,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_plane = d.in_h * d.in_w;
    let out_plane = oh * ow;
    let x_img = d.in_c * in_plane;
    let dout_img = d.out_c * out_plane;
    let w_per_co = d.in_c * d.kh * d.kw;

    // Parallel over output channels: each owns a disjoint slice of dw/db.
    let co_job = |co: usize, dw_co: &mut [f32], db_co: &mut f32| {
        for n in 0..d.batch {
            let x_n = &x[n * x_img..(n + 1) * x_img];
            let dout_co = &dout[n * dout_img + co * out_plane..n * dout_img + (co + 1) * out_plane];
            for v in dout_co {
                *db_co += v;
            }
            for ci in 0..d.in_c {
                let x_c = &x_n[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let mut acc = 0.0f32;
                        for oi in 0..oh {
                            let ii = (oi + kh) as isize - d.pad as isize;
                            if ii < 0 || ii >= d.in_h as isize {
                                continue;
                            }
                            let x_row = &x_c[ii as usize * d.in_w..(ii as usize + 1) * d.in_w];
                            let dout_row = &dout_co[oi * ow..(oi + 1) * ow];
                            let shift = kw as isize - d.pad as isize;
                            let (oj_lo, oj_hi) = valid_range(shift, ow, d.in_w);
                            for oj in oj_lo..oj_hi {
                                acc += dout_row[oj] * x_row[(oj as isize + shift) as usize];
                            }
                        }
                        dw_co[(ci * d.kh + kh) * d.kw + kw] += acc;
                    }
                }
            }
        }
    };

    let flops = d.batch * d.out_c * d.in_c * d.kh * d.kw * out_plane;
    if flops >= PAR_MIN_FLOPS && d.out_c > 1 {
        dw.par_chunks_mut(w_per_co)
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(|(co, (dw_co, db_co))| co_job(co, dw_co, db_co));
    } else {
        for (co, (dw_co, db_co)) in dw.chunks_mut(w_per_co).zip(db.iter_mut()).enumerate() {
            co_job(co, dw_co, db_co);
        }
    }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2
// ---------------------------------------------------------------------------

/// Returns per-output argmax offsets into the input plane for the backward pass.
pub fn maxpool2(x: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let x_p = &x[p * h * w..(p + 1) * h * w];
        let base = p * oh * ow;
        for oi in 0..oh {
            for oj in 0..ow {
                let i0 = 2 * oi * w + 2 * oj;
                let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cand[0];
                let mut best_v = x_p[cand[0]];
                for &c in &cand[1..] {
                    if x_p[c] > best_v {
                        best_v = x_p[c];
                        best = c;
                    }
                }
                out[base + oi * ow + oj] = best_v;
                arg[base + oi * ow + oj] = best as u32;
            }
        }
    }
}

pub fn maxpool2_backward(dout: &[f32], arg: &[u32], planes: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let dx_p = &mut dx[p * h * w..(p + 1) * h * w];
        let base = p * oh * ow;
        for o in 0..oh * ow {
            dx_p[arg[base + o] as usize] += dout[base + o];
        }
    }
}

// ---------------------------------------------------------------------------
// bilinear rotation about the image center
// ---------------------------------------------------------------------------

/// In-bounds bilinear taps and weights for a source position.
#[inline]
fn bilinear_taps(si: f32, sj: f32, side: usize) -> ([(isize, isize); 4], [f32; 4], f32, f32) {
    let i0 = si.floor();
    let j0 = sj.floor();
    let fi = si - i0;
    let fj = sj - j0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    let taps = [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)];
    let ws = [
        (1.0 - fi) * (1.0 - fj),
        (1.0 - fi) * fj,
        fi * (1.0 - fj),
        fi * fj,
    ];
    let _ = side;
    (taps, ws, fi, fj)
}

#[inline]
fn tap_value(x: &[f32], side: usize, i: isize, j: isize) -> f32 {
    if i < 0 || j < 0 || i >= side as isize || j >= side as isize {
        0.0
    } else {
        x[i as usize * side + j as usize]
    }
}

/// Rotate square planes by `theta` degrees (gather with the inverse map,
/// bilinear interpolation, zero fill outside the frame).
pub fn rotate(x: &[f32], planes: usize, side: usize, theta_deg: f32, out: &mut [f32]) {
    let t = theta_deg.to_radians();
    let (sin, cos) = t.sin_cos();
    let c = (side as f32 - 1.0) / 2.0;
    let plane = side * side;
    for p in 0..planes {
        let x_p = &x[p * plane..(p + 1) * plane];
        let out_p = &mut out[p * plane..(p + 1) * plane];
        for oi in 0..side {
            let di = oi as f32 - c;
            for oj in 0..side {
                let dj = oj as f32 - c;
                let si = cos * di - sin * dj + c;
                let sj = sin * di + cos * dj + c;
                let (taps, ws, _, _) = bilinear_taps(si, sj, side);
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += ws[k] * tap_value(x_p, side, taps[k].0, taps[k].1);
                }
                out_p[oi * side + oj] = acc;
            }
        }
    }
}

/// Backward for `rotate`: scatters into dx and accumulates d(theta in degrees).
pub fn rotate_backward(
    x: &[f32],
    dout: &[f32],
    planes: usize,
    side: usize,
    theta_deg: f32,
    dx: Option<&mut [f32]>,
    dtheta_deg: Option<&mut f32>,
) {
    let t = theta_deg.to_radians();
    let (sin, cos) = t.sin_cos();
    let c = (side as f32 - 1.0) / 2.0;
    let plane = side * side;
    let mut dtheta_rad = 0.0f32;
    let mut dx = dx;
    for p in 0..planes {
        let x_p = &x[p * plane..(p + 1) * plane];
        let dout_p = &dout[p * plane..(p + 1) * plane];
        let dx_p = dx.as_deref_mut().map(|d| &mut d[p * plane..(p + 1) * plane]);
        let mut dx_p = dx_p;
        for oi in 0..side {
            let di = oi as f32 - c;
            for oj in 0..side {
                let dj = oj as f32 - c;
                let si = cos * di - sin * dj + c;
                let sj = sin * di + cos * dj + c;
                let up = dout_p[oi * side + oj];
                if up == 0.0 {
                    continue;
                }
                let (taps, ws, fi, fj) = bilinear_taps(si, sj, side);
                if let Some(dx_p) = dx_p.as_deref_mut() {
                    for k in 0..4 {
                        let (ti, tj) = taps[k];
                        if ti >= 0 && tj >= 0 && ti < side as isize && tj < side as isize {
                            dx_p[ti as usize * side + tj as usize] += up * ws[k];
                        }
                    }
                }
                if dtheta_deg.is_some() {
                    let v00 = tap_value(x_p, side, taps[0].0, taps[0].1);
                    let v01 = tap_value(x_p, side, taps[1].0, taps[1].1);
                    let v10 = tap_value(x_p, side, taps[2].0, taps[2].1);
                    let v11 = tap_value(x_p, side, taps[3].0, taps[3].1);
                    let d_dsi = -(1.0 - fj) * v00 - fj * v01 + (1.0 - fj) * v10 + fj * v11;
                    let d_dsj = -(1.0 - fi) * v00 + (1.0 - fi) * v01 - fi * v10 + fi * v11;
                    let dsi_dt = -sin * di - cos * dj;
                    let dsj_dt = cos * di - sin * dj;
                    dtheta_rad += up * (d_dsi * dsi_dt + d_dsj * dsj_dt);
                }
            }
        }
    }
    if let Some(dt) = dtheta_deg {
        *dt += dtheta_rad.to_radians();
    }
}

// ---------------------------------------------------------------------------
// RGB <-> HSV (hue scaled to [0, 2*pi]); ties broken with priority R > G > B
// ---------------------------------------------------------------------------

const SECTOR: f32 = std::f32::consts::PI / 3.0;

/// Index of the max channel under R>G>B priority.
#[inline]
fn argmax_rgb(r: f32, g: f32, b: f32) -> usize {
    if r >= g && r >= b {
        0
    } else if g >= b {
        1
    } else {
        2
    }
}

/// Index of the min channel under R>G>B priority.
#[inline]
fn argmin_rgb(r: f32, g: f32, b: f32) -> usize {
    if r <= g && r <= b {
        0
    } else if g <= b {
        1
    } else {
        2
    }
}

/// Per-pixel RGB -> (H, S, V). Channel-planar layout: [N][3][H][W].
pub fn rgb_to_hsv(x: &[f32], batch: usize, plane: usize, out: &mut [f32]) {
    for n in 0..batch {
        let base = n * 3 * plane;
        for p in 0..plane {
            let r = x[base + p];
            let g = x[base + plane + p];
            let b = x[base + 2 * plane + p];
            let ch = [r, g, b];
            let mx = argmax_rgb(r, g, b);
            let mn = argmin_rgb(r, g, b);
            let v = ch[mx];
            let c = v - ch[mn];
            let s = if v > 0.0 { c / v } else { 0.0 };
            let h = if c > 0.0 {
                let h6 = match mx {
                    0 => {
                        let t = (g - b) / c;
                        if t < 0.0 {
                            t + 6.0
                        } else {
                            t
                        }
                    }
                    1 => (b - r) / c + 2.0,
                    _ => (r - g) / c + 4.0,
                };
                h6 * SECTOR
            } else {
                0.0
            };
            out[base + p] = h;
            out[base + plane + p] = s;
            out[base + 2 * plane + p] = v;
        }
    }
}

/// VJP of `rgb_to_hsv`; masks are recomputed from the cached RGB input.
pub fn rgb_to_hsv_backward(x: &[f32], dout: &[f32], batch: usize, plane: usize, dx: &mut [f32]) {
    for n in 0..batch {
        let base = n * 3 * plane;
        for p in 0..plane {
            let r = x[base + p];
            let g = x[base + plane + p];
            let b = x[base + 2 * plane + p];
            let ch = [r, g, b];
            let mx = argmax_rgb(r, g, b);
            let mn = argmin_rgb(r, g, b);
            let v = ch[mx];
            let c = v - ch[mn];
            let dh = dout[base + p];
            let ds = dout[base + plane + p];
            let dv = dout[base + 2 * plane + p];

            let mut d = [0.0f32; 3];
            d[mx] += dv;
            if v > 0.0 {
                // S = 1 - min/V
                d[mx] += ds * ch[mn] / (v * v);
                d[mn] += ds * (-1.0 / v);
            }
            if c > 0.0 && dh != 0.0 {
                let (num, i_a, i_b) = match mx {
                    0 => (g - b, 1, 2),
                    1 => (b - r, 2, 0),
                    _ => (r - g, 0, 1),
                };
                let k = SECTOR / c;
                d[i_a] += dh * k;
                d[i_b] -= dh * k;
                let dc = -dh * SECTOR * num / (c * c);
                d[mx] += dc;
                d[mn] -= dc;
            }
            dx[base + p] += d[0];
            dx[base + plane + p] += d[1];
            dx[base + 2 * plane + p] += d[2];
        }
    }
}

/// Per-pixel (H, S, V) -> RGB. Hue must lie in [0, 2*pi].
pub fn hsv_to_rgb(x: &[f32], batch: usize, plane: usize, out: &mut [f32]) {
    for n in 0..batch {
        let base = n * 3 * plane;
        for p in 0..plane {
            let h = x[base + p];
            let s = x[base + plane + p];
            let v = x[base + 2 * plane + p];
            let h6 = h / SECTOR;
            let sector = (h6.floor() as i32).clamp(0, 5) as usize;
            let f = h6 - sector as f32;
            let pv = v * (1.0 - s);
            let qv = v * (1.0 - s * f);
            let tv = v * (1.0 - s * (1.0 - f));
            let (r, g, b) = match sector {
                0 => (v, tv, pv),
                1 => (qv, v, pv),
                2 => (pv, v, tv),
                3 => (pv, qv, v),
                4 => (tv, pv, v),
                _ => (v, pv, qv),
            };
            out[base + p] = r;
            out[base + plane + p] = g;
            out[base + 2 * plane + p] = b;
        }
    }
}

/// VJP of `hsv_to_rgb`.
pub fn hsv_to_rgb_backward(x: &[f32], dout: &[f32], batch: usize, plane: usize, dx: &mut [f32]) {
    let df_dh = 1.0 / SECTOR;
    for n in 0..batch {
        let base = n * 3 * plane;
        for p in 0..plane {
            let h = x[base + p];
            let s = x[base + plane + p];
            let v = x[base + 2 * plane + p];
            let h6 = h / SECTOR;
            let sector = (h6.floor() as i32).clamp(0, 5) as usize;
            let f = h6 - sector as f32;

            // (dV, dS, dH) partials for each of the four possible outputs.
            // v: (1, 0, 0); p: (1-s, -v, 0); q: (1-s*f, -v*f, -v*s*df);
            // t: (1-s*(1-f), -v*(1-f), v*s*df)
            let part_v = (1.0, 0.0, 0.0);
            let part_p = (1.0 - s, -v, 0.0);
            let part_q = (1.0 - s * f, -v * f, -v * s * df_dh);
            let part_t = (1.0 - s * (1.0 - f), -v * (1.0 - f), v * s * df_dh);
            let (pr, pg, pb) = match sector {
                0 => (part_v, part_t, part_p),
                1 => (part_q, part_v, part_p),
                2 => (part_p, part_v, part_t),
                3 => (part_p, part_q, part_v),
                4 => (part_t, part_p, part_v),
                _ => (part_v, part_p, part_q),
            };
            let dr = dout[base + p];
            let dg = dout[base + plane + p];
            let db = dout[base + 2 * plane + p];
            dx[base + 2 * plane + p] += dr * pr.0 + dg * pg.0 + db * pb.0;
            dx[base + plane + p] += dr * pr.1 + dg * pg.1 + db * pb.1;
            dx[base + p] += dr * pr.2 + dg * pg.2 + db * pb.2;
        }
    }
}

// ---------------------------------------------------------------------------
// softmax cross-entropy and KL(softmax(p) || softmax(q))
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch. Returns the loss.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> f32 {
    let batch = labels.len();
    let mut total = 0.0f32;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f32>().ln();
        total += lse - row[y];
    }
    total / batch as f32
}

pub fn softmax_cross_entropy_backward(
    logits: &[f32],
    labels: &[usize],
    classes: usize,
    upstream: f32,
    dlogits: &mut [f32],
) {
    let batch = labels.len();
    let scale = upstream / batch as f32;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f32 = row.iter().map(|z| (z - m).exp()).sum();
        let drow = &mut dlogits[i * classes..(i + 1) * classes];
        for j in 0..classes {
            let p = (row[j] - m).exp() / denom;
            drow[j] += scale * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// Mean over the batch of KL(softmax(p_row) || softmax(q_row)).
pub fn kl_div_logits(p_logits: &[f32], q_logits: &[f32], batch: usize, classes: usize) -> f32 {
    let mut total = 0.0f32;
    let mut pb = vec![0.0f32; classes];
    let mut qb = vec![0.0f32; classes];
    for i in 0..batch {
        softmax_row(&p_logits[i * classes..(i + 1) * classes], &mut pb);
        softmax_row(&q_logits[i * classes..(i + 1) * classes], &mut qb);
        for j in 0..classes {
            if pb[j] > 0.0 {
                total += pb[j] * (pb[j].ln() - qb[j].max(1e-30).ln());
            }
        }
    }
    total / batch as f32
}

pub fn kl_div_logits_backward(
    p_logits: &[f32],
    q_logits: &[f32],
    batch: usize,
    classes: usize,
    upstream: f32,
    dp: Option<&mut [f32]>,
    dq: Option<&mut [f32]>,
) {
    let scale = upstream / batch as f32;
    let mut pb = vec![0.0f32; classes];
    let mut qb = vec![0.0f32; classes];
    let mut dp = dp;
    let mut dq = dq;
    for i in 0..batch {
        softmax_row(&p_logits[i * classes..(i + 1) * classes], &mut pb);
        softmax_row(&q_logits[i * classes..(i + 1) * classes], &mut qb);
        if let Some(dq) = dq.as_deref_mut() {
            for j in 0..classes {
                dq[i * classes + j] += scale * (qb[j] - pb[j]);
            }
        }
        if let Some(dp) = dp.as_deref_mut() {
            // d/dp_j of sum_k P_k (ln P_k - ln Q_k) = P_j (D_j - KL_row)
            let mut kl_row = 0.0f32;
            for j in 0..classes {
                if pb[j] > 0.0 {
                    kl_row += pb[j] * (pb[j].ln() - qb[j].max(1e-30).ln());
                }
            }
            for j in 0..classes {
                if pb[j] > 0.0 {
                    let dj = pb[j].ln() - qb[j].max(1e-30).ln();
                    dp[i * classes + j] += scale * pb[j] * (dj - kl_row);
                }
            }
        }
    }
}
