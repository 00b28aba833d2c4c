//! Channels-first `[T, C, H, W]` convolution and pooling kernels for the
//! (2+1)D video stack. The spatial kernel reuses work across consecutive
//! identical frames; the temporal kernel reads frames through explicit
//! windows so callers can convolve a deduplicated clip.

use super::kernels::{axpy, dot};

/// `same[t]` is true iff frame `t` equals frame `t − 1` bitwise.
fn repeated_frames(x: &[f64], frames: usize) -> Vec<bool> {
    let size = x.len() / frames.max(1);
    (0..frames)
        .map(|t| t > 0 && x[t * size..(t + 1) * size] == x[(t - 1) * size..t * size])
        .collect()
}

/// Valid output and input column ranges for horizontal tap offset `d`.
fn shifted(len: usize, d: isize) -> (usize, usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo), (lo as isize + d) as usize)
}

#[derive(Clone, Copy)]
pub(crate) struct SpatialDims {
    pub frames: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub cout: usize,
}

impl SpatialDims {
    fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.cin + ci) * self.cout + co
    }
}

/// Calls `f(y, iy, out_cols, in_start)` for every valid row pairing of tap `(ky, kx)`.
fn for_tap_rows(d: &SpatialDims, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, (usize, usize), usize)) {
    let pad = (d.k / 2) as isize;
    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
    let (x0, x1, xi) = shifted(d.w, dx);
    if x0 == x1 {
        return;
    }
    for y in 0..d.h {
        let iy = y as isize + dy;
        if iy < 0 || iy >= d.h as isize {
            continue;
        }
        f(y, iy as usize, (x0, x1), xi);
    }
}

/// Same-padded `k×k` convolution of each frame.
pub(crate) fn spatial_forward(x: &[f64], wt: &[f64], b: &[f64], d: SpatialDims) -> Vec<f64> {
    let (isz, osz, plane) = (d.cin * d.h * d.w, d.cout * d.h * d.w, d.h * d.w);
    let same = repeated_frames(x, d.frames);
    let mut out = vec![0.0; d.frames * osz];
    for t in 0..d.frames {
        if same[t] {
            out.copy_within((t - 1) * osz..t * osz, t * osz);
            continue;
        }
        let xf = &x[t * isz..(t + 1) * isz];
        let of = &mut out[t * osz..(t + 1) * osz];
        for co in 0..d.cout {
            let op = &mut of[co * plane..(co + 1) * plane];
            op.fill(b[co]);
            for ci in 0..d.cin {
                let ip = &xf[ci * plane..(ci + 1) * plane];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = wt[d.weight(ky, kx, ci, co)];
                        if wv == 0.0 {
                            continue;
                        }
                        for_tap_rows(&d, ky, kx, |y, iy, (x0, x1), xi| {
                            axpy(wv, &ip[iy * d.w + xi..iy * d.w + xi + x1 - x0], &mut op[y * d.w + x0..y * d.w + x1]);
                        });
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn spatial_backward(x: &[f64], wt: &[f64], g: &[f64], d: SpatialDims, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (isz, osz, plane) = (d.cin * d.h * d.w, d.cout * d.h * d.w, d.h * d.w);
    let db = needs[2].then(|| {
        let mut db = vec![0.0; d.cout];
        for gf in g.chunks_exact(osz) {
            for (co, gp) in gf.chunks_exact(plane).enumerate() {
                db[co] += gp.iter().sum::<f64>();
            }
        }
        db
    });
    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    if let Some(dx) = dx.as_mut() {
        for t in 0..d.frames {
            let gf = &g[t * osz..(t + 1) * osz];
            let df = &mut dx[t * isz..(t + 1) * isz];
            for ci in 0..d.cin {
                let dp = &mut df[ci * plane..(ci + 1) * plane];
                for co in 0..d.cout {
                    let gp = &gf[co * plane..(co + 1) * plane];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let wv = wt[d.weight(ky, kx, ci, co)];
                            for_tap_rows(&d, ky, kx, |y, iy, (x0, x1), xi| {
                                axpy(wv, &gp[y * d.w + x0..y * d.w + x1], &mut dp[iy * d.w + xi..iy * d.w + xi + x1 - x0]);
                            });
                        }
                    }
                }
            }
        }
    }
    let dw = needs[1].then(|| {
        let mut dw = vec![0.0; wt.len()];
        let same = repeated_frames(x, d.frames);
        let mut gsum = vec![0.0; osz];
        let mut t = 0;
        while t < d.frames {
            let mut end = t + 1;
            gsum.copy_from_slice(&g[t * osz..(t + 1) * osz]);
            while end < d.frames && same[end] {
                axpy(1.0, &g[end * osz..(end + 1) * osz], &mut gsum);
                end += 1;
            }
            let xf = &x[t * isz..(t + 1) * isz];
            for ci in 0..d.cin {
                let ip = &xf[ci * plane..(ci + 1) * plane];
                for co in 0..d.cout {
                    let gp = &gsum[co * plane..(co + 1) * plane];
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let mut acc = 0.0;
                            for_tap_rows(&d, ky, kx, |y, iy, (x0, x1), xi| {
                                acc += dot(&ip[iy * d.w + xi..iy * d.w + xi + x1 - x0], &gp[y * d.w + x0..y * d.w + x1]);
                            });
                            dw[d.weight(ky, kx, ci, co)] += acc;
                        }
                    }
                }
            }
            t = end;
        }
        dw
    });
    vec![dx, dw, db]
}

/// Output frame `i` of a windowed temporal convolution reads input frame
/// `windows[i·k + tap]` through tap `tap`; `None` is a zero frame.
pub(crate) struct TemporalDims<'a> {
    pub cin: usize,
    pub pix: usize,
    pub k: usize,
    pub cout: usize,
    pub windows: &'a [Option<usize>],
}

impl TemporalDims<'_> {
    fn frames_out(&self) -> usize {
        self.windows.len() / self.k.max(1)
    }
}

/// Zero-padded sliding windows over `frames` frames for a `k`-tap kernel.
pub(crate) fn sliding_windows(frames: usize, k: usize) -> Vec<Option<usize>> {
    (0..frames)
        .flat_map(|t| (0..k).map(move |tap| (t + tap).checked_sub(k / 2).filter(|&s| s < frames)))
        .collect()
}

/// Per-pixel channel mixing across the frames named by each window.
pub(crate) fn temporal_forward(x: &[f64], wt: &[f64], b: &[f64], d: &TemporalDims) -> Vec<f64> {
    let (isz, osz) = (d.cin * d.pix, d.cout * d.pix);
    let mut out = vec![0.0; d.frames_out() * osz];
    for (of, window) in out.chunks_exact_mut(osz.max(1)).zip(d.windows.chunks_exact(d.k)) {
        for (co, op) in of.chunks_exact_mut(d.pix).enumerate() {
            op.fill(b[co]);
            for (tap, src) in window.iter().enumerate() {
                let Some(s) = *src else { continue };
                for ci in 0..d.cin {
                    let wv = wt[(tap * d.cin + ci) * d.cout + co];
                    axpy(wv, &x[s * isz + ci * d.pix..s * isz + (ci + 1) * d.pix], op);
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_backward(x: &[f64], wt: &[f64], g: &[f64], d: &TemporalDims, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (isz, osz) = (d.cin * d.pix, d.cout * d.pix);
    let db = needs[2].then(|| {
        let mut db = vec![0.0; d.cout];
        for gf in g.chunks_exact(osz) {
            for (co, gp) in gf.chunks_exact(d.pix).enumerate() {
                db[co] += gp.iter().sum::<f64>();
            }
        }
        db
    });
    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = needs[1].then(|| vec![0.0; wt.len()]);
    for (gf, window) in g.chunks_exact(osz).zip(d.windows.chunks_exact(d.k)) {
        for (tap, src) in window.iter().enumerate() {
            let Some(s) = *src else { continue };
            for ci in 0..d.cin {
                let xr = s * isz + ci * d.pix..s * isz + (ci + 1) * d.pix;
                for co in 0..d.cout {
                    let gp = &gf[co * d.pix..(co + 1) * d.pix];
                    let wi = (tap * d.cin + ci) * d.cout + co;
                    if let Some(dx) = dx.as_mut() {
                        axpy(wt[wi], gp, &mut dx[xr.clone()]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] += dot(&x[xr.clone()], gp);
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}

/// Non-overlapping `f×f` max pooling; returns values and source indices.
pub(crate) fn max_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let (mut best, mut at) = (f64::NEG_INFINITY, base + py * f * w + px * f);
                for dy in 0..f {
                    let row = base + (py * f + dy) * w + px * f;
                    for (i, &v) in x[row..row + f].iter().enumerate() {
                        if v > best {
                            best = v;
                            at = row + i;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    (out, argmax)
}
