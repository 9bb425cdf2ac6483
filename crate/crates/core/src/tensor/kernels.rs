//! Raw slice-level kernels shared by the tape's forward and backward passes.
//!
//! All matmul variants accumulate into `out` so backward passes can reuse
//! them for gradient accumulation; callers zero `out` when they need a plain
//! product. Loop order keeps the innermost axis contiguous.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += aᵀ[m,k] * b[k,n], with a stored as [k,m]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
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

/// out[m,n] += a[m,k] * bᵀ[k,n], with b stored as [n,k]
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// How convolution taps that fall outside the input are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-bounds taps contribute zero.
    Zero,
    /// Out-of-bounds taps read the nearest edge pixel, so spatially constant
    /// inputs stay constant through the convolution.
    Clamp,
}

#[inline]
fn tap(coord: isize, len: usize, mode: PadMode) -> Option<usize> {
    if coord >= 0 && (coord as usize) < len {
        Some(coord as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Clamp => Some(coord.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Output-coordinate range whose input tap `o*stride + offset` stays inside
/// `[0, len)`: the branch-free interior of a convolution row.
#[inline]
fn in_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let hi_raw = len as isize - 1 - offset;
    if hi_raw < 0 {
        return (out_len.min(lo), out_len.min(lo));
    }
    let hi = (hi_raw as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2-D convolution on a [c_in, h, w] map with a [c_out, c_in, kh, kw] kernel.
/// `out` must be zeroed, sized [c_out, oh, ow] with oh = (h + 2p - kh)/s + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    out: &mut [f64],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), c_out * oh * ow);
    for co in 0..c_out {
        let obase = co * oh * ow;
        if let Some(bias) = b {
            out[obase..obase + oh * ow].fill(bias[co]);
        }
        for ci in 0..c_in {
            let xbase = ci * h * wd;
            let wbase = (co * c_in + ci) * kh * kw;
            for dy in 0..kh {
                let off_y = dy as isize - pad as isize;
                for dx in 0..kw {
                    let wv = w[wbase + dy * kw + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_x = dx as isize - pad as isize;
                    let (lo, hi) = in_range(ow, stride, off_x, wd);
                    for oy in 0..oh {
                        let Some(iy) = tap((oy * stride) as isize + off_y, h, mode) else {
                            continue;
                        };
                        let xrow = &x[xbase + iy * wd..xbase + iy * wd + wd];
                        let orow = &mut out[obase + oy * ow..obase + oy * ow + ow];
                        if lo < hi {
                            let start = ((lo * stride) as isize + off_x) as usize;
                            if stride == 1 {
                                let xs = &xrow[start..start + (hi - lo)];
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                let xs = &xrow[start..=start + (hi - lo - 1) * stride];
                                for (o, &xv) in
                                    orow[lo..hi].iter_mut().zip(xs.iter().step_by(stride))
                                {
                                    *o += wv * xv;
                                }
                            }
                        }
                        if mode == PadMode::Clamp {
                            let left = wv * xrow[0];
                            for o in &mut orow[..lo] {
                                *o += left;
                            }
                            let right = wv * xrow[wd - 1];
                            for o in &mut orow[hi..] {
                                *o += right;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv2d_forward`]: scatters into dx/dw/db when provided.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    if let Some(db) = db {
        for co in 0..c_out {
            let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
            db[co] += gplane.iter().sum::<f64>();
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for co in 0..c_out {
        let obase = co * oh * ow;
        for ci in 0..c_in {
            let xbase = ci * h * wd;
            let wbase = (co * c_in + ci) * kh * kw;
            for dy in 0..kh {
                let off_y = dy as isize - pad as isize;
                for dx_k in 0..kw {
                    let wv = w[wbase + dy * kw + dx_k];
                    let off_x = dx_k as isize - pad as isize;
                    let (lo, hi) = in_range(ow, stride, off_x, wd);
                    let mut wgrad = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = tap((oy * stride) as isize + off_y, h, mode) else {
                            continue;
                        };
                        let xrow = &x[xbase + iy * wd..xbase + iy * wd + wd];
                        let grow = &g[obase + oy * ow..obase + oy * ow + ow];
                        let dxrow = dx
                            .as_deref_mut()
                            .map(|dx| &mut dx[xbase + iy * wd..xbase + iy * wd + wd]);
                        match dxrow {
                            Some(dxrow) => {
                                if lo < hi {
                                    let start = ((lo * stride) as isize + off_x) as usize;
                                    if stride == 1 {
                                        let xs = &xrow[start..start + (hi - lo)];
                                        let dxs = &mut dxrow[start..start + (hi - lo)];
                                        for ((&gv, &xv), dxv) in
                                            grow[lo..hi].iter().zip(xs).zip(dxs)
                                        {
                                            wgrad += gv * xv;
                                            *dxv += gv * wv;
                                        }
                                    } else {
                                        let span = (hi - lo - 1) * stride;
                                        let xs = &xrow[start..=start + span];
                                        let dxs = &mut dxrow[start..=start + span];
                                        for ((&gv, &xv), dxv) in grow[lo..hi]
                                            .iter()
                                            .zip(xs.iter().step_by(stride))
                                            .zip(dxs.iter_mut().step_by(stride))
                                        {
                                            wgrad += gv * xv;
                                            *dxv += gv * wv;
                                        }
                                    }
                                }
                                if mode == PadMode::Clamp {
                                    for &gv in &grow[..lo] {
                                        wgrad += gv * xrow[0];
                                        dxrow[0] += gv * wv;
                                    }
                                    for &gv in &grow[hi..] {
                                        wgrad += gv * xrow[wd - 1];
                                        dxrow[wd - 1] += gv * wv;
                                    }
                                }
                            }
                            None => {
                                if lo < hi {
                                    let start = ((lo * stride) as isize + off_x) as usize;
                                    if stride == 1 {
                                        let xs = &xrow[start..start + (hi - lo)];
                                        for (&gv, &xv) in grow[lo..hi].iter().zip(xs) {
                                            wgrad += gv * xv;
                                        }
                                    } else {
                                        let span = (hi - lo - 1) * stride;
                                        let xs = &xrow[start..=start + span];
                                        for (&gv, &xv) in
                                            grow[lo..hi].iter().zip(xs.iter().step_by(stride))
                                        {
                                            wgrad += gv * xv;
                                        }
                                    }
                                }
                                if mode == PadMode::Clamp {
                                    for &gv in &grow[..lo] {
                                        wgrad += gv * xrow[0];
                                    }
                                    for &gv in &grow[hi..] {
                                        wgrad += gv * xrow[wd - 1];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[wbase + dy * kw + dx_k] += wgrad;
                    }
                }
            }
        }
    }
}
