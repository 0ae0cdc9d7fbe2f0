//! Numeric forward/adjoint kernels for the spatial primitives.
//!
//! All kernels are rank-generic over 1..=3 spatial axes and operate on
//! `[batch, channels, spatial...]` tensors. Convolutions use zero padding of
//! `(k-1)/2` so the output spatial extent is `ceil(in/stride)`.

use super::tensor::{next_index, strides_of, Scalar, Tensor};

/// Per-axis output ranges `[lo, hi)` for which `o*stride + off` stays inside
/// the input; `None` when any axis is empty.
fn tap_ranges(
    out_sp: &[usize],
    in_sp: &[usize],
    off: &[isize],
    stride: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut lo = Vec::with_capacity(out_sp.len());
    let mut hi = Vec::with_capacity(out_sp.len());
    for a in 0..out_sp.len() {
        let l = if off[a] < 0 {
            ((-off[a]) as usize).div_ceil(stride)
        } else {
            0
        };
        let last_in = in_sp[a] as isize - 1 - off[a];
        if last_in < 0 {
            return None;
        }
        let h = (out_sp[a]).min(last_in as usize / stride + 1);
        if l >= h {
            return None;
        }
        lo.push(l);
        hi.push(h);
    }
    Some((lo, hi))
}

/// Visit row starts for every combination of the outer spatial axes within
/// `[lo, hi)`, yielding flat offsets of the row origin (at the last axis' lo)
/// into the output and input planes.
fn for_each_row_pair(
    out_sp: &[usize],
    in_sp: &[usize],
    lo: &[usize],
    hi: &[usize],
    off: &[isize],
    stride: usize,
    mut f: impl FnMut(usize, usize),
) {
    let r = out_sp.len();
    let out_str = strides_of(out_sp);
    let in_str = strides_of(in_sp);
    let row_o = lo[r - 1];
    let row_i = (row_o * stride) as isize + off[r - 1];
    let mut o = lo[..r - 1].to_vec();
    loop {
        let mut ob = row_o;
        let mut ib = row_i as usize;
        for a in 0..r - 1 {
            ob += o[a] * out_str[a];
            ib += ((o[a] * stride) as isize + off[a]) as usize * in_str[a];
        }
        f(ob, ib);
        // advance outer index within [lo, hi)
        let mut done = true;
        for a in (0..r - 1).rev() {
            o[a] += 1;
            if o[a] < hi[a] {
                done = false;
                break;
            }
            o[a] = lo[a];
        }
        if done {
            break;
        }
    }
}

fn conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> (usize, usize, usize, Vec<usize>, usize, Vec<usize>) {
    let xs = x.shape();
    assert!(
        xs.len() >= 3 && xs.len() <= 5,
        "conv input must be [n, c, spatial(1..=3)], got {:?}",
        xs
    );
    let (n, ci) = (xs[0], xs[1]);
    let in_sp = xs[2..].to_vec();
    let r = in_sp.len();
    let ws = w.shape();
    assert_eq!(ws.len(), 2 + r, "conv kernel rank mismatch: {:?}", ws);
    let co = ws[0];
    assert_eq!(ws[1], ci, "conv channel mismatch: x {:?} w {:?}", xs, ws);
    let k = ws[2];
    assert!(
        ws[2..].iter().all(|&d| d == k) && k % 2 == 1,
        "conv kernel must be odd and equal per axis, got {:?}",
        ws
    );
    assert_eq!(b.shape(), &[co], "conv bias must be [co]");
    assert!(stride >= 1, "conv stride must be >= 1");
    let out_sp: Vec<usize> = in_sp.iter().map(|&d| d.div_ceil(stride)).collect();
    (n, ci, co, in_sp, k, out_sp)
}

/// Enumerate kernel taps as (flat index within one [ci] kernel slice, offsets).
fn conv_taps(k: usize, r: usize) -> Vec<(usize, Vec<isize>)> {
    let pad = (k as isize - 1) / 2;
    let dims = vec![k; r];
    let mut idx = vec![0usize; r];
    let mut taps = Vec::with_capacity(k.pow(r as u32));
    let mut flat = 0usize;
    loop {
        let off: Vec<isize> = idx.iter().map(|&j| j as isize - pad).collect();
        taps.push((flat, off));
        flat += 1;
        if !next_index(&mut idx, &dims) {
            break;
        }
    }
    taps
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let (n, ci, co, in_sp, k, out_sp) = conv_shapes(x, w, b, stride);
    let in_vox: usize = in_sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let ksz = k.pow(in_sp.len() as u32);
    let taps = conv_taps(k, in_sp.len());
    let row = out_sp[out_sp.len() - 1];

    let mut out_shape = vec![n, co];
    out_shape.extend_from_slice(&out_sp);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();

    for ni in 0..n {
        for c_out in 0..co {
            let plane = &mut od[(ni * co + c_out) * out_vox..][..out_vox];
            plane.fill(bd[c_out]);
            for c_in in 0..ci {
                let xplane = &xd[(ni * ci + c_in) * in_vox..][..in_vox];
                let wbase = (c_out * ci + c_in) * ksz;
                for (flat, off) in &taps {
                    let wj = wd[wbase + flat];
                    if wj == T::zero() {
                        continue;
                    }
                    if let Some((lo, hi)) = tap_ranges(&out_sp, &in_sp, off, stride) {
                        let span = hi[hi.len() - 1] - lo[lo.len() - 1];
                        let _ = row;
                        for_each_row_pair(&out_sp, &in_sp, &lo, &hi, off, stride, |ob, ib| {
                            for i in 0..span {
                                plane[ob + i] = plane[ob + i] + wj * xplane[ib + i * stride];
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of `conv_forward` with respect to input, kernel, and bias.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, co, in_sp, k, out_sp) = conv_shapes(x, w, b, stride);
    let in_vox: usize = in_sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let ksz = k.pow(in_sp.len() as u32);
    let taps = conv_taps(k, in_sp.len());

    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(b.shape());
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();

    for ni in 0..n {
        for c_out in 0..co {
            let gplane = &gd[(ni * co + c_out) * out_vox..][..out_vox];
            let acc: T = gplane.iter().copied().sum();
            gb.data_mut()[c_out] = gb.data_mut()[c_out] + acc;
            for c_in in 0..ci {
                let wbase = (c_out * ci + c_in) * ksz;
                for (flat, off) in &taps {
                    if let Some((lo, hi)) = tap_ranges(&out_sp, &in_sp, off, stride) {
                        let span = hi[hi.len() - 1] - lo[lo.len() - 1];
                        let wj = wd[wbase + flat];
                        let xplane = &xd[(ni * ci + c_in) * in_vox..][..in_vox];
                        let gxplane = (ni * ci + c_in) * in_vox;
                        let mut wacc = T::zero();
                        let gxd = gx.data_mut();
                        for_each_row_pair(&out_sp, &in_sp, &lo, &hi, off, stride, |ob, ib| {
                            for i in 0..span {
                                let g = gplane[ob + i];
                                wacc = wacc + g * xplane[ib + i * stride];
                                let xi = gxplane + ib + i * stride;
                                gxd[xi] = gxd[xi] + wj * g;
                            }
                        });
                        let gwd = gw.data_mut();
                        gwd[wbase + flat] = gwd[wbase + flat] + wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel sum over a centered `window^rank` box, truncated at the edges.
/// Self-adjoint: the backward pass is the same box sum applied to the adjoint.
pub fn box_sum<T: Scalar>(x: &Tensor<T>, window: usize) -> Tensor<T> {
    let xs = x.shape();
    assert!(xs.len() >= 3, "box_sum input must be [n, c, spatial...]");
    assert!(window % 2 == 1, "box window must be odd");
    let (n, c) = (xs[0], xs[1]);
    let sp = xs[2..].to_vec();
    let vox: usize = sp.iter().product();
    let taps = conv_taps(window, sp.len());

    let mut out = Tensor::zeros(xs);
    let od = out.data_mut();
    let xd = x.data();
    for plane in 0..n * c {
        let xplane = &xd[plane * vox..][..vox];
        let oplane = &mut od[plane * vox..][..vox];
        for (_, off) in &taps {
            if let Some((lo, hi)) = tap_ranges(&sp, &sp, off, 1) {
                let span = hi[hi.len() - 1] - lo[lo.len() - 1];
                for_each_row_pair(&sp, &sp, &lo, &hi, off, 1, |ob, ib| {
                    for i in 0..span {
                        oplane[ob + i] = oplane[ob + i] + xplane[ib + i];
                    }
                });
            }
        }
    }
    out
}

/// Non-overlapping average pooling; spatial dims must divide by `factor`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let xs = x.shape();
    assert!(xs.len() >= 3, "avg_pool input must be [n, c, spatial...]");
    let (n, c) = (xs[0], xs[1]);
    let sp = xs[2..].to_vec();
    for &d in &sp {
        assert!(
            d % factor == 0,
            "avg_pool dims {:?} not divisible by {}",
            sp,
            factor
        );
    }
    let out_sp: Vec<usize> = sp.iter().map(|&d| d / factor).collect();
    let r = sp.len();
    let in_vox: usize = sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let in_str = strides_of(&sp);
    let out_dims_full = [vec![n, c], out_sp.clone()].concat();

    let block = vec![factor; r];
    let inv = T::from_f64(1.0 / (factor.pow(r as u32) as f64));
    let mut out = Tensor::zeros(&out_dims_full);
    let od = out.data_mut();
    let xd = x.data();
    for plane in 0..n * c {
        let xplane = &xd[plane * in_vox..][..in_vox];
        let oplane = &mut od[plane * out_vox..][..out_vox];
        let mut oidx = vec![0usize; r];
        let mut flat = 0usize;
        loop {
            let base: usize = (0..r).map(|a| oidx[a] * factor * in_str[a]).sum();
            let mut acc = T::zero();
            let mut bidx = vec![0usize; r];
            loop {
                let p: usize = (0..r).map(|a| bidx[a] * in_str[a]).sum();
                acc = acc + xplane[base + p];
                if !next_index(&mut bidx, &block) {
                    break;
                }
            }
            oplane[flat] = acc * inv;
            flat += 1;
            if !next_index(&mut oidx, &out_sp) {
                break;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(
    x_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, c) = (x_shape[0], x_shape[1]);
    let sp = x_shape[2..].to_vec();
    let r = sp.len();
    let out_sp: Vec<usize> = sp.iter().map(|&d| d / factor).collect();
    let in_vox: usize = sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let in_str = strides_of(&sp);
    let inv = T::from_f64(1.0 / (factor.pow(r as u32) as f64));
    let block = vec![factor; r];

    let mut gx = Tensor::zeros(x_shape);
    let gxd = gx.data_mut();
    let gd = grad_out.data();
    for plane in 0..n * c {
        let gplane = &gd[plane * out_vox..][..out_vox];
        let xplane = &mut gxd[plane * in_vox..][..in_vox];
        let mut oidx = vec![0usize; r];
        let mut flat = 0usize;
        loop {
            let g = gplane[flat] * inv;
            let base: usize = (0..r).map(|a| oidx[a] * factor * in_str[a]).sum();
            let mut bidx = vec![0usize; r];
            loop {
                let p: usize = (0..r).map(|a| bidx[a] * in_str[a]).sum();
                xplane[base + p] = xplane[base + p] + g;
                if !next_index(&mut bidx, &block) {
                    break;
                }
            }
            flat += 1;
            if !next_index(&mut oidx, &out_sp) {
                break;
            }
        }
    }
    gx
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn nearest_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let xs = x.shape();
    assert!(xs.len() >= 3, "upsample input must be [n, c, spatial...]");
    let (n, c) = (xs[0], xs[1]);
    let sp = xs[2..].to_vec();
    let r = sp.len();
    let out_sp: Vec<usize> = sp.iter().map(|&d| d * factor).collect();
    let in_vox: usize = sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let in_str = strides_of(&sp);

    let mut out = Tensor::zeros(&[vec![n, c], out_sp.clone()].concat());
    let od = out.data_mut();
    let xd = x.data();
    for plane in 0..n * c {
        let xplane = &xd[plane * in_vox..][..in_vox];
        let oplane = &mut od[plane * out_vox..][..out_vox];
        let mut oidx = vec![0usize; r];
        let mut flat = 0usize;
        loop {
            let src: usize = (0..r).map(|a| (oidx[a] / factor) * in_str[a]).sum();
            oplane[flat] = xplane[src];
            flat += 1;
            if !next_index(&mut oidx, &out_sp) {
                break;
            }
        }
    }
    out
}

pub fn nearest_upsample_backward<T: Scalar>(
    x_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, c) = (x_shape[0], x_shape[1]);
    let sp = x_shape[2..].to_vec();
    let r = sp.len();
    let out_sp: Vec<usize> = sp.iter().map(|&d| d * factor).collect();
    let in_vox: usize = sp.iter().product();
    let out_vox: usize = out_sp.iter().product();
    let in_str = strides_of(&sp);

    let mut gx = Tensor::zeros(x_shape);
    let gxd = gx.data_mut();
    let gd = grad_out.data();
    for plane in 0..n * c {
        let gplane = &gd[plane * out_vox..][..out_vox];
        let xplane = &mut gxd[plane * in_vox..][..in_vox];
        let mut oidx = vec![0usize; r];
        let mut flat = 0usize;
        loop {
            let src: usize = (0..r).map(|a| (oidx[a] / factor) * in_str[a]).sum();
            xplane[src] = xplane[src] + gplane[flat];
            flat += 1;
            if !next_index(&mut oidx, &out_sp) {
                break;
            }
        }
    }
    gx
}

/// Corner data for one interpolation site: per-axis floor index, fraction,
/// and whether the raw coordinate was clamped (derivative suppressed).
struct InterpSite {
    i0: Vec<usize>,
    t: Vec<f64>,
    live: Vec<bool>,
}

fn interp_site<T: Scalar>(pos: &[T], in_sp: &[usize]) -> InterpSite {
    let r = in_sp.len();
    let mut i0 = Vec::with_capacity(r);
    let mut t = Vec::with_capacity(r);
    let mut live = Vec::with_capacity(r);
    for a in 0..r {
        let max = (in_sp[a] - 1) as f64;
        let raw = pos[a].as_f64();
        let s = raw.clamp(0.0, max);
        live.push(raw > 0.0 && raw < max);
        let f = s.floor();
        i0.push(f as usize);
        t.push(s - f);
    }
    InterpSite { i0, t, live }
}

/// Pull-warp: `out(p) = img(p + field(p))`, multilinear interpolation with
/// clamp-to-edge. `img` is `[n, c, spatial...]`, `field` is
/// `[n, rank, spatial...]` in voxel units.
pub fn warp_forward<T: Scalar>(img: &Tensor<T>, field: &Tensor<T>) -> Tensor<T> {
    let (n, c, sp) = warp_shapes(img, field);
    let r = sp.len();
    let vox: usize = sp.iter().product();
    let in_str = strides_of(&sp);
    let corners = 1usize << r;

    let mut out = Tensor::zeros(img.shape());
    let od = out.data_mut();
    let id = img.data();
    let fd = field.data();
    let mut pidx = vec![0usize; r];
    for ni in 0..n {
        let fbase = ni * r * vox;
        pidx.iter_mut().for_each(|v| *v = 0);
        let mut flat = 0usize;
        loop {
            let mut pos = Vec::with_capacity(r);
            for a in 0..r {
                pos.push(T::from_f64(pidx[a] as f64) + fd[fbase + a * vox + flat]);
            }
            let site = interp_site(&pos, &sp);
            for corner in 0..corners {
                let mut wgt = 1.0f64;
                let mut src = 0usize;
                for a in 0..r {
                    let hi = (corner >> a) & 1 == 1;
                    wgt *= if hi { site.t[a] } else { 1.0 - site.t[a] };
                    let idx = (site.i0[a] + usize::from(hi)).min(sp[a] - 1);
                    src += idx * in_str[a];
                }
                if wgt == 0.0 {
                    continue;
                }
                let w = T::from_f64(wgt);
                for ch in 0..c {
                    let ibase = (ni * c + ch) * vox;
                    od[ibase + flat] = od[ibase + flat] + w * id[ibase + src];
                }
            }
            flat += 1;
            if !next_index(&mut pidx, &sp) {
                break;
            }
        }
    }
    out
}

fn warp_shapes<T: Scalar>(img: &Tensor<T>, field: &Tensor<T>) -> (usize, usize, Vec<usize>) {
    let is = img.shape();
    let fs = field.shape();
    assert!(is.len() >= 3, "warp image must be [n, c, spatial...]");
    let sp = is[2..].to_vec();
    let r = sp.len();
    assert_eq!(
        fs,
        [&[is[0], r][..], &sp[..]].concat(),
        "warp field shape {:?} does not match image {:?}",
        fs,
        is
    );
    (is[0], is[1], sp)
}

/// Adjoints of `warp_forward` with respect to the image and the field.
pub fn warp_backward<T: Scalar>(
    img: &Tensor<T>,
    field: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, sp) = warp_shapes(img, field);
    let r = sp.len();
    let vox: usize = sp.iter().product();
    let in_str = strides_of(&sp);
    let corners = 1usize << r;

    let mut gimg = Tensor::zeros(img.shape());
    let mut gfield = Tensor::zeros(field.shape());
    let id = img.data();
    let fd = field.data();
    let gd = grad_out.data();
    let gid = gimg.data_mut();
    let gfd = gfield.data_mut();
    let mut pidx = vec![0usize; r];
    for ni in 0..n {
        let fbase = ni * r * vox;
        pidx.iter_mut().for_each(|v| *v = 0);
        let mut flat = 0usize;
        loop {
            let mut pos = Vec::with_capacity(r);
            for a in 0..r {
                pos.push(T::from_f64(pidx[a] as f64) + fd[fbase + a * vox + flat]);
            }
            let site = interp_site(&pos, &sp);
            for corner in 0..corners {
                let mut wgt = 1.0f64;
                // d(weight)/d(t_a), zero where the coordinate clamped
                let mut dwgt = vec![1.0f64; r];
                let mut src = 0usize;
                for a in 0..r {
                    let hi = (corner >> a) & 1 == 1;
                    let wa = if hi { site.t[a] } else { 1.0 - site.t[a] };
                    let da = if hi { 1.0 } else { -1.0 };
                    wgt *= wa;
                    for (b, item) in dwgt.iter_mut().enumerate() {
                        *item *= if b == a { da } else { wa };
                    }
                    let idx = (site.i0[a] + usize::from(hi)).min(sp[a] - 1);
                    src += idx * in_str[a];
                }
                let w = T::from_f64(wgt);
                for ch in 0..c {
                    let ibase = (ni * c + ch) * vox;
                    let g = gd[ibase + flat];
                    if wgt != 0.0 {
                        gid[ibase + src] = gid[ibase + src] + w * g;
                    }
                    for (a, &dw) in dwgt.iter().enumerate() {
                        if site.live[a] && dw != 0.0 {
                            let fi = fbase + a * vox + flat;
                            gfd[fi] = gfd[fi] + T::from_f64(dw) * g * id[ibase + src];
                        }
                    }
                }
            }
            flat += 1;
            if !next_index(&mut pidx, &sp) {
                break;
            }
        }
    }
    (gimg, gfield)
}

/// Cubic B-spline basis at fraction `t` in `[0, 1)`.
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Number of control points per axis needed to cover `dim` voxels at the
/// given cell size, including the one-cell support margin on each side.
pub fn ffd_control_dim(dim: usize, spacing_vox: f64) -> usize {
    assert!(spacing_vox > 0.0, "control spacing must be positive");
    ((dim - 1) as f64 / spacing_vox).floor() as usize + 4
}

fn ffd_shapes<T: Scalar>(control: &Tensor<T>, out_sp: &[usize], spacing_vox: &[f64]) -> Vec<usize> {
    let cs = control.shape();
    let r = out_sp.len();
    assert_eq!(cs.len(), 1 + r, "control must be [rank, grid...]");
    assert_eq!(cs[0], r, "control components must equal rank");
    assert_eq!(spacing_vox.len(), r);
    for a in 0..r {
        let need = ffd_control_dim(out_sp[a], spacing_vox[a]);
        assert!(
            cs[1 + a] >= need,
            "control grid axis {} has {} points, needs {} to cover {} voxels",
            a,
            cs[1 + a],
            need,
            out_sp[a]
        );
    }
    cs[1..].to_vec()
}

/// Evaluate a cubic B-spline lattice of control displacements on the voxel
/// grid. Control point at array index `j` sits at position `(j - 1) * spacing`
/// so the lattice overhangs the image by one cell on each side. Output is
/// `[1, rank, spatial...]`; the map is linear in the control values.
pub fn ffd_interp_forward<T: Scalar>(
    control: &Tensor<T>,
    out_sp: &[usize],
    spacing_vox: &[f64],
) -> Tensor<T> {
    let grid = ffd_shapes(control, out_sp, spacing_vox);
    let r = out_sp.len();
    let vox: usize = out_sp.iter().product();
    let gvox: usize = grid.iter().product();
    let g_str = strides_of(&grid);
    let taps = 4usize.pow(r as u32);

    let mut out = Tensor::zeros(&[vec![1, r], out_sp.to_vec()].concat());
    let od = out.data_mut();
    let cd = control.data();
    let mut pidx = vec![0usize; r];
    let mut flat = 0usize;
    loop {
        let mut base = Vec::with_capacity(r);
        let mut wts = Vec::with_capacity(r);
        for a in 0..r {
            let u = pidx[a] as f64 / spacing_vox[a];
            let i = u.floor();
            base.push(i as usize);
            wts.push(bspline_weights(u - i));
        }
        for tap in 0..taps {
            let mut w = 1.0f64;
            let mut src = 0usize;
            let mut rest = tap;
            for a in 0..r {
                let l = rest % 4;
                rest /= 4;
                w *= wts[a][l];
                src += (base[a] + l) * g_str[a];
            }
            let wt = T::from_f64(w);
            for comp in 0..r {
                od[comp * vox + flat] = od[comp * vox + flat] + wt * cd[comp * gvox + src];
            }
        }
        flat += 1;
        if !next_index(&mut pidx, out_sp) {
            break;
        }
    }
    out
}

pub fn ffd_interp_backward<T: Scalar>(
    control_shape: &[usize],
    out_sp: &[usize],
    spacing_vox: &[f64],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let grid = control_shape[1..].to_vec();
    let r = out_sp.len();
    let vox: usize = out_sp.iter().product();
    let gvox: usize = grid.iter().product();
    let g_str = strides_of(&grid);
    let taps = 4usize.pow(r as u32);

    let mut gc = Tensor::zeros(control_shape);
    let gcd = gc.data_mut();
    let gd = grad_out.data();
    let mut pidx = vec![0usize; r];
    let mut flat = 0usize;
    loop {
        let mut base = Vec::with_capacity(r);
        let mut wts = Vec::with_capacity(r);
        for a in 0..r {
            let u = pidx[a] as f64 / spacing_vox[a];
            let i = u.floor();
            base.push(i as usize);
            wts.push(bspline_weights(u - i));
        }
        for tap in 0..taps {
            let mut w = 1.0f64;
            let mut src = 0usize;
            let mut rest = tap;
            for a in 0..r {
                let l = rest % 4;
                rest /= 4;
                w *= wts[a][l];
                src += (base[a] + l) * g_str[a];
            }
            let wt = T::from_f64(w);
            for comp in 0..r {
                let gi = comp * gvox + src;
                gcd[gi] = gcd[gi] + wt * gd[comp * vox + flat];
            }
        }
        flat += 1;
        if !next_index(&mut pidx, out_sp) {
            break;
        }
    }
    gc
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn mm_nn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..][..n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn mm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let orow = &mut out[i * n..][..n];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            orow[j] = orow[j] + acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn mm_tn<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..][..m];
        let brow = &b[l * n..][..n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..][..n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conv_identity_kernel_passes_through() {
        // k=1, single channel, weight 1, bias 0
        let x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        let y = conv_forward(&x, &w, &b, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_manual_3x3() {
        // 3x3 mean kernel on a 3x3 image, zero padding: center = mean of all
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let b = Tensor::zeros(&[1]);
        let y = conv_forward(&x, &w, &b, 1);
        assert_abs_diff_eq!(y.data()[4], 45.0 / 9.0, epsilon = 1e-12);
        // corner (0,0): taps over {1,2,4,5}
        assert_abs_diff_eq!(y.data()[0], (1.0 + 2.0 + 4.0 + 5.0) / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn conv_stride_two_output_is_ceil() {
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 6]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let y = conv_forward(&x, &w, &b, 2);
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn box_sum_counts_neighbors() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let y = box_sum(&x, 3);
        // corner has 4 in-bounds neighbors, edge 6, center 9
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn avg_pool_blocks() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let y = avg_pool(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_abs_diff_eq!(y.data()[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn upsample_then_pool_roundtrips() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.5);
        let up = nearest_upsample(&x, 2);
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        let down = avg_pool(&up, 2);
        assert_eq!(down.data(), x.data());
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin());
        let field = Tensor::zeros(&[1, 2, 4, 4]);
        let out = warp_forward(&img, &field);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn warp_half_pixel_shift_averages() {
        // shift sampling by +0.5 along the last axis: out = (x[i] + x[i+1]) / 2
        let img = Tensor::new(vec![1, 1, 1, 4], vec![0.0f64, 1.0, 2.0, 3.0]);
        let field = {
            let mut f = Tensor::zeros(&[1, 2, 1, 4]);
            for v in f.data_mut()[4..8].iter_mut() {
                *v = 0.5;
            }
            f
        };
        let out = warp_forward(&img, &field);
        assert_abs_diff_eq!(out.data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.data()[2], 2.5, epsilon = 1e-12);
        // last voxel clamps to the edge value
        assert_abs_diff_eq!(out.data()[3], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bspline_partition_of_unity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let w = bspline_weights(t);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ffd_constant_control_gives_constant_field() {
        let sp = [8, 8];
        let spacing = [3.0, 3.0];
        let g = ffd_control_dim(8, 3.0);
        let control = Tensor::full(&[2, g, g], 0.7f64);
        let field = ffd_interp_forward(&control, &sp, &spacing);
        for &v in field.data() {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = vec![0.0; 4];
        mm_nn(&a, 2, 3, &b, 2, &mut nn);
        // a^T stored as 3x2 -> tn with a_t gives same product
        let a_t = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = vec![0.0; 4];
        mm_tn(&a_t, 3, 2, &b, 2, &mut tn);
        assert_eq!(nn, tn);
        // b^T stored as 2x3 -> nt gives same product
        let b_t = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = vec![0.0; 4];
        mm_nt(&a, 2, 3, &b_t, 2, &mut nt);
        assert_eq!(nn, nt);
        assert_eq!(nn, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
