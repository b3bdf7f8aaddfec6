//! Numeric kernels behind the graph ops. Everything here works on raw
//! tensors; the graph wires forward and backward together.

use super::Tensor;

/// `c[m×n] = alpha·a·b + beta·c` with explicit strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_off: usize,
    (rsa, csa): (usize, usize),
    b: &[f64],
    b_off: usize,
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds of the furthest element touched in each operand
    if k > 0 {
        assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
        assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: every index reachable through the strides was bounds-checked above
    // and `c` is a distinct mutable borrow, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain row-major matrix product with optional transposes of either side.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k, sa) = if ta { (ac, ar, (1, ac)) } else { (ar, ac, (ac, 1)) };
    let (k2, n, sb) = if tb { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
    assert_eq!(k, k2, "matmul inner dims differ");
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), 0, sa, b.data(), 0, sb, 0.0, out.data_mut(), 0, (n, 1));
    out
}

struct ConvGeom {
    ci: usize,
    co: usize,
    taps: usize,
    k: usize,
    dims: [usize; 3],
    pdims: [usize; 3],
    padded: usize,
    q_min: usize,
    span: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor) -> Self {
        let ws = w.shape();
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(x.channels(), ci, "conv input channels differ from weight");
        assert!(k % 2 == 1, "conv kernel must be odd");
        let p = k / 2;
        let dims = x.spatial();
        let pdims = [dims[0] + 2 * p, dims[1] + 2 * p, dims[2] + 2 * p];
        let plane = pdims[1] * pdims[2];
        let padded = pdims[0] * plane;
        let q_min = p * plane + p * pdims[2] + p;
        let q_max = (dims[0] - 1 + p) * plane + (dims[1] - 1 + p) * pdims[2] + dims[2] - 1 + p;
        ConvGeom {
            ci,
            co,
            taps: k * k * k,
            k,
            dims,
            pdims,
            padded,
            q_min,
            span: q_max - q_min + 1,
        }
    }

    /// Linear offset of tap `t` relative to the output position in the padded grid.
    fn tap_offset(&self, t: usize) -> isize {
        let k = self.k;
        let p = (k / 2) as isize;
        let (dz, dy, dx) = ((t / (k * k)) as isize - p, ((t / k) % k) as isize - p, (t % k) as isize - p);
        let plane = (self.pdims[1] * self.pdims[2]) as isize;
        dz * plane + dy * self.pdims[2] as isize + dx
    }

    fn padded_index(&self, z: usize, y: usize, x: usize) -> usize {
        let p = self.k / 2;
        ((z + p) * self.pdims[1] + y + p) * self.pdims[2] + x + p
    }

    fn pad(&self, x: &Tensor) -> Vec<f64> {
        let [nz, ny, nx] = self.dims;
        let vol = nz * ny * nx;
        let mut out = vec![0.0; self.ci * self.padded];
        for c in 0..self.ci {
            let src = &x.data()[c * vol..(c + 1) * vol];
            let dst = &mut out[c * self.padded..(c + 1) * self.padded];
            for z in 0..nz {
                for y in 0..ny {
                    let s = (z * ny + y) * nx;
                    let d = self.padded_index(z, y, 0);
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        out
    }
}

/// Same-padded, stride-1 3D convolution. `w` is `[co, ci, k, k, k]`, `b` is `[co]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let g = ConvGeom::new(x, w);
    let [nz, ny, nx] = g.dims;
    let vol = nz * ny * nx;
    let mut out = Tensor::zeros(&[g.co, nz, ny, nx]);
    if g.k == 1 {
        gemm(g.co, g.ci, vol, w.data(), 0, (g.ci, 1), x.data(), 0, (vol, 1), 0.0, out.data_mut(), 0, (vol, 1));
    } else {
        let xp = g.pad(x);
        let mut full = vec![0.0; g.co * g.span];
        let wrow = g.ci * g.taps;
        for t in 0..g.taps {
            let off = (g.q_min as isize + g.tap_offset(t)) as usize;
            gemm(
                g.co, g.ci, g.span,
                w.data(), t, (wrow, g.taps),
                &xp, off, (g.padded, 1),
                1.0, &mut full, 0, (g.span, 1),
            );
        }
        let od = out.data_mut();
        for c in 0..g.co {
            for z in 0..nz {
                for y in 0..ny {
                    let q = g.padded_index(z, y, 0) - g.q_min;
                    let d = c * vol + (z * ny + y) * nx;
                    od[d..d + nx].copy_from_slice(&full[c * g.span + q..c * g.span + q + nx]);
                }
            }
        }
    }
    let od = out.data_mut();
    for (c, &bias) in b.data().iter().enumerate() {
        for v in &mut od[c * vol..(c + 1) * vol] {
            *v += bias;
        }
    }
    out
}

/// Gradients of [`conv3d`]: returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv3d_backward(x: &Tensor, w: &Tensor, dout: &Tensor, want_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let g = ConvGeom::new(x, w);
    let [nz, ny, nx] = g.dims;
    let vol = nz * ny * nx;
    let mut dw = Tensor::zeros(w.shape());
    let db = Tensor::from_vec(
        &[g.co],
        (0..g.co).map(|c| dout.data()[c * vol..(c + 1) * vol].iter().sum()).collect(),
    );
    if g.k == 1 {
        gemm(g.co, vol, g.ci, dout.data(), 0, (vol, 1), x.data(), 0, (1, vol), 0.0, dw.data_mut(), 0, (g.ci, 1));
        let dx = want_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(g.ci, g.co, vol, w.data(), 0, (1, g.ci), dout.data(), 0, (vol, 1), 0.0, dx.data_mut(), 0, (vol, 1));
            dx
        });
        return (dx, dw, db);
    }

    let xp = g.pad(x);
    let mut full = vec![0.0; g.co * g.span];
    for c in 0..g.co {
        for z in 0..nz {
            for y in 0..ny {
                let q = g.padded_index(z, y, 0) - g.q_min;
                let s = c * vol + (z * ny + y) * nx;
                full[c * g.span + q..c * g.span + q + nx].copy_from_slice(&dout.data()[s..s + nx]);
            }
        }
    }
    let wrow = g.ci * g.taps;
    let mut dxp = if want_dx { vec![0.0; g.ci * g.padded] } else { Vec::new() };
    for t in 0..g.taps {
        let off = (g.q_min as isize + g.tap_offset(t)) as usize;
        gemm(
            g.co, g.span, g.ci,
            &full, 0, (g.span, 1),
            &xp, off, (1, g.padded),
            1.0, dw.data_mut(), t, (wrow, g.taps),
        );
        if want_dx {
            gemm(
                g.ci, g.co, g.span,
                w.data(), t, (g.taps, wrow),
                &full, 0, (g.span, 1),
                1.0, &mut dxp, off, (g.padded, 1),
            );
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let d = dx.data_mut();
        for c in 0..g.ci {
            for z in 0..nz {
                for y in 0..ny {
                    let q = c * g.padded + g.padded_index(z, y, 0);
                    let s = c * vol + (z * ny + y) * nx;
                    d[s..s + nx].copy_from_slice(&dxp[q..q + nx]);
                }
            }
        }
        dx
    });
    (dx, dw, db)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization statistics `(mean, rstd)` per group.
pub fn group_stats(x: &Tensor, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let per = x.numel() / groups;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = &x.data()[g * per..(g + 1) * per];
        let m = s.iter().sum::<f64>() / per as f64;
        let v = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per as f64;
        mean.push(m);
        rstd.push(1.0 / (v + GROUP_NORM_EPS).sqrt());
    }
    (mean, rstd)
}

pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, mean: &[f64], rstd: &[f64]) -> Tensor {
    let c = x.channels();
    let inner = x.inner();
    let cpg = c / groups;
    let mut out = x.clone();
    let od = out.data_mut();
    for ch in 0..c {
        let g = ch / cpg;
        let (m, r, ga, be) = (mean[g], rstd[g], gamma.data()[ch], beta.data()[ch]);
        for v in &mut od[ch * inner..(ch + 1) * inner] {
            *v = (*v - m) * r * ga + be;
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    mean: &[f64],
    rstd: &[f64],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.channels();
    let inner = x.inner();
    let cpg = c / groups;
    let n = (cpg * inner) as f64;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let dd = dout.data();
    for g in 0..groups {
        let (m, r) = (mean[g], rstd[g]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in g * cpg..(g + 1) * cpg {
            let ga = gamma.data()[ch];
            let (mut dg, mut dbt) = (0.0, 0.0);
            for i in ch * inner..(ch + 1) * inner {
                let xhat = (xd[i] - m) * r;
                dg += dd[i] * xhat;
                dbt += dd[i];
                let dxhat = dd[i] * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            dgamma.data_mut()[ch] = dg;
            dbeta.data_mut()[ch] = dbt;
        }
        let dxd = dx.data_mut();
        for ch in g * cpg..(g + 1) * cpg {
            let ga = gamma.data()[ch];
            for i in ch * inner..(ch + 1) * inner {
                let xhat = (xd[i] - m) * r;
                let dxhat = dd[i] * ga;
                dxd[i] = r / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2×2 mean pooling; spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let c = x.channels();
    let [nz, ny, nx] = x.spatial();
    assert!(nz % 2 == 0 && ny % 2 == 0 && nx % 2 == 0, "avg_pool2 needs even dims, got {:?}", x.shape());
    let (oz, oy, ox) = (nz / 2, ny / 2, nx / 2);
    let mut out = Tensor::zeros(&[c, oz, oy, ox]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                let s = ((ch * nz + z) * ny + y) * nx;
                let d = ((ch * oz + z / 2) * oy + y / 2) * ox;
                for xx in 0..nx {
                    od[d + xx / 2] += 0.125 * xd[s + xx];
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let (c, nz, ny, nx) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oz, oy, ox) = (nz / 2, ny / 2, nx / 2);
    let dd = dout.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                let s = ((ch * nz + z) * ny + y) * nx;
                let d = ((ch * oz + z / 2) * oy + y / 2) * ox;
                for xx in 0..nx {
                    dxd[s + xx] = 0.125 * dd[d + xx / 2];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let c = x.channels();
    let [nz, ny, nx] = x.spatial();
    let (oz, oy, ox) = (nz * 2, ny * 2, nx * 2);
    let mut out = Tensor::zeros(&[c, oz, oy, ox]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for z in 0..oz {
            for y in 0..oy {
                let s = ((ch * nz + z / 2) * ny + y / 2) * nx;
                let d = ((ch * oz + z) * oy + y) * ox;
                for xx in 0..ox {
                    od[d + xx] = xd[s + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let (c, nz, ny, nx) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oz, oy, ox) = (nz * 2, ny * 2, nx * 2);
    let dd = dout.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        for z in 0..oz {
            for y in 0..oy {
                let s = ((ch * nz + z / 2) * ny + y / 2) * nx;
                let d = ((ch * oz + z) * oy + y) * ox;
                for xx in 0..ox {
                    dxd[s + xx / 2] += dd[d + xx];
                }
            }
        }
    }
    dx
}

/// Diagonal linear state-space scan over the flattened per-channel sequence.
///
/// Per channel `c` and state `n`: `h[k] = a·h[k-1] + b·x[k]`, `y[k] = Σₙ c·h[k] + d·x[k]`.
/// `a`, `b`, `cc` are `[C, N]`; `d` is `[C]`. With `reverse` the sequence is
/// traversed from its end.
pub fn ssm_scan(x: &Tensor, a: &Tensor, b: &Tensor, cc: &Tensor, d: &Tensor, reverse: bool) -> Tensor {
    let ch = x.channels();
    let len = x.inner();
    let ns = a.shape()[1];
    let mut out = Tensor::zeros(x.shape());
    let mut h = vec![0.0; ns];
    for c in 0..ch {
        let xs = &x.data()[c * len..(c + 1) * len];
        let ys = &mut out.data_mut()[c * len..(c + 1) * len];
        let (ar, br, cr) = (&a.data()[c * ns..(c + 1) * ns], &b.data()[c * ns..(c + 1) * ns], &cc.data()[c * ns..(c + 1) * ns]);
        let dc = d.data()[c];
        h.iter_mut().for_each(|v| *v = 0.0);
        for step in 0..len {
            let k = if reverse { len - 1 - step } else { step };
            let xk = xs[k];
            let mut y = dc * xk;
            for n in 0..ns {
                h[n] = ar[n] * h[n] + br[n] * xk;
                y += cr[n] * h[n];
            }
            ys[k] = y;
        }
    }
    out
}

pub struct SsmGrads {
    pub dx: Tensor,
    pub da: Tensor,
    pub db: Tensor,
    pub dc: Tensor,
    pub dd: Tensor,
}

pub fn ssm_scan_backward(x: &Tensor, a: &Tensor, b: &Tensor, cc: &Tensor, d: &Tensor, reverse: bool, dy: &Tensor) -> SsmGrads {
    let ch = x.channels();
    let len = x.inner();
    let ns = a.shape()[1];
    let mut g = SsmGrads {
        dx: Tensor::zeros(x.shape()),
        da: Tensor::zeros(a.shape()),
        db: Tensor::zeros(b.shape()),
        dc: Tensor::zeros(cc.shape()),
        dd: Tensor::zeros(d.shape()),
    };
    let order = |step: usize| if reverse { len - 1 - step } else { step };
    let mut hist = vec![0.0; len * ns];
    let mut gh = vec![0.0; ns];
    for c in 0..ch {
        let xs = &x.data()[c * len..(c + 1) * len];
        let gys = &dy.data()[c * len..(c + 1) * len];
        let (ar, br, cr) = (&a.data()[c * ns..(c + 1) * ns], &b.data()[c * ns..(c + 1) * ns], &cc.data()[c * ns..(c + 1) * ns]);
        let dcoef = d.data()[c];
        // replay the forward states in scan order
        let mut h = vec![0.0; ns];
        for step in 0..len {
            let xk = xs[order(step)];
            for n in 0..ns {
                h[n] = ar[n] * h[n] + br[n] * xk;
                hist[step * ns + n] = h[n];
            }
        }
        gh.iter_mut().for_each(|v| *v = 0.0);
        let mut dd_acc = 0.0;
        for step in (0..len).rev() {
            let k = order(step);
            let xk = xs[k];
            let gy = gys[k];
            dd_acc += gy * xk;
            let mut gx = dcoef * gy;
            for n in 0..ns {
                let hk = hist[step * ns + n];
                let hprev = if step == 0 { 0.0 } else { hist[(step - 1) * ns + n] };
                gh[n] = cr[n] * gy + gh[n];
                g.dc.data_mut()[c * ns + n] += gy * hk;
                g.da.data_mut()[c * ns + n] += gh[n] * hprev;
                g.db.data_mut()[c * ns + n] += gh[n] * xk;
                gx += br[n] * gh[n];
                // carry to the previous step
                gh[n] *= ar[n];
            }
            g.dx.data_mut()[c * len + k] = gx;
        }
        g.dd.data_mut()[c] = dd_acc;
    }
    g
}
