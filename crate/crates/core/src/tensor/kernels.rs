//! Dense numeric kernels shared by forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major storage, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored as the
/// transpose of its logical shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    fn im2col(&self, x: &[f64], bi: usize, gi: usize, cols: &mut [f64]) {
        let (cg, k) = (self.cg(), self.kernel);
        let width = cg * k;
        for t in 0..self.t_out {
            let row = &mut cols[t * width..(t + 1) * width];
            for c in 0..cg {
                let src = &x[(bi * self.c_in + gi * cg + c) * self.t_in..][..self.t_in];
                for kk in 0..k {
                    let pos = (t * self.stride + kk) as isize - self.padding as isize;
                    row[c * k + kk] = if pos >= 0 && (pos as usize) < self.t_in {
                        src[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], bi: usize, gi: usize, dx: &mut [f64]) {
        let (cg, k) = (self.cg(), self.kernel);
        let width = cg * k;
        for t in 0..self.t_out {
            let row = &cols[t * width..(t + 1) * width];
            for c in 0..cg {
                let dst = &mut dx[(bi * self.c_in + gi * cg + c) * self.t_in..][..self.t_in];
                for kk in 0..k {
                    let pos = (t * self.stride + kk) as isize - self.padding as isize;
                    if pos >= 0 && (pos as usize) < self.t_in {
                        dst[pos as usize] += row[c * k + kk];
                    }
                }
            }
        }
    }
}

pub fn conv1d_forward(geom: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cg, cog, k) = (geom.cg(), geom.cog(), geom.kernel);
    let width = cg * k;
    let mut out = vec![0.0; geom.batch * geom.c_out * geom.t_out];
    let mut cols = vec![0.0; geom.t_out * width];
    for bi in 0..geom.batch {
        for gi in 0..geom.groups {
            geom.im2col(x, bi, gi, &mut cols);
            let wg = &w[gi * cog * width..(gi + 1) * cog * width];
            let o = &mut out[(bi * geom.c_out + gi * cog) * geom.t_out..][..cog * geom.t_out];
            gemm(cog, width, geom.t_out, wg, false, &cols, true, o, 0.0);
        }
        if let Some(b) = bias {
            for c in 0..geom.c_out {
                let o = &mut out[(bi * geom.c_out + c) * geom.t_out..][..geom.t_out];
                o.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    }
    out
}

/// Returns `(dx, dw)` for the requested operands.
pub fn conv1d_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cg, cog, k) = (geom.cg(), geom.cog(), geom.kernel);
    let width = cg * k;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; geom.t_out * width];
    let mut dcols = vec![0.0; geom.t_out * width];
    for bi in 0..geom.batch {
        for gi in 0..geom.groups {
            let gg = &g[(bi * geom.c_out + gi * cog) * geom.t_out..][..cog * geom.t_out];
            let wg = &w[gi * cog * width..(gi + 1) * cog * width];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(x, bi, gi, &mut cols);
                let dwg = &mut dw[gi * cog * width..(gi + 1) * cog * width];
                gemm(cog, geom.t_out, width, gg, false, &cols, false, dwg, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(geom.t_out, cog, width, gg, true, wg, false, &mut dcols, 0.0);
                geom.col2im(&dcols, bi, gi, dx);
            }
        }
    }
    (dx, dw)
}

/// Copies `x` (with `shape`) into the axis order given by `perm`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    if rank == 0 {
        return x.to_vec();
    }
    // Innermost output axis is walked in a tight loop.
    let last = rank - 1;
    let mut counter = vec![0usize; rank];
    loop {
        let base: usize = (0..last).map(|i| counter[i] * strides[i]).sum();
        let s = strides[last];
        for j in 0..out_shape[last] {
            out.push(x[base + j * s]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            if counter[axis] < out_shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
}
