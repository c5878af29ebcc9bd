//! Row-major dense kernels backing the graph ops.

/// `out[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    if !acc {
        out[..m * n].iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] (+)= a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            if acc {
                out[i * k + j] += dot;
            } else {
                out[i * k + j] = dot;
            }
        }
    }
}

/// `out[k×n] (+)= a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    if !acc {
        out[..k * n].iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in·kh·kw, h_out·w_out]`.
pub(crate) fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let p = d.p();
    for c in 0..d.c_in {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..d.h_out {
                    let ii = (oi + ki) as isize - d.pad as isize;
                    for oj in 0..d.w_out {
                        let jj = (oj + kj) as isize - d.pad as isize;
                        dst[oi * d.w_out + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < d.h && (jj as usize) < d.w {
                            x[(c * d.h + ii as usize) * d.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `[c_in, h, w]`.
pub(crate) fn col2im_add(d: &ConvDims, cols: &[f64], dx: &mut [f64]) {
    let p = d.p();
    for c in 0..d.c_in {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..d.h_out {
                    let ii = (oi + ki) as isize - d.pad as isize;
                    if ii < 0 || ii as usize >= d.h {
                        continue;
                    }
                    for oj in 0..d.w_out {
                        let jj = (oj + kj) as isize - d.pad as isize;
                        if jj < 0 || jj as usize >= d.w {
                            continue;
                        }
                        dx[(c * d.h + ii as usize) * d.w + jj as usize] += src[oi * d.w_out + oj];
                    }
                }
            }
        }
    }
}
