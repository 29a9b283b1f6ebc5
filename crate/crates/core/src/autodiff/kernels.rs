//! Raw-slice compute kernels. Every kernel uses a fixed loop order, so the
//! result for one output row never depends on the other rows in the batch.

use crate::tensor::shape::axis_padding;
use crate::tensor::Padding;

/// `out[n, :] = sum_i a[n, i] * w[i, :]`
pub fn matmul(a: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &mut out[r * m..(r + 1) * m];
        for i in 0..k {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let wr = &w[i * m..(i + 1) * m];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += av * wv;
            }
        }
    }
    out
}

/// Gradient of `matmul` w.r.t. `a`: `g · wᵀ`.
pub fn matmul_grad_a(g: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let gr = &g[r * m..(r + 1) * m];
        for i in 0..k {
            let wr = &w[i * m..(i + 1) * m];
            out[r * k + i] = dot(gr, wr);
        }
    }
    out
}

/// Gradient of `matmul` w.r.t. `w`: `aᵀ · g`.
pub fn matmul_grad_w(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let gr = &g[r * m..(r + 1) * m];
        for i in 0..k {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators in fixed order
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * c + j] * b[4 * c + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Geometry of an NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: Padding) -> crate::Result<Self> {
        let [n, oh, ow, cout] = crate::tensor::shape::conv2d_shape(x, k, stride, padding)?;
        let (pad_top, _) = axis_padding(x[1], k[0], stride, padding);
        let (pad_left, _) = axis_padding(x[2], k[1], stride, padding);
        Ok(Self {
            n,
            h: x[1],
            w: x[2],
            cin: x[3],
            kh: k[0],
            kw: k[1],
            cout,
            oh,
            ow,
            stride,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }

    #[inline]
    fn input_pos(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Cross-correlation (no kernel flip).
pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.n * g.oh * g.ow * cout];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let orow = &mut out[obase..obase + cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else {
                            continue;
                        };
                        let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                        let kbase = (ky * g.kw + kx) * cin * cout;
                        for c in 0..cin {
                            let xv = x[xbase + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let kr = &k[kbase + c * cout..kbase + (c + 1) * cout];
                            for (o, &kv) in orow.iter_mut().zip(kr) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_x(gout: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut dx = vec![0.0; g.n * g.h * g.w * cin];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let grow = &gout[obase..obase + cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else {
                            continue;
                        };
                        let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                        let kbase = (ky * g.kw + kx) * cin * cout;
                        for c in 0..cin {
                            let kr = &k[kbase + c * cout..kbase + (c + 1) * cout];
                            dx[xbase + c] += dot(grow, kr);
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_grad_k(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut dk = vec![0.0; g.kh * g.kw * cin * cout];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let grow = &gout[obase..obase + cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else {
                            continue;
                        };
                        let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                        let kbase = (ky * g.kw + kx) * cin * cout;
                        for c in 0..cin {
                            let xv = x[xbase + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let kr = &mut dk[kbase + c * cout..kbase + (c + 1) * cout];
                            for (d, &gv) in kr.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}
