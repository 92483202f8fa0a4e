//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! All reductions run in a fixed loop order so results are reproducible
//! bit-for-bit for a given input.

use crate::tensor::Element;

/// `c[m,n] = a[m,k] · b[k,n]`, accumulated into `c`.
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] · b[k,n]ᵀ`
pub fn matmul_grad_a<T: Element>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for t in 0..k {
            let b_row = &b[t * n..(t + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in dc_row.iter().zip(b_row) {
                s += x * y;
            }
            da[i * k + t] += s;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · dc[m,n]`
pub fn matmul_grad_b<T: Element>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let db_row = &mut db[t * n..(t + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += av * g;
            }
        }
    }
}

/// Geometry of a 2-D convolution, shared by the direct and transposed forms.
///
/// For `conv2d` the "input" is the large side (`in_h × in_w`) and the output
/// the strided one. A transposed convolution with the same geometry maps the
/// output side back to the input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.batch * self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_c * self.out_h * self.out_w
    }
}

/// Output positions `o` for which `o*stride - pad + k` lies in `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let (s, p, k, n_in) = (stride as isize, pad as isize, k as isize, n_in as isize);
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi = (n_in - 1 + p - k).div_euclid(s) + 1;
    let hi = hi.clamp(0, n_out as isize);
    (lo as usize, (hi as usize).max(lo as usize))
}

/// Cross-correlation. `x: [B,C,H,W]`, `w: [O,C,kh,kw]`, `out: [B,O,H',W']`.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_len()];
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let out_plane = &mut out[(b * g.out_c + o) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for c in 0..g.in_c {
                let in_plane = &x[(b * g.in_c + c) * plane_in..][..plane_in];
                for ki in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.in_h, g.out_h, g.stride, g.pad, ki);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.in_c + c) * g.kh + ki) * g.kw + kj];
                        let (xlo, xhi) = valid_range(g.in_w, g.out_w, g.stride, g.pad, kj);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ki - g.pad;
                            let in_row = &in_plane[iy * g.in_w..][..g.in_w];
                            let out_row = &mut out_plane[oy * g.out_w..][..g.out_w];
                            for ox in xlo..xhi {
                                out_row[ox] += wv * in_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `d(in)` given `d(out)`: the transposed-convolution scatter.
pub fn conv2d_input_grad<T: Element>(dout: &[T], w: &[T], dx: &mut [T], g: &ConvGeom) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let dout_plane = &dout[(b * g.out_c + o) * plane_out..][..plane_out];
            for c in 0..g.in_c {
                let dx_plane = &mut dx[(b * g.in_c + c) * plane_in..][..plane_in];
                for ki in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.in_h, g.out_h, g.stride, g.pad, ki);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.in_c + c) * g.kh + ki) * g.kw + kj];
                        let (xlo, xhi) = valid_range(g.in_w, g.out_w, g.stride, g.pad, kj);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ki - g.pad;
                            let dout_row = &dout_plane[oy * g.out_w..][..g.out_w];
                            let dx_row = &mut dx_plane[iy * g.in_w..][..g.in_w];
                            for ox in xlo..xhi {
                                dx_row[ox * g.stride + kj - g.pad] += wv * dout_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `d(w)` (layout `[O,C,kh,kw]`) from the large-side tensor `x`
/// and the strided-side gradient `dout`.
pub fn conv2d_weight_grad<T: Element>(x: &[T], dout: &[T], dw: &mut [T], g: &ConvGeom) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let dout_plane = &dout[(b * g.out_c + o) * plane_out..][..plane_out];
            for c in 0..g.in_c {
                let in_plane = &x[(b * g.in_c + c) * plane_in..][..plane_in];
                for ki in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.in_h, g.out_h, g.stride, g.pad, ki);
                    for kj in 0..g.kw {
                        let (xlo, xhi) = valid_range(g.in_w, g.out_w, g.stride, g.pad, kj);
                        let mut s = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ki - g.pad;
                            let in_row = &in_plane[iy * g.in_w..][..g.in_w];
                            let dout_row = &dout_plane[oy * g.out_w..][..g.out_w];
                            for ox in xlo..xhi {
                                s += in_row[ox * g.stride + kj - g.pad] * dout_row[ox];
                            }
                        }
                        dw[((o * g.in_c + c) * g.kh + ki) * g.kw + kj] += s;
                    }
                }
            }
        }
    }
}

/// Sums `d(out)` per output channel into `dbias`.
pub fn channel_sum_acc<T: Element>(dout: &[T], dbias: &mut [T], batch: usize, channels: usize, plane: usize) {
    for b in 0..batch {
        for (c, db) in dbias.iter_mut().enumerate().take(channels) {
            let s: T = dout[(b * channels + c) * plane..][..plane].iter().copied().sum();
            *db += s;
        }
    }
}

/// Axis permutation of a row-major buffer: `out` has shape `shape[axes[i]]`.
pub fn permute<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let src_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    if rank == 0 {
        return src.to_vec();
    }
    let last = rank - 1;
    loop {
        // Innermost axis as a tight loop.
        let step = gather[last];
        for i in 0..out_shape[last] {
            out.push(src[offset + i * step]);
        }
        // Carry into the outer axes.
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn gelu<T: Element>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}

fn gelu_consts<T: Element>() -> (T, T) {
    (T::from_f64((2.0 / std::f64::consts::PI).sqrt()), T::from_f64(0.044715))
}
