//! Slice-level kernels behind the tape ops. All accumulate into `out`.

use super::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`
pub(super) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(super) fn matmul_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(super) fn matmul_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

pub(super) fn transpose2<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Exact GELU, `x·Φ(x)`.
pub(super) fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::from_f64_lossy(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

pub(super) fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64_lossy(cdf + v * pdf)
}

/// Splits a shape into `(outer, axis_len, inner)` strides around `axis`.
pub(super) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
