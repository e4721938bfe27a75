// Row-major GEMM kernels. All accumulate into `c` in a fixed loop order.

use super::Scalar;

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            c[i * k + p] = c[i * k + p] + acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut c = [0.0; 2];
        gemm_nn(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [3.0, 7.0]);

        // aᵀ·a via gemm_tn
        let mut ata = [0.0; 4];
        gemm_tn(&a, &a, &mut ata, 2, 2, 2);
        assert_eq!(ata, [10.0, 14.0, 14.0, 20.0]);

        // a·aᵀ via gemm_nt
        let mut aat = [0.0; 4];
        gemm_nt(&a, &a, &mut aat, 2, 2, 2);
        assert_eq!(aat, [5.0, 11.0, 11.0, 25.0]);
    }
}
