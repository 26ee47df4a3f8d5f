//! Raw slice-level kernels shared by the tape ops and the
//! no-grad inference path.

use crate::real::Real;

/// c += alpha * b, elementwise over slices of equal length.
#[inline]
pub fn axpy<T: Real>(c: &mut [T], alpha: T, b: &[T]) {
    debug_assert_eq!(c.len(), b.len());
    for (ci, &bi) in c.iter_mut().zip(b) {
        *ci += alpha * bi;
    }
}

/// C[m,n] += A[m,k] @ B[k,n].
pub fn mm_nn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            axpy(c_row, a_ip, &b[p * n..(p + 1) * n]);
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T.
pub fn mm_nt<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n].
pub fn mm_tn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let b_row = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let a_ri = a[r * k + i];
            axpy(&mut c[i * n..(i + 1) * n], a_ri, b_row);
        }
    }
}

/// In-place stabilized softmax of one contiguous lane.
pub fn softmax_lane<T: Real>(lane: &mut [T]) {
    let max = lane.iter().fold(T::MIN_FINITE, |m, &v| m.max(v));
    let mut sum = T::ZERO;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(lane))) with max-subtraction.
pub fn log_sum_exp<T: Real>(lane: &[T]) -> T {
    let max = lane.iter().fold(T::MIN_FINITE, |m, &v| m.max(v));
    let mut sum = T::ZERO;
    for &v in lane {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Normalizes one lane in place and returns (mean, inv_std).
pub fn layer_norm_lane<T: Real>(lane: &mut [T], eps: T) -> (T, T) {
    let n = T::from_usize(lane.len());
    let mean = lane.iter().copied().sum::<T>() / n;
    let mut var = T::ZERO;
    for &v in lane.iter() {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = T::ONE / (var + eps).sqrt();
    for v in lane.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.044715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let sqrt_2_over_pi = T::from_f64(0.7978845608028654);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let inner = sqrt_2_over_pi * (x + c * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

/// d(gelu)/dx for the tanh approximation.
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let sqrt_2_over_pi = T::from_f64(0.7978845608028654);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = sqrt_2_over_pi * (x + c * x * x * x);
    let t = u.tanh();
    let du = sqrt_2_over_pi * (T::ONE + three * c * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// SiLU: x * sigmoid(x).
#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_small_known() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut c = vec![0.0; 4];
        mm_nn(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);

        // A @ B^T with B stored transposed gives the same product
        let bt = vec![5.0, 7.0, 6.0, 8.0]; // [[5,7],[6,8]] = B^T rows
        let mut c2 = vec![0.0; 4];
        mm_nt(&mut c2, &a, &bt, 2, 2, 2);
        assert_eq!(c2, c);

        // A^T @ C consistency: (A^T)[2,2] @ B
        let mut c3 = vec![0.0; 4];
        mm_tn(&mut c3, &a, &b, 2, 2, 2);
        // A^T = [[1,3],[2,4]]; A^T@B = [[26,30],[38,44]]
        assert_eq!(c3, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn softmax_lane_stabilized() {
        let mut lane = vec![1000.0f32, 0.0];
        softmax_lane(&mut lane);
        assert!(lane[0] > 0.999 && lane[0] <= 1.0);
        assert!(lane[1] >= 0.0 && lane[1] < 1e-6);
        assert!((lane[0] + lane[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_matches_central_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn silu_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, 0.0, 0.9, 2.5] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }
}
