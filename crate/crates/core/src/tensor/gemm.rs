//! Register-tiled matrix product for the convolution kernels.
//!
//! Each output element is reduced along the inner dimension in ascending
//! order from its initial value, so results do not depend on the tiling.

use alloc::vec;

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;

/// Starting value of each output element.
#[derive(Clone, Copy)]
pub(crate) enum Init<'a> {
    /// One value per output row.
    Bias(&'a [f64]),
    Zero,
    /// Keep the current contents of `c` and add to them.
    Accumulate,
}

/// `c[m x n] = init + a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_nn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    init: Init,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    match init {
        Init::Bias(bias) => {
            for (row, v) in c.chunks_exact_mut(n).take(m).zip(bias) {
                row.fill(*v);
            }
        }
        Init::Zero => c[..m * n].fill(0.0),
        Init::Accumulate => {}
    }
    let mblocks = m.div_ceil(MR);
    // a packed as [block][kk][MR], zero rows past m
    let mut ap = vec![0.0; mblocks * k * MR];
    for i in 0..m {
        let (blk, r) = (i / MR, i % MR);
        let dst = &mut ap[blk * k * MR..(blk + 1) * k * MR];
        for (kk, v) in a[i * k..(i + 1) * k].iter().enumerate() {
            dst[kk * MR + r] = *v;
        }
    }
    let mut bp = vec![0.0; KC.min(k) * NR];
    for j0 in (0..n).step_by(NR) {
        let nr = NR.min(n - j0);
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            for (kk, dst) in bp.chunks_exact_mut(NR).take(kc).enumerate() {
                let src = (k0 + kk) * n + j0;
                dst[..nr].copy_from_slice(&b[src..src + nr]);
            }
            for blk in 0..mblocks {
                let i0 = blk * MR;
                let rows = MR.min(m - i0);
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate().take(rows) {
                    row[..nr].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr]);
                }
                let base = blk * k * MR + k0 * MR;
                let acc = micro(&ap[base..base + kc * MR], &bp[..kc * NR], acc);
                for (r, row) in acc.iter().enumerate().take(rows) {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr].copy_from_slice(&row[..nr]);
                }
            }
        }
    }
}

#[inline(never)]
fn micro(ap: &[f64], bp: &[f64], mut acc: [[f64; NR]; MR]) -> [[f64; NR]; MR] {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for r in 0..MR {
            let x = av[r];
            for j in 0..NR {
                acc[r][j] += x * bv[j];
            }
        }
    }
    acc
}

/// Row-major transpose of `src[rows x cols]` into `dst[cols x rows]`.
pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn seq(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + salt).sin()).collect()
    }

    #[test]
    fn matches_naive_in_order() {
        for &(m, k, n) in &[
            (4, 3, 16),
            (7, 5, 33),
            (1, 1, 1),
            (9, 300, 40),
            (3, 2, 5),
            (5, 600, 17),
        ] {
            let a = seq(m * k, 0.1);
            let b = seq(k * n, 0.7);
            let bias = seq(m, 1.3);
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c, Init::Bias(&bias));
            let mut z = vec![9.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut z, Init::Zero);
            let start = seq(m * n, 2.1);
            let mut acc_c = start.clone();
            gemm_nn(m, k, n, &a, &b, &mut acc_c, Init::Accumulate);
            for i in 0..m {
                for j in 0..n {
                    let run = |mut acc: f64| {
                        for kk in 0..k {
                            acc += a[i * k + kk] * b[kk * n + j];
                        }
                        acc
                    };
                    assert_eq!(c[i * n + j], run(bias[i]));
                    assert_eq!(z[i * n + j], run(0.0));
                    assert_eq!(acc_c[i * n + j], run(start[i * n + j]));
                }
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let (r, c) = (37, 70);
        let src = seq(r * c, 0.3);
        let mut t = vec![0.0; r * c];
        transpose(r, c, &src, &mut t);
        assert_eq!(t[5 * r + 3], src[3 * c + 5]);
        let mut back = vec![0.0; r * c];
        transpose(c, r, &t, &mut back);
        assert_eq!(back, src);
    }
}
