//! Plain forward-only dense kernels.
//!
//! The Monte-Carlo likelihood estimators evaluate the same decoder on
//! hundreds of latent samples per step; doing that through the tape would
//! spend most of the time allocating nodes. These batched kernels operate
//! on raw slices and are checked against the tape forward in tests.

/// out[s, :] = a[s, :] @ w  for a: [s, k] and w: [k, m] (both row-major).
pub fn matmul(a: &[f64], s: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), s * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), s * m);
    out.fill(0.0);
    for i in 0..s {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &ap) in row.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let wrow = &w[p * m..(p + 1) * m];
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += ap * wv;
            }
        }
    }
}

/// y = x @ w + b for x: [k], w: [k, m], b: [m].
pub fn matvec(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = b.len();
    debug_assert_eq!(w.len(), x.len() * m);
    debug_assert_eq!(out.len(), m);
    out.copy_from_slice(b);
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        let row = &w[p * m..(p + 1) * m];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xp * wv;
        }
    }
}

/// Adds `row` to every row of `a` ([s, m]).
pub fn add_row(a: &mut [f64], s: usize, row: &[f64]) {
    let m = row.len();
    debug_assert_eq!(a.len(), s * m);
    for i in 0..s {
        for (v, &r) in a[i * m..(i + 1) * m].iter_mut().zip(row) {
            *v += r;
        }
    }
}

pub fn relu_inplace(a: &mut [f64]) {
    for v in a.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn sigmoid_inplace(a: &mut [f64]) {
    for v in a.iter_mut() {
        *v = super::tape::sigmoid(*v);
    }
}

pub fn softplus_inplace(a: &mut [f64]) {
    for v in a.iter_mut() {
        *v = super::tape::softplus(*v);
    }
}
