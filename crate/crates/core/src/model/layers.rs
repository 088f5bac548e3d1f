//! Dense and attention primitives with their backward passes. Weights are
//! row-major `[out, in]`.

/// `y = W x (+ b)`
pub fn dense(w: &[f64], b: Option<&[f64]>, x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let mut y = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; out_dim],
    };
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *yo += acc;
    }
    y
}

/// Accumulates `dW += dy x^T`, `db += dy` and, when requested, `dx += W^T dy`.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let in_dim = x.len();
    for (o, d) in dy.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
        for (g, xi) in grow.iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    if let Some(gb) = gb {
        for (g, d) in gb.iter_mut().zip(dy) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for (g, wi) in dx.iter_mut().zip(row) {
                *g += d * wi;
            }
        }
    }
}

pub fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `d logits` of a softmax given its output `p` and `d p`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Dense row-major matrix used by the public attention operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Attention weights of one query over the unmasked keys, scaled by
/// `1/sqrt(d)`. Masked keys get exactly zero; an all-masked input yields
/// all zeros.
pub fn attention_weights(q: &[f64], keys: &[&[f64]], mask: &[bool]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut w = vec![0.0; keys.len()];
    let mut max = f64::NEG_INFINITY;
    for (i, k) in keys.iter().enumerate() {
        if mask[i] {
            let s: f64 = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale;
            w[i] = s;
            max = max.max(s);
        }
    }
    if max == f64::NEG_INFINITY {
        return w;
    }
    let mut sum = 0.0;
    for (i, x) in w.iter_mut().enumerate() {
        if mask[i] {
            *x = (*x - max).exp();
            sum += *x;
        }
    }
    for x in w.iter_mut() {
        *x /= sum;
    }
    w
}

/// `softmax(Q K^T / sqrt(d)) V` restricted to unmasked keys (`mask[i] == true`
/// means key `i` is present). Rows of an all-masked input are zero.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[bool]) -> Matrix {
    assert_eq!(q.cols, k.cols, "query/key width mismatch");
    assert_eq!(k.rows, v.rows, "key/value count mismatch");
    assert_eq!(mask.len(), k.rows, "mask length mismatch");
    let keys: Vec<&[f64]> = (0..k.rows).map(|i| k.row(i)).collect();
    let mut out = Matrix::zeros(q.rows, v.cols);
    for r in 0..q.rows {
        let w = attention_weights(q.row(r), &keys, mask);
        let dst = &mut out.data[r * v.cols..(r + 1) * v.cols];
        for (i, wi) in w.iter().enumerate() {
            if *wi != 0.0 {
                for (o, vv) in dst.iter_mut().zip(v.row(i)) {
                    *o += wi * vv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn single_unmasked_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(2, 4, &mut rng);
        let k = random(3, 4, &mut rng);
        let v = random(3, 5, &mut rng);
        let out = attention(&q, &k, &v, &[false, true, false]);
        for r in 0..2 {
            assert_eq!(out.row(r), v.row(1));
        }
    }

    #[test]
    fn zero_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Matrix::zeros(1, 4);
        let k = random(3, 4, &mut rng);
        let v = random(3, 2, &mut rng);
        let out = attention(&q, &k, &v, &[true; 3]);
        for c in 0..2 {
            let mean = (v.row(0)[c] + v.row(1)[c] + v.row(2)[c]) / 3.0;
            assert!((out.row(0)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_yields_zero_not_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = attention(&random(2, 4, &mut rng), &random(3, 4, &mut rng), &random(3, 2, &mut rng), &[false; 3]);
        assert!(out.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn weights_are_row_stochastic_over_unmasked_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let n = rng.random_range(1..10);
            let q = random(1, 8, &mut rng);
            let k = random(n, 8, &mut rng);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let keys: Vec<&[f64]> = (0..n).map(|i| k.row(i)).collect();
            let w = attention_weights(q.row(0), &keys, &mask);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (wi, m) in w.iter().zip(&mask) {
                if !m {
                    assert_eq!(*wi, 0.0);
                } else {
                    assert!(*wi >= 0.0);
                }
            }
        }
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        assert!(sigmoid(1e3) < 1.0);
        assert!(sigmoid(-1e3) > 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
