//! Soft discretization of scalar features.
//!
//! A scalar `x` is mapped to `H` bucket logits through a tiny learnable
//! projection, the logits are turned into bucket weights with a temperature
//! softmax, and the output is the weighted sum of `H` meta-embeddings:
//!
//! ```text
//! h      = leaky_relu(w * x + b)            (H)
//! logits = M h + skip * h                   (H)
//! p      = softmax(logits / tau)            (H)
//! out    = sum_j p_j * meta_j               (d)
//! ```

pub const LEAKY_SLOPE: f64 = 0.01;
pub const SKIP: f64 = 0.1;

/// Borrowed view of one scalar feature's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AutoDisParams<'a> {
    /// `H` input weights.
    pub w: &'a [f64],
    /// `H` input biases.
    pub b: &'a [f64],
    /// `H x H` bucket mixing matrix, row-major.
    pub mix: &'a [f64],
    /// `H x d` meta-embeddings, row-major.
    pub meta: &'a [f64],
}

impl AutoDisParams<'_> {
    pub fn buckets(&self) -> usize {
        self.w.len()
    }

    pub fn dim(&self) -> usize {
        self.meta.len() / self.w.len()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct AutoDisCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub weights: Vec<f64>,
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Bucket weights for `x`; non-negative and summing to one.
pub fn autodis_weights(x: f64, p: &AutoDisParams<'_>, tau: f64, cache: &mut AutoDisCache) {
    let h = p.buckets();
    cache.pre.clear();
    cache.hidden.clear();
    cache.weights.clear();
    for j in 0..h {
        let a = p.w[j] * x + p.b[j];
        cache.pre.push(a);
        cache.hidden.push(leaky(a));
    }
    let mut max = f64::NEG_INFINITY;
    for j in 0..h {
        let row = &p.mix[j * h..(j + 1) * h];
        let mut l = SKIP * cache.hidden[j];
        for (m, hv) in row.iter().zip(&cache.hidden) {
            l += m * hv;
        }
        let l = l / tau;
        max = max.max(l);
        cache.weights.push(l);
    }
    let mut sum = 0.0;
    for l in cache.weights.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in cache.weights.iter_mut() {
        *l /= sum;
    }
}

/// Embeds `x` as a convex combination of meta-embeddings, writing `d` values to `out`.
pub fn autodis_embed_into(
    x: f64,
    p: &AutoDisParams<'_>,
    tau: f64,
    cache: &mut AutoDisCache,
    out: &mut [f64],
) {
    autodis_weights(x, p, tau, cache);
    let d = p.dim();
    out[..d].fill(0.0);
    for (j, wj) in cache.weights.iter().enumerate() {
        let row = &p.meta[j * d..(j + 1) * d];
        for (o, m) in out.iter_mut().zip(row) {
            *o += wj * m;
        }
    }
}

pub fn autodis_embed(x: f64, p: &AutoDisParams<'_>, tau: f64) -> Vec<f64> {
    let mut cache = AutoDisCache::default();
    let mut out = vec![0.0; p.dim()];
    autodis_embed_into(x, p, tau, &mut cache, &mut out);
    out
}

/// Gradient buffers matching [`AutoDisParams`].
pub struct AutoDisGrads<'a> {
    pub w: &'a mut [f64],
    pub b: &'a mut [f64],
    pub mix: &'a mut [f64],
    pub meta: &'a mut [f64],
}

/// Accumulates parameter gradients given `d_out`; returns d/dx.
pub fn autodis_backward(
    x: f64,
    p: &AutoDisParams<'_>,
    tau: f64,
    cache: &AutoDisCache,
    d_out: &[f64],
    g: &mut AutoDisGrads<'_>,
) -> f64 {
    let h = p.buckets();
    let d = p.dim();
    // d out / d weights_j = meta_j
    let mut d_w = vec![0.0; h];
    for j in 0..h {
        let row = &p.meta[j * d..(j + 1) * d];
        let grow = &mut g.meta[j * d..(j + 1) * d];
        let wj = cache.weights[j];
        let mut acc = 0.0;
        for k in 0..d {
            grow[k] += wj * d_out[k];
            acc += row[k] * d_out[k];
        }
        d_w[j] = acc;
    }
    // softmax backward
    let dot: f64 = d_w.iter().zip(&cache.weights).map(|(a, b)| a * b).sum();
    let d_logit: Vec<f64> = (0..h)
        .map(|j| cache.weights[j] * (d_w[j] - dot) / tau)
        .collect();
    let mut d_hidden: Vec<f64> = d_logit.iter().map(|v| v * SKIP).collect();
    for j in 0..h {
        let row = &p.mix[j * h..(j + 1) * h];
        let grow = &mut g.mix[j * h..(j + 1) * h];
        for i in 0..h {
            grow[i] += d_logit[j] * cache.hidden[i];
            d_hidden[i] += d_logit[j] * row[i];
        }
    }
    let mut d_x = 0.0;
    for j in 0..h {
        let slope = if cache.pre[j] > 0.0 { 1.0 } else { LEAKY_SLOPE };
        let da = d_hidden[j] * slope;
        g.w[j] += da * x;
        g.b[j] += da;
        d_x += da * p.w[j];
    }
    d_x
}
