//! Transformer building blocks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{softmax_in_place, DenseMatrix};
use crate::params::Params;
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn init_normal<S: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> DenseMatrix<S> {
    let normal = Normal::new(0.0, std).expect("valid std");
    DenseMatrix::from_fn(rows, cols, |_, _| S::lit(normal.sample(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let c = S::lit(GELU_C);
                let a = S::lit(GELU_A);
                let half = S::lit(0.5);
                half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
            }
            Activation::Relu => x.max(S::zero()),
        }
    }

    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let c = S::lit(GELU_C);
                let a = S::lit(GELU_A);
                let half = S::lit(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (S::one() + t)
                    + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
            }
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// `y = x·Wᵀ + b` for a batch of row tokens. `w` is `out × in`.
pub(crate) fn linear<S: Scalar>(
    x: &DenseMatrix<S>,
    w: &DenseMatrix<S>,
    b: Option<&DenseMatrix<S>>,
) -> Result<DenseMatrix<S>> {
    let mut y = x.matmul_t(w)?;
    if let Some(b) = b {
        y.add_row_broadcast(b.data())?;
    }
    Ok(y)
}

/// Accumulates `dW += dyᵀ·x`, `db += Σ dy` and returns `dx = dy·W`.
pub(crate) fn linear_backward<S: Scalar>(
    x: &DenseMatrix<S>,
    w: &DenseMatrix<S>,
    dy: &DenseMatrix<S>,
    dw: &mut DenseMatrix<S>,
    db: Option<&mut DenseMatrix<S>>,
) -> Result<DenseMatrix<S>> {
    dw.add_assign(&dy.t_matmul(x)?)?;
    if let Some(db) = db {
        for (d, s) in db.data_mut().iter_mut().zip(dy.column_sums()) {
            *d += s;
        }
    }
    dy.matmul(w)
}

/// Two-layer feed-forward network `W2·act(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<S> {
    /// `hidden × dim`
    pub w1: DenseMatrix<S>,
    pub b1: DenseMatrix<S>,
    /// `dim × hidden`
    pub w2: DenseMatrix<S>,
    pub b2: DenseMatrix<S>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<S> {
    pre: DenseMatrix<S>,
    hidden: DenseMatrix<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: init_normal(hidden, dim, (1.0 / dim as f64).sqrt(), rng),
            b1: DenseMatrix::zeros(1, hidden),
            w2: init_normal(dim, hidden, (1.0 / hidden as f64).sqrt(), rng),
            b2: DenseMatrix::zeros(1, dim),
            activation: Activation::Gelu,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, x: &DenseMatrix<S>) -> Result<(DenseMatrix<S>, FeedForwardCache<S>)> {
        let pre = linear(x, &self.w1, Some(&self.b1))?;
        let act = self.activation;
        let hidden = pre.map(|v| act.apply(v));
        let y = linear(&hidden, &self.w2, Some(&self.b2))?;
        Ok((y, FeedForwardCache { pre, hidden }))
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub fn backward(
        &self,
        x: &DenseMatrix<S>,
        cache: &FeedForwardCache<S>,
        dy: &DenseMatrix<S>,
        grads: &mut FeedForward<S>,
    ) -> Result<DenseMatrix<S>> {
        let mut dh = linear_backward(&cache.hidden, &self.w2, dy, &mut grads.w2, Some(&mut grads.b2))?;
        let act = self.activation;
        for (d, &p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= act.derivative(p);
        }
        linear_backward(x, &self.w1, &dh, &mut grads.w1, Some(&mut grads.b1))
    }
}

impl<S: Scalar> Params<S> for FeedForward<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: DenseMatrix<S>,
    pub beta: DenseMatrix<S>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: DenseMatrix<S>,
    inv_std: Vec<S>,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DenseMatrix::from_vec(1, dim, vec![S::one(); dim]).expect("shape"),
            beta: DenseMatrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &DenseMatrix<S>) -> Result<(DenseMatrix<S>, LayerNormCache<S>)> {
        let d = self.gamma.cols();
        x.ensure_shape("LayerNorm::forward", x.rows(), d)?;
        let n = S::lit(d as f64);
        let eps = S::lit(LN_EPS);
        let mut xhat = DenseMatrix::zeros(x.rows(), d);
        let mut y = DenseMatrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                y.set(r, c, self.gamma.data()[c] * h + self.beta.data()[c]);
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<S>,
        dy: &DenseMatrix<S>,
        grads: &mut LayerNorm<S>,
    ) -> Result<DenseMatrix<S>> {
        let d = self.gamma.cols();
        dy.ensure_shape("LayerNorm::backward", cache.xhat.rows(), d)?;
        let n = S::lit(d as f64);
        let mut dx = DenseMatrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let g = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut mean_dxh = S::zero();
            let mut mean_dxh_xh = S::zero();
            for c in 0..d {
                let dxh = g[c] * self.gamma.data()[c];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[c];
                grads.gamma.data_mut()[c] += g[c] * xh[c];
                grads.beta.data_mut()[c] += g[c];
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            let is = cache.inv_std[r];
            for c in 0..d {
                let dxh = g[c] * self.gamma.data()[c];
                dx.set(r, c, is * (dxh - mean_dxh - xh[c] * mean_dxh_xh));
            }
        }
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for LayerNorm<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Bidirectional multi-head self-attention without biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<S> {
    pub wq: DenseMatrix<S>,
    pub wk: DenseMatrix<S>,
    pub wv: DenseMatrix<S>,
    pub wo: DenseMatrix<S>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    x: DenseMatrix<S>,
    q: DenseMatrix<S>,
    k: DenseMatrix<S>,
    v: DenseMatrix<S>,
    /// one `n × n` attention matrix per head
    probs: Vec<DenseMatrix<S>>,
    context: DenseMatrix<S>,
}

fn head_cols<S: Scalar>(m: &DenseMatrix<S>, start: usize, width: usize) -> DenseMatrix<S> {
    DenseMatrix::from_fn(m.rows(), width, |r, c| m.get(r, start + c))
}

fn write_head_cols<S: Scalar>(dst: &mut DenseMatrix<S>, src: &DenseMatrix<S>, start: usize) {
    for r in 0..src.rows() {
        for c in 0..src.cols() {
            dst.set(r, start + c, src.get(r, c));
        }
    }
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let std = (1.0 / dim as f64).sqrt();
        Ok(Self {
            wq: init_normal(dim, dim, std, rng),
            wk: init_normal(dim, dim, std, rng),
            wv: init_normal(dim, dim, std, rng),
            wo: init_normal(dim, dim, std, rng),
            heads,
        })
    }

    fn head_dim(&self) -> usize {
        self.wq.rows() / self.heads
    }

    pub fn forward(&self, x: &DenseMatrix<S>) -> Result<(DenseMatrix<S>, AttentionCache<S>)> {
        let q = linear(x, &self.wq, None)?;
        let k = linear(x, &self.wk, None)?;
        let v = linear(x, &self.wv, None)?;
        let hd = self.head_dim();
        let scale = S::one() / S::lit(hd as f64).sqrt();
        let mut context = DenseMatrix::zeros(x.rows(), self.wq.rows());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_cols(&q, h * hd, hd);
            let kh = head_cols(&k, h * hd, hd);
            let vh = head_cols(&v, h * hd, hd);
            let mut a = qh.matmul_t(&kh)?;
            a.scale(scale);
            for r in 0..a.rows() {
                softmax_in_place(a.row_mut(r))?;
            }
            let ch = a.matmul(&vh)?;
            write_head_cols(&mut context, &ch, h * hd);
            probs.push(a);
        }
        let out = linear(&context, &self.wo, None)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                context,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<S>,
        dout: &DenseMatrix<S>,
        grads: &mut MultiHeadAttention<S>,
    ) -> Result<DenseMatrix<S>> {
        let hd = self.head_dim();
        let scale = S::one() / S::lit(hd as f64).sqrt();
        let dctx = linear_backward(&cache.context, &self.wo, dout, &mut grads.wo, None)?;
        let n = cache.x.rows();
        let dim = self.wq.rows();
        let mut dq = DenseMatrix::zeros(n, dim);
        let mut dk = DenseMatrix::zeros(n, dim);
        let mut dv = DenseMatrix::zeros(n, dim);
        for h in 0..self.heads {
            let a = &cache.probs[h];
            let qh = head_cols(&cache.q, h * hd, hd);
            let kh = head_cols(&cache.k, h * hd, hd);
            let vh = head_cols(&cache.v, h * hd, hd);
            let dch = head_cols(&dctx, h * hd, hd);
            let da = dch.matmul_t(&vh)?;
            let dvh = a.t_matmul(&dch)?;
            let mut ds = DenseMatrix::zeros(n, n);
            for r in 0..n {
                let ar = a.row(r);
                let dar = da.row(r);
                let inner: S = ar.iter().zip(dar).map(|(&p, &g)| p * g).sum();
                for c in 0..n {
                    ds.set(r, c, ar[c] * (dar[c] - inner) * scale);
                }
            }
            let dqh = ds.matmul(&kh)?;
            let dkh = ds.t_matmul(&qh)?;
            write_head_cols(&mut dq, &dqh, h * hd);
            write_head_cols(&mut dk, &dkh, h * hd);
            write_head_cols(&mut dv, &dvh, h * hd);
        }
        let mut dx = linear_backward(&cache.x, &self.wq, &dq, &mut grads.wq, None)?;
        dx.add_assign(&linear_backward(&cache.x, &self.wk, &dk, &mut grads.wk, None)?)?;
        dx.add_assign(&linear_backward(&cache.x, &self.wv, &dv, &mut grads.wv, None)?)?;
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for MultiHeadAttention<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Attention pooling with a learned query: `Σ_i softmax_i(q·x_i/√d)·x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool<S> {
    pub query: DenseMatrix<S>,
}

#[derive(Debug, Clone)]
pub struct PoolCache<S> {
    x: DenseMatrix<S>,
    weights: Vec<S>,
}

impl<S: Scalar> AttentionPool<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            query: DenseMatrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &DenseMatrix<S>) -> Result<(Vec<S>, PoolCache<S>)> {
        if x.rows() == 0 {
            return Err(Error::Empty("AttentionPool::forward"));
        }
        let scale = S::one() / S::lit(x.cols() as f64).sqrt();
        let mut weights = x.matmul_t(&self.query)?.into_vec();
        weights.iter_mut().for_each(|w| *w *= scale);
        softmax_in_place(&mut weights)?;
        let mut pooled = vec![S::zero(); x.cols()];
        for (r, &w) in weights.iter().enumerate() {
            for (p, &v) in pooled.iter_mut().zip(x.row(r)) {
                *p += w * v;
            }
        }
        Ok((
            pooled,
            PoolCache {
                x: x.clone(),
                weights,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &PoolCache<S>,
        dpooled: &[S],
        grads: &mut AttentionPool<S>,
    ) -> Result<DenseMatrix<S>> {
        let x = &cache.x;
        let w = &cache.weights;
        let scale = S::one() / S::lit(x.cols() as f64).sqrt();
        // d pooled / d w_i = x_i
        let dw: Vec<S> = (0..x.rows())
            .map(|r| x.row(r).iter().zip(dpooled).map(|(&a, &b)| a * b).sum())
            .collect();
        let inner: S = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
        let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let dlogit = w[r] * (dw[r] - inner) * scale;
            for c in 0..x.cols() {
                let v = w[r] * dpooled[c] + dlogit * self.query.data()[c];
                dx.set(r, c, v);
                grads.query.data_mut()[c] += dlogit * x.get(r, c);
            }
        }
        Ok(dx)
    }
}

impl<S: Scalar> Params<S> for AttentionPool<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        vec![("query".into(), &self.query)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        vec![&mut self.query]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
        init_normal(rows, cols, 1.0, rng)
    }

    /// Loss = Σ out ⊙ probe, so dLoss/dout = probe.
    fn check<P, F>(module: &P, x: &DenseMatrix<f64>, probe: &DenseMatrix<f64>, fwd: F, analytic: (P, DenseMatrix<f64>))
    where
        P: Params<f64> + Clone,
        F: Fn(&P, &DenseMatrix<f64>) -> DenseMatrix<f64>,
    {
        let loss = |m: &P, x: &DenseMatrix<f64>| -> f64 {
            fwd(m, x).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let dx_fd = finite_diff_grad(
            |v: &[f64]| loss(module, &DenseMatrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap()),
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, n) in analytic.1.data().iter().zip(&dx_fd) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-5, "dx {a} vs {n}");
        }
        let names: Vec<String> = module.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let base = module.named()[ti].1.clone();
            let fd = finite_diff_grad(
                |v: &[f64]| {
                    let mut m = module.clone();
                    m.tensors_mut()[ti].data_mut().copy_from_slice(v);
                    loss(&m, x)
                },
                base.data(),
                1e-6,
            )
            .unwrap();
            let an = analytic.0.named()[ti].1.clone();
            for (a, n) in an.data().iter().zip(&fd) {
                assert!(relative_error(*a, *n, 1e-6) < 1e-5, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn feed_forward_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ff = FeedForward::<f64>::new(3, 5, &mut rng);
        let x = rand_matrix(2, 3, &mut rng);
        let probe = rand_matrix(2, 3, &mut rng);
        let (_, cache) = ff.forward(&x).unwrap();
        let mut g = ff.zeroed();
        let dx = ff.backward(&x, &cache, &probe, &mut g).unwrap();
        check(&ff, &x, &probe, |m, x| m.forward(x).unwrap().0, (g, dx));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::<f64>::new(4);
        ln.gamma = rand_matrix(1, 4, &mut rng);
        ln.beta = rand_matrix(1, 4, &mut rng);
        let x = rand_matrix(3, 4, &mut rng);
        let probe = rand_matrix(3, 4, &mut rng);
        let (_, cache) = ln.forward(&x).unwrap();
        let mut g = ln.zeroed();
        let dx = ln.backward(&cache, &probe, &mut g).unwrap();
        check(&ln, &x, &probe, |m, x| m.forward(x).unwrap().0, (g, dx));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::<f64>::new(4, 2, &mut rng).unwrap();
        let x = rand_matrix(3, 4, &mut rng);
        let probe = rand_matrix(3, 4, &mut rng);
        let (_, cache) = mha.forward(&x).unwrap();
        let mut g = mha.zeroed();
        let dx = mha.backward(&cache, &probe, &mut g).unwrap();
        check(&mha, &x, &probe, |m, x| m.forward(x).unwrap().0, (g, dx));
    }

    #[test]
    fn attention_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pool = AttentionPool::<f64>::new(3);
        pool.query = rand_matrix(1, 3, &mut rng);
        let x = rand_matrix(4, 3, &mut rng);
        let probe = rand_matrix(1, 3, &mut rng);
        let (_, cache) = pool.forward(&x).unwrap();
        let mut g = pool.zeroed();
        let dx = pool.backward(&cache, probe.data(), &mut g).unwrap();
        check(
            &pool,
            &x,
            &probe,
            |m, x| DenseMatrix::row_vector(m.forward(x).unwrap().0),
            (g, dx),
        );
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::<f64>::new(5, 2, &mut rng).is_err());
    }
}
