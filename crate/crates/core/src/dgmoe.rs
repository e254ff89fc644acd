//! Dual-gated mixture-of-experts layer.
//!
//! A token-side gate scores every expert (optionally mixing in the raw scores
//! carried over from the previous layer), the scores are softmax-normalized,
//! and each expert then accepts or rejects the token by comparing its
//! probability against a trainable threshold scaled by `lambda`. Accepted
//! experts contribute `p_k · E_k(x)`; probabilities are not renormalized.
//! A token rejected by every expert falls back to its most probable expert.
//!
//! Only active experts are evaluated in the forward pass. The sign gate has no
//! useful derivative, so thresholds are trained with a straight-through
//! surrogate: inside the band `|p_k − λ·w_k| ≤ ste_band` the sign is treated
//! as the identity, outside it the derivative is zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{argmax, dot, softmax_in_place, DenseMatrix};
use crate::nn::{init_normal, FeedForward, FeedForwardCache};
use crate::params::{prefixed, Params};
use crate::scalar::Scalar;

pub type ExpertFfn<S> = FeedForward<S>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgmoeConfig {
    pub dim: usize,
    pub experts: usize,
    /// expert hidden width as a multiple of `dim`
    pub hidden_mult: usize,
    pub lambda: f64,
    pub ste_band: f64,
    /// initial value of every expert threshold `W_e`
    pub threshold_init: f64,
}

impl DgmoeConfig {
    pub fn new(dim: usize, experts: usize) -> Self {
        Self {
            dim,
            experts,
            hidden_mult: 4,
            lambda: 0.5,
            ste_band: 0.1,
            threshold_init: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.experts == 0 || self.hidden_mult == 0 {
            return Err(Error::invalid("dgmoe dims must be >= 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.ste_band >= 0.0) {
            return Err(Error::invalid("ste_band must be >= 0"));
        }
        Ok(())
    }
}

/// Token-side gate: soft router `W_t` (`K × D`) and residual mixer `W_g` (`K × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGate<S> {
    pub w_t: DenseMatrix<S>,
    pub w_g: DenseMatrix<S>,
}

/// Expert-side gate: one trainable threshold per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGate<S> {
    /// `1 × K`
    pub w_e: DenseMatrix<S>,
    pub lambda: S,
}

/// Raw token-gate scores of the previous layer (`tokens × K`).
pub type GateScoreCarry<S> = DenseMatrix<S>;

/// Raw scores `x·W_tᵀ (+ carry·W_gᵀ)`; the result is also the next layer's carry.
pub fn token_gate_scores<S: Scalar>(
    x: &DenseMatrix<S>,
    gate: &TokenGate<S>,
    carry: Option<&GateScoreCarry<S>>,
) -> Result<DenseMatrix<S>> {
    let k = gate.w_t.rows();
    if x.cols() != gate.w_t.cols() {
        return Err(Error::ShapeMismatch {
            context: "token_gate_scores",
            expected: (x.rows(), gate.w_t.cols()),
            got: x.shape(),
        });
    }
    let mut scores = x.matmul_t(&gate.w_t)?;
    if let Some(c) = carry {
        c.ensure_shape("token_gate_scores carry", x.rows(), k)?;
        gate.w_g.ensure_shape("token_gate_scores w_g", k, k)?;
        scores.add_assign(&c.matmul_t(&gate.w_g)?)?;
    }
    Ok(scores)
}

/// Row-wise softmax of raw gate scores.
pub fn token_selection_probs<S: Scalar>(raw: &DenseMatrix<S>) -> Result<DenseMatrix<S>> {
    let mut p = raw.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r))?;
    }
    Ok(p)
}

/// `sign(s_t − λ·W_e)` elementwise, with exact zero mapped to 0.
pub fn expert_gate_decision<S: Scalar>(s_t: &[S], gate: &ExpertGate<S>) -> Vec<i8> {
    s_t.iter()
        .zip(gate.w_e.data())
        .map(|(&p, &w)| {
            let u = p - gate.lambda * w;
            if u > S::zero() {
                1
            } else if u < S::zero() {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Passes `s_t` through where the expert accepted; falls back to the argmax
/// expert when nobody accepted.
pub fn select_experts<S: Scalar>(s_t: &[S], s_e: &[i8]) -> Vec<S> {
    let mut g: Vec<S> = s_t
        .iter()
        .zip(s_e)
        .map(|(&p, &d)| if d > 0 { p } else { S::zero() })
        .collect();
    if s_e.iter().all(|&d| d <= 0) {
        if let Some(k) = argmax(s_t) {
            g[k] = s_t[k];
        }
    }
    g
}

/// Per-layer expert activation counts (`rows × K`) plus tokens seen per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    rows: usize,
    experts: usize,
    counts: Vec<u64>,
    tokens: Vec<u64>,
}

impl SelectionMatrix {
    pub fn new(rows: usize, experts: usize) -> Self {
        Self {
            rows,
            experts,
            counts: vec![0; rows * experts],
            tokens: vec![0; rows],
        }
    }

    pub fn from_counts(rows: usize, experts: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * experts {
            return Err(Error::LengthMismatch {
                context: "SelectionMatrix::from_counts",
                left: rows * experts,
                right: counts.len(),
            });
        }
        Ok(Self {
            rows,
            experts,
            counts,
            tokens: vec![0; rows],
        })
    }

    pub fn layers(&self) -> usize {
        self.rows
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, layer: usize) -> &[u64] {
        &self.counts[layer * self.experts..(layer + 1) * self.experts]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tokens_seen(&self, layer: usize) -> u64 {
        self.tokens[layer]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.tokens.iter_mut().for_each(|c| *c = 0);
    }

    /// Adds one activation per (token, active expert) of `routing`.
    pub fn record(&mut self, layer: usize, routing: &DenseMatrix<impl Scalar>) -> Result<()> {
        if layer >= self.rows {
            return Err(Error::OutOfRange {
                context: "SelectionMatrix::record",
                index: layer,
                len: self.rows,
            });
        }
        if routing.cols() != self.experts {
            return Err(Error::LengthMismatch {
                context: "SelectionMatrix::record",
                left: self.experts,
                right: routing.cols(),
            });
        }
        for t in 0..routing.rows() {
            for (k, g) in routing.row(t).iter().enumerate() {
                if *g > num_traits::Zero::zero() {
                    self.counts[layer * self.experts + k] += 1;
                }
            }
        }
        self.tokens[layer] += routing.rows() as u64;
        Ok(())
    }

    /// Elementwise sum; used to pool counts of several forwards.
    pub fn merge(&mut self, other: &SelectionMatrix) -> Result<()> {
        if (self.rows, self.experts) != (other.rows, other.experts) {
            return Err(Error::ShapeMismatch {
                context: "SelectionMatrix::merge",
                expected: (self.rows, self.experts),
                got: (other.rows, other.experts),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.tokens.iter_mut().zip(&other.tokens) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

/// Average number of active experts per token, per layer and averaged over layers.
pub fn density_per_token(selection: &SelectionMatrix, tokens_processed: u64) -> Result<Density> {
    if tokens_processed == 0 {
        return Err(Error::Empty("density_per_token: zero tokens"));
    }
    let per_layer: Vec<f64> = (0..selection.layers())
        .map(|l| selection.row(l).iter().sum::<u64>() as f64 / tokens_processed as f64)
        .collect();
    let overall = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    };
    Ok(Density { per_layer, overall })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgmoeLayer<S> {
    pub token_gate: TokenGate<S>,
    pub expert_gate: ExpertGate<S>,
    pub experts: Vec<ExpertFfn<S>>,
    pub ste_band: S,
}

#[derive(Debug, Clone)]
struct ExpertCache<S> {
    tokens: Vec<usize>,
    input: DenseMatrix<S>,
    ffn: FeedForwardCache<S>,
    output: DenseMatrix<S>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct DgmoeCache<S> {
    x: DenseMatrix<S>,
    carry: Option<DenseMatrix<S>>,
    probs: DenseMatrix<S>,
    weights: DenseMatrix<S>,
    experts: Vec<Option<ExpertCache<S>>>,
}

impl<S: Scalar> DgmoeCache<S> {
    /// Softmax probabilities `s_t` (`tokens × K`).
    pub fn probs(&self) -> &DenseMatrix<S> {
        &self.probs
    }

    /// Final expert weights `g` (`tokens × K`).
    pub fn weights(&self) -> &DenseMatrix<S> {
        &self.weights
    }
}

#[derive(Debug, Clone)]
pub struct DgmoeForward<S> {
    pub output: DenseMatrix<S>,
    /// raw gate scores, to be passed to the next layer as its carry
    pub scores: DenseMatrix<S>,
    pub cache: DgmoeCache<S>,
}

#[derive(Debug, Clone)]
pub struct DgmoeBackward<S> {
    pub dx: DenseMatrix<S>,
    /// gradient w.r.t. the incoming carry, when one was supplied
    pub dcarry: Option<DenseMatrix<S>>,
}

impl<S: Scalar> DgmoeLayer<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &DgmoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let k = cfg.experts;
        Ok(Self {
            token_gate: TokenGate {
                w_t: init_normal(k, d, (1.0 / d as f64).sqrt(), rng),
                w_g: DenseMatrix::zeros(k, k),
            },
            expert_gate: ExpertGate {
                w_e: DenseMatrix::from_vec(1, k, vec![S::lit(cfg.threshold_init); k])?,
                lambda: S::lit(cfg.lambda),
            },
            experts: (0..k)
                .map(|_| ExpertFfn::new(d, d * cfg.hidden_mult, rng))
                .collect(),
            ste_band: S::lit(cfg.ste_band),
        })
    }

    /// Experts whose threshold margin falls inside the straight-through band
    /// for at least one token of `cache`.
    pub fn thresholds_in_band(&self, cache: &DgmoeCache<S>) -> Vec<bool> {
        let lambda = self.expert_gate.lambda;
        (0..self.num_experts())
            .map(|k| {
                (0..cache.probs.rows()).any(|t| {
                    (cache.probs.get(t, k) - lambda * self.expert_gate.w_e.data()[k]).abs() <= self.ste_band
                })
            })
            .collect()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.token_gate.w_t.cols()
    }

    /// Gate computation shared by the sparse and dense paths: returns `(scores, s_t, g)`.
    fn route(
        &self,
        x: &DenseMatrix<S>,
        carry: Option<&DenseMatrix<S>>,
    ) -> Result<(DenseMatrix<S>, DenseMatrix<S>, DenseMatrix<S>)> {
        let scores = token_gate_scores(x, &self.token_gate, carry)?;
        let probs = token_selection_probs(&scores)?;
        let mut weights = DenseMatrix::zeros(x.rows(), self.num_experts());
        for t in 0..x.rows() {
            let s_e = expert_gate_decision(probs.row(t), &self.expert_gate);
            let g = select_experts(probs.row(t), &s_e);
            weights.row_mut(t).copy_from_slice(&g);
        }
        Ok((scores, probs, weights))
    }

    /// Sparse forward: only experts with a positive weight are evaluated.
    pub fn forward(
        &self,
        x: &DenseMatrix<S>,
        carry: Option<&GateScoreCarry<S>>,
        selection: Option<&mut SelectionMatrix>,
        layer: usize,
    ) -> Result<DgmoeForward<S>> {
        let (scores, probs, weights) = self.route(x, carry)?;
        let d = self.dim();
        let mut output = DenseMatrix::zeros(x.rows(), d);
        let mut caches = Vec::with_capacity(self.num_experts());
        for (k, expert) in self.experts.iter().enumerate() {
            let tokens: Vec<usize> = (0..x.rows())
                .filter(|&t| weights.get(t, k) > S::zero())
                .collect();
            if tokens.is_empty() {
                caches.push(None);
                continue;
            }
            let input = x.select_rows(&tokens)?;
            let (out, ffn) = expert.forward(&input)?;
            for (i, &t) in tokens.iter().enumerate() {
                let g = weights.get(t, k);
                for (y, &e) in output.row_mut(t).iter_mut().zip(out.row(i)) {
                    *y += g * e;
                }
            }
            caches.push(Some(ExpertCache {
                tokens,
                input,
                ffn,
                output: out,
            }));
        }
        if let Some(sel) = selection {
            sel.record(layer, &weights)?;
        }
        if !output.is_finite() {
            return Err(Error::NonFinite("dgmoe forward"));
        }
        Ok(DgmoeForward {
            output,
            scores,
            cache: DgmoeCache {
                x: x.clone(),
                carry: carry.cloned(),
                probs,
                weights,
                experts: caches,
            },
        })
    }

    /// Reference path: evaluates every expert on every token and masks with `g`.
    pub fn forward_masked_dense(
        &self,
        x: &DenseMatrix<S>,
        carry: Option<&GateScoreCarry<S>>,
    ) -> Result<DenseMatrix<S>> {
        let (_, _, weights) = self.route(x, carry)?;
        let outs: Vec<DenseMatrix<S>> = self
            .experts
            .iter()
            .map(|e| e.forward(x).map(|(y, _)| y))
            .collect::<Result<_>>()?;
        let mut output = DenseMatrix::zeros(x.rows(), self.dim());
        for t in 0..x.rows() {
            for (k, out) in outs.iter().enumerate() {
                let g = weights.get(t, k);
                for (y, &e) in output.row_mut(t).iter_mut().zip(out.row(t)) {
                    *y += g * e;
                }
            }
        }
        Ok(output)
    }

    /// Backpropagates `dy` (and the gradient arriving on this layer's raw
    /// scores through the next layer's carry) and accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &DgmoeCache<S>,
        dy: &DenseMatrix<S>,
        dscores: Option<&DenseMatrix<S>>,
        grads: &mut DgmoeLayer<S>,
    ) -> Result<DgmoeBackward<S>> {
        let n = cache.x.rows();
        let k_total = self.num_experts();
        dy.ensure_shape("dgmoe backward dy", n, self.dim())?;
        let mut dx = DenseMatrix::zeros(n, self.dim());
        // dL/dp through the active experts' weights g_k = p_k
        let mut dp = DenseMatrix::zeros(n, k_total);
        // dy_t · E_k(x_t) for active experts
        let mut proj = DenseMatrix::zeros(n, k_total);

        for (k, ec) in cache.experts.iter().enumerate() {
            let Some(ec) = ec else { continue };
            let mut dout = DenseMatrix::zeros(ec.tokens.len(), self.dim());
            for (i, &t) in ec.tokens.iter().enumerate() {
                let g = cache.weights.get(t, k);
                for (o, &d) in dout.row_mut(i).iter_mut().zip(dy.row(t)) {
                    *o = g * d;
                }
                let q = dot(dy.row(t), ec.output.row(i));
                proj.set(t, k, q);
                dp.set(t, k, q);
            }
            let dxk = self.experts[k].backward(&ec.input, &ec.ffn, &dout, &mut grads.experts[k])?;
            for (i, &t) in ec.tokens.iter().enumerate() {
                for (a, &b) in dx.row_mut(t).iter_mut().zip(dxk.row(i)) {
                    *a += b;
                }
            }
        }

        // straight-through surrogate for the thresholds
        let lambda = self.expert_gate.lambda;
        for k in 0..k_total {
            let threshold = lambda * self.expert_gate.w_e.data()[k];
            let mut g = S::zero();
            let mut rejected = Vec::new();
            for t in 0..n {
                let p = cache.probs.get(t, k);
                if (p - threshold).abs() > self.ste_band {
                    continue;
                }
                if cache.weights.get(t, k) > S::zero() {
                    g -= lambda * p * proj.get(t, k);
                } else {
                    rejected.push(t);
                }
            }
            if !rejected.is_empty() {
                // inactive experts were never evaluated on these tokens
                let (e, _) = self.experts[k].forward(&cache.x.select_rows(&rejected)?)?;
                for (i, &t) in rejected.iter().enumerate() {
                    g -= lambda * cache.probs.get(t, k) * dot(dy.row(t), e.row(i));
                }
            }
            grads.expert_gate.w_e.data_mut()[k] += g;
        }

        // softmax backward
        let mut dz = DenseMatrix::zeros(n, k_total);
        for t in 0..n {
            let p = cache.probs.row(t);
            let g = dp.row(t);
            let inner: S = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for k in 0..k_total {
                dz.set(t, k, p[k] * (g[k] - inner));
            }
        }
        if let Some(ds) = dscores {
            dz.add_assign(ds)?;
        }

        grads.token_gate.w_t.add_assign(&dz.t_matmul(&cache.x)?)?;
        dx.add_assign(&dz.matmul(&self.token_gate.w_t)?)?;
        let dcarry = match &cache.carry {
            Some(c) => {
                grads.token_gate.w_g.add_assign(&dz.t_matmul(c)?)?;
                Some(dz.matmul(&self.token_gate.w_g)?)
            }
            None => None,
        };
        Ok(DgmoeBackward { dx, dcarry })
    }
}

impl<S: Scalar> Params<S> for DgmoeLayer<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        let mut out = vec![
            ("gate.w_t".to_string(), &self.token_gate.w_t),
            ("gate.w_g".to_string(), &self.token_gate.w_g),
            ("gate.w_e".to_string(), &self.expert_gate.w_e),
        ];
        for (k, e) in self.experts.iter().enumerate() {
            out.extend(prefixed(&format!("expert{k}"), e.named()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        let mut out = vec![
            &mut self.token_gate.w_t,
            &mut self.token_gate.w_g,
            &mut self.expert_gate.w_e,
        ];
        for e in &mut self.experts {
            out.extend(e.tensors_mut());
        }
        out
    }
}

/// Hidden width of a dense FFN whose parameter count matches a dual-gated
/// layer built from `cfg`.
pub fn matched_dense_hidden(cfg: &DgmoeConfig) -> usize {
    let d = cfg.dim;
    let k = cfg.experts;
    let h = d * cfg.hidden_mult;
    let expert = 2 * h * d + h + d;
    let moe_total = k * expert + k * d + k * k + k;
    ((moe_total - d) as f64 / (2 * d + 1) as f64).round().max(1.0) as usize
}

/// Feed-forward sublayer: either a dual-gated mixture or a single dense FFN.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnBlock<S> {
    Moe(DgmoeLayer<S>),
    Dense(FeedForward<S>),
}

#[derive(Debug, Clone)]
pub enum FfnBlockCache<S> {
    Moe(DgmoeCache<S>),
    Dense {
        x: DenseMatrix<S>,
        cache: FeedForwardCache<S>,
    },
}

#[derive(Debug, Clone)]
pub struct FfnBlockForward<S> {
    pub output: DenseMatrix<S>,
    /// raw gate scores for the next layer; `None` for dense blocks
    pub scores: Option<DenseMatrix<S>>,
    pub cache: FfnBlockCache<S>,
}

impl<S: Scalar> FfnBlock<S> {
    /// Builds a dual-gated layer, or its parameter-matched dense replacement.
    pub fn new<R: Rng + ?Sized>(cfg: &DgmoeConfig, dense: bool, rng: &mut R) -> Result<Self> {
        if dense {
            cfg.validate()?;
            Ok(FfnBlock::Dense(FeedForward::new(cfg.dim, matched_dense_hidden(cfg), rng)))
        } else {
            DgmoeLayer::new(cfg, rng).map(FfnBlock::Moe)
        }
    }

    pub fn as_moe(&self) -> Option<&DgmoeLayer<S>> {
        match self {
            FfnBlock::Moe(l) => Some(l),
            FfnBlock::Dense(_) => None,
        }
    }

    pub fn forward(
        &self,
        x: &DenseMatrix<S>,
        carry: Option<&GateScoreCarry<S>>,
        selection: Option<&mut SelectionMatrix>,
        row: usize,
    ) -> Result<FfnBlockForward<S>> {
        match self {
            FfnBlock::Moe(l) => {
                let f = l.forward(x, carry, selection, row)?;
                Ok(FfnBlockForward {
                    output: f.output,
                    scores: Some(f.scores),
                    cache: FfnBlockCache::Moe(f.cache),
                })
            }
            FfnBlock::Dense(ff) => {
                let (output, cache) = ff.forward(x)?;
                Ok(FfnBlockForward {
                    output,
                    scores: None,
                    cache: FfnBlockCache::Dense { x: x.clone(), cache },
                })
            }
        }
    }

    pub fn backward(
        &self,
        cache: &FfnBlockCache<S>,
        dy: &DenseMatrix<S>,
        dscores: Option<&DenseMatrix<S>>,
        grads: &mut FfnBlock<S>,
    ) -> Result<DgmoeBackward<S>> {
        match (self, cache, grads) {
            (FfnBlock::Moe(l), FfnBlockCache::Moe(c), FfnBlock::Moe(g)) => l.backward(c, dy, dscores, g),
            (FfnBlock::Dense(ff), FfnBlockCache::Dense { x, cache }, FfnBlock::Dense(g)) => Ok(DgmoeBackward {
                dx: ff.backward(x, cache, dy, g)?,
                dcarry: None,
            }),
            _ => Err(Error::invalid("ffn block / cache / gradient kinds differ")),
        }
    }
}

impl<S: Scalar> Params<S> for FfnBlock<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        match self {
            FfnBlock::Moe(l) => l.named(),
            FfnBlock::Dense(ff) => prefixed("dense", ff.named()),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        match self {
            FfnBlock::Moe(l) => l.tensors_mut(),
            FfnBlock::Dense(ff) => ff.tensors_mut(),
        }
    }
}
