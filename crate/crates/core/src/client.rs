//! Client model (stem, trunk, head) and the local training loop.
//!
//! The stem embeds proprioception, parses the scene into object groups and
//! refines each group with a shared feed-forward block. The trunk is a stack
//! of pre-norm transformer blocks whose feed-forward sublayer is a dual-gated
//! mixture; raw gate scores are threaded from one block to the next. The head
//! pools the trunk output with a learned query and maps it to an action
//! sequence. Only the trunk is ever sent to the server.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgmoe::{
    density_per_token, Density, DgmoeConfig, FfnBlock, FfnBlockCache, SelectionMatrix,
};
use crate::error::{Error, Result};
use crate::kernel::{
    adam_update, finite_diff_grad, huber_loss, AdamConfig, AdamState, DenseMatrix,
};
use crate::nn::{
    init_normal, linear, linear_backward, AttentionCache, AttentionPool, LayerNorm,
    LayerNormCache, MultiHeadAttention, PoolCache,
};
use crate::params::{prefixed, Params};
use crate::scalar::Scalar;
use crate::scene::{
    parse_scene, EmbeddingProvider, GroupKind, Observation, ParsedScene, SceneConfig, SceneInput,
};
use crate::tensor_io::{self, NamedTensor};

/// Mixes an experiment seed with a client id and a round index.
///
/// Unlike a plain xor, distinct `(client, round)` pairs never alias.
pub fn derive_seed(seed: u64, client: u64, round: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ client) ^ round.rotate_left(32))
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub experts: usize,
    pub heads: usize,
    pub action_dim: usize,
    /// action steps predicted per sample
    pub horizon: usize,
    pub proprio_dim: usize,
    /// `false` replaces every mixture with a parameter-matched dense FFN;
    /// driven by the experiment's ablation switches rather than config files
    #[serde(skip, default = "enabled")]
    pub use_dgmoe: bool,
    pub hidden_mult: usize,
    pub lambda: f64,
    pub ste_band: f64,
    pub threshold_init: f64,
    pub scene: SceneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            experts: 8,
            heads: 2,
            action_dim: 4,
            horizon: 4,
            proprio_dim: 8,
            use_dgmoe: true,
            hidden_mult: 4,
            lambda: 0.5,
            ste_band: 0.1,
            threshold_init: 0.5,
            scene: SceneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn dgmoe(&self) -> DgmoeConfig {
        DgmoeConfig {
            dim: self.dim,
            experts: self.experts,
            hidden_mult: self.hidden_mult,
            lambda: self.lambda,
            ste_band: self.ste_band,
            threshold_init: self.threshold_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("experts", self.experts),
            ("heads", self.heads),
            ("action_dim", self.action_dim),
            ("horizon", self.horizon),
            ("proprio_dim", self.proprio_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be >= 1")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model.dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.scene.tau > 0.0 && self.scene.tau < 1.0) {
            return Err(Error::invalid("scene.tau must lie in (0, 1)"));
        }
        self.dgmoe().validate()
    }
}

/// One training example: observation, instruction, proprioception and the
/// target action sequence (`horizon × A`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<S> {
    pub observation: Observation<S>,
    pub instruction: String,
    pub proprio: Vec<S>,
    pub actions: DenseMatrix<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn is_finite(&self) -> bool {
        self.observation.tokens.is_finite()
            && self.actions.is_finite()
            && self.proprio.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("local_epochs and batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(self.huber_delta > 0.0) {
            return Err(Error::invalid("lr must be >= 0 and huber_delta > 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Personalized input side.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem<S> {
    /// `D × P`
    pub proprio_w: DenseMatrix<S>,
    pub proprio_b: DenseMatrix<S>,
    /// one learned row per [`GroupKind`]
    pub segment: DenseMatrix<S>,
    /// shared refinement block applied to every object group
    pub refiner: FfnBlock<S>,
}

impl<S: Scalar> Stem<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            proprio_w: init_normal(d, cfg.proprio_dim, (1.0 / cfg.proprio_dim as f64).sqrt(), rng),
            proprio_b: DenseMatrix::zeros(1, d),
            segment: init_normal(5, d, 0.1, rng),
            refiner: FfnBlock::new(&cfg.dgmoe(), !cfg.use_dgmoe, rng)?,
        })
    }
}

impl<S: Scalar> Params<S> for Stem<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        let mut out = vec![
            ("proprio.w".to_string(), &self.proprio_w),
            ("proprio.b".to_string(), &self.proprio_b),
            ("segment".to_string(), &self.segment),
        ];
        out.extend(prefixed("refiner", self.refiner.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        let mut out = vec![&mut self.proprio_w, &mut self.proprio_b, &mut self.segment];
        out.extend(self.refiner.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkBlock<S> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: FfnBlock<S>,
}

impl<S: Scalar> Params<S> for TrunkBlock<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        let mut out = prefixed("ln1", self.ln1.named());
        out.extend(prefixed("attn", self.attn.named()));
        out.extend(prefixed("ln2", self.ln2.named()));
        out.extend(prefixed("ffn", self.ffn.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        let mut out = self.ln1.tensors_mut();
        out.extend(self.attn.tensors_mut());
        out.extend(self.ln2.tensors_mut());
        out.extend(self.ffn.tensors_mut());
        out
    }
}

/// Federated body. Tensor names start with the block index (`"2.attn.wq"`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk<S> {
    pub blocks: Vec<TrunkBlock<S>>,
}

impl<S: Scalar> Trunk<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|_| {
                Ok(TrunkBlock {
                    ln1: LayerNorm::new(cfg.dim),
                    attn: MultiHeadAttention::new(cfg.dim, cfg.heads, rng)?,
                    ln2: LayerNorm::new(cfg.dim),
                    ffn: FfnBlock::new(&cfg.dgmoe(), !cfg.use_dgmoe, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn snapshot(&self) -> Vec<NamedTensor> {
        tensor_io::snapshot(self)
    }

    pub fn hash(&self) -> String {
        tensor_io::hash_params(self)
    }

    /// Overwrites this trunk with `tensors`; names and shapes must match.
    pub fn load(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        tensor_io::restore(self, tensors)
    }
}

impl<S: Scalar> Params<S> for Trunk<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| prefixed(&l.to_string(), b.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }
}

/// Personalized action decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S> {
    pub norm: LayerNorm<S>,
    pub pool: AttentionPool<S>,
    /// `(horizon·A) × D`
    pub out_w: DenseMatrix<S>,
    pub out_b: DenseMatrix<S>,
}

impl<S: Scalar> Head<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let out = cfg.horizon * cfg.action_dim;
        Self {
            norm: LayerNorm::new(cfg.dim),
            pool: AttentionPool::new(cfg.dim),
            out_w: init_normal(out, cfg.dim, (1.0 / cfg.dim as f64).sqrt(), rng),
            out_b: DenseMatrix::zeros(1, out),
        }
    }
}

impl<S: Scalar> Params<S> for Head<S> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)> {
        let mut out = prefixed("norm", self.norm.named());
        out.extend(prefixed("pool", self.pool.named()));
        out.push(("out.w".to_string(), &self.out_w));
        out.push(("out.b".to_string(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>> {
        let mut out = self.norm.tensors_mut();
        out.extend(self.pool.tensors_mut());
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

/// Gradient buffers with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub stem: Stem<S>,
    pub trunk: Trunk<S>,
    pub head: Head<S>,
}

/// Expert activation counts accumulated over training forwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    /// `L × K`
    pub trunk: SelectionMatrix,
    /// `3 × K`, rows in target / surrounding / background order
    pub stem: SelectionMatrix,
    /// tokens pushed through each trunk layer
    pub trunk_tokens: u64,
}

impl RoutingCounts {
    pub fn new(layers: usize, experts: usize) -> Self {
        Self {
            trunk: SelectionMatrix::new(layers, experts),
            stem: SelectionMatrix::new(GroupKind::ENHANCED.len(), experts),
            trunk_tokens: 0,
        }
    }

    pub fn reset(&mut self) {
        self.trunk.reset();
        self.stem.reset();
        self.trunk_tokens = 0;
    }

    /// Trunk density per token; zero when nothing has been routed.
    pub fn density(&self) -> Density {
        density_per_token(&self.trunk, self.trunk_tokens).unwrap_or(Density {
            per_layer: vec![0.0; self.trunk.layers()],
            overall: 0.0,
        })
    }
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    ffn: FfnBlockCache<S>,
    has_carry_out: bool,
}

/// Activations retained for [`ClientModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    scene: ParsedScene<S>,
    proprio: DenseMatrix<S>,
    blocks: Vec<BlockCache<S>>,
    head_norm: LayerNormCache<S>,
    pool: PoolCache<S>,
    pooled: DenseMatrix<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Trunk feed-forward caches, one per layer.
    pub fn ffn_caches(&self) -> impl Iterator<Item = &FfnBlockCache<S>> {
        self.blocks.iter().map(|b| &b.ffn)
    }

    pub fn tokens(&self) -> usize {
        self.scene.tokens.rows()
    }
}

#[derive(Debug, Clone)]
pub struct ClientModel<S: Scalar> {
    pub config: ModelConfig,
    pub stem: Stem<S>,
    pub trunk: Trunk<S>,
    pub head: Head<S>,
    /// object names the instruction parser can recognize
    pub vocabulary: Vec<String>,
    pub provider: Arc<dyn EmbeddingProvider<S>>,
}

impl<S: Scalar> ClientModel<S> {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        provider: Arc<dyn EmbeddingProvider<S>>,
        vocabulary: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if provider.dim() != config.dim {
            return Err(Error::invalid(format!(
                "embedding provider dim {} differs from model dim {}",
                provider.dim(),
                config.dim
            )));
        }
        Ok(Self {
            stem: Stem::new(&config, rng)?,
            trunk: Trunk::new(&config, rng)?,
            head: Head::new(&config, rng),
            config,
            vocabulary,
            provider,
        })
    }

    pub fn zero_gradients(&self) -> Gradients<S> {
        Gradients {
            stem: self.stem.zeroed(),
            trunk: self.trunk.zeroed(),
            head: self.head.zeroed(),
        }
    }

    /// Predicted action sequence (`horizon × A`). Never touches routing counts.
    pub fn forward(&self, sample: &Sample<S>) -> Result<DenseMatrix<S>> {
        self.forward_train(sample, None).map(|(y, _)| y)
    }

    /// Forward pass that keeps activations and optionally records routing.
    pub fn forward_train(
        &self,
        sample: &Sample<S>,
        mut counts: Option<&mut RoutingCounts>,
    ) -> Result<(DenseMatrix<S>, ForwardCache<S>)> {
        let cfg = &self.config;
        if sample.proprio.len() != cfg.proprio_dim {
            return Err(Error::LengthMismatch {
                context: "forward: proprioception",
                left: cfg.proprio_dim,
                right: sample.proprio.len(),
            });
        }
        let proprio = DenseMatrix::row_vector(sample.proprio.clone());
        let proprio_tokens = linear(&proprio, &self.stem.proprio_w, Some(&self.stem.proprio_b))?;
        let scene = parse_scene(
            SceneInput {
                observation: &sample.observation,
                instruction: &sample.instruction,
                vocabulary: &self.vocabulary,
                proprio_tokens: &proprio_tokens,
            },
            self.provider.as_ref(),
            Some(&self.stem.refiner),
            counts.as_deref_mut().map(|c| &mut c.stem),
            &cfg.scene,
        )?;

        let mut x = scene.tokens.clone();
        for (r, kind) in scene.kinds.iter().enumerate() {
            let seg = self.stem.segment.row(kind.index());
            for (v, &s) in x.row_mut(r).iter_mut().zip(seg) {
                *v += s;
            }
        }

        let mut carry: Option<DenseMatrix<S>> = None;
        let mut blocks = Vec::with_capacity(self.trunk.layers());
        for (l, block) in self.trunk.blocks.iter().enumerate() {
            let (a, ln1) = block.ln1.forward(&x)?;
            let (m, attn) = block.attn.forward(&a)?;
            let h = x.add(&m)?;
            let (b, ln2) = block.ln2.forward(&h)?;
            let f = block.ffn.forward(
                &b,
                carry.as_ref(),
                counts.as_deref_mut().map(|c| &mut c.trunk),
                l,
            )?;
            x = h.add(&f.output)?;
            blocks.push(BlockCache {
                ln1,
                attn,
                ln2,
                ffn: f.cache,
                has_carry_out: f.scores.is_some(),
            });
            carry = f.scores;
        }
        if let Some(c) = counts {
            c.trunk_tokens += x.rows() as u64;
        }

        let (z, head_norm) = self.head.norm.forward(&x)?;
        let (pooled, pool) = self.head.pool.forward(&z)?;
        let pooled = DenseMatrix::row_vector(pooled);
        let flat = linear(&pooled, &self.head.out_w, Some(&self.head.out_b))?;
        let y = DenseMatrix::from_vec(cfg.horizon, cfg.action_dim, flat.into_vec())?;
        if !y.is_finite() {
            return Err(Error::NonFinite("client forward"));
        }
        Ok((
            y,
            ForwardCache {
                scene,
                proprio,
                blocks,
                head_norm,
                pool,
                pooled,
            },
        ))
    }

    /// Backpropagates `dy` (`horizon × A`) and accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        dy: &DenseMatrix<S>,
        grads: &mut Gradients<S>,
    ) -> Result<()> {
        let cfg = &self.config;
        dy.ensure_shape("client backward", cfg.horizon, cfg.action_dim)?;
        let dflat = DenseMatrix::row_vector(dy.data().to_vec());
        let dpooled = linear_backward(
            &cache.pooled,
            &self.head.out_w,
            &dflat,
            &mut grads.head.out_w,
            Some(&mut grads.head.out_b),
        )?;
        let dz = self.head.pool.backward(&cache.pool, dpooled.row(0), &mut grads.head.pool)?;
        let mut dx = self.head.norm.backward(&cache.head_norm, &dz, &mut grads.head.norm)?;

        let mut dscores: Option<DenseMatrix<S>> = None;
        for l in (0..self.trunk.layers()).rev() {
            let block = &self.trunk.blocks[l];
            let bc = &cache.blocks[l];
            let g = &mut grads.trunk.blocks[l];
            let incoming = if bc.has_carry_out { dscores.take() } else { None };
            let fb = block.ffn.backward(&bc.ffn, &dx, incoming.as_ref(), &mut g.ffn)?;
            let mut dh = dx;
            dh.add_assign(&block.ln2.backward(&bc.ln2, &fb.dx, &mut g.ln2)?)?;
            let da = block.attn.backward(&bc.attn, &dh, &mut g.attn)?;
            dx = dh;
            dx.add_assign(&block.ln1.backward(&bc.ln1, &da, &mut g.ln1)?)?;
            dscores = fb.dcarry;
        }

        for (r, kind) in cache.scene.kinds.iter().enumerate() {
            let seg = grads.stem.segment.row_mut(kind.index());
            for (s, &d) in seg.iter_mut().zip(dx.row(r)) {
                *s += d;
            }
        }
        for block in &cache.scene.enhanced {
            let rows = cache
                .scene
                .kinds
                .iter()
                .skip(block.start)
                .take_while(|k| **k == block.kind)
                .count();
            let idx: Vec<usize> = (block.start..block.start + rows).collect();
            let dgroup = dx.select_rows(&idx)?;
            // image tokens are inputs, so only the refiner's parameters need gradients
            self.stem
                .refiner
                .backward(&block.cache, &dgroup, None, &mut grads.stem.refiner)?;
        }
        let p = cache.proprio.rows();
        let n = dx.rows();
        let dprop = dx.select_rows(&((n - p)..n).collect::<Vec<_>>())?;
        linear_backward(
            &cache.proprio,
            &self.stem.proprio_w,
            &dprop,
            &mut grads.stem.proprio_w,
            Some(&mut grads.stem.proprio_b),
        )?;
        Ok(())
    }

    /// Mean Huber loss over `batch` and its gradient, averaged over samples.
    pub fn loss_and_grads(
        &self,
        batch: &[&Sample<S>],
        delta: S,
        mut counts: Option<&mut RoutingCounts>,
    ) -> Result<(S, Gradients<S>)> {
        if batch.is_empty() {
            return Err(Error::Empty("loss_and_grads: batch"));
        }
        let inv_b = S::one() / S::lit(batch.len() as f64);
        let mut grads = self.zero_gradients();
        let mut total = S::zero();
        for sample in batch {
            let (pred, cache) = self.forward_train(sample, counts.as_deref_mut())?;
            let (loss, g) = huber_loss(pred.data(), sample.actions.data(), delta)?;
            total += loss;
            let mut dy = DenseMatrix::from_vec(pred.rows(), pred.cols(), g)?;
            dy.scale(inv_b);
            self.backward(&cache, &dy, &mut grads)?;
        }
        Ok((total * inv_b, grads))
    }

    /// Mean Huber loss over `samples`; a pure function of the model.
    pub fn evaluate(&self, samples: &[Sample<S>], delta: S) -> Result<S> {
        if samples.is_empty() {
            return Err(Error::Empty("evaluate: validation set"));
        }
        let mut total = S::zero();
        for s in samples {
            let pred = self.forward(s)?;
            total += huber_loss(pred.data(), s.actions.data(), delta)?.0;
        }
        Ok(total / S::lit(samples.len() as f64))
    }

    /// Replaces the trunk; stem and head are left untouched.
    pub fn apply_global_trunk(&mut self, trunk: &Trunk<S>) -> Result<()> {
        let ours: Vec<String> = self.trunk.named().into_iter().map(|(n, _)| n).collect();
        let theirs: Vec<String> = trunk.named().into_iter().map(|(n, _)| n).collect();
        if ours != theirs {
            return Err(Error::invalid("global trunk layout differs from the local trunk"));
        }
        self.trunk.copy_from(trunk)
    }
}

/// One entry of a finite-difference check on trunk parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// expert threshold whose gate margin is inside the straight-through band
    pub in_band: bool,
}

/// Compares analytic trunk gradients of the Huber loss on `sample` against
/// central differences with step `eps`.
pub fn trunk_gradient_check<S: Scalar>(
    model: &ClientModel<S>,
    sample: &Sample<S>,
    delta: S,
    eps: S,
) -> Result<Vec<GradCheckEntry>> {
    let (_, grads) = model.loss_and_grads(&[sample], delta, None)?;
    let (_, cache) = model.forward_train(sample, None)?;
    let mut band: Vec<(String, Vec<bool>)> = Vec::new();
    for (l, (block, ffn_cache)) in model.trunk.blocks.iter().zip(cache.ffn_caches()).enumerate() {
        if let (FfnBlock::Moe(layer), FfnBlockCache::Moe(c)) = (&block.ffn, ffn_cache) {
            band.push((format!("{l}.ffn.gate.w_e"), layer.thresholds_in_band(c)));
        }
    }

    let analytic: Vec<(String, Vec<S>)> = grads
        .trunk
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut out = Vec::new();
    for (ti, (name, an)) in analytic.iter().enumerate() {
        let base: Vec<S> = model.trunk.named()[ti].1.data().to_vec();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |x: &[S]| {
                probe.trunk.tensors_mut()[ti].data_mut().copy_from_slice(x);
                let pred = probe.forward(sample).expect("forward");
                huber_loss(pred.data(), sample.actions.data(), delta).expect("loss").0
            },
            &base,
            eps,
        )?;
        let flags = band.iter().find(|(n, _)| n == name).map(|(_, f)| f);
        for (i, (a, n)) in an.iter().zip(&numeric).enumerate() {
            out.push(GradCheckEntry {
                name: name.clone(),
                index: i,
                analytic: a.as_f64(),
                numeric: n.as_f64(),
                in_band: flags.is_some_and(|f| f[i]),
            });
        }
    }
    Ok(out)
}

/// Adam moments for every tensor of one component.
#[derive(Debug, Clone, PartialEq)]
struct ComponentOptimizer<S> {
    states: Vec<AdamState<S>>,
}

impl<S: Scalar> ComponentOptimizer<S> {
    fn new<P: Params<S>>(params: &P) -> Self {
        Self {
            states: params.named().iter().map(|(_, t)| AdamState::new(t.len())).collect(),
        }
    }

    fn step<P: Params<S>>(&mut self, params: &mut P, grads: &P, cfg: &AdamConfig) -> Result<()> {
        let gs: Vec<&DenseMatrix<S>> = grads.named().into_iter().map(|(_, t)| t).collect();
        for ((p, g), st) in params.tensors_mut().into_iter().zip(gs).zip(&mut self.states) {
            adam_update(p.data_mut(), g.data(), st, cfg)?;
        }
        Ok(())
    }

    fn to_saved(&self) -> Vec<SavedAdam> {
        self.states
            .iter()
            .map(|s| SavedAdam {
                m: s.m.iter().map(|v| v.as_f64()).collect(),
                v: s.v.iter().map(|v| v.as_f64()).collect(),
                step: s.step,
            })
            .collect()
    }

    fn from_saved(saved: &[SavedAdam], like: &Self) -> Result<Self> {
        if saved.len() != like.states.len()
            || saved.iter().zip(&like.states).any(|(a, b)| a.m.len() != b.m.len() || a.v.len() != b.v.len())
        {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Self {
            states: saved
                .iter()
                .map(|s| AdamState {
                    m: s.m.iter().map(|&v| S::lit(v)).collect(),
                    v: s.v.iter().map(|&v| S::lit(v)).collect(),
                    step: s.step,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    client_id: usize,
    round: usize,
    stem: Vec<SavedAdam>,
    trunk: Vec<SavedAdam>,
    head: Vec<SavedAdam>,
}

/// Everything a client sends back after a round of local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate<S> {
    pub client_id: usize,
    pub trunk: Trunk<S>,
    pub counts: RoutingCounts,
    /// mean minibatch loss of the last local epoch
    pub train_loss: f64,
}

/// A federated participant: model, private data and optimizer state.
#[derive(Debug, Clone)]
pub struct Client<S: Scalar> {
    pub id: usize,
    pub model: ClientModel<S>,
    pub train: Vec<Sample<S>>,
    pub val: Vec<Sample<S>>,
    pub config: TrainConfig,
    /// last completed round
    pub round: usize,
    stem_opt: ComponentOptimizer<S>,
    trunk_opt: ComponentOptimizer<S>,
    head_opt: ComponentOptimizer<S>,
}

impl<S: Scalar> Client<S> {
    pub fn new(
        id: usize,
        model: ClientModel<S>,
        train: Vec<Sample<S>>,
        val: Vec<Sample<S>>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(bad) = train.iter().chain(&val).position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("client {id}: sample {bad} has non-finite values")));
        }
        Ok(Self {
            stem_opt: ComponentOptimizer::new(&model.stem),
            trunk_opt: ComponentOptimizer::new(&model.trunk),
            head_opt: ComponentOptimizer::new(&model.head),
            id,
            model,
            train,
            val,
            config,
            round: 0,
        })
    }

    /// Loads `global`, trains stem, trunk and head for the configured number
    /// of epochs and returns the updated trunk with this round's routing counts.
    pub fn local_train(&mut self, global: &Trunk<S>, round: usize) -> Result<LocalUpdate<S>> {
        if self.train.is_empty() {
            return Err(Error::Empty("local_train: training set"));
        }
        self.model.apply_global_trunk(global)?;
        let cfg = self.config;
        let adam = cfg.adam();
        let delta = S::lit(cfg.huber_delta);
        let mut counts = RoutingCounts::new(self.model.config.layers, self.model.config.experts);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, self.id as u64, round as u64));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut last_epoch = 0.0;
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample<S>> = chunk.iter().map(|&i| &self.train[i]).collect();
                let (loss, grads) = self.model.loss_and_grads(&batch, delta, Some(&mut counts))?;
                self.stem_opt.step(&mut self.model.stem, &grads.stem, &adam)?;
                self.trunk_opt.step(&mut self.model.trunk, &grads.trunk, &adam)?;
                self.head_opt.step(&mut self.model.head, &grads.head, &adam)?;
                sum += loss.as_f64();
                batches += 1;
            }
            last_epoch = sum / batches as f64;
        }
        self.round = round;
        Ok(LocalUpdate {
            client_id: self.id,
            trunk: self.model.trunk.clone(),
            counts,
            train_loss: last_epoch,
        })
    }

    pub fn validation_loss(&self) -> Result<f64> {
        self.model
            .evaluate(&self.val, S::lit(self.config.huber_delta))
            .map(|v| v.as_f64())
    }

    /// Writes stem, trunk and head tensors plus optimizer state into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensor_io::write_file(&dir.join("stem.dgnt"), &tensor_io::snapshot(&self.model.stem))?;
        tensor_io::write_file(&dir.join("trunk.dgnt"), &tensor_io::snapshot(&self.model.trunk))?;
        tensor_io::write_file(&dir.join("head.dgnt"), &tensor_io::snapshot(&self.model.head))?;
        let state = SavedState {
            client_id: self.id,
            round: self.round,
            stem: self.stem_opt.to_saved(),
            trunk: self.trunk_opt.to_saved(),
            head: self.head_opt.to_saved(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_vec(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a checkpoint written by [`Client::save_checkpoint`] into a
    /// client built with the same configuration.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        tensor_io::restore(&mut self.model.stem, &tensor_io::read_file(&dir.join("stem.dgnt"))?)?;
        tensor_io::restore(&mut self.model.trunk, &tensor_io::read_file(&dir.join("trunk.dgnt"))?)?;
        tensor_io::restore(&mut self.model.head, &tensor_io::read_file(&dir.join("head.dgnt"))?)?;
        let path = dir.join("state.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: SavedState = serde_json::from_slice(&bytes)?;
        if state.client_id != self.id {
            return Err(Error::Format(format!(
                "checkpoint belongs to client {}, not {}",
                state.client_id, self.id
            )));
        }
        self.stem_opt = ComponentOptimizer::from_saved(&state.stem, &self.stem_opt)?;
        self.trunk_opt = ComponentOptimizer::from_saved(&state.trunk, &self.trunk_opt)?;
        self.head_opt = ComponentOptimizer::from_saved(&state.head, &self.head_opt)?;
        self.round = state.round;
        Ok(())
    }
}
