//! Instruction-driven scene parsing.
//!
//! Objects named in the instruction become targets, other foreground
//! detections become surrounding objects and everything else is background.
//! Image tokens are then claimed greedily by the three groups (targets first)
//! according to cosine similarity with each group's text embedding, refined
//! by a shared mixture-of-experts pass and reordered as
//! `targets, surrounding, background, remaining, proprioception`.

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgmoe::{FfnBlock, FfnBlockCache, FfnBlockForward, SelectionMatrix};
use crate::error::{Error, Result};
use crate::kernel::{cosine_sim, norm, top_k_indices, DenseMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub foreground: bool,
    pub confidence: f64,
}

impl Detection {
    pub fn new(label: impl Into<String>, foreground: bool, confidence: f64) -> Result<Self> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(Error::invalid("detection label must be non-empty"));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            label,
            foreground,
            confidence,
        })
    }
}

/// A camera observation: image tokens already in model space plus detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation<S> {
    pub tokens: DenseMatrix<S>,
    pub detections: Vec<Detection>,
}

/// Source of text embeddings and image tokens.
pub trait EmbeddingProvider<S: Scalar>: Debug + Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of an object name.
    fn text_embed(&self, label: &str) -> Vec<S>;

    fn image_tokens(&self, observation: &Observation<S>) -> Result<DenseMatrix<S>>;
}

/// Deterministic provider: each label maps to a pseudo-random unit vector
/// seeded by a hash of `(seed, lowercase label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbeddingProvider {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed_f64(&self, label: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.to_lowercase().as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

impl<S: Scalar> EmbeddingProvider<S> for HashEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embed(&self, label: &str) -> Vec<S> {
        self.embed_f64(label).into_iter().map(S::lit).collect()
    }

    fn image_tokens(&self, observation: &Observation<S>) -> Result<DenseMatrix<S>> {
        let t = &observation.tokens;
        t.ensure_shape("image_tokens", t.rows(), self.dim)?;
        Ok(t.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectGroups {
    pub targets: Vec<String>,
    pub surrounding: Vec<String>,
    pub background: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Target,
    Surrounding,
    Background,
    Remaining,
    Proprio,
}

impl GroupKind {
    pub const ENHANCED: [GroupKind; 3] = [GroupKind::Target, GroupKind::Surrounding, GroupKind::Background];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Image-token indices claimed by each group; disjoint by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAssignment {
    pub target: Vec<usize>,
    pub surrounding: Vec<usize>,
    pub background: Vec<usize>,
}

impl TokenAssignment {
    pub fn group(&self, kind: GroupKind) -> &[usize] {
        match kind {
            GroupKind::Target => &self.target,
            GroupKind::Surrounding => &self.surrounding,
            GroupKind::Background => &self.background,
            _ => &[],
        }
    }

    /// Unassigned token indices in ascending order.
    pub fn remaining(&self, total: usize) -> Vec<usize> {
        let mut used = vec![false; total];
        for &i in self.target.iter().chain(&self.surrounding).chain(&self.background) {
            used[i] = true;
        }
        (0..total).filter(|&i| !used[i]).collect()
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Vocabulary labels that occur as whole words in `instruction`, ordered by
/// first appearance (case-insensitive; multi-word labels must match as a run).
pub fn extract_target_entities(instruction: &str, vocabulary: &[String]) -> Vec<String> {
    let tokens = words(instruction);
    let labels: Vec<(usize, Vec<String>)> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, l)| (i, words(l)))
        .filter(|(_, w)| !w.is_empty())
        .collect();
    let mut found: Vec<usize> = Vec::new();
    for start in 0..tokens.len() {
        for (i, lw) in &labels {
            if found.contains(i) || start + lw.len() > tokens.len() {
                continue;
            }
            if tokens[start..start + lw.len()] == lw[..] {
                found.push(*i);
            }
        }
    }
    found.into_iter().map(|i| vocabulary[i].clone()).collect()
}

/// Splits detections into target / surrounding / background labels.
pub fn categorize_objects<S: Scalar, P: EmbeddingProvider<S> + ?Sized>(
    entities: &[String],
    detections: &[Detection],
    provider: &P,
    tau: f64,
    foreground_cutoff: f64,
) -> Result<ObjectGroups> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("similarity threshold {tau} outside (0, 1)")));
    }
    let entity_embeds: Vec<Vec<S>> = entities.iter().map(|e| provider.text_embed(e)).collect();
    let tau = S::lit(tau);
    let mut groups = ObjectGroups::default();
    let mut kinds: Vec<(String, GroupKind)> = Vec::new();
    for det in detections {
        let emb = provider.text_embed(&det.label);
        let mut is_target = false;
        for e in &entity_embeds {
            if cosine_sim(&emb, e)? >= tau {
                is_target = true;
                break;
            }
        }
        let kind = if is_target {
            GroupKind::Target
        } else if det.foreground && det.confidence >= foreground_cutoff {
            GroupKind::Surrounding
        } else {
            GroupKind::Background
        };
        match kinds.iter_mut().find(|(l, _)| l == &det.label) {
            // a label keeps its highest-priority group
            Some((_, k)) => {
                if kind.index() < k.index() {
                    *k = kind;
                }
            }
            None => kinds.push((det.label.clone(), kind)),
        }
    }
    for (label, kind) in kinds {
        match kind {
            GroupKind::Target => groups.targets.push(label),
            GroupKind::Surrounding => groups.surrounding.push(label),
            _ => groups.background.push(label),
        }
    }
    Ok(groups)
}

fn group_embedding<S: Scalar, P: EmbeddingProvider<S> + ?Sized>(labels: &[String], provider: &P) -> Vec<S> {
    let mut mean = vec![S::zero(); provider.dim()];
    for l in labels {
        for (m, v) in mean.iter_mut().zip(provider.text_embed(l)) {
            *m += v;
        }
    }
    let n = norm(&mean);
    if n > S::zero() {
        mean.iter_mut().for_each(|m| *m /= n);
    }
    mean
}

/// Greedy disjoint assignment of the `m` most similar tokens to each group,
/// in priority order targets, surrounding, background.
pub fn assign_tokens_to_groups<S: Scalar, P: EmbeddingProvider<S> + ?Sized>(
    tokens: &DenseMatrix<S>,
    groups: &ObjectGroups,
    provider: &P,
    m: usize,
) -> Result<TokenAssignment> {
    if m == 0 {
        return Err(Error::invalid("tokens per group must be >= 1"));
    }
    let mut taken = vec![false; tokens.rows()];
    let mut out = TokenAssignment::default();
    for (labels, slot) in [
        (&groups.targets, &mut out.target),
        (&groups.surrounding, &mut out.surrounding),
        (&groups.background, &mut out.background),
    ] {
        if labels.is_empty() {
            continue;
        }
        let emb = group_embedding(labels, provider);
        let free: Vec<usize> = (0..tokens.rows()).filter(|&i| !taken[i]).collect();
        let sims: Vec<S> = free
            .iter()
            .map(|&i| cosine_sim(tokens.row(i), &emb))
            .collect::<Result<_>>()?;
        for pick in top_k_indices(&sims, m) {
            let idx = free[pick];
            taken[idx] = true;
            slot.push(idx);
        }
    }
    Ok(out)
}

/// One mixture-of-experts pass over a group's tokens; `None` for an empty group.
pub fn enhance_group_tokens<S: Scalar>(
    group_tokens: &DenseMatrix<S>,
    layer: &FfnBlock<S>,
    selection: Option<&mut SelectionMatrix>,
    row: usize,
) -> Result<Option<FfnBlockForward<S>>> {
    if group_tokens.rows() == 0 {
        return Ok(None);
    }
    layer.forward(group_tokens, None, selection, row).map(Some)
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// set from the experiment's ablation switches, never read from files
    #[serde(skip, default = "enabled")]
    pub enabled: bool,
    pub tau: f64,
    pub foreground_cutoff: f64,
    pub tokens_per_group: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.8,
            foreground_cutoff: 0.5,
            tokens_per_group: 8,
        }
    }
}

/// A block of output rows produced by the group refinement pass.
#[derive(Debug, Clone)]
pub struct EnhancedBlock<S> {
    pub kind: GroupKind,
    pub start: usize,
    pub cache: FfnBlockCache<S>,
}

#[derive(Debug, Clone)]
pub struct ParsedScene<S> {
    /// `[targets; surrounding; background; remaining; proprio]`
    pub tokens: DenseMatrix<S>,
    /// group of each output row
    pub kinds: Vec<GroupKind>,
    /// original image-token index of each output row (`None` for proprio rows)
    pub source: Vec<Option<usize>>,
    pub groups: ObjectGroups,
    pub assignment: TokenAssignment,
    pub enhanced: Vec<EnhancedBlock<S>>,
}

pub struct SceneInput<'a, S> {
    pub observation: &'a Observation<S>,
    pub instruction: &'a str,
    pub vocabulary: &'a [String],
    /// proprioception already embedded into model space
    pub proprio_tokens: &'a DenseMatrix<S>,
}

/// Full parsing pipeline. With parsing disabled the result is the plain
/// concatenation of raw image tokens and proprioception tokens.
pub fn parse_scene<S: Scalar, P: EmbeddingProvider<S> + ?Sized>(
    input: SceneInput<'_, S>,
    provider: &P,
    group_moe: Option<&FfnBlock<S>>,
    mut selection: Option<&mut SelectionMatrix>,
    cfg: &SceneConfig,
) -> Result<ParsedScene<S>> {
    let raw = provider.image_tokens(input.observation)?;
    if raw.rows() == 0 {
        return Err(Error::Empty("parse_scene: no image tokens"));
    }
    let t = raw.rows();
    let p = input.proprio_tokens.rows();
    if !cfg.enabled {
        let tokens = DenseMatrix::vstack(&[&raw, input.proprio_tokens])?;
        let mut kinds = vec![GroupKind::Remaining; t];
        kinds.extend(std::iter::repeat_n(GroupKind::Proprio, p));
        let mut source: Vec<Option<usize>> = (0..t).map(Some).collect();
        source.extend(std::iter::repeat_n(None, p));
        return Ok(ParsedScene {
            tokens,
            kinds,
            source,
            groups: ObjectGroups::default(),
            assignment: TokenAssignment::default(),
            enhanced: Vec::new(),
        });
    }

    let entities = extract_target_entities(input.instruction, input.vocabulary);
    let groups = categorize_objects(
        &entities,
        &input.observation.detections,
        provider,
        cfg.tau,
        cfg.foreground_cutoff,
    )?;
    let assignment = assign_tokens_to_groups(&raw, &groups, provider, cfg.tokens_per_group)?;

    let mut blocks: Vec<DenseMatrix<S>> = Vec::new();
    let mut kinds = Vec::with_capacity(t + p);
    let mut source = Vec::with_capacity(t + p);
    let mut enhanced = Vec::new();
    let mut cursor = 0;
    for kind in GroupKind::ENHANCED {
        let idx = assignment.group(kind);
        if idx.is_empty() {
            continue;
        }
        let group = raw.select_rows(idx)?;
        let refined = match group_moe {
            Some(layer) => {
                match enhance_group_tokens(&group, layer, selection.as_deref_mut(), kind.index())? {
                    Some(f) => {
                        enhanced.push(EnhancedBlock {
                            kind,
                            start: cursor,
                            cache: f.cache,
                        });
                        f.output
                    }
                    None => group,
                }
            }
            None => group,
        };
        kinds.extend(std::iter::repeat_n(kind, idx.len()));
        source.extend(idx.iter().map(|&i| Some(i)));
        cursor += idx.len();
        blocks.push(refined);
    }
    let rest = assignment.remaining(t);
    blocks.push(raw.select_rows(&rest)?);
    kinds.extend(std::iter::repeat_n(GroupKind::Remaining, rest.len()));
    source.extend(rest.iter().map(|&i| Some(i)));
    kinds.extend(std::iter::repeat_n(GroupKind::Proprio, p));
    source.extend(std::iter::repeat_n(None, p));
    let mut parts: Vec<&DenseMatrix<S>> = blocks.iter().collect();
    parts.push(input.proprio_tokens);
    let tokens = DenseMatrix::vstack(&parts)?;
    debug_assert_eq!(tokens.rows(), t + p);
    Ok(ParsedScene {
        tokens,
        kinds,
        source,
        groups,
        assignment,
        enhanced,
    })
}
