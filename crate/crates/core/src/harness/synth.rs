//! Synthetic non-IID manipulation tasks.
//!
//! Clients are grouped into clusters. A cluster owns an object vocabulary and
//! a hidden linear map from the mean embedding of the target object's image
//! tokens (plus proprioception) to the action sequence; each client perturbs
//! its cluster's map slightly. Every episode shows a few cluster objects and
//! some background clutter, and the instruction names one of the objects as
//! the target. Without parsing the instruction the model cannot tell which
//! object drives the actions.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{derive_seed, ModelConfig, Sample};
use crate::error::{Error, Result};
use crate::kernel::{norm, DenseMatrix};
use crate::scene::{Detection, HashEmbeddingProvider, Observation};

const OBJECTS: &[&str] = &[
    "cup", "plate", "bowl", "spoon", "kettle", "jar", "fork", "pan", "drawer", "hammer",
    "wrench", "pliers", "stapler", "lamp", "marker", "tape", "sponge", "brush", "bottle",
    "towel", "soap", "bucket", "broom", "glove", "book", "pen", "folder", "clock", "phone",
    "remote", "apple", "banana", "lemon", "carrot", "onion", "bread",
];

const BACKGROUND: &[&str] = &["table", "wall", "floor", "shelf", "window", "cabinet", "curtain", "rug"];

const VERBS: &[&str] = &["pick up the", "push the", "grasp the", "slide the", "lift the", "move the"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub objects_per_cluster: usize,
    /// foreground objects shown per episode (one is the target)
    pub objects_per_scene: usize,
    pub background_per_scene: usize,
    pub tokens_per_object: usize,
    /// unstructured tokens added to every observation
    pub noise_tokens: usize,
    /// scale of the perturbation added to object embeddings before normalizing
    pub token_noise: f64,
    pub action_noise: f64,
    /// scale of each client's deviation from its cluster's map
    pub map_perturbation: f64,
    pub episodes_min: usize,
    pub episodes_max: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    /// keep every `step_stride`-th step of an episode as a sample
    pub step_stride: usize,
    /// fraction of episodes held out for validation
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 2,
            objects_per_cluster: 6,
            objects_per_scene: 4,
            background_per_scene: 2,
            tokens_per_object: 4,
            noise_tokens: 8,
            token_noise: 0.3,
            action_noise: 0.05,
            map_perturbation: 0.2,
            episodes_min: 30,
            episodes_max: 80,
            steps_min: 20,
            steps_max: 100,
            step_stride: 1,
            val_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.clusters == 0 || self.objects_per_cluster == 0 || self.tokens_per_object == 0 {
            return bad("clusters, objects_per_cluster and tokens_per_object must be >= 1");
        }
        if self.objects_per_scene == 0 || self.objects_per_scene > self.objects_per_cluster {
            return bad("objects_per_scene must lie in 1..=objects_per_cluster");
        }
        if self.background_per_scene > BACKGROUND.len() {
            return bad("too many background objects per scene");
        }
        if self.episodes_min < 2 || self.episodes_min > self.episodes_max {
            return bad("need 2 <= episodes_min <= episodes_max");
        }
        if self.steps_min == 0 || self.steps_min > self.steps_max || self.step_stride == 0 {
            return bad("need 1 <= steps_min <= steps_max and step_stride >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if [self.token_noise, self.action_noise, self.map_perturbation]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("noise scales must be finite and >= 0");
        }
        Ok(())
    }

    /// Image tokens per observation.
    pub fn tokens_per_observation(&self) -> usize {
        (self.objects_per_scene + self.background_per_scene) * self.tokens_per_object + self.noise_tokens
    }
}

/// Hidden task of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub client_id: usize,
    pub cluster: usize,
    pub vocabulary: Vec<String>,
    /// `(horizon·A) × D`, applied to the target object's mean token
    pub target_map: DenseMatrix<f64>,
    /// `(horizon·A) × P`, applied to proprioception
    pub proprio_map: DenseMatrix<f64>,
    pub horizon: usize,
    pub action_dim: usize,
    pub noise: f64,
}

impl SyntheticTaskSpec {
    /// Noise-free action sequence (`horizon × A`).
    pub fn target(&self, feature: &[f64], proprio: &[f64]) -> Result<DenseMatrix<f64>> {
        let f = DenseMatrix::row_vector(feature.to_vec()).matmul_t(&self.target_map)?;
        let p = DenseMatrix::row_vector(proprio.to_vec()).matmul_t(&self.proprio_map)?;
        DenseMatrix::from_vec(self.horizon, self.action_dim, f.add(&p)?.into_vec())
    }

    /// Frobenius distance between target maps.
    pub fn map_distance(&self, other: &Self) -> f64 {
        let d: Vec<f64> = self
            .target_map
            .data()
            .iter()
            .zip(other.target_map.data())
            .map(|(a, b)| a - b)
            .collect();
        norm(&d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample<f64>>,
    pub val: Vec<Sample<f64>>,
}

impl ClientDataset {
    /// Hex SHA-256 over the spec and both splits in JSON-lines form.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec)?);
        for s in self.train.iter().chain(&self.val) {
            h.update(serde_json::to_vec(s)?);
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec = dir.join("task.json");
        fs::write(&spec, serde_json::to_vec_pretty(&self.spec)?).map_err(|e| Error::io(&spec, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let spec = dir.join("task.json");
        let bytes = fs::read(&spec).map_err(|e| Error::io(&spec, e))?;
        Ok(Self {
            spec: serde_json::from_slice(&bytes)?,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            val: read_jsonl(&dir.join("val.jsonl"))?,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn cluster_vocabulary(cluster: usize, size: usize) -> Vec<String> {
    (0..size)
        .map(|j| {
            let idx = cluster * size + j;
            OBJECTS
                .get(idx)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("item{idx}"))
        })
        .collect()
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
    let n = Normal::new(0.0, std).expect("std >= 0");
    DenseMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Cluster of client `i` among `n`: contiguous blocks of near-equal size.
pub fn cluster_of(client: usize, n: usize, clusters: usize) -> usize {
    client * clusters.min(n) / n
}

fn noisy_token(base: &[f64], beta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = base.len();
    let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("std");
    let v: Vec<f64> = base.iter().map(|&b| b + beta * n.sample(rng)).collect();
    let l = norm(&v);
    if l > 1e-12 {
        v.into_iter().map(|x| x / l).collect()
    } else {
        base.to_vec()
    }
}

/// One step: the sample plus the rows holding the target object's tokens.
pub(crate) fn make_sample(
    spec: &SyntheticTaskSpec,
    cfg: &SynthConfig,
    provider: &HashEmbeddingProvider,
    scene: &EpisodeScene,
    proprio: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Sample<f64>, Vec<usize>)> {
    let d = provider.dim;
    let mut rows: Vec<(Vec<f64>, bool)> = Vec::with_capacity(cfg.tokens_per_observation());
    for (i, label) in scene.objects.iter().chain(&scene.background).enumerate() {
        let base = provider.embed_f64(label);
        let is_target = i == scene.target;
        for _ in 0..cfg.tokens_per_object {
            rows.push((noisy_token(&base, cfg.token_noise, rng), is_target));
        }
    }
    let n = Normal::new(0.0, 1.0).expect("std");
    for _ in 0..cfg.noise_tokens {
        let z: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
        rows.push((noisy_token(&z, 0.0, rng), false));
    }
    rows.shuffle(rng);

    let target_rows: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.1).map(|(i, _)| i).collect();
    let mut feature = vec![0.0; d];
    for &r in &target_rows {
        for (f, v) in feature.iter_mut().zip(&rows[r].0) {
            *f += v;
        }
    }
    feature.iter_mut().for_each(|f| *f /= target_rows.len() as f64);

    let mut actions = spec.target(&feature, proprio)?;
    if spec.noise > 0.0 {
        let an = Normal::new(0.0, spec.noise).expect("noise >= 0");
        actions.data_mut().iter_mut().for_each(|a| *a += an.sample(rng));
    }
    let tokens = DenseMatrix::from_vec(rows.len(), d, rows.into_iter().flat_map(|r| r.0).collect())?;
    let sample = Sample {
        observation: Observation {
            tokens,
            detections: scene.detections.clone(),
        },
        instruction: scene.instruction.clone(),
        proprio: proprio.to_vec(),
        actions,
    };
    Ok((sample, target_rows))
}

/// Objects and instruction fixed for the whole episode.
#[derive(Debug, Clone)]
pub(crate) struct EpisodeScene {
    objects: Vec<String>,
    background: Vec<String>,
    target: usize,
    instruction: String,
    detections: Vec<Detection>,
}

fn episode_scene(spec: &SyntheticTaskSpec, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<EpisodeScene> {
    let objects: Vec<String> = spec
        .vocabulary
        .choose_multiple(rng, cfg.objects_per_scene)
        .cloned()
        .collect();
    let background: Vec<String> = BACKGROUND
        .choose_multiple(rng, cfg.background_per_scene)
        .map(|s| s.to_string())
        .collect();
    let target = rng.random_range(0..objects.len());
    let verb = VERBS.choose(rng).expect("non-empty");
    let mut detections = Vec::with_capacity(objects.len() + background.len());
    for o in &objects {
        detections.push(Detection::new(o.clone(), true, rng.random_range(0.6..1.0))?);
    }
    for b in &background {
        detections.push(Detection::new(b.clone(), false, rng.random_range(0.3..0.9))?);
    }
    Ok(EpisodeScene {
        instruction: format!("{verb} {}", objects[target]),
        objects,
        background,
        target,
        detections,
    })
}

/// Builds `n` client datasets. The same `(n, model, cfg, seed)` always
/// produces the same data.
pub fn generate_clients(
    n: usize,
    model: &ModelConfig,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    cfg.validate()?;
    let d = model.dim;
    let p = model.proprio_dim;
    let out = model.horizon * model.action_dim;
    let provider = HashEmbeddingProvider::new(d, seed);
    let clusters = cfg.clusters.min(n);

    let mut cluster_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 1));
    let cluster_maps: Vec<(DenseMatrix<f64>, DenseMatrix<f64>)> = (0..clusters)
        .map(|_| {
            let m = gaussian(out, d, 1.0, &mut cluster_rng);
            let pm = gaussian(out, p, 0.5 / (p as f64).sqrt(), &mut cluster_rng);
            (m, pm)
        })
        .collect();

    let mut datasets = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, u64::MAX));
        let cluster = cluster_of(i, n, clusters);
        let (m, pm) = &cluster_maps[cluster];
        let rho = cfg.map_perturbation;
        let target_map = m.add(&gaussian(out, d, rho, &mut rng))?;
        let proprio_map = pm.add(&gaussian(out, p, rho * 0.5 / (p as f64).sqrt(), &mut rng))?;
        let spec = SyntheticTaskSpec {
            client_id: i,
            cluster,
            vocabulary: cluster_vocabulary(cluster, cfg.objects_per_cluster),
            target_map,
            proprio_map,
            horizon: model.horizon,
            action_dim: model.action_dim,
            noise: cfg.action_noise,
        };

        let episodes = rng.random_range(cfg.episodes_min..=cfg.episodes_max);
        let walk = Normal::new(0.0, 0.3).expect("std");
        let init = Normal::new(0.0, 1.0).expect("std");
        let mut per_episode: Vec<Vec<Sample<f64>>> = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let scene = episode_scene(&spec, cfg, &mut rng)?;
            let steps = rng.random_range(cfg.steps_min..=cfg.steps_max);
            let mut s: Vec<f64> = (0..p).map(|_| init.sample(&mut rng)).collect();
            let mut samples = Vec::new();
            for step in 0..steps {
                if step % cfg.step_stride == 0 {
                    samples.push(make_sample(&spec, cfg, &provider, &scene, &s, &mut rng)?.0);
                }
                s.iter_mut().for_each(|v| *v = 0.9 * *v + walk.sample(&mut rng));
            }
            per_episode.push(samples);
        }
        let mut order: Vec<usize> = (0..episodes).collect();
        order.shuffle(&mut rng);
        let n_val = ((episodes as f64 * cfg.val_fraction).round() as usize).clamp(1, episodes - 1);
        let (val_eps, train_eps) = order.split_at(n_val);
        let mut take = |idx: &[usize]| -> Vec<Sample<f64>> {
            let mut sorted = idx.to_vec();
            sorted.sort_unstable();
            sorted.iter().flat_map(|&e| std::mem::take(&mut per_episode[e])).collect()
        };
        let val = take(val_eps);
        let train = take(train_eps);
        datasets.push(ClientDataset { spec, train, val });
    }
    Ok(datasets)
}
