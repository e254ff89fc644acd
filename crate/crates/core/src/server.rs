//! Expert-driven aggregation and the FedAvg baseline.
//!
//! Every round each client returns its trunk and the per-layer expert
//! activation counts it accumulated while training. For trunk layer `l` the
//! server forms the cosine similarity `S^(l)` of the clients' count vectors,
//! turns row sums into weights `w_i = Σ_j s_ij / Σ_ij s_ij` and averages all
//! tensors of that layer with those weights. The result is one global trunk,
//! broadcast back to every client.

use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::client::{Client, LocalUpdate, RoutingCounts, Trunk};
use crate::dgmoe::{Density, SelectionMatrix};
use crate::error::{Error, Result};
use crate::kernel::cosine_sim;
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor_io::{self, split_layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Eda,
    FedAvg,
}

#[derive(Debug, Clone)]
pub struct RoundSubmission<S> {
    pub client_id: usize,
    pub trunk: Trunk<S>,
    pub selection: SelectionMatrix,
}

impl<S: Scalar> From<LocalUpdate<S>> for RoundSubmission<S> {
    fn from(u: LocalUpdate<S>) -> Self {
        Self {
            client_id: u.client_id,
            trunk: u.trunk,
            selection: u.counts.trunk,
        }
    }
}

/// Row `layer` of `v` as reals.
pub fn selection_vector(v: &SelectionMatrix, layer: usize) -> Result<Vec<f64>> {
    if layer >= v.layers() {
        return Err(Error::OutOfRange {
            context: "selection_vector",
            index: layer,
            len: v.layers(),
        });
    }
    Ok(v.row(layer).iter().map(|&c| c as f64).collect())
}

/// Symmetric `N × N` similarity matrix of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub n: usize,
    pub values: Vec<f64>,
}

impl LayerSimilarity {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::LengthMismatch {
                context: "LayerSimilarity::from_rows",
                left: n,
                right: r.len(),
            });
        }
        Ok(Self {
            n,
            values: rows.concat(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Mean over `i ≠ j`; zero for a single client.
    pub fn mean_off_diagonal(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (self.n * (self.n - 1)) as f64
    }
}

/// Cosine similarity of every pair. A zero vector has similarity 0 with every
/// other client but keeps 1 on the diagonal, so it still weights itself.
pub fn pairwise_similarity(vectors: &[Vec<f64>]) -> Result<LayerSimilarity> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::Empty("pairwise_similarity"));
    }
    let k = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != k) {
        return Err(Error::LengthMismatch {
            context: "pairwise_similarity",
            left: k,
            right: v.len(),
        });
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let s = cosine_sim(&vectors[i], &vectors[j])?.max(0.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(LayerSimilarity { n, values })
}

/// Normalized row sums of `s`; uniform when the grand total is zero.
pub fn aggregation_weights(s: &LayerSimilarity) -> Result<Vec<f64>> {
    if s.n == 0 {
        return Err(Error::Empty("aggregation_weights"));
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregation_weights"));
    }
    let rows: Vec<f64> = (0..s.n).map(|i| (0..s.n).map(|j| s.get(i, j)).sum()).collect();
    let total: f64 = rows.iter().sum();
    if total <= 0.0 {
        log::warn!("similarity matrix sums to {total}; falling back to uniform weights");
        return Ok(vec![1.0 / s.n as f64; s.n]);
    }
    Ok(rows.into_iter().map(|r| r / total).collect())
}

fn sorted<S>(submissions: &[RoundSubmission<S>]) -> Result<Vec<&RoundSubmission<S>>> {
    if submissions.is_empty() {
        return Err(Error::Empty("no submissions"));
    }
    let mut out: Vec<_> = submissions.iter().collect();
    out.sort_by_key(|s| s.client_id);
    Ok(out)
}

/// Per-layer similarity matrices and weights, clients ordered by id.
pub fn eda_weights<S>(submissions: &[RoundSubmission<S>]) -> Result<(Vec<LayerSimilarity>, Vec<Vec<f64>>)> {
    let subs = sorted(submissions)?;
    let shape = (subs[0].selection.layers(), subs[0].selection.experts());
    if let Some(s) = subs
        .iter()
        .find(|s| (s.selection.layers(), s.selection.experts()) != shape)
    {
        return Err(Error::ShapeMismatch {
            context: "eda_weights: selection matrix",
            expected: shape,
            got: (s.selection.layers(), s.selection.experts()),
        });
    }
    let mut sims = Vec::with_capacity(shape.0);
    let mut weights = Vec::with_capacity(shape.0);
    for l in 0..shape.0 {
        let vs: Vec<Vec<f64>> = subs
            .iter()
            .map(|s| selection_vector(&s.selection, l))
            .collect::<Result<_>>()?;
        let sim = pairwise_similarity(&vs)?;
        weights.push(aggregation_weights(&sim)?);
        sims.push(sim);
    }
    Ok((sims, weights))
}

/// Layerwise weighted average of the submitted trunks.
///
/// `weights[l][i]` applies to the `i`-th submission in client-id order. Each
/// entry is clamped into the range of the client values, so rounding can never
/// push it outside their convex hull.
pub fn aggregate_trunk<S: Scalar>(
    submissions: &[RoundSubmission<S>],
    weights: &[Vec<f64>],
) -> Result<Trunk<S>> {
    let subs = sorted(submissions)?;
    let layers = subs[0].trunk.layers();
    if weights.len() != layers {
        return Err(Error::LengthMismatch {
            context: "aggregate_trunk: weight layers",
            left: layers,
            right: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| w.len() != subs.len()) {
        return Err(Error::LengthMismatch {
            context: "aggregate_trunk: weights per layer",
            left: subs.len(),
            right: w.len(),
        });
    }
    let layout: Vec<(String, (usize, usize))> = subs[0]
        .trunk
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let inputs: Vec<Vec<(String, &crate::kernel::DenseMatrix<S>)>> =
        subs.iter().map(|s| s.trunk.named()).collect();
    for named in &inputs {
        let same = named.len() == layout.len()
            && named
                .iter()
                .zip(&layout)
                .all(|((n, t), (ln, shape))| n == ln && t.shape() == *shape);
        if !same {
            return Err(Error::invalid("submitted trunks differ in layout"));
        }
    }

    let mut out = subs[0].trunk.clone();
    for (ti, dst) in out.tensors_mut().into_iter().enumerate() {
        let name = &layout[ti].0;
        let layer = split_layer(name)
            .0
            .ok_or_else(|| Error::Format(format!("trunk tensor {name} has no layer index")))?;
        let w: Vec<S> = weights[layer].iter().map(|&v| S::lit(v)).collect();
        for (e, d) in dst.data_mut().iter_mut().enumerate() {
            let mut acc = S::zero();
            let mut lo = S::infinity();
            let mut hi = S::neg_infinity();
            for (i, named) in inputs.iter().enumerate() {
                let v = named[ti].1.data()[e];
                acc += w[i] * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            *d = acc.max(lo).min(hi);
        }
    }
    Ok(out)
}

/// Uniform average; identical to [`aggregate_trunk`] with weights `1/N`.
pub fn fedavg_aggregate<S: Scalar>(submissions: &[RoundSubmission<S>]) -> Result<Trunk<S>> {
    let n = submissions.len();
    if n == 0 {
        return Err(Error::Empty("fedavg_aggregate"));
    }
    let layers = submissions[0].trunk.layers();
    aggregate_trunk(submissions, &vec![vec![1.0 / n as f64; n]; layers])
}

/// Metrics of one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub train_loss: f64,
    /// validation loss after the broadcast trunk has been applied
    pub val_loss: f64,
    pub density: Density,
    /// trunk activation counts, `L × K` row-major
    pub counts: Vec<u64>,
    pub trunk_tokens: u64,
    /// hash of the trunk the client submitted
    pub trunk_hash: String,
    pub stem_hash: String,
    pub head_hash: String,
}

/// Everything the server knows about a finished round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: AggregationMode,
    /// per-layer aggregation weights in client-id order
    pub weights: Vec<Vec<f64>>,
    pub similarity: Vec<LayerSimilarity>,
    pub mean_off_diagonal: Vec<f64>,
    pub global_trunk_hash: String,
    pub clients: Vec<ClientRoundMetrics>,
}

pub struct RoundOutcome<S> {
    pub global: Trunk<S>,
    pub record: RoundRecord,
}

/// Trains every client on its own thread, aggregates and broadcasts.
///
/// Results are collected at a barrier and processed in client-id order, so
/// the outcome does not depend on thread scheduling. Any client failure
/// aborts the round before aggregation.
pub fn run_round<S: Scalar>(
    clients: &mut [Client<S>],
    global: &Trunk<S>,
    round: usize,
    mode: AggregationMode,
) -> Result<RoundOutcome<S>> {
    if clients.is_empty() {
        return Err(Error::Empty("run_round: clients"));
    }
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for client in clients.iter_mut() {
            let tx = tx.clone();
            scope.spawn(move || {
                let id = client.id;
                let _ = tx.send((id, client.local_train(global, round)));
            });
        }
    });
    drop(tx);
    let mut updates: Vec<(usize, Result<LocalUpdate<S>>)> = rx.into_iter().collect();
    updates.sort_by_key(|(id, _)| *id);

    let mut submissions = Vec::with_capacity(updates.len());
    let mut counts: Vec<(RoutingCounts, f64, String)> = Vec::with_capacity(updates.len());
    for (id, res) in updates {
        let upd = res.map_err(|e| Error::Client {
            round,
            client: id,
            source: Box::new(e),
        })?;
        counts.push((upd.counts.clone(), upd.train_loss, upd.trunk.hash()));
        submissions.push(RoundSubmission::from(upd));
    }

    let (similarity, eda) = eda_weights(&submissions)?;
    let (global, weights) = match mode {
        AggregationMode::Eda => (aggregate_trunk(&submissions, &eda)?, eda),
        AggregationMode::FedAvg => {
            let n = submissions.len();
            (fedavg_aggregate(&submissions)?, vec![vec![1.0 / n as f64; n]; similarity.len()])
        }
    };

    clients.sort_by_key(|c| c.id);
    let mut metrics = Vec::with_capacity(clients.len());
    for (client, (c, train_loss, trunk_hash)) in clients.iter_mut().zip(counts) {
        let stem_hash = tensor_io::hash_params(&client.model.stem);
        let head_hash = tensor_io::hash_params(&client.model.head);
        client.model.apply_global_trunk(&global).map_err(|e| Error::Client {
            round,
            client: client.id,
            source: Box::new(e),
        })?;
        let val_loss = client.validation_loss().map_err(|e| Error::Client {
            round,
            client: client.id,
            source: Box::new(e),
        })?;
        metrics.push(ClientRoundMetrics {
            client_id: client.id,
            train_loss,
            val_loss,
            density: c.density(),
            counts: c.trunk.counts().to_vec(),
            trunk_tokens: c.trunk_tokens,
            trunk_hash,
            stem_hash,
            head_hash,
        });
    }

    let record = RoundRecord {
        round,
        mode,
        mean_off_diagonal: similarity.iter().map(LayerSimilarity::mean_off_diagonal).collect(),
        weights,
        similarity,
        global_trunk_hash: global.hash(),
        clients: metrics,
    };
    Ok(RoundOutcome { global, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ClientModel, ModelConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trunk(seed: u64) -> Trunk<f64> {
        let cfg = ModelConfig {
            dim: 4,
            layers: 2,
            experts: 2,
            ..ModelConfig::default()
        };
        Trunk::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn filled(value: f64) -> Trunk<f64> {
        let mut t = trunk(0);
        t.tensors_mut().into_iter().for_each(|m| m.fill(value));
        t
    }

    fn sub(id: usize, t: Trunk<f64>, counts: Vec<u64>) -> RoundSubmission<f64> {
        RoundSubmission {
            client_id: id,
            trunk: t,
            selection: SelectionMatrix::from_counts(2, 2, counts).unwrap(),
        }
    }

    #[test]
    fn selection_vector_examples() {
        let v = SelectionMatrix::from_counts(2, 3, vec![0, 3, 1, 5, 5, 5]).unwrap();
        assert_eq!(selection_vector(&v, 0).unwrap(), vec![0.0, 3.0, 1.0]);
        assert_eq!(selection_vector(&v, 1).unwrap().len(), 3);
        assert_eq!(selection_vector(&SelectionMatrix::new(2, 3), 1).unwrap(), vec![0.0; 3]);
        assert!(selection_vector(&v, 2).is_err());
    }

    #[test]
    fn similarity_examples() {
        let s = pairwise_similarity(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let s = pairwise_similarity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        let s = pairwise_similarity(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((s.get(0, 1) - 0.8).abs() < 1e-15);
        let s = pairwise_similarity(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!((s.get(0, 0), s.get(0, 1), s.get(1, 1)), (1.0, 0.0, 1.0));
        assert!(pairwise_similarity(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(pairwise_similarity(&[]).is_err());
    }

    #[test]
    fn weight_examples() {
        let s = LayerSimilarity::from_rows(&vec![vec![1.0; 4]; 4]).unwrap();
        assert_eq!(aggregation_weights(&s).unwrap(), vec![0.25; 4]);
        let s = LayerSimilarity::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(aggregation_weights(&s).unwrap(), vec![0.5, 0.5]);
        let s = LayerSimilarity::from_rows(&[
            vec![1.0, 0.5, 0.5],
            vec![0.5, 1.0, 0.0],
            vec![0.5, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(aggregation_weights(&s).unwrap(), vec![0.4, 0.3, 0.3]);
        let s = LayerSimilarity::from_rows(&vec![vec![0.0; 2]; 2]).unwrap();
        assert_eq!(aggregation_weights(&s).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn aggregation_examples() {
        let a = trunk(1);
        let subs = vec![sub(0, a.clone(), vec![1; 4]), sub(1, a.clone(), vec![2, 0, 0, 3])];
        assert_eq!(aggregate_trunk(&subs, &[vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap(), a);

        let b = trunk(2);
        let subs = vec![sub(0, a.clone(), vec![1; 4]), sub(1, b.clone(), vec![1; 4])];
        assert_eq!(aggregate_trunk(&subs, &[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(), b);

        let subs = vec![sub(0, filled(1.0), vec![1; 4]), sub(1, filled(3.0), vec![1; 4])];
        let out = aggregate_trunk(&subs, &[vec![0.25, 0.75], vec![0.25, 0.75]]).unwrap();
        assert!(out.named().iter().all(|(_, t)| t.data().iter().all(|&v| v == 2.5)));

        let subs = vec![sub(0, filled(0.0), vec![1; 4]), sub(1, filled(2.0), vec![1; 4])];
        let out = fedavg_aggregate(&subs).unwrap();
        assert!(out.named().iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn weights_apply_per_layer() {
        let subs = vec![sub(0, filled(0.0), vec![1; 4]), sub(1, filled(1.0), vec![1; 4])];
        let out = aggregate_trunk(&subs, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        for (name, t) in out.named() {
            let expect = if name.starts_with("0.") { 0.0 } else { 1.0 };
            assert!(t.data().iter().all(|&v| v == expect), "{name}");
        }
    }

    #[test]
    fn fedavg_ignores_submission_order() {
        let subs: Vec<_> = (0..3).map(|i| sub(i, trunk(10 + i as u64), vec![1; 4])).collect();
        let mut rev = subs.clone();
        rev.reverse();
        assert_eq!(fedavg_aggregate(&subs).unwrap(), fedavg_aggregate(&rev).unwrap());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg = ModelConfig {
            dim: 4,
            layers: 2,
            experts: 2,
            use_dgmoe: false,
            ..ModelConfig::default()
        };
        let dense = Trunk::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let subs = vec![sub(0, trunk(1), vec![1; 4]), sub(1, dense, vec![1; 4])];
        assert!(fedavg_aggregate(&subs).is_err());
        let subs = vec![sub(0, trunk(1), vec![1; 4])];
        assert!(aggregate_trunk(&subs, &[vec![1.0]]).is_err());
    }

    #[test]
    fn single_client_round() {
        let cfg = ModelConfig {
            dim: 4,
            layers: 1,
            experts: 2,
            horizon: 1,
            action_dim: 2,
            proprio_dim: 2,
            ..ModelConfig::default()
        };
        let provider: std::sync::Arc<dyn crate::scene::EmbeddingProvider<f64>> =
            std::sync::Arc::new(crate::scene::HashEmbeddingProvider::new(4, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ClientModel::new(cfg, provider, vec![], &mut rng).unwrap();
        let sample = crate::client::Sample {
            observation: crate::scene::Observation {
                tokens: crate::kernel::DenseMatrix::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, 0.0, 0.5, 1.0])
                    .unwrap(),
                detections: vec![],
            },
            instruction: "move".into(),
            proprio: vec![0.5, -0.5],
            actions: crate::kernel::DenseMatrix::from_vec(1, 2, vec![0.3, -0.2]).unwrap(),
        };
        let global = model.trunk.clone();
        for mode in [AggregationMode::Eda, AggregationMode::FedAvg] {
            let client = Client::new(
                0,
                model.clone(),
                vec![sample.clone()],
                vec![sample.clone()],
                Default::default(),
            )
            .unwrap();
            let mut clients = vec![client];
            let out = run_round(&mut clients, &global, 1, mode).unwrap();
            assert_eq!(out.record.weights, vec![vec![1.0]]);
            assert_eq!(out.global.hash(), out.record.clients[0].trunk_hash);
            assert_eq!(clients[0].model.trunk, out.global);
        }
    }

    fn counts_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
        prop::collection::vec(prop::collection::vec(0u64..50, 4), n)
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex(counts in (1usize..6).prop_flat_map(counts_strategy)) {
            let subs: Vec<_> = counts.iter().enumerate().map(|(i, c)| sub(i, trunk(i as u64), c.clone())).collect();
            let (sims, weights) = eda_weights(&subs).unwrap();
            for (s, w) in sims.iter().zip(&weights) {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                for i in 0..s.n {
                    prop_assert_eq!(s.get(i, i), 1.0);
                    for j in 0..s.n {
                        prop_assert_eq!(s.get(i, j), s.get(j, i));
                        prop_assert!((0.0..=1.0).contains(&s.get(i, j)));
                    }
                }
            }
        }

        #[test]
        fn aggregate_is_convex(
            counts in (1usize..5).prop_flat_map(counts_strategy),
            seed in 0u64..1000,
        ) {
            let subs: Vec<_> = counts.iter().enumerate().map(|(i, c)| sub(i, trunk(seed + i as u64), c.clone())).collect();
            let (_, w) = eda_weights(&subs).unwrap();
            let out = aggregate_trunk(&subs, &w).unwrap();
            for (ti, (_, t)) in out.named().into_iter().enumerate() {
                for (e, &v) in t.data().iter().enumerate() {
                    let vals: Vec<f64> = subs.iter().map(|s| s.trunk.named()[ti].1.data()[e]).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo && v <= hi);
                }
            }
        }

        #[test]
        fn identical_selections_reduce_to_fedavg(
            row in prop::collection::vec(0u64..50, 4),
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            let subs: Vec<_> = (0..n).map(|i| sub(i, trunk(seed + i as u64), row.clone())).collect();
            let (_, w) = eda_weights(&subs).unwrap();
            let eda = aggregate_trunk(&subs, &w).unwrap();
            let avg = fedavg_aggregate(&subs).unwrap();
            for ((_, a), (_, b)) in eda.named().into_iter().zip(avg.named()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn similarity_is_scale_invariant(
            counts in (2usize..5).prop_flat_map(counts_strategy),
            factor in 1u64..20,
        ) {
            let vs: Vec<Vec<f64>> = counts.iter().map(|c| c.iter().map(|&x| x as f64).collect()).collect();
            let mut scaled = vs.clone();
            scaled[0].iter_mut().for_each(|x| *x *= factor as f64);
            let a = pairwise_similarity(&vs).unwrap();
            let b = pairwise_similarity(&scaled).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let wa = aggregation_weights(&a).unwrap();
            let wb = aggregation_weights(&b).unwrap();
            for (x, y) in wa.iter().zip(&wb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
