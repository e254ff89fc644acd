//! Acceptance suite. Runs as a plain binary (`harness = false`) and prints one
//! `PASS`/`FAIL` line per criterion; the process exits non-zero if any fails.

use std::collections::VecDeque;
use std::fs;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use dgfed::client::{trunk_gradient_check, ClientModel, ModelConfig, Sample};
use dgfed::dgmoe::{expert_gate_decision, DgmoeConfig, DgmoeLayer};
use dgfed::harness::{run_experiment, Experiment, ExperimentConfig, ExperimentRun, MetricsRecord, SynthConfig};
use dgfed::kernel::{argmax, relative_error, DenseMatrix};
use dgfed::scene::{Detection, EmbeddingProvider, HashEmbeddingProvider, Observation};
use dgfed::server::{
    aggregate_trunk, aggregation_weights, eda_weights, fedavg_aggregate, LayerSimilarity, RoundSubmission,
};
use dgfed::tensor_io;
use dgfed::{Params, Trunk};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ROUNDS: usize = 30;
const ABLATIONS: [&str; 3] = ["no_iosp", "no_dgmoe", "no_eda"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id} ({name}): {}", o.detail);
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig {
        dim: 4,
        layers: 1,
        experts: 2,
        heads: 2,
        action_dim: 2,
        horizon: 2,
        proprio_dim: 3,
        ..ModelConfig::default()
    };
    // scene parsing off: one image token plus the proprioception token
    cfg.scene.enabled = false;
    let provider: Arc<dyn EmbeddingProvider<f64>> = Arc::new(HashEmbeddingProvider::new(cfg.dim, 7));
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ClientModel::new(cfg, provider.clone(), vec!["cup".into()], &mut rng).unwrap();
        let sample = Sample {
            observation: Observation {
                tokens: DenseMatrix::from_vec(1, cfg.dim, normal_vec(&mut rng, cfg.dim, 1.0)).unwrap(),
                detections: vec![Detection::new("cup", true, 0.9).unwrap()],
            },
            instruction: "pick up the cup".into(),
            proprio: normal_vec(&mut rng, cfg.proprio_dim, 1.0),
            actions: DenseMatrix::from_vec(cfg.horizon, cfg.action_dim, normal_vec(&mut rng, 4, 1.0)).unwrap(),
        };
        for e in trunk_gradient_check(&model, &sample, 1.0, 1e-5).unwrap() {
            if e.in_band {
                skipped += 1;
                continue;
            }
            checked += 1;
            let err = relative_error(e.analytic, e.numeric, 1e-6);
            worst = worst.max(err);
            if err >= 1e-4 {
                failures.push(format!("seed {seed} {}[{}]", e.name, e.index));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && checked > 0 && secs < 10.0,
        format!(
            "{checked} trunk entries over 20 models, {skipped} in STE band skipped, max rel err {worst:.2e} \
             (tol 1e-4), {secs:.2}s (limit 10s){}",
            if failures.is_empty() { String::new() } else { format!(", failing: {failures:?}") }
        ),
    )
}

fn gate_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (dim, k) = (8, 8);
    let (mut tokens, mut worst_sum, mut fallbacks) = (0usize, 0.0f64, 0usize);
    let (mut dmin, mut dmax) = (usize::MAX, 0usize);
    let mut violations = 0usize;
    for batch in 0..100 {
        let cfg = DgmoeConfig::new(dim, k);
        let mut layer = DgmoeLayer::new(&cfg, &mut rng).unwrap();
        // spread thresholds so acceptance ranges from none to all experts
        for w in layer.expert_gate.w_e.data_mut() {
            *w = rng.random_range(0.0..0.6);
        }
        let scale = [0.1, 1.0, 5.0][batch % 3];
        let x = DenseMatrix::from_vec(100, dim, normal_vec(&mut rng, 100 * dim, scale)).unwrap();
        let carry = DenseMatrix::from_vec(100, k, normal_vec(&mut rng, 100 * k, 1.0)).unwrap();
        let fwd = layer.forward(&x, (batch % 2 == 0).then_some(&carry), None, 0).unwrap();
        let (p, g) = (fwd.cache.probs(), fwd.cache.weights());
        for t in 0..100 {
            tokens += 1;
            worst_sum = worst_sum.max((p.row(t).iter().sum::<f64>() - 1.0).abs());
            let decision = expert_gate_decision(p.row(t), &layer.expert_gate);
            let support: Vec<usize> = (0..k).filter(|&j| g.get(t, j) != 0.0).collect();
            let accepted: Vec<usize> = (0..k).filter(|&j| decision[j] > 0).collect();
            let ok = if accepted.is_empty() {
                fallbacks += 1;
                support == vec![argmax(p.row(t)).unwrap()]
            } else {
                support.iter().all(|j| accepted.contains(j))
            };
            if !ok {
                violations += 1;
            }
            dmin = dmin.min(support.len());
            dmax = dmax.max(support.len());
        }
    }
    outcome(
        worst_sum <= 1e-12 && violations == 0 && dmin >= 1 && dmax <= k,
        format!(
            "{tokens} tokens, max |sum s_t - 1| {worst_sum:.1e} (tol 1e-12), {violations} support violations, \
             {fallbacks} fallbacks, density range [{dmin}, {dmax}] within [1, {k}]"
        ),
    )
}

fn trunk(seed: u64) -> Trunk {
    let cfg = ModelConfig {
        dim: 8,
        layers: 2,
        experts: 4,
        ..ModelConfig::default()
    };
    Trunk::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn eda_algebra(full_runs: &[(u64, &ExperimentRun)]) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // weights and similarity matrices logged by every federated round
    let (mut rounds, mut worst_sum, mut asym, mut out_of_range) = (0usize, 0.0f64, 0.0f64, 0usize);
    for (_, run) in full_runs {
        for r in &run.records {
            rounds += 1;
            for w in &r.weights {
                worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            }
            for s in &r.similarity {
                for i in 0..s.n {
                    for j in 0..s.n {
                        asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
                        if !(0.0..=1.0).contains(&s.get(i, j)) {
                            out_of_range += 1;
                        }
                    }
                }
            }
        }
    }
    pass &= worst_sum <= 1e-9 && asym == 0.0 && out_of_range == 0;
    notes.push(format!(
        "{rounds} logged rounds: max |sum w - 1| {worst_sum:.1e} (tol 1e-9), max asymmetry {asym:.1e}, \
         {out_of_range} entries outside [0,1]"
    ));

    // identical selection matrices reduce to FedAvg
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_diff = 0.0f64;
    for case in 0..20u64 {
        let n = 2 + (case as usize % 4);
        let counts: Vec<u64> = (0..8).map(|_| rng.random_range(0..50)).collect();
        let selection = dgfed::dgmoe::SelectionMatrix::from_counts(2, 4, counts).unwrap();
        let subs: Vec<RoundSubmission<f64>> = (0..n)
            .map(|i| RoundSubmission {
                client_id: i,
                trunk: trunk(case * 10 + i as u64),
                selection: selection.clone(),
            })
            .collect();
        let (_, w) = eda_weights(&subs).unwrap();
        let eda = aggregate_trunk(&subs, &w).unwrap();
        let avg = fedavg_aggregate(&subs).unwrap();
        for ((_, a), (_, b)) in eda.named().into_iter().zip(avg.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    pass &= max_diff <= 1e-12;
    notes.push(format!("identical selections: max |EDA - FedAvg| {max_diff:.1e} (tol 1e-12)"));

    let s = LayerSimilarity::from_rows(&[vec![1.0, 0.5, 0.5], vec![0.5, 1.0, 0.0], vec![0.5, 0.0, 1.0]]).unwrap();
    let w = aggregation_weights(&s).unwrap();
    pass &= w == [0.4, 0.3, 0.3];
    notes.push(format!("hand example weights {w:?} (expected [0.4, 0.3, 0.3] exactly)"));

    outcome(pass, notes.join("; "))
}

fn sparse_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0usize;
    let mut layer = DgmoeLayer::new(&DgmoeConfig::new(6, 5), &mut rng).unwrap();
    for i in 0..1000 {
        if i % 50 == 0 {
            layer = DgmoeLayer::new(&DgmoeConfig::new(6, 5), &mut rng).unwrap();
            for w in layer.expert_gate.w_e.data_mut() {
                *w = rng.random_range(0.0..0.8);
            }
        }
        let rows = rng.random_range(1..=8);
        let x = DenseMatrix::from_vec(rows, 6, normal_vec(&mut rng, rows * 6, 2.0)).unwrap();
        let carry = DenseMatrix::from_vec(rows, 5, normal_vec(&mut rng, rows * 5, 1.0)).unwrap();
        let carry = (i % 2 == 1).then_some(&carry);
        let sparse = layer.forward(&x, carry, None, 0).unwrap().output;
        let dense = layer.forward_masked_dense(&x, carry).unwrap();
        if sparse.data().iter().zip(dense.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 random inputs, {mismatches} with any bit difference"))
}

/// Four clients in two task clusters, sized to run on a laptop CPU.
fn desk_config(seed: u64, variant: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        clients: 4,
        rounds: ROUNDS,
        ..ExperimentConfig::default()
    };
    cfg.model.dim = 16;
    cfg.model.layers = 2;
    cfg.model.experts = 8;
    cfg.model.hidden_mult = 2;
    cfg.model.horizon = 2;
    cfg.model.action_dim = 4;
    cfg.model.proprio_dim = 4;
    cfg.model.scene.tokens_per_group = 4;
    cfg.train.local_epochs = 3;
    cfg.train.batch_size = 16;
    cfg.data = SynthConfig {
        clusters: 2,
        objects_per_cluster: 6,
        objects_per_scene: 3,
        background_per_scene: 1,
        tokens_per_object: 3,
        noise_tokens: 4,
        step_stride: 50,
        ..SynthConfig::default()
    };
    match variant {
        "no_iosp" => cfg.ablation.no_iosp = true,
        "no_dgmoe" => cfg.ablation.no_dgmoe = true,
        "no_eda" => cfg.ablation.no_eda = true,
        _ => {}
    }
    cfg
}

/// Runs every (variant, seed) pair on a small worker pool.
fn behavioral_runs() -> (Vec<(String, u64, ExperimentRun)>, Duration) {
    let start = Instant::now();
    let jobs: VecDeque<(String, u64)> = std::iter::once("full")
        .chain(ABLATIONS)
        .flat_map(|v| SEEDS.iter().map(move |&s| (v.to_string(), s)))
        .collect();
    let jobs = Mutex::new(jobs);
    let done = Mutex::new(Vec::new());
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).div_ceil(4).max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((variant, seed)) = jobs.lock().unwrap().pop_front() else { break };
                let run = run_experiment(desk_config(seed, &variant), None)
                    .unwrap_or_else(|e| panic!("{variant} seed {seed}: {e}"));
                done.lock().unwrap().push((variant, seed, run));
            });
        }
    });
    let mut runs = done.into_inner().unwrap();
    runs.sort_by(|a, b| (a.0.as_str(), a.1).cmp(&(b.0.as_str(), b.1)));
    (runs, start.elapsed())
}

fn final_mean_val_loss(run: &ExperimentRun) -> f64 {
    let last = run.records.last().unwrap();
    last.clients.iter().map(|c| c.val_loss).sum::<f64>() / last.clients.len() as f64
}

fn density_behavior(full: &[(u64, &ExperimentRun)]) -> Outcome {
    let mut values = Vec::new();
    for (seed, run) in full {
        let last = run.records.last().unwrap();
        let d = last.clients.iter().map(|c| c.density.overall).sum::<f64>() / last.clients.len() as f64;
        values.push((*seed, d, run.records.len()));
    }
    let pass = values.iter().all(|&(_, d, rounds)| (1.0..2.0).contains(&d) && rounds >= 30);
    let text: Vec<String> = values
        .iter()
        .map(|(s, d, r)| format!("seed {s}: {d:.3} after {r} rounds"))
        .collect();
    outcome(pass, format!("mean density per token in [1, 2): {}", text.join(", ")))
}

fn cluster_similarity(records: &[MetricsRecord], clusters: &[usize]) -> Vec<(f64, f64)> {
    let tail = &records[records.len().saturating_sub(10)..];
    let layers = tail[0].similarity.len();
    (0..layers)
        .map(|l| {
            let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
            for r in tail {
                let s = &r.similarity[l];
                for i in 0..s.n {
                    for j in i + 1..s.n {
                        if clusters[i] == clusters[j] {
                            within += s.get(i, j);
                            nw += 1;
                        } else {
                            cross += s.get(i, j);
                            nc += 1;
                        }
                    }
                }
            }
            (within / nw as f64, cross / nc as f64)
        })
        .collect()
}

fn clustered_aggregation(full: &[(u64, &ExperimentRun)]) -> Outcome {
    let mut passing = 0usize;
    let mut text = Vec::new();
    for (seed, run) in full {
        let clusters: Vec<usize> = run.experiment.datasets.iter().map(|d| d.spec.cluster).collect();
        let per_layer = cluster_similarity(&run.records, &clusters);
        let wins = per_layer.iter().filter(|(w, c)| w > c).count();
        let ok = 2 * wins > per_layer.len();
        passing += ok as usize;
        let layers: Vec<String> = per_layer.iter().map(|(w, c)| format!("{w:.3}/{c:.3}")).collect();
        text.push(format!("seed {seed} {} [{}]", if ok { "ok" } else { "no" }, layers.join(" ")));
    }
    outcome(
        passing >= 4,
        format!("{passing}/{} seeds (need 4), within/cross per layer over last 10 rounds: {}", full.len(), text.join("; ")),
    )
}

fn ablation_ordering(runs: &[(String, u64, ExperimentRun)], elapsed: Duration) -> Outcome {
    let mean = |variant: &str| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|(name, _, _)| name == variant)
            .map(|(_, _, r)| final_mean_val_loss(r))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let full = mean("full");
    let mut pass = elapsed.as_secs_f64() <= 900.0;
    let mut text = vec![format!("full {full:.4}")];
    for a in ABLATIONS {
        let m = mean(a);
        pass &= full <= 1.05 * m;
        text.push(format!("{a} {m:.4} (ratio {:.3})", full / m));
    }
    outcome(
        pass,
        format!(
            "seed-averaged final val loss over {} seeds, full <= 1.05 x each: {}; {} runs in {:.0}s (limit 900s)",
            SEEDS.len(),
            text.join(", "),
            runs.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = desk_config(seed, "full");
    cfg.rounds = 3;
    cfg.model.dim = 8;
    cfg.model.experts = 4;
    cfg.train.local_epochs = 1;
    cfg.data.episodes_min = 4;
    cfg.data.episodes_max = 6;
    cfg
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(small_config(9), Some(d.path())).unwrap();
    }
    let a = fs::read(dirs[0].path().join("metrics.csv")).unwrap();
    let b = fs::read(dirs[1].path().join("metrics.csv")).unwrap();
    outcome(
        a == b && !a.is_empty(),
        format!("two runs of the same config and seed: metrics.csv {} / {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn federation_hygiene() -> Outcome {
    let mut exp = Experiment::new(small_config(11)).unwrap();
    let mut broadcast_changes = 0usize;
    let mut trunk_mismatch = 0usize;
    for _ in 0..3 {
        let record = exp.step().unwrap();
        for (c, m) in exp.clients.iter().zip(&record.clients) {
            if tensor_io::hash_params(&c.model.stem) != m.stem_hash
                || tensor_io::hash_params(&c.model.head) != m.head_hash
            {
                broadcast_changes += 1;
            }
            if c.model.trunk.hash() != record.global_trunk_hash {
                trunk_mismatch += 1;
            }
        }
    }
    let bytes = tensor_io::encode(&exp.global.snapshot());
    let mut restored = Trunk::new(&exp.config.effective_model(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    restored.load(&tensor_io::decode(&bytes).unwrap()).unwrap();
    let bit_exact = exp
        .global
        .named()
        .into_iter()
        .zip(restored.named())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    outcome(
        broadcast_changes == 0 && trunk_mismatch == 0 && bit_exact,
        format!(
            "3 rounds x {} clients: {broadcast_changes} stem/head hash changes across broadcast, \
             {trunk_mismatch} clients off the global trunk; trunk round-trip bit-exact: {bit_exact}",
            exp.clients.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        report(id, name, &o);
        results.push((id, name, o));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "gate invariants", gate_invariants());
    record(4, "sparse execution equivalence", sparse_equivalence());
    record(8, "determinism", determinism());
    record(9, "federation hygiene", federation_hygiene());

    let (runs, elapsed) = behavioral_runs();
    let full: Vec<(u64, &ExperimentRun)> = runs
        .iter()
        .filter(|(v, _, _)| v == "full")
        .map(|(_, s, r)| (*s, r))
        .collect();
    record(3, "EDA algebra", eda_algebra(&full));
    record(5, "density behavior", density_behavior(&full));
    record(6, "clustered aggregation", clustered_aggregation(&full));
    record(7, "ablation ordering", ablation_ordering(&runs, elapsed));

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
