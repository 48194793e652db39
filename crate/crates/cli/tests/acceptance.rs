//! Exit-gate checks. Runs without the libtest harness so every check
//! prints its own pass/fail line; the process fails if any check fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperevent_cli::{cmd_gradcheck, cmd_train, Invocation};
use hyperevent_core::event::{stack_events, EventPoint, EventStream, Polarity};
use hyperevent_core::harness::RunConfig;
use hyperevent_core::hypergraph::{build_dynamic_graph, build_hyperedges, fixed_hyperedges, AffinityTensor, EdgeGamma, Hypergraph};
use hyperevent_core::model::{ModelParams, ModelSpec};
use hyperevent_core::propagation::{stage1_self_completion, stage2_cross_modal, Propagation};
use hyperevent_core::training::loss::{cross_entropy, weighted_cross_entropy, DEFAULT_PROB_EPS};
use hyperevent_core::training::{generate_synthetic, prepare, train, Ablation, EpochMetrics, SyntheticDatasetSpec, TrainConfig};
use hyperevent_core::{ActivityMask, Mat};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn random_params(rng: &mut ChaCha8Rng, width: usize, latent: usize) -> Propagation<Mat> {
    Propagation {
        w_q: random_mat(rng, latent, width, 1.0),
        w_k: random_mat(rng, latent, width, 1.0),
        r_v: random_mat(rng, width, width, 1.0),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, steps: usize, nodes: usize, p_active: f64) -> ActivityMask {
    let bits = (0..steps * nodes).map(|_| rng.gen_bool(p_active)).collect();
    ActivityMask::from_bits(steps, nodes, bits).unwrap()
}

// ---------------------------------------------------------------------------
// Hyperedge incidence

fn incidence_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_sum = 0.0f64;
    for case in 0..1000 {
        let d = rng.gen_range(1..=16);
        let s = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=s);
        // Coarse values force ties on part of the cases.
        let raw = if case % 3 == 0 {
            Mat::from_vec(d, s, (0..d * s).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect())
        } else {
            random_mat(&mut rng, d, s, 20.0)
        };
        let a = AffinityTensor::from_raw(raw);
        for row in 0..d {
            worst_sum = worst_sum.max((a.probs.row(row).iter().sum::<f64>() - 1.0).abs());
        }
        let hg = build_hyperedges(&a, k).unwrap();
        let h = hg.incidence();
        for e in 0..d {
            let ones: usize = h.iter().map(|r| usize::from(r[e])).sum();
            if ones != k + 1 || h[e][e] != 1 {
                return outcome(false, format!("case {case}: hyperedge {e} has {ones} members, want {}", k + 1));
            }
        }
    }
    outcome(worst_sum <= 1e-6, format!("1000 tensors, worst affinity sum error {worst_sum:.1e}"))
}

// ---------------------------------------------------------------------------
// Propagation against an elementwise loop

struct Edge {
    members: Vec<usize>,
    targets: Vec<usize>,
    /// Dynamic node whose static sources are weighted by affinity.
    anchor: Option<usize>,
}

fn stage1_edges(d: usize) -> Vec<Edge> {
    build_dynamic_graph(d)
        .unwrap()
        .edges()
        .into_iter()
        .map(|(t, s)| Edge {
            members: vec![t, s],
            targets: vec![t],
            anchor: None,
        })
        .collect()
}

fn stage2_edges(hg: &Hypergraph) -> Vec<Edge> {
    (0..hg.num_dynamic())
        .map(|d| {
            let members: Vec<usize> = std::iter::once(d)
                .chain(hg.edges()[d].iter().map(|s| hg.num_dynamic() + s))
                .collect();
            Edge {
                targets: members.clone(),
                members,
                anchor: (hg.gamma() == EdgeGamma::Affinity).then_some(d),
            }
        })
        .collect()
}

fn relu_project(r_v: &Mat, x: &[f64]) -> Vec<f64> {
    (0..r_v.rows())
        .map(|o| {
            let mut acc = 0.0;
            for c in 0..x.len() {
                acc += r_v[(o, c)] * x[c];
            }
            acc.max(0.0)
        })
        .collect()
}

fn project(w: &Mat, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| (0..x.len()).map(|c| w[(o, c)] * x[c]).sum())
        .collect()
}

/// Message `(γ + α)·ReLU(r_v x_j)` summed over every active source of every
/// hyperedge the target belongs to.
#[allow(clippy::too_many_arguments)]
fn naive_propagate(
    x: &Mat,
    steps: usize,
    num_nodes: usize,
    num_dynamic: usize,
    edges: &[Edge],
    mask: &ActivityMask,
    p: &Propagation<Mat>,
    heads: usize,
    scores: Option<&Mat>,
) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let dh = p.w_q.rows() / heads;
    let active = |t: usize, v: usize| v >= num_dynamic || mask.is_active(t, v);
    for t in 0..steps {
        let row = |v: usize| x.row(t * num_nodes + v);
        for i in 0..num_nodes {
            let mut slots: Vec<(usize, f64)> = Vec::new();
            for e in edges.iter().filter(|e| e.targets.contains(&i)) {
                let group: Vec<usize> = e.members.iter().copied().filter(|&j| j != i && active(t, j)).collect();
                if group.is_empty() {
                    continue;
                }
                let gamma: Vec<f64> = match (e.anchor, scores) {
                    (Some(a), Some(sc)) if a == i => {
                        let z: Vec<f64> = group.iter().map(|&j| sc[(i, j - num_dynamic)]).collect();
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                        let tot: f64 = ex.iter().sum();
                        ex.iter().map(|v| v / tot).collect()
                    }
                    _ => vec![1.0 / group.len() as f64; group.len()],
                };
                slots.extend(group.into_iter().zip(gamma));
            }
            let target_row = t * num_nodes + i;
            if slots.is_empty() {
                out.row_mut(target_row).copy_from_slice(row(i));
                continue;
            }
            let q = project(&p.w_q, row(i));
            let keys: Vec<Vec<f64>> = slots.iter().map(|&(j, _)| project(&p.w_k, row(j))).collect();
            let mut alpha = vec![0.0; slots.len()];
            for h in 0..heads {
                let s: Vec<f64> = keys
                    .iter()
                    .map(|k| (h * dh..(h + 1) * dh).map(|c| q[c] * k[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let tot: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for (a, v) in alpha.iter_mut().zip(&s) {
                    *a += (v - m).exp() / tot / heads as f64;
                }
            }
            for ((&(j, g), a), _) in slots.iter().zip(&alpha).zip(0..) {
                let msg = relu_project(&p.r_v, row(j));
                for (o, v) in out.row_mut(target_row).iter_mut().zip(msg) {
                    *o += (g + a) * v;
                }
            }
        }
    }
    out
}

fn interleave(dynamic: &Mat, statics: &Mat, steps: usize, d: usize, s: usize) -> Mat {
    let mut rows = Vec::new();
    for t in 0..steps {
        for v in 0..d {
            rows.push(dynamic.row(t * d + v).to_vec());
        }
        for v in 0..s {
            rows.push(statics.row(v).to_vec());
        }
    }
    Mat::from_rows(&rows)
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Instance {
    steps: usize,
    d: usize,
    s: usize,
    heads: usize,
    params: Propagation<Mat>,
    mask: ActivityMask,
    dynamic: Mat,
    statics: Mat,
    hypergraph: Hypergraph,
    scores: Option<Mat>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let steps = rng.gen_range(1..=3);
    let d = rng.gen_range(1..=6);
    let s = rng.gen_range(1..=4);
    let width = rng.gen_range(1..=4);
    let heads = rng.gen_range(1..=2);
    let latent = heads * rng.gen_range(1..=3);
    let k = rng.gen_range(1..=s);
    let raw = random_mat(rng, d, s, 2.0);
    let (hypergraph, scores) = if rng.gen_bool(0.7) {
        (build_hyperedges(&AffinityTensor::from_raw(raw.clone()), k).unwrap(), Some(raw))
    } else {
        (fixed_hyperedges(d, s, k).unwrap(), None)
    };
    let p_active = rng.gen_range(0.2..1.0);
    Instance {
        steps,
        d,
        s,
        heads,
        params: random_params(rng, width, latent),
        mask: random_mask(rng, steps, d, p_active),
        dynamic: random_mat(rng, steps * d, width, 1.5),
        statics: random_mat(rng, s, width, 1.5),
        hypergraph,
        scores,
    }
}

fn propagation_matches_naive_loop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let inst = random_instance(&mut rng);
        let (steps, d, s) = (inst.steps, inst.d, inst.s);
        let got1 = stage1_self_completion(&inst.dynamic, steps, &build_dynamic_graph(d).unwrap(), &inst.params, inst.heads, &inst.mask).unwrap();
        let want1 = naive_propagate(&inst.dynamic, steps, d, d, &stage1_edges(d), &inst.mask, &inst.params, inst.heads, None);
        worst = worst.max(max_diff(&got1, &want1));

        let (gd, gs) = stage2_cross_modal(&inst.dynamic, &inst.statics, steps, &inst.hypergraph, &inst.params, inst.heads, &inst.mask, inst.scores.as_ref()).unwrap();
        let combined = interleave(&inst.dynamic, &inst.statics, steps, d, s);
        let want2 = naive_propagate(&combined, steps, d + s, d, &stage2_edges(&inst.hypergraph), &inst.mask, &inst.params, inst.heads, inst.scores.as_ref());
        let got2 = interleave_steps(&gd, &gs, steps, d, s);
        let diff2 = max_diff(&got2, &want2);
        worst = worst.max(diff2);
        if worst.is_nan() || worst > 1e-6 {
            return outcome(false, format!("case {case}: max abs error {worst:.3e}"));
        }
    }
    outcome(true, format!("200 instances, max abs error {worst:.1e}"))
}

/// Per-step statics from `[steps * S, F]` back into interleaved rows.
fn interleave_steps(dynamic: &Mat, statics: &Mat, steps: usize, d: usize, s: usize) -> Mat {
    let mut rows = Vec::new();
    for t in 0..steps {
        for v in 0..d {
            rows.push(dynamic.row(t * d + v).to_vec());
        }
        for v in 0..s {
            rows.push(statics.row(t * s + v).to_vec());
        }
    }
    Mat::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// Masking isolation

fn bits_equal_except(a: &Mat, b: &Mat, skip_row: usize) -> bool {
    (0..a.rows())
        .filter(|&r| r != skip_row)
        .all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn masking_isolates_inactive_nodes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut checked = 0;
    let mut case = 0;
    while case < 100 {
        let mut inst = random_instance(&mut rng);
        let inactive: Vec<(usize, usize)> = (0..inst.steps)
            .flat_map(|t| (0..inst.d).map(move |v| (t, v)))
            .filter(|&(t, v)| !inst.mask.is_active(t, v))
            .collect();
        if inactive.is_empty() {
            continue;
        }
        case += 1;
        let (steps, d) = (inst.steps, inst.d);
        let graph = build_dynamic_graph(d).unwrap();
        let base1 = stage1_self_completion(&inst.dynamic, steps, &graph, &inst.params, inst.heads, &inst.mask).unwrap();
        let (base2d, base2s) = stage2_cross_modal(&inst.dynamic, &inst.statics, steps, &inst.hypergraph, &inst.params, inst.heads, &inst.mask, inst.scores.as_ref()).unwrap();
        for &(t, v) in &inactive {
            let row = t * d + v;
            let saved = inst.dynamic.row(row).to_vec();
            for c in inst.dynamic.row_mut(row) {
                *c += rng.gen_range(-5.0..5.0);
            }
            let out1 = stage1_self_completion(&inst.dynamic, steps, &graph, &inst.params, inst.heads, &inst.mask).unwrap();
            let (out2d, out2s) = stage2_cross_modal(&inst.dynamic, &inst.statics, steps, &inst.hypergraph, &inst.params, inst.heads, &inst.mask, inst.scores.as_ref()).unwrap();
            let ok = bits_equal_except(&base1, &out1, row)
                && bits_equal_except(&base2d, &out2d, row)
                && bits_equal_except(&base2s, &out2s, usize::MAX);
            if !ok {
                return outcome(false, format!("case {case}: perturbing inactive node {v} at step {t} leaked"));
            }
            inst.dynamic.row_mut(row).copy_from_slice(&saved);
            checked += 1;
        }
    }
    outcome(true, format!("100 instances, {checked} inactive node perturbations, outputs bit-identical"))
}

// ---------------------------------------------------------------------------
// Gradient checks

fn gradients_match_finite_differences() -> Outcome {
    let inv = Invocation::load(None, None, None).unwrap();
    let outcomes = cmd_gradcheck(&inv).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for o in &outcomes {
        let worst = o.report.worst();
        pass &= o.report.passed() && worst < 1e-3;
        let name = &o.report.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap().name;
        parts.push(format!("{:?}: {} tensors, worst {worst:.2e} ({name})", o.task, o.report.tensors.len()));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// Loss identities

#[allow(clippy::approx_constant)]
fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let y = Mat::from_vec(n, m, (0..n * m).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect());
        let p = Mat::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(1e-4..1.0 - 1e-4)).collect());
        let got = weighted_cross_entropy(&y, &p, &vec![1.0; m], DEFAULT_PROB_EPS).unwrap();
        let mut per_sample = 0.0;
        for i in 0..n {
            for j in 0..m {
                per_sample += cross_entropy(y[(i, j)] == 1.0, p[(i, j)], DEFAULT_PROB_EPS);
            }
        }
        let want = per_sample / n as f64;
        worst = worst.max((got - want).abs());
    }
    let half = cross_entropy(true, 0.5, DEFAULT_PROB_EPS);
    let pass = worst <= 1e-12 && (half - 0.693147).abs() <= 1e-6;
    outcome(pass, format!("1000 matrices, worst gap {worst:.1e}; -log(0.5) = {half:.6}"))
}

// ---------------------------------------------------------------------------
// Training experiments

const BENCHMARK_DATA_SEED: u64 = 2024;
const BENCHMARK_MODEL_SEED: u64 = 7;

fn benchmark_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec::new(4, 40, BENCHMARK_DATA_SEED)
}

fn run_benchmark(ablation: Ablation, k: usize) -> Vec<EpochMetrics> {
    let spec = benchmark_spec();
    let dataset = generate_synthetic(&spec).unwrap();
    let mut cfg = TrainConfig::with_seed(BENCHMARK_MODEL_SEED);
    cfg.ablation = ablation;
    cfg.k = k;
    let data = prepare(&dataset, cfg.event_bins).unwrap();
    let mut params = ModelParams::init(ModelSpec::new(cfg, dataset.geometry).unwrap());
    train(&mut params, &data, 0, |_, _| Ok(())).unwrap()
}

fn ablation_ordering() -> Outcome {
    let variants = [
        Ablation::BASELINE,
        Ablation {
            st1: true,
            hgc: false,
            st2: false,
        },
        Ablation {
            st1: true,
            hgc: true,
            st2: false,
        },
        Ablation::FULL,
    ];
    let k = TrainConfig::with_seed(0).k;
    let runs: Vec<Vec<EpochMetrics>> = variants.iter().map(|&a| run_benchmark(a, k)).collect();
    let finals: Vec<f64> = runs.iter().map(|h| h.last().unwrap().loss).collect();
    let ordered = finals.windows(2).all(|w| w[0] >= w[1]);
    let full_acc = runs[3].iter().map(|m| m.acc).fold(0.0, f64::max);
    let losses: Vec<String> = variants
        .iter()
        .zip(&finals)
        .map(|(a, l)| format!("{}={l:.4}", a.tag()))
        .collect();
    outcome(
        ordered && full_acc >= 0.95,
        format!("final losses {}; ordered {ordered}; full best acc {full_acc:.3}", losses.join(" ")),
    )
}

fn k_sweep_reproducible() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [1, 2, 4] {
        let a = run_benchmark(Ablation::FULL, k);
        let b = run_benchmark(Ablation::FULL, k);
        let finite = a.iter().all(|m| m.loss.is_finite());
        pass &= finite && a == b;
        let last = a.last().unwrap();
        parts.push(format!("k={k} loss {:.4} acc {:.3}{}", last.loss, last.acc, if a == b { "" } else { " (not reproducible)" }));
    }
    outcome(pass, parts.join("; "))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn training_is_deterministic() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = br#"{
        "train": {"seed": 31, "epochs": 3, "learning_rate": 0.01, "hflip": true},
        "data": {"synthetic": {"num_classes": 3, "samples_per_class": 5, "seed": 31}},
        "save_every": 1
    }"#;
    let cfg_path = tmp.path().join("run.json");
    fs::write(&cfg_path, cfg).unwrap();
    assert!(RunConfig::from_path(&cfg_path).is_ok());
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let inv = Invocation::load(Some(&cfg_path), None, Some(&out)).unwrap();
        cmd_train(&inv).unwrap();
        snapshots.push(dir_bytes(&out));
    }
    let same = snapshots[0] == snapshots[1];
    outcome(same && snapshots[0].len() == 5, format!("{} files compared, identical {same}", snapshots[0].len()))
}

// ---------------------------------------------------------------------------
// Event conservation

fn stacking_conserves_events() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for case in 0..1000 {
        let w = rng.gen_range(1..=12u32);
        let h = rng.gen_range(1..=12u32);
        let n = rng.gen_range(0..300);
        let horizon = rng.gen_range(1..=1_000_000u64);
        let mut events: Vec<EventPoint> = (0..n)
            .map(|_| EventPoint {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                t: rng.gen_range(0..=horizon),
                p: if rng.gen_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
            })
            .collect();
        events.sort_by_key(|e| e.t);
        let stream = EventStream::new(events, w, h).unwrap();
        let t_start = rng.gen_range(0..horizon);
        let t_end = rng.gen_range(t_start + 1..=horizon + 10);
        let bins = rng.gen_range(1..=10);
        let frames = stack_events(&stream, bins, t_start, t_end).unwrap();
        let mut expected = vec![0u32; 2 * (w * h) as usize];
        for e in stream.events().iter().filter(|e| e.t >= t_start && e.t <= t_end) {
            expected[e.p.channel() * (w * h) as usize + (e.y * w + e.x) as usize] += 1;
        }
        for c in 0..2 {
            for y in 0..h as usize {
                for x in 0..w as usize {
                    let got: f32 = (0..bins).map(|t| frames.get(t, c, y, x)).sum();
                    let want = expected[c * (w * h) as usize + y * w as usize + x];
                    if got != want as f32 {
                        return outcome(false, format!("case {case}: pixel ({x}, {y}) channel {c} has {got}, want {want}"));
                    }
                }
            }
        }
    }
    outcome(true, "1000 streams, per-pixel counts exact")
}

// ---------------------------------------------------------------------------

fn main() {
    type Check = (&'static str, Duration, fn() -> Outcome);
    let checks: [Check; 9] = [
        ("1 incidence invariants", Duration::from_secs(10), incidence_invariants),
        ("2 propagation oracle equivalence", Duration::from_secs(30), propagation_matches_naive_loop),
        ("3 masking isolation", Duration::from_secs(30), masking_isolates_inactive_nodes),
        ("4 gradient checks", Duration::from_secs(120), gradients_match_finite_differences),
        ("5 loss identities", Duration::from_secs(60), loss_identities),
        ("6 ablation ordering", Duration::from_secs(600), ablation_ordering),
        ("7 k-sweep sanity", Duration::from_secs(600), k_sweep_reproducible),
        ("8 determinism", Duration::from_secs(120), training_is_deterministic),
        ("9 event conservation", Duration::from_secs(60), stacking_conserves_events),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= budget;
        failed += usize::from(!pass);
        println!(
            "[{}] {name}: {} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
