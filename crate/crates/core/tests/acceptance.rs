//! Acceptance suite. Runs as a plain binary under `cargo test` and prints one
//! PASS/FAIL line per check; any failure makes the process exit non-zero.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lvfl::cli::{run_experiment, ExperimentConfig, RunSummary};
use lvfl::data::{synth_classification, Difficulty, DifficultyLevel, SynthSpec};
use lvfl::metrics::compute_omega;
use lvfl::nn::{loss_and_grad, DenseNetwork, Matrix};
use lvfl::oracle::{check_equivalence, ORACLE_TOLERANCE};
use lvfl::par::Execution;
use lvfl::protocol::{ProtocolConfig, RoundPlan, Simulator};
use lvfl::pruning::{embedding_prune, structured_prune};

type Outcome = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn protocol_matches_joint_sgd() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut iters = 0;
    for k in [1, 2, 4] {
        let spec = SynthSpec {
            n: 300,
            d: 8 * k,
            classes: 4,
            difficulty: Difficulty::Named(DifficultyLevel::Easy),
            test_fraction: 0.2,
        };
        let data = synth_classification(13, k, &spec).map_err(|e| e.to_string())?;
        let cfg = ProtocolConfig {
            seed: 17,
            feature_widths: vec![vec![12, 6]; k],
            head_hidden: vec![16],
            local_iters: 1,
            rounds: 120,
            eta: 0.1,
            eta_decay: 1.0,
            batch_size: 32,
            probe_size: 64,
            execution: Execution::default(),
        };
        let report = check_equivalence(&cfg, &RoundPlan::zeros(120, k), &data, None).map_err(|e| e.to_string())?;
        ensure(report.protocol_losses.len() >= 100, || {
            format!("K={k}: only {} iterations", report.protocol_losses.len())
        })?;
        ensure(report.passed(), || {
            format!("K={k}: max diff {:.3e}", report.max_abs_diff)
        })?;
        worst = worst.max(report.max_abs_diff);
        iters = report.protocol_losses.len();
    }
    within(Duration::from_secs(30), start.elapsed())?;
    Ok(format!(
        "K in {{1,2,4}}, {iters} iterations each, max |diff| {worst:.2e} <= {ORACLE_TOLERANCE:.0e}, {:.1?}",
        start.elapsed()
    ))
}

/// Full chain loss: feature models -> concatenated embeddings -> head.
fn chain_loss(head: &DenseNetwork, feats: &[DenseNetwork], xs: &[Matrix], labels: &[usize], widths: &[usize]) -> f64 {
    let embs: Vec<Matrix> = feats.iter().zip(xs).map(|(f, x)| f.forward(x).unwrap()).collect();
    let refs: Vec<&Matrix> = embs.iter().collect();
    loss_and_grad(head, &Matrix::hconcat(&refs).unwrap(), labels, widths)
        .unwrap()
        .loss
}

fn gradients_match_finite_differences() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (k, b) = (3, 10);
    let widths = [4, 3, 5];
    let xs: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, b, 5)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let feats: Vec<DenseNetwork> = (0..k)
        .map(|i| DenseNetwork::new_seeded(&[5, 7, widths[i]], 40 + i as u64).unwrap())
        .collect();
    let head = DenseNetwork::new_seeded(&[12, 9, 3], 39).unwrap();

    // Analytic gradients, computed the way the protocol computes them.
    let caches: Vec<_> = feats
        .iter()
        .zip(&xs)
        .map(|(f, x)| f.forward_cached(x).unwrap())
        .collect();
    let refs: Vec<&Matrix> = caches.iter().map(|c| c.output()).collect();
    let lg = loss_and_grad(&head, &Matrix::hconcat(&refs).unwrap(), &labels, &widths).unwrap();
    let feat_grads: Vec<_> = (0..k)
        .map(|i| {
            let mut up = lg.embedding_grads[i].clone();
            up.scale(b as f64);
            feats[i].backward(&caches[i], &up).unwrap().0
        })
        .collect();

    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 240 {
        // Party 0 is the head, 1..=k the feature models.
        let party = rng.random_range(0..=k);
        let net = if party == 0 { &head } else { &feats[party - 1] };
        let li = rng.random_range(0..net.layers.len());
        let (rows, cols) = (net.layers[li].out_dim(), net.layers[li].in_dim());
        let j = rng.random_range(0..rows);
        let is_bias = rng.random_bool(0.2);
        let i = if is_bias { 0 } else { rng.random_range(0..cols) };
        let eval = |delta: f64| {
            let mut head = head.clone();
            let mut feats = feats.clone();
            let net = if party == 0 { &mut head } else { &mut feats[party - 1] };
            if is_bias {
                net.layers[li].biases[j] += delta;
            } else {
                let w = net.layers[li].weights.get(j, i);
                net.layers[li].weights.set(j, i, w + delta);
            }
            chain_loss(&head, &feats, &xs, &labels, &widths)
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let grads = if party == 0 {
            &lg.head_grads
        } else {
            &feat_grads[party - 1]
        };
        let g = if is_bias {
            grads.biases[li][j]
        } else {
            grads.weights[li].get(j, i)
        };
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        ensure(rel < 1e-4, || {
            format!("party {party} layer {li} ({j},{i}) bias={is_bias}: {g} vs {fd}")
        })?;
        worst = worst.max(rel);
        checked += 1;
    }
    within(Duration::from_secs(10), start.elapsed())?;
    Ok(format!(
        "{checked} random parameters over head and feature models, max rel err {worst:.2e}"
    ))
}

fn masked_sets(net: &DenseNetwork) -> Vec<BTreeSet<usize>> {
    net.layers
        .iter()
        .map(|l| (0..l.out_dim()).filter(|&j| !l.neuron_mask[j]).collect())
        .collect()
}

fn neuron_prune_follows_running_max() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = [0.0, 0.2, 0.4, 0.6];
    let schedules = 25;
    for s in 0..schedules {
        let widths = [
            6,
            rng.random_range(5..20),
            rng.random_range(5..20),
            rng.random_range(2..10),
        ];
        let mut net = DenseNetwork::new_seeded(&widths, 100 + s).unwrap();
        let mut prev_max = 0.0f64;
        let mut prev = masked_sets(&net);
        for step in 0..8 {
            let alpha = grid[rng.random_range(0..grid.len())];
            let decision = structured_prune(&mut net, alpha, prev_max).map_err(|e| e.to_string())?;
            prev_max = prev_max.max(alpha);
            let now = masked_sets(&net);
            for (li, layer) in net.layers.iter().enumerate() {
                let want = (prev_max * layer.out_dim() as f64 + 1e-9).floor() as usize;
                ensure(now[li].len() == want, || {
                    format!(
                        "schedule {s} step {step} layer {li}: {} masked, want {want}",
                        now[li].len()
                    )
                })?;
                ensure(prev[li].is_subset(&now[li]), || {
                    format!("schedule {s} step {step} layer {li}: support grew back")
                })?;
                ensure(
                    decision.newly_masked[li].len() == now[li].len() - prev[li].len(),
                    || format!("schedule {s} step {step} layer {li}: decision disagrees with masks"),
                )?;
            }
            prev = now;
        }
    }
    Ok(format!(
        "{schedules} random schedules over {{0, 0.2, 0.4, 0.6}}, 8 steps each"
    ))
}

fn lower_alpha_after_higher_is_noop() -> Outcome {
    let mut net = DenseNetwork::new_seeded(&[8, 20, 10, 5], 8).unwrap();
    let first = structured_prune(&mut net, 0.6, 0.0).map_err(|e| e.to_string())?;
    let before = net.clone();
    let second = structured_prune(&mut net, 0.4, first.achieved_ratio).map_err(|e| e.to_string())?;
    ensure(second.newly_masked_count() == 0, || {
        format!("{} new masks", second.newly_masked_count())
    })?;
    ensure(net == before, || "model changed".into())?;
    Ok(format!(
        "0.6 masked {} neurons, then 0.4 masked 0",
        first.newly_masked_count()
    ))
}

fn omega_monotone_in_beta() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 120;
    for t in 0..trials {
        let (n, d) = (rng.random_range(1..40), rng.random_range(1..24));
        let h = random_matrix(&mut rng, n, d);
        let om = |beta: f64| compute_omega(&h, &embedding_prune(&h, beta).unwrap()).unwrap();
        let (o0, o2, o4, o6) = (om(0.0), om(0.2), om(0.4), om(0.6));
        ensure(o0 == 0.0, || format!("trial {t}: omega(0) = {o0}"))?;
        ensure(o2 <= o4 && o4 <= o6, || format!("trial {t} ({n}x{d}): {o2} {o4} {o6}"))?;
    }
    Ok(format!("{trials} random matrices, omega(0) = 0 exactly"))
}

fn uplink_bytes_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let configs = 10;
    for c in 0..configs {
        let k = rng.random_range(1..4);
        let d_emb = rng.random_range(2..12);
        let n = rng.random_range(20..120);
        let betas: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.95)).collect();
        let spec = SynthSpec {
            n,
            d: 3 * k,
            classes: 2,
            ..SynthSpec::default()
        };
        let data = synth_classification(c, k, &spec).map_err(|e| e.to_string())?;
        let cfg = ProtocolConfig {
            seed: c,
            feature_widths: vec![vec![d_emb]; k],
            head_hidden: vec![],
            local_iters: 1,
            rounds: 1,
            eta: 0.1,
            eta_decay: 1.0,
            batch_size: 8,
            probe_size: 8,
            execution: Execution::default(),
        };
        let plan = RoundPlan::constant(1, &vec![0.0; k], &betas).map_err(|e| e.to_string())?;
        let mut sim = Simulator::new(cfg, plan, &data).map_err(|e| e.to_string())?;
        let report = sim.exchange_embeddings().map_err(|e| e.to_string())?;
        for (i, &beta) in betas.iter().enumerate() {
            let kept = d_emb - (beta * d_emb as f64).floor() as usize;
            let want = (n * (2 + 10 * kept)) as u64;
            ensure(report.uplink_bytes[i] == want, || {
                format!("config {c} client {i}: {} bytes, want {want}", report.uplink_bytes[i])
            })?;
            let wire = sim.state().stale_embeddings[i].encode().len() as u64;
            ensure(wire == want, || {
                format!("config {c} client {i}: encoded {wire} bytes, want {want}")
            })?;
        }
    }
    Ok(format!(
        "{configs} random configs match N * (2 + 10 * (d - floor(beta d))) exactly"
    ))
}

fn run_config(name: &str, dir: &Path) -> Result<RunSummary, String> {
    let path = configs_dir().join(name);
    let cfg = ExperimentConfig::from_path(&path).map_err(|e| e.to_string())?;
    let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
    run_experiment(&cfg, &dir.join(&stem), &stem).map_err(|e| e.to_string())
}

fn acc(s: &RunSummary, round: usize) -> Result<f64, String> {
    s.records
        .get(round)
        .map(|r| r.test_acc)
        .ok_or_else(|| format!("{} has no round {round}", s.label))
}

fn one_shot_prune_drop_and_recovery(dir: &Path, nl: &RunSummary, nl_time: Duration) -> Outcome {
    let start = Instant::now();
    let runs = ["prune40_a02.toml", "prune40_a04.toml", "prune40_a06.toml"]
        .iter()
        .map(|n| run_config(n, dir))
        .collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed() + nl_time;
    let mut drops = Vec::new();
    let floor = acc(nl, 79)? - 0.05;
    for s in &runs {
        drops.push(acc(s, 39)? - acc(s, 40)?);
        ensure(acc(s, 79)? >= floor, || {
            format!("{}: final {:.4} below {floor:.4}", s.label, acc(s, 79).unwrap())
        })?;
    }
    ensure(drops[0] <= drops[1] && drops[1] <= drops[2], || {
        format!("drops not ordered: {drops:?}")
    })?;
    within(Duration::from_secs(600), elapsed)?;
    let finals: Vec<String> = runs.iter().map(|s| format!("{:.4}", acc(s, 79).unwrap())).collect();
    Ok(format!(
        "drops {:.4} <= {:.4} <= {:.4}, finals [{}] vs NL {:.4}, {elapsed:.1?}",
        drops[0],
        drops[1],
        drops[2],
        finals.join(", "),
        acc(nl, 79)?
    ))
}

fn dynamic_schedule_saves_resources(
    dir: &Path,
    nl: &RunSummary,
    nl_time: Duration,
) -> Result<(Outcome, RunSummary), String> {
    let start = Instant::now();
    let l = run_config("dynamic_l.toml", dir)?;
    let elapsed = start.elapsed() + nl_time;
    let check = || -> Outcome {
        let gap = (l.final_acc - nl.final_acc).abs();
        ensure(gap <= 0.05, || {
            format!("accuracy {:.4} vs NL {:.4}", l.final_acc, nl.final_acc)
        })?;
        ensure(l.total_uplink_bytes < nl.total_uplink_bytes, || "no byte saving".into())?;
        ensure(l.total_flops < nl.total_flops, || "no FLOP saving".into())?;
        within(Duration::from_secs(600), elapsed)?;
        Ok(format!(
            "acc {:.4} vs {:.4}, bytes {} vs {}, FLOPs {} vs {}, {elapsed:.1?}",
            l.final_acc, nl.final_acc, l.total_uplink_bytes, nl.total_uplink_bytes, l.total_flops, nl.total_flops
        ))
    };
    Ok((check(), l))
}

fn rerun_is_byte_identical(dir: &Path, first: &RunSummary) -> Outcome {
    let again = run_config("dynamic_l.toml", &dir.join("rerun"))?;
    let a = std::fs::read(first.out_dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(again.out_dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    ensure(a == b, || "metrics.csv differs between runs".into())?;
    Ok(format!("metrics.csv identical across two runs ({} bytes)", a.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("protocol equals joint SGD", protocol_matches_joint_sgd()),
        (
            "gradients match finite differences",
            gradients_match_finite_differences(),
        ),
        ("neuron pruning follows running max", neuron_prune_follows_running_max()),
        (
            "lower ratio after higher is a no-op",
            lower_alpha_after_higher_is_noop(),
        ),
        ("embedding error monotone in beta", omega_monotone_in_beta()),
        ("uplink bytes closed form", uplink_bytes_closed_form()),
    ];

    let nl_start = Instant::now();
    match run_config("nl.toml", dir) {
        Ok(nl) => {
            let nl_time = nl_start.elapsed();
            results.push((
                "one-shot pruning drop and recovery",
                one_shot_prune_drop_and_recovery(dir, &nl, nl_time),
            ));
            match dynamic_schedule_saves_resources(dir, &nl, nl_time) {
                Ok((outcome, l)) => {
                    results.push(("dynamic schedule saves bytes and FLOPs", outcome));
                    results.push(("seeded runs are reproducible", rerun_is_byte_identical(dir, &l)));
                }
                Err(e) => {
                    results.push(("dynamic schedule saves bytes and FLOPs", Err(e.clone())));
                    results.push(("seeded runs are reproducible", Err(e)));
                }
            }
        }
        Err(e) => {
            for name in [
                "one-shot pruning drop and recovery",
                "dynamic schedule saves bytes and FLOPs",
                "seeded runs are reproducible",
            ] {
                results.push((name, Err(format!("baseline run failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} acceptance checks passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
