//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails that is not listed in `KNOWN_UNMET`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use deepfed::data::{gen_separable, parse_idx_images, parse_idx_labels, partition_iid, Shard};
use deepfed::experiment::{
    execute, run_experiment, sweep, validate_config, ExperimentConfig, SweepOutput, METRICS_FILE,
};
use deepfed::federated::{Algo, FedConfig, FedState};
use deepfed::network::{self, init_params, NetConfig, ParamGrad, Params};
use deepfed::numerics::{
    gaussian_matrix, spectral_norm, streams, tuple_frobenius_distance, RngStream, SPECTRAL_ITERS,
    SPECTRAL_TOL,
};
use deepfed::probes::{
    calibrate_two_term, global_loss_and_gradient, linear_rate_fit, semi_smoothness_terms,
};
use deepfed::Error;

/// Criteria that fail on the pinned configuration for reasons documented in
/// the README. They still print FAIL but do not fail the build.
const KNOWN_UNMET: &[u32] = &[8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn config(name: &str, out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).expect("config readable"))
            .expect("config parses");
    let mut cfg = validate_config(&raw).expect("config valid");
    cfg.out_dir = out.join(name.trim_end_matches(".json"));
    cfg
}

fn synthetic_shards(n: usize, d: usize, o: usize, k: usize, seed: u64) -> Vec<Shard> {
    let ds = gen_separable(n, d, o, 0.0, &mut RngStream::new(seed, streams::DATA)).unwrap();
    let part = partition_iid(&ds, k, &mut RngStream::new(seed, streams::PARTITION)).unwrap();
    part.shards(&ds).unwrap()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let net = NetConfig::new(3, 32, 8, 4);
    let shards = synthetic_shards(5, 8, 4, 1, 11);
    let shard = &shards[0];
    // Resample the initialization until no preactivation sits near a kink.
    let mut seed = 0;
    let p = loop {
        let p = init_params(&net, &mut RngStream::new(seed, streams::INIT)).unwrap();
        let margin = (0..shard.len())
            .flat_map(|j| {
                network::forward(&p, &shard.inputs().col_to_vec(j))
                    .unwrap()
                    .preactivations
                    .into_iter()
                    .flatten()
            })
            .fold(f64::INFINITY, |a, z| a.min(z.abs()));
        if margin > 1e-3 {
            break p;
        }
        seed += 1;
    };
    let grad = network::gradient(&p, shard).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..p.layers() {
        let (rows, cols) = p.hidden()[l].shape();
        for r in 0..rows {
            for c in 0..cols {
                let bump = |delta: f64| {
                    let mut hidden = p.hidden().to_vec();
                    let v = hidden[l].get(r, c);
                    hidden[l].set(r, c, v + delta);
                    network::loss(&p.replace_hidden(hidden).unwrap(), shard).unwrap()
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = grad.layers[l].get(r, c);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 5.0,
        format!("max relative error {worst:.2e} (init seed {seed}), {secs:.2}s"),
    )
}

fn fed_cfg(k: usize, tau: usize, rounds: usize, eta: f64) -> FedConfig {
    FedConfig {
        clients: k,
        tau,
        eta,
        rounds,
        algo: Algo::LocalGd,
        batch: 1,
        seed: 5,
        c_eta: 1.0,
    }
}

fn reduction_identities() -> Verdict {
    let net = NetConfig::new(2, 64, 8, 2);

    let shards = synthetic_shards(32, 8, 2, 4, 21);
    let mut fed = FedState::new(fed_cfg(4, 1, 50, 0.05), &net, shards.clone()).unwrap();
    let mut central = fed.w0().clone();
    let refs: Vec<&Shard> = shards.iter().collect();
    let mut worst_a: f64 = 0.0;
    for _ in 0..50 {
        fed.local_steps().unwrap();
        fed.synchronize().unwrap();
        let (_, g) = global_loss_and_gradient(&central, &refs).unwrap();
        central.descend(0.05, &g).unwrap();
        let diff = tuple_frobenius_distance(fed.w_sync().hidden(), central.hidden()).unwrap();
        let norm = central
            .hidden()
            .iter()
            .map(|w| w.frobenius_sq())
            .sum::<f64>()
            .sqrt();
        let fro = diff.per_layer.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_a = worst_a.max(fro / norm);
    }

    let shards = synthetic_shards(12, 8, 2, 1, 22);
    let mut fed = FedState::new(fed_cfg(1, 5, 2, 0.05), &net, shards.clone()).unwrap();
    let mut plain = fed.w0().clone();
    for _ in 0..2 {
        for _ in 0..5 {
            fed.local_steps().unwrap();
        }
        fed.synchronize().unwrap();
    }
    for _ in 0..10 {
        let g = network::gradient(&plain, &shards[0]).unwrap();
        plain.descend(0.05, &g).unwrap();
    }
    let exact_b = fed.w_sync() == &plain;
    verdict(
        worst_a <= 1e-10 && exact_b,
        format!("(a) max relative gap {worst_a:.2e}; (b) bit-identical: {exact_b}"),
    )
}

fn sync_exactness() -> Verdict {
    let net = NetConfig::new(2, 32, 8, 2);
    let mut worst: f64 = 0.0;
    let mut all_equal = true;
    for algo in [Algo::LocalGd, Algo::LocalSgd] {
        let shards = synthetic_shards(30, 8, 2, 3, 31);
        let mut cfg = fed_cfg(3, 3, 20, 0.05);
        cfg.algo = algo;
        cfg.batch = 4;
        let mut s = FedState::new(cfg, &net, shards).unwrap();
        for _ in 0..20 {
            for _ in 0..3 {
                s.local_steps().unwrap();
            }
            s.synchronize().unwrap();
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let d = tuple_frobenius_distance(
                        s.client_params(i).hidden(),
                        s.client_params(j).hidden(),
                    )
                    .unwrap();
                    worst = worst.max(d.max);
                    all_equal &= s.client_params(i) == s.client_params(j);
                }
            }
        }
    }
    verdict(
        worst == 0.0 && all_equal,
        format!("max inter-client distance after sync {worst:e} over 20 rounds, GD and SGD"),
    )
}

fn determinism(out: &Path) -> Verdict {
    let raw = serde_json::json!({
        "net": {"layers": 2, "width": 48, "input_dim": 8, "output_dim": 3},
        "fed": {"clients": 3, "tau": 3, "rounds": 4, "algo": "local_sgd", "eta": 0.05, "batch": 3, "seed": 7},
        "data": {"synthetic": {"n_total": 24, "phi": 0.2}},
        "probe_every": 1,
    });
    let mut cfg = validate_config(&raw).unwrap();
    let mut files = Vec::new();
    for rep in 0..2 {
        cfg.out_dir = out.join(format!("determinism_{rep}"));
        let run = run_experiment(&cfg).unwrap();
        files.push(std::fs::read(run.dir.join(METRICS_FILE)).unwrap());
    }
    let same = files[0] == files[1];
    verdict(
        same,
        format!(
            "metrics.csv identical across two runs: {same} ({} bytes)",
            files[0].len()
        ),
    )
}

struct Run5 {
    log: deepfed::experiment::MetricsLog,
    tau: usize,
    secs: f64,
}

fn linear_convergence(run: &Run5) -> Verdict {
    let losses = &run.log.round_losses;
    let ratio = losses[200] / losses[0];
    let fit = linear_rate_fit(&losses[5..=200]).unwrap();
    verdict(
        ratio <= 1e-3 && fit.r2 >= 0.95,
        format!(
            "L(200)/L(0) = {ratio:.2e}, r2 over rounds 5-200 = {:.4}, rate {:.4}/round, run {:.0}s (target < 120s)",
            fit.r2, fit.implied_rate, run.secs
        ),
    )
}

fn loss_shrinkage(run: &Run5) -> Verdict {
    let worst = run
        .log
        .records
        .iter()
        .map(|r| r.shrinkage_violation)
        .fold(f64::NEG_INFINITY, f64::max);
    verdict(
        worst <= 1e-6,
        format!(
            "worst shrinkage violation {worst:.2e} over {} probes",
            run.log.records.len()
        ),
    )
}

fn deviation_bound(run: &Run5) -> Verdict {
    let window_ends: Vec<_> = run
        .log
        .records
        .iter()
        .filter(|r| r.t > 0 && r.t % run.tau == 0)
        .collect();
    let first = window_ends[0];
    let constant = first.deviation_mean_sq / first.deviation_bound_rhs;
    let worst = window_ends[1..]
        .iter()
        .map(|r| r.deviation_mean_sq / (constant * r.deviation_bound_rhs))
        .fold(0.0, f64::max);
    verdict(
        worst <= 4.0,
        format!(
            "calibrated constant {constant:.3e} at round 1, worst later measured/bound {worst:.3}"
        ),
    )
}

fn gradient_ratio(run: &Run5) -> Verdict {
    let base = run.log.records[0].grad_upper_ratio;
    let (lo, hi) = run
        .log
        .records
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| {
            let q = r.grad_upper_ratio / base;
            (lo.min(q), hi.max(q))
        });
    verdict(
        lo >= 0.25 && hi <= 4.0 && base > 0.0,
        format!("upper ratio / value at t=0 stays in [{lo:.3}, {hi:.3}]"),
    )
}

fn means(out: &SweepOutput) -> Vec<(f64, f64)> {
    out.rows
        .iter()
        .map(|r| (r.value, r.final_loss_mean))
        .collect()
}

fn fmt_means(m: &[(f64, f64)]) -> String {
    m.iter()
        .map(|(v, l)| format!("{v}: {l:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn m_sweep(out: &Path) -> Verdict {
    let res = sweep(&config("acceptance_msweep.json", out)).unwrap();
    let m = means(&res);
    let ok = m.windows(2).all(|w| w[1].1 <= w[0].1);
    verdict(ok, format!("mean final loss by m {{{}}}", fmt_means(&m)))
}

fn tau_sweep(out: &Path) -> Verdict {
    let label = means(&sweep(&config("acceptance_tausweep_label.json", out)).unwrap());
    let iid = means(&sweep(&config("acceptance_tausweep_iid.json", out)).unwrap());
    let monotone = |m: &[(f64, f64)]| m.windows(2).all(|w| w[1].1 >= w[0].1);
    let gap = |m: &[(f64, f64)]| m.last().unwrap().1 - m[0].1;
    let ok = monotone(&label) && monotone(&iid) && gap(&label) > gap(&iid);
    verdict(
        ok,
        format!(
            "label_shards {{{}}}, iid {{{}}}, gap τ=32 vs τ=1: {:.3e} vs {:.3e}",
            fmt_means(&label),
            fmt_means(&iid),
            gap(&label),
            gap(&iid)
        ),
    )
}

fn ball_perturbation(p: &Params, radius: f64, rng: &mut RngStream) -> ParamGrad {
    let scale = radius * rng.uniform();
    ParamGrad {
        layers: p
            .hidden()
            .iter()
            .map(|w| {
                let (r, c) = w.shape();
                let g = gaussian_matrix(r, c, 1.0, rng);
                g.scale(scale / spectral_norm(&g, SPECTRAL_ITERS, SPECTRAL_TOL))
            })
            .collect(),
    }
}

fn semi_smoothness() -> Verdict {
    let net = NetConfig::new(2, 256, 16, 2);
    let shards = synthetic_shards(32, 16, 2, 2, 41);
    let refs: Vec<&Shard> = shards.iter().collect();
    let w0 = init_params(&net, &mut RngStream::new(41, streams::INIT)).unwrap();
    let radius = 1e-3;
    let mut rng = RngStream::new(41, streams::PROBE);
    let mut sample = || {
        let w_hat = w0
            .offset(&ball_perturbation(&w0, radius, &mut rng))
            .unwrap();
        let w_tilde = w0
            .offset(&ball_perturbation(&w0, radius, &mut rng))
            .unwrap();
        semi_smoothness_terms(&w_hat, &w_tilde, &refs, radius).unwrap()
    };
    let calibration: Vec<_> = (0..100).map(|_| sample()).collect();
    let (c1, c2) = calibrate_two_term(
        &calibration
            .iter()
            .map(|t| (t.gap, t.first_order, t.second_order))
            .collect::<Vec<_>>(),
        4.0,
    );
    let worst = (0..100)
        .map(|_| sample().residual(c1, c2))
        .fold(f64::INFINITY, f64::min);
    verdict(
        worst >= -1e-10,
        format!("C' = {c1:.3e}, C'' = {c2:.3e}, min held-out residual {worst:.3e}"),
    )
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

fn idx_parsing() -> Verdict {
    let images = idx_bytes(0x803, &[2, 2, 2], &[255, 0, 0, 0, 0, 153, 204, 0]);
    let labels = idx_bytes(0x801, &[2], &[7, 3]);
    let parsed = parse_idx_images(&images, "images").unwrap();
    let expected = vec![
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 153.0 / 255.0, 204.0 / 255.0, 0.0],
    ];
    let exact = parsed.pixels == expected
        && (parsed.rows, parsed.cols) == (2, 2)
        && parse_idx_labels(&labels, "labels").unwrap() == vec![7, 3];

    let bad_magic = parse_idx_images(&idx_bytes(0x899, &[2, 2, 2], &[0; 8]), "bad");
    let truncated = parse_idx_images(&images[..images.len() - 3], "short");
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img"), &images).unwrap();
    std::fs::write(dir.path().join("lbl"), idx_bytes(0x801, &[3], &[1, 2, 3])).unwrap();
    let mismatch = deepfed::data::load_idx(dir.path().join("img"), dir.path().join("lbl"), None);
    let errors_ok = matches!(bad_magic, Err(Error::IdxWrongMagic { found: 0x899, .. }))
        && matches!(truncated, Err(Error::IdxTruncated { .. }))
        && matches!(
            mismatch,
            Err(Error::IdxCountMismatch {
                images: 2,
                labels: 3
            })
        );
    verdict(
        exact && errors_ok,
        format!(
            "fixture exact: {exact}; bad magic / truncation / count mismatch distinct: {errors_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let out = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |id: u32, name: &'static str, v: Verdict| {
        let tag = match (v.pass, KNOWN_UNMET.contains(&id)) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known, see README)",
        };
        println!("[{tag}] {id:>2}. {name}: {}", v.detail);
        results.push((id, name, v));
    };

    report(1, "gradient correctness", gradient_check());
    report(2, "reduction identities", reduction_identities());
    report(3, "sync exactness", sync_exactness());
    report(4, "determinism", determinism(out.path()));

    let cfg = config("acceptance_run5.json", out.path());
    let start = Instant::now();
    let (log, _, _) = execute(&cfg).expect("run 5 completes");
    let run5 = Run5 {
        log,
        tau: cfg.fed.tau,
        secs: start.elapsed().as_secs_f64(),
    };
    report(5, "linear convergence", linear_convergence(&run5));
    report(6, "loss shrinkage", loss_shrinkage(&run5));
    report(7, "deviation bound", deviation_bound(&run5));
    report(8, "gradient-ratio stability", gradient_ratio(&run5));

    report(9, "m-sweep trend", m_sweep(out.path()));
    report(10, "tau-sweep trend", tau_sweep(out.path()));
    report(11, "semi-smoothness residual", semi_smoothness());
    report(12, "IDX parsing", idx_parsing());

    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, _, v)| !v.pass && !KNOWN_UNMET.contains(id))
        .map(|(id, _, _)| *id)
        .collect();
    let passed = results.iter().filter(|(_, _, v)| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
