use deepfed::data::{gen_separable, Dataset, Shard};
use deepfed::network::{self, init_params, NetConfig, ParamGrad, Params};
use deepfed::numerics::{streams, RngStream};
use rand::seq::index;

fn instance(net: &NetConfig, n: usize, seed: u64) -> (Params, Shard) {
    let ds = gen_separable(
        n,
        net.input_dim,
        net.output_dim,
        0.0,
        &mut RngStream::new(seed, streams::DATA),
    )
    .unwrap();
    let shard = Shard::new(&ds, (0..n).collect(), 0).unwrap();
    let p = init_params(net, &mut RngStream::new(seed, streams::INIT)).unwrap();
    (p, shard)
}

fn min_abs_preactivation(p: &Params, shard: &Shard) -> f64 {
    (0..shard.len())
        .flat_map(|j| {
            network::forward(p, &shard.inputs().col_to_vec(j))
                .unwrap()
                .preactivations
                .into_iter()
                .flatten()
        })
        .fold(f64::INFINITY, |a, z| a.min(z.abs()))
}

fn with_entry(p: &Params, l: usize, r: usize, c: usize, delta: f64) -> Params {
    let mut hidden = p.hidden().to_vec();
    let v = hidden[l].get(r, c);
    hidden[l].set(r, c, v + delta);
    p.replace_hidden(hidden).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let net = NetConfig::new(3, 16, 6, 3);
    let (p, shard) = (0..)
        .map(|seed| instance(&net, 4, seed))
        .find(|(p, s)| min_abs_preactivation(p, s) > 1e-3)
        .unwrap();
    let grad = network::gradient(&p, &shard).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..3 {
        let (rows, cols) = p.hidden()[l].shape();
        for r in 0..rows {
            for c in 0..cols {
                let plus = network::loss(&with_entry(&p, l, r, c, h), &shard).unwrap();
                let minus = network::loss(&with_entry(&p, l, r, c, -h), &shard).unwrap();
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grad.layers[l].get(r, c);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn trace_reconstructs_output_from_masks() {
    let net = NetConfig::new(3, 20, 5, 2);
    let (p, shard) = instance(&net, 6, 3);
    for j in 0..shard.len() {
        let trace = network::forward(&p, &shard.inputs().col_to_vec(j)).unwrap();
        let rebuilt = trace.reconstruct(&p);
        for (a, b) in trace.output.iter().zip(&rebuilt) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        for (z, mask) in trace.preactivations.iter().zip(&trace.patterns) {
            for (v, &on) in z.iter().zip(mask) {
                assert_eq!(on, *v >= 0.0);
            }
        }
    }
}

#[test]
fn tiny_perturbation_keeps_patterns() {
    let net = NetConfig::new(2, 24, 5, 2);
    let (p, shard) = (0..)
        .map(|seed| instance(&net, 5, seed))
        .find(|(p, s)| min_abs_preactivation(p, s) > 1e-3)
        .unwrap();
    let q = with_entry(&p, 0, 0, 0, 1e-9);
    for j in 0..shard.len() {
        let x = shard.inputs().col_to_vec(j);
        let a = network::forward(&p, &x).unwrap();
        let b = network::forward(&q, &x).unwrap();
        assert_eq!(a.patterns, b.patterns);
    }
}

#[test]
fn loss_matches_per_example_loop() {
    let net = NetConfig::new(2, 10, 4, 3);
    let (p, shard) = instance(&net, 2, 5);
    let mut total = 0.0;
    for j in 0..2 {
        let f = network::forward(&p, &shard.inputs().col_to_vec(j))
            .unwrap()
            .output;
        let y = shard.targets().col_to_vec(j);
        total += 0.5
            * f.iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    let oracle = total / 2.0;
    let got = network::loss(&p, &shard).unwrap();
    assert!((got - oracle).abs() <= 1e-15 * (1.0 + oracle));
}

#[test]
fn singleton_batches_average_to_full_gradient() {
    let net = NetConfig::new(2, 12, 4, 2);
    let (p, shard) = instance(&net, 7, 6);
    let full = network::gradient(&p, &shard).unwrap();
    let mut acc = ParamGrad::zeros_like(&p);
    for j in 0..7 {
        acc.add_assign(&network::stochastic_gradient(&p, &shard, &[j]).unwrap())
            .unwrap();
    }
    let acc = acc.scale(1.0 / 7.0);
    let gap = acc.sub(&full).unwrap().frobenius_sq().sqrt();
    assert!(gap <= 1e-12 * (1.0 + full.frobenius_sq().sqrt()), "{gap}");
}

#[test]
fn minibatch_gradient_is_unbiased_in_monte_carlo() {
    let net = NetConfig::new(1, 4, 3, 1);
    let (p, shard) = instance(&net, 6, 7);
    let full = network::gradient(&p, &shard).unwrap();
    let draws = 10_000;
    let mut rng = RngStream::new(7, streams::PROBE);
    let entries = full.layers[0].as_slice().len();
    let (mut sum, mut sum_sq) = (vec![0.0; entries], vec![0.0; entries]);
    for _ in 0..draws {
        let batch = index::sample(&mut rng, 6, 2).into_vec();
        let g = network::stochastic_gradient(&p, &shard, &batch).unwrap();
        for (k, v) in g.layers[0].as_slice().iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = draws as f64;
    for k in 0..entries {
        let mean = sum[k] / n;
        let var = (sum_sq[k] / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        let target = full.layers[0].as_slice()[k];
        assert!(
            (mean - target).abs() <= 3.0 * se + 1e-15,
            "entry {k}: {mean} vs {target} (se {se})"
        );
    }
}

#[test]
fn positive_scaling_of_input_scales_output() {
    let net = NetConfig::new(3, 16, 4, 2);
    let (p, shard) = instance(&net, 3, 8);
    let x = shard.inputs().col_to_vec(1);
    let f = network::forward(&p, &x).unwrap().output;
    let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
    let f3 = network::forward(&p, &x3).unwrap().output;
    for (a, b) in f.iter().zip(&f3) {
        assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn predict_agrees_with_forward() {
    let net = NetConfig::new(2, 8, 3, 2);
    let (p, shard) = instance(&net, 5, 9);
    let out = network::predict(&p, shard.inputs()).unwrap();
    for j in 0..5 {
        let f = network::forward(&p, &shard.inputs().col_to_vec(j))
            .unwrap()
            .output;
        assert_eq!(out.col_to_vec(j), f);
    }
}

#[test]
fn mismatched_targets_are_rejected() {
    let ds = Dataset::new(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5, 0.5]], None).unwrap();
    let shard = Shard::new(&ds, vec![0], 0).unwrap();
    let p = init_params(&NetConfig::new(1, 4, 2, 2), &mut RngStream::new(0, 1)).unwrap();
    assert!(network::loss(&p, &shard).is_err());
    assert!(network::gradient(&p, &shard).is_err());
}
