#![allow(dead_code)]

//! Checks shared by the per-suite tests and the acceptance report. Each
//! returns a `Check` instead of panicking so the acceptance target can print
//! every outcome.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use dsam_core::backbone::BackboneConfig;
use dsam_core::data::{generate_synthetic, SyntheticDomainSpec};
use dsam_core::evaluation::{linear_probe, test_probs, validation_probs, FeatureSet, FeatureSource};
use dsam_core::feature_map::{collapse_fc_output, FeatureMap};
use dsam_core::features::extract_features;
use dsam_core::aggregation::{AggregationNode, AggregationNodeSpec};
use dsam_core::init::derive_seed;
use dsam_core::model::{DomainId, ModuleConfig, Network, NetworkKind};
use dsam_core::ops;
use dsam_core::training::{compute_losses, epoch_length, lr_at, split_train_val, DomainBatchSampler, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SOURCES: usize = 3;
pub const CLASSES: usize = 7;
pub const TOY_SIZE: usize = 16;

#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }

    pub fn assert(&self) {
        println!("{}", self.line());
        assert!(self.pass, "{}", self.line());
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (pass, detail) = f();
    Check {
        name,
        pass,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn toy_backbone(batch_norm: bool) -> BackboneConfig {
    BackboneConfig::Toy {
        channels: vec![4, 8, 8, 16],
        input_size: TOY_SIZE,
        batch_norm,
        weights: None,
    }
}

pub fn toy_net(kind: NetworkKind, seed: u64, batch_norm: bool) -> Network {
    Network::build(
        kind,
        &toy_backbone(batch_norm),
        &ModuleConfig::default(),
        SOURCES,
        CLASSES,
        seed,
        DType::F64,
        &Device::Cpu,
    )
    .unwrap()
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller
            let (u1, u2): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn images(n: usize, seed: u64) -> Tensor {
    gaussian(&[n, 3, TOY_SIZE, TOY_SIZE], seed)
}

pub fn labels(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<u32> = (0..n).map(|_| rng.random_range(0..CLASSES as u32)).collect();
    Tensor::from_vec(v, n, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bits(t: &Tensor) -> Vec<u64> {
    values(t).iter().map(|v| v.to_bits()).collect()
}

/// Adds gaussian noise to every parameter of module `j`.
pub fn perturb_module(net: &Network, j: usize, seed: u64) {
    let model = net.as_dsam().unwrap();
    for (k, (_, var)) in model.module_params(j).into_iter().enumerate() {
        let noise = gaussian(var.dims(), derive_seed(seed, k as u64));
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }
}

/// Row-wise softmax computed directly in f64, independent of the crate's ops.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |x| x / s)
        })
        .collect()
}

/// Mean cross-entropy computed directly in f64.
pub fn mean_ce(logits: &[f64], labels: &[u32], classes: usize) -> f64 {
    let total: f64 = logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum();
    total / labels.len() as f64
}

/// (a) routed outputs of other modules ignore lambda_j, (b) leave-one-out
/// scores of domain v ignore lambda_v, (c) test scores equal the softmax of
/// the summed forward_all logits.
pub fn routing_suite(trials: u64) -> Check {
    timed("routing/exclusion", || {
        let mut worst_c = 0.0f64;
        let mut failures = Vec::new();
        for trial in 0..trials {
            let net = toy_net(NetworkKind::Dsam, trial, true);
            let model = net.as_dsam().unwrap();
            let x = images(6, 1000 + trial);
            for j in 0..SOURCES {
                let before: Vec<_> = (0..SOURCES)
                    .map(|i| bits(&model.forward_routed(&x, DomainId::Source(i), None).unwrap()))
                    .collect();
                let loo_before = bits(&validation_probs(model, &x, j).unwrap());
                perturb_module(&net, j, derive_seed(trial, j as u64));
                for i in 0..SOURCES {
                    let after = bits(&model.forward_routed(&x, DomainId::Source(i), None).unwrap());
                    if i != j && after != before[i] {
                        failures.push(format!("trial {trial}: routed {i} moved under lambda_{j}"));
                    }
                    if i == j && after == before[i] {
                        failures.push(format!("trial {trial}: perturbation of lambda_{j} had no effect"));
                    }
                }
                if bits(&validation_probs(model, &x, j).unwrap()) != loo_before {
                    failures.push(format!("trial {trial}: validation_probs({j}) depends on lambda_{j}"));
                }
            }
            let logits = model.forward_all(&x, None).unwrap();
            let mut sum = vec![0.0; 6 * CLASSES];
            for l in &logits {
                for (s, v) in sum.iter_mut().zip(values(l)) {
                    *s += v;
                }
            }
            let oracle = softmax_rows(&sum, CLASSES);
            worst_c = worst_c.max(max_abs_diff(&values(&test_probs(model, &x).unwrap()), &oracle));
        }
        let pass = failures.is_empty() && worst_c <= 1e-6;
        let detail = if failures.is_empty() {
            format!("{trials} models, (a)(b) bit-identical, (c) max |diff| {worst_c:.2e} <= 1e-6")
        } else {
            failures.join("; ")
        };
        (pass, detail)
    })
}

/// Total D-SAM loss against independently routed per-domain cross-entropies.
pub fn loss_decomposition(trials: u64) -> (f64, f64) {
    let per = 4;
    let mut worst = 0.0f64;
    let mut uniform_err = 0.0f64;
    for trial in 0..trials {
        let net = toy_net(NetworkKind::Dsam, 50 + trial, true);
        let model = net.as_dsam().unwrap();
        let x = images(per * SOURCES, 2000 + trial);
        let y = labels(per * SOURCES, 3000 + trial);
        let losses = compute_losses(&net, &x, &y, per, None).unwrap();
        let total = values(&losses.total)[0];
        let ys: Vec<u32> = y.to_vec1().unwrap();
        let mut oracle = 0.0;
        for i in 0..SOURCES {
            let xi = x.narrow(0, i * per, per).unwrap();
            let logits = values(&model.forward_routed(&xi, DomainId::Source(i), None).unwrap());
            oracle += mean_ce(&logits, &ys[i * per..(i + 1) * per], CLASSES);
        }
        worst = worst.max((total - oracle).abs());

        // all-zero heads give uniform logits: S * ln C
        for j in 0..SOURCES {
            for (_, var) in model.module_params(j) {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let total = values(&compute_losses(&net, &x, &y, per, None).unwrap().total)[0];
        uniform_err = uniform_err.max((total - SOURCES as f64 * (CLASSES as f64).ln()).abs());
    }
    (worst, uniform_err)
}

fn grads_of(vars: &[Var], loss: &Tensor) -> Vec<Vec<f64>> {
    let store = loss.backward().unwrap();
    vars.iter()
        .map(|v| match store.get(v.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; v.elem_count()],
        })
        .collect()
}

/// Gradient of lambda_j with other sub-batches zeroed must not change.
pub fn gradient_isolation(trials: u64) -> bool {
    let per = 4;
    (0..trials).all(|trial| {
        // no batch statistics so the backbone rows stay independent
        let net = toy_net(NetworkKind::Dsam, 70 + trial, false);
        let model = net.as_dsam().unwrap();
        let x = images(per * SOURCES, 4000 + trial);
        let y = labels(per * SOURCES, 5000 + trial);
        (0..SOURCES).all(|j| {
            let vars: Vec<Var> = model.module_params(j).into_iter().map(|(_, v)| v).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let full = grads_of(&vars, &compute_losses(&net, &x, &y, per, Some(&mut rng)).unwrap().total);
            let rows: Vec<Tensor> = (0..SOURCES)
                .map(|i| {
                    let xi = x.narrow(0, i * per, per).unwrap();
                    if i == j {
                        xi
                    } else {
                        xi.zeros_like().unwrap()
                    }
                })
                .collect();
            let masked = Tensor::cat(&rows, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let iso = grads_of(&vars, &compute_losses(&net, &masked, &y, per, Some(&mut rng)).unwrap().total);
            let bitwise = |a: &Vec<Vec<f64>>| -> Vec<u64> { a.iter().flatten().map(|v| v.to_bits()).collect() };
            bitwise(&full) == bitwise(&iso) && full.iter().flatten().any(|g| *g != 0.0)
        })
    })
}

/// Backbone gradient of the joint loss against the sum of the per-domain
/// gradients taken one domain at a time.
pub fn theta_accumulation(trials: u64) -> f64 {
    let per = 4;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let net = toy_net(NetworkKind::Dsam, 90 + trial, true);
        let theta: Vec<Var> = net.backbone().named_params().into_iter().map(|(_, v)| v).collect();
        let x = images(per * SOURCES, 6000 + trial);
        let y = labels(per * SOURCES, 7000 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let losses = compute_losses(&net, &x, &y, per, Some(&mut rng)).unwrap();
        let joint = grads_of(&theta, &losses.total);
        let mut acc: Vec<Vec<f64>> = theta.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        for l in &losses.per_domain {
            for (a, g) in acc.iter_mut().zip(grads_of(&theta, l)) {
                for (s, v) in a.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        for (a, b) in joint.iter().zip(&acc) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    worst
}

/// Worst relative error between analytic and central-difference gradients
/// of a random scalar projection of a node's output.
pub fn node_finite_differences(seeds: u64) -> (f64, usize) {
    let step = 1e-4;
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cp, ct, co) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
        let spec = AggregationNodeSpec::new(cp, ct, co);
        assert!(spec.param_count() <= 50);
        max_params = max_params.max(spec.param_count());
        let fused = spec.fused_channels();
        let w0 = values(&gaussian(&[co, fused], derive_seed(seed, 1)));
        let b0 = values(&gaussian(&[co], derive_seed(seed, 2)));
        let prev = FeatureMap::new(gaussian(&[2, cp, 3, 3], derive_seed(seed, 3))).unwrap();
        let tap = FeatureMap::new(gaussian(&[2, ct, 3, 3], derive_seed(seed, 4))).unwrap();
        let proj = gaussian(&[2, co, 3, 3], derive_seed(seed, 5));

        let loss = |w: &[f64], b: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let wt = Tensor::from_vec(w.to_vec(), (co, fused), &Device::Cpu).unwrap();
            let bt = Tensor::from_vec(b.to_vec(), co, &Device::Cpu).unwrap();
            let node = AggregationNode::from_tensors(spec.clone(), &wt, &bt).unwrap();
            let out = node.forward(&prev, &tap, None).unwrap();
            let l = (out.tensor() * &proj).unwrap().sum_all().unwrap();
            let store = l.backward().unwrap();
            let gw = values(store.get(node.weight().as_tensor()).unwrap());
            let gb = values(store.get(node.bias().as_tensor()).unwrap());
            (values(&l)[0], Some((gw, gb)))
        };
        let (_, grads) = loss(&w0, &b0);
        let (gw, gb) = grads.unwrap();
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * step);
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        };
        for k in 0..w0.len() {
            let (mut wp, mut wm) = (w0.clone(), w0.clone());
            wp[k] += step;
            wm[k] -= step;
            check(gw[k], loss(&wp, &b0).0, loss(&wm, &b0).0);
        }
        for k in 0..b0.len() {
            let (mut bp, mut bm) = (b0.clone(), b0.clone());
            bp[k] += step;
            bm[k] -= step;
            check(gb[k], loss(&w0, &bp).0, loss(&w0, &bm).0);
        }
    }
    (worst, max_params)
}

pub fn loss_gradient_suite() -> Check {
    timed("loss/gradient", || {
        let (decomp, uniform) = loss_decomposition(5);
        let isolated = gradient_isolation(3);
        let theta = theta_accumulation(3);
        let (fd, params) = node_finite_differences(25);
        let pass = decomp <= 1e-6 && uniform <= 1e-6 && isolated && theta <= 1e-6 && fd <= 1e-3;
        (
            pass,
            format!(
                "decomposition {decomp:.2e}, uniform logits |L - S ln C| {uniform:.2e}, lambda isolation {}, \
                 theta accumulation {theta:.2e}, finite differences rel {fd:.2e} over 25 seeds (<= {params} params)",
                if isolated { "exact" } else { "BROKEN" }
            ),
        )
    })
}

pub fn schedule_protocol_suite() -> Check {
    timed("schedule/protocol", || {
        let mut notes = Vec::new();
        let cfg = TrainConfig::resnet();
        let mut oracle = cfg.base_lr;
        for e in 0..30 {
            if e > 0 && e % 10 == 0 {
                oracle *= 0.2;
            }
            let lr = lr_at(e, &cfg);
            let expected = cfg.base_lr * 0.2f64.powi((e / 10) as i32);
            if lr != expected || (lr - oracle).abs() > 1e-15 {
                notes.push(format!("lr_at({e}) = {lr}, expected {expected}"));
            }
        }

        let sizes = [1670usize, 2048, 2344];
        let mut next = 0;
        let domains: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&n| {
                let d: Vec<usize> = (next..next + n).collect();
                next += n;
                d
            })
            .collect();
        let mut sampler = DomainBatchSampler::new(&domains, 32, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected_len = (2344 + 31) / 32;
        if sampler.epoch_length() != expected_len || epoch_length(2344, 32) != expected_len {
            notes.push(format!("epoch length {} != {expected_len}", sampler.epoch_length()));
        }
        for _ in 0..sampler.epoch_length() {
            let batch = sampler.next_batch();
            let single_domain = batch
                .groups
                .iter()
                .zip(&domains)
                .all(|(g, d)| g.len() == 32 && g.iter().all(|i| d.contains(i)));
            if batch.total() != 96 || !single_domain {
                notes.push("batch composition broken".into());
                break;
            }
        }

        let split = split_train_val(&domains, 0.1, 7).unwrap();
        for (k, &n) in sizes.iter().enumerate() {
            let val = (n as f64 * 0.1).round() as usize;
            let (t, v) = (&split.train[k], &split.val[k]);
            let mut all: Vec<usize> = t.iter().chain(v).copied().collect();
            all.sort_unstable();
            if v.len() != val || t.len() != n - val || all != domains[k] {
                notes.push(format!("split of domain {k}: {} / {}", t.len(), v.len()));
            }
        }
        let pass = notes.is_empty();
        let detail = if pass {
            format!(
                "lr exact on [0, 30); 96-sample batches of 3x32; epoch length {expected_len} = ceil(2344/32); \
                 90/10 split exact on {sizes:?}"
            )
        } else {
            notes.join("; ")
        };
        (pass, detail)
    })
}

/// 1x1 convolution over collapsed maps against a plain matrix product.
pub fn fc_collapse_suite(instances: u64) -> Check {
    timed("FC-collapse equivalence", || {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let (n, cin, cout) = (rng.random_range(1..6), rng.random_range(1..40), rng.random_range(1..40));
            let x = gaussian(&[n, cin], derive_seed(k, 1));
            let w = gaussian(&[cout, cin], derive_seed(k, 2));
            let b = gaussian(&[cout], derive_seed(k, 3));
            let map = collapse_fc_output(&x).unwrap();
            let conv = ops::conv2d_bias(map.tensor(), &w.reshape((cout, cin, 1, 1)).unwrap(), &b, 0, 1).unwrap();
            let (xv, wv, bv) = (values(&x), values(&w), values(&b));
            let mut oracle = vec![0.0; n * cout];
            for r in 0..n {
                for o in 0..cout {
                    oracle[r * cout + o] = bv[o] + (0..cin).map(|c| wv[o * cin + c] * xv[r * cin + c]).sum::<f64>();
                }
            }
            worst = worst.max(max_abs_diff(&values(&conv), &oracle));
        }
        (worst <= 1e-6, format!("{instances} random instances, max |diff| {worst:.2e} <= 1e-6"))
    })
}

fn gaussian_features(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    values(&gaussian(&[n, dim], seed)).into_iter().map(|v| v as f32).collect()
}

/// Unit norms and block dimensions of a feature dump, plus the probe on
/// separable and label-shuffled data.
pub fn feature_contract_suite() -> Check {
    timed("feature contract", || {
        let mut notes = Vec::new();
        let spec = SyntheticDomainSpec::new(4, CLASSES, 4, TOY_SIZE, 3);
        let (dataset, _) = generate_synthetic(&spec).unwrap();
        let net = toy_net(NetworkKind::Dsam, 5, true);
        let all: Vec<usize> = (0..dataset.samples.len()).collect();
        let table = extract_features(&net, &dataset, &all).unwrap();
        let mut worst = 0.0f64;
        for (name, dim, data) in &table.blocks {
            for (r, row) in data.chunks(*dim).enumerate() {
                if table.zero_rows.contains(&r) {
                    continue;
                }
                let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
                if !norm.is_finite() {
                    notes.push(format!("non-finite norm in {name}"));
                }
            }
        }
        if worst > 1e-6 {
            notes.push(format!("norm error {worst:.2e}"));
        }
        let model = net.as_dsam().unwrap();
        let module_dim = model.module_spec().feature_dim();
        let codes: Vec<u32> = (0..4).collect();
        let lambda = table.feature_set(FeatureSource::Lambda, &codes).unwrap();
        let theta = table.feature_set(FeatureSource::Theta, &codes).unwrap();
        let both = table.feature_set(FeatureSource::ThetaLambda, &codes).unwrap();
        if lambda.dim != SOURCES * module_dim || both.dim != theta.dim + lambda.dim {
            notes.push(format!("lambda dim {} for {SOURCES} x {module_dim}", lambda.dim));
        }

        // separable: class-dependent offsets far larger than the noise
        let make = |n: usize, seed: u64| {
            let mut x = gaussian_features(n, 16, seed);
            let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
            for (r, &y) in labels.iter().enumerate() {
                x[r * 16 + y] += 20.0;
            }
            FeatureSet::new(16, x, labels).unwrap()
        };
        let separable = linear_probe(&make(210, 1), &make(140, 2), 1.0, 0).unwrap();
        if separable != 100.0 {
            notes.push(format!("separable probe {separable:.2}"));
        }

        // label-shuffled: structure in x, labels independent of it
        let n = 700;
        let shuffled = |seed: u64| {
            let clean = make(n, seed);
            let mut labels = clean.labels.clone();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            FeatureSet::new(16, clean.vectors, labels).unwrap()
        };
        let chance = linear_probe(&shuffled(3), &shuffled(4), 1.0, 0).unwrap();
        let p = 1.0 / CLASSES as f64;
        let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt() * 100.0;
        if (chance - 100.0 * p).abs() > band {
            notes.push(format!("shuffled probe {chance:.2} outside {:.2} +/- {band:.2}", 100.0 * p));
        }
        let pass = notes.is_empty();
        let detail = if pass {
            format!(
                "norm error {worst:.2e}; lambda dim {} = {SOURCES} x {module_dim}; separable probe 100%; \
                 shuffled probe {chance:.2}% within {:.2} +/- {band:.2}",
                lambda.dim,
                100.0 * p
            )
        } else {
            notes.join("; ")
        };
        (pass, detail)
    })
}
