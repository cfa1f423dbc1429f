#![allow(dead_code)]

use critembed::embedding::{sample_compatible, EmbeddingSpec, EmbeddingStep, IndexMapping};
use critembed::landscape::{levenberg_marquardt, newton_polish};
use critembed::network::{Activation, Dataset, EmpiricalRisk, Mse, NetShape, ParamTuple};
use critembed::numerics::seeded_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn shape(w: &[usize]) -> NetShape {
    NetShape::new(w.to_vec()).unwrap()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_dataset(shape: &NetShape, n: usize, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed);
    let inputs = (0..n)
        .map(|_| (0..shape.input_dim()).map(|_| normal(&mut rng)).collect())
        .collect();
    let targets = (0..n)
        .map(|_| (0..shape.output_dim()).map(|_| normal(&mut rng)).collect())
        .collect();
    Dataset::new(inputs, targets).unwrap()
}

/// Index mapping from `narrow` that adds `added[l]` neurons to hidden layer
/// `l`; each added neuron is null with probability `null_rate`, otherwise a
/// copy of a random narrow neuron. Neurons are shuffled within the layer.
pub fn random_map(
    narrow: &NetShape,
    added: &[usize],
    null_rate: f64,
    rng: &mut ChaCha8Rng,
) -> IndexMapping {
    let depth = narrow.depth();
    let mut maps = vec![(1..=narrow.input_dim()).collect::<Vec<_>>()];
    for l in 1..depth {
        let m = narrow.width(l);
        let mut layer: Vec<usize> = (1..=m).collect();
        for _ in 0..added[l - 1] {
            let t = if rng.random::<f64>() < null_rate {
                0
            } else {
                rng.random_range(1..=m)
            };
            layer.push(t);
        }
        for i in (1..layer.len()).rev() {
            let j = rng.random_range(0..=i);
            layer.swap(i, j);
        }
        maps.push(layer);
    }
    maps.push((1..=narrow.output_dim()).collect());
    IndexMapping::new(maps).unwrap()
}

/// Random composition of `k` null/split steps.
pub fn random_steps(narrow: &NetShape, k: usize, rng: &mut ChaCha8Rng) -> Vec<EmbeddingStep> {
    let mut widths = narrow.widths().to_vec();
    let depth = narrow.depth();
    (0..k)
        .map(|_| {
            let l = rng.random_range(1..depth);
            let alpha = rng.random_range(-1.5..1.5);
            let step = if rng.random::<f64>() < 0.4 {
                EmbeddingStep::null(l, alpha)
            } else {
                EmbeddingStep::split(l, rng.random_range(1..=widths[l]), alpha)
            };
            widths[l] += 1;
            step
        })
        .collect()
}

/// One operator of each family for `narrow`: null, split, a 10-step
/// composition, a sampled general compatible embedding and the three-fold map.
pub fn families(
    narrow: &NetShape,
    sigma: Activation,
    seed: u64,
) -> Vec<(&'static str, EmbeddingSpec)> {
    let mut rng = seeded_rng(seed);
    let depth = narrow.depth();
    let l = rng.random_range(1..depth);
    let null = EmbeddingSpec::Steps {
        steps: vec![EmbeddingStep::null(l, rng.random_range(-2.0..2.0))],
    };
    let l = rng.random_range(1..depth);
    let s = rng.random_range(1..=narrow.width(l));
    let split = EmbeddingSpec::Steps {
        steps: vec![EmbeddingStep::split(l, s, rng.random_range(-1.5..1.5))],
    };
    let steps = EmbeddingSpec::Steps {
        steps: random_steps(narrow, 10, &mut rng),
    };
    let added: Vec<usize> = (1..depth).map(|_| rng.random_range(1..=3)).collect();
    let map = random_map(narrow, &added, 0.3, &mut rng);
    let general =
        EmbeddingSpec::General(sample_compatible(&map, sigma, seed.wrapping_add(17)).unwrap());
    vec![
        ("null", null),
        ("split", split),
        ("10-step", steps),
        ("general", general),
        ("threefold", EmbeddingSpec::Threefold),
    ]
}

/// Levenberg–Marquardt then Newton polishing from seeded restarts until
/// `‖∇R‖_∞ ≤ tol`.
pub fn train_critical(shape: &NetShape, data: &Dataset, seed: u64, tol: f64) -> Option<ParamTuple> {
    let risk = EmpiricalRisk::new(Activation::Tanh, &Mse, data);
    for restart in 0..10 {
        let init = ParamTuple::random_normal(shape, 1.0, &mut seeded_rng(seed * 100 + restart));
        let Ok(res) = levenberg_marquardt(&risk, init, tol, 3000) else {
            continue;
        };
        let res = if res.converged {
            res
        } else {
            newton_polish(&risk, res.params, tol, 40).ok()?
        };
        if res.converged {
            return Some(res.params);
        }
    }
    None
}

/// The ten near-critical points shared by the criticality and inertia checks.
pub fn critical_points() -> Vec<(Dataset, ParamTuple)> {
    let cases: [(&[usize], usize); 10] = [
        (&[1, 2, 1], 12),
        (&[1, 3, 1], 16),
        (&[2, 2, 1], 14),
        (&[1, 2, 2, 1], 14),
        (&[2, 3, 2], 6),
        (&[1, 4, 1], 5),
        (&[1, 3, 3, 1], 8),
        (&[2, 4, 1], 25),
        (&[1, 5, 5, 1], 12),
        (&[1, 8, 8, 1], 20),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(k, (w, n))| {
            let s = shape(w);
            let data = random_dataset(&s, *n, 1000 + k as u64);
            let theta = train_critical(&s, &data, 2000 + k as u64, 1e-8)
                .unwrap_or_else(|| panic!("no critical point found for {s}"));
            (data, theta)
        })
        .collect()
}
