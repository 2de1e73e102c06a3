//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use pearl::data::{generate_synthetic_dataset, SyntheticConfig, SyntheticCorpus};
use std::collections::BTreeMap;

use pearl::nets::{Network, ParameterStore};
use pearl::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Coordinates whose analytic gradient is below this fraction of the largest one are not
/// sampled: their central differences are dominated by rounding.
const FD_MIN_FRACTION: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            checked: self.checked + other.checked,
            max_rel: self.max_rel.max(other.max_rel),
        }
    }

    pub fn passes(&self, min_coords: usize) -> bool {
        self.checked >= min_coords && self.max_rel < FD_TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Up to `n` indices drawn without replacement among entries with a non-negligible gradient.
pub fn pick_coords(grad: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let eligible: Vec<usize> = (0..grad.len())
        .filter(|&i| grad[i].abs() >= FD_MIN_FRACTION * max && grad[i] != 0.0)
        .collect();
    eligible.choose_multiple(rng, n).copied().collect()
}

/// Central differences of `f` at `x` on `coords`, compared to `grad`.
pub fn fd_vector(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) -> FdReport {
    let mut report = FdReport::default();
    for &i in coords {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += FD_STEP;
        b[i] -= FD_STEP;
        let numeric = (f(&a) - f(&b)) / (2.0 * FD_STEP);
        report.checked += 1;
        report.max_rel = report.max_rel.max(rel_error(grad[i], numeric));
    }
    report
}

/// `params` with every scalar shifted by U(-0.05, 0.05). Zero biases and bilinear
/// upsampling kernels put many rectifier inputs exactly on the kink at initialization,
/// where central differences are undefined.
pub fn generic_point(params: &ParameterStore, seed: u64) -> ParameterStore {
    let mut rng = rng(seed);
    let mut p = params.clone();
    for (_, v) in p.iter_mut() {
        v.data.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    }
    p
}

/// Gradient check of `sum_k <r_k, output_k>` for random `r_k`, over parameters and inputs,
/// at a jittered copy of `params`.
///
/// Every trainable parameter array contributes one coordinate and `extra` more are drawn
/// across all parameters; each input contributes up to `extra` coordinates.
pub fn fd_network(
    net: &Network,
    params: &ParameterStore,
    inputs: &[(&str, Tensor)],
    extra: usize,
    seed: u64,
) -> FdReport {
    let params = &generic_point(params, seed ^ 0x9e37);
    let mut rng = rng(seed);
    let refs: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
    let acts = net.forward(params, &refs).unwrap();
    let outputs = net.spec().outputs.clone();
    let weights: Vec<Tensor> = (0..outputs.len())
        .map(|k| random_tensor(net.output(&acts, k).shape(), -1.0, 1.0, &mut rng))
        .collect();
    let objective = |p: &ParameterStore, ins: &[(&str, &Tensor)]| -> f64 {
        let outs = net.predict(p, ins).unwrap();
        outs.iter()
            .zip(&weights)
            .map(|(o, r)| o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let seeds: Vec<(&str, Tensor)> = outputs.iter().map(|s| s.as_str()).zip(weights.iter().cloned()).collect();
    let input_names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
    let grads = net.backward(params, &acts, seeds, &input_names).unwrap();

    let objective_params = |p: &ParameterStore| objective(p, &refs);
    let mut report = fd_store(params, &grads.params, objective_params, extra, &mut rng);
    for (k, (name, value)) in inputs.iter().enumerate() {
        let g = grads.inputs[*name].data();
        let f = |x: &[f64]| {
            let t = Tensor::from_vec(value.shape(), x.to_vec()).unwrap();
            let mut ins = refs.clone();
            ins[k] = (name, &t);
            objective(params, &ins)
        };
        let coords = pick_coords(g, extra, &mut rng);
        report = report.merge(fd_vector(f, value.data(), g, &coords));
    }
    report
}

/// Rigid-motion synthetic corpus, 16x32, three classes.
pub fn small_corpus(num_clips: usize, frames: usize, seed: u64) -> SyntheticCorpus {
    let cfg = SyntheticConfig {
        num_clips,
        val_clips: 0,
        frames_per_clip: frames,
        height: 16,
        width: 32,
        num_classes: 3,
        shape_size_range: [5, 8],
        objects_per_clip: 2,
        distractors_per_clip: 1,
        annotated_frames: (0..frames).collect(),
        seed,
        ..Default::default()
    };
    generate_synthetic_dataset(&cfg).unwrap()
}

/// Gradient check of a scalar function of a parameter store. One coordinate per array with
/// a non-negligible gradient plus `extra` drawn across all arrays.
pub fn fd_store(
    params: &ParameterStore,
    grads: &BTreeMap<String, Vec<f64>>,
    f: impl Fn(&ParameterStore) -> f64,
    extra: usize,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    let all: Vec<f64> = grads.values().flat_map(|v| v.iter().copied()).collect();
    let global_max = all.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, g) in grads {
        if let Some(&i) = pick_coords(g, 1, rng).first() {
            if g[i].abs() >= FD_MIN_FRACTION * global_max {
                coords.push((name.clone(), i));
            }
        }
    }
    let flat: Vec<(&String, usize)> = grads
        .iter()
        .flat_map(|(n, g)| (0..g.len()).map(move |i| (n, i)))
        .collect();
    for k in pick_coords(&all, extra, rng) {
        coords.push((flat[k].0.clone(), flat[k].1));
    }
    let mut report = FdReport::default();
    let mut p = params.clone();
    for (name, i) in coords {
        let x = params.get(&name).unwrap().data[i];
        p.get_mut(&name).unwrap().data[i] = x + FD_STEP;
        let up = f(&p);
        p.get_mut(&name).unwrap().data[i] = x - FD_STEP;
        let down = f(&p);
        p.get_mut(&name).unwrap().data[i] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.checked += 1;
        report.max_rel = report.max_rel.max(rel_error(grads[&name][i], numeric));
    }
    report
}
