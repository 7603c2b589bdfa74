#![allow(dead_code)]

use nvl_core::models::{Bound, Params};
use nvl_core::tensor::{Axes, Graph, Tensor, Var};
use nvl_core::Result;
use rand::Rng;

pub mod grad_suite;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared on an absolute scale: the
/// difference quotient carries ~1e-10 of rounding noise at step 1e-5.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalarizes `out` as a fixed random projection so every output cell
/// contributes a distinct weight.
fn project<'g>(g: &'g Graph, out: Var<'g>) -> Result<Var<'g>> {
    if out.numel() == 1 {
        return out.sum(&Axes::All);
    }
    let mut rng = nvl_core::seed::rng(99, &[out.numel() as u64]);
    let w = random_tensor(&out.shape(), &mut rng, -1.0, 1.0);
    out.mul(&g.leaf(&w))?.sum(&Axes::All)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&g, &vars).unwrap();
    project(&g, out).unwrap().item().unwrap()
}

/// Largest relative error between backprop and central differences over
/// every element of every input.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&g, &vars).unwrap();
    let loss = project(&g, out).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (evaluate(&plus, &f) - evaluate(&minus, &f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i].data()[j], numeric));
        }
    }
    worst
}

/// Like [`fd_check`] but over model parameter sets: every tensor of every
/// set is probed at up to `per_tensor` seeded positions.
pub fn fd_check_params<F>(sets: &[Params], per_tensor: usize, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Bound<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let bound: Vec<Bound<'_>> = sets.iter().map(|p| p.bind(&g, true)).collect();
    let loss = f(&g, &bound).unwrap();
    assert_eq!(loss.numel(), 1);
    let loss = loss.sum(&Axes::All).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Vec<Vec<f64>>> = bound.iter().map(Bound::grads).collect();

    let eval = |sets: &[Params]| -> f64 {
        let g = Graph::new();
        let bound: Vec<Bound<'_>> = sets.iter().map(|p| p.bind(&g, false)).collect();
        f(&g, &bound).unwrap().data()[0]
    };
    let mut rng = nvl_core::seed::rng(7, &[per_tensor as u64]);
    let mut worst: f64 = 0.0;
    for (s, set) in sets.iter().enumerate() {
        for (k, (_, t)) in set.iter().enumerate() {
            let probes: Vec<usize> = if t.numel() <= per_tensor {
                (0..t.numel()).collect()
            } else {
                (0..per_tensor).map(|_| rng.gen_range(0..t.numel())).collect()
            };
            for j in probes {
                let bump = |delta: f64| {
                    let mut copy = sets.to_vec();
                    copy[s].iter_mut().nth(k).unwrap().1.data_mut()[j] += delta;
                    eval(&copy)
                };
                let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grads[s][k][j], numeric));
            }
        }
    }
    worst
}

/// `(P_miss, P_fa)` when accepting scores strictly above `t`, by counting.
fn rates(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
    let miss = targets.iter().filter(|&&s| s <= t).count();
    let fa = nontargets.iter().filter(|&&s| s > t).count();
    (miss as f64 / targets.len() as f64, fa as f64 / nontargets.len() as f64)
}

/// Every threshold worth trying, ascending: below all scores, then each
/// distinct score.
fn thresholds(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.insert(0, f64::NEG_INFINITY);
    t
}

/// O(n²) sweep: the miss/false-alarm curve crossing, linearly interpolated
/// between the two thresholds that bracket it.
pub fn brute_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let ts = thresholds(targets, nontargets);
    let mut prev = rates(targets, nontargets, ts[0]);
    for &t in &ts[1..] {
        let cur = rates(targets, nontargets, t);
        let d0 = prev.1 - prev.0;
        let d1 = cur.1 - cur.0;
        if d1 <= 0.0 {
            return prev.0 + d0 / (d0 - d1) * (cur.0 - prev.0);
        }
        prev = cur;
    }
    panic!("reject-all threshold must cross")
}

pub fn brute_min_dcf(targets: &[f64], nontargets: &[f64], p: f64) -> f64 {
    thresholds(targets, nontargets)
        .into_iter()
        .map(|t| {
            let (m, f) = rates(targets, nontargets, t);
            (p * m + (1.0 - p) * f) / p.min(1.0 - p)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Seconds-scale configuration shared by the end-to-end tests.
pub fn tiny_config() -> nvl_core::config::RunConfig {
    nvl_core::config::RunConfig::parse(include_str!("../fixtures/tiny.toml")).unwrap()
}

/// The training side of a generated corpus, featurized in memory.
pub fn train_data(cfg: &nvl_core::config::RunConfig) -> nvl_core::trainer::TrainData {
    let mut features = std::collections::HashMap::new();
    let manifest = nvl_core::corpus::build_corpus(&cfg.corpus, cfg.seed, |u| {
        if u.record.split.is_train() {
            features.insert(u.record.utt_id.clone(), nvl_core::dsp::logmel(&u.waveform)?);
        }
        Ok(())
    })
    .unwrap();
    nvl_core::trainer::TrainData::new(manifest, features).unwrap()
}
