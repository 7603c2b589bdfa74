//! Finite-difference checks for every differentiable operation and for the
//! full enhancer → embedder → combined-loss chain.

use nvl_core::dsp::{graph as dg, ChannelStats, SigmaExponent, N_MELS};
use nvl_core::losses;
use nvl_core::models::{Embedder, EmbedderConfig, Enhancer, EnhancerConfig, Params, Pipeline, TapSet};
use nvl_core::seed;
use nvl_core::tensor::{Axes, Tensor, UnaryOp, Var};
use rand::Rng;

use super::{fd_check, fd_check_params, random_tensor};

pub type Check = (String, f64);

fn tiny_embedder_config() -> EmbedderConfig {
    EmbedderConfig {
        contexts: vec![vec![-1, 0, 1], vec![-1, 0, 1], vec![0], vec![0], vec![0]],
        channels: vec![5, 5, 4, 4, 6],
        embedding_dim: 5,
        fc2_dim: 4,
    }
}

fn random_stats(rng: &mut impl Rng) -> ChannelStats {
    ChannelStats::new(
        (0..N_MELS).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        (0..N_MELS).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .unwrap()
}

pub fn tensor_ops(seed_: u64) -> Vec<Check> {
    let mut rng = seed::rng(seed_, &[1]);
    let mut out = Vec::new();
    let r = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    let any = |rng: &mut _| random_tensor(&[r, c], rng, -2.0, 2.0);
    let pos = |rng: &mut _| random_tensor(&[r, c], rng, 0.5, 2.0);

    for (name, op, positive) in [
        ("sigmoid", UnaryOp::Sigmoid, false),
        ("tanh", UnaryOp::Tanh, false),
        ("relu", UnaryOp::Relu, false),
        ("log", UnaryOp::Log, true),
        ("exp", UnaryOp::Exp, false),
        ("square", UnaryOp::Square, false),
        ("sqrt", UnaryOp::Sqrt, true),
        ("neg", UnaryOp::Neg, false),
    ] {
        let x = if positive { pos(&mut rng) } else { any(&mut rng) };
        out.push((name.to_string(), fd_check(&[x], |_, v| v[0].unary(op))));
    }
    let x = any(&mut rng);
    out.push(("affine".into(), fd_check(&[x], |_, v| v[0].affine(-1.5, 0.25))));

    let (a, b) = (any(&mut rng), any(&mut rng));
    out.push(("add".into(), fd_check(&[a.clone(), b.clone()], |_, v| v[0].add(&v[1]))));
    out.push(("sub".into(), fd_check(&[a.clone(), b.clone()], |_, v| v[0].sub(&v[1]))));
    out.push(("mul".into(), fd_check(&[a.clone(), b], |_, v| v[0].mul(&v[1]))));
    let d = pos(&mut rng);
    out.push(("div".into(), fd_check(&[a.clone(), d], |_, v| v[0].div(&v[1]))));
    let s = Tensor::scalar(rng.gen_range(0.5..2.0));
    out.push((
        "scalar broadcast".into(),
        fd_check(&[a.clone(), s], |_, v| v[0].mul(&v[1])?.div(&v[1].add(&v[0].sum(&Axes::All)?.square()?)?)),
    ));

    let k = rng.gen_range(2..5);
    let m = random_tensor(&[c, k], &mut rng, -1.0, 1.0);
    out.push(("matmul".into(), fd_check(&[a.clone(), m], |_, v| v[0].matmul(&v[1]))));

    for (name, axes) in [("axis 0", Axes::along(0)), ("axis 1", Axes::along(1)), ("all", Axes::All)] {
        out.push((format!("sum {name}"), fd_check(&[a.clone()], |_, v| v[0].sum(&axes))));
        out.push((format!("mean {name}"), fd_check(&[a.clone()], |_, v| v[0].mean(&axes))));
        out.push((format!("l2norm {name}"), fd_check(&[a.clone()], |_, v| v[0].l2norm(&axes))));
    }
    out.push(("reshape".into(), fd_check(&[a.clone()], |_, v| v[0].reshape(&[c, r])?.square())));
    out.push(("transpose".into(), fd_check(&[a.clone()], |_, v| v[0].transpose()?.exp())));
    out.push(("slice_rows".into(), fd_check(&[a.clone()], |_, v| v[0].slice_rows(1, r)?.tanh())));
    out.push(("slice_cols".into(), fd_check(&[a.clone()], |_, v| v[0].slice_cols(0, c - 1)?.tanh())));
    let b = any(&mut rng);
    out.push((
        "concat_rows".into(),
        fd_check(&[a.clone(), b.clone()], |_, v| Var::concat_rows(&[v[0], v[1].square()?, v[0]])),
    ));
    out.push((
        "concat_cols".into(),
        fd_check(&[a, b], |_, v| Var::concat_cols(&[v[1], v[0].sigmoid()?])),
    ));
    out
}

pub fn dsp_ops(seed_: u64) -> Vec<Check> {
    let mut rng = seed::rng(seed_, &[2]);
    let stats = random_stats(&mut rng);
    let t = rng.gen_range(3..9);
    let x = random_tensor(&[t, N_MELS], &mut rng, -4.0, 4.0);
    let mask = random_tensor(&[t, N_MELS], &mut rng, 0.05, 0.95);
    let mut out = Vec::new();
    for p in [SigmaExponent::One, SigmaExponent::Two] {
        let tag = p.power();
        out.push((
            format!("channel_normalize σ^{tag}"),
            fd_check(&[x.clone()], |_, v| dg::channel_normalize(v[0], &stats, p)?.square()),
        ));
        out.push((
            format!("channel_inverse σ^{tag}"),
            fd_check(&[x.clone()], |_, v| dg::channel_inverse(v[0], &stats, p)?.square()),
        ));
        out.push((
            format!("instance_normalize σ^{tag}"),
            fd_check(&[x.clone()], |_, v| dg::instance_normalize(v[0], p)?.tanh()),
        ));
    }
    out.push((
        "apply_mask".into(),
        fd_check(&[x, mask], |_, v| dg::apply_mask(v[0], v[1])),
    ));
    out
}

fn tapset<'g>(vars: &[Var<'g>]) -> TapSet<'g> {
    TapSet::new(vars.to_vec()).unwrap()
}

pub fn loss_ops(seed_: u64) -> Vec<Check> {
    let mut rng = seed::rng(seed_, &[3]);
    let mut out = Vec::new();
    let logits = random_tensor(&[1, 7], &mut rng, -3.0, 3.0);
    let label = rng.gen_range(0..7);
    out.push((
        "cross_entropy".into(),
        fd_check(&[logits], |_, v| losses::cross_entropy(v[0], label)),
    ));
    let shapes = [[6, 5], [4, 5], [2, 4], [2, 4], [2, 6], [1, 5]];
    let a: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng, -1.0, 1.0)).collect();
    let b: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng, -1.0, 1.0)).collect();
    let both: Vec<Tensor> = a.iter().chain(&b).cloned().collect();
    out.push((
        "perceptual (symmetric)".into(),
        fd_check(&both, |_, v| losses::perceptual_modified(&tapset(&v[..6]), &tapset(&v[6..]))),
    ));
    out.push((
        "perceptual (detached reference)".into(),
        fd_check(&a, |g, v| {
            let reference: Vec<Var<'_>> = b.iter().map(|t| g.leaf(t)).collect();
            losses::perceptual_original(&tapset(v), &tapset(&reference))
        }),
    ));
    let pc = vec![Tensor::scalar(rng.gen_range(0.0..5.0)), Tensor::scalar(rng.gen_range(0.0..5.0))];
    let lambda = rng.gen_range(0.0..1.0);
    out.push((
        "combined".into(),
        fd_check(&pc, |_, v| losses::combined(v[0].square()?, v[1].exp()?, lambda)),
    ));
    let s = random_tensor(&[4, N_MELS], &mut rng, -1.0, 1.0);
    let s2 = random_tensor(&[4, N_MELS], &mut rng, -1.0, 1.0);
    out.push((
        "euclidean".into(),
        fd_check(&[s, s2], |_, v| losses::euclidean_baseline(v[0], v[1])),
    ));
    out
}

/// Adds seeded noise to every parameter. Zero-initialized biases behind
/// all-zero ReLU rows would otherwise put pre-activations exactly on the
/// kink, where one-sided slopes differ.
fn jitter(params: &mut Params, rng: &mut impl Rng) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
}

pub fn models(seed_: u64) -> Vec<Check> {
    let mut rng = seed::rng(seed_, &[4]);
    let mut out = Vec::new();

    let mut enh = Enhancer::new(EnhancerConfig { layers: 2, hidden: 3 }, seed_).unwrap();
    jitter(enh.params_mut(), &mut rng);
    let x6 = random_tensor(&[6, N_MELS], &mut rng, -2.0, 2.0);
    out.push((
        "enhancer sum(mask), 6 frames".into(),
        fd_check_params(&[enh.params().clone()], 6, |g, b| {
            // Centering keeps the value near zero, so rounding in the
            // difference quotient stays far below the gradient scale.
            enh.forward(&b[0], g.leaf(&x6))?.affine(1.0, -0.5)?.sum(&Axes::All)
        }),
    ));

    let mut emb = Embedder::new(tiny_embedder_config(), 3, seed_).unwrap();
    jitter(emb.params_mut(), &mut rng);
    let x10 = random_tensor(&[10, N_MELS], &mut rng, -2.0, 2.0);
    let label = rng.gen_range(0..3);
    out.push((
        "embedder CE, 10 frames".into(),
        fd_check_params(&[emb.params().clone()], 6, |g, b| {
            let o = emb.forward(&b[0], g.leaf(&x10))?;
            losses::cross_entropy(o.logits, label)
        }),
    ));

    let noisy_stats = random_stats(&mut rng);
    let clean_stats = random_stats(&mut rng);
    let xn = random_tensor(&[12, N_MELS], &mut rng, -4.0, 4.0);
    let xc = random_tensor(&[12, N_MELS], &mut rng, -4.0, 4.0);
    let lambda = 0.5;
    for p in [SigmaExponent::One, SigmaExponent::Two] {
        out.push((
            format!("composite σ^{}, 12 frames", p.power()),
            fd_check_params(&[enh.params().clone(), emb.params().clone()], 4, |g, b| {
                let pipe = Pipeline {
                    enhancer: Some(&enh),
                    embedder: &emb,
                    noisy_stats: &noisy_stats,
                    clean_stats: &clean_stats,
                    sigma: p,
                };
                let on = pipe.forward(Some(&b[0]), &b[1], g.leaf(&xn))?;
                let oc = pipe.forward(Some(&b[0]), &b[1], g.leaf(&xc))?;
                let pcptl = losses::perceptual_modified(&on.embed.taps, &oc.embed.taps)?;
                let ce = losses::cross_entropy(on.embed.logits, label)?
                    .add(&losses::cross_entropy(oc.embed.logits, label)?)?
                    .scale(0.5)?;
                losses::combined(pcptl, ce, lambda)
            }),
        ));
    }
    out
}

/// Every check, in a fixed order.
pub fn all(seed_: u64) -> Vec<Check> {
    let mut v = tensor_ops(seed_);
    v.extend(dsp_ops(seed_));
    v.extend(loss_ops(seed_));
    v.extend(models(seed_));
    v
}
