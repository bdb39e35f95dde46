//! Randomised inputs for finite-difference checks of every graph operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use step_core::autodiff::{AttentionLayout, AutodiffError, Graph, Tensor, Var};

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

pub fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

/// Reduces a tensor output to a scalar through fixed random weights so every
/// output coordinate contributes a distinct gradient.
pub fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var, AutodiffError> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn cases(seed: u64) -> Vec<(&'static str, Builder, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let mut out = Vec::<(&'static str, Builder, Vec<Tensor<f64>>)>::new();

    let w = random(&mut rng, &[m, n]);
    out.push((
        "matmul",
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])],
    ));

    let w = random(&mut rng, &[m, n]);
    out.push((
        "linear",
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1])?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[m, k]), random(&mut rng, &[n, k])],
    ));

    for name in ["add", "mul"] {
        let w = random(&mut rng, &[m, k]);
        out.push((
            name,
            Box::new(move |g, v| {
                let y = if name == "add" { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                project(g, y, &w)
            }),
            vec![random(&mut rng, &[m, k]), random(&mut rng, &[m, k])],
        ));
    }

    let w = random(&mut rng, &[m, k]);
    let factor = rng.random_range(-3.0..3.0);
    out.push((
        "scale",
        Box::new(move |g, v| {
            let y = g.scale(v[0], factor)?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[m, k])],
    ));

    for name in ["silu", "softmax"] {
        let w = random(&mut rng, &[m, k]);
        out.push((
            name,
            Box::new(move |g, v| {
                let y = if name == "silu" { g.silu(v[0])? } else { g.softmax(v[0])? };
                project(g, y, &w)
            }),
            vec![random(&mut rng, &[m, k])],
        ));
    }

    let w = random(&mut rng, &[m, k]);
    out.push((
        "rms_norm",
        Box::new(move |g, v| {
            let y = g.rms_norm(v[0], v[1])?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[m, k]), random(&mut rng, &[k])],
    ));

    let vocab = dim(&mut rng);
    let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
    let w = random(&mut rng, &[m, k]);
    out.push((
        "embedding",
        Box::new(move |g, v| {
            let y = g.embedding(v[0], &ids)?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[vocab, k])],
    ));

    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    out.push(("cross_entropy", Box::new(move |g, v| g.cross_entropy(v[0], &targets)), vec![random(&mut rng, &[m, k])]));

    out.push(("sum", Box::new(|g, v| g.sum(v[0])), vec![random(&mut rng, &[m, k])]));
    out.push(("mean", Box::new(|g, v| g.mean(v[0])), vec![random(&mut rng, &[m, k])]));

    let heads = rng.random_range(1..=2);
    let head_dim = 2 * rng.random_range(1..=2);
    let layout = AttentionLayout { batch: rng.random_range(1..=2), seq: rng.random_range(1..=4), heads };
    let rows = layout.batch * layout.seq;
    let d = heads * head_dim;
    let w = random(&mut rng, &[rows, d]);
    out.push((
        "rope",
        Box::new(move |g, v| {
            let y = g.rope(v[0], layout)?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[rows, d])],
    ));

    let w = random(&mut rng, &[rows, d]);
    out.push((
        "causal_attention",
        Box::new(move |g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], layout)?;
            project(g, y, &w)
        }),
        vec![random(&mut rng, &[rows, d]), random(&mut rng, &[rows, d]), random(&mut rng, &[rows, d])],
    ));

    out
}
