//! Finite-difference verification of the tape: every differentiable
//! operation on random inputs, plus the three training objectives of a tiny
//! 64-bit model with respect to their trainable parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::connector::DeepLensConfig;
use crate::error::Result;
use crate::lm::LmConfig;
use crate::model::{ModelBundle, ModelConfig};
use crate::numerics::{finite_diff_grad, NumericsError, Tape, Tensor, Var};
use crate::params::{normal, Bind, Grads, ParamId, ParamStore};
use crate::probes::ReconConfig;
use crate::train::{self, trainable_groups};
use crate::vision::{patchify, VisionConfig};

pub const EPSILON: f64 = 1e-5;
/// Norms below this are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

/// Outcome of one comparison.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over the compared coordinates.
pub fn vector_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}

type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, NumericsError>;

/// Compares tape gradients of a scalar function with central differences
/// for every coordinate of every input.
pub fn check_fn(name: &str, inputs: &[Tensor<f64>], f: &OpFn) -> std::result::Result<GradCase, NumericsError> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect::<std::result::Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        analytic.extend(tape.grad(vars[k]).map_or_else(|| vec![0.0; x.numel()], |g| g.into_data()));
        let g = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let o = f(&mut t, &vs)?;
                t.value(o).item()
            },
            x,
            EPSILON,
        )?;
        numeric.extend(g.into_data());
    }
    Ok(GradCase {
        name: name.to_string(),
        analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        rel_error: vector_rel_error(&analytic, &numeric),
    })
}

/// Reduces a tensor output to a scalar with fixed random weights, so every
/// output coordinate reaches the gradient.
fn weighted(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> std::result::Result<Var, NumericsError> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, 1.0, rng)
}

/// One randomized case for each differentiable tape operation.
pub fn op_round(rng: &mut ChaCha8Rng) -> std::result::Result<Vec<GradCase>, NumericsError> {
    let m = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let n = rng.gen_range(1..5);
    let heads = rng.gen_range(1..3);
    let dh = rng.gen_range(1..3);
    let d = heads * dh;
    let nq = rng.gen_range(1..4);
    let nk = nq + rng.gen_range(0..3);
    let mut cases = Vec::new();

    let (a, b, w) = (randn(vec![m, k], rng), randn(vec![k, n], rng), randn(vec![m, n], rng));
    cases.push(check_fn("matmul", &[a.clone(), b], &move |t, v| {
        let o = t.matmul(v[0], v[1])?;
        weighted(t, o, &w)
    })?);

    let (bt, w) = (randn(vec![n, k], rng), randn(vec![m, n], rng));
    cases.push(check_fn("matmul_nt", &[a.clone(), bt], &move |t, v| {
        let o = t.matmul_nt(v[0], v[1])?;
        weighted(t, o, &w)
    })?);

    let (a2, w) = (randn(vec![m, k], rng), randn(vec![m, k], rng));
    let wc = w.clone();
    cases.push(check_fn("add", &[a.clone(), a2.clone()], &move |t, v| {
        let o = t.add(v[0], v[1])?;
        weighted(t, o, &wc)
    })?);
    let wc = w.clone();
    cases.push(check_fn("mul", &[a.clone(), a2], &move |t, v| {
        let o = t.mul(v[0], v[1])?;
        weighted(t, o, &wc)
    })?);

    let bias = randn(vec![k], rng);
    let wc = w.clone();
    cases.push(check_fn("add_row", &[a.clone(), bias], &move |t, v| {
        let o = t.add_row(v[0], v[1])?;
        weighted(t, o, &wc)
    })?);

    let c = rng.gen_range(-2.0..2.0);
    let wc = w.clone();
    cases.push(check_fn("scale", &[a.clone()], &move |t, v| {
        let o = t.scale(v[0], c)?;
        weighted(t, o, &wc)
    })?);

    let wc = w.clone();
    cases.push(check_fn("gelu", &[a.map(|x| 2.0 * x)], &move |t, v| {
        let o = t.gelu(v[0])?;
        weighted(t, o, &wc)
    })?);

    let width = k + 1;
    let (x, g, be, w) = (randn(vec![m, width], rng), randn(vec![width], rng), randn(vec![width], rng), randn(vec![m, width], rng));
    let wc = w.clone();
    cases.push(check_fn("layer_norm", &[x.clone(), g, be], &move |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted(t, o, &wc)
    })?);

    let wc = w.clone();
    cases.push(check_fn("softmax", &[x.clone()], &move |t, v| {
        let o = t.softmax_lastdim(v[0])?;
        weighted(t, o, &wc)
    })?);

    for causal in [false, true] {
        let (q, kk, vv, w) = (randn(vec![nq, d], rng), randn(vec![nk, d], rng), randn(vec![nk, d], rng), randn(vec![nq, d], rng));
        let name = if causal { "attention_causal" } else { "attention" };
        cases.push(check_fn(name, &[q, kk, vv], &move |t, v| {
            let o = t.attention(v[0], v[1], v[2], heads, causal)?;
            weighted(t, o, &w)
        })?);
    }

    let vocab = k + 2;
    let logits = randn(vec![m, vocab], rng);
    let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..vocab)).collect();
    cases.push(check_fn("cross_entropy", &[logits], &move |t, v| t.cross_entropy(v[0], &targets))?);

    let table = randn(vec![vocab, n], rng);
    let ids: Vec<usize> = (0..m + 1).map(|_| rng.gen_range(0..vocab)).collect();
    let w = randn(vec![ids.len(), n], rng);
    cases.push(check_fn("gather", &[table], &move |t, v| {
        let o = t.gather(v[0], &ids)?;
        weighted(t, o, &w)
    })?);

    let (top, bottom, w) = (randn(vec![m, k], rng), randn(vec![n, k], rng), randn(vec![m + n, k], rng));
    cases.push(check_fn("concat_rows", &[top, bottom], &move |t, v| {
        let o = t.concat_rows(&[v[0], v[1]])?;
        weighted(t, o, &w)
    })?);

    let (left, right, w) = (randn(vec![m, k], rng), randn(vec![m, n], rng), randn(vec![m, k + n], rng));
    cases.push(check_fn("concat_cols", &[left, right], &move |t, v| {
        let o = t.concat_cols(&[v[0], v[1]])?;
        weighted(t, o, &w)
    })?);

    let rows = m + 2;
    let start = rng.gen_range(0..rows);
    let len = rng.gen_range(1..=rows - start);
    let (x, w) = (randn(vec![rows, k], rng), randn(vec![len, k], rng));
    cases.push(check_fn("slice_rows", &[x], &move |t, v| {
        let o = t.slice_rows(v[0], start, len)?;
        weighted(t, o, &w)
    })?);

    let target = randn(vec![m, k], rng);
    cases.push(check_fn("mse", &[a.clone()], &move |t, v| t.mse(v[0], &target))?);
    cases.push(check_fn("mean", &[a.clone()], &|t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    })?);

    let (wt, bias, w) = (randn(vec![k, n], rng), randn(vec![n], rng), randn(vec![m, n], rng));
    cases.push(check_fn("affine", &[a, wt, bias], &move |t, v| {
        let o = t.affine(v[0], v[1], v[2])?;
        weighted(t, o, &w)
    })?);

    Ok(cases)
}

/// A model small enough for per-coordinate finite differences.
pub fn tiny_config() -> ModelConfig {
    let vision = VisionConfig { image_size: 8, patch_size: 4, d_v: 8, layers: 4, heads: 2 };
    let deeplens = DeepLensConfig { t_max: 6, ..DeepLensConfig::default() };
    let lm = LmConfig { d_lm: 8, layers: 2, heads: 2, max_seq: 24, ..LmConfig::default() };
    ModelConfig { vision, lm, deeplens, recon: ReconConfig { d_dec: 8, blocks: 1, heads: 2 } }
}

fn random_caption(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(5..vocab)).collect()
}

/// Compares the gradient of `loss` with central differences on up to
/// `coords` sampled coordinates of every trainable parameter of `stage`.
fn check_params<F>(
    model: &ModelBundle<f64>,
    stage: u8,
    label: &str,
    coords: usize,
    rng: &mut ChaCha8Rng,
    loss: F,
) -> Result<Vec<GradCase>>
where
    F: Fn(&ModelBundle<f64>, &mut Tape<f64>, &Bind<'_, f64>) -> Result<Var>,
{
    let groups = trainable_groups(stage);
    let mut tape = Tape::new();
    let bind = Bind::new(&model.store, groups);
    let l = loss(model, &mut tape, &bind)?;
    tape.backward(l)?;
    let mut grads = Grads::new(model.store.len());
    grads.accumulate(&tape);
    let value_of = |store: &ParamStore<f64>| -> Result<f64> {
        let mut m = model.clone();
        m.store = store.clone();
        let mut t = Tape::new();
        let l = loss(&m, &mut t, &Bind::frozen(&m.store))?;
        Ok(t.value(l).item()?)
    };
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| groups.contains(p.group)).map(|(id, _)| id).collect();
    let mut cases = Vec::with_capacity(ids.len());
    let mut store = model.store.clone();
    for id in ids {
        let n = store.get(id).numel();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(coords);
        let zeros = vec![0.0; n];
        let g = grads.get(id).unwrap_or(&zeros);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + EPSILON;
            let plus = value_of(&store)?;
            store.get_mut(id).data_mut()[i] = orig - EPSILON;
            let minus = value_of(&store)?;
            store.get_mut(id).data_mut()[i] = orig;
            analytic.push(g[i]);
            numeric.push((plus - minus) / (2.0 * EPSILON));
        }
        cases.push(GradCase {
            name: format!("{label}:{}", model.store.param(id).name),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: vector_rel_error(&analytic, &numeric),
        });
    }
    Ok(cases)
}

/// Stage-0, stage-1 and stage-2 objectives of a freshly initialized tiny
/// model, one case per trainable parameter tensor.
pub fn model_losses(seed: u64, coords: usize) -> Result<Vec<GradCase>> {
    let cfg = tiny_config();
    let mut model = ModelBundle::<f64>::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Break the zero-initialized biases and unit gains so no gradient is
    // trivially symmetric.
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in model.store.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let v = &cfg.vision;
    let pixels: Vec<f32> = (0..v.image_size * v.image_size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let patches = patchify::<f64>(&pixels, v)?;
    let features = model.encode(&pixels, 0)?;
    let vocab = model.vocab.len();
    let caption = random_caption(&mut rng, vocab, 5);
    let pseudo = random_caption(&mut rng, vocab, 4);

    let mut cases = check_params(&model, 0, "stage0", coords, &mut rng, |m, t, b| train::recon_loss(m, t, b, &patches))?;
    cases.extend(check_params(&model, 1, "stage1", coords, &mut rng, |m, t, b| {
        train::glance_loss(m, t, b, &features, &caption)
    })?);
    cases.extend(check_params(&model, 2, "stage2", coords, &mut rng, |m, t, b| {
        train::refinement_loss(m, t, b, &features, &pseudo, &caption)
    })?);
    Ok(cases)
}

/// `rounds` randomized op rounds plus the model objectives.
pub fn full_suite(seed: u64, rounds: usize) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..rounds {
        cases.extend(op_round(&mut rng)?);
    }
    cases.extend(model_losses(seed, 4)?);
    Ok(cases)
}
