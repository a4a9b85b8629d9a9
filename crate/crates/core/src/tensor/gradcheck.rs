//! Finite-difference gradient verification (f64 only).
//!
//! `grad_check` compares reverse-mode gradients against central differences
//! for every element of every trainable parameter. Model code passes a
//! closure that rebuilds its forward pass from a registry, so the same
//! closure serves both the autodiff route and the perturbed re-evaluations.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{Graph, ParamRegistry, Tensor, Var};

/// Builds the scalar loss from the current registry contents.
pub trait LossBuilder {
    fn build(&mut self, g: &mut Graph<f64>, reg: &ParamRegistry<f64>) -> Result<Var>;
}

impl<F> LossBuilder for F
where
    F: FnMut(&mut Graph<f64>, &ParamRegistry<f64>) -> Result<Var>,
{
    fn build(&mut self, g: &mut Graph<f64>, reg: &ParamRegistry<f64>) -> Result<Var> {
        self(g, reg)
    }
}

/// Per-parameter result of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of [`grad_check`]: pass iff every parameter is under `tol`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Reverse-mode gradients of the loss w.r.t. every trainable parameter.
pub fn autodiff_grads(
    reg: &ParamRegistry<f64>,
    builder: &mut impl LossBuilder,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut g = Graph::new();
    let root = builder.build(&mut g, reg)?;
    g.backward(root)?;
    let mut scratch = reg.clone();
    scratch.zero_grads();
    g.accumulate_param_grads(&mut scratch);
    Ok(scratch
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect())
}

fn eval_loss(reg: &ParamRegistry<f64>, builder: &mut impl LossBuilder) -> Result<f64> {
    let mut g = Graph::new();
    let root = builder.build(&mut g, reg)?;
    Ok(g.value(root).item())
}

/// Central-difference gradients, perturbing one element at a time.
pub fn finite_diff_grads(
    reg: &mut ParamRegistry<f64>,
    h: f64,
    builder: &mut impl LossBuilder,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    let names: Vec<String> = reg.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let numel = reg.get(&name).unwrap().value.numel();
        let mut grad = Tensor::zeros(reg.get(&name).unwrap().value.shape().to_vec());
        for i in 0..numel {
            let orig = reg.get(&name).unwrap().value.data()[i];
            reg.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let plus = eval_loss(reg, builder)?;
            reg.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let minus = eval_loss(reg, builder)?;
            reg.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Relative error with an absolute floor so near-zero pairs don't explode.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Compare autodiff against central differences for every trainable
/// parameter of `reg`.
pub fn grad_check(
    reg: &mut ParamRegistry<f64>,
    h: f64,
    tol: f64,
    builder: &mut impl LossBuilder,
) -> Result<GradCheckReport> {
    let ad = autodiff_grads(reg, builder)?;
    let fd = finite_diff_grads(reg, h, builder)?;
    let mut per_param = Vec::new();
    for (name, a) in &ad {
        let f = &fd[name];
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel_err(a, f),
        });
    }
    let pass = per_param.iter().all(|p| p.max_rel_err < tol);
    Ok(GradCheckReport { per_param, tol, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::Reduction;
    use crate::util::rng_for;
    use rand::Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn two_layer_gelu_chain_matches_finite_differences() {
        let mut rng = rng_for(5, "gradcheck-chain", 0);
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("w1", random_tensor(vec![6, 5], &mut rng), true).unwrap();
        reg.insert("w2", random_tensor(vec![5, 3], &mut rng), true).unwrap();
        let x = random_tensor(vec![2, 6], &mut rng);

        let mut builder = move |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| {
            let w1 = g.param(reg, "w1")?;
            let w2 = g.param(reg, "w2")?;
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, w1)?;
            let h = g.gelu(h);
            let y = g.matmul(h, w2)?;
            Ok(g.mean(y))
        };
        let report = grad_check(&mut reg, 1e-5, 1e-4, &mut builder).unwrap();
        assert!(report.pass, "worst rel err {}", report.worst());
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = rng_for(6, "gradcheck-ln", 0);
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("x", random_tensor(vec![2, 8], &mut rng), true).unwrap();
        reg.insert("gamma", random_tensor(vec![8], &mut rng), true).unwrap();
        reg.insert("beta", random_tensor(vec![8], &mut rng), true).unwrap();
        let mix = random_tensor(vec![2, 8], &mut rng);

        let mut builder = move |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| {
            let x = g.param(reg, "x")?;
            let gamma = g.param(reg, "gamma")?;
            let beta = g.param(reg, "beta")?;
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            // mix with constants so the gradient is not uniform
            let m = g.constant(mix.clone());
            let y = g.mul(y, m)?;
            Ok(g.sum(y))
        };
        let report = grad_check(&mut reg, 1e-5, 1e-4, &mut builder).unwrap();
        assert!(report.pass, "worst rel err {}", report.worst());
    }

    #[test]
    fn embedding_mean_passes_tight_tolerance() {
        let mut rng = rng_for(7, "gradcheck-embed", 0);
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("table", random_tensor(vec![5, 4], &mut rng), true).unwrap();
        let mut builder = |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| {
            let t = g.param(reg, "table")?;
            let e = g.embedding(t, &[0, 3, 3, 1])?;
            Ok(g.mean(e))
        };
        let report = grad_check(&mut reg, 1e-5, 1e-5, &mut builder).unwrap();
        assert!(report.pass, "worst rel err {}", report.worst());
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let mut rng = rng_for(8, "gradcheck-corrupt", 0);
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("w", random_tensor(vec![3, 3], &mut rng), true).unwrap();
        let x = random_tensor(vec![2, 3], &mut rng);
        let mut builder = move |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| {
            let w = g.param(reg, "w")?;
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, w)?;
            Ok(g.sum(y))
        };
        let ad = autodiff_grads(&reg, &mut builder).unwrap();
        let fd = finite_diff_grads(&mut reg, 1e-5, &mut builder).unwrap();
        // deliberately scale the autodiff gradient by 2
        for (name, a) in ad {
            let mut bad = a.clone();
            for v in bad.data_mut() {
                *v *= 2.0;
            }
            assert!(max_rel_err(&bad, &fd[&name]) > 1e-4);
        }
    }

    #[test]
    fn every_op_matches_finite_differences_across_seeds() {
        // shapes are randomized per seed; each closure exercises one op
        for seed in 0..20u64 {
            let mut rng = rng_for(seed, "gradcheck-ops", 0);
            let n = rng.random_range(2..5);
            let d = 2 * rng.random_range(2..5);
            let mut reg: ParamRegistry<f64> = ParamRegistry::new();
            reg.insert("a", random_tensor(vec![n, d], &mut rng), true).unwrap();
            reg.insert("b", random_tensor(vec![d, n], &mut rng), true).unwrap();
            reg.insert("v", random_tensor(vec![d], &mut rng), true).unwrap();
            reg.insert("nt", random_tensor(vec![n, d], &mut rng), true).unwrap();
            let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();

            let t = targets.clone();
            let mut builder = move |g: &mut Graph<f64>, reg: &ParamRegistry<f64>| {
                let a = g.param(reg, "a")?;
                let b = g.param(reg, "b")?;
                let v = g.param(reg, "v")?;
                let nt = g.param(reg, "nt")?;
                let prod = g.matmul(a, b)?; // n×n
                let sm = g.softmax_rows(prod)?;
                let scores = g.matmul_nt(a, nt)?; // n×n
                let mixed = g.add(sm, scores)?;
                let biased = g.add_bias(a, v)?; // n×d
                let act = g.gelu(biased);
                let left = g.slice_cols(act, 0, d / 2)?;
                let right = g.slice_cols(act, d / 2, d)?;
                let cat = g.concat_cols(&[right, left])?;
                let sel = g.select_rows(cat, &[0, n - 1])?;
                let part = g.mean(sel);
                let ce = g.cross_entropy(mixed, &t, u32::MAX, Reduction::Mean)?;
                let sc = g.scale(part, 0.5);
                g.add(ce, sc)
            };
            let report = grad_check(&mut reg, 1e-5, 1e-4, &mut builder).unwrap();
            assert!(report.pass, "seed {seed}: worst rel err {}", report.worst());
        }
    }
}
