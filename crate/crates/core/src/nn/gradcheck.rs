//! Central-difference gradient checking for f64 graphs.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamStore;
use crate::error::Result;

/// Seeded Gaussian tensor, mostly for tests.
pub fn random_tensor(shape: &[usize], seed: u64, std: f64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(dtype))
        .expect("valid shape")
}

/// Compares backprop gradients of `sum(f(inputs) * P)` (fixed random `P`)
/// with central differences of step `h`. At most `per_input` coordinates of
/// each input are probed. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-3 * max|n|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, per_input: usize) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.to_dtype(DType::F64))
        .collect::<candle_core::Result<_>>()?;
    let vars: Vec<Var> = inputs
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<_>>()?;
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let out = f(&live)?;
    let proj = random_tensor(out.dims(), 0x9e37, 1.0, DType::F64);
    let objective = |xs: &[Tensor]| -> Result<f64> {
        Ok(f(xs)?.mul(&proj)?.sum_all()?.to_scalar::<f64>()?)
    };
    let grads = out.mul(&proj)?.sum_all()?.backward()?;

    let mut pairs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, x) in inputs.iter().enumerate() {
        let n = x.elem_count();
        let analytic = match grads.get(vars[i].as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = x.flatten_all()?.to_vec1::<f64>()?;
        let idx: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for j in idx {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut xs = inputs.clone();
                xs[i] = Tensor::from_vec(v, x.dims(), &Device::Cpu)?;
                objective(&xs)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            pairs.push((analytic[j], numeric));
        }
    }
    Ok(max_relative_error(&pairs))
}

/// Same comparison for the parameters of `store`: every parameter listed
/// in `names` (all when empty) has up to `per_param` coordinates probed by
/// perturbing it in place. `f` must read parameters through the store's
/// tensors.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    h: f64,
    per_param: usize,
) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let out = f()?;
    let proj = random_tensor(out.dims(), 0x9e37, 1.0, out.dtype());
    let grads = out.mul(&proj)?.sum_all()?.backward()?;
    let objective = || -> Result<f64> {
        Ok(f()?.mul(&proj)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let selected: Vec<String> = if names.is_empty() {
        store.iter().map(|(n, _)| n.clone()).collect()
    } else {
        names.to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = Vec::new();
    for name in &selected {
        let var = store
            .get(name)
            .ok_or_else(|| crate::Error::Config(format!("unknown parameter {name}")))?;
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let idx: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        let dims = var.dims().to_vec();
        let set = |v: Vec<f64>| -> Result<()> {
            let t = Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
            var.set(&t)?;
            Ok(())
        };
        for j in idx {
            let mut v = base.clone();
            v[j] += h;
            set(v.clone())?;
            let plus = objective()?;
            v[j] -= 2.0 * h;
            set(v)?;
            let minus = objective()?;
            pairs.push((analytic[j], (plus - minus) / (2.0 * h)));
        }
        set(base)?;
    }
    Ok(max_relative_error(&pairs))
}

fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    pairs.iter().fold(0.0f64, |m, &(a, n)| {
        m.max((a - n).abs() / a.abs().max(n.abs()).max(floor))
    })
}
