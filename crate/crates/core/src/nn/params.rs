use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian, `std = sqrt(2 / ((1 + slope^2) * fan_in))`.
    He { fan_in: usize },
    /// Zero-mean Gaussian with an explicit standard deviation.
    Normal(f64),
    Constant(f64),
}

/// Named trainable tensors of a network. Every parameter draws its initial
/// values from its own stream, seeded by the store seed and its name, so two
/// networks that share a parameter name start from the same values.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
    slope: f64,
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64, slope: f64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            seed,
            slope,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Constant(v) => vec![v; n],
            Init::He { fan_in } => {
                let std = (2.0 / ((1.0 + self.slope * self.slope) * fan_in as f64)).sqrt();
                self.gaussian(name, n, std)
            }
            Init::Normal(std) => self.gaussian(name, n, std),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn gaussian(&self, name: &str, n: usize, std: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter's values in place (shape must match).
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != values.dims() {
            return Err(Error::Shape(format!(
                "parameter {name} is {:?}, got {:?}",
                var.dims(),
                values.dims()
            )));
        }
        var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// `a.b` parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
