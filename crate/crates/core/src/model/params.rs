use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::ParamId;
use crate::tensor::{Real, Tensor};

/// Named learnable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Learnable scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Learnable scalars in every tensor whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Replace every tensor from a name-keyed source, checking shapes.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Weight initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±1/√fan_in (the usual default for conv/linear layers).
    FanIn(usize),
    /// Normal with the given std, truncated at ±2 std.
    TruncNormal(f64),
}

impl Init {
    pub fn tensor<T: Real>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            }
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break T::from_f64_lossy(v);
                    }
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_by_prefix() {
        let mut s = ParamStore::<f32>::default();
        s.add("a.weight", Tensor::zeros(&[3, 4]));
        s.add("a.bias", Tensor::zeros(&[4]));
        s.add("b.weight", Tensor::zeros(&[2]));
        assert_eq!(s.count(), 18);
        assert_eq!(s.count_prefix("a."), 16);
        assert_eq!(s.find("b.weight"), Some(ParamId(2)));
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = Init::TruncNormal(0.02).tensor(&[1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn load_checks_shapes() {
        let mut s = ParamStore::<f32>::default();
        s.add("w", Tensor::zeros(&[2, 2]));
        assert!(s.load_from(|_| Some(Tensor::zeros(&[4]))).is_err());
        assert!(s.load_from(|_| None).is_err());
        s.load_from(|_| Some(Tensor::full(&[2, 2], 1.0))).unwrap();
        assert_eq!(s.get(ParamId(0)).sum(), 4.0);
    }
}
