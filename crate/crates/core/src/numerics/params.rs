//! Partitioned parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] and belongs to exactly one
//! [`Partition`]: the base network (Φ) or the meta head (Θ). Optimizer steps can
//! be restricted to a partition, which is how the leader-follower schedule
//! freezes one side while updating the other.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Base,
    Meta,
}

impl Partition {
    pub fn code(self) -> u8 {
        match self {
            Partition::Base => 0,
            Partition::Meta => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Partition::Base),
            1 => Some(Partition::Meta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    partition: Partition,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, partition: Partition, value: Tensor<T>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            id,
            name: name.to_string(),
            partition,
            value,
            grad,
        });
        Ok(id)
    }

    /// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Partition::Base, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Partition::Base, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().find(|p| p.name == name).map(|p| p.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|p| p.id)
    }

    pub fn ids_in(&self, partition: Partition) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .map(|p| p.id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries, optionally restricted to a partition.
    pub fn count_scalars(&self, partition: Option<Partition>) -> usize {
        self.params
            .iter()
            .filter(|p| partition.is_none_or(|q| p.partition == q))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.params[id.0].grad.add_assign(grad);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Replaces every value with a converted copy from another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    id: p.id,
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Copies values (not grads) from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add_zeros("w", &[2]).unwrap();
        assert!(s.add_zeros("w", &[2]).is_err());
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f64>::new();
        let id = a.add_uniform("w", &[16, 4], 16, &mut rng).unwrap();
        assert!(a.value(id).data().iter().all(|v| v.abs() <= 0.25));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamStore::<f64>::new();
        b.add_uniform("w", &[16, 4], 16, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_counts() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("w", &[3, 2]).unwrap();
        s.add("eta", Partition::Meta, Tensor::filled(&[3, 6], 1.0)).unwrap();
        assert_eq!(s.count_scalars(Some(Partition::Base)), 6);
        assert_eq!(s.count_scalars(Some(Partition::Meta)), 18);
        assert_eq!(s.count_scalars(None), 24);
    }
}
