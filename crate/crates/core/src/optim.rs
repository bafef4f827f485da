//! SGD with heavy-ball momentum.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// One heavy-ball step: `buffer <- momentum * buffer + grad`,
/// `param <- param - lr * buffer`.
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, buffer: &mut Tensor, momentum: f64, lr: f64) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != buffer.dims() {
        return Err(Error::shape(
            "sgd_update",
            format!("param {:?}, grad {:?}, buffer {:?}", param.dims(), grad.dims(), buffer.dims()),
        ));
    }
    for ((p, g), b) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(buffer.data_mut())
    {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

/// Momentum optimizer over a fixed parameter set.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    members: BTreeSet<ParamId>,
    buffers: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, members: impl IntoIterator<Item = ParamId>, momentum: f64) -> Self {
        let members: BTreeSet<ParamId> = members.into_iter().collect();
        let buffers = members
            .iter()
            .map(|&id| (id, Tensor::zeros(store.get(id).dims())))
            .collect();
        Self {
            momentum,
            members,
            buffers,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn members(&self) -> &BTreeSet<ParamId> {
        &self.members
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor> {
        self.buffers.get(&id)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.buffers.iter().map(|(&id, t)| (id, t))
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("{id:?} is not managed by this optimizer")))?;
        if slot.dims() != value.dims() {
            return Err(Error::shape("momentum buffer", format!("{:?} vs {:?}", slot.dims(), value.dims())));
        }
        *slot = value;
        Ok(())
    }

    /// Applies one step. Every gradient key must belong to this optimizer's
    /// parameter set; members without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<()> {
        if let Some(stray) = grads.keys().find(|id| !self.members.contains(id)) {
            return Err(Error::InvalidArgument(format!(
                "gradient for {} outside the optimizer's parameter set",
                store.name(*stray)
            )));
        }
        for (&id, grad) in grads {
            let buffer = self.buffers.get_mut(&id).expect("member has a buffer");
            sgd_update(store.get_mut(id), grad, buffer, self.momentum, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_zero_buffer_is_noop() {
        let mut p = scalar(0.7);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(0.0), &mut b, 0.99, 0.5).unwrap();
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn first_step() {
        let mut p = scalar(1.0);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.99, 0.01).unwrap();
        assert!((p.item() - 0.99).abs() < 1e-15);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn second_step_accumulates() {
        let mut p = scalar(1.0);
        let mut b = scalar(0.0);
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.99, 0.01).unwrap();
        let before = p.item();
        sgd_update(&mut p, &scalar(1.0), &mut b, 0.99, 0.01).unwrap();
        assert!(((before - p.item()) - 0.0199).abs() < 1e-15);
    }

    #[test]
    fn dims_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[2]);
        assert!(sgd_update(&mut p, &Tensor::zeros(&[3]), &mut b, 0.99, 0.1).is_err());
    }

    #[test]
    fn rejects_foreign_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::zeros(&[1]));
        let b = store.insert("b", Tensor::zeros(&[1]));
        let mut opt = Sgd::new(&store, [a], 0.9);
        let grads = BTreeMap::from([(b, scalar(1.0))]);
        assert!(opt.step(&mut store, &grads, 0.1).is_err());
    }
}
