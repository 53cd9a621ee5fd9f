use super::Module;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `target ← τ·online + (1−τ)·target`, elementwise.
pub fn soft_update(target: &mut [&mut Tensor], online: &[&Tensor], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("soft update rate {} outside (0, 1]", tau)));
    }
    if target.len() != online.len() {
        return Err(Error::InvalidArgument("target/online parameter count differs".into()));
    }
    for (t, o) in target.iter_mut().zip(online) {
        if t.shape() != o.shape() {
            return Err(Error::InvalidArgument(format!(
                "target shape {:?} vs online {:?}",
                t.shape(),
                o.shape()
            )));
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

/// An online network and its slowly tracking target copy.
#[derive(Clone, Debug)]
pub struct TargetPair<M> {
    pub online: M,
    pub target: M,
    tau: f64,
}

impl<M: Module + Clone> TargetPair<M> {
    /// Target starts as an exact copy of `online`.
    pub fn new(online: M, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("soft update rate {} outside (0, 1]", tau)));
        }
        let target = online.clone();
        Ok(TargetPair { online, target, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn soft_update(&mut self) -> Result<()> {
        let online = self.online.parameters();
        let mut target = self.target.parameters_mut();
        soft_update(&mut target, &online, self.tau)
    }
}
