use crate::error::{Error, Result};
use crate::model::{DenseKind, Gradients, ParamStore};
use crate::tensor::{sgd_momentum_step, Real};
use crate::topology::Position;

/// SGD with momentum over a [`ParamStore`]. Gains are never decayed.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub masked: Vec<Vec<T>>,
    pub dense: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            masked: store.masked.iter().map(|p| vec![T::zero(); p.dense_count()]).collect(),
            dense: store
                .dense
                .iter()
                .map(|d| d.as_ref().map(|d| vec![T::zero(); d.value.len()]))
                .collect(),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let (lr, m) = (T::from_f64(lr), T::from_f64(self.momentum));
        let wd = T::from_f64(self.weight_decay);
        for ((p, g), v) in store.masked.iter_mut().zip(&grads.masked).zip(&mut self.masked) {
            let Some(g) = g else { continue };
            let mask = p.mask().to_vec();
            sgd_momentum_step(p.weights_mut(), g, v, lr, m, wd, Some(&mask));
        }
        for ((p, g), v) in store.dense.iter_mut().zip(&grads.dense).zip(&mut self.dense) {
            let (Some(p), Some(g)) = (p.as_mut(), g) else { continue };
            let v = v
                .as_mut()
                .ok_or_else(|| Error::State(format!("no velocity for {}", p.name)))?;
            let decay = if p.kind == DenseKind::Gain { T::zero() } else { wd };
            sgd_momentum_step(p.value.data_mut(), g, v, lr, m, decay, None);
        }
        Ok(())
    }

    /// Zeroes the velocity of pruned or regrown positions.
    pub fn reset(&mut self, positions: &[Position]) {
        for p in positions {
            self.masked[p.layer][p.index] = T::zero();
        }
    }

    /// Drops velocities of parameters removed from the store.
    pub fn sync(&mut self, store: &ParamStore<T>) {
        for (v, d) in self.dense.iter_mut().zip(&store.dense) {
            if d.is_none() {
                *v = None;
            }
        }
    }
}

/// `Σ_l ‖∇θ_l ⊙ M_l‖₂` over masked weight tensors.
pub fn grad_norm_sum<T: Real>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
    store
        .masked
        .iter()
        .zip(&grads.masked)
        .filter_map(|(p, g)| g.as_ref().map(|g| (p, g)))
        .map(|(p, g)| {
            g.iter()
                .zip(p.mask())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}
