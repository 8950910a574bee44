//! Global prune and grow selection over a set of masked tensors.
//!
//! Positions are ranked across all layers jointly. Ties are broken by the
//! global flat index (layer order, then row-major), lowest first.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Real;

use super::MaskedParam;

/// A single weight: `(layer index, flat index within the layer)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub layer: usize,
    pub index: usize,
}

struct Candidate {
    key: f64,
    pos: Position,
}

/// Keeps the `count` best candidates under `better`, then orders them.
/// Candidates arrive in flat-index order, which serves as the tie-break.
fn take_best(mut c: Vec<Candidate>, count: usize, better: fn(f64, f64) -> Ordering) -> Vec<Position> {
    let cmp = |a: &Candidate, b: &Candidate| better(a.key, b.key).then(a.pos.cmp(&b.pos));
    if count == 0 {
        return Vec::new();
    }
    if count < c.len() {
        c.select_nth_unstable_by(count - 1, cmp);
        c.truncate(count);
    }
    c.sort_by(cmp);
    c.into_iter().map(|c| c.pos).collect()
}

fn blocked<T: Real>(params: &[MaskedParam<T>], exclude: &[Position]) -> Vec<Vec<bool>> {
    let mut b: Vec<Vec<bool>> = params.iter().map(|_| Vec::new()).collect();
    for p in exclude {
        if b[p.layer].is_empty() {
            b[p.layer] = vec![false; params[p.layer].dense_count()];
        }
        b[p.layer][p.index] = true;
    }
    b
}

fn apply<T: Real>(params: &mut [MaskedParam<T>], chosen: &[Position], grow: bool) {
    let mut per_layer: Vec<Vec<usize>> = vec![Vec::new(); params.len()];
    for p in chosen {
        per_layer[p.layer].push(p.index);
    }
    for (param, idx) in params.iter_mut().zip(per_layer) {
        if idx.is_empty() {
            continue;
        }
        if grow {
            param.activate(&idx);
        } else {
            param.deactivate(&idx);
        }
    }
}

/// Deactivates the `count` active weights of smallest magnitude, globally.
pub fn magnitude_prune<T: Real>(params: &mut [MaskedParam<T>], count: usize) -> Result<Vec<Position>> {
    let active: usize = params.iter().map(|p| p.active_count()).sum();
    if count > active {
        return Err(Error::Input(format!("cannot prune {count} of {active} active weights")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut cands = Vec::with_capacity(active);
    for (layer, p) in params.iter().enumerate() {
        let w = p.weights().data();
        for &i in p.support().iter() {
            let index = i as usize;
            cands.push(Candidate {
                key: w[index].abs().as_f64(),
                pos: Position { layer, index },
            });
        }
    }
    let chosen = take_best(cands, count, |a, b| a.total_cmp(&b));
    apply(params, &chosen, false);
    Ok(chosen)
}

fn inactive_candidates<T: Real>(
    params: &[MaskedParam<T>],
    exclude: &[Position],
    mut key: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<Vec<Candidate>> {
    let blocked = blocked(params, exclude);
    let mut cands = Vec::new();
    for (layer, p) in params.iter().enumerate() {
        let b = &blocked[layer];
        for (index, &m) in p.mask().iter().enumerate() {
            if m || (!b.is_empty() && b[index]) {
                continue;
            }
            cands.push(Candidate {
                key: key(layer, index)?,
                pos: Position { layer, index },
            });
        }
    }
    Ok(cands)
}

/// Activates the `count` inactive positions with the largest dense-gradient
/// magnitude. Positions in `exclude` are never chosen. Grown weights start at
/// zero.
pub fn gradient_grow<T: Real>(
    params: &mut [MaskedParam<T>],
    dense_grads: &[Option<Vec<T>>],
    count: usize,
    exclude: &[Position],
) -> Result<Vec<Position>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if dense_grads.len() != params.len() {
        return Err(Error::State(format!(
            "{} dense gradients for {} masked tensors",
            dense_grads.len(),
            params.len()
        )));
    }
    let cands = inactive_candidates(params, exclude, |layer, index| {
        let g = dense_grads[layer].as_ref().ok_or_else(|| {
            Error::State(format!("no dense gradient for {}", params[layer].name()))
        })?;
        Ok(g[index].abs().as_f64())
    })?;
    if count > cands.len() {
        return Err(Error::Input(format!("cannot grow {count} of {} inactive weights", cands.len())));
    }
    let chosen = take_best(cands, count, |a, b| b.total_cmp(&a));
    apply(params, &chosen, true);
    Ok(chosen)
}

/// Activates `count` inactive positions chosen uniformly without replacement.
pub fn random_grow<T: Real, R: Rng + ?Sized>(
    params: &mut [MaskedParam<T>],
    count: usize,
    rng: &mut R,
    exclude: &[Position],
) -> Result<Vec<Position>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let cands = inactive_candidates(params, exclude, |_, _| Ok(0.0))?;
    if count > cands.len() {
        return Err(Error::Input(format!("cannot grow {count} of {} inactive weights", cands.len())));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, cands.len(), count).into_vec();
    picked.sort_unstable();
    let chosen: Vec<Position> = picked.into_iter().map(|i| cands[i].pos).collect();
    apply(params, &chosen, true);
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(name: &str, w: &[f64]) -> MaskedParam<f64> {
        MaskedParam::dense(name, Tensor::from_f64(&[w.len()], w).unwrap())
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        let mut ps = vec![layer("a", &[0.5, -0.1, 0.3, -0.7])];
        let pruned = magnitude_prune(&mut ps, 2).unwrap();
        assert_eq!(ps[0].mask(), &[true, false, false, true]);
        assert_eq!(ps[0].weights().data(), &[0.5, 0.0, 0.0, -0.7]);
        assert_eq!(pruned.len(), 2);
    }

    #[test]
    fn prune_zero_is_noop_and_overflow_is_rejected() {
        let mut ps = vec![layer("a", &[0.5, -0.1])];
        assert!(magnitude_prune(&mut ps, 0).unwrap().is_empty());
        assert_eq!(ps[0].active_count(), 2);
        assert!(matches!(magnitude_prune(&mut ps, 3), Err(Error::Input(_))));
    }

    #[test]
    fn ties_resolve_to_lower_flat_index_across_layers() {
        let mut ps = vec![layer("a", &[1.0, 0.2]), layer("b", &[0.2, 0.2])];
        let pruned = magnitude_prune(&mut ps, 2).unwrap();
        assert_eq!(
            pruned,
            vec![Position { layer: 0, index: 1 }, Position { layer: 1, index: 0 }]
        );
    }

    #[test]
    fn grows_largest_gradient() {
        let w = Tensor::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap();
        let mut ps = vec![MaskedParam::with_mask("a", w, vec![false; 3]).unwrap()];
        let grads = vec![Some(vec![0.9, -0.05, 0.4])];
        let grown = gradient_grow(&mut ps, &grads, 1, &[]).unwrap();
        assert_eq!(grown, vec![Position { layer: 0, index: 0 }]);
        assert_eq!(ps[0].mask(), &[true, false, false]);
        assert_eq!(ps[0].weights().data()[0], 0.0);

        assert!(gradient_grow(&mut ps, &grads, 0, &[]).unwrap().is_empty());
        gradient_grow(&mut ps, &grads, 2, &[]).unwrap();
        assert!(ps[0].mask().iter().all(|&m| m));
    }

    #[test]
    fn grow_needs_dense_gradients() {
        let mut ps = vec![MaskedParam::<f64>::empty("a", &[3])];
        assert!(matches!(gradient_grow(&mut ps, &[None], 1, &[]), Err(Error::State(_))));
    }

    #[test]
    fn grow_skips_excluded_positions() {
        let mut ps = vec![MaskedParam::<f64>::empty("a", &[3])];
        let grads = vec![Some(vec![0.9, 0.1, 0.4])];
        let ex = [Position { layer: 0, index: 0 }];
        let grown = gradient_grow(&mut ps, &grads, 1, &ex).unwrap();
        assert_eq!(grown, vec![Position { layer: 0, index: 2 }]);
    }

    #[test]
    fn random_grow_fills_everything_when_asked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = vec![MaskedParam::<f64>::empty("a", &[5])];
        assert!(random_grow(&mut ps, 0, &mut rng, &[]).unwrap().is_empty());
        random_grow(&mut ps, 5, &mut rng, &[]).unwrap();
        assert_eq!(ps[0].active_count(), 5);
    }

    #[test]
    fn random_grow_is_uniform() {
        // Binomial(10000, 1/4): sd = sqrt(10000 * 0.25 * 0.75) ≈ 43.3.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut hits = [0usize; 4];
        for _ in 0..10_000 {
            let mut ps = vec![MaskedParam::<f64>::empty("a", &[4])];
            let g = random_grow(&mut ps, 1, &mut rng, &[]).unwrap();
            hits[g[0].index] += 1;
        }
        let sd = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for h in hits {
            assert!((h as f64 - 2500.0).abs() <= 3.0 * sd, "{hits:?}");
        }
    }
}
