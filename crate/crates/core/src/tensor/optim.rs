use super::Real;

/// One SGD-with-momentum update over a flat parameter buffer.
///
/// `v ← momentum·v + grad + weight_decay·param`, then `param ← param − lr·v`.
/// When a mask is given, masked-out entries of both the parameter and its
/// velocity are forced to zero after the update.
pub fn sgd_momentum_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
    mask: Option<&[bool]>,
) {
    assert_eq!(param.len(), grad.len(), "param/grad length");
    assert_eq!(param.len(), velocity.len(), "param/velocity length");
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    if let Some(mask) = mask {
        for ((p, v), &m) in param.iter_mut().zip(velocity.iter_mut()).zip(mask) {
            if !m {
                *p = T::zero();
                *v = T::zero();
            }
        }
    }
}
