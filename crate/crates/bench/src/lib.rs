//! Fixtures shared by the benchmarks.

use east_core::model::{ActivationMode, ArchSpec, Phase};
use east_core::tensor::{GradMode, Graph, Tensor};
use east_core::topology::{erk_init, erk_plan, MaskedParam};
use east_core::{Model, SharingPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// One fully dense masked tensor of `n` random weights.
pub fn dense_param(n: usize, seed: u64) -> MaskedParam<f32> {
    MaskedParam::dense("w", random_tensor(&mut rng(seed), &[n]))
}

/// The desk residual net on 8×8 inputs, ERK-initialised at `density`.
pub fn desk_model(density: f64, dyrelu: bool, sharing: bool) -> Model<f32> {
    let mut spec = ArchSpec::resnet(
        east_core::Family::ResnetBasic,
        &[16, 32, 64],
        &[3, 3, 3],
        10,
        [3, 8, 8],
    );
    if dyrelu {
        spec = spec.with_activation(ActivationMode::DyreluPhased);
    }
    if sharing {
        spec = spec.with_sharing(SharingPlan::uniform(&[3, 3, 3], 2));
    }
    let mut m = Model::<f32>::build(&spec, 1).expect("valid spec");
    let plan = erk_plan(&m.layout().stored_shapes(), density).expect("valid density");
    erk_init(&mut m.store.masked, &plan, &mut rng(2)).expect("plan fits");
    m
}

/// Forward and backward of one batch; returns the loss.
pub fn train_pass(m: &Model<f32>, x: &Tensor<f32>, labels: &[usize], mode: GradMode) -> f32 {
    let mut g = Graph::new(mode);
    let xv = g.constant(x.clone());
    let out = m.forward(&mut g, xv, Phase::Train).expect("forward");
    let loss = g.softmax_cross_entropy(out.logits, labels).expect("loss");
    g.backward(loss).expect("backward");
    g.value(loss).data()[0]
}
