//! One finite-difference case per differentiable primitive.

use east_core::activation::{blended_forward, dyrelu_forward, DyReluConfig, HyperVars};
use east_core::tensor::{Graph, Var};

use super::{gradcheck, projection_loss, random_tensor, rng, CheckStats};

type Case = (&'static str, fn() -> CheckStats);

fn check(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> east_core::Result<Var>) -> CheckStats {
    let mut r = rng(seed);
    let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut r, s, 1.0)).collect();
    gradcheck(&inputs, seed, f)
}

fn hyper_inputs(c: usize, cfg: &DyReluConfig) -> Vec<Vec<usize>> {
    cfg.hyper_shapes(c).to_vec()
}

fn dyrelu_case(beta: f64, seed: u64) -> CheckStats {
    let cfg = DyReluConfig::default();
    let c = 8;
    let mut shapes: Vec<Vec<usize>> = vec![vec![2, c, 3, 3]];
    shapes.extend(hyper_inputs(c, &cfg));
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    check(&refs, seed, move |g, v| {
        let h = HyperVars {
            fc1_w: v[1],
            fc1_b: v[2],
            fc2_w: v[3],
            fc2_b: v[4],
        };
        let y = if beta >= 1.0 {
            dyrelu_forward(g, v[0], &h, &cfg)?
        } else {
            blended_forward(g, v[0], Some(&h), &cfg, beta)?
        };
        projection_loss(g, y, seed + 1)
    })
}

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", || check(&[&[3, 4], &[4, 5]], 1, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            projection_loss(g, y, 11)
        })),
        ("conv2d stride 1 pad 1", || check(&[&[2, 3, 5, 5], &[4, 3, 3, 3]], 2, |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            projection_loss(g, y, 12)
        })),
        ("conv2d stride 2 pad 1", || check(&[&[2, 2, 6, 6], &[3, 2, 3, 3]], 3, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            projection_loss(g, y, 13)
        })),
        ("conv2d 1x1 stride 2", || check(&[&[2, 3, 5, 5], &[2, 3, 1, 1]], 4, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 0)?;
            projection_loss(g, y, 14)
        })),
        ("add broadcast", || check(&[&[2, 3, 4], &[2, 3, 1]], 5, |g, v| {
            let y = g.add(v[0], v[1])?;
            projection_loss(g, y, 15)
        })),
        ("sub", || check(&[&[3, 4], &[3, 4]], 6, |g, v| {
            let y = g.sub(v[0], v[1])?;
            projection_loss(g, y, 16)
        })),
        ("mul broadcast", || check(&[&[2, 3, 2, 2], &[2, 3, 1, 1]], 7, |g, v| {
            let y = g.mul(v[0], v[1])?;
            projection_loss(g, y, 17)
        })),
        ("scale and affine", || check(&[&[4, 3]], 8, |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.affine(y, 0.3, 2.0);
            projection_loss(g, y, 18)
        })),
        ("scalar_mul", || check(&[&[1], &[3, 2, 2]], 9, |g, v| {
            let y = g.scalar_mul(v[0], v[1])?;
            projection_loss(g, y, 19)
        })),
        ("relu", || check(&[&[5, 6]], 10, |g, v| {
            let y = g.relu(v[0]);
            projection_loss(g, y, 20)
        })),
        ("maximum", || check(&[&[5, 6], &[5, 6]], 11, |g, v| {
            let y = g.maximum(v[0], v[1])?;
            projection_loss(g, y, 21)
        })),
        ("sigmoid", || check(&[&[4, 5]], 12, |g, v| {
            let y = g.sigmoid(v[0]);
            projection_loss(g, y, 22)
        })),
        ("global_avg_pool", || check(&[&[2, 3, 4, 4]], 13, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            projection_loss(g, y, 23)
        })),
        ("batch_norm_train", || check(&[&[4, 3, 2, 2], &[3], &[3]], 14, |g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            projection_loss(g, y, 24)
        })),
        ("batch_norm_eval", || check(&[&[3, 2, 3, 3], &[2], &[2]], 15, |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5)?;
            projection_loss(g, y, 25)
        })),
        ("reshape and flatten", || check(&[&[2, 3, 2, 2]], 16, |g, v| {
            let y = g.reshape(v[0], &[2, 12])?;
            let y = g.reshape(y, &[2, 3, 4])?;
            let y = g.flatten(y)?;
            projection_loss(g, y, 26)
        })),
        ("bias_add", || check(&[&[3, 5], &[5]], 17, |g, v| {
            let y = g.bias_add(v[0], v[1])?;
            projection_loss(g, y, 27)
        })),
        ("slice_cols", || check(&[&[3, 7]], 18, |g, v| {
            let y = g.slice_cols(v[0], 2, 4)?;
            projection_loss(g, y, 28)
        })),
        ("softmax_cross_entropy", || check(&[&[4, 5]], 19, |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 4, 2, 2])
        })),
        ("dyrelu (beta 1)", || dyrelu_case(1.0, 30)),
        ("dyrelu blend (beta 0.5)", || dyrelu_case(0.5, 31)),
    ]
}
