//! Independent reference implementations used by the property tests.

use std::f64::consts::PI;

use east_core::model::{ArchSpec, Family, Phase, Storage};
use east_core::sharing::SharingPlan;
use east_core::tensor::{GradMode, Graph, Tensor};
use east_core::topology::{
    CyclePhase, MaskedParam, Position, Regrowth, ScheduleMode, SelectionScope, TopologyConfig, TopologyController,
};
use east_core::Model;
use rand::Rng;

use super::{randomise_bn, randomise_gains, random_tensor, rng};

/// First `k` active positions after a stable sort by `|w|` ascending.
pub fn brute_prune(params: &[MaskedParam<f64>], k: usize) -> Vec<Position> {
    let mut all = Vec::new();
    for (layer, p) in params.iter().enumerate() {
        for (index, (&w, &m)) in p.weights().data().iter().zip(p.mask()).enumerate() {
            if m {
                all.push((w.abs(), Position { layer, index }));
            }
        }
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<Position> = all.into_iter().take(k).map(|(_, p)| p).collect();
    out.sort();
    out
}

/// First `k` inactive, non-excluded positions after a stable sort by `|g|`
/// descending.
pub fn brute_grow(params: &[MaskedParam<f64>], grads: &[Vec<f64>], k: usize, exclude: &[Position]) -> Vec<Position> {
    let mut all = Vec::new();
    for (layer, p) in params.iter().enumerate() {
        for (index, &m) in p.mask().iter().enumerate() {
            let pos = Position { layer, index };
            if !m && !exclude.contains(&pos) {
                all.push((grads[layer][index].abs(), pos));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut out: Vec<Position> = all.into_iter().take(k).map(|(_, p)| p).collect();
    out.sort();
    out
}

/// Cosine target written out independently of the library.
pub fn oracle_target(t: u64, cfg: &TopologyConfig) -> f64 {
    if t == cfg.cyclic_end {
        return cfg.s_max;
    }
    let period = cfg.cyclic_end as f64 / cfg.cycles as f64;
    let x = (2.0 * PI * t as f64 / period).cos();
    let mid = 0.5 * (cfg.s_max + cfg.s_min);
    let amp = 0.5 * (cfg.s_max - cfg.s_min);
    match cfg.phase {
        CyclePhase::HighStart => mid + amp * x,
        CyclePhase::LowStart => mid - amp * x,
    }
}

/// Ten random layers with every entry active.
pub fn toy_layers(r: &mut impl Rng) -> Vec<MaskedParam<f64>> {
    (0..10)
        .map(|l| {
            let shape = if l % 3 == 0 {
                vec![r.random_range(2..6), r.random_range(1..4), 3, 3]
            } else {
                vec![r.random_range(4..40), r.random_range(4..40)]
            };
            MaskedParam::dense(format!("layer{l}"), random_tensor(r, &shape, 1.0))
        })
        .collect()
}

/// Runs `updates` topology updates with fresh random weights and gradients
/// between them. Returns the first mismatch between the recounted active
/// total and the expected count, if any.
pub fn cardinality_run(seed: u64, updates: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let mut params = toy_layers(&mut r);
    let n: usize = params.iter().map(|p| p.dense_count()).sum();
    let s_max = r.random_range(0.6..0.97);
    let s_min = r.random_range(0.2..s_max - 0.05);
    let cyclic_updates = r.random_range(updates / 4..3 * updates / 4) as u64;
    let interval_cyclic = r.random_range(1..4);
    let cfg = TopologyConfig {
        s_max,
        s_min,
        cyclic_end: cyclic_updates * interval_cyclic + r.random_range(0..interval_cyclic),
        cycles: r.random_range(1..4),
        interval_cyclic,
        interval_fixed: r.random_range(1..4),
        prune_rate: r.random_range(0.05..0.5),
        regrowth: if r.random_bool(0.5) { Regrowth::Gradient } else { Regrowth::Random },
        schedule: ScheduleMode::Cyclic,
        phase: if r.random_bool(0.5) { CyclePhase::HighStart } else { CyclePhase::LowStart },
        scope: if r.random_bool(0.5) { SelectionScope::Global } else { SelectionScope::PerLayer },
        seed,
    };
    // Start from the initial level by pruning at random.
    let start = ((1.0 - oracle_target(0, &cfg)) * n as f64).round() as usize;
    let mut drop = n - start;
    for p in params.iter_mut() {
        let k = drop.min(p.dense_count() - 1);
        let idx = rand::seq::index::sample(&mut r, p.dense_count(), k).into_vec();
        p.deactivate(&idx);
        drop -= k;
    }
    if drop != 0 {
        return Err("toy net too small for the initial sparsity".into());
    }
    let mut ctrl = TopologyController::new(cfg.clone(), n).map_err(|e| e.to_string())?;
    let mut expected = start;
    let (mut done, mut t, mut cyclic, mut fixed) = (0, 0u64, 0, 0);
    while done < updates {
        t += 1;
        if !ctrl.is_update_step(t) {
            continue;
        }
        for p in params.iter_mut() {
            for w in p.weights_mut() {
                *w = r.random_range(-1.0..1.0);
            }
            p.apply_mask();
        }
        let grads: Vec<Option<Vec<f64>>> = params
            .iter()
            .map(|p| Some((0..p.dense_count()).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        if t <= cfg.cyclic_end {
            expected = ((1.0 - oracle_target(t, &cfg)) * n as f64).round() as usize;
            cyclic += 1;
        } else {
            fixed += 1;
        }
        let before: usize = params.iter().map(|p| p.recount()).sum();
        let rep = ctrl.update(t, &mut params, Some(&grads)).map_err(|e| format!("t={t}: {e}"))?;
        let recount: usize = params.iter().map(|p| p.recount()).sum();
        if recount != expected || rep.active != expected || before + rep.grown.len() != recount + rep.pruned.len() {
            return Err(format!(
                "t={t}: recount {recount}, report {}, expected {expected}",
                rep.active
            ));
        }
        if params.iter().any(|p| p.masked_residual() != 0.0 || p.recount() != p.active_count()) {
            return Err(format!("t={t}: mask invariant broken"));
        }
        done += 1;
    }
    if cyclic == 0 || fixed == 0 {
        return Err(format!("phases not mixed: {cyclic} cyclic, {fixed} fixed"));
    }
    Ok(())
}

/// The 4-block stage used for the sharing oracles: 8 channels, donor 2.
pub fn toy_stage() -> ArchSpec {
    ArchSpec::resnet(Family::ResnetBasic, &[8], &[4], 3, [8, 4, 4]).with_sharing(SharingPlan::uniform(&[4], 2))
}

pub struct SharingGap {
    pub forward: f64,
    pub donor_grad: f64,
    pub gain_grad: f64,
    pub donors_checked: usize,
    pub gains_checked: usize,
}

/// Compares a shared network against an unshared clone whose recipient
/// tensors are `γ·W_donor` copies. The donor gradient must equal the sum of
/// the clone's per-site gradients (scaled by `γ`), and each gain gradient
/// must equal `⟨∂L/∂w_site, W_donor⟩`.
pub fn sharing_gradient_gap(spec: &ArchSpec, seed: u64) -> SharingGap {
    let mut shared = Model::<f64>::build(spec, seed).unwrap();
    randomise_gains(&mut shared, seed + 1);
    randomise_bn(&mut shared, seed + 2);
    let plain_spec = spec.clone().with_sharing(SharingPlan::disabled(spec.blocks.len()));
    let mut plain = Model::<f64>::build(&plain_spec, 0).unwrap();
    let sl = shared.layout().clone();
    let pl = plain.layout().clone();
    assert_eq!(sl.weights.len(), pl.weights.len());

    let gain_of = |k: usize| shared.store.dense[k].as_ref().unwrap().value.data()[0];
    let own_value = |w: usize| -> (usize, f64) {
        match sl.weights[w].storage {
            Storage::Own(_) => (w, 1.0),
            Storage::Shared { donor, gain } => (donor, gain_of(gain)),
        }
    };
    for (w, geom) in pl.weights.iter().enumerate() {
        assert_eq!(geom.name, sl.weights[w].name);
        let (d, g) = own_value(w);
        let src = &shared.store.masked[sl.stored_index(d)];
        let vals: Vec<f64> = src.weights().data().iter().map(|v| g * v).collect();
        plain.store.masked[pl.stored_index(w)] =
            MaskedParam::dense(geom.name.clone(), Tensor::new(&geom.shape, vals).unwrap());
    }
    for slot in plain.store.dense.iter_mut() {
        let p = slot.as_mut().unwrap();
        let src = shared
            .store
            .dense
            .iter()
            .flatten()
            .find(|d| d.name == p.name)
            .expect("same dense parameter");
        p.value = src.value.clone();
    }

    let [c, h, w] = spec.input;
    let x = random_tensor(&mut rng(seed + 3), &[4, c, h, w], 1.0);
    let labels = [0, 1, 2, 1];
    let run = |m: &Model<f64>| {
        let mut g = Graph::new(GradMode::Dense);
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, xv, Phase::Train).unwrap();
        let logits = g.value(out.logits).data().to_vec();
        let loss = g.softmax_cross_entropy(out.logits, &labels).unwrap();
        g.backward(loss).unwrap();
        (logits, m.gradients(&g))
    };
    let (ys, gs) = run(&shared);
    let (yp, gp) = run(&plain);
    let forward = ys.iter().zip(&yp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut gap = SharingGap {
        forward,
        donor_grad: 0.0,
        gain_grad: 0.0,
        donors_checked: 0,
        gains_checked: 0,
    };
    for (d, geom) in sl.weights.iter().enumerate() {
        let Storage::Own(s) = geom.storage else { continue };
        let mut manual = gp.masked[pl.stored_index(d)].clone().unwrap();
        let mut sites = 0;
        for (w, other) in sl.weights.iter().enumerate() {
            if let Storage::Shared { donor, gain } = other.storage {
                if donor != d {
                    continue;
                }
                sites += 1;
                let site = gp.masked[pl.stored_index(w)].as_ref().unwrap();
                let gamma = gain_of(gain);
                for (m, v) in manual.iter_mut().zip(site) {
                    *m += gamma * v;
                }
                let donor_w = shared.store.masked[s].weights().data();
                let dgamma: f64 = site.iter().zip(donor_w).map(|(a, b)| a * b).sum();
                let got = gs.dense[gain].as_ref().unwrap()[0];
                gap.gain_grad = gap.gain_grad.max((got - dgamma).abs());
                gap.gains_checked += 1;
            }
        }
        if sites > 0 {
            let got = gs.masked[s].as_ref().unwrap();
            let diff = got.iter().zip(&manual).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            gap.donor_grad = gap.donor_grad.max(diff);
            gap.donors_checked += 1;
        }
    }
    gap
}
