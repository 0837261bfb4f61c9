use grain_core::coarsen::{postprocess, CoarsenConfig};
use grain_core::field::{ravel, unravel};
use grain_core::lattice_mc::{run_ensemble, McConfig};
use grain_core::rng;
use grain_core::rollout::{extrapolate, max_discrepancy, rollout, rollout_latent, rollout_original, Algorithm, RolloutConfig};
use grain_core::trainer::{split_trajectories, TrainConfig, Trainer};
use grain_core::{Execution, Field, ModelConfig, SurrogateParams, Trajectory};
use proptest::prelude::*;
use rand::Rng as _;

fn noisy_model(cfg: &ModelConfig, seed: u64, scale: f64) -> SurrogateParams {
    let mut m = SurrogateParams::new(cfg, seed).unwrap();
    let mut r = rng::substream(seed, &[99]);
    let flat: Vec<f64> = m.flatten().iter().map(|v| v + scale * (r.random::<f64>() - 0.5)).collect();
    m.load_flat(&flat).unwrap();
    m
}

fn uniform(dims: &[usize], seed: u64) -> Field {
    let mut r = rng::substream(seed, &[]);
    let n: usize = dims.iter().product();
    Field::from_vec(dims, 1, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

/// Periodic tiling `reps` times along every axis.
fn tile(x: &Field, reps: usize) -> Field {
    let dims: Vec<usize> = x.dims().iter().map(|d| d * reps).collect();
    let c = x.channels();
    let mut out = Field::zeros(&dims, c);
    let mut at = vec![0; dims.len()];
    for (cell, dst) in out.data_mut().chunks_exact_mut(c).enumerate() {
        unravel(cell, &dims, &mut at);
        for (a, d) in at.iter_mut().zip(x.dims()) {
            *a %= d;
        }
        let src = ravel(&at, x.dims()) * c;
        dst.copy_from_slice(&x.data()[src..src + c]);
    }
    out
}

#[test]
fn extrapolates_to_96_cubed_for_200_steps() {
    // parameters sized for 32³ fields; nothing in them depends on the grid
    let model = noisy_model(&ModelConfig::new(3, 4, 16, 3), 8, 0.02);
    model.graph_for(&[32, 32, 32]).unwrap();
    let phi0 = uniform(&[96, 96, 96], 9);
    let r = extrapolate(&phi0, &model, 200, 50).unwrap();
    assert_eq!(r.steps, vec![0, 50, 100, 150, 200]);
    assert_eq!(r.step_seconds.len(), 200);
    assert_eq!(r.graph_nodes, 24 * 24 * 24);
    for f in r.trajectory.frames() {
        assert_eq!(f.dims(), &[96, 96, 96]);
        assert_eq!(f.channels(), 1);
    }
    assert_eq!((r.encode_calls, r.decode_calls), (1, 4));
}

#[test]
fn extrapolation_on_the_training_grid_is_a_latent_rollout() {
    let model = noisy_model(&ModelConfig::new(2, 2, 8, 2), 3, 0.1);
    let phi0 = uniform(&[16, 16], 4);
    let a = extrapolate(&phi0, &model, 6, 1).unwrap();
    let b = rollout_latent(&phi0, &model, &RolloutConfig::new(Algorithm::AeLatent, 6)).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
}

#[test]
fn extrapolation_rejects_indivisible_grids() {
    let model = noisy_model(&ModelConfig::new(2, 4, 8, 2), 3, 0.1);
    assert!(extrapolate(&uniform(&[30, 32], 1), &model, 3, 1).is_err());
}

#[test]
fn tiled_fields_roll_out_as_tiles() {
    let model = noisy_model(&ModelConfig::new(2, 2, 8, 2), 5, 0.2);
    let phi0 = uniform(&[8, 8], 6);
    let small = extrapolate(&phi0, &model, 4, 4).unwrap();
    let big = extrapolate(&tile(&phi0, 3), &model, 4, 4).unwrap();
    let want = tile(small.trajectory.frames().last().unwrap(), 3);
    assert!(big.trajectory.frames().last().unwrap().max_abs_diff(&want) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn both_ae_schemes_agree(seed in 0u64..1000, ratio in prop_oneof![Just(2usize), Just(4)], steps in 1usize..30, every in 1usize..8) {
        let model = noisy_model(&ModelConfig::new(2, ratio, 8, 2), seed, 0.1);
        let phi0 = uniform(&[16, 16], seed + 1);
        let cfg = RolloutConfig { emit_every: every, ..RolloutConfig::new(Algorithm::AeLatent, steps) };
        let a = rollout_original(&phi0, &model, &cfg).unwrap();
        let b = rollout_latent(&phi0, &model, &cfg).unwrap();
        prop_assert_eq!(&a.steps, &b.steps);
        prop_assert!(max_discrepancy(&a, &b).unwrap() <= 1e-4);
        prop_assert_eq!(a.encode_calls, steps);
        prop_assert_eq!(b.encode_calls, 1);
        prop_assert_eq!(b.decode_calls, b.steps.len() - 1);
        if steps > 1 && every > 1 {
            prop_assert!(b.decode_calls < a.decode_calls);
        }
    }
}

fn train_3d(train: &[Trajectory], val: &[Trajectory], ratio: usize) -> SurrogateParams {
    let model = SurrogateParams::new(&ModelConfig::new(3, ratio, 32, 3), 21).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        seed: 22,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    t.run(train, val, 10, Execution::Parallel, |_| {}).unwrap();
    t.into_parts().0
}

/// Directional check: after desk-scale 3D training, the full-resolution
/// GNN leaves the bounded range on a larger grid while the latent model
/// does not.
#[test]
#[ignore = "about 10 minutes; fails at desk scale, both models drift without crossing the threshold"]
fn gnn_only_diverges_on_3d_extrapolation_while_latent_stays_bounded() {
    let mut mc = McConfig::fine_grained(&[64, 64, 64], 10, 12, 500);
    mc.warmup_sweeps = 20;
    let raw = run_ensemble(&mc, 5, Execution::Parallel).unwrap();
    let fields: Vec<Trajectory> = raw.iter().map(|r| postprocess(r, &CoarsenConfig::default()).unwrap()).collect();
    let (tr, va) = split_trajectories(fields.len(), 0.2, 1).unwrap();
    let train: Vec<Trajectory> = tr.iter().map(|&i| fields[i].clone()).collect();
    let val: Vec<Trajectory> = va.iter().map(|&i| fields[i].clone()).collect();

    let gnn = train_3d(&train, &val, 1);
    let latent = train_3d(&train, &val, 4);
    let phi0 = tile(val[0].frame(0), 2);
    let steps = 100;
    let a = rollout(&phi0, &gnn, &RolloutConfig { emit_every: 5, ..RolloutConfig::new(Algorithm::GnnOnly, steps) }).unwrap();
    let b = rollout(&phi0, &latent, &RolloutConfig { emit_every: 5, ..RolloutConfig::new(Algorithm::AeLatent, steps) }).unwrap();
    eprintln!("gnn_only max|phi| {:?}", a.max_abs);
    eprintln!("ae_latent max|phi| {:?}", b.max_abs);
    assert!(a.diverged_at.is_some(), "gnn_only stayed bounded");
    assert!(b.diverged_at.is_none(), "ae_latent diverged at step {:?}", b.diverged_at);
}
