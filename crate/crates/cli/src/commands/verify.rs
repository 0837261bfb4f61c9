//! Quick self-check of the core invariants on small synthetic inputs.

use grain_core::bijective_ae::{decode, encode, AeParams};
use grain_core::io;
use grain_core::lattice_mc::{init_lattice, mc_sweep, Neighborhood};
use grain_core::rng;
use grain_core::rollout::{graph_size, max_discrepancy, rollout_latent, rollout_original, RolloutConfig, Algorithm};
use grain_core::trainer::{add_noise, multi_step_loss, multi_step_loss_grad, symmetry_group};
use grain_core::{Field, ModelConfig, SurrogateParams};

use crate::config::RunConfig;
use crate::error::CliError;

type Check = Result<String, String>;

fn field(dims: &[usize], channels: usize, seed: u64) -> Field {
    let n = dims.iter().product::<usize>() * channels;
    // splitmix-style hash, uniform enough for invariant checks
    let data = (0..n as u64)
        .map(|i| {
            let mut x = (i ^ seed.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            x ^= x >> 31;
            x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Field::from_vec(dims, channels, data).expect("consistent shape")
}

fn perturbed_model(cfg: &ModelConfig, seed: u64) -> grain_core::Result<SurrogateParams> {
    let mut p = SurrogateParams::new(cfg, seed)?;
    let n_ae = p.ae.param_count();
    let mut flat = p.flatten();
    for (i, v) in flat.iter_mut().enumerate().skip(n_ae) {
        *v += 0.05 * ((i as f64) * 0.7).sin();
    }
    p.load_flat(&flat)?;
    Ok(p)
}

fn bijectivity(seed: u64) -> Check {
    let mut worst = 0.0f64;
    for (dims, n) in [(vec![64, 64], 2usize), (vec![64, 64], 4), (vec![64, 64], 8), (vec![16, 16, 16], 2), (vec![16, 16, 16], 4)] {
        let stages = n.trailing_zeros() as usize;
        let ae = AeParams::random_orthogonal(dims.len(), 1, stages, seed);
        let x = field(&dims, 1, seed);
        let back = decode(&encode(&x, &ae).map_err(|e| e.to_string())?, &ae).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&x));
        let id = AeParams::identity(dims.len(), 1, stages);
        let exact = decode(&encode(&x, &id).map_err(|e| e.to_string())?, &id).map_err(|e| e.to_string())?;
        if exact != x {
            return Err(format!("identity mixing is not bit-exact at n={n}"));
        }
    }
    if worst <= 1e-5 {
        Ok(format!("max reconstruction error {worst:.2e}"))
    } else {
        Err(format!("max reconstruction error {worst:.2e} > 1e-5"))
    }
}

fn shape_law() -> Check {
    for (dims, n, want) in [(vec![64, 64], 4usize, (vec![16, 16], 16)), (vec![32, 32, 32], 2, (vec![16, 16, 16], 8))] {
        let ae = AeParams::identity(dims.len(), 1, n.trailing_zeros() as usize);
        let x = field(&dims, 1, 3);
        let z = encode(&x, &ae).map_err(|e| e.to_string())?;
        if (z.dims().to_vec(), z.channels()) != want {
            return Err(format!("{dims:?} at n={n} gave {:?}x{}", z.dims(), z.channels()));
        }
        let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = z.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err("element multiset changed".into());
        }
    }
    Ok("(64,64,1)->(16,16,16), (32,32,32,1)->(16,16,16,8)".into())
}

fn symmetry() -> Check {
    for (d, size) in [(2, 8), (3, 48)] {
        let g = symmetry_group(d);
        if g.len() != size {
            return Err(format!("{d}D group has {} ops", g.len()));
        }
        let x = field(&vec![4; d], 1, 5);
        for a in &g {
            if !g.contains(&a.inverse()) || a.inverse().apply(&a.apply(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())? != x {
                return Err(format!("inverse fails for {a:?}"));
            }
            if g.iter().any(|b| !g.contains(&b.after(a))) {
                return Err("group is not closed".into());
            }
        }
    }
    Ok("8 and 48 ops, closed, inverses exact".into())
}

fn container() -> Check {
    let frames = vec![field(&[8, 6], 2, 1), field(&[8, 6], 2, 2)];
    let mut bytes = Vec::new();
    io::write_fields(&mut bytes, &frames).map_err(|e| e.to_string())?;
    let back = io::read_fields(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    io::write_fields(&mut again, back.frames()).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("round trip changed bytes".into());
    }
    bytes[0] = b'X';
    if io::read_fields(&mut bytes.as_slice()).is_ok() {
        return Err("corrupted magic accepted".into());
    }
    Ok(format!("{} bytes round-tripped", again.len()))
}

fn parity(seed: u64) -> Check {
    let cfg = ModelConfig::new(2, 4, 8, 2);
    let p = perturbed_model(&cfg, seed).map_err(|e| e.to_string())?;
    let x = field(&[32, 32], 1, seed);
    let rc = RolloutConfig::new(Algorithm::AeLatent, 25);
    let a = rollout_original(&x, &p, &rc).map_err(|e| e.to_string())?;
    let b = rollout_latent(&x, &p, &rc).map_err(|e| e.to_string())?;
    let d = max_discrepancy(&a, &b).map_err(|e| e.to_string())?;
    if d <= 1e-4 {
        Ok(format!("25 steps, max discrepancy {d:.2e}"))
    } else {
        Err(format!("max discrepancy {d:.2e} > 1e-4"))
    }
}

fn scaling(cfg: &RunConfig) -> Check {
    for (dims, n) in [(vec![64, 64], 4), (vec![32, 32, 32], 2)] {
        let (n0, e0) = graph_size(&dims, 1, cfg.connectivity).map_err(|e| e.to_string())?;
        let (n1, e1) = graph_size(&dims, n, cfg.connectivity).map_err(|e| e.to_string())?;
        let f = n.pow(dims.len() as u32);
        if n0 != n1 * f || e0 != e1 * f {
            return Err(format!("{dims:?} at n={n}: nodes {n0}/{n1}, edges {e0}/{e1}"));
        }
    }
    Ok("node and edge counts shrink by exactly n^d".into())
}

fn gradient(seed: u64) -> Check {
    let cfg = ModelConfig::new(2, 2, 6, 2);
    let mut p = perturbed_model(&cfg, seed).map_err(|e| e.to_string())?;
    let graph = p.graph_for(&[8, 8]).map_err(|e| e.to_string())?;
    let x = field(&[8, 8], 1, 1);
    let targets = vec![field(&[8, 8], 1, 2), field(&[8, 8], 1, 3)];
    let (_, grads) = multi_step_loss_grad(&p, &graph, &x, &targets).map_err(|e| e.to_string())?;
    let g = grads.flatten();
    let base = p.flatten();
    let h = 1e-3;
    let mut worst = 0.0f64;
    let stride = (base.len() / 20).max(1);
    for i in (0..base.len()).step_by(stride) {
        let mut eval = |delta: f64| -> Result<f64, String> {
            let mut q = base.clone();
            q[i] += delta;
            p.load_flat(&q).map_err(|e| e.to_string())?;
            multi_step_loss(&p, &graph, &x, &targets).map_err(|e| e.to_string())
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
    }
    if worst <= 1e-3 {
        Ok(format!("worst relative error {worst:.2e}"))
    } else {
        Err(format!("worst relative error {worst:.2e} > 1e-3"))
    }
}

fn noise(seed: u64) -> Check {
    let x = Field::zeros(&[1000, 1000], 1);
    let y = add_noise(&x, 1e-3, &mut rng::substream(seed, &[rng::tag::WINDOW]));
    let n = y.len() as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if (std / 1e-3 - 1.0).abs() <= 0.01 {
        Ok(format!("sample std {std:.4e} over 10^6 draws"))
    } else {
        Err(format!("sample std {std:.4e} is not within 1% of 1e-3"))
    }
}

fn energy(seed: u64) -> Check {
    let mut l = init_lattice(&[32, 32], 1024, seed, Neighborhood::Moore).map_err(|e| e.to_string())?;
    let mut r = rng::substream(seed, &[rng::tag::SWEEP]);
    let mut e = l.total_energy(1.0);
    for s in 0..20 {
        mc_sweep(&mut l, 0.0, 1.0, &mut r);
        let next = l.total_energy(1.0);
        if next > e {
            return Err(format!("energy rose at sweep {s}: {e} -> {next}"));
        }
        e = next;
    }
    Ok("energy non-increasing over 20 zero-temperature sweeps".into())
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed;
    let checks: Vec<(&str, Check)> = vec![
        ("bijectivity", bijectivity(seed)),
        ("shape law", shape_law()),
        ("symmetry group", symmetry()),
        ("container round trip", container()),
        ("rollout parity", parity(seed)),
        ("graph scaling", scaling(cfg)),
        ("loss gradient", gradient(seed)),
        ("noise amplitude", noise(seed)),
        ("zero-temperature energy", energy(seed)),
    ];
    let mut failed = 0;
    for (name, r) in &checks {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
