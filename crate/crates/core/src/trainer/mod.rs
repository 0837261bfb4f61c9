//! Fitting the surrogate to trajectory windows with the multi-step loss.
//!
//! A window is a start frame `φ_t` and the `p` frames that follow it. The
//! loss encodes `φ_t` once, applies the GNN `p` times in latent space, and
//! sums the mean-square error of each decoded step against its target.
//! Gradients flow through every step.
//!
//! All randomness is drawn from substreams keyed by `(seed, epoch, window
//! position)`, so the loss history does not depend on how a batch is
//! scheduled across threads.

mod optim;
mod symmetry;

pub use optim::{AdamState, AdamW, PlateauScheduler};
pub use symmetry::{grid_symmetries, symmetry_group, SymmetryOp};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bijective_ae::{decode, decode_backward, decode_traced, encode, encode_backward, encode_traced};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::{Field, Trajectory};
use crate::grid_gnn::{gnn_backward, gnn_forward, gnn_forward_traced, GridGraph};
use crate::model::{SurrogateGrads, SurrogateParams};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rollout steps `p` inside the loss.
    pub horizon: usize,
    pub noise_amplitude: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 1,
            noise_amplitude: 1e-3,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 8,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_learning_rate: 1e-6,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::config("noise amplitude must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::config("plateau factor must lie in (0, 1]"));
        }
        if self.plateau_patience < 1 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        Ok(())
    }

    /// Every trajectory must hold at least `horizon + 1` frames.
    pub fn check_dataset(&self, trajectories: &[Trajectory]) -> Result<()> {
        if let Some(short) = trajectories.iter().find(|t| t.len() < self.horizon + 1) {
            return Err(Error::config(format!(
                "horizon {} needs {} frames per trajectory, found one with {}",
                self.horizon,
                self.horizon + 1,
                short.len()
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// `φ + amplitude · ε` with `ε ~ N(0, 1)` per element.
pub fn add_noise(field: &Field, amplitude: f64, rng: &mut Rng) -> Field {
    let mut out = field.clone();
    if amplitude != 0.0 {
        for v in out.data_mut() {
            *v += amplitude * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

pub fn mse(prediction: &Field, target: &Field) -> Result<f64> {
    if !prediction.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?}x{} vs target {:?}x{}",
            prediction.dims(),
            prediction.channels(),
            target.dims(),
            target.channels()
        )));
    }
    let ss: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / prediction.len() as f64)
}

fn check_targets(targets: &[Field]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::config("multi-step loss needs at least one target frame"));
    }
    Ok(())
}

/// The `p` per-step terms of the multi-step loss, forward only.
pub fn multi_step_loss_terms(
    params: &SurrogateParams,
    graph: &GridGraph,
    input: &Field,
    targets: &[Field],
) -> Result<Vec<f64>> {
    check_targets(targets)?;
    let mut z = encode(input, &params.ae)?;
    targets
        .iter()
        .map(|target| {
            z = gnn_forward(&z, &params.gnn, graph)?;
            mse(&decode(&z, &params.ae)?, target)
        })
        .collect()
}

pub fn multi_step_loss(params: &SurrogateParams, graph: &GridGraph, input: &Field, targets: &[Field]) -> Result<f64> {
    Ok(multi_step_loss_terms(params, graph, input, targets)?.iter().sum())
}

/// Loss and its gradient with respect to every model parameter.
pub fn multi_step_loss_grad(
    params: &SurrogateParams,
    graph: &GridGraph,
    input: &Field,
    targets: &[Field],
) -> Result<(f64, SurrogateGrads)> {
    check_targets(targets)?;
    let p = targets.len();
    let (mut z, enc_trace) = encode_traced(input, &params.ae)?;
    let mut gnn_traces = Vec::with_capacity(p);
    let mut dec_traces = Vec::with_capacity(p);
    let mut out_grads = Vec::with_capacity(p);
    let mut loss = 0.0;
    for target in targets {
        let (next, gt) = gnn_forward_traced(&z, &params.gnn, graph)?;
        let (y, dt) = decode_traced(&next, &params.ae)?;
        loss += mse(&y, target)?;
        let scale = 2.0 / y.len() as f64;
        let mut g = y;
        for (gv, t) in g.data_mut().iter_mut().zip(target.data()) {
            *gv = scale * (*gv - t);
        }
        out_grads.push(g);
        gnn_traces.push(gt);
        dec_traces.push(dt);
        z = next;
    }

    let mut grads = params.zero_grads();
    let mut g_z: Option<Field> = None;
    for k in (0..p).rev() {
        let mut g = decode_backward(&out_grads[k], &dec_traces[k], &params.ae, &mut grads.ae)?;
        if let Some(later) = g_z {
            for (a, b) in g.data_mut().iter_mut().zip(later.data()) {
                *a += b;
            }
        }
        g_z = Some(gnn_backward(&g, &gnn_traces[k], &params.gnn, graph, &mut grads.gnn)?);
    }
    let g_z0 = g_z.expect("at least one step");
    encode_backward(&g_z0, &enc_trace, &params.ae, &mut grads.ae)?;
    Ok((loss, grads))
}

/// A start frame within one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub trajectory: usize,
    pub start: usize,
}

/// Every start frame with `horizon` successors, in trajectory order.
pub fn windows(trajectories: &[Trajectory], horizon: usize) -> Vec<Window> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            (0..t.len().saturating_sub(horizon)).map(move |start| Window { trajectory: i, start })
        })
        .collect()
}

/// Partition trajectory indices into `(train, validation)`. Whole
/// trajectories go to one side, never individual frames.
pub fn split_trajectories(count: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config(format!(
            "validation fraction must lie in [0, 1), got {validation_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::substream(seed, &[tag::SPLIT]));
    let n_val = ((count as f64) * validation_fraction).round() as usize;
    let n_val = if validation_fraction > 0.0 && count >= 2 { n_val.max(1) } else { n_val };
    let mut val = idx.split_off(count - n_val.min(count));
    let mut train = idx;
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() {
        return Err(Error::config("no trajectories left for training"));
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent without a validation set.
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochRecord>,
}

struct GraphCache(HashMap<Vec<usize>, GridGraph>);

impl GraphCache {
    fn build(params: &SurrogateParams, sets: &[&[Trajectory]]) -> Result<Self> {
        let mut map = HashMap::new();
        for t in sets.iter().flat_map(|s| s.iter()) {
            let dims = t.frame(0).dims().to_vec();
            if !map.contains_key(&dims) {
                let g = params.graph_for(&dims)?;
                map.insert(dims, g);
            }
        }
        Ok(GraphCache(map))
    }

    fn get(&self, dims: &[usize]) -> &GridGraph {
        &self.0[dims]
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: SurrogateParams,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: SurrogateParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.param_count();
        let state = TrainState {
            epochs_done: 0,
            params: model.flatten(),
            adam: AdamState::new(n),
            scheduler: PlateauScheduler::new(
                config.learning_rate,
                config.plateau_factor,
                config.plateau_patience,
                config.min_learning_rate,
            ),
            history: Vec::new(),
        };
        Ok(Trainer { config, model, state })
    }

    /// Continues from a saved state; `model` supplies the architecture.
    pub fn resume(mut model: SurrogateParams, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let n = model.param_count();
        if state.adam.m.len() != n || state.adam.v.len() != n {
            return Err(Error::shape("optimizer state does not match the model size"));
        }
        model.load_flat(&state.params)?;
        Ok(Trainer { config, model, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SurrogateParams {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn into_parts(self) -> (SurrogateParams, TrainState) {
        (self.model, self.state)
    }

    /// Mean multi-step loss over all windows; noise-free and unaugmented.
    pub fn evaluate(&self, trajectories: &[Trajectory], exec: Execution) -> Result<f64> {
        let graphs = GraphCache::build(&self.model, &[trajectories])?;
        evaluate_with(&self.model, &graphs, trajectories, self.config.horizon, exec)
    }

    /// Runs epochs until `epochs_done` reaches `until` (capped at the
    /// configured total). `on_epoch` sees each record as it is produced.
    pub fn run(
        &mut self,
        train: &[Trajectory],
        val: &[Trajectory],
        until: usize,
        exec: Execution,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        self.config.check_dataset(train)?;
        self.config.check_dataset(val)?;
        let graphs = GraphCache::build(&self.model, &[train, val])?;
        let p = self.config.horizon;
        if self.state.history.is_empty() {
            let rec = EpochRecord {
                epoch: 0,
                train_loss: evaluate_with(&self.model, &graphs, train, p, exec)?,
                val_loss: optional_eval(&self.model, &graphs, val, p, exec)?,
                lr: self.state.scheduler.lr,
            };
            on_epoch(&rec);
            self.state.history.push(rec);
        }
        let until = until.min(self.config.epochs);
        while self.state.epochs_done < until {
            let rec = self.epoch(train, val, &graphs, exec)?;
            on_epoch(&rec);
            self.state.history.push(rec);
        }
        Ok(())
    }

    fn epoch(&mut self, train: &[Trajectory], val: &[Trajectory], graphs: &GraphCache, exec: Execution) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done + 1;
        let cfg = &self.config;
        let p = cfg.horizon;
        let mut order = windows(train, p);
        order.shuffle(&mut rng::substream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let opt = cfg.optimizer();
        let lr = self.state.scheduler.lr;
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let base = b * cfg.batch_size;
            let model = &self.model;
            let results = exec.map_range(batch.len(), |i| {
                let w = batch[i];
                let mut r = rng::substream(cfg.seed, &[tag::WINDOW, epoch as u64, (base + i) as u64]);
                let (input, targets) = training_window(&train[w.trajectory], w.start, p, cfg, &mut r)?;
                let graph = graphs.get(input.dims());
                let (loss, grads) = multi_step_loss_grad(model, graph, &input, &targets)?;
                Ok::<_, Error>((loss, grads.flatten()))
            });
            let mut grad_sum = vec![0.0; self.state.params.len()];
            for (i, res) in results.into_iter().enumerate() {
                let (loss, g) = res?;
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    let w = batch[i];
                    return Err(Error::NonFinite {
                        epoch,
                        window: base + i,
                        detail: format!(
                            "trajectory {} start {} loss {loss}",
                            w.trajectory, w.start
                        ),
                    });
                }
                total += loss;
                for (a, v) in grad_sum.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|v| *v *= inv);
            opt.step(&mut self.state.params, &grad_sum, &mut self.state.adam, lr);
            self.model.load_flat(&self.state.params)?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = optional_eval(&self.model, graphs, val, p, exec)?;
        self.state.scheduler.observe(val_loss.unwrap_or(train_loss));
        self.state.epochs_done = epoch;
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        })
    }
}

/// Input and targets of one training window: a random grid symmetry
/// applied to every frame, then noise on the input frame only.
fn training_window(
    trajectory: &Trajectory,
    start: usize,
    horizon: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Field, Vec<Field>)> {
    let frames = &trajectory.frames()[start..=start + horizon];
    let op = if config.augment {
        let ops = grid_symmetries(frames[0].dims());
        Some(ops[rng.random_range(0..ops.len())].clone())
    } else {
        None
    };
    let transform = |f: &Field| -> Result<Field> {
        match &op {
            Some(op) => op.apply(f),
            None => Ok(f.clone()),
        }
    };
    let input = add_noise(&transform(&frames[0])?, config.noise_amplitude, rng);
    let targets = frames[1..].iter().map(transform).collect::<Result<Vec<_>>>()?;
    Ok((input, targets))
}

fn evaluate_with(
    model: &SurrogateParams,
    graphs: &GraphCache,
    trajectories: &[Trajectory],
    horizon: usize,
    exec: Execution,
) -> Result<f64> {
    let ws = windows(trajectories, horizon);
    if ws.is_empty() {
        return Err(Error::config("no evaluation windows"));
    }
    let losses = exec.map(&ws, |w| {
        let frames = &trajectories[w.trajectory].frames()[w.start..=w.start + horizon];
        multi_step_loss(model, graphs.get(frames[0].dims()), &frames[0], &frames[1..])
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / ws.len() as f64)
}

fn optional_eval(
    model: &SurrogateParams,
    graphs: &GraphCache,
    trajectories: &[Trajectory],
    horizon: usize,
    exec: Execution,
) -> Result<Option<f64>> {
    if trajectories.is_empty() {
        Ok(None)
    } else {
        evaluate_with(model, graphs, trajectories, horizon, exec).map(Some)
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    model: SurrogateParams,
    train: &[Trajectory],
    val: &[Trajectory],
    config: TrainConfig,
    exec: Execution,
) -> Result<(SurrogateParams, Vec<EpochRecord>)> {
    let epochs = config.epochs;
    let mut t = Trainer::new(model, config)?;
    t.run(train, val, epochs, exec, |_| {})?;
    let (model, state) = t.into_parts();
    Ok((model, state.history))
}

/// `epoch,train_loss,val_loss,lr` with an empty cell for a missing loss.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        s += &format!("{},{:e},{},{:e}\n", r.epoch, r.train_loss, val, r.lr);
    }
    s
}
