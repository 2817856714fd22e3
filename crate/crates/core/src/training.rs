//! Loss functions and the supervised training loop for the NN approximations.
//!
//! Supervised losses are mean squared errors against the optimal solver
//! solutions: the first input for the plain head, the full reconstructed
//! sequence for the Laguerre head. The constraints-informed (ConInf) variant
//! adds a penalty on one-step state-box violations of the network's first
//! input, differentiated through the plant's input gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    clamp, clamp_grad, AdamW, AdamWConfig, ClampBounds, ForwardCache, LaguerreHead, MlpParams,
    Mode,
};
use crate::plant::{BoxSet, PlantModel};
use crate::sampling::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    Supervised,
    ConInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    Nmpc,
    LagNmpc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training fraction of the dataset; the rest is validation.
    pub split: f64,
    /// Diagonal of the violation scaling matrix.
    pub gamma: Vec<f64>,
    pub loss_mode: LossMode,
    pub head_mode: HeadMode,
    pub hidden_layers: usize,
    pub hidden_nodes: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 1024,
            split: 0.7,
            gamma: vec![1.0, 0.1],
            loss_mode: LossMode::Supervised,
            head_mode: HeadMode::LagNmpc,
            hidden_layers: 2,
            hidden_nodes: 20,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidParameter("split must lie in (0,1)".into()));
        }
        if self.gamma.iter().any(|&g| g < 0.0) {
            return Err(Error::InvalidParameter("gamma must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.hidden_layers == 0 || self.hidden_nodes == 0 {
            return Err(Error::InvalidParameter(
                "network needs at least one hidden layer and node".into(),
            ));
        }
        Ok(())
    }
}

/// A training minibatch: flat states plus the supervision targets.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub xs: Vec<f64>,
    pub state_dim: usize,
    /// Optimal first inputs, one per sample.
    pub u_star: Vec<f64>,
    /// Optimal full sequences (flat sample x N), required by the Laguerre head.
    pub sequences: Option<Vec<f64>>,
    pub horizon: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.u_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_star.is_empty()
    }

    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        let state_dim = ds.records.first().map_or(2, |r| r.x.len());
        let mut b = Batch {
            state_dim,
            horizon: ds.horizon,
            sequences: Some(Vec::new()),
            ..Default::default()
        };
        for &i in indices {
            let r = &ds.records[i];
            b.xs.extend_from_slice(&r.x);
            b.u_star.push(r.u_star);
            b.sequences.as_mut().unwrap().extend_from_slice(&r.u_sequence);
        }
        b
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset("empty training batch".into()));
        }
        Ok(())
    }
}

/// Mean squared error between the optimal first inputs and the plain head.
pub fn loss_supervised_nmpc(
    params: &mut MlpParams,
    batch: &Batch,
    bounds: &ClampBounds,
    mode: Mode,
) -> Result<f64> {
    batch.check_nonempty()?;
    let n = batch.len();
    let xi = params.trunk_forward(&batch.xs, n, mode, None)?;
    let mut acc = 0.0;
    for (b, &target) in batch.u_star.iter().enumerate() {
        let u = clamp(xi[b], bounds.u_min, bounds.u_max);
        acc += (u - target) * (u - target);
    }
    Ok(acc / n as f64)
}

/// Mean squared error over the full reconstructed input sequences.
pub fn loss_supervised_lagnmpc(
    params: &mut MlpParams,
    head: &LaguerreHead,
    batch: &Batch,
    bounds: &ClampBounds,
    mode: Mode,
) -> Result<f64> {
    batch.check_nonempty()?;
    let labels = batch
        .sequences
        .as_ref()
        .ok_or_else(|| Error::EmptyDataset("batch lacks sequence labels".into()))?;
    let n = batch.len();
    let eta = params.trunk_forward(&batch.xs, n, mode, None)?;
    let m = head.m;
    let mut acc = 0.0;
    for b in 0..n {
        for i in 0..head.n {
            let u = clamp(
                head.row_dot(i, &eta[b * m..(b + 1) * m]) + head.u_ss,
                bounds.u_min,
                bounds.u_max,
            );
            let e = u - labels[b * head.n + i];
            acc += e * e;
        }
    }
    Ok(acc / n as f64)
}

fn violation_vector(state_box: &BoxSet, x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(state_box.lower.iter().zip(&state_box.upper))
        .map(|(v, (lo, hi))| (v - hi).max(0.0) + (v - lo).min(0.0))
        .collect()
}

/// Constraints-informed penalty: scaled squared one-step box violations of
/// the network's first input, averaged over the batch.
pub fn loss_coninf(
    params: &mut MlpParams,
    head: Option<&LaguerreHead>,
    batch: &Batch,
    plant: &dyn PlantModel,
    state_box: &BoxSet,
    gamma: &[f64],
    bounds: &ClampBounds,
    mode: Mode,
) -> Result<f64> {
    batch.check_nonempty()?;
    let n = batch.len();
    let nx = batch.state_dim;
    let xi = params.trunk_forward(&batch.xs, n, mode, None)?;
    let out = params.output_dim();
    let mut acc = 0.0;
    for b in 0..n {
        let raw = match head {
            Some(h) => h.row_dot(0, &xi[b * out..(b + 1) * out]) + h.u_ss,
            None => xi[b * out],
        };
        let u = clamp(raw, bounds.u_min, bounds.u_max);
        let xplus = plant.step(&batch.xs[b * nx..(b + 1) * nx], u);
        let v = violation_vector(state_box, &xplus);
        acc += v.iter().zip(gamma).map(|(vi, g)| g * vi * vi).sum::<f64>();
    }
    Ok(acc / n as f64)
}

/// Total loss per the configured mode: supervised, plus the ConInf penalty.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    params: &mut MlpParams,
    head: Option<&LaguerreHead>,
    batch: &Batch,
    cfg: &TrainConfig,
    plant: &dyn PlantModel,
    state_box: &BoxSet,
    bounds: &ClampBounds,
    mode: Mode,
) -> Result<f64> {
    let sup = match cfg.head_mode {
        HeadMode::Nmpc => loss_supervised_nmpc(params, batch, bounds, mode)?,
        HeadMode::LagNmpc => {
            let h = head.ok_or_else(|| {
                Error::InvalidParameter("laguerre head required for LagNMPC training".into())
            })?;
            loss_supervised_lagnmpc(params, h, batch, bounds, mode)?
        }
    };
    match cfg.loss_mode {
        LossMode::Supervised => Ok(sup),
        LossMode::ConInf => {
            let pen = loss_coninf(
                params, head, batch, plant, state_box, &cfg.gamma, bounds, mode,
            )?;
            Ok(sup + pen)
        }
    }
}

/// Loss and flat parameter gradient for one train-mode minibatch.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient(
    params: &mut MlpParams,
    head: Option<&LaguerreHead>,
    batch: &Batch,
    cfg: &TrainConfig,
    plant: &dyn PlantModel,
    state_box: &BoxSet,
    bounds: &ClampBounds,
) -> Result<(f64, Vec<f64>)> {
    batch.check_nonempty()?;
    let n = batch.len();
    let nx = batch.state_dim;
    let out = params.output_dim();
    let mut cache = ForwardCache::default();
    let xi = params.trunk_forward(&batch.xs, n, Mode::Train, Some(&mut cache))?;
    let mut dxi = vec![0.0; n * out];
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;

    match cfg.head_mode {
        HeadMode::Nmpc => {
            for b in 0..n {
                let raw = xi[b * out];
                let u = clamp(raw, bounds.u_min, bounds.u_max);
                let e = u - batch.u_star[b];
                loss += e * e * inv_n;
                dxi[b * out] += 2.0 * e * inv_n * clamp_grad(raw, bounds.u_min, bounds.u_max);
            }
        }
        HeadMode::LagNmpc => {
            let h = head.ok_or_else(|| {
                Error::InvalidParameter("laguerre head required for LagNMPC training".into())
            })?;
            let labels = batch
                .sequences
                .as_ref()
                .ok_or_else(|| Error::EmptyDataset("batch lacks sequence labels".into()))?;
            for b in 0..n {
                let eta = &xi[b * out..(b + 1) * out];
                for i in 0..h.n {
                    let raw = h.row_dot(i, eta) + h.u_ss;
                    let u = clamp(raw, bounds.u_min, bounds.u_max);
                    let e = u - labels[b * h.n + i];
                    loss += e * e * inv_n;
                    let g = 2.0 * e * inv_n * clamp_grad(raw, bounds.u_min, bounds.u_max);
                    for (j, &lij) in h.row(i).iter().enumerate() {
                        dxi[b * out + j] += g * lij;
                    }
                }
            }
        }
    }

    if cfg.loss_mode == LossMode::ConInf {
        for b in 0..n {
            let x = &batch.xs[b * nx..(b + 1) * nx];
            let eta = &xi[b * out..(b + 1) * out];
            let raw = match (cfg.head_mode, head) {
                (HeadMode::LagNmpc, Some(h)) => h.row_dot(0, eta) + h.u_ss,
                _ => eta[0],
            };
            let u = clamp(raw, bounds.u_min, bounds.u_max);
            let xplus = plant.step(x, u);
            let v = violation_vector(state_box, &xplus);
            loss += v
                .iter()
                .zip(&cfg.gamma)
                .map(|(vi, g)| g * vi * vi * inv_n)
                .sum::<f64>();
            let dfdu = plant.input_gradient(x);
            let mut du = 0.0;
            for j in 0..nx {
                du += 2.0 * cfg.gamma[j] * v[j] * dfdu[j] * inv_n;
            }
            du *= clamp_grad(raw, bounds.u_min, bounds.u_max);
            match (cfg.head_mode, head) {
                (HeadMode::LagNmpc, Some(h)) => {
                    for (j, &l0j) in h.row(0).iter().enumerate() {
                        dxi[b * out + j] += du * l0j;
                    }
                }
                _ => dxi[b * out] += du,
            }
        }
    }

    let grad = params.backward(&cache, &dxi)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Supervised component of the validation loss.
    pub loss_supervised: f64,
    /// ConInf component of the validation loss (zero in Supervised mode).
    pub loss_coninf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

/// Deterministic shuffled split: first `split` fraction trains, rest validates.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * split).round().max(1.0) as usize;
    let cut = cut.min(n);
    let val = idx.split_off(cut);
    (idx, val)
}

/// Train an MLP on the dataset per the reference protocol: shuffled split,
/// minibatch AdamW, per-epoch train/validation records.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    plant: &dyn PlantModel,
    state_box: &BoxSet,
    bounds: &ClampBounds,
    head: Option<&LaguerreHead>,
) -> Result<(MlpParams, TrainHistory)> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset("cannot train on an empty dataset".into()));
    }
    if cfg.head_mode == HeadMode::LagNmpc && head.is_none() {
        return Err(Error::InvalidParameter(
            "laguerre head required for LagNMPC training".into(),
        ));
    }
    let state_dim = dataset.records[0].x.len();
    let out_dim = match cfg.head_mode {
        HeadMode::Nmpc => 1,
        HeadMode::LagNmpc => head.unwrap().m,
    };
    let mut params = MlpParams::init(
        state_dim,
        &vec![cfg.hidden_nodes; cfg.hidden_layers],
        out_dim,
        cfg.seed,
    );
    let mut opt = AdamW::new(&params, cfg.optimizer.clone())?;

    let (train_idx, val_idx) = split_indices(dataset.records.len(), cfg.split, cfg.seed);
    let mut warnings = Vec::new();
    let batch_size = if cfg.batch_size > train_idx.len() {
        warnings.push(format!(
            "batch size {} exceeds training set size {}; clamped",
            cfg.batch_size,
            train_idx.len()
        ));
        train_idx.len()
    } else {
        cfg.batch_size
    };
    let val_batch = if val_idx.is_empty() {
        None
    } else {
        Some(Batch::from_dataset(dataset, &val_idx))
    };

    let mut order = train_idx;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch = Batch::from_dataset(dataset, chunk);
            let (loss, grad) =
                loss_and_gradient(&mut params, head, &batch, cfg, plant, state_box, bounds)?;
            opt.step(&mut params, &grad)?;
            train_loss += loss;
            batches += 1;
        }
        train_loss /= batches.max(1) as f64;

        let (val_loss, sup, pen) = match &val_batch {
            Some(vb) => {
                let sup = match cfg.head_mode {
                    HeadMode::Nmpc => loss_supervised_nmpc(&mut params, vb, bounds, Mode::Infer)?,
                    HeadMode::LagNmpc => loss_supervised_lagnmpc(
                        &mut params,
                        head.unwrap(),
                        vb,
                        bounds,
                        Mode::Infer,
                    )?,
                };
                let pen = if cfg.loss_mode == LossMode::ConInf {
                    loss_coninf(
                        &mut params,
                        head,
                        vb,
                        plant,
                        state_box,
                        &cfg.gamma,
                        bounds,
                        Mode::Infer,
                    )?
                } else {
                    0.0
                };
                (sup + pen, sup, pen)
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            loss_supervised: sup,
            loss_coninf: pen,
        });
    }
    Ok((params, TrainHistory { epochs, warnings }))
}

/// Write the per-epoch history as delimited text.
pub fn write_history(
    history: &TrainHistory,
    path: &std::path::Path,
    header_lines: &[String],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header_lines {
        writeln!(f, "# {line}")?;
    }
    for w in &history.warnings {
        writeln!(f, "# warning: {w}")?;
    }
    writeln!(f, "epoch,train_loss,val_loss,loss_supervised,loss_coninf")?;
    for e in &history.epochs {
        writeln!(
            f,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            e.epoch, e.train_loss, e.val_loss, e.loss_supervised, e.loss_coninf
        )?;
    }
    Ok(())
}
