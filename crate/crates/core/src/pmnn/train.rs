use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::KernelBank;
use crate::error::{Error, Result};
use crate::rng;

use super::{backward, forward_batch, FeedbackDataset, Network, PmnnParams, DEFAULT_HIDDEN};

const RMS_DECAY: f64 = 0.9;
const RMS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub validation_split: f64,
    pub test_split: f64,
    pub seed: u64,
    /// Refuse datasets with fewer than ten rows per network parameter.
    pub overfit_guard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![DEFAULT_HIDDEN],
            epochs: 100,
            learning_rate: 1e-3,
            dropout: 0.5,
            batch_size: 64,
            validation_split: 0.075,
            test_split: 0.075,
            seed: 0,
            overfit_guard: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!("dropout rate {} not in [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("batch size and epochs must be positive"));
        }
        let held = self.validation_split + self.test_split;
        if self.validation_split < 0.0 || self.test_split < 0.0 || held >= 1.0 {
            return Err(Error::validation("validation and test fractions must leave training data"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden layers must have at least one node"));
        }
        Ok(())
    }
}

/// Metrics after one epoch, averaged over output dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean squared error on the training rows, in normalized target units.
    pub train_loss: f64,
    pub train_nmse: f64,
    pub validation_nmse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: PmnnParams,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch of the kept checkpoint, per output dimension.
    pub best_epoch: Vec<usize>,
    pub train_nmse: f64,
    pub validation_nmse: f64,
    pub test_nmse: f64,
    /// First epoch at which the loss stopped being finite.
    pub diverged: Option<usize>,
}

/// Mean squared error divided by the target variance. `NaN` when the
/// target is constant.
pub fn nmse(pred: &[f64], target: &[f64]) -> f64 {
    let n = target.len() as f64;
    if target.is_empty() {
        return f64::NAN;
    }
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    if var > 0.0 {
        mse / var
    } else {
        f64::NAN
    }
}

/// Per-column NMSE averaged over the columns where it is defined.
pub fn nmse_columns(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let vals: Vec<f64> = (0..target.ncols())
        .map(|d| nmse(pred.column(d).as_slice(), target.column(d).as_slice()))
        .filter(|v| v.is_finite())
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Scale that brings a column to unit spread, or one for flat columns.
fn unit_scale(sd: f64) -> f64 {
    if sd > 1e-12 && sd.is_finite() {
        1.0 / sd
    } else {
        1.0
    }
}

struct Split {
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

fn split_rows(n: usize, config: &TrainConfig) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(config.seed, "pmnn/split"));
    let n_val = (n as f64 * config.validation_split).round() as usize;
    let n_test = (n as f64 * config.test_split).round() as usize;
    let test = idx.split_off(n - n_test);
    let validation = idx.split_off(n - n_test - n_val);
    Split {
        train: idx,
        validation,
        test,
    }
}

struct NetRun {
    net: Network,
    best_epoch: usize,
    /// `(train_loss, train_nmse, validation_nmse)` per completed epoch.
    history: Vec<(f64, f64, f64)>,
    diverged: Option<usize>,
}

fn predict_rows(net: &Network, x: &DMatrix<f64>, phi: &DMatrix<f64>) -> DVector<f64> {
    forward_batch::<rng::Rng>(net, x, phi, None).out
}

/// Trains one network on normalized data.
fn train_net(
    mut net: Network,
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    split: &Split,
    config: &TrainConfig,
    label: &str,
) -> NetRun {
    let mut order_rng = rng::stream(config.seed, &format!("{label}/order"));
    let mut drop_rng = rng::stream(config.seed, &format!("{label}/dropout"));
    let select = |rows: &[usize]| (x.select_rows(rows), phi.select_rows(rows), y.select_rows(rows));
    let (xt, pt, yt) = select(&split.train);
    let (xv, pv, yv) = select(&split.validation);
    let score = |net: &Network| {
        let tr = nmse(predict_rows(net, &xt, &pt).as_slice(), yt.as_slice());
        let va = if split.validation.is_empty() {
            tr
        } else {
            nmse(predict_rows(net, &xv, &pv).as_slice(), yv.as_slice())
        };
        (tr, va)
    };

    let mut cache = net.clone();
    cache.blocks_mut().into_iter().for_each(|b| b.fill(0.0));
    let mut best = net.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.epochs);
    let mut diverged = None;
    let mut order = split.train.clone();

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sse = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (xb, pb, yb) = select(batch);
            let tape = forward_batch(&net, &xb, &pb, Some((config.dropout, &mut drop_rng)));
            let resid = &yb - &tape.out;
            sse += resid.norm_squared();
            let dout = resid * (-2.0 / batch.len() as f64);
            let grad = backward(&net, &tape, &pb, &dout);
            if !grad.is_finite() {
                diverged = Some(epoch);
                break 'epochs;
            }
            for ((p, g), c) in net
                .blocks_mut()
                .into_iter()
                .zip(grad.blocks())
                .zip(cache.blocks_mut())
            {
                for ((p, g), c) in p.iter_mut().zip(g.iter()).zip(c.iter_mut()) {
                    *c = RMS_DECAY * *c + (1.0 - RMS_DECAY) * g * g;
                    *p -= config.learning_rate * g / (c.sqrt() + RMS_EPS);
                }
            }
        }
        let loss = sse / order.len().max(1) as f64;
        if !loss.is_finite() || !net.is_finite() {
            diverged = Some(epoch);
            break;
        }
        let (tr, va) = score(&net);
        history.push((loss, tr, va));
        // A constant target has undefined NMSE; fall back to the loss.
        let s = if va.is_finite() { va } else { loss };
        if s < best_score {
            best_score = s;
            best = net.clone();
            best_epoch = epoch;
        }
    }
    if let Some(e) = diverged {
        log::warn!("{label}: loss diverged at epoch {e}; keeping epoch {best_epoch}");
    }
    NetRun {
        net: best,
        best_epoch,
        history,
        diverged,
    }
}

/// Mini-batch RMSProp on the squared-error loss, one network per target
/// column, each on its own seeded stream. Rows are shuffled once and split
/// into training, validation and test sets; the network with the lowest
/// validation NMSE is kept. Inputs and targets are normalized to unit
/// spread internally and the scales are stored in the returned model.
pub fn pmnn_train(
    data: &FeedbackDataset,
    bank: &KernelBank,
    axes: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_impl(data, bank, axes, config, None)
}

/// Continues training `init` on `data`, keeping its normalization scales
/// and layer sizes (`config.hidden` is ignored).
pub fn pmnn_train_from(data: &FeedbackDataset, init: &PmnnParams, config: &TrainConfig) -> Result<TrainReport> {
    init.validate()?;
    if init.input_dim() != data.input_dim() {
        return Err(Error::shape(format!(
            "model takes {} inputs, data has {}",
            init.input_dim(),
            data.input_dim()
        )));
    }
    train_impl(data, &init.bank, &init.axes, config, Some(init))
}

fn train_impl(
    data: &FeedbackDataset,
    bank: &KernelBank,
    axes: &[usize],
    config: &TrainConfig,
    init: Option<&PmnnParams>,
) -> Result<TrainReport> {
    config.validate()?;
    if axes.len() != data.output_dim() {
        return Err(Error::shape(format!(
            "{} coupling axes for {} target columns",
            axes.len(),
            data.output_dim()
        )));
    }
    let hidden = init.map_or(config.hidden.clone(), |p| p.nets[0].hidden.iter().map(|l| l.weights.nrows()).collect());
    let mut params = PmnnParams::zeros(data.input_dim(), &hidden, bank.clone(), axes.to_vec())?;
    let n_params = params.nets[0].num_params();
    if config.overfit_guard && data.len() < 10 * n_params {
        return Err(Error::validation(format!(
            "{} rows for {n_params} parameters per network; need at least ten per parameter \
             (disable the overfit guard to train anyway)",
            data.len()
        )));
    }
    let split = split_rows(data.len(), config);
    if split.train.is_empty() {
        return Err(Error::validation("no rows left for training"));
    }

    if let Some(p) = init {
        params.input_scale = p.input_scale.clone();
        params.output_scale = p.output_scale.clone();
    } else {
        params.input_scale = (0..data.input_dim())
            .map(|j| unit_scale(std_dev(data.inputs.column(j).iter().copied())))
            .collect();
        params.output_scale = (0..data.output_dim())
            .map(|d| 1.0 / unit_scale(std_dev(data.targets.column(d).iter().copied())))
            .collect();
    }

    let x = params.scaled_inputs(&data.inputs);
    let phi = data.phase_matrix(bank);
    let runs: Vec<NetRun> = (0..data.output_dim())
        .into_par_iter()
        .map(|d| {
            let label = format!("pmnn/net{d}");
            let start = match init {
                Some(p) => p.nets[d].clone(),
                None => Network::random(
                    data.input_dim(),
                    &hidden,
                    bank.len(),
                    &mut rng::stream(config.seed, &format!("{label}/init")),
                ),
            };
            let y = data.targets.column(d) / params.output_scale[d];
            train_net(start, &x, &phi, &y, &split, config, &label)
        })
        .collect();

    let epochs = runs.iter().map(|r| r.history.len()).min().unwrap_or(0);
    let d = runs.len() as f64;
    let metrics = (0..epochs)
        .map(|e| {
            let avg = |f: fn(&(f64, f64, f64)) -> f64| {
                runs.iter().map(|r| f(&r.history[e])).sum::<f64>() / d
            };
            EpochMetrics {
                epoch: e + 1,
                train_loss: avg(|h| h.0),
                train_nmse: avg(|h| h.1),
                validation_nmse: avg(|h| h.2),
            }
        })
        .collect();
    let best_epoch = runs.iter().map(|r| r.best_epoch).collect();
    let diverged = runs.iter().filter_map(|r| r.diverged).min();
    params.nets = runs.into_iter().map(|r| r.net).collect();

    let eval = |rows: &[usize]| -> Result<f64> {
        if rows.is_empty() {
            return Ok(f64::NAN);
        }
        let part = data.select(rows);
        Ok(nmse_columns(&params.predict(&part)?, &part.targets))
    };
    Ok(TrainReport {
        train_nmse: eval(&split.train)?,
        validation_nmse: eval(&split.validation)?,
        test_nmse: eval(&split.test)?,
        params,
        metrics,
        best_epoch,
        diverged,
    })
}

/// One iteration of the leave-one-demonstration-out protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoRow {
    pub held_out: usize,
    pub train_rows: usize,
    pub held_out_rows: usize,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    /// NMSE on the held-out demonstrations.
    pub generalization: f64,
}

/// `demos[setting][k]` is demonstration `k` of a setting. Iteration `k`
/// holds out demonstration `k` of every setting, trains on the pooled rest
/// (split into training, validation and test rows) and scores the held-out
/// demonstrations.
pub fn leave_one_demo_out(
    demos: &[Vec<FeedbackDataset>],
    bank: &KernelBank,
    axes: &[usize],
    config: &TrainConfig,
) -> Result<Vec<LodoRow>> {
    let k = demos
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::validation("no settings given"))?;
    if k < 2 || demos.iter().any(|s| s.len() != k) {
        return Err(Error::validation(
            "every setting needs the same number (at least two) of demonstrations",
        ));
    }
    (0..k)
        .into_par_iter()
        .map(|held| {
            let train_parts = demos
                .iter()
                .flat_map(|s| s.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, d)| d));
            let pooled = FeedbackDataset::concat(train_parts)?;
            let held_out = FeedbackDataset::concat(demos.iter().map(|s| &s[held]))?;
            let cfg = TrainConfig {
                seed: rng::sub_seed(config.seed, &format!("lodo/{held}")),
                ..config.clone()
            };
            let report = pmnn_train(&pooled, bank, axes, &cfg)?;
            let pred = report.params.predict(&held_out)?;
            Ok(LodoRow {
                held_out: held,
                train_rows: pooled.len(),
                held_out_rows: held_out.len(),
                train: report.train_nmse,
                validation: report.validation_nmse,
                test: report.test_nmse,
                generalization: nmse_columns(&pred, &held_out.targets),
            })
        })
        .collect()
}
