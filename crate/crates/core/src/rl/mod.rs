//! Reinforcement learning of feedback models: PI²-CMA on a compressed
//! low-dimensional policy, whose improved rollouts augment the feedback
//! model's training data.

mod pi2;

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dmp::{fit_forcing_term, unroll, Coupling, DmpParams, ExpectedSensorTraces, Plant, Rollout};
use crate::error::{Error, Result};
use crate::pmnn::{pmnn_train, pmnn_train_from, FeedbackDataset, PmnnParams, TrainConfig};
use crate::quat::UnitQuaternion;
use crate::rng;

pub use pi2::{
    block_diagonal, cost_to_go, pi2_cma_update, probabilities, sample_policies, vectorize, CostToGo,
    Pi2Config, Pi2Update, EIGEN_FLOOR,
};

/// Default number of exploration rollouts per iteration.
pub const DEFAULT_SAMPLES: usize = 38;

/// `‖2 log(Q_nr ∘ Q_cr*)‖`: angle between nominal and actual relative
/// orientation.
pub fn step_cost(q_nr: &UnitQuaternion, q_cr: &UnitQuaternion) -> f64 {
    q_nr.angle_to(q_cr)
}

/// Re-encodes an executed trajectory as a primitive of its own, whose
/// forcing weights are the low-dimensional policy.
pub fn compress_rollout(roll: &Rollout, nominal: &DmpParams) -> Result<DmpParams> {
    fit_forcing_term(std::slice::from_ref(roll), &nominal.bank)
}

/// Gaussian search distribution over the forcing weights of a compressed
/// primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct LowDimPolicy {
    pub params: DmpParams,
    /// Covariance over the column-major vectorized `N × 3` weights.
    pub covariance: DMatrix<f64>,
}

impl LowDimPolicy {
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.params.weights
    }

    pub fn sample(&self, k: usize, rng: &mut rng::Rng) -> Result<Vec<DMatrix<f64>>> {
        sample_policies(&self.params.weights, &self.covariance, k, rng)
    }
}

/// Initial exploration covariance: `σ² I` on the weight blocks of `axes`,
/// zero elsewhere, with `σ = fraction * RMS(nominal weights)`.
pub fn initial_covariance(nominal: &DmpParams, axes: &[usize], fraction: f64) -> DMatrix<f64> {
    let n = nominal.weights.nrows();
    let rms = (nominal.weights.norm_squared() / nominal.weights.len().max(1) as f64).sqrt();
    let var = (fraction * rms).powi(2);
    let mut cov = DMatrix::zeros(3 * n, 3 * n);
    for &a in axes {
        for i in 0..n {
            cov[(a * n + i, a * n + i)] = var;
        }
    }
    cov
}

/// Source of fresh, independent plant instances at one fixed setting.
pub trait PlantFactory: Sync {
    fn plant(&self, seed: u64) -> Box<dyn Plant + Send>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    /// Exploration rollouts per iteration.
    pub k: usize,
    pub pi2: Pi2Config,
    pub max_iters: usize,
    /// Stop as soon as ‖J‖₂ of the evaluation rollout is at or below this.
    pub cost_threshold: f64,
    /// Initial exploration std relative to the nominal weights' RMS.
    pub sigma_fraction: f64,
    /// Consecutive non-improving iterations tolerated.
    pub patience: usize,
    /// Copies of each improved rollout added to the training data.
    pub replicate: usize,
    /// Continue training the current model instead of starting afresh.
    pub warm_start: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            k: DEFAULT_SAMPLES,
            pi2: Pi2Config::default(),
            max_iters: 2,
            cost_threshold: f64::NAN,
            sigma_fraction: 0.05,
            patience: 3,
            replicate: 1,
            warm_start: false,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::validation("RL needs at least two samples per iteration"));
        }
        if !(self.cost_threshold >= 0.0) {
            return Err(Error::validation("cost threshold must be set and non-negative"));
        }
        if !(self.sigma_fraction >= 0.0) || self.patience == 0 || self.replicate == 0 {
            return Err(Error::validation("sigma fraction >= 0, patience and replicate >= 1 required"));
        }
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// The cost fell to the threshold.
    Converged,
    MaxIterations,
    /// The cost stopped decreasing; the best model so far is returned.
    Stalled,
}

/// One line of the RL log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlIteration {
    pub iteration: usize,
    /// ‖J‖₂ of the evaluation rollout after retraining.
    pub cost_norm: f64,
    pub improved_cost_norm: f64,
    pub lambda: f64,
    pub sigma_trace: f64,
    pub sample_cost_norms: Vec<f64>,
    pub rollouts: usize,
    pub dataset_rows: usize,
    pub validation_nmse: f64,
    #[serde(skip)]
    pub params: Option<PmnnParams>,
}

#[derive(Clone, Debug)]
pub struct RlReport {
    pub params: PmnnParams,
    pub initial_cost_norm: f64,
    pub iterations: Vec<RlIteration>,
    pub stop: StopReason,
    /// The augmented training data.
    pub dataset: FeedbackDataset,
    /// Rollouts spent before the first iteration.
    pub initial_rollouts: usize,
}

struct Counted<'a> {
    inner: &'a dyn PlantFactory,
    calls: AtomicUsize,
}

impl Counted<'_> {
    fn plant(&self, seed: u64) -> Box<dyn Plant + Send> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.plant(seed)
    }

    fn take(&self) -> usize {
        self.calls.swap(0, Ordering::Relaxed)
    }
}

fn evaluate(
    nominal: &DmpParams,
    model: &PmnnParams,
    expected: &ExpectedSensorTraces,
    env: &Counted<'_>,
    seed: u64,
) -> Result<Rollout> {
    let mut plant = env.plant(seed);
    unroll(nominal, Coupling::Feedback(model), expected, plant.as_mut(), None)
}

/// Refines a pre-trained feedback model at one fixed setting.
///
/// Every iteration compresses the latest adaptive rollout, explores `k`
/// perturbed policies without feedback, runs the PI²-CMA improved policy
/// once, adds its rows to the training data, retrains the model from
/// scratch and evaluates it once: `k + 2` rollouts in all.
pub fn rl_feedback(
    nominal: &DmpParams,
    pmnn: &PmnnParams,
    base: &FeedbackDataset,
    expected: &ExpectedSensorTraces,
    sigma0: Option<DMatrix<f64>>,
    env: &dyn PlantFactory,
    config: &RlConfig,
) -> Result<RlReport> {
    config.validate()?;
    pmnn.validate()?;
    let n = nominal.weights.nrows();
    let mut covariance = sigma0.unwrap_or_else(|| initial_covariance(nominal, &pmnn.axes, config.sigma_fraction));
    if covariance.shape() != (3 * n, 3 * n) {
        return Err(Error::shape(format!("initial covariance must be {0}x{0}", 3 * n)));
    }
    let env = Counted {
        inner: env,
        calls: AtomicUsize::new(0),
    };
    let seed = config.seed;
    let mut model = pmnn.clone();
    let mut latest = evaluate(nominal, &model, expected, &env, rng::sub_seed(seed, "rl/initial"))?;
    let initial_cost_norm = latest.cost_norm();
    let initial_rollouts = env.take();
    let mut dataset = base.clone();
    let mut iterations: Vec<RlIteration> = Vec::new();
    let mut best = (initial_cost_norm, model.clone());
    let mut last_cost = initial_cost_norm;
    let mut stalled = 0;
    let mut stop = StopReason::MaxIterations;
    if initial_cost_norm <= config.cost_threshold {
        stop = StopReason::Converged;
    }

    for it in 1..=config.max_iters {
        if stop == StopReason::Converged {
            break;
        }
        let policy = LowDimPolicy {
            params: compress_rollout(&latest, nominal)?,
            covariance: covariance.clone(),
        };
        let mut r = rng::stream(seed, &format!("rl/{it}/samples"));
        let samples = policy.sample(config.k, &mut r)?;
        let rollouts = samples
            .par_iter()
            .enumerate()
            .map(|(k, w)| {
                let mut plant = env.plant(rng::sub_seed(seed, &format!("rl/{it}/sample/{k}")));
                unroll(&policy.params, Coupling::None, expected, plant.as_mut(), Some(w))
            })
            .collect::<Result<Vec<Rollout>>>()?;
        let costs: Vec<Vec<f64>> = rollouts.iter().map(|r| r.costs.clone()).collect();
        let update = pi2_cma_update(&samples, &costs, policy.mean(), &config.pi2)?;
        covariance = block_diagonal(&update.covariance, n);

        let mut plant = env.plant(rng::sub_seed(seed, &format!("rl/{it}/improved")));
        let improved = unroll(&policy.params, Coupling::None, expected, plant.as_mut(), Some(&update.mean))?;
        if !improved.valid {
            return Err(Error::validation(format!("improved rollout of iteration {it} was aborted")));
        }
        let rows = FeedbackDataset::from_rollout(&improved, nominal, expected, &model.axes)?;
        let mut parts = vec![&dataset];
        parts.extend(std::iter::repeat_n(&rows, config.replicate));
        dataset = FeedbackDataset::concat(parts)?;

        let train = TrainConfig {
            seed: rng::sub_seed(seed, &format!("rl/{it}/train")),
            ..config.train.clone()
        };
        let report = if config.warm_start {
            pmnn_train_from(&dataset, &model, &train)?
        } else {
            pmnn_train(&dataset, &model.bank, &model.axes, &train)?
        };
        model = report.params;
        latest = evaluate(nominal, &model, expected, &env, rng::sub_seed(seed, &format!("rl/{it}/eval")))?;
        let cost = latest.cost_norm();
        iterations.push(RlIteration {
            iteration: it,
            cost_norm: cost,
            improved_cost_norm: improved.cost_norm(),
            lambda: update.lambda,
            sigma_trace: covariance.trace(),
            sample_cost_norms: rollouts.iter().map(Rollout::cost_norm).collect(),
            rollouts: env.take(),
            dataset_rows: dataset.len(),
            validation_nmse: report.validation_nmse,
            params: Some(model.clone()),
        });
        log::info!("RL iteration {it}: |J| = {cost:.5} (improved policy {:.5})", improved.cost_norm());
        if cost < best.0 {
            best = (cost, model.clone());
        }
        if cost <= config.cost_threshold {
            stop = StopReason::Converged;
            break;
        }
        stalled = if cost >= last_cost { stalled + 1 } else { 0 };
        last_cost = cost;
        if stalled >= config.patience {
            log::warn!("RL cost did not decrease for {stalled} iterations; keeping the best model");
            stop = StopReason::Stalled;
            model = best.1.clone();
            break;
        }
    }
    Ok(RlReport {
        params: model,
        initial_cost_norm,
        iterations,
        stop,
        dataset,
        initial_rollouts,
    })
}

#[cfg(test)]
mod tests;
