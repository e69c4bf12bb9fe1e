//! Phase-modulated neural network (PMNN) feedback models.
//!
//! One network per coupling dimension. Each maps the sensor deviation
//! through regular `tanh` layers to a modulation layer whose nodes are
//! multiplied by the normalized phase kernels times the phase velocity `u`,
//! then sums them with an output weight vector that has no bias. The output
//! therefore vanishes identically when `u = 0`.

mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalState, KernelBank};
use crate::dmp::{extract_target_coupling, DmpParams, ExpectedSensorTraces, FeedbackModel, Rollout};
use crate::error::{Error, Result};
use crate::quat::Vec3;
use crate::serde_mat;

pub use train::{
    leave_one_demo_out, nmse, nmse_columns, pmnn_train, pmnn_train_from, EpochMetrics, LodoRow, TrainConfig,
    TrainReport,
};

/// Default: one regular hidden layer of 100 nodes.
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Affine map `W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "serde_mat::row_major")]
    pub weights: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            weights: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }

    fn uniform(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let r = 1.0 / (inp.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-r, r).expect("finite bound");
        Layer {
            weights: DMatrix::from_fn(out, inp, |_, _| dist.sample(rng)),
            bias: DVector::zeros(out),
        }
    }

    /// `X W^T + 1 b^T` for a batch `X` of row vectors.
    fn apply_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weights.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        z
    }
}

/// The network for one coupling dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub hidden: Vec<Layer>,
    /// Last hidden layer (or the input) to the `N` phase-modulated nodes.
    pub modulation: Layer,
    /// `w_cm`, no bias.
    #[serde(with = "serde_mat::vector")]
    pub output: DVector<f64>,
}

impl Network {
    pub fn zeros(input_dim: usize, hidden: &[usize], kernels: usize) -> Self {
        let mut prev = input_dim;
        let mut layers = Vec::with_capacity(hidden.len());
        for &h in hidden {
            layers.push(Layer::zeros(h, prev));
            prev = h;
        }
        Network {
            hidden: layers,
            modulation: Layer::zeros(kernels, prev),
            output: DVector::zeros(kernels),
        }
    }

    /// Symmetric uniform weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn random(input_dim: usize, hidden: &[usize], kernels: usize, rng: &mut impl Rng) -> Self {
        let mut prev = input_dim;
        let mut layers = Vec::with_capacity(hidden.len());
        for &h in hidden {
            layers.push(Layer::uniform(h, prev, rng));
            prev = h;
        }
        let modulation = Layer::uniform(kernels, prev, rng);
        let r = 1.0 / (kernels as f64).sqrt();
        let dist = Uniform::new_inclusive(-r, r).expect("finite bound");
        Network {
            hidden: layers,
            modulation,
            output: DVector::from_fn(kernels, |_, _| dist.sample(rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .unwrap_or(&self.modulation)
            .weights
            .ncols()
    }

    pub fn kernels(&self) -> usize {
        self.output.len()
    }

    /// `[S, h_1, ..., h_L, N]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.hidden.iter().map(|l| l.weights.nrows()));
        s.push(self.kernels());
        s
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter blocks: per hidden layer its weights then bias, then the
    /// modulation weights and bias, then the output weights.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 3);
        for l in &self.hidden {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.modulation.weights.as_slice());
        out.push(self.modulation.bias.as_slice());
        out.push(self.output.as_slice());
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 3);
        for l in &mut self.hidden {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.modulation.weights.as_mut_slice());
        out.push(self.modulation.bias.as_mut_slice());
        out.push(self.output.as_mut_slice());
        out
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim();
        for (i, l) in self.hidden.iter().enumerate() {
            if l.weights.ncols() != prev || l.bias.len() != l.weights.nrows() {
                return Err(Error::shape(format!("hidden layer {i} is inconsistent")));
            }
            prev = l.weights.nrows();
        }
        let m = &self.modulation;
        if m.weights.ncols() != prev
            || m.weights.nrows() != self.output.len()
            || m.bias.len() != self.output.len()
        {
            return Err(Error::shape("modulation layer is inconsistent"));
        }
        Ok(())
    }
}

/// Intermediate values of one batch forward pass.
pub(crate) struct Tape {
    /// `acts[0]` is the input batch, `acts[l]` the (masked) output of hidden
    /// layer `l`.
    acts: Vec<DMatrix<f64>>,
    /// `tanh` outputs before dropout.
    tanh: Vec<DMatrix<f64>>,
    /// Inverted-dropout multipliers (0 or 1/keep) per hidden layer.
    masks: Vec<Option<DMatrix<f64>>>,
    /// Modulation nodes after multiplication with the phase kernels.
    m: DMatrix<f64>,
    pub out: DVector<f64>,
}

/// Batch forward pass. `x` is `B × S`, `phi` is `B × N`. With `dropout`,
/// regular hidden units are dropped at the given rate.
pub(crate) fn forward_batch<R: Rng>(
    net: &Network,
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    dropout: Option<(f64, &mut R)>,
) -> Tape {
    let mut acts = vec![x.clone()];
    let mut tanh = Vec::with_capacity(net.hidden.len());
    let mut masks = Vec::with_capacity(net.hidden.len());
    let mut dropout = dropout.filter(|(rate, _)| *rate > 0.0);
    for layer in &net.hidden {
        let t = layer.apply_rows(acts.last().expect("input present")).map(f64::tanh);
        let (h, mask) = match dropout.as_mut() {
            Some((rate, rng)) => {
                let keep = 1.0 - *rate;
                let mask = DMatrix::from_fn(t.nrows(), t.ncols(), |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (t.component_mul(&mask), Some(mask))
            }
            None => (t.clone(), None),
        };
        tanh.push(t);
        masks.push(mask);
        acts.push(h);
    }
    let m = net
        .modulation
        .apply_rows(acts.last().expect("input present"))
        .component_mul(phi);
    let out = &m * &net.output;
    Tape {
        acts,
        tanh,
        masks,
        m,
        out,
    }
}

/// Gradient of `sum_b dout_b * out_b` with respect to every parameter.
pub(crate) fn backward(net: &Network, tape: &Tape, phi: &DMatrix<f64>, dout: &DVector<f64>) -> Network {
    let output = tape.m.tr_mul(dout);
    let dm = (dout * net.output.transpose()).component_mul(phi);
    let last = tape.acts.last().expect("input present");
    let modulation = Layer {
        weights: dm.tr_mul(last),
        bias: row_sums(&dm),
    };
    let mut dh = &dm * &net.modulation.weights;
    let mut hidden = Vec::with_capacity(net.hidden.len());
    for l in (0..net.hidden.len()).rev() {
        if let Some(mask) = &tape.masks[l] {
            dh.component_mul_assign(mask);
        }
        let dz = dh.zip_map(&tape.tanh[l], |g, t| g * (1.0 - t * t));
        hidden.push(Layer {
            weights: dz.tr_mul(&tape.acts[l]),
            bias: row_sums(&dz),
        });
        if l > 0 {
            dh = &dz * &net.hidden[l].weights;
        }
    }
    hidden.reverse();
    Network {
        hidden,
        modulation,
        output,
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// A trained (or initial) feedback model: one network per output dimension.
///
/// Inputs are multiplied channel-wise by `input_scale` before entering the
/// networks, and network `d` is multiplied by `output_scale[d]`. Output `d`
/// drives coupling axis `axes[d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmnnParams {
    pub activation: Activation,
    pub layer_sizes: Vec<usize>,
    pub bank: KernelBank,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub axes: Vec<usize>,
    pub nets: Vec<Network>,
}

impl PmnnParams {
    pub fn zeros(input_dim: usize, hidden: &[usize], bank: KernelBank, axes: Vec<usize>) -> Result<Self> {
        let nets = axes
            .iter()
            .map(|_| Network::zeros(input_dim, hidden, bank.len()))
            .collect();
        Self::assemble(nets, bank, axes)
    }

    pub fn random(
        input_dim: usize,
        hidden: &[usize],
        bank: KernelBank,
        axes: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let nets = axes
            .iter()
            .map(|_| Network::random(input_dim, hidden, bank.len(), rng))
            .collect();
        Self::assemble(nets, bank, axes)
    }

    /// Builds a model from per-dimension networks with unit scales.
    pub fn assemble(nets: Vec<Network>, bank: KernelBank, axes: Vec<usize>) -> Result<Self> {
        let first = nets
            .first()
            .ok_or_else(|| Error::validation("a PMNN needs at least one output"))?;
        let p = PmnnParams {
            activation: Activation::Tanh,
            layer_sizes: first.layer_sizes(),
            input_scale: vec![1.0; first.input_dim()],
            output_scale: vec![1.0; nets.len()],
            bank,
            axes,
            nets,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.nets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nets.is_empty() {
            return Err(Error::validation("a PMNN needs at least one output"));
        }
        if self.axes.len() != self.nets.len() || self.output_scale.len() != self.nets.len() {
            return Err(Error::shape(format!(
                "{} networks, {} axes, {} output scales",
                self.nets.len(),
                self.axes.len(),
                self.output_scale.len()
            )));
        }
        if let Some(a) = self.axes.iter().find(|a| **a > 2) {
            return Err(Error::validation(format!("coupling axis {a} out of range 0..3")));
        }
        for net in &self.nets {
            net.validate()?;
            if net.layer_sizes() != self.layer_sizes {
                return Err(Error::shape(format!(
                    "network sizes {:?} differ from declared {:?}",
                    net.layer_sizes(),
                    self.layer_sizes
                )));
            }
        }
        if *self.layer_sizes.last().expect("non-empty") != self.bank.len() {
            return Err(Error::shape(format!(
                "{} modulated nodes but {} phase kernels",
                self.layer_sizes.last().expect("non-empty"),
                self.bank.len()
            )));
        }
        if self.input_scale.len() != self.input_dim() {
            return Err(Error::shape("input scale length differs from the input size"));
        }
        let scales_ok = self
            .input_scale
            .iter()
            .chain(&self.output_scale)
            .all(|s| s.is_finite() && *s != 0.0);
        if !scales_ok {
            return Err(Error::validation("scales must be finite and non-zero"));
        }
        Ok(())
    }

    fn scaled_inputs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = inputs.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col *= self.input_scale[j];
        }
        x
    }

    fn check_dataset(&self, data: &FeedbackDataset) -> Result<()> {
        if data.input_dim() != self.input_dim() || data.output_dim() != self.output_dim() {
            return Err(Error::shape(format!(
                "dataset is {}→{}, model is {}→{}",
                data.input_dim(),
                data.output_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        if data.is_empty() {
            return Err(Error::validation("empty feedback dataset"));
        }
        Ok(())
    }

    /// `T × D` predictions for a whole dataset.
    pub fn predict(&self, data: &FeedbackDataset) -> Result<DMatrix<f64>> {
        if data.input_dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "dataset has {} inputs, model expects {}",
                data.input_dim(),
                self.input_dim()
            )));
        }
        let x = self.scaled_inputs(&data.inputs);
        let phi = data.phase_matrix(&self.bank);
        let mut out = DMatrix::zeros(data.len(), self.output_dim());
        for (d, net) in self.nets.iter().enumerate() {
            let t = forward_batch::<crate::rng::Rng>(net, &x, &phi, None);
            out.column_mut(d).copy_from(&(t.out * self.output_scale[d]));
        }
        Ok(out)
    }
}

/// Coupling for one sensor deviation at phase `(p, u)`.
pub fn pmnn_forward(params: &PmnnParams, ds: &DVector<f64>, p: f64, u: f64) -> Result<DVector<f64>> {
    if ds.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "sensor deviation has {} entries, model expects {}",
            ds.len(),
            params.input_dim()
        )));
    }
    let phi = params.bank.phase_modulation(p, u);
    let mut out = DVector::zeros(params.output_dim());
    for (d, net) in params.nets.iter().enumerate() {
        let mut h = ds.component_mul(&DVector::from_column_slice(&params.input_scale));
        for l in &net.hidden {
            h = (&l.weights * h + &l.bias).map(f64::tanh);
        }
        let m = (&net.modulation.weights * h + &net.modulation.bias).component_mul(&phi);
        out[d] = params.output_scale[d] * net.output.dot(&m);
    }
    Ok(out)
}

/// Sum of squared residuals over all rows and output dimensions.
pub fn pmnn_loss(params: &PmnnParams, data: &FeedbackDataset) -> Result<f64> {
    params.check_dataset(data)?;
    let pred = params.predict(data)?;
    Ok((&data.targets - pred).norm_squared())
}

/// Exact gradient of [`pmnn_loss`], one [`Network`]-shaped entry per output.
/// Scales are fixed and receive no gradient.
pub fn pmnn_grad(params: &PmnnParams, data: &FeedbackDataset) -> Result<Vec<Network>> {
    params.check_dataset(data)?;
    let x = params.scaled_inputs(&data.inputs);
    let phi = data.phase_matrix(&params.bank);
    Ok(params
        .nets
        .iter()
        .enumerate()
        .map(|(d, net)| {
            let t = forward_batch::<crate::rng::Rng>(net, &x, &phi, None);
            let s = params.output_scale[d];
            let dout = DVector::from_fn(data.len(), |i, _| {
                -2.0 * s * (data.targets[(i, d)] - s * t.out[i])
            });
            backward(net, &t, &phi, &dout)
        })
        .collect())
}

impl FeedbackModel for PmnnParams {
    fn coupling(&self, deviation: &DVector<f64>, phase: &CanonicalState) -> Vec3 {
        let mut c = Vec3::zeros();
        match pmnn_forward(self, deviation, phase.p, phase.u) {
            Ok(out) => {
                for (d, axis) in self.axes.iter().enumerate() {
                    c[*axis] += out[d];
                }
            }
            Err(e) => log::error!("feedback model rejected its input: {e}"),
        }
        c
    }
}

/// Supervised data for a feedback model: sensor deviations, phases and
/// target couplings, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackDataset {
    /// `T × S` sensor deviations.
    pub inputs: DMatrix<f64>,
    /// `T × 2` columns `p` and `u`.
    pub phases: DMatrix<f64>,
    /// `T × D` coupling targets.
    pub targets: DMatrix<f64>,
}

impl FeedbackDataset {
    pub fn new(inputs: DMatrix<f64>, phases: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        let t = inputs.nrows();
        if phases.nrows() != t || targets.nrows() != t || phases.ncols() != 2 {
            return Err(Error::shape(format!(
                "dataset rows: inputs {t}, phases {}×{}, targets {}",
                phases.nrows(),
                phases.ncols(),
                targets.nrows()
            )));
        }
        let finite = inputs
            .iter()
            .chain(phases.iter())
            .chain(targets.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("dataset contains non-finite entries"));
        }
        Ok(FeedbackDataset {
            inputs,
            phases,
            targets,
        })
    }

    /// Rows of one executed or demonstrated rollout: sensor deviations from
    /// the expected traces, the rollout's phase, and the coupling that
    /// explains its deviation from `nominal`, restricted to `axes`.
    pub fn from_rollout(
        roll: &Rollout,
        nominal: &DmpParams,
        expected: &ExpectedSensorTraces,
        axes: &[usize],
    ) -> Result<Self> {
        if !roll.has_sensors() {
            return Err(Error::validation("rollout carries no sensor traces"));
        }
        if roll.sensor_dim() != expected.sensor_dim() {
            return Err(Error::shape(format!(
                "rollout has {} sensor channels, expected traces {}",
                roll.sensor_dim(),
                expected.sensor_dim()
            )));
        }
        if axes.iter().any(|a| *a >= 3) {
            return Err(Error::validation("coupling axes must be 0, 1 or 2"));
        }
        let coupling = extract_target_coupling(roll, nominal)?;
        let phase = roll.phase_or_reconstruct()?;
        let inputs = &roll.sensors - expected.unroll(roll.len(), roll.dt());
        let phases = DMatrix::from_fn(roll.len(), 2, |i, j| if j == 0 { phase[i].p } else { phase[i].u });
        Self::new(inputs, phases, coupling.select_columns(axes))
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// `T × N` matrix of phase modulation vectors.
    pub fn phase_matrix(&self, bank: &KernelBank) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.len(), bank.len());
        for i in 0..self.len() {
            let row = bank.phase_modulation(self.phases[(i, 0)], self.phases[(i, 1)]);
            phi.row_mut(i).copy_from(&row.transpose());
        }
        phi
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        FeedbackDataset {
            inputs: self.inputs.select_rows(rows),
            phases: self.phases.select_rows(rows),
            targets: self.targets.select_rows(rows),
        }
    }

    /// Stacks datasets row-wise.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a FeedbackDataset>) -> Result<Self> {
        let parts: Vec<&FeedbackDataset> = parts.into_iter().collect();
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("nothing to concatenate"))?;
        let (s, d) = (first.input_dim(), first.output_dim());
        if parts.iter().any(|p| p.input_dim() != s || p.output_dim() != d) {
            return Err(Error::shape("datasets differ in input or output size"));
        }
        let t: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = FeedbackDataset {
            inputs: DMatrix::zeros(t, s),
            phases: DMatrix::zeros(t, 2),
            targets: DMatrix::zeros(t, d),
        };
        let mut row = 0;
        for p in parts {
            let n = p.len();
            out.inputs.rows_mut(row, n).copy_from(&p.inputs);
            out.phases.rows_mut(row, n).copy_from(&p.phases);
            out.targets.rows_mut(row, n).copy_from(&p.targets);
            row += n;
        }
        Ok(out)
    }
}
