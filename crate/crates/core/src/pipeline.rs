//! The end-to-end workflow: segment demonstrations, learn primitives, learn
//! feedback models from corrected demonstrations, refine them with RL and
//! evaluate across board settings.
//!
//! Stage functions work in memory; [`Workspace`] runs them as file-based
//! phases.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{KernelBank, DEFAULT_KERNELS};
use crate::dmp::{encode_sensor_traces, fit_forcing_term, DmpParams, ExpectedSensorTraces, Rollout};
use crate::error::{Error, Result};
use crate::io::{self, Trajectory};
use crate::pmnn::{leave_one_demo_out, pmnn_train, FeedbackDataset, LodoRow, PmnnParams, TrainConfig, TrainReport};
use crate::rl::{rl_feedback, RlConfig, RlReport};
use crate::rng;
use crate::segmentation::{reference_spans, segment_demos, AlignmentReport, Demo1D, PrimitiveRule, SegmentationConfig};
use crate::testbed::{
    evaluate_setting, generate_corpus, generate_corrected_demos, nominal_runs, CorpusConfig, EnvSetting,
    EvalStats, PlantConfig, PlantTemplate, Testbed, AXIS_Y, AXIS_Z, CANONICAL_SETTINGS, DEMOS_PER_SETTING,
    EVAL_RUNS, INITIALLY_UNSEEN_SETTING, ROLL_AXIS, SEEN_SETTINGS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentPhase {
    #[serde(flatten)]
    pub params: SegmentationConfig,
    /// How each primitive is located; `{ axis = n }` aligns on position
    /// axis `n`, `"gap"` takes what lies between its neighbors.
    pub rules: Vec<PrimitiveRule>,
}

impl Default for SegmentPhase {
    fn default() -> Self {
        SegmentPhase {
            params: SegmentationConfig::default(),
            rules: vec![PrimitiveRule::Axis(AXIS_Z), PrimitiveRule::Gap, PrimitiveRule::Axis(AXIS_Y)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmpPhase {
    pub kernels: usize,
    /// Nominal executions averaged into the expected sensor traces.
    pub expected_runs: usize,
}

impl Default for DmpPhase {
    fn default() -> Self {
        DmpPhase {
            kernels: DEFAULT_KERNELS,
            expected_runs: DEMOS_PER_SETTING,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackPhase {
    /// Primitives (0-based) that get a feedback model.
    pub primitives: Vec<usize>,
    /// Coupling axes the model drives.
    pub axes: Vec<usize>,
    /// Board settings with corrected demonstrations, degrees.
    pub settings: Vec<f64>,
    pub demos_per_setting: usize,
    pub train: TrainConfig,
    /// Also run the leave-one-demonstration-out protocol.
    pub lodo: bool,
}

impl Default for FeedbackPhase {
    fn default() -> Self {
        FeedbackPhase {
            primitives: vec![1, 2],
            axes: vec![ROLL_AXIS],
            settings: SEEN_SETTINGS.to_vec(),
            demos_per_setting: DEMOS_PER_SETTING,
            train: TrainConfig {
                overfit_guard: false,
                ..TrainConfig::default()
            },
            lodo: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlPhase {
    /// Board setting improved upon, degrees.
    pub setting: f64,
    /// Primitives refined, in order.
    pub primitives: Vec<usize>,
    #[serde(flatten)]
    pub config: RlConfig,
}

/// ‖J‖₂ at which refinement stops early.
pub const DEFAULT_COST_THRESHOLD: f64 = 0.05;

impl Default for RlPhase {
    fn default() -> Self {
        RlPhase {
            setting: INITIALLY_UNSEEN_SETTING,
            primitives: vec![1, 2],
            config: RlConfig {
                cost_threshold: DEFAULT_COST_THRESHOLD,
                replicate: 30,
                warm_start: true,
                train: FeedbackPhase::default().train,
                ..RlConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPhase {
    pub settings: Vec<f64>,
    pub runs: usize,
}

impl Default for EvalPhase {
    fn default() -> Self {
        EvalPhase {
            settings: CANONICAL_SETTINGS.to_vec(),
            runs: EVAL_RUNS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub demos: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            demos: "demos".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Relative paths resolve against the output directory.
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub segmentation: SegmentPhase,
    pub dmp: DmpPhase,
    pub plant: PlantConfig,
    pub feedback: FeedbackPhase,
    pub rl: RlPhase,
    pub eval: EvalPhase,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            segmentation: SegmentPhase::default(),
            dmp: DmpPhase::default(),
            plant: PlantConfig::default(),
            feedback: FeedbackPhase::default(),
            rl: RlPhase::default(),
            eval: EvalPhase::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.feedback.train.validate()?;
        if self.dmp.kernels < 2 || self.dmp.expected_runs == 0 {
            return Err(Error::validation("need at least 2 kernels and 1 expected-trace run"));
        }
        let n = self.segmentation.rules.len();
        for &k in self.feedback.primitives.iter().chain(&self.rl.primitives) {
            if k >= n {
                return Err(Error::validation(format!("primitive {k} does not exist ({n} primitives)")));
            }
        }
        if self.feedback.axes.is_empty() || self.feedback.axes.iter().any(|a| *a >= 3) {
            return Err(Error::validation("feedback axes must be a non-empty subset of 0, 1, 2"));
        }
        if self.feedback.settings.iter().any(|s| *s == 0.0) || self.feedback.settings.is_empty() {
            return Err(Error::validation("feedback settings must be non-empty and exclude the flat board"));
        }
        if self.eval.runs == 0 {
            return Err(Error::validation("evaluation needs at least one run"));
        }
        Ok(())
    }

    /// The simulated plant, seeded from the global seed.
    pub fn testbed(&self) -> Result<Testbed> {
        Testbed::new(PlantConfig {
            seed: rng::sub_seed(self.seed, "plant"),
            ..self.plant.clone()
        })
    }
}

/// Segments of every demonstration, per primitive.
#[derive(Clone, Debug)]
pub struct Segmented {
    /// `primitives[k][l]`: primitive `k` of surviving demonstration `l`.
    pub primitives: Vec<Vec<Rollout>>,
    pub report: SegmentationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub demo: usize,
    pub spans: Vec<(usize, usize)>,
    pub alignments: Vec<AlignmentReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub reference_spans: Vec<(usize, usize)>,
    pub demos: Vec<DemoReport>,
    /// Demonstrations dropped in lenient mode, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// Splits whole-skill demonstrations into primitives. The first demo is
/// the reference. A failing demo is an error unless `lenient`.
pub fn segment_corpus(demos: &[Trajectory], phase: &SegmentPhase, lenient: bool) -> Result<Segmented> {
    if demos.is_empty() {
        return Err(Error::validation("no demonstrations"));
    }
    let signals = demos
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let pos = d
                .positions
                .as_ref()
                .ok_or_else(|| Error::validation(format!("demo {l} has no position columns")))?;
            let rate = 1.0 / d.rollout.dt();
            (0..3)
                .map(|a| Demo1D::from_positions(pos.column(a).iter().copied().collect(), rate, phase.params.smoothing))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let refs = reference_spans(&signals[0], &phase.rules, phase.params.h)?;
    let batch = segment_demos(&signals, &phase.rules, &refs, &phase.params)?;

    let mut per_demo = vec![(0usize, batch.reference_spans.clone())];
    let mut report = SegmentationReport {
        reference_spans: batch.reference_spans.clone(),
        demos: Vec::new(),
        failures: Vec::new(),
    };
    for (idx, res) in batch.results.into_iter().enumerate() {
        match res {
            Ok(seg) => {
                per_demo.push((seg.demo, seg.spans.clone()));
                report.demos.push(DemoReport {
                    demo: seg.demo,
                    spans: seg.spans,
                    alignments: seg.alignments,
                });
            }
            Err(e) if lenient => {
                log::warn!("skipping demo {}: {e}", idx + 1);
                report.failures.push((idx + 1, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let mut primitives = vec![Vec::with_capacity(per_demo.len()); phase.rules.len()];
    for (l, spans) in &per_demo {
        for (k, (s, e)) in spans.iter().enumerate() {
            primitives[k].push(demos[*l].rollout.slice(*s, e + 1)?);
        }
    }
    Ok(Segmented { primitives, report })
}

/// A learned primitive and the sensor traces its nominal execution
/// produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveModel {
    pub params: DmpParams,
    pub expected: ExpectedSensorTraces,
}

/// Fits one primitive per segment set and records expected sensor traces
/// from nominal executions on the flat board.
pub fn learn_primitives(
    segments: &[Vec<Rollout>],
    testbed: &Testbed,
    phase: &DmpPhase,
    seed: u64,
) -> Result<Vec<PrimitiveModel>> {
    let bank = KernelBank::equal_time(phase.kernels)?;
    segments
        .par_iter()
        .enumerate()
        .map(|(k, demos)| {
            let params = fit_forcing_term(demos, &bank)?;
            let runs = nominal_runs(testbed, k, &params, phase.expected_runs, seed)?;
            let expected = encode_sensor_traces(&runs, &bank)?;
            Ok(PrimitiveModel { params, expected })
        })
        .collect()
}

pub fn template(testbed: &Testbed, k: usize, model: &PrimitiveModel, roll_deg: f64) -> Result<Arc<PlantTemplate>> {
    Ok(Arc::new(testbed.template(k, &model.params, EnvSetting::from_degrees(roll_deg))?))
}

/// Corrected demonstrations of one primitive and the model trained on them.
#[derive(Clone, Debug)]
pub struct FeedbackOutcome {
    /// Corrected demonstrations per setting.
    pub demos: Vec<(EnvSetting, Vec<Rollout>)>,
    /// Per setting, per demonstration.
    pub datasets: Vec<Vec<FeedbackDataset>>,
    pub report: TrainReport,
    pub lodo: Option<Vec<LodoRow>>,
}

impl FeedbackOutcome {
    pub fn dataset(&self) -> Result<FeedbackDataset> {
        FeedbackDataset::concat(self.datasets.iter().flatten())
    }
}

pub fn learn_feedback(
    testbed: &Testbed,
    k: usize,
    model: &PrimitiveModel,
    phase: &FeedbackPhase,
    seed: u64,
) -> Result<FeedbackOutcome> {
    let mut demos = Vec::new();
    let mut datasets = Vec::new();
    for &deg in &phase.settings {
        let t = template(testbed, k, model, deg)?;
        let rolls = generate_corrected_demos(
            &t,
            &model.params,
            &model.expected,
            &testbed.config,
            phase.demos_per_setting,
            rng::sub_seed(seed, &format!("corrected/{k}")),
        )?;
        let sets = rolls
            .iter()
            .map(|r| FeedbackDataset::from_rollout(r, &model.params, &model.expected, &phase.axes))
            .collect::<Result<Vec<_>>>()?;
        demos.push((t.setting, rolls));
        datasets.push(sets);
    }
    let all = FeedbackDataset::concat(datasets.iter().flatten())?;
    let train = TrainConfig {
        seed: rng::sub_seed(seed, &format!("train/{k}")),
        ..phase.train.clone()
    };
    let report = pmnn_train(&all, &model.params.bank, &phase.axes, &train)?;
    let lodo = if phase.lodo {
        Some(leave_one_demo_out(&datasets, &model.params.bank, &phase.axes, &train)?)
    } else {
        None
    };
    Ok(FeedbackOutcome {
        demos,
        datasets,
        report,
        lodo,
    })
}

/// RL refinement of one primitive's feedback model at the configured
/// setting.
pub fn refine_feedback(
    testbed: &Testbed,
    k: usize,
    model: &PrimitiveModel,
    pmnn: &PmnnParams,
    base: &FeedbackDataset,
    phase: &RlPhase,
    seed: u64,
) -> Result<RlReport> {
    let t = template(testbed, k, model, phase.setting)?;
    let config = RlConfig {
        seed: rng::sub_seed(seed, &format!("rl/{k}")),
        ..phase.config.clone()
    };
    rl_feedback(&model.params, pmnn, base, &model.expected, None, &t, &config)
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub primitive: usize,
    pub setting: EnvSetting,
    pub no_fb: EvalStats,
    pub fb: Option<EvalStats>,
    pub rl: Option<EvalStats>,
}

pub fn evaluate_primitive(
    testbed: &Testbed,
    k: usize,
    model: &PrimitiveModel,
    fb: Option<&PmnnParams>,
    rl: Option<&PmnnParams>,
    phase: &EvalPhase,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    phase
        .settings
        .par_iter()
        .map(|&deg| {
            let t = template(testbed, k, model, deg)?;
            let s = rng::sub_seed(seed, &format!("eval/{k}"));
            let run = |m: Option<&PmnnParams>| {
                evaluate_setting(&t, &model.params, &model.expected, m.map(|p| p as _), phase.runs, s)
            };
            Ok(EvalRow {
                primitive: k,
                setting: t.setting,
                no_fb: run(None)?,
                fb: fb.map(|m| run(Some(m))).transpose()?,
                rl: rl.map(|m| run(Some(m))).transpose()?,
            })
        })
        .collect()
}

/// Phase names, in execution order.
pub const PHASES: [&str; 7] = ["generate", "segment", "learn-dmp", "learn-fb", "rl", "eval", "unroll"];

/// A pipeline run rooted at an output directory.
pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub lenient: bool,
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

fn prim_name(k: usize) -> String {
    format!("prim_{}", k + 1)
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Workspace {
            root: root.into(),
            config,
            lenient: false,
        })
    }

    /// Named sub-seed of the global seed, logged for reproducibility.
    fn sub_seed(&self, label: &str) -> u64 {
        let s = rng::sub_seed(self.config.seed, label);
        log::info!("sub-seed {label:?} = {s}");
        s
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn demo_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.demos)
    }

    pub fn model_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.models)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports)
    }

    pub fn segment_dir(&self) -> PathBuf {
        self.root.join("segments")
    }

    pub fn primitives_path(&self) -> PathBuf {
        self.model_dir().join("primitives.json")
    }

    pub fn feedback_path(&self, k: usize) -> PathBuf {
        self.model_dir().join(format!("fb_{}.json", prim_name(k)))
    }

    pub fn rl_model_path(&self, k: usize) -> PathBuf {
        self.model_dir().join(format!("fb_rl_{}.json", prim_name(k)))
    }

    pub fn dataset_dir(&self, k: usize) -> PathBuf {
        self.root.join("corrected").join(prim_name(k))
    }

    fn write_text(path: &Path, text: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// Writes the synthetic demonstration corpus.
    pub fn generate(&self) -> Result<Vec<PathBuf>> {
        let demos = generate_corpus(&self.config.corpus, self.sub_seed("corpus"))?;
        let dir = self.demo_dir();
        demos
            .iter()
            .enumerate()
            .map(|(l, d)| {
                let path = dir.join(format!("demo_{l:02}.csv"));
                io::write_trajectory(&path, &d.rollout, Some(&d.positions))?;
                Ok(path)
            })
            .collect()
    }

    fn load_demos(&self) -> Result<Vec<Trajectory>> {
        let dir = self.demo_dir();
        if !dir.is_dir() {
            return Err(Error::MissingArtifact { path: dir, phase: "generate" });
        }
        let files = io::list_trajectories(&dir)?;
        if files.is_empty() {
            return Err(Error::MissingArtifact { path: dir, phase: "generate" });
        }
        files.iter().map(|f| io::read_trajectory(f)).collect()
    }

    pub fn segment(&self) -> Result<SegmentationReport> {
        let demos = self.load_demos()?;
        let seg = segment_corpus(&demos, &self.config.segmentation, self.lenient)?;
        let dir = self.segment_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        }
        for (k, rolls) in seg.primitives.iter().enumerate() {
            for (l, r) in rolls.iter().enumerate() {
                io::write_trajectory(&dir.join(prim_name(k)).join(format!("demo_{l:02}.csv")), r, None)?;
            }
        }
        io::write_json(&self.report_dir().join("segmentation.json"), &seg.report)?;
        Ok(seg.report)
    }

    fn load_segments(&self) -> Result<Vec<Vec<Rollout>>> {
        let n = self.config.segmentation.rules.len();
        (0..n)
            .map(|k| {
                let dir = self.segment_dir().join(prim_name(k));
                if !dir.is_dir() {
                    return Err(Error::MissingArtifact { path: dir, phase: "segment" });
                }
                io::list_trajectories(&dir)?
                    .iter()
                    .map(|f| Ok(io::read_trajectory(f)?.rollout))
                    .collect()
            })
            .collect()
    }

    pub fn learn_dmp(&self) -> Result<Vec<PrimitiveModel>> {
        let segments = self.load_segments()?;
        let testbed = self.config.testbed()?;
        let models = learn_primitives(&segments, &testbed, &self.config.dmp, self.sub_seed("expected"))?;
        io::write_json(&self.primitives_path(), &models)?;
        Ok(models)
    }

    pub fn load_primitives(&self) -> Result<Vec<PrimitiveModel>> {
        io::read_artifact(&self.primitives_path(), "learn-dmp")
    }

    pub fn learn_fb(&self) -> Result<Vec<(usize, FeedbackOutcome)>> {
        let models = self.load_primitives()?;
        let testbed = self.config.testbed()?;
        let phase = &self.config.feedback;
        let mut out = Vec::new();
        for &k in &phase.primitives {
            let outcome = learn_feedback(&testbed, k, &models[k], phase, self.sub_seed("feedback"))?;
            for (setting, rolls) in &outcome.demos {
                for (l, r) in rolls.iter().enumerate() {
                    let path = self.dataset_dir(k).join(setting.tag()).join(format!("demo_{l:02}.csv"));
                    io::write_trajectory(&path, r, None)?;
                }
            }
            io::write_json(&self.feedback_path(k), &outcome.report.params)?;
            let mut text = String::from("epoch,train_loss,train_nmse,validation_nmse\n");
            for m in &outcome.report.metrics {
                text += &csv_line(&[
                    m.epoch.to_string(),
                    m.train_loss.to_string(),
                    m.train_nmse.to_string(),
                    m.validation_nmse.to_string(),
                ]);
            }
            Self::write_text(&self.report_dir().join(format!("train_{}.csv", prim_name(k))), &text)?;
            if let Some(rows) = &outcome.lodo {
                let mut text = String::from("held_out,train_rows,held_out_rows,train,validation,test,generalization\n");
                for r in rows {
                    text += &csv_line(&[
                        r.held_out.to_string(),
                        r.train_rows.to_string(),
                        r.held_out_rows.to_string(),
                        r.train.to_string(),
                        r.validation.to_string(),
                        r.test.to_string(),
                        r.generalization.to_string(),
                    ]);
                }
                Self::write_text(&self.report_dir().join(format!("lodo_{}.csv", prim_name(k))), &text)?;
            }
            out.push((k, outcome));
        }
        Ok(out)
    }

    /// The corrected-demonstration dataset of primitive `k`, rebuilt from
    /// the saved demonstrations.
    fn load_dataset(&self, k: usize, model: &PrimitiveModel) -> Result<FeedbackDataset> {
        let mut parts = Vec::new();
        for &deg in &self.config.feedback.settings {
            let dir = self.dataset_dir(k).join(EnvSetting::from_degrees(deg).tag());
            if !dir.is_dir() {
                return Err(Error::MissingArtifact { path: dir, phase: "learn-fb" });
            }
            for f in io::list_trajectories(&dir)? {
                let roll = io::read_trajectory(&f)?.rollout;
                parts.push(FeedbackDataset::from_rollout(&roll, &model.params, &model.expected, &self.config.feedback.axes)?);
            }
        }
        FeedbackDataset::concat(&parts)
    }

    pub fn rl(&self) -> Result<Vec<(usize, RlReport)>> {
        let models = self.load_primitives()?;
        let testbed = self.config.testbed()?;
        let mut out = Vec::new();
        for &k in &self.config.rl.primitives {
            let pmnn: PmnnParams = io::read_artifact(&self.feedback_path(k), "learn-fb")?;
            let base = self.load_dataset(k, &models[k])?;
            let report = refine_feedback(&testbed, k, &models[k], &pmnn, &base, &self.config.rl, self.sub_seed("rl"))?;
            let mut log = String::new();
            for it in &report.iterations {
                log += &serde_json::to_string(it)?;
                log.push('\n');
                if let Some(p) = &it.params {
                    io::write_json(
                        &self.model_dir().join("checkpoints").join(format!("rl_{}_iter{}.json", prim_name(k), it.iteration)),
                        p,
                    )?;
                }
            }
            Self::write_text(&self.report_dir().join(format!("rl_{}.jsonl", prim_name(k))), &log)?;
            io::write_json(&self.rl_model_path(k), &report.params)?;
            out.push((k, report));
        }
        Ok(out)
    }

    /// Evaluation table for every primitive with a feedback model (or every
    /// primitive when none has been trained).
    pub fn eval(&self) -> Result<Vec<EvalRow>> {
        let models = self.load_primitives()?;
        let testbed = self.config.testbed()?;
        let load = |p: PathBuf| -> Result<Option<PmnnParams>> {
            if p.exists() {
                io::read_json(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut prims: Vec<usize> = self.config.feedback.primitives.clone();
        if prims.iter().all(|k| !self.feedback_path(*k).exists()) {
            prims = (0..models.len()).collect();
        }
        let mut rows = Vec::new();
        for k in prims {
            let fb = load(self.feedback_path(k))?;
            let rl = load(self.rl_model_path(k))?;
            rows.extend(evaluate_primitive(
                &testbed,
                k,
                &models[k],
                fb.as_ref(),
                rl.as_ref(),
                &self.config.eval,
                self.sub_seed("eval"),
            )?);
        }
        let has_fb = rows.iter().any(|r| r.fb.is_some());
        let has_rl = rows.iter().any(|r| r.rl.is_some());
        let mut header = vec!["primitive", "roll_deg", "role", "no_fb_mean", "no_fb_std"];
        if has_fb {
            header.extend(["fb_mean", "fb_std"]);
        }
        if has_rl {
            header.extend(["fb_rl_mean", "fb_rl_std"]);
        }
        let mut text = csv_line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
        for r in &rows {
            let mut f = vec![
                (r.primitive + 1).to_string(),
                r.setting.roll_deg.to_string(),
                serde_json::to_value(r.setting.label)?.as_str().unwrap_or_default().to_string(),
                r.no_fb.mean.to_string(),
                r.no_fb.std.to_string(),
            ];
            for (present, stats) in [(has_fb, &r.fb), (has_rl, &r.rl)] {
                if present {
                    match stats {
                        Some(s) => f.extend([s.mean.to_string(), s.std.to_string()]),
                        None => f.extend([String::new(), String::new()]),
                    }
                }
            }
            text += &csv_line(&f);
        }
        Self::write_text(&self.report_dir().join("eval.csv"), &text)?;
        Ok(rows)
    }

    /// Executes every primitive in sequence at one setting, with the best
    /// available feedback model, and writes the trajectories.
    pub fn unroll(&self, roll_deg: f64) -> Result<Vec<PathBuf>> {
        let models = self.load_primitives()?;
        let testbed = self.config.testbed()?;
        let mut paths = Vec::new();
        for (k, model) in models.iter().enumerate() {
            let fb: Option<PmnnParams> = [self.rl_model_path(k), self.feedback_path(k)]
                .into_iter()
                .find(|p| p.exists())
                .map(|p| io::read_json(&p))
                .transpose()?;
            let t = template(&testbed, k, model, roll_deg)?;
            let mut plant = t.instance(self.sub_seed(&format!("unroll/{k}")));
            let coupling = match &fb {
                Some(m) => crate::dmp::Coupling::Feedback(m),
                None => crate::dmp::Coupling::None,
            };
            let roll = crate::dmp::unroll(&model.params, coupling, &model.expected, &mut plant, None)?;
            let path = self
                .report_dir()
                .join("unroll")
                .join(format!("{}_{}.csv", prim_name(k), t.setting.tag()));
            io::write_trajectory(&path, &roll, None)?;
            log::info!("{} at {}: |J| = {:.5}", prim_name(k), t.setting.tag(), roll.cost_norm());
            paths.push(path);
        }
        Ok(paths)
    }

    /// All phases up to and including evaluation.
    pub fn run_all(&self) -> Result<Vec<EvalRow>> {
        self.generate()?;
        self.segment()?;
        self.learn_dmp()?;
        self.learn_fb()?;
        self.rl()?;
        self.eval()
    }
}
