//! Image-goal visual servoing: image costs, cross-entropy-method action
//! optimization, the global/local action selector, horizon fallback, trial
//! loop and trial statistics.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::MaskSpec;
use crate::image::{FisheyeFrame, FrameMask, CHANNELS};
use crate::par::Exec;
use crate::render::{OraclePredictor, PredictiveModel, Renderer, Rig, SceneObject, SceneSpec, Texture};
use crate::se3::{rotation_angle, ActionTuple, RigidTransform};
use crate::{rng, Error, Result};

pub const SERVO_SCHEMA_VERSION: u32 = 1;

fn check_frames(a: &FisheyeFrame, b: &FisheyeFrame, mask: &FrameMask) -> Result<()> {
    if a.resolution() != b.resolution() || a.resolution() != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "frames of width {} and {} with a width-{} mask",
            a.resolution(),
            b.resolution(),
            mask.width
        )));
    }
    Ok(())
}

/// Sum of `|a - b|` over kept pixels of both lenses and all channels.
fn masked_abs_sum(a: &FisheyeFrame, b: &FisheyeFrame, mask: &FrameMask) -> f64 {
    let mut sum = 0.0;
    for (x, y, keep) in [
        (&a.front, &b.front, &mask.front),
        (&a.back, &b.back, &mask.back),
    ] {
        for c in 0..CHANNELS {
            let (px, py) = (x.plane(c), y.plane(c));
            for (k, _) in keep.iter().enumerate().filter(|(_, &m)| m) {
                sum += (px[k] as f64 - py[k] as f64).abs();
            }
        }
    }
    sum
}

/// Mean absolute difference between predicted and actual frames over steps,
/// kept pixels and channels. Zero when nothing is kept.
pub fn cost_jv(pred: &[FisheyeFrame], actual: &[FisheyeFrame], mask: &FrameMask) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted vs {} actual frames",
            pred.len(),
            actual.len()
        )));
    }
    let mut sum = 0.0;
    for (p, a) in pred.iter().zip(actual) {
        check_frames(p, a, mask)?;
        sum += masked_abs_sum(p, a, mask);
    }
    let n = pred.len() * mask.count() * CHANNELS;
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean absolute difference between every predicted frame and one goal.
pub fn cost_ji(pred: &[FisheyeFrame], target: &FisheyeFrame, mask: &FrameMask) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("no predicted frames".into()));
    }
    let mut sum = 0.0;
    for p in pred {
        check_frames(p, target, mask)?;
        sum += masked_abs_sum(p, target, mask);
    }
    let n = pred.len() * mask.count() * CHANNELS;
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean squared action component: `(1 / 6N) * sum of squares`.
pub fn cost_jr(actions: &[ActionTuple]) -> f64 {
    assert!(!actions.is_empty(), "cost_jr needs at least one action");
    let sum: f64 = actions
        .iter()
        .flat_map(|a| a.to_array())
        .map(|v| v * v)
        .sum();
    sum / (6 * actions.len()) as f64
}

pub fn cost_jp(
    pred: &[FisheyeFrame],
    target: &FisheyeFrame,
    actions: &[ActionTuple],
    mask: &FrameMask,
    k_r: f64,
) -> Result<f64> {
    Ok(cost_ji(pred, target, mask)? + k_r * cost_jr(actions))
}

/// Which cost CEM ranks samples by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Image cost plus action regularization.
    #[default]
    Jp,
    /// Image cost only.
    Ji,
}

/// Symmetric limit on the translation and rotation components of one
/// action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionLimits {
    /// Meters.
    pub pos: f64,
    /// Radians.
    pub rot: f64,
}

impl ActionLimits {
    pub fn admits(&self, a: &ActionTuple) -> bool {
        a.max_position() <= self.pos && a.max_rotation() <= self.rot
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    pub schema_version: u32,
    /// Horizon steps `N`.
    pub horizon: usize,
    /// CEM samples `M` per iteration.
    pub samples: usize,
    /// CEM elites `K`.
    pub elites: usize,
    pub iterations: usize,
    pub k_r: f64,
    /// Selector position threshold, meters.
    pub eta_p: f64,
    /// Selector rotation threshold, radians.
    pub eta_r: f64,
    /// Control rate, Hz.
    pub rate: f64,
    /// Seconds; with `rate` this gives the step budget.
    pub time_limit: f64,
    pub init_std_pos: f64,
    pub init_std_rot: f64,
    pub std_floor: f64,
    pub rank_by: RankBy,
    /// Trials stop once the composed error drops below this.
    pub convergence_eps: f64,
    /// CEM samples are clamped to these bounds.
    pub action_bounds: ActionLimits,
    /// Largest action the feasibility check accepts.
    pub step_caps: ActionLimits,
    /// The workspace box is the room shrunk by this margin on every side.
    pub workspace_margin: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            schema_version: SERVO_SCHEMA_VERSION,
            horizon: 8,
            samples: 20,
            elites: 10,
            iterations: 6,
            k_r: 0.1,
            eta_p: 0.22,
            eta_r: 0.17,
            rate: 2.0,
            time_limit: 15.0,
            init_std_pos: 0.1,
            init_std_rot: 0.2,
            std_floor: 1e-3,
            rank_by: RankBy::Jp,
            convergence_eps: 0.01,
            action_bounds: ActionLimits { pos: 0.5, rot: 0.8 },
            step_caps: ActionLimits { pos: 0.5, rot: 0.8 },
            workspace_margin: 0.2,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.schema_version != SERVO_SCHEMA_VERSION {
            return bad("unsupported servo schema_version");
        }
        if self.horizon == 0 || self.samples == 0 || self.iterations == 0 {
            return bad("horizon, samples and iterations must be positive");
        }
        if self.elites == 0 || self.elites > self.samples {
            return bad("elites must satisfy 1 <= K <= M");
        }
        let positive = [
            self.eta_p,
            self.eta_r,
            self.rate,
            self.time_limit,
            self.init_std_pos,
            self.init_std_rot,
            self.std_floor,
            self.convergence_eps,
            self.action_bounds.pos,
            self.action_bounds.rot,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("thresholds, rates, standard deviations and bounds must be positive");
        }
        if !(self.k_r >= 0.0) || !(self.workspace_margin >= 0.0) {
            return bad("k_r and workspace_margin must be non-negative");
        }
        if !(self.step_caps.pos >= 0.0 && self.step_caps.rot >= 0.0) {
            return bad("step caps must be non-negative");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Control steps in one trial: `rate * time_limit`.
    pub fn step_budget(&self) -> usize {
        (self.rate * self.time_limit).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemResult {
    /// Lowest-cost sequence seen in any iteration.
    pub actions: Vec<ActionTuple>,
    pub cost: f64,
    /// Best-ever cost after each iteration.
    pub history: Vec<f64>,
    /// Final sampling mean.
    pub mean: Vec<ActionTuple>,
}

/// Cross-entropy minimization over `N` actions with a diagonal Gaussian.
///
/// Samples are drawn sequentially from `rng` and clamped to the action
/// bounds; costs are evaluated through `exec` and ranked with ties broken
/// by sample index, so the result does not depend on the thread count.
pub fn cem_minimize<F>(cfg: &ServoConfig, rng: &mut ChaCha8Rng, exec: Exec, cost: F) -> Result<CemResult>
where
    F: Fn(&[ActionTuple]) -> Result<f64> + Sync,
{
    cem_minimize_from(cfg, &CemInit::default_for(cfg), rng, exec, cost)
}

/// Initial sampling distribution, one entry per action component.
#[derive(Clone, Debug, PartialEq)]
pub struct CemInit {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CemInit {
    /// Zero mean with the configured initial deviations.
    pub fn default_for(cfg: &ServoConfig) -> Self {
        let dim = 6 * cfg.horizon;
        Self {
            mean: vec![0.0; dim],
            std: (0..dim)
                .map(|j| if j % 6 < 3 { cfg.init_std_pos } else { cfg.init_std_rot })
                .collect(),
        }
    }
}

pub fn cem_minimize_from<F>(
    cfg: &ServoConfig,
    init: &CemInit,
    rng: &mut ChaCha8Rng,
    exec: Exec,
    cost: F,
) -> Result<CemResult>
where
    F: Fn(&[ActionTuple]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let dim = 6 * cfg.horizon;
    if init.mean.len() != dim || init.std.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "CEM initial distribution has {} / {} entries, expected {dim}",
            init.mean.len(),
            init.std.len()
        )));
    }
    let bound = |j: usize| {
        if j % 6 < 3 {
            cfg.action_bounds.pos
        } else {
            cfg.action_bounds.rot
        }
    };
    let mut mean = init.mean.clone();
    let mut std = init.std.clone();
    let to_actions = |v: &[f64]| -> Vec<ActionTuple> {
        v.chunks(6)
            .map(|c| ActionTuple::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect()
    };

    let mut best: Option<(f64, Vec<ActionTuple>)> = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let samples: Vec<Vec<f64>> = (0..cfg.samples)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        (mean[j] + std[j] * z).clamp(-bound(j), bound(j))
                    })
                    .collect()
            })
            .collect();
        let seqs: Vec<Vec<ActionTuple>> = samples.iter().map(|s| to_actions(s)).collect();
        let costs = exec
            .map(seqs.len(), |i| cost(&seqs[i]))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        if let Some(c) = costs.iter().find(|c| c.is_nan()) {
            return Err(Error::PredictorFailure(format!("cost evaluated to {c}")));
        }
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|(c, _)| costs[top] < *c) {
            best = Some((costs[top], seqs[top].clone()));
        }
        history.push(best.as_ref().map_or(f64::INFINITY, |b| b.0));

        let elites = &order[..cfg.elites];
        let k = elites.len() as f64;
        for j in 0..dim {
            let m = elites.iter().map(|&e| samples[e][j]).sum::<f64>() / k;
            let var = elites
                .iter()
                .map(|&e| (samples[e][j] - m).powi(2))
                .sum::<f64>()
                / k;
            mean[j] = m;
            std[j] = var.sqrt().max(cfg.std_floor);
        }
    }
    let (cost, actions) = best.expect("at least one iteration");
    Ok(CemResult {
        actions,
        cost,
        history,
        mean: to_actions(&mean),
    })
}

/// Ranking cost of one action sequence under a predictor.
pub fn sequence_cost(
    predictor: &dyn PredictiveModel,
    actions: &[ActionTuple],
    target: &FisheyeFrame,
    mask: &FrameMask,
    cfg: &ServoConfig,
) -> Result<f64> {
    let forecast = predictor.predict_masked(actions, Some(mask))?;
    match cfg.rank_by {
        RankBy::Jp => cost_jp(&forecast.frames, target, actions, mask, cfg.k_r),
        RankBy::Ji => cost_ji(&forecast.frames, target, mask),
    }
}

/// CEM over action sequences scored by the predictor's forecast against
/// the goal image.
pub fn cem_optimize(
    predictor: &dyn PredictiveModel,
    target: &FisheyeFrame,
    mask: &FrameMask,
    cfg: &ServoConfig,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<CemResult> {
    if predictor.resolution() != target.resolution() {
        return Err(Error::ResolutionMismatch(
            predictor.resolution(),
            target.resolution(),
        ));
    }
    cem_minimize(cfg, rng, exec, |a| sequence_cost(predictor, a, target, mask, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Global candidate, whole-image cost.
    Env,
    /// Local candidate, region-of-interest cost.
    Obj,
}

/// Uses the local sequence only when every component of every global
/// action is below the thresholds.
pub fn select_action(
    env_seq: &[ActionTuple],
    obj_seq: &[ActionTuple],
    cfg: &ServoConfig,
) -> (Vec<ActionTuple>, Source) {
    let small = env_seq
        .iter()
        .all(|a| a.max_position() < cfg.eta_p && a.max_rotation() < cfg.eta_r);
    if small {
        (obj_seq.to_vec(), Source::Obj)
    } else {
        (env_seq.to_vec(), Source::Env)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fallback {
    /// `index` is 1-based.
    Execute { index: usize, action: ActionTuple },
    Stuck,
}

/// The nearest feasible action of the horizon, scanning from step 1.
pub fn horizon_fallback(seq: &[ActionTuple], feasible: impl Fn(&ActionTuple) -> bool) -> Fallback {
    seq.iter()
        .enumerate()
        .find(|(_, a)| feasible(a))
        .map_or(Fallback::Stuck, |(i, a)| Fallback::Execute {
            index: i + 1,
            action: *a,
        })
}

/// Axis-aligned box of allowed camera positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn from_scene(scene: &SceneSpec, margin: f64) -> Self {
        Self {
            min: scene.room.min.map(|v| v + margin),
            max: scene.room.max.map(|v| v - margin),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Stand-in for a motion planner: the action must respect the step caps
/// and keep the camera inside the workspace.
pub fn feasible(pose: &RigidTransform, a: &ActionTuple, caps: &ActionLimits, ws: &Workspace) -> bool {
    caps.admits(a) && ws.contains(&pose.compose(&a.to_transform()).translation)
}

/// Position error (m), rotation error (rad) and `e_p + 0.1 e_r`.
pub fn pose_errors(pose: &RigidTransform, goal: &RigidTransform) -> (f64, f64, f64) {
    let e_p = (pose.translation - goal.translation).norm();
    let e_r = rotation_angle(&(goal.rotation.transpose() * pose.rotation));
    (e_p, e_r, composed_error(e_p, e_r))
}

pub fn composed_error(e_p: f64, e_r: f64) -> f64 {
    e_p + 0.1 * e_r
}

pub const SUCCESS_POSITION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialMode {
    /// Global candidate only.
    Env,
    /// Global and local candidates with the selector.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Converged,
    Timeout,
    Stuck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Pose before the step.
    pub pose: RigidTransform,
    pub e_p: f64,
    pub e_r: f64,
    pub composed: f64,
    /// Running minimum of `composed` up to and including this step.
    pub best_composed: f64,
    pub env_cost: f64,
    pub obj_cost: Option<f64>,
    /// Largest position and rotation components of the global sequence.
    pub env_max_pos: f64,
    pub env_max_rot: f64,
    pub source: Source,
    /// 1-based horizon index executed, or none when stuck.
    pub executed: Option<usize>,
    pub action: Option<ActionTuple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Errors at the pose of minimum composed error.
    pub e_p: f64,
    pub e_r: f64,
    pub composed: f64,
    pub success: bool,
    /// Control steps executed.
    pub steps: usize,
    pub outcome: Outcome,
    pub final_pose: RigidTransform,
    pub trace: Vec<TraceStep>,
}

impl TrialResult {
    fn from_errors(e_p: f64, e_r: f64, steps: usize, outcome: Outcome, final_pose: RigidTransform, trace: Vec<TraceStep>) -> Self {
        Self {
            e_p,
            e_r,
            composed: composed_error(e_p, e_r),
            success: e_p < SUCCESS_POSITION,
            steps,
            outcome,
            final_pose,
            trace,
        }
    }

    /// One JSON object per step, then a summary line.
    pub fn write_trace(&self, out: &mut impl Write) -> Result<()> {
        for s in &self.trace {
            serde_json::to_writer(&mut *out, &TraceLine::Step(s.clone()))?;
            writeln!(out)?;
        }
        let summary = TrialSummary {
            e_p: self.e_p,
            e_r: self.e_r,
            composed: self.composed,
            success: self.success,
            steps: self.steps,
            outcome: self.outcome,
            final_pose: self.final_pose,
        };
        serde_json::to_writer(&mut *out, &TraceLine::Result(summary))?;
        writeln!(out)?;
        Ok(())
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_trace(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub e_p: f64,
    pub e_r: f64,
    pub composed: f64,
    pub success: bool,
    pub steps: usize,
    pub outcome: Outcome,
    pub final_pose: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Step(TraceStep),
    Result(TrialSummary),
}

/// Reads a trace file back into a result.
pub fn load_trace(path: &Path) -> Result<TrialResult> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut trace = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match parsed {
            TraceLine::Step(s) => trace.push(s),
            TraceLine::Result(s) => {
                return Ok(TrialResult {
                    e_p: s.e_p,
                    e_r: s.e_r,
                    composed: s.composed,
                    success: s.success,
                    steps: s.steps,
                    outcome: s.outcome,
                    final_pose: s.final_pose,
                    trace,
                })
            }
        }
    }
    Err(Error::Manifest {
        line: 0,
        msg: format!("{} has no result line", path.display()),
    })
}

/// Everything a trial needs besides the configuration.
pub struct TrialSetup<'a> {
    /// Scene the robot acts in.
    pub renderer: &'a Renderer,
    pub rig: &'a Rig,
    /// Goal image.
    pub target: FisheyeFrame,
    /// Pose the errors are measured against.
    pub goal: RigidTransform,
    pub start: RigidTransform,
    pub env_mask: FrameMask,
    pub obj_mask: FrameMask,
    pub workspace: Workspace,
}

impl<'a> TrialSetup<'a> {
    /// Goal image rendered in the same scene at `target`; the global mask
    /// keeps the image circle, the local one a centered front region.
    pub fn new(
        renderer: &'a Renderer,
        rig: &'a Rig,
        start: RigidTransform,
        target: RigidTransform,
        cfg: &ServoConfig,
    ) -> Result<Self> {
        let w = rig.width;
        Ok(Self {
            renderer,
            rig,
            target: renderer.render(&target, rig, Exec::Sequential)?,
            goal: target,
            start,
            env_mask: MaskSpec::circle(rig.model.max_radius()).rasterize(w),
            obj_mask: default_obj_mask().rasterize(w),
            workspace: Workspace::from_scene(renderer.scene(), cfg.workspace_margin),
        })
    }
}

/// Centered front region of interest used as the local mask by default.
pub fn default_obj_mask() -> MaskSpec {
    MaskSpec::front_roi(-0.3, -0.3, 0.3, 0.3)
}

/// Closed-loop servoing with the exact renderer as predictive model.
///
/// Each control step runs CEM on the global mask (and, in full mode, on the
/// local mask), picks a sequence with [`select_action`], executes the first
/// feasible action and moves the camera. CEM streams are keyed by
/// `(seed, step, candidate)`.
pub fn run_trial(setup: &TrialSetup, cfg: &ServoConfig, mode: TrialMode, seed: u64, exec: Exec) -> Result<TrialResult> {
    cfg.validate()?;
    let mut pose = setup.start;
    let (mut best_p, mut best_r, mut best) = pose_errors(&pose, &setup.goal);
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut outcome = Outcome::Timeout;

    for step in 0..cfg.step_budget() {
        let (e_p, e_r, composed) = pose_errors(&pose, &setup.goal);
        if composed < best {
            (best_p, best_r, best) = (e_p, e_r, composed);
        }
        if composed < cfg.convergence_eps {
            outcome = Outcome::Converged;
            break;
        }
        let predictor = OraclePredictor::new(setup.renderer, setup.rig, pose, Exec::Sequential);
        let mut rng_env = rng::stream(seed, &[step as u64, 0]);
        let env = cem_optimize(&predictor, &setup.target, &setup.env_mask, cfg, &mut rng_env, exec)?;
        let obj = match mode {
            TrialMode::Env => None,
            TrialMode::Full => {
                let mut rng_obj = rng::stream(seed, &[step as u64, 1]);
                Some(cem_optimize(&predictor, &setup.target, &setup.obj_mask, cfg, &mut rng_obj, exec)?)
            }
        };
        let (seq, source) = match &obj {
            None => (env.actions.clone(), Source::Env),
            Some(o) => select_action(&env.actions, &o.actions, cfg),
        };
        let choice = horizon_fallback(&seq, |a| feasible(&pose, a, &cfg.step_caps, &setup.workspace));
        let max_of = |f: fn(&ActionTuple) -> f64| env.actions.iter().map(f).fold(0.0, f64::max);
        let mut record = TraceStep {
            step,
            pose,
            e_p,
            e_r,
            composed,
            best_composed: best,
            env_cost: env.cost,
            obj_cost: obj.as_ref().map(|o| o.cost),
            env_max_pos: max_of(ActionTuple::max_position),
            env_max_rot: max_of(ActionTuple::max_rotation),
            source,
            executed: None,
            action: None,
        };
        match choice {
            Fallback::Stuck => {
                trace.push(record);
                outcome = Outcome::Stuck;
                break;
            }
            Fallback::Execute { index, action } => {
                record.executed = Some(index);
                record.action = Some(action);
                trace.push(record);
                pose = pose.compose(&action.to_transform());
                steps += 1;
                log::debug!("step {step}: e_p {e_p:.4} e_r {e_r:.4} source {source:?} index {index}");
            }
        }
    }
    if outcome == Outcome::Timeout {
        let (e_p, e_r, composed) = pose_errors(&pose, &setup.goal);
        if composed < best {
            (best_p, best_r) = (e_p, e_r);
        }
        if composed < cfg.convergence_eps {
            outcome = Outcome::Converged;
        }
    }
    Ok(TrialResult::from_errors(best_p, best_r, steps, outcome, pose, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub trials: usize,
    pub success_rate: f64,
    pub mean_e_p: f64,
    pub mean_e_r: f64,
}

impl EvalSummary {
    pub const CSV_HEADER: &'static str = "label,trials,success_rate,mean_e_p,mean_e_r";

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{:.6},{:.6},{:.6}",
            self.trials, self.success_rate, self.mean_e_p, self.mean_e_r
        )
    }
}

/// Success rate and mean errors over trials.
pub fn evaluate<'a>(trials: impl IntoIterator<Item = &'a TrialResult>) -> Result<EvalSummary> {
    let (mut n, mut ok, mut ep, mut er) = (0usize, 0usize, 0.0, 0.0);
    for t in trials {
        n += 1;
        ok += t.success as usize;
        ep += t.e_p;
        er += t.e_r;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let nf = n as f64;
    Ok(EvalSummary {
        trials: n,
        success_rate: ok as f64 / nf,
        mean_e_p: ep / nf,
        mean_e_r: er / nf,
    })
}

/// A goal pose near `start`: uniform direction, translation up to
/// `max_pos` meters, rotation about a uniform axis up to `max_rot` radians.
pub fn random_target<R: Rng + ?Sized>(start: &RigidTransform, max_pos: f64, max_rot: f64, rng: &mut R) -> RigidTransform {
    let unit = |rng: &mut R| loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-9 {
            break v.normalize();
        }
    };
    let t = unit(rng) * rng.random_range(0.0..=max_pos);
    let axis = nalgebra::Unit::new_normalize(unit(rng));
    let r = nalgebra::Rotation3::from_axis_angle(&axis, rng.random_range(0.0..=max_rot));
    start.compose(&RigidTransform::new(*r.matrix(), t))
}

/// A scene for the object-displacement experiment.
#[derive(Clone, Debug)]
pub struct DisplacementScenario {
    /// Scene the goal image was taken in.
    pub original: SceneSpec,
    /// The same scene with the object moved by `displacement`.
    pub displaced: SceneSpec,
    /// Grasp pose relative to the original object.
    pub grasp: RigidTransform,
    /// Grasp pose relative to the moved object.
    pub displaced_grasp: RigidTransform,
    pub start: RigidTransform,
    pub displacement: Vector3<f64>,
    /// Front region of interest around the object in the goal image.
    pub roi: MaskSpec,
}

/// Builds a room with one textured box in front of the grasp pose, moved
/// sideways by `distance` in a seeded direction, and a seeded start pose
/// near the original grasp pose.
pub fn displacement_scenario(seed: u64, distance: f64) -> DisplacementScenario {
    let mut rng = rng::stream(seed, &[0xD15C]);
    let mut scene = SceneSpec::random(&mut rng);
    scene.room.min = [-1.8, -1.4, -1.2];
    scene.room.max = [1.8, 1.4, 2.4];
    let object_center = Vector3::new(0.0, 0.0, 0.65);
    let tex = Texture::Wave {
        a: [0.95, 0.85, 0.1],
        b: [0.1, 0.2, 0.9],
        period: 0.3,
    };
    let object = |c: Vector3<f64>| SceneObject::Box {
        pose: RigidTransform::from_translation(c.x, c.y, c.z),
        size: [0.6, 0.6, 0.3],
        texture: tex.clone(),
    };
    scene.objects = vec![object(object_center)];
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let displacement = Vector3::new(phi.cos(), phi.sin(), 0.0) * distance;
    let mut displaced = scene.clone();
    displaced.objects = vec![object(object_center + displacement)];
    let grasp = RigidTransform::identity();
    let displaced_grasp = RigidTransform::from_translation(displacement.x, displacement.y, displacement.z);
    let start = random_target(&grasp, 0.15, 0.1, &mut rng);
    DisplacementScenario {
        original: scene,
        displaced,
        grasp,
        displaced_grasp,
        start,
        displacement,
        roi: MaskSpec::front_roi(-0.3, -0.3, 0.3, 0.3),
    }
}

impl DisplacementScenario {
    /// Trial setup in the displaced scene with the goal image from the
    /// original one; errors are measured against the displaced grasp pose.
    pub fn setup<'a>(&self, renderer: &'a Renderer, rig: &'a Rig, cfg: &ServoConfig) -> Result<TrialSetup<'a>> {
        let original = Renderer::new(self.original.clone())?;
        Ok(TrialSetup {
            renderer,
            rig,
            target: original.render(&self.grasp, rig, Exec::Sequential)?,
            goal: self.displaced_grasp,
            start: self.start,
            env_mask: MaskSpec::circle(rig.model.max_radius()).rasterize(rig.width),
            obj_mask: self.roi.rasterize(rig.width),
            workspace: Workspace::from_scene(&self.displaced, cfg.workspace_margin),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn uniform(w: usize, v: f32) -> FisheyeFrame {
        let i = Image::filled(w, w, [v; 3]);
        FisheyeFrame::new(i.clone(), i).unwrap()
    }

    fn noise(w: usize, rng: &mut ChaCha8Rng) -> FisheyeFrame {
        let mut img = || Image::from_planes(w, w, (0..3 * w * w).map(|_| rng.random()).collect()).unwrap();
        FisheyeFrame::new(img(), img()).unwrap()
    }

    #[test]
    fn image_cost_examples() {
        let m = FrameMask::all(4);
        let a = vec![uniform(4, 0.3); 3];
        assert_eq!(cost_jv(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(cost_jv(&[uniform(4, 0.0)], &[uniform(4, 1.0)], &m).unwrap(), 1.0);
        assert_eq!(cost_ji(&a, &uniform(4, 0.3), &m).unwrap(), 0.0);
        assert_eq!(cost_ji(&[uniform(4, 0.5)], &uniform(4, 0.25), &m).unwrap(), 0.25);
        assert!(matches!(cost_jv(&a, &a[..2], &m), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            cost_ji(&a, &uniform(5, 0.3), &m),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn half_mask_counts_only_kept_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, t) = (noise(6, &mut rng), noise(6, &mut rng));
        let mut m = FrameMask::all(6);
        for k in 0..36 {
            m.front[k] = k % 6 < 3;
            m.back[k] = k % 6 < 3;
        }
        let mut sum = 0.0;
        for (x, y) in [(&p.front, &t.front), (&p.back, &t.back)] {
            for r in 0..6 {
                for c in 0..3 {
                    let (a, b) = (x.get(r, c), y.get(r, c));
                    sum += (0..3).map(|ch| (a[ch] as f64 - b[ch] as f64).abs()).sum::<f64>();
                }
            }
        }
        let want = sum / (2.0 * 18.0 * 3.0);
        assert!((cost_ji(std::slice::from_ref(&p), &t, &m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn regularization_examples() {
        assert_eq!(cost_jr(&[ActionTuple::zero(); 4]), 0.0);
        assert_eq!(cost_jr(&[ActionTuple::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)]), 1.0);
        let a = [ActionTuple::new(0.1, -0.2, 0.3, 0.05, 0.1, -0.4); 3];
        let scaled: Vec<_> = a
            .iter()
            .map(|x| ActionTuple::from_array(x.to_array().map(|v| 2.5 * v)))
            .collect();
        assert!((cost_jr(&scaled) - 6.25 * cost_jr(&a)).abs() < 1e-15);
    }

    #[test]
    fn combined_cost_examples() {
        let m = FrameMask::all(2);
        // J_i = 0.2 and J_r = 1.
        let pred = [uniform(2, 0.5)];
        let target = uniform(2, 0.7);
        let ones = [ActionTuple::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)];
        let jp = cost_jp(&pred, &target, &ones, &m, 0.1).unwrap();
        assert!((jp - 0.3).abs() < 1e-7);
        assert_eq!(
            cost_jp(&pred, &target, &ones, &m, 0.0).unwrap(),
            cost_ji(&pred, &target, &m).unwrap()
        );
        let half = [ActionTuple::new(0.5, 0.5, 0.5, 0.5, 0.5, 0.5)];
        assert!(cost_jp(&pred, &target, &half, &m, 0.1).unwrap() < jp);
    }

    fn quadratic_cem_hits(seed: u64, cfg: &ServoConfig, star: &[f64]) -> bool {
        let mut rng = rng::stream(seed, &[]);
        let cost = |a: &[ActionTuple]| -> Result<f64> {
            Ok(a.iter()
                .flat_map(|x| x.to_array())
                .zip(star.iter().cycle())
                .map(|(v, s)| (v - s).powi(2))
                .sum())
        };
        let r = cem_minimize(cfg, &mut rng, Exec::Sequential, cost).unwrap();
        let k = (cfg.elites as f64).sqrt();
        r.mean.iter().flat_map(|a| a.to_array()).enumerate().all(|(j, m)| {
            let std = if j % 6 < 3 { cfg.init_std_pos } else { cfg.init_std_rot };
            (m - star[j % 6]).abs() < 2.0 * std / k
        })
    }

    #[test]
    fn cem_finds_quadratic_minimum() {
        let cfg = ServoConfig {
            horizon: 1,
            ..ServoConfig::default()
        };
        let star = [0.05, -0.08, 0.02, 0.1, -0.05, 0.15];
        let hits = (0..20).filter(|&s| quadratic_cem_hits(s, &cfg, &star)).count();
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn cem_best_cost_never_increases_and_is_deterministic() {
        let cfg = ServoConfig {
            horizon: 3,
            ..ServoConfig::default()
        };
        let cost = |a: &[ActionTuple]| -> Result<f64> {
            Ok(a.iter().map(|x| (x.x - 0.2).abs() + x.gamma.powi(2)).sum())
        };
        let run = |exec| cem_minimize(&cfg, &mut rng::stream(4, &[]), exec, cost).unwrap();
        let a = run(Exec::Sequential);
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.history.last(), Some(&a.cost));
        assert_eq!(a, run(Exec::Parallel));
    }

    #[test]
    fn cem_with_all_samples_as_elites_refits_to_the_sample() {
        let cfg = ServoConfig {
            horizon: 1,
            samples: 5,
            elites: 5,
            iterations: 1,
            ..ServoConfig::default()
        };
        let seen = std::sync::Mutex::new(Vec::new());
        let r = cem_minimize(&cfg, &mut rng::stream(2, &[]), Exec::Sequential, |a| {
            seen.lock().unwrap().push(a[0].x);
            Ok(a[0].x)
        })
        .unwrap();
        let seen = seen.into_inner().unwrap();
        let m = seen.iter().sum::<f64>() / 5.0;
        assert!((r.mean[0].x - m).abs() < 1e-15);
    }

    #[test]
    fn nan_cost_is_a_predictor_failure() {
        let cfg = ServoConfig::default();
        let r = cem_minimize(&cfg, &mut rng::stream(0, &[]), Exec::Sequential, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::PredictorFailure(_))));
    }

    fn act(x: f64, gamma: f64) -> ActionTuple {
        ActionTuple::new(x, 0.0, 0.0, 0.0, 0.0, gamma)
    }

    #[test]
    fn selector_examples() {
        let cfg = ServoConfig::default();
        let obj = vec![act(0.01, 0.0); 8];
        assert_eq!(select_action(&[ActionTuple::zero(); 8], &obj, &cfg).1, Source::Obj);
        let mut env = vec![act(0.1, 0.0); 8];
        env[3] = act(0.3, 0.0);
        assert_eq!(select_action(&env, &obj, &cfg), (env.clone(), Source::Env));
        let mut env = vec![act(0.1, 0.0); 8];
        env[5] = act(0.1, 0.2);
        assert_eq!(select_action(&env, &obj, &cfg).1, Source::Env);
    }

    #[test]
    fn fallback_examples() {
        let seq: Vec<_> = (1..=4).map(|i| act(i as f64, 0.0)).collect();
        assert_eq!(
            horizon_fallback(&seq, |_| true),
            Fallback::Execute { index: 1, action: seq[0] }
        );
        assert_eq!(
            horizon_fallback(&seq, |a| a.x > 2.5),
            Fallback::Execute { index: 3, action: seq[2] }
        );
        assert_eq!(horizon_fallback(&seq, |_| false), Fallback::Stuck);
    }

    fn arb_action() -> impl Strategy<Value = ActionTuple> {
        prop::array::uniform6(-0.5f64..0.5).prop_map(ActionTuple::from_array)
    }

    proptest! {
        #[test]
        fn selector_ignores_local_contents(
            env in prop::collection::vec(arb_action(), 4),
            obj1 in prop::collection::vec(arb_action(), 4),
            obj2 in prop::collection::vec(arb_action(), 4),
        ) {
            let cfg = ServoConfig::default();
            let (_, s1) = select_action(&env, &obj1, &cfg);
            let (_, s2) = select_action(&env, &obj2, &cfg);
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn fallback_never_synthesizes(
            seq in prop::collection::vec(arb_action(), 1..9),
            cap in 0.0f64..0.5,
        ) {
            match horizon_fallback(&seq, |a| a.max_position() < cap) {
                Fallback::Stuck => prop_assert!(seq.iter().all(|a| a.max_position() >= cap)),
                Fallback::Execute { index, action } => {
                    prop_assert_eq!(seq[index - 1], action);
                    prop_assert!(seq[..index - 1].iter().all(|a| a.max_position() >= cap));
                }
            }
        }

        #[test]
        fn image_cost_is_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = (noise(5, &mut rng), noise(5, &mut rng));
            let m = FrameMask::all(5);
            prop_assert!(cost_ji(std::slice::from_ref(&p), &t, &m).unwrap() >= 0.0);
            prop_assert_eq!(cost_ji(std::slice::from_ref(&t), &t, &m).unwrap(), 0.0);
        }
    }

    #[test]
    fn evaluation_examples() {
        let trial = |e_p: f64, e_r: f64| TrialResult::from_errors(e_p, e_r, 1, Outcome::Timeout, RigidTransform::identity(), vec![]);
        let perfect = vec![trial(0.0, 0.0); 3];
        assert_eq!(evaluate(&perfect).unwrap().success_rate, 1.0);
        let mixed = [trial(0.01, 0.1), trial(0.2, 0.3), trial(0.04, 0.2), trial(0.06, 0.0)];
        let s = evaluate(&mixed).unwrap();
        assert_eq!(s.success_rate, 0.5);
        assert!((s.mean_e_p - 0.0775).abs() < 1e-15);
        assert!((s.mean_e_r - 0.15).abs() < 1e-15);
        assert!(matches!(evaluate(&[]), Err(Error::EmptyEvaluation)));
        assert_eq!(trial(0.3, 2.0).composed, 0.5);
    }

    #[test]
    fn start_at_target_succeeds_immediately() {
        let scene = SceneSpec::random(&mut ChaCha8Rng::seed_from_u64(3));
        let renderer = Renderer::new(scene.clone()).unwrap();
        let rig = Rig::equidistant(16);
        let pose = scene.random_pose(&mut ChaCha8Rng::seed_from_u64(4), 0.5);
        let cfg = ServoConfig::default();
        let setup = TrialSetup::new(&renderer, &rig, pose, pose, &cfg).unwrap();
        let r = run_trial(&setup, &cfg, TrialMode::Env, 0, Exec::Sequential).unwrap();
        assert!(r.success);
        assert_eq!(r.e_p, 0.0);
        assert_eq!(r.steps, 0);
        assert_eq!(r.outcome, Outcome::Converged);
    }

    #[test]
    fn zero_caps_make_the_robot_stuck() {
        let scene = SceneSpec::random(&mut ChaCha8Rng::seed_from_u64(3));
        let renderer = Renderer::new(scene.clone()).unwrap();
        let rig = Rig::equidistant(16);
        let pose = scene.random_pose(&mut ChaCha8Rng::seed_from_u64(4), 0.5);
        let cfg = ServoConfig {
            step_caps: ActionLimits { pos: 0.0, rot: 0.0 },
            iterations: 1,
            ..ServoConfig::default()
        };
        let target = pose.compose(&RigidTransform::rot_z(0.3));
        let setup = TrialSetup::new(&renderer, &rig, pose, target, &cfg).unwrap();
        let r = run_trial(&setup, &cfg, TrialMode::Env, 0, Exec::Sequential).unwrap();
        assert_eq!(r.outcome, Outcome::Stuck);
        assert_eq!(r.steps, 0);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].executed, None);
    }

    #[test]
    fn trace_round_trips() {
        let step = TraceStep {
            step: 0,
            pose: RigidTransform::rot_x(0.1),
            e_p: 0.1,
            e_r: 0.2,
            composed: 0.12,
            best_composed: 0.12,
            env_cost: 0.05,
            obj_cost: Some(0.01),
            env_max_pos: 0.1,
            env_max_rot: 0.1,
            source: Source::Obj,
            executed: Some(2),
            action: Some(act(0.1, 0.05)),
        };
        let r = TrialResult::from_errors(0.1, 0.2, 1, Outcome::Timeout, RigidTransform::rot_y(0.3), vec![step]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        r.save_trace(&p).unwrap();
        assert_eq!(load_trace(&p).unwrap(), r);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ServoConfig::default();
        assert_eq!(cfg.step_budget(), 30);
        assert_eq!((cfg.horizon, cfg.samples, cfg.elites, cfg.iterations), (8, 20, 10, 6));
        let parsed: ServoConfig = serde_json::from_str("{\"samples\": 30}").unwrap();
        assert_eq!(parsed.samples, 30);
        assert_eq!(parsed.elites, 10);
        assert!(ServoConfig { elites: 21, ..cfg.clone() }.validate().is_err());
        assert!(ServoConfig { horizon: 0, ..cfg.clone() }.validate().is_err());
        assert!(ServoConfig { eta_p: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn random_targets_respect_the_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let start = RigidTransform::new(crate::se3::rpy_matrix(0.3, -0.2, 1.0), Vector3::new(0.5, 0.1, -0.3));
        for _ in 0..1000 {
            let t = random_target(&start, 0.3, 0.5, &mut rng);
            let (e_p, e_r, _) = pose_errors(&t, &start);
            assert!(e_p <= 0.3 + 1e-12 && e_r <= 0.5 + 1e-9);
        }
    }
}
