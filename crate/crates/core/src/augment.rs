//! Dataset ingestion, subsequence slicing, randomized virtual camera
//! rotation of image/action slices, image masks, and augmented-dataset
//! export.
//!
//! A dataset is a directory holding `manifest.jsonl` and PNG frames. Each
//! manifest line is one record:
//!
//! ```text
//! {"schema_version":1,"seq":0,"session":"run-a","t":0.0,
//!  "img_front":"frames/00000000_front.png","img_back":"frames/00000000_back.png",
//!  "delta":[r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz]}
//! ```
//!
//! `delta` is the pose of the next record's robot base expressed in this
//! record's base frame. A wheeled record may instead carry
//! `"command":{"v":..,"omega":..,"dt":..}`, converted with
//! [`unicycle_delta`] on load. The last record of a session carries one as
//! well; it is never used. Image paths are relative to the manifest.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow::VcrPlan;
use crate::image::{FisheyeFrame, FrameMask, Lens};
use crate::par::Exec;
use crate::projection::{coordinate_grid, ProjectionModel};
use crate::render::{Renderer, Rig};
use crate::se3::{
    default_lens_transform, expand_action, transform_to_action, unicycle_delta, ActionTuple,
    RigidTransform, RotationMode, RotationSampler,
};
use crate::{rng, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MASK_SCHEMA_VERSION: u32 = 1;

/// Rotation draws allowed before giving up on a slice whose actions keep
/// landing on the pitch singularity.
const MAX_RESAMPLES: usize = 64;

/// Teleoperation command of a wheeled robot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub v: f64,
    pub omega: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub seq: u64,
    pub session: String,
    pub timestamp: f64,
    pub img_front: PathBuf,
    pub img_back: PathBuf,
    /// Pose change to the next record, robot-base frame.
    pub action_delta: RigidTransform,
    /// The command `action_delta` was derived from, if any.
    pub command: Option<Command>,
}

impl DatasetRecord {
    pub fn load_frame(&self) -> Result<FisheyeFrame> {
        FisheyeFrame::load_pair(&self.img_front, &self.img_back)
    }

    /// Planar motion: no z translation, roll or pitch in the delta.
    pub fn is_wheeled(&self, tol: f64) -> bool {
        match transform_to_action(&self.action_delta) {
            Ok(a) => a.z.abs().max(a.alpha.abs()).max(a.beta.abs()) <= tol,
            Err(_) => false,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    schema_version: Option<u32>,
    #[serde(default)]
    seq: Option<u64>,
    #[serde(default)]
    session: Option<String>,
    t: f64,
    img_front: PathBuf,
    img_back: PathBuf,
    #[serde(default)]
    delta: Option<[f64; 12]>,
    #[serde(default)]
    command: Option<Command>,
}

/// One teleoperated run of a wheeled robot through a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Drive {
    pub session: String,
    /// Robot base pose of the first record.
    pub start: RigidTransform,
    /// One command per record; the last one is recorded but never executed.
    pub commands: Vec<Command>,
}

/// Renders each drive with the camera at `base * t_c` and writes a dataset
/// with command records. Returns the manifest path.
pub fn record_wheeled_dataset(
    dir: &Path,
    renderer: &Renderer,
    rig: &Rig,
    t_c: &RigidTransform,
    drives: &[Drive],
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames"))?;
    let path = dir.join(MANIFEST_FILE);
    let mut out = BufWriter::new(fs::File::create(&path)?);
    let mut seq = 0u64;
    for drive in drives {
        let (mut base, mut t) = (drive.start, 0.0);
        for cmd in &drive.commands {
            let frame = renderer.render(&base.compose(t_c), rig, Exec::Parallel)?;
            let (front, back) = (
                format!("frames/{seq:08}_front.png"),
                format!("frames/{seq:08}_back.png"),
            );
            frame.save_pair(&dir.join(&front), &dir.join(&back))?;
            let line = serde_json::json!({
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "seq": seq,
                "session": drive.session,
                "t": t,
                "img_front": front,
                "img_back": back,
                "command": cmd,
            });
            writeln!(out, "{line}")?;
            base = base.compose(&unicycle_delta(cmd.v, cmd.omega, cmd.dt));
            t += cmd.dt;
            seq += 1;
        }
    }
    out.flush()?;
    Ok(path)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a dataset manifest (or the manifest inside a dataset directory).
///
/// Records keep file order; timestamps must increase strictly within each
/// session. Both image files of every record must exist.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let reader = BufReader::new(fs::File::open(&manifest)?);
    let mut records = Vec::new();
    let mut last_t: HashMap<String, f64> = HashMap::new();

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest { line: lineno, msg };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if let Some(v) = raw.schema_version {
            if v != MANIFEST_SCHEMA_VERSION {
                return Err(bad(format!("unsupported schema_version {v}")));
            }
        }
        if !raw.t.is_finite() {
            return Err(bad("timestamp is not finite".into()));
        }
        let (action_delta, command) = match (raw.delta, raw.command) {
            (Some(_), Some(_)) => return Err(bad("both delta and command given".into())),
            (None, None) => return Err(bad("neither delta nor command given".into())),
            (Some(d), None) => {
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(bad("delta is not finite".into()));
                }
                (RigidTransform::from_flat(&d), None)
            }
            (None, Some(c)) => {
                if !(c.v.is_finite() && c.omega.is_finite() && c.dt.is_finite() && c.dt > 0.0) {
                    return Err(bad("command needs finite v, omega and dt > 0".into()));
                }
                (unicycle_delta(c.v, c.omega, c.dt), Some(c))
            }
        };
        let session = raw.session.unwrap_or_else(|| "default".into());
        if let Some(&prev) = last_t.get(&session) {
            if raw.t <= prev {
                return Err(Error::NonMonotoneTimestamps(lineno));
            }
        }
        last_t.insert(session.clone(), raw.t);

        let img_front = root.join(raw.img_front);
        let img_back = root.join(raw.img_back);
        for p in [&img_front, &img_back] {
            if !p.is_file() {
                return Err(Error::MissingImage(p.clone()));
            }
        }
        records.push(DatasetRecord {
            seq: raw.seq.unwrap_or(records.len() as u64),
            session,
            timestamp: raw.t,
            img_front,
            img_back,
            action_delta,
            command,
        });
    }
    Ok(records)
}

/// Running products `s1, s1*s2, ...`: the pose after each step relative to
/// the first frame.
pub fn cumulative(steps: &[RigidTransform]) -> Vec<RigidTransform> {
    steps
        .iter()
        .scan(RigidTransform::identity(), |acc, s| {
            *acc = acc.compose(s);
            Some(*acc)
        })
        .collect()
}

/// `N + 1` consecutive records of one session, not yet loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordWindow {
    pub session: String,
    pub records: Vec<DatasetRecord>,
}

impl RecordWindow {
    pub fn steps(&self) -> usize {
        self.records.len() - 1
    }

    pub fn step_deltas(&self) -> Vec<RigidTransform> {
        self.records[..self.steps()]
            .iter()
            .map(|r| r.action_delta)
            .collect()
    }

    /// Pose of frame `i` relative to frame 0, for `i = 1..=N`.
    pub fn deltas(&self) -> Vec<RigidTransform> {
        cumulative(&self.step_deltas())
    }

    pub fn load(&self) -> Result<TrajectorySlice> {
        let frames = self
            .records
            .iter()
            .map(DatasetRecord::load_frame)
            .collect::<Result<Vec<_>>>()?;
        TrajectorySlice::new(
            self.session.clone(),
            self.records.iter().map(|r| r.timestamp).collect(),
            frames,
            self.step_deltas(),
        )
    }
}

/// Sliding windows of `n + 1` records advancing by `stride`. Windows never
/// span two sessions; sessions are taken in order of first appearance.
pub fn slice_subsequences(records: &[DatasetRecord], n: usize, stride: usize) -> Vec<RecordWindow> {
    assert!(n >= 1, "slices need at least one step");
    assert!(stride >= 1, "stride must be positive");
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&DatasetRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(&r.session)
            .or_insert_with(|| {
                order.push(&r.session);
                Vec::new()
            })
            .push(r);
    }
    let mut out = Vec::new();
    for session in order {
        let group = &groups[session];
        let mut start = 0;
        while start + n < group.len() {
            out.push(RecordWindow {
                session: session.to_string(),
                records: group[start..=start + n].iter().map(|&r| r.clone()).collect(),
            });
            start += stride;
        }
    }
    out
}

/// Images `I(0..N)` with the per-step deltas between them and the
/// cumulative deltas `a(1..N)` relative to frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySlice {
    pub session: String,
    pub timestamps: Vec<f64>,
    pub frames: Vec<FisheyeFrame>,
    pub steps: Vec<RigidTransform>,
    pub deltas: Vec<RigidTransform>,
}

impl TrajectorySlice {
    pub fn new(
        session: String,
        timestamps: Vec<f64>,
        frames: Vec<FisheyeFrame>,
        steps: Vec<RigidTransform>,
    ) -> Result<Self> {
        if steps.is_empty() || frames.len() != steps.len() + 1 || timestamps.len() != frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice with {} frames, {} timestamps and {} steps",
                frames.len(),
                timestamps.len(),
                steps.len()
            )));
        }
        let w = frames[0].resolution();
        if let Some(f) = frames.iter().find(|f| f.resolution() != w) {
            return Err(Error::ResolutionMismatch(w, f.resolution()));
        }
        let deltas = cumulative(&steps);
        Ok(Self {
            session,
            timestamps,
            frames,
            steps,
            deltas,
        })
    }

    pub fn n(&self) -> usize {
        self.steps.len()
    }

    pub fn resolution(&self) -> usize {
        self.frames[0].resolution()
    }

    /// Deltas as 6-DoF actions.
    pub fn actions(&self) -> Result<Vec<ActionTuple>> {
        self.deltas.iter().map(transform_to_action).collect()
    }
}

/// Largest `|z|`, `|roll|` or `|pitch|` over a set of actions: zero for
/// planar motion.
pub fn max_off_plane(actions: &[ActionTuple]) -> f64 {
    actions
        .iter()
        .map(|a| a.z.abs().max(a.alpha.abs()).max(a.beta.abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSlice {
    /// The virtual camera rotation shared by every frame.
    pub rotation: RigidTransform,
    pub slice: TrajectorySlice,
}

/// One training sample: current and goal images under the same rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub current: FisheyeFrame,
    pub target: FisheyeFrame,
    /// Index `i` of the goal frame, `1..=N`.
    pub step: usize,
    /// Camera-frame pose of the goal relative to the current image.
    pub action: RigidTransform,
    pub rotation: RigidTransform,
}

/// Camera geometry used to augment slices.
#[derive(Clone, Debug)]
pub struct Augmenter {
    /// Robot base to camera.
    pub t_c: RigidTransform,
    /// Front to back lens.
    pub lens: RigidTransform,
    pub model: ProjectionModel,
    pub exec: Exec,
}

impl Augmenter {
    pub fn new(t_c: RigidTransform) -> Self {
        Self {
            t_c,
            lens: default_lens_transform(),
            model: ProjectionModel::default(),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn expand(&self, delta: &RigidTransform, t: &RigidTransform) -> RigidTransform {
        expand_action(delta, &self.t_c, t)
    }

    /// Draws one rotation for a whole slice and expands its deltas, drawing
    /// again while any expanded delta sits on the pitch singularity.
    pub fn augment_actions(
        &self,
        deltas: &[RigidTransform],
        sampler: &mut RotationSampler,
    ) -> Result<(RigidTransform, Vec<RigidTransform>)> {
        let mut last = Error::GimbalLock(1.0);
        for _ in 0..MAX_RESAMPLES {
            let t = sampler.sample();
            let expanded: Vec<_> = deltas.iter().map(|d| self.expand(d, &t)).collect();
            match expanded.iter().try_for_each(|d| transform_to_action(d).map(|_| ())) {
                Ok(()) => return Ok((t, expanded)),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Rotates every frame of the slice by one random rotation and lifts
    /// every delta into the rotated camera frame.
    pub fn augment_slice(
        &self,
        slice: &TrajectorySlice,
        sampler: &mut RotationSampler,
    ) -> Result<AugmentedSlice> {
        let (t, deltas) = self.augment_actions(&slice.deltas, sampler)?;
        let steps = slice.steps.iter().map(|s| self.expand(s, &t)).collect();
        let plan = VcrPlan::new(&t, &self.lens, &self.model, slice.resolution(), self.exec)?;
        let frames = slice
            .frames
            .iter()
            .map(|f| plan.apply(f, self.exec))
            .collect::<Result<Vec<_>>>()?;
        Ok(AugmentedSlice {
            rotation: t,
            slice: TrajectorySlice {
                session: slice.session.clone(),
                timestamps: slice.timestamps.clone(),
                frames,
                steps,
                deltas,
            },
        })
    }

    /// Picks a goal step uniformly from `1..=N` and rotates the current and
    /// goal images by one random rotation.
    pub fn augment_pair(
        &self,
        slice: &TrajectorySlice,
        sampler: &mut RotationSampler,
    ) -> Result<TrainingPair> {
        let step = sample_step(slice.n(), sampler.rng_mut());
        let (t, action) = self.augment_actions(&slice.deltas[step - 1..step], sampler)?;
        let plan = VcrPlan::new(&t, &self.lens, &self.model, slice.resolution(), self.exec)?;
        Ok(TrainingPair {
            current: plan.apply(&slice.frames[0], self.exec)?,
            target: plan.apply(&slice.frames[step], self.exec)?,
            step,
            action: action[0],
            rotation: t,
        })
    }
}

/// Uniform goal index in `1..=n`.
pub fn sample_step<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    assert!(n >= 1);
    rng.random_range(1..=n)
}

/// [`Augmenter::augment_slice`] with the default lens and projection.
pub fn augment_slice(
    slice: &TrajectorySlice,
    t_c: &RigidTransform,
    sampler: &mut RotationSampler,
) -> Result<AugmentedSlice> {
    Augmenter::new(*t_c).augment_slice(slice, sampler)
}

/// [`Augmenter::augment_pair`] with identity `T_c`, default lens and
/// projection.
pub fn augment_pair(slice: &TrajectorySlice, sampler: &mut RotationSampler) -> Result<TrainingPair> {
    Augmenter::new(RigidTransform::identity()).augment_pair(slice, sampler)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleMask {
    pub enabled: bool,
    /// Pixels whose centers lie farther than this from the image center are
    /// masked.
    pub radius: f64,
}

impl Default for CircleMask {
    fn default() -> Self {
        Self {
            enabled: false,
            radius: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectMode {
    /// Region of interest: on a lens with any keep rectangle, only pixels
    /// inside one survive.
    #[default]
    Keep,
    /// Masked region, e.g. the robot's own body.
    Drop,
}

/// Axis-aligned rectangle in standardized image coordinates, bounds
/// inclusive, tested at pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectMask {
    pub image: Lens,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    #[serde(default)]
    pub mode: RectMode,
}

impl RectMask {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        (self.u_min..=self.u_max).contains(&u) && (self.v_min..=self.v_max).contains(&v)
    }
}

fn mask_schema_version() -> u32 {
    MASK_SCHEMA_VERSION
}

/// Resolution-independent description of masked image regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default = "mask_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub circle: CircleMask,
    #[serde(default)]
    pub rects: Vec<RectMask>,
    #[serde(default)]
    pub back_full: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            schema_version: MASK_SCHEMA_VERSION,
            circle: CircleMask::default(),
            rects: Vec::new(),
            back_full: false,
        }
    }
}

impl MaskSpec {
    /// Masks nothing.
    pub fn none() -> Self {
        Self::default()
    }

    /// Everything outside the image circle of `radius`.
    pub fn circle(radius: f64) -> Self {
        Self {
            circle: CircleMask {
                enabled: true,
                radius,
            },
            ..Self::default()
        }
    }

    /// A single front region of interest; the back image is dropped.
    pub fn front_roi(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            rects: vec![RectMask {
                image: Lens::Front,
                u_min,
                v_min,
                u_max,
                v_max,
                mode: RectMode::Keep,
            }],
            back_full: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MASK_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported mask schema_version {}",
                self.schema_version
            )));
        }
        if self.circle.enabled && !(self.circle.radius.is_finite() && self.circle.radius > 0.0) {
            return Err(Error::InvalidConfig("mask circle radius must be positive".into()));
        }
        for r in &self.rects {
            let inside = |x: f64| (-1.0..=1.0).contains(&x);
            if ![r.u_min, r.v_min, r.u_max, r.v_max].into_iter().all(inside)
                || r.u_min > r.u_max
                || r.v_min > r.v_max
            {
                return Err(Error::InvalidConfig(format!(
                    "mask rectangle {r:?} must be ordered and lie in [-1, 1]^2"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Keep/drop decision for every pixel center of both lenses.
    pub fn rasterize(&self, width: usize) -> FrameMask {
        let grid = coordinate_grid(width);
        let lens_mask = |lens: Lens| -> Vec<bool> {
            let rects: Vec<_> = self.rects.iter().filter(|r| r.image == lens).collect();
            let has_keep = rects.iter().any(|r| r.mode == RectMode::Keep);
            grid.iter()
                .map(|c| {
                    if self.back_full && lens == Lens::Back {
                        return false;
                    }
                    if self.circle.enabled && c.radius() > self.circle.radius + 1e-12 {
                        return false;
                    }
                    let inside = |mode| {
                        rects
                            .iter()
                            .any(|r| r.mode == mode && r.contains(c.u, c.v))
                    };
                    (!has_keep || inside(RectMode::Keep)) && !inside(RectMode::Drop)
                })
                .collect()
        };
        FrameMask {
            width,
            front: lens_mask(Lens::Front),
            back: lens_mask(Lens::Back),
        }
    }
}

/// Zeroes the dropped pixels of both lenses.
pub fn apply_frame_mask(frame: &FisheyeFrame, mask: &FrameMask) -> FisheyeFrame {
    let mut out = frame.clone();
    out.front.apply_mask(&mask.front);
    out.back.apply_mask(&mask.back);
    out
}

pub fn apply_mask(frame: &FisheyeFrame, spec: &MaskSpec) -> FisheyeFrame {
    apply_frame_mask(frame, &spec.rasterize(frame.resolution()))
}

/// Decimal rendering with 17 significant digits; parses back to the same
/// bits.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Streams slices into a dataset directory: PNG pairs under `frames/` and
/// one manifest line per frame.
pub struct ManifestWriter {
    root: PathBuf,
    out: BufWriter<fs::File>,
    seq: u64,
    slices: usize,
}

impl ManifestWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("frames"))?;
        Ok(Self {
            root: dir.to_path_buf(),
            out: BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?),
            seq: 0,
            slices: 0,
        })
    }

    /// Writes the slice as its own session so that reloading and slicing
    /// with the same `N` yields it back. The last frame gets an identity
    /// delta.
    pub fn write_slice(&mut self, session: &str, slice: &TrajectorySlice) -> Result<()> {
        let session_json = serde_json::to_string(session)?;
        let identity = RigidTransform::identity();
        for (k, frame) in slice.frames.iter().enumerate() {
            let front = format!("frames/{:08}_front.png", self.seq);
            let back = format!("frames/{:08}_back.png", self.seq);
            frame.save_pair(&self.root.join(&front), &self.root.join(&back))?;
            let delta = slice.steps.get(k).unwrap_or(&identity).to_flat();
            let delta: Vec<String> = delta.iter().map(|&x| fmt17(x)).collect();
            writeln!(
                self.out,
                "{{\"schema_version\":{},\"seq\":{},\"session\":{},\"t\":{},\"img_front\":\"{}\",\"img_back\":\"{}\",\"delta\":[{}]}}",
                MANIFEST_SCHEMA_VERSION,
                self.seq,
                session_json,
                fmt17(slice.timestamps[k]),
                front,
                back,
                delta.join(",")
            )?;
            self.seq += 1;
        }
        self.slices += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush()?;
        Ok(self.root.join(MANIFEST_FILE))
    }

    pub fn frames_written(&self) -> u64 {
        self.seq
    }
}

/// Session name given to augmented slice `index` of `session`.
pub fn augmented_session(session: &str, index: usize) -> String {
    format!("{session}/{index:06}")
}

/// Writes augmented slices to `dir` and returns the manifest path.
pub fn write_augmented(slices: &[AugmentedSlice], dir: &Path) -> Result<PathBuf> {
    let mut w = ManifestWriter::create(dir)?;
    for (i, s) in slices.iter().enumerate() {
        w.write_slice(&augmented_session(&s.slice.session, i), &s.slice)?;
    }
    w.finish()
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub n_steps: usize,
    pub stride: usize,
    pub seed: u64,
    pub rotation: RotationMode,
    pub t_c: RigidTransform,
    pub mask: Option<MaskSpec>,
    pub lens: RigidTransform,
    pub model: ProjectionModel,
    /// Slices held in memory at once.
    pub batch: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_steps: 8,
            stride: 1,
            seed: 0,
            rotation: RotationMode::UniformSo3,
            t_c: RigidTransform::identity(),
            mask: None,
            lens: default_lens_transform(),
            model: ProjectionModel::default(),
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSummary {
    pub records: usize,
    pub slices: usize,
    pub frames_written: u64,
    pub manifest: PathBuf,
}

/// Loads, slices, augments and writes a whole dataset.
///
/// Slice `k` draws its rotation from the stream keyed `[k]` under
/// `cfg.seed`, and slices are written in index order, so the output does
/// not depend on the worker count.
pub fn augment_dataset(
    input: &Path,
    output: &Path,
    cfg: &AugmentConfig,
    exec: Exec,
) -> Result<AugmentSummary> {
    if cfg.n_steps == 0 || cfg.stride == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig(
            "n_steps, stride and batch must be positive".into(),
        ));
    }
    if let Some(m) = &cfg.mask {
        m.validate()?;
    }
    crate::se3::RotationSamplerConfig {
        mode: cfg.rotation,
        seed: cfg.seed,
    }
    .validate()?;

    let records = load_dataset(input)?;
    let windows = slice_subsequences(&records, cfg.n_steps, cfg.stride);
    let augmenter = Augmenter {
        t_c: cfg.t_c,
        lens: cfg.lens,
        model: cfg.model.clone(),
        exec,
    };
    let mut writer = ManifestWriter::create(output)?;
    for (b, batch) in windows.chunks(cfg.batch).enumerate() {
        let base = b * cfg.batch;
        let done = exec.map(batch.len(), |j| -> Result<AugmentedSlice> {
            let k = base + j;
            let mut sampler =
                RotationSampler::with_rng(cfg.rotation, rng::stream(cfg.seed, &[k as u64]));
            let mut aug = augmenter.augment_slice(&batch[j].load()?, &mut sampler)?;
            if let Some(m) = &cfg.mask {
                let mask = m.rasterize(aug.slice.resolution());
                for f in &mut aug.slice.frames {
                    *f = apply_frame_mask(f, &mask);
                }
            }
            Ok(aug)
        });
        for (j, aug) in done.into_iter().enumerate() {
            let aug = aug?;
            writer.write_slice(&augmented_session(&aug.slice.session, base + j), &aug.slice)?;
        }
        log::info!("augmented {} / {} slices", (base + batch.len()), windows.len());
    }
    let frames_written = writer.frames_written();
    Ok(AugmentSummary {
        records: records.len(),
        slices: windows.len(),
        frames_written,
        manifest: writer.finish()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::se3::{rot_x, RotationSamplerConfig};
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn frame(w: usize, seed: u64) -> FisheyeFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            let vals: Vec<f32> = (0..3 * w * w).map(|_| rng.random()).collect();
            Image::from_planes(w, w, vals).unwrap()
        };
        FisheyeFrame::new(img(), img()).unwrap()
    }

    /// Writes a dataset of `counts[s]` command records per session.
    fn write_dataset(dir: &Path, counts: &[usize], w: usize) {
        fs::create_dir_all(dir.join("img")).unwrap();
        let mut lines = String::new();
        let mut k = 0;
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let f = frame(w, k);
                let (front, back) = (format!("img/{k}_front.png"), format!("img/{k}_back.png"));
                f.save_pair(&dir.join(&front), &dir.join(&back)).unwrap();
                let omega = 0.1 * ((k % 5) as f64 - 2.0);
                lines += &format!(
                    "{{\"session\":\"s{s}\",\"t\":{i}.5,\"img_front\":\"{front}\",\"img_back\":\"{back}\",\"command\":{{\"v\":0.3,\"omega\":{omega},\"dt\":0.5}}}}\n"
                );
                k += 1;
            }
        }
        fs::write(dir.join(MANIFEST_FILE), lines).unwrap();
    }

    fn one_record(dir: &Path, body: &str) -> Result<Vec<DatasetRecord>> {
        fs::create_dir_all(dir).unwrap();
        frame(4, 0)
            .save_pair(&dir.join("a_front.png"), &dir.join("a_back.png"))
            .unwrap();
        fs::write(dir.join(MANIFEST_FILE), body).unwrap();
        load_dataset(dir)
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(one_record(dir.path(), "\n").unwrap().is_empty());
    }

    #[test]
    fn straight_line_commands() {
        let dir = tempfile::tempdir().unwrap();
        let line = |t: u32| {
            format!("{{\"t\":{t},\"img_front\":\"a_front.png\",\"img_back\":\"a_back.png\",\"command\":{{\"v\":1,\"omega\":0,\"dt\":1}}}}\n")
        };
        let recs = one_record(dir.path(), &(line(0) + &line(1) + &line(2))).unwrap();
        assert_eq!(recs.len(), 3);
        let w = &slice_subsequences(&recs, 2, 1)[0];
        for d in w.step_deltas() {
            assert!(d.max_abs_diff(&RigidTransform::from_translation(1.0, 0.0, 0.0)) < 1e-15);
        }
        assert!(recs.iter().all(|r| r.is_wheeled(0.0)));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let both = "{\"t\":0,\"img_front\":\"a_front.png\",\"img_back\":\"a_back.png\",\"command\":{\"v\":1,\"omega\":0,\"dt\":1},\"delta\":[1,0,0,0,1,0,0,0,1,0,0,0]}";
        assert!(matches!(one_record(dir.path(), both), Err(Error::Manifest { line: 1, .. })));
        let neither = "{\"t\":0,\"img_front\":\"a_front.png\",\"img_back\":\"a_back.png\"}";
        assert!(matches!(one_record(dir.path(), neither), Err(Error::Manifest { .. })));
        let missing = "{\"t\":0,\"img_front\":\"x_front.png\",\"img_back\":\"a_back.png\",\"command\":{\"v\":1,\"omega\":0,\"dt\":1}}";
        assert!(matches!(one_record(dir.path(), missing), Err(Error::MissingImage(_))));
        let rec = |t: u32| format!("{{\"t\":{t},\"img_front\":\"a_front.png\",\"img_back\":\"a_back.png\",\"command\":{{\"v\":1,\"omega\":0,\"dt\":1}}}}\n");
        let backwards = rec(1) + &rec(1);
        assert!(matches!(
            one_record(dir.path(), &backwards),
            Err(Error::NonMonotoneTimestamps(2))
        ));
        let garbage = "{\"t\":0,";
        assert!(matches!(one_record(dir.path(), garbage), Err(Error::Manifest { .. })));
    }

    fn fake_records(counts: &[usize]) -> Vec<DatasetRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                out.push(DatasetRecord {
                    seq: out.len() as u64,
                    session: format!("s{s}"),
                    timestamp: i as f64,
                    img_front: PathBuf::new(),
                    img_back: PathBuf::new(),
                    action_delta: unicycle_delta(
                        rng.random_range(0.0..0.5),
                        rng.random_range(-1.0..1.0),
                        0.5,
                    ),
                    command: None,
                });
            }
        }
        out
    }

    #[test]
    fn window_counts() {
        assert_eq!(slice_subsequences(&fake_records(&[9]), 8, 1).len(), 1);
        assert_eq!(slice_subsequences(&fake_records(&[10]), 8, 1).len(), 2);
        assert_eq!(slice_subsequences(&fake_records(&[8]), 8, 1).len(), 0);
        assert_eq!(slice_subsequences(&fake_records(&[20]), 8, 4).len(), 3);
        // 10 + 10 records would give 11 windows if sessions were merged.
        let w = slice_subsequences(&fake_records(&[10, 10]), 8, 1);
        assert_eq!(w.len(), 4);
        assert!(w
            .iter()
            .all(|w| w.records.iter().all(|r| r.session == w.session)));
    }

    #[test]
    fn window_deltas_match_matrix_chain() {
        let recs = fake_records(&[12]);
        for w in slice_subsequences(&recs, 8, 2) {
            let mut m = Matrix4::identity();
            for (i, d) in w.deltas().iter().enumerate() {
                m *= w.records[i].action_delta.to_homogeneous();
                assert!((d.to_homogeneous() - m).amax() < 1e-12);
            }
        }
    }

    fn wheeled_slice(w: usize, n: usize, seed: u64) -> TrajectorySlice {
        let recs = fake_records(&[n + 1]);
        let steps = slice_subsequences(&recs, n, 1)[0].step_deltas();
        TrajectorySlice::new(
            "s".into(),
            (0..=n).map(|i| i as f64).collect(),
            (0..=n).map(|i| frame(w, seed + i as u64)).collect(),
            steps,
        )
        .unwrap()
    }

    fn forward_disk(w: usize) -> Vec<bool> {
        coordinate_grid(w).iter().map(|c| c.radius() <= 0.5).collect()
    }

    fn identity_sampler() -> RotationSampler {
        RotationSampler::new(&RotationSamplerConfig::bounded([[0.0, 0.0]; 3], 0)).unwrap()
    }

    #[test]
    fn identity_rotation_keeps_slice() {
        let s = wheeled_slice(16, 3, 0);
        let a = augment_slice(&s, &RigidTransform::identity(), &mut identity_sampler()).unwrap();
        assert_eq!(a.slice.deltas, s.deltas);
        assert_eq!(a.slice.steps, s.steps);
        // Random frames are not a consistent pair of views, so only the
        // forward hemisphere of each lens (served by that lens) is compared.
        let inside = forward_disk(16);
        for (x, y) in a.slice.frames.iter().zip(&s.frames) {
            for (p, q) in [(&x.front, &y.front), (&x.back, &y.back)] {
                for k in (0..256).filter(|&k| inside[k]) {
                    let (p, q) = (p.get_flat(k), q.get_flat(k));
                    assert!((0..3).all(|c| (p[c] - q[c]).abs() < 1e-5));
                }
            }
        }
    }

    #[test]
    fn roll_lifts_planar_motion_off_plane() {
        let s = wheeled_slice(8, 4, 0);
        let mut roll = RotationSampler::new(&RotationSamplerConfig::bounded(
            [[FRAC_PI_2, FRAC_PI_2], [0.0, 0.0], [0.0, 0.0]],
            0,
        ))
        .unwrap();
        let a = augment_slice(&s, &RigidTransform::identity(), &mut roll).unwrap();
        let t = RigidTransform::from_rotation(rot_x(FRAC_PI_2));
        for (raw, aug) in s.deltas.iter().zip(&a.slice.deltas) {
            let oracle = t.to_homogeneous().try_inverse().unwrap()
                * raw.to_homogeneous()
                * t.to_homogeneous();
            assert!((aug.to_homogeneous() - oracle).amax() < 1e-12);
            // A base-frame lateral move appears along the rolled camera's z.
            assert!((aug.translation.z + raw.translation.y).abs() < 1e-12);
        }
        assert!(a.slice.deltas.iter().any(|d| d.translation.z.abs() > 1e-3));
    }

    #[test]
    fn same_seed_same_augmentation() {
        let s = wheeled_slice(8, 3, 1);
        let run = || {
            let mut sm = RotationSampler::new(&RotationSamplerConfig::uniform(42)).unwrap();
            augment_slice(&s, &RigidTransform::rot_x(0.3), &mut sm).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn augmented_frames_are_mutually_consistent() {
        let s = wheeled_slice(8, 5, 2);
        let t_c = RigidTransform::new(rot_x(-FRAC_PI_2), nalgebra::Vector3::new(0.1, 0.0, 0.5));
        let aug = Augmenter::new(t_c);
        let mut sm = RotationSampler::new(&RotationSamplerConfig::uniform(3)).unwrap();
        let a = aug.augment_slice(&s, &mut sm).unwrap();
        let pose = |d: &[RigidTransform], i: usize| {
            if i == 0 {
                RigidTransform::identity()
            } else {
                d[i - 1]
            }
        };
        for i in 0..=5 {
            for j in 0..=5 {
                let got = pose(&a.slice.deltas, i).inverse().compose(&pose(&a.slice.deltas, j));
                let raw = pose(&s.deltas, i).inverse().compose(&pose(&s.deltas, j));
                let want = aug.expand(&raw, &a.rotation);
                assert!(got.max_abs_diff(&want) < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_rotations_break_the_planar_constraint() {
        let aug = Augmenter::new(RigidTransform::identity());
        let recs = fake_records(&[9]);
        let deltas = slice_subsequences(&recs, 8, 1)[0].deltas();
        let mut off = 0;
        for k in 0..1000u64 {
            let mut sm = RotationSampler::with_rng(RotationMode::UniformSo3, rng::stream(9, &[k]));
            let (_, d) = aug.augment_actions(&deltas, &mut sm).unwrap();
            let acts: Vec<_> = d.iter().map(|d| transform_to_action(d).unwrap()).collect();
            if max_off_plane(&acts) > 0.01 {
                off += 1;
            }
        }
        assert!(off > 950, "{off}");
    }

    #[test]
    fn persistent_gimbal_lock_gives_up() {
        let aug = Augmenter::new(RigidTransform::identity());
        // With T forced to identity the delta keeps its 90 deg pitch.
        let d = RigidTransform::rot_y(FRAC_PI_2);
        assert!(matches!(
            aug.augment_actions(&[d], &mut identity_sampler()),
            Err(Error::GimbalLock(_))
        ));
    }

    #[test]
    fn goal_step_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 9];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_step(8, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 8.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!((0..50).all(|_| sample_step(1, &mut rng) == 1));
    }

    #[test]
    fn identity_pair_is_raw_frames() {
        let s = wheeled_slice(16, 1, 3);
        let p = augment_pair(&s, &mut identity_sampler()).unwrap();
        assert_eq!(p.step, 1);
        assert_eq!(p.action, s.deltas[0]);
        // Random frames are not a consistent pair of views, so only the
        // forward hemisphere of each lens (served by that lens) is compared.
        let inside = forward_disk(16);
        let same = |a: &FisheyeFrame, b: &FisheyeFrame| {
            (0..256).filter(|&k| inside[k]).all(|k| {
                let (x, y) = (a.front.get_flat(k), b.front.get_flat(k));
                (0..3).all(|c| (x[c] - y[c]).abs() < 1e-5)
            })
        };
        assert!(same(&p.current, &s.frames[0]));
        assert!(same(&p.target, &s.frames[1]));
    }

    #[test]
    fn empty_mask_is_identity() {
        let f = frame(16, 4);
        assert_eq!(apply_mask(&f, &MaskSpec::none()), f);
    }

    #[test]
    fn back_full_zeroes_back() {
        let spec = MaskSpec {
            back_full: true,
            ..MaskSpec::none()
        };
        let m = apply_mask(&frame(16, 4), &spec);
        assert!(m.back.data().iter().all(|&x| x == 0.0));
        assert!(m.front.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn centered_roi_keeps_32_by_32_at_128() {
        let spec = MaskSpec::front_roi(-0.25, -0.25, 0.25, 0.25);
        let m = spec.rasterize(128);
        let kept: Vec<usize> = (0..128 * 128).filter(|&k| m.front[k]).collect();
        assert_eq!(kept.len(), 32 * 32);
        // Pixel centers (2c + 1) / 128 - 1 in [-0.25, 0.25] <=> c in 48..=79.
        assert!(kept.iter().all(|&k| (48..80).contains(&(k / 128)) && (48..80).contains(&(k % 128))));
        assert_eq!(m.back.iter().filter(|&&b| b).count(), 0);
    }

    #[test]
    fn circle_and_drop_rects() {
        let mut spec = MaskSpec::circle(1.0);
        let full = spec.rasterize(128);
        assert_eq!(full.front.iter().filter(|&&b| b).count(), 12892);
        spec.rects.push(RectMask {
            image: Lens::Back,
            u_min: -1.0,
            v_min: 0.5,
            u_max: 1.0,
            v_max: 1.0,
            mode: RectMode::Drop,
        });
        let m = spec.rasterize(128);
        assert_eq!(m.front, full.front);
        let grid = coordinate_grid(128);
        for k in 0..128 * 128 {
            assert_eq!(m.back[k], full.back[k] && grid[k].v < 0.5);
        }
    }

    #[test]
    fn mask_spec_json_round_trip_and_validation() {
        let spec = MaskSpec::front_roi(-0.5, 0.0, 0.5, 0.8);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<MaskSpec>(&text).unwrap(), spec);
        let minimal: MaskSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(minimal, MaskSpec::none());
        assert!(MaskSpec::front_roi(-2.0, 0.0, 0.5, 0.8).validate().is_err());
        assert!(MaskSpec::front_roi(0.5, 0.0, -0.5, 0.8).validate().is_err());
    }

    proptest! {
        #[test]
        fn masking_is_idempotent(
            seed in 0u64..1000,
            r in 0.1f64..1.5,
            u in -1.0f64..0.0,
            v in -1.0f64..0.0,
            du in 0.0f64..1.0,
            dv in 0.0f64..1.0,
            back_full: bool,
            drop: bool,
        ) {
            let spec = MaskSpec {
                circle: CircleMask { enabled: true, radius: r },
                rects: vec![RectMask {
                    image: Lens::Front,
                    u_min: u,
                    v_min: v,
                    u_max: u + du,
                    v_max: v + dv,
                    mode: if drop { RectMode::Drop } else { RectMode::Keep },
                }],
                back_full,
                ..MaskSpec::none()
            };
            let once = apply_mask(&frame(12, seed), &spec);
            prop_assert_eq!(apply_mask(&once, &spec), once);
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (input, output) = (dir.path().join("in"), dir.path().join("out"));
        write_dataset(&input, &[11, 9], 8);
        let cfg = AugmentConfig {
            n_steps: 4,
            stride: 2,
            seed: 1,
            ..AugmentConfig::default()
        };
        let summary = augment_dataset(&input, &output, &cfg, Exec::Parallel).unwrap();
        assert_eq!(summary.slices, 4 + 3);
        assert_eq!(summary.frames_written, 7 * 5);

        // Regenerate the same slices in memory and compare.
        let recs = load_dataset(&input).unwrap();
        let windows = slice_subsequences(&recs, 4, 2);
        let aug = Augmenter::new(RigidTransform::identity());
        let expected: Vec<AugmentedSlice> = windows
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let mut sm = RotationSampler::with_rng(RotationMode::UniformSo3, rng::stream(1, &[k as u64]));
                aug.augment_slice(&w.load().unwrap(), &mut sm).unwrap()
            })
            .collect();

        let back = load_dataset(&output).unwrap();
        let reloaded = slice_subsequences(&back, 4, 1);
        assert_eq!(reloaded.len(), expected.len());
        for (w, e) in reloaded.iter().zip(&expected) {
            let s = w.load().unwrap();
            for (a, b) in s.deltas.iter().zip(&e.slice.deltas) {
                assert!(a.max_abs_diff(b) < 1e-12);
            }
            assert_eq!(s.steps, e.slice.steps);
            for (a, b) in s.frames.iter().zip(&e.slice.frames) {
                assert_eq!(*a, b.quantized());
            }
        }

        // Bit-exact manifest for a second run, with a different pool size.
        let again = dir.path().join("again");
        crate::par::with_workers(1, || augment_dataset(&input, &again, &cfg, Exec::Parallel)).unwrap();
        assert_eq!(
            fs::read(output.join(MANIFEST_FILE)).unwrap(),
            fs::read(again.join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn seventeen_digit_rendering_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let x: f64 = rng.random_range(-10.0..10.0) * 10f64.powi(rng.random_range(-20..20));
            let back: f64 = serde_json::from_str(&fmt17(x)).unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn recorded_drive_matches_renderer() {
        let dir = tempfile::tempdir().unwrap();
        let scene = crate::render::SceneSpec::random(&mut ChaCha8Rng::seed_from_u64(4));
        let renderer = Renderer::new(scene).unwrap();
        let rig = Rig::equidistant(16);
        let t_c = RigidTransform::from_translation(0.0, 0.0, 0.1);
        let cmd = Command { v: 0.2, omega: 0.3, dt: 0.5 };
        let drive = Drive {
            session: "d".into(),
            start: RigidTransform::identity(),
            commands: vec![cmd; 3],
        };
        record_wheeled_dataset(dir.path(), &renderer, &rig, &t_c, &[drive]).unwrap();
        let recs = load_dataset(dir.path()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.is_wheeled(1e-12) && r.command == Some(cmd)));
        let step = unicycle_delta(0.2, 0.3, 0.5);
        let pose = step.compose(&step).compose(&t_c);
        let expected = renderer.render(&pose, &rig, Exec::Sequential).unwrap().quantized();
        assert_eq!(recs[2].load_frame().unwrap(), expected);
    }
}
