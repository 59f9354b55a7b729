use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use omnivcr::augment::{augment_dataset, AugmentConfig, MaskSpec};
use omnivcr::flow::virtual_camera_rotation;
use omnivcr::image::{FisheyeFrame, Image};
use omnivcr::par::Exec;
use omnivcr::projection::ProjectionModel;
use omnivcr::render::{Renderer, Rig, SceneSpec};
use omnivcr::rng;
use omnivcr::se3::{default_lens_transform, ActionTuple, RigidTransform, RotationMode};
use omnivcr::servo::{evaluate, load_trace, run_trial, EvalSummary, ServoConfig, TrialMode, TrialSetup, Workspace};

use crate::{write_output, GlobalArgs, Mode};

/// `x,y,z,roll,pitch,yaw` (meters, degrees) or 12 numbers: the rotation
/// row-major, then the translation.
pub fn parse_pose(s: &str) -> Result<RigidTransform> {
    let vals: Vec<f64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("pose value {t:?}")))
        .collect::<Result<_>>()?;
    match vals.len() {
        6 => Ok(ActionTuple::new(
            vals[0],
            vals[1],
            vals[2],
            vals[3].to_radians(),
            vals[4].to_radians(),
            vals[5].to_radians(),
        )
        .to_transform()),
        12 => Ok(RigidTransform::parse_flat(s)?),
        n => bail!("pose needs 6 or 12 numbers, got {n}"),
    }
}

pub fn rig(global: &GlobalArgs) -> Result<Rig> {
    let model = ProjectionModel::from_spec(&global.projection)?;
    Ok(Rig::with_supersampling(
        model,
        default_lens_transform(),
        global.resolution,
        global.supersample,
    ))
}

fn load_scene(path: Option<&PathBuf>, seed: u64) -> Result<SceneSpec> {
    match path {
        Some(p) => SceneSpec::load(p).with_context(|| format!("loading scene {}", p.display())),
        None => Ok(SceneSpec::random(&mut rng::stream(seed, &[0x5CE])).clone()),
    }
}

#[derive(Args, Debug)]
pub struct RotateArgs {
    /// Side-by-side PNG, or `<stem>_front.png`/`<stem>_back.png` pair.
    /// Without it, a frame is rendered from `--scene` (or a seeded random
    /// scene) at `--pose`.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value = "0,0,0,0,0,0", allow_hyphen_values = true)]
    pub pose: String,
    /// Degrees about the optical x axis.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub roll: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    /// Triptych PNG: original | rotated | absolute difference, each panel
    /// front and back side by side.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the rotated frame alone (side by side).
    #[arg(long)]
    pub rotated: Option<PathBuf>,
}

pub fn rotate(global: &GlobalArgs, a: &RotateArgs) -> Result<()> {
    let rig = rig(global)?;
    let frame = match &a.input {
        Some(p) => FisheyeFrame::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let scene = load_scene(a.scene.as_ref(), global.seed)?;
            Renderer::new(scene)?.render(&parse_pose(&a.pose)?, &rig, Exec::Parallel)?
        }
    };
    let t = ActionTuple::new(0.0, 0.0, 0.0, a.roll.to_radians(), a.pitch.to_radians(), a.yaw.to_radians())
        .to_transform();
    let rotated = virtual_camera_rotation(&frame, &t, &rig.lens, &rig.model, Exec::Parallel)?;
    let (left, right) = (frame.side_by_side(), rotated.side_by_side());
    let diff = Image::from_fn(left.width(), left.height(), |r, c| {
        let (p, q) = (left.get(r, c), right.get(r, c));
        std::array::from_fn(|k| (p[k] - q[k]).abs())
    });
    Image::hconcat(&[&left, &right, &diff])?.save_png(&a.out)?;
    if let Some(p) = &a.rotated {
        rotated.save_side_by_side(p)?;
    }
    log::info!(
        "rotated {}px frame by roll {} pitch {} yaw {} deg -> {}",
        frame.resolution(),
        a.roll,
        a.pitch,
        a.yaw,
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Dataset directory or manifest file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n_steps: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// `uniform` or `rpy:a,b,c` for independent uniform angles in
    /// [-a,a] x [-b,b] x [-c,c] degrees.
    #[arg(long, default_value = "uniform")]
    pub rotation: String,
    /// Camera pose in the robot frame (rig specific, no default).
    #[arg(long, allow_hyphen_values = true)]
    pub t_c: String,
    /// Mask configuration applied to every written frame.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Slices processed per batch.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

pub fn parse_rotation(s: &str) -> Result<RotationMode> {
    if s == "uniform" {
        return Ok(RotationMode::UniformSo3);
    }
    let Some(rest) = s.strip_prefix("rpy:") else {
        bail!("rotation must be `uniform` or `rpy:a,b,c`, got {s:?}");
    };
    let v: Vec<f64> = rest
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("rotation bound {t:?}")))
        .collect::<Result<_>>()?;
    if v.len() != 3 || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        bail!("rpy needs three non-negative bounds, got {rest:?}");
    }
    let b = |x: f64| [-x.to_radians(), x.to_radians()];
    Ok(RotationMode::BoundedRpy {
        bounds: [b(v[0]), b(v[1]), b(v[2])],
    })
}

pub fn augment(global: &GlobalArgs, a: &AugmentArgs) -> Result<()> {
    let cfg = AugmentConfig {
        n_steps: a.n_steps,
        stride: a.stride,
        seed: global.seed,
        rotation: parse_rotation(&a.rotation)?,
        t_c: parse_pose(&a.t_c)?,
        mask: a.mask.as_deref().map(MaskSpec::load).transpose()?,
        lens: default_lens_transform(),
        model: ProjectionModel::from_spec(&global.projection)?,
        batch: a.batch,
    };
    let s = augment_dataset(&a.input, &a.out, &cfg, Exec::Parallel)?;
    log::info!(
        "{} records -> {} slices, {} frames in {}",
        s.records,
        s.slices,
        s.frames_written,
        s.manifest.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene JSON; a seeded random scene is used when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value = "0,0,0,0,0,0", allow_hyphen_values = true)]
    pub pose: String,
    /// Side-by-side PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the scene that was rendered (useful with a random scene).
    #[arg(long)]
    pub save_scene: Option<PathBuf>,
}

pub fn render(global: &GlobalArgs, a: &RenderArgs) -> Result<()> {
    let scene = load_scene(a.scene.as_ref(), global.seed)?;
    if let Some(p) = &a.save_scene {
        scene.save(p)?;
    }
    let frame = Renderer::new(scene)?.render(&parse_pose(&a.pose)?, &rig(global)?, Exec::Parallel)?;
    frame.save_side_by_side(&a.out)?;
    log::info!("rendered {}px frame -> {}", frame.resolution(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ServoArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub start: String,
    /// Pose the goal image is rendered from.
    #[arg(long, allow_hyphen_values = true)]
    pub target: String,
    /// Scene the goal image is rendered in (defaults to `--scene`).
    #[arg(long)]
    pub target_scene: Option<PathBuf>,
    /// Pose errors are measured against (defaults to `--target`).
    #[arg(long, allow_hyphen_values = true)]
    pub goal: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::Env)]
    pub mode: Mode,
    /// Servo configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mask for the global (env) cost.
    #[arg(long)]
    pub env_mask: Option<PathBuf>,
    /// Mask for the local (obj) cost.
    #[arg(long)]
    pub obj_mask: Option<PathBuf>,
    /// Trace JSONL output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn servo(global: &GlobalArgs, a: &ServoArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ServoConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ServoConfig::default(),
    };
    let rig = rig(global)?;
    let scene = SceneSpec::load(&a.scene)?;
    let renderer = Renderer::new(scene.clone())?;
    let (start, target) = (parse_pose(&a.start)?, parse_pose(&a.target)?);
    let mut setup = TrialSetup::new(&renderer, &rig, start, target, &cfg)?;
    if let Some(p) = &a.target_scene {
        setup.target = Renderer::new(SceneSpec::load(p)?)?.render(&target, &rig, Exec::Parallel)?;
    }
    if let Some(g) = &a.goal {
        setup.goal = parse_pose(g)?;
    }
    if let Some(p) = &a.env_mask {
        setup.env_mask = MaskSpec::load(p)?.rasterize(rig.width);
    }
    if let Some(p) = &a.obj_mask {
        setup.obj_mask = MaskSpec::load(p)?.rasterize(rig.width);
    }
    setup.workspace = Workspace::from_scene(&scene, cfg.workspace_margin);
    let mode = match a.mode {
        Mode::Env => TrialMode::Env,
        Mode::Full => TrialMode::Full,
    };
    let res = run_trial(&setup, &cfg, mode, global.seed, Exec::Parallel)?;
    if let Some(p) = &a.trace {
        res.save_trace(p)?;
    }
    log::info!(
        "{:?} after {} steps: e_p {:.4} m, e_r {:.4} rad, success {}",
        res.outcome,
        res.steps,
        res.e_p,
        res.e_r,
        res.success
    );
    println!(
        "{}",
        serde_json::json!({
            "e_p": res.e_p,
            "e_r": res.e_r,
            "composed": res.composed,
            "success": res.success,
            "steps": res.steps,
            "outcome": res.outcome,
        })
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of trace files (`*.jsonl`). Each subdirectory holding
    /// traces gets its own row; the `all` row covers everything.
    #[arg(long)]
    pub traces: PathBuf,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "jsonl") && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&a.traces)
        .with_context(|| format!("reading {}", a.traces.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        let files = trace_files(&d)?;
        if !files.is_empty() {
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            groups.push((name, files));
        }
    }
    let mut all: Vec<PathBuf> = trace_files(&a.traces)?;
    all.extend(groups.iter().flat_map(|(_, f)| f.iter().cloned()));
    if all.is_empty() {
        bail!("no trace files in {}", a.traces.display());
    }
    groups.push(("all".into(), all));
    let mut csv = format!("{}\n", EvalSummary::CSV_HEADER);
    for (label, files) in &groups {
        let trials = files
            .iter()
            .map(|p| load_trace(p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        csv += &evaluate(&trials)?.csv_row(label);
        csv.push('\n');
    }
    write_output(a.out.as_ref(), &csv)
}
