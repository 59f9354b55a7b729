use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, ValueEnum};
use omnivcr::flow::{virtual_camera_rotation, VcrPlan};
use omnivcr::par::Exec;
use omnivcr::render::{Renderer, Rig, SceneSpec};
use omnivcr::rng;
use omnivcr::se3::{default_lens_transform, sample_rotation_with, RotationMode};

use crate::{write_output, GlobalArgs};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// The four rotation flow fields of one VCR.
    Flow,
    /// Bilinear resampling and blending with precomputed flows.
    Warp,
    /// Flows plus warp.
    Vcr,
    /// Ray-cast one dual-fisheye frame.
    Render,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Operations to time; all of them when omitted.
    #[arg(long, value_enum)]
    pub op: Vec<Op>,
    /// Width to time at (defaults to the global `--resolution`).
    #[arg(long = "width")]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Time sequential loops instead of the worker pool.
    #[arg(long)]
    pub sequential: bool,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const CSV_HEADER: &str = "op,resolution,iters,median_ms,p95_ms,pixels_per_s";

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank median and 95th percentile.
pub fn summarize(samples_ms: &[f64]) -> Timing {
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Timing {
        median_ms: rank(0.5),
        p95_ms: rank(0.95),
    }
}

fn time<F: FnMut() -> Result<()>>(iters: usize, mut f: F) -> Result<Timing> {
    f()?;
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(summarize(&samples))
}

pub fn run(global: &GlobalArgs, a: &BenchArgs) -> Result<()> {
    anyhow::ensure!(a.iters > 0, "iters must be positive");
    let w = a.width.unwrap_or(global.resolution);
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let ops = if a.op.is_empty() {
        vec![Op::Flow, Op::Warp, Op::Vcr, Op::Render]
    } else {
        a.op.clone()
    };
    let model = omnivcr::projection::ProjectionModel::from_spec(&global.projection)?;
    let rig = Rig::with_supersampling(model.clone(), default_lens_transform(), w, global.supersample);
    let mut r = rng::stream(global.seed, &[0xBE4C]);
    let scene = SceneSpec::random(&mut r);
    let pose = scene.random_pose(&mut r, 0.5);
    let t = sample_rotation_with(&RotationMode::UniformSo3, &mut r);
    let renderer = Renderer::new(scene)?;
    let frame = renderer.render(&pose, &rig, exec)?;
    let lens = default_lens_transform();
    let plan = VcrPlan::new(&t, &lens, &model, w, exec)?;

    let mut csv = format!("{CSV_HEADER}\n");
    for op in ops {
        let timing = match op {
            Op::Flow => time(a.iters, || VcrPlan::new(&t, &lens, &model, w, exec).map(drop).map_err(Into::into))?,
            Op::Warp => time(a.iters, || plan.apply(&frame, exec).map(drop).map_err(Into::into))?,
            Op::Vcr => time(a.iters, || {
                virtual_camera_rotation(&frame, &t, &lens, &model, exec)
                    .map(drop)
                    .map_err(Into::into)
            })?,
            Op::Render => time(a.iters, || {
                drop(renderer.render_masked(&pose, &rig, None, exec));
                Ok(())
            })?,
        };
        let pixels = 2.0 * (w * w) as f64;
        let name = format!("{op:?}").to_lowercase();
        log::info!("{name}: median {:.3} ms, p95 {:.3} ms", timing.median_ms, timing.p95_ms);
        csv += &format!(
            "{name},{w},{},{:.6},{:.6},{:.1}\n",
            a.iters,
            timing.median_ms,
            timing.p95_ms,
            pixels / (timing.median_ms / 1e3)
        );
    }
    write_output(a.out.as_ref(), &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let t = summarize(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.median_ms, 3.0);
        assert_eq!(t.p95_ms, 5.0);
        let one = summarize(&[7.0]);
        assert_eq!((one.median_ms, one.p95_ms), (7.0, 7.0));
        let many: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = summarize(&many);
        assert_eq!((t.median_ms, t.p95_ms), (50.0, 95.0));
    }
}
