//! Depth-aware composition of the trained foreground into the background:
//! depth-range alignment, screen-space scale correction, trajectory
//! rescaling, and layered rendering with a per-pixel depth test.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::background::BackgroundBundle;
use crate::backends::GenBackends;
use crate::config::TrajectoryRule;
use crate::error::{CocoError, Result};
use crate::foreground::{ForegroundBundle, Trajectory};
use crate::geometry::CameraPose;
use crate::img::{DepthMap, Image, Mask};
use crate::render::{render, RenderOptions};
use crate::scene::TimeStamp;

/// The derived alignment parameters of a composed scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionParams {
    /// Relative scaling factor between background and reference depth
    /// ranges.
    pub delta: f64,
    /// The foreground layer's depth in background coordinates.
    pub depth_shift: f64,
    /// Screen-space scale correction from bounding-box width ratio.
    pub epsilon: f64,
    /// The rescaled trajectory actually used at render time.
    pub composed_trajectory: Trajectory,
}

impl CompositionParams {
    pub fn check(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(CocoError::Validation(format!(
                "composition delta {} must be positive",
                self.delta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(CocoError::Validation(format!(
                "composition epsilon {} must be positive",
                self.epsilon
            )));
        }
        self.composed_trajectory.check()?;
        Ok(())
    }
}

/// Serializable run metadata stored beside the params.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub prompt: String,
    pub n_frames: usize,
    pub resolution: usize,
    pub seen_view: CameraPose,
    pub trajectory_rule: TrajectoryRule,
}

/// The full composed scene: both trained bundles, the alignment
/// parameters, and the raw inputs they were derived from.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub foreground: ForegroundBundle,
    pub background: BackgroundBundle,
    pub params: CompositionParams,
    pub ref_depth: DepthMap,
    pub bg_depth: DepthMap,
    /// Foreground mask of reference frame 1 (ground truth from
    /// segmentation).
    pub fg_mask: Mask,
    /// Coverage mask of the composed foreground render at frame 1.
    pub rendered_fg_mask: Mask,
    pub metadata: SceneMetadata,
}

fn range_over(depth: &DepthMap, include: impl Fn(usize) -> bool) -> Option<(f64, f64)> {
    let mut out: Option<(f64, f64)> = None;
    for i in 0..depth.values.len() {
        if !depth.valid[i] || !include(i) {
            continue;
        }
        let v = depth.values[i];
        out = Some(match out {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }
    out
}

/// Ratio of background to reference depth value-ranges over the
/// non-foreground region.
pub fn relative_depth_scale(
    bg_depth: &DepthMap,
    ref_depth: &DepthMap,
    fg_mask: &Mask,
) -> Result<f64> {
    let outside = |i: usize| !fg_mask.data[i];
    let (b_lo, b_hi) = range_over(bg_depth, outside).ok_or_else(|| {
        CocoError::InvalidArgument("no valid background depth outside the mask".into())
    })?;
    let (r_lo, r_hi) = range_over(ref_depth, outside).ok_or_else(|| {
        CocoError::InvalidArgument("no valid reference depth outside the mask".into())
    })?;
    let denom = r_hi - r_lo;
    if denom == 0.0 {
        return Err(CocoError::DegenerateDepth(
            "reference depth is constant outside the mask".into(),
        ));
    }
    Ok((b_hi - b_lo) / denom)
}

/// The foreground layer depth: the object's mean reference depth above the
/// scene minimum, rescaled into background units and re-anchored at the
/// background minimum.
pub fn foreground_depth_shift(
    ref_depth: &DepthMap,
    fg_mask: &Mask,
    delta: f64,
    bg_depth: &DepthMap,
) -> Result<f64> {
    if fg_mask.count() == 0 {
        return Err(CocoError::InvalidArgument(
            "foreground mask is empty".into(),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..ref_depth.values.len() {
        if fg_mask.data[i] && ref_depth.valid[i] {
            sum += ref_depth.values[i];
            n += 1;
        }
    }
    if n == 0 {
        return Err(CocoError::InvalidArgument(
            "no valid reference depth under the foreground mask".into(),
        ));
    }
    let mean_fg = sum / n as f64;
    let ref_min = range_over(ref_depth, |_| true)
        .ok_or_else(|| CocoError::InvalidArgument("reference depth has no valid pixels".into()))?
        .0;
    let bg_min = range_over(bg_depth, |_| true)
        .ok_or_else(|| CocoError::InvalidArgument("background depth has no valid pixels".into()))?
        .0;
    Ok((mean_fg - ref_min) * delta + bg_min)
}

fn bbox_width(mask: &Mask) -> Result<f64> {
    let (_, c0, _, c1) = mask
        .bbox()
        .ok_or_else(|| CocoError::InvalidArgument("mask is empty".into()))?;
    let w = (c1 - c0 + 1) as f64;
    if w == 0.0 {
        return Err(CocoError::DegenerateMask(
            "zero-width mask bounding box".into(),
        ));
    }
    Ok(w)
}

/// Width ratio between the ground-truth and rendered foreground bounding
/// boxes.
pub fn screen_scale_factor(rendered_mask: &Mask, gt_mask: &Mask) -> Result<f64> {
    Ok(bbox_width(gt_mask)? / bbox_width(rendered_mask)?)
}

/// Rescales the trajectory by the screen factor. The per-interval rule
/// scales each step between neighboring shifts; the literal rule repeats
/// the first interval for every step.
pub fn rescale_trajectory(
    trajectory: &Trajectory,
    epsilon: f64,
    rule: TrajectoryRule,
) -> Result<Trajectory> {
    if !(epsilon > 0.0) {
        return Err(CocoError::InvalidArgument(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    trajectory.check()?;
    let n = trajectory.n;
    let mut shifts = Vec::with_capacity(n);
    if n > 0 {
        shifts.push(trajectory.shifts[0]);
        for t in 1..n {
            let prev_hat = shifts[t - 1];
            let step = match rule {
                TrajectoryRule::PerInterval => [
                    trajectory.shifts[t][0] - trajectory.shifts[t - 1][0],
                    trajectory.shifts[t][1] - trajectory.shifts[t - 1][1],
                ],
                TrajectoryRule::Literal => [
                    trajectory.shifts[1][0] - trajectory.shifts[0][0],
                    trajectory.shifts[1][1] - trajectory.shifts[0][1],
                ],
            };
            shifts.push([
                epsilon * step[0] + prev_hat[0],
                epsilon * step[1] + prev_hat[1],
            ]);
        }
    }
    Ok(Trajectory {
        shifts,
        scales: trajectory.scales.iter().map(|s| epsilon * s).collect(),
        n,
    })
}

fn render_opts() -> RenderOptions {
    RenderOptions {
        background: [0.0; 3],
        ..RenderOptions::default()
    }
}

/// Renders the centered foreground at `t` (1-based frame index) from the
/// given camera, returning RGB and alpha.
fn render_fg_layer(
    fg: &ForegroundBundle,
    camera: &CameraPose,
    frame_index: usize,
    n: usize,
) -> Result<(Image, Vec<f64>)> {
    let t = TimeStamp::new(frame_index, n)?.normalized();
    let (deformed, _) = fg.field.apply(&fg.gaussians, t)?;
    let out = render(&deformed, camera, &render_opts())?;
    Ok((out.rgb, out.alpha))
}

/// Bilinear scalar sample with zero padding, pixel centers at +0.5.
fn sample_scalar(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let fetch = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            data[r as usize * w + c as usize]
        }
    };
    let p00 = fetch(y0 as i64, x0 as i64);
    let p01 = fetch(y0 as i64, x0 as i64 + 1);
    let p10 = fetch(y0 as i64 + 1, x0 as i64);
    let p11 = fetch(y0 as i64 + 1, x0 as i64 + 1);
    (p00 * (1.0 - fx) + p01 * fx) * (1.0 - fy) + (p10 * (1.0 - fx) + p11 * fx) * fy
}

/// Warps the fg layer (rgb + alpha) from canonical placement to shift
/// `tau`, scale `s`.
fn warp_layer(
    rgb: &Image,
    alpha: &[f64],
    tau: [f64; 2],
    s: f64,
) -> (Image, Vec<f64>) {
    let (h, w) = (rgb.height, rgb.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out_rgb = Image::zeros(h, w);
    let mut out_a = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let x = cx + (c as f64 + 0.5 - tau[0]) / s;
            let y = cy + (r as f64 + 0.5 - tau[1]) / s;
            let gx = x - 0.5;
            let gy = y - 0.5;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let mut px = [0.0; 3];
            for k in 0..3 {
                let fetch = |rr: i64, cc: i64| -> f64 {
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        0.0
                    } else {
                        rgb.data[(rr as usize * w + cc as usize) * 3 + k]
                    }
                };
                let p00 = fetch(y0 as i64, x0 as i64);
                let p01 = fetch(y0 as i64, x0 as i64 + 1);
                let p10 = fetch(y0 as i64 + 1, x0 as i64);
                let p11 = fetch(y0 as i64 + 1, x0 as i64 + 1);
                px[k] =
                    (p00 * (1.0 - fx) + p01 * fx) * (1.0 - fy) + (p10 * (1.0 - fx) + p11 * fx) * fy;
            }
            out_rgb.set_pixel(r, c, px);
            out_a[r * w + c] = sample_scalar(alpha, h, w, x, y);
        }
    }
    (out_rgb, out_a)
}

/// Derives all composition parameters and persists the scene to `out_dir`.
/// Depth maps are written first and re-read, so the stored parameters are
/// exact functions of the persisted raw data.
pub fn compose_scene(
    foreground: ForegroundBundle,
    background: BackgroundBundle,
    ref_frame: &Image,
    fg_masks: &[Mask],
    backends: &dyn GenBackends,
    prompt: &str,
    trajectory_rule: TrajectoryRule,
    out_dir: &Path,
) -> Result<SceneBundle> {
    let n = foreground.trajectory.n;
    if fg_masks.is_empty() {
        return Err(CocoError::InvalidArgument("no foreground masks".into()));
    }
    let camera = foreground.seen_view;
    std::fs::create_dir_all(out_dir)?;

    // Reference depth via the depth backend; background depth via a render
    // at the reference camera, frame 1.
    let ref_depth_raw = backends.estimate_depth(ref_frame)?;
    let t1 = TimeStamp::new(1, n)?.normalized();
    let (bg_deformed, _) = background.field.apply(&background.gaussians, t1)?;
    let bg_out = render(&bg_deformed, &camera, &render_opts())?;

    // The rendered fg coverage at frame 1 under the original trajectory.
    let (fg_rgb, fg_alpha) = render_fg_layer(&foreground, &camera, 1, n)?;
    let _ = fg_rgb;
    let (_, warped_a) = warp_layer(
        &Image::zeros(camera.resolution.0, camera.resolution.1),
        &fg_alpha,
        foreground.trajectory.shifts[0],
        foreground.trajectory.scales[0],
    );
    let rendered_fg_mask = Mask {
        height: camera.resolution.0,
        width: camera.resolution.1,
        data: warped_a.iter().map(|&a| a >= 0.5).collect(),
    };

    // Persist raw inputs, then reload so stored parameters derive from the
    // persisted bits exactly.
    ref_depth_raw.save_f32(&out_dir.join("ref_depth.f32"))?;
    bg_out.depth.save_f32(&out_dir.join("bg_depth.f32"))?;
    fg_masks[0].save_png(&out_dir.join("fg_mask.png"))?;
    rendered_fg_mask.save_png(&out_dir.join("rendered_fg_mask.png"))?;
    let ref_depth = DepthMap::load_f32(&out_dir.join("ref_depth.f32"))?;
    let bg_depth = DepthMap::load_f32(&out_dir.join("bg_depth.f32"))?;

    let delta = relative_depth_scale(&bg_depth, &ref_depth, &fg_masks[0])?;
    let depth_shift = foreground_depth_shift(&ref_depth, &fg_masks[0], delta, &bg_depth)?;
    let epsilon = screen_scale_factor(&rendered_fg_mask, &fg_masks[0])?;
    let composed_trajectory =
        rescale_trajectory(&foreground.trajectory, epsilon, trajectory_rule)?;

    let params = CompositionParams {
        delta,
        depth_shift,
        epsilon,
        composed_trajectory,
    };
    params.check()?;
    let metadata = SceneMetadata {
        prompt: prompt.to_string(),
        n_frames: n,
        resolution: camera.resolution.0,
        seen_view: camera,
        trajectory_rule,
    };

    let scene = SceneBundle {
        foreground,
        background,
        params,
        ref_depth,
        bg_depth,
        fg_mask: fg_masks[0].clone(),
        rendered_fg_mask,
        metadata,
    };
    scene.save(out_dir)?;
    Ok(scene)
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    params: CompositionParams,
    metadata: SceneMetadata,
}

impl SceneBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let doc = SceneDoc {
            params: self.params.clone(),
            metadata: self.metadata.clone(),
        };
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&doc)?)?;
        self.foreground.save(&dir.join("fg"))?;
        self.background.save(&dir.join("bg"))?;
        self.ref_depth.save_f32(&dir.join("ref_depth.f32"))?;
        self.bg_depth.save_f32(&dir.join("bg_depth.f32"))?;
        self.fg_mask.save_png(&dir.join("fg_mask.png"))?;
        self.rendered_fg_mask
            .save_png(&dir.join("rendered_fg_mask.png"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SceneBundle> {
        let doc: SceneDoc =
            serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
        Ok(SceneBundle {
            foreground: ForegroundBundle::load(&dir.join("fg"))?,
            background: BackgroundBundle::load(&dir.join("bg"))?,
            params: doc.params,
            ref_depth: DepthMap::load_f32(&dir.join("ref_depth.f32"))?,
            bg_depth: DepthMap::load_f32(&dir.join("bg_depth.f32"))?,
            fg_mask: Mask::load_png(&dir.join("fg_mask.png"))?,
            rendered_fg_mask: Mask::load_png(&dir.join("rendered_fg_mask.png"))?,
            metadata: doc.metadata,
        })
    }
}

/// Output of composed rendering: the frame plus the foreground layer's
/// coverage after warping and the depth test.
pub struct ComposedFrame {
    pub rgb: Image,
    pub fg_visible: Mask,
}

/// Renders the composed scene at 1-based frame `t`: background first, then
/// the warped foreground layer composited where its assigned depth wins
/// the per-pixel test. With `include_fg` false the output is exactly the
/// background render.
pub fn render_composed(
    scene: &SceneBundle,
    camera: &CameraPose,
    frame_index: usize,
    include_fg: bool,
) -> Result<ComposedFrame> {
    let n = scene.metadata.n_frames;
    if frame_index == 0 || frame_index > n {
        return Err(CocoError::InvalidArgument(format!(
            "frame index {frame_index} outside [1, {n}]"
        )));
    }
    let t = TimeStamp::new(frame_index, n)?.normalized();
    let (bg_deformed, _) = scene
        .background
        .field
        .apply(&scene.background.gaussians, t)?;
    let bg = render(&bg_deformed, camera, &render_opts())?;
    let (h, w) = (bg.rgb.height, bg.rgb.width);
    if !include_fg {
        return Ok(ComposedFrame {
            rgb: bg.rgb,
            fg_visible: Mask::filled(h, w, false),
        });
    }

    let (fg_rgb, fg_alpha) = render_fg_layer(&scene.foreground, camera, frame_index, n)?;
    let tau = scene.params.composed_trajectory.shifts[frame_index - 1];
    let s = scene.params.composed_trajectory.scales[frame_index - 1];
    let (wrgb, walpha) = warp_layer(&fg_rgb, &fg_alpha, tau, s);

    let df = scene.params.depth_shift;
    let mut out = bg.rgb;
    let mut visible = Mask::filled(h, w, false);
    for i in 0..h * w {
        let a = walpha[i];
        if a <= 0.0 {
            continue;
        }
        let bg_d_valid = bg.depth.valid[i];
        let fg_wins = !bg_d_valid || df < bg.depth.values[i];
        if !fg_wins {
            continue;
        }
        for k in 0..3 {
            out.data[3 * i + k] = wrgb.data[3 * i + k] + (1.0 - a) * out.data[3 * i + k];
        }
        if a >= 0.5 {
            visible.data[i] = true;
        }
    }
    Ok(ComposedFrame {
        rgb: out,
        fg_visible: visible,
    })
}
