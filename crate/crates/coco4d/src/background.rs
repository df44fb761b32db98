//! Background 4D reconstruction: depth-lifted initialization, pseudo-video
//! construction, the progressive inpaint-project-optimize outpainting loop,
//! and dynamic-field training over all accumulated views.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{GenBackends, ScoreCondition};
use crate::config::BackgroundHyper;
use crate::error::{CocoError, Result};
use crate::foreground::{sds_step, SDS_GAMMA_RANGE};
use crate::geometry::{lift_frame, CameraPose, CameraSchedule, LiftOptions};

/// Footprint multiplier for background lifting: wider than the default so
/// obliquely viewed walls stay hole-free from neighboring cameras.
const BG_LIFT: LiftOptions = LiftOptions {
    opacity: 0.8,
    scale_multiplier: 1.2,
};
use crate::img::{
    read_f32_container, write_f32_container, Image, Mask, VideoBundle,
};
use crate::optim::{AdamState, GaussianAdam};
use crate::render::{
    render, render_backward, render_mask, render_with_cache, ImageLoss, RenderOptions,
};
use crate::scene::{
    tv_loss_grad, DeformationField, FieldArchitecture, FieldGrads, GaussianSet, TimeStamp,
};

/// One camera's supervision video. `exclude` marks pixels carrying no
/// background signal (the foreground hole in the reference video); losses
/// skip them.
#[derive(Debug, Clone)]
pub struct TrainedView {
    pub camera: CameraPose,
    pub video: VideoBundle,
    pub exclude: Option<Vec<Mask>>,
    pub strength: f64,
    pub loop_index: usize,
}

/// The trained background: growing Gaussians, the grid-featured
/// deformation field, and every camera's training video.
#[derive(Debug, Clone)]
pub struct BackgroundBundle {
    pub gaussians: GaussianSet,
    pub field: DeformationField,
    pub trained_views: Vec<TrainedView>,
    pub loop_index: usize,
}

#[derive(Serialize, Deserialize)]
struct ViewMeta {
    camera: CameraPose,
    strength: f64,
    #[serde(rename = "loop")]
    loop_index: usize,
    has_exclude: bool,
    n_frames: usize,
}

fn save_video_f32(path: &Path, frames: &[Image]) -> Result<()> {
    let (h, w) = (frames[0].height, frames[0].width);
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        data.extend_from_slice(&f.data);
    }
    write_f32_container(path, &[frames.len(), h, w, 3], &data)
}

fn load_video_f32(path: &Path) -> Result<Vec<Image>> {
    let (shape, data) = read_f32_container(path)?;
    if shape.len() != 4 || shape[3] != 3 {
        return Err(CocoError::Load(format!(
            "{}: expected NxHxWx3 container, got {shape:?}",
            path.display()
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let stride = h * w * 3;
    Ok((0..n)
        .map(|i| Image {
            height: h,
            width: w,
            data: data[i * stride..(i + 1) * stride].to_vec(),
        })
        .collect())
}

impl BackgroundBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.gaussians.save_ply(&dir.join("bg_gaussians.ply"))?;
        self.field
            .save(&dir.join("bg_deform.bin"), &dir.join("bg_deform.json"))?;
        let views_dir = dir.join("trained_views");
        std::fs::create_dir_all(&views_dir)?;
        let mut metas = Vec::new();
        for (i, view) in self.trained_views.iter().enumerate() {
            let vdir = views_dir.join(format!("view_{i:02}"));
            std::fs::create_dir_all(&vdir)?;
            save_video_f32(&vdir.join("frames.f32"), &view.video.frames)?;
            if let Some(excl) = &view.exclude {
                let mdir = vdir.join("exclude");
                std::fs::create_dir_all(&mdir)?;
                for (t, m) in excl.iter().enumerate() {
                    m.save_png(&mdir.join(format!("mask_{:04}.png", t + 1)))?;
                }
            }
            metas.push(ViewMeta {
                camera: view.camera,
                strength: view.strength,
                loop_index: view.loop_index,
                has_exclude: view.exclude.is_some(),
                n_frames: view.video.len(),
            });
        }
        std::fs::write(
            views_dir.join("views.json"),
            serde_json::to_string_pretty(&metas)?,
        )?;
        std::fs::write(
            dir.join("bg_meta.json"),
            serde_json::to_string_pretty(&self.loop_index)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<BackgroundBundle> {
        let mut gaussians = GaussianSet::load_ply(&dir.join("bg_gaussians.ply"))?;
        gaussians.max_scale = Some(BackgroundHyper::default().max_scale);
        // Re-clamp after the f32 round-trip so the truncation invariant
        // holds exactly on the loaded set.
        gaussians.truncate_scales();
        let field =
            DeformationField::load(&dir.join("bg_deform.bin"), &dir.join("bg_deform.json"))?;
        let views_dir = dir.join("trained_views");
        let metas: Vec<ViewMeta> =
            serde_json::from_str(&std::fs::read_to_string(views_dir.join("views.json"))?)?;
        let mut trained_views = Vec::new();
        for (i, meta) in metas.iter().enumerate() {
            let vdir = views_dir.join(format!("view_{i:02}"));
            let frames = load_video_f32(&vdir.join("frames.f32"))?;
            let exclude = if meta.has_exclude {
                let mut masks = Vec::new();
                for t in 0..meta.n_frames {
                    masks.push(Mask::load_png(
                        &vdir.join("exclude").join(format!("mask_{:04}.png", t + 1)),
                    )?);
                }
                Some(masks)
            } else {
                None
            };
            trained_views.push(TrainedView {
                camera: meta.camera,
                video: VideoBundle::from_frames(frames),
                exclude,
                strength: meta.strength,
                loop_index: meta.loop_index,
            });
        }
        let loop_index: usize =
            serde_json::from_str(&std::fs::read_to_string(dir.join("bg_meta.json"))?)?;
        Ok(BackgroundBundle {
            gaussians,
            field,
            trained_views,
            loop_index,
        })
    }
}

/// Mean squared error restricted to non-excluded pixels.
struct MaskedL2Loss {
    target: Image,
    exclude: Option<Mask>,
}

impl ImageLoss for MaskedL2Loss {
    fn eval(&self, out: &crate::render::RenderOutput) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.target.data.len()];
        let mut count = 0usize;
        for i in 0..self.target.data.len() {
            if let Some(ex) = &self.exclude {
                if ex.data[i / 3] {
                    continue;
                }
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        for i in 0..self.target.data.len() {
            if let Some(ex) = &self.exclude {
                if ex.data[i / 3] {
                    continue;
                }
            }
            let d = out.rgb.data[i] - self.target.data[i];
            loss += d * d / n;
            grad[i] = 2.0 * d / n;
        }
        (loss, grad, None)
    }
}

/// Mean absolute error restricted to non-excluded pixels.
struct MaskedL1Loss {
    target: Image,
    exclude: Option<Mask>,
}

impl ImageLoss for MaskedL1Loss {
    fn eval(&self, out: &crate::render::RenderOutput) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.target.data.len()];
        let mut count = 0usize;
        for i in 0..self.target.data.len() {
            if let Some(ex) = &self.exclude {
                if ex.data[i / 3] {
                    continue;
                }
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        for i in 0..self.target.data.len() {
            if let Some(ex) = &self.exclude {
                if ex.data[i / 3] {
                    continue;
                }
            }
            let d = out.rgb.data[i] - self.target.data[i];
            loss += d.abs() / n;
            grad[i] = d.signum() / n;
        }
        (loss, grad, None)
    }
}

fn bg_render_opts() -> RenderOptions {
    RenderOptions {
        background: [0.0; 3],
        ..RenderOptions::default()
    }
}

fn check_finite(loss: f64, iteration: usize, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CocoError::Diverged {
            iteration,
            context: context.into(),
        })
    }
}

/// Static refinement shared by init and fusion: photometric loss against a
/// reference image at one camera plus text+image-conditioned SDS at the
/// same camera, with scale truncation applied every step. Gradients flow
/// only into Gaussians with index >= `trainable_from` (plus every
/// opacity), which freezes pre-existing content during fusion.
#[allow(clippy::too_many_arguments)]
fn refine_static(
    set: &mut GaussianSet,
    camera: &CameraPose,
    target: &Image,
    exclude: Option<&Mask>,
    prompt: &str,
    backends: &dyn GenBackends,
    hyper: &BackgroundHyper,
    trainable_from: usize,
    sds_gamma_max: f64,
    seed: u64,
    context: &str,
) -> Result<Vec<f64>> {
    set.max_scale = Some(hyper.max_scale);
    let mut opt = GaussianAdam::new(set.len(), &hyper.lrs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = bg_render_opts();
    let loss_fn = MaskedL2Loss {
        target: target.clone(),
        exclude: exclude.cloned(),
    };
    let gamma_range = (SDS_GAMMA_RANGE.0, sds_gamma_max.max(SDS_GAMMA_RANGE.0 + 1e-6));
    let mut curve = Vec::with_capacity(hyper.static_iters);
    for it in 0..hyper.static_iters {
        let (out, cache) = render_with_cache(set, camera, &opts)?;
        let (rgb_loss, grad_rgb, _) = loss_fn.eval(&out);
        let mut grads = render_backward(set, camera, &opts, &cache, &grad_rgb, None);

        let condition = ScoreCondition {
            reference: target.clone(),
            relative_camera: None,
            text: Some(prompt.to_string()),
        };
        let sds_w = hyper.sds_weight;
        let sample = sds_step(
            &out.rgb,
            &condition,
            backends,
            gamma_range,
            &|_| sds_w,
            &mut rng,
        )?;
        let sds_grads = render_backward(set, camera, &opts, &cache, &sample.grad_rgb, None);
        grads.add(&sds_grads);

        // Freeze pre-existing Gaussians' attributes (opacity stays global).
        for i in 0..trainable_from.min(set.len()) {
            grads.positions[3 * i..3 * i + 3].fill(0.0);
            grads.rotations[4 * i..4 * i + 4].fill(0.0);
            grads.log_scales[3 * i..3 * i + 3].fill(0.0);
            grads.colors[3 * i..3 * i + 3].fill(0.0);
        }

        let total = rgb_loss + sample.surrogate_loss;
        check_finite(total, it, context)?;
        curve.push(total);
        opt.step(set, &grads);
        set.truncate_scales();
    }
    Ok(curve)
}

/// Lifts the first background frame through estimated depth and refines the
/// resulting Gaussians photometrically + with text+image SDS.
pub fn init_background(
    bg_first_frame: &Image,
    fg_mask: Option<&Mask>,
    seen_view: &CameraPose,
    prompt: &str,
    backends: &dyn GenBackends,
    hyper: &BackgroundHyper,
    sds_gamma_max: f64,
    seed: u64,
) -> Result<GaussianSet> {
    let depth = backends.estimate_depth(bg_first_frame)?;
    let valid = Mask {
        height: depth.height,
        width: depth.width,
        data: depth.valid.clone(),
    };
    let mut set = lift_frame(bg_first_frame, &depth, &valid, seen_view, BG_LIFT)?;
    set.max_scale = Some(hyper.max_scale);
    refine_static(
        &mut set,
        seen_view,
        bg_first_frame,
        fg_mask,
        prompt,
        backends,
        hyper,
        0,
        sds_gamma_max,
        seed,
        "background initialization",
    )?;
    Ok(set)
}

/// Builds the pseudo training video: each frame keeps the rendered pixels
/// outside its inpaint mask and takes the inpainted frame-1 content inside
/// it. Frame 1 therefore equals the inpainted first frame exactly.
pub fn make_pseudo_video(
    rendered: &[Image],
    masks: &[Mask],
    inpainted_first: &Image,
) -> Result<VideoBundle> {
    if rendered.len() != masks.len() {
        return Err(CocoError::InvalidArgument(format!(
            "rendered frame count {} != mask count {}",
            rendered.len(),
            masks.len()
        )));
    }
    let mut frames = Vec::with_capacity(rendered.len());
    for (frame, mask) in rendered.iter().zip(masks) {
        let mut out = frame.clone();
        for i in 0..mask.data.len() {
            if mask.data[i] {
                for k in 0..3 {
                    out.data[3 * i + k] = inpainted_first.data[3 * i + k];
                }
            }
        }
        frames.push(out);
    }
    Ok(VideoBundle::from_frames(frames))
}

/// Result of outpainting one camera: the training video for that view and
/// how many Gaussians the fusion added.
pub struct OutpaintResult {
    pub view: TrainedView,
    pub added: usize,
    pub refine_curve: Vec<f64>,
}

/// The inpaint-project-optimize step for one camera: renders all frames,
/// inpaints the uncovered region of frame 1, builds and refines the pseudo
/// video, lifts the inpainted frame-1 pixels through inpainted depth into
/// new Gaussians, fuses them, and refines the fused set at this view.
#[allow(clippy::too_many_arguments)]
pub fn outpaint_view(
    gaussians: &mut GaussianSet,
    field: &DeformationField,
    camera: &CameraPose,
    n_frames: usize,
    prompt: &str,
    strength: f64,
    backends: &dyn GenBackends,
    hyper: &BackgroundHyper,
    sds_gamma_max: f64,
    loop_index: usize,
    seed: u64,
) -> Result<OutpaintResult> {
    let opts = bg_render_opts();
    let mut rendered = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for fidx in 0..n_frames {
        let t = TimeStamp::new(fidx + 1, n_frames)?.normalized();
        let (frame, empty) = render_mask(gaussians, field, t, camera, &opts)?;
        rendered.push(frame);
        masks.push(empty);
    }

    if masks[0].count() == 0 {
        // View fully covered: nothing to inpaint or fuse.
        return Ok(OutpaintResult {
            view: TrainedView {
                camera: *camera,
                video: VideoBundle::from_frames(rendered),
                exclude: None,
                strength,
                loop_index,
            },
            added: 0,
            refine_curve: Vec::new(),
        });
    }

    let inpainted_first = backends.inpaint_image(&rendered[0], &masks[0], prompt)?;
    let pseudo = make_pseudo_video(&rendered, &masks, &inpainted_first)?;
    let training = backends.inpaint_video(&pseudo, &masks, strength)?;

    // Project: fill the rendered depth over the mask and lift the masked
    // frame-1 pixels into new Gaussians.
    let t1 = TimeStamp::new(1, n_frames)?.normalized();
    let (deformed, _) = field.apply(gaussians, t1)?;
    let depth_out = render(&deformed, camera, &opts)?;
    let filled = backends.inpaint_depth(&depth_out.depth, &masks[0])?;
    let fragment = lift_frame(&training.frames[0], &filled, &masks[0], camera, BG_LIFT)?;
    let added = fragment.len();
    let n_old = gaussians.len();
    gaussians.extend_from(&fragment);
    gaussians.max_scale = Some(hyper.max_scale);

    let refine_curve = refine_static(
        gaussians,
        camera,
        &training.frames[0],
        None,
        prompt,
        backends,
        hyper,
        n_old,
        sds_gamma_max,
        seed,
        "outpaint fusion refinement",
    )?;

    Ok(OutpaintResult {
        view: TrainedView {
            camera: *camera,
            video: training,
            exclude: None,
            strength,
            loop_index,
        },
        added,
        refine_curve,
    })
}

fn field_adam(field: &DeformationField, hyper: &BackgroundHyper) -> Vec<AdamState> {
    let zero = FieldGrads::zeros(field);
    let mut states = Vec::new();
    for (w, b) in zero.mlp_w.iter().zip(&zero.mlp_b) {
        states.push(AdamState::new(w.len(), hyper.deformation_lr));
        states.push(AdamState::new(b.len(), hyper.deformation_lr));
    }
    for g in &zero.grid {
        states.push(AdamState::new(g.len(), hyper.grid_lr));
    }
    states
}

/// Trains the deformation field over every accumulated view with an L1
/// photometric loss plus total-variation regularization of the feature
/// grids, warm-starting from the passed field. Returns the loss curve.
pub fn optimize_dynamic(
    gaussians: &GaussianSet,
    field: &mut DeformationField,
    trained_views: &[TrainedView],
    hyper: &BackgroundHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    if trained_views.is_empty() {
        return Err(CocoError::InvalidArgument(
            "dynamic optimization needs at least one trained view".into(),
        ));
    }
    let mut states = field_adam(field, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = bg_render_opts();
    // The static attributes are held fixed during field training.
    let mut frozen_set = gaussians.clone();
    frozen_set.frozen = true;
    let total_iters = hyper.dynamic_iters_per_camera * trained_views.len();
    let mut curve = Vec::with_capacity(total_iters);
    for it in 0..total_iters {
        let view = &trained_views[it % trained_views.len()];
        let n = view.video.len();
        let fidx = rng.gen_range(0..n);
        let t = TimeStamp::new(fidx + 1, n)?.normalized();
        let (deformed, dcache) = field.apply(&frozen_set, t)?;
        let (out, cache) = render_with_cache(&deformed, &view.camera, &opts)?;
        let loss_fn = MaskedL1Loss {
            target: view.video.frames[fidx].clone(),
            exclude: view.exclude.as_ref().map(|e| e[fidx].clone()),
        };
        let (l1, grad_rgb, _) = loss_fn.eval(&out);
        let grads = render_backward(&deformed, &view.camera, &opts, &cache, &grad_rgb, None);
        let mut fgrads = field.backward(&dcache, &grads);

        let tv = if field.grid.is_some() {
            let (tv, tv_grads) = tv_loss_grad(field)?;
            for (g, tg) in fgrads.grid.iter_mut().zip(&tv_grads) {
                for (a, b) in g.iter_mut().zip(tg) {
                    *a += hyper.tv_weight * b;
                }
            }
            hyper.tv_weight * tv
        } else {
            0.0
        };

        let total = l1 + tv;
        check_finite(total, it, "background dynamic optimization")?;
        curve.push(total);
        for ((state, param), grad) in states
            .iter_mut()
            .zip(field.params_mut())
            .zip(fgrads.flat())
        {
            state.step(param, grad);
        }
    }
    Ok(curve)
}

/// Builds the initial bundle around the lifted set and trains the field on
/// the reference view alone (loop 0). Returns the bundle and the loop-0
/// loss curve.
pub fn init_progressive(
    init_set: GaussianSet,
    reference_camera: &CameraPose,
    bg_video: &VideoBundle,
    fg_masks: &[Mask],
    hyper: &BackgroundHyper,
    seed: u64,
) -> Result<(BackgroundBundle, Vec<f64>)> {
    let mut bundle = BackgroundBundle {
        gaussians: init_set,
        field: DeformationField::new(FieldArchitecture::background(), seed ^ 0x6267_6664),
        trained_views: vec![TrainedView {
            camera: *reference_camera,
            video: bg_video.clone(),
            exclude: Some(fg_masks.to_vec()),
            strength: 0.0,
            loop_index: 0,
        }],
        loop_index: 0,
    };
    let curve = optimize_dynamic(
        &bundle.gaussians,
        &mut bundle.field,
        &bundle.trained_views,
        hyper,
        seed,
    )
    .map_err(|e| e.in_stage("background loop 0 (reference)"))?;
    Ok((bundle, curve))
}

/// One progressive loop: outpaint each camera, then retrain the dynamic
/// field over all accumulated views. `cameras` is the schedule row for
/// 1-based `loop_index`; returns the loop's dynamic loss curve.
#[allow(clippy::too_many_arguments)]
pub fn run_outpaint_loop(
    bundle: &mut BackgroundBundle,
    loop_index: usize,
    cameras: &[CameraPose],
    n_frames: usize,
    prompt: &str,
    strength: f64,
    backends: &dyn GenBackends,
    hyper: &BackgroundHyper,
    sds_gamma_max: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if loop_index == 0 || loop_index != bundle.loop_index + 1 {
        return Err(CocoError::InvalidArgument(format!(
            "loop index {loop_index} does not follow completed loop {}",
            bundle.loop_index
        )));
    }
    let li = loop_index - 1;
    for (ci, camera) in cameras.iter().enumerate() {
        let stage = format!("background loop {loop_index} camera {ci}");
        let result = outpaint_view(
            &mut bundle.gaussians,
            &bundle.field,
            camera,
            n_frames,
            prompt,
            strength,
            backends,
            hyper,
            sds_gamma_max,
            loop_index,
            seed ^ ((li as u64 + 1) << 16) ^ (ci as u64 + 1),
        )
        .map_err(|e| e.in_stage(&stage))?;
        bundle.trained_views.push(result.view);
    }
    let curve = optimize_dynamic(
        &bundle.gaussians,
        &mut bundle.field,
        &bundle.trained_views,
        hyper,
        seed ^ ((li as u64 + 1) << 32),
    )
    .map_err(|e| e.in_stage(&format!("background loop {loop_index} dynamic")))?;
    bundle.loop_index = loop_index;
    Ok(curve)
}

/// The full progressive loop: reference-only dynamic training, then per
/// loop outpaint each scheduled camera and retrain the field over all
/// accumulated views.
#[allow(clippy::too_many_arguments)]
pub fn progressive_outpaint(
    init_set: GaussianSet,
    bg_video: &VideoBundle,
    fg_masks: &[Mask],
    schedule: &CameraSchedule,
    prompt: &str,
    strength: f64,
    backends: &dyn GenBackends,
    hyper: &BackgroundHyper,
    sds_gamma_max: f64,
    seed: u64,
) -> Result<BackgroundBundle> {
    let n_frames = bg_video.len();
    let (mut bundle, _) = init_progressive(
        init_set,
        &schedule.reference,
        bg_video,
        fg_masks,
        hyper,
        seed,
    )?;
    for (li, cameras) in schedule.loops.iter().enumerate() {
        run_outpaint_loop(
            &mut bundle,
            li + 1,
            cameras,
            n_frames,
            prompt,
            strength,
            backends,
            hyper,
            sds_gamma_max,
            seed,
        )?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::make_backends;
    use crate::config::BackendConfig;
    use crate::geometry::make_lookat_camera;

    fn mock_backends() -> Box<dyn GenBackends> {
        make_backends(&BackendConfig::default()).unwrap()
    }

    #[test]
    fn pseudo_video_frame_one_is_inpainted_first() {
        let backends = mock_backends();
        let mut frame = Image::constant(16, 16, [0.4, 0.4, 0.4]);
        for r in 4..8 {
            for c in 4..8 {
                frame.set_pixel(r, c, [0.0, 0.0, 0.0]);
            }
        }
        let mut mask = Mask::filled(16, 16, false);
        for r in 4..8 {
            for c in 4..8 {
                mask.set(r, c, true);
            }
        }
        let inpainted = backends.inpaint_image(&frame, &mask, "x").unwrap();
        let rendered = vec![frame.clone(), frame.clone()];
        let masks = vec![mask.clone(), mask.clone()];
        let pseudo = make_pseudo_video(&rendered, &masks, &inpainted).unwrap();
        assert_eq!(pseudo.frames[0].data, inpainted.data);
    }

    #[test]
    fn pseudo_video_zero_masks_is_identity() {
        let f = Image::constant(8, 8, [0.1, 0.2, 0.3]);
        let empty = Mask::filled(8, 8, false);
        let pseudo =
            make_pseudo_video(&[f.clone(), f.clone()], &[empty.clone(), empty], &f).unwrap();
        for p in &pseudo.frames {
            assert_eq!(p.data, f.data);
        }
    }

    #[test]
    fn pseudo_video_mask_pixels_come_from_inpainted_first() {
        let f1 = Image::constant(8, 8, [0.1, 0.1, 0.1]);
        let f2 = Image::constant(8, 8, [0.9, 0.9, 0.9]);
        let inp = Image::constant(8, 8, [0.5, 0.6, 0.7]);
        let mut m2 = Mask::filled(8, 8, false);
        m2.set(3, 3, true);
        let empty = Mask::filled(8, 8, false);
        let pseudo = make_pseudo_video(&[f1, f2], &[empty, m2], &inp).unwrap();
        assert_eq!(pseudo.frames[1].pixel(3, 3), [0.5, 0.6, 0.7]);
        assert_eq!(pseudo.frames[1].pixel(3, 4), [0.9, 0.9, 0.9]);
    }

    #[test]
    fn pseudo_video_length_mismatch_rejected() {
        let f = Image::zeros(8, 8);
        let m = Mask::filled(8, 8, false);
        let err = make_pseudo_video(&[f.clone(), f.clone()], &[m], &f).unwrap_err();
        assert!(matches!(err, CocoError::InvalidArgument(_)));
    }

    #[test]
    fn lifted_count_matches_valid_pixels() {
        let res = 32;
        let backends = mock_backends();
        let frame = Image::constant(res, res, [0.5, 0.5, 0.5]);
        let depth = backends.estimate_depth(&frame).unwrap();
        let valid = Mask {
            height: res,
            width: res,
            data: depth.valid.clone(),
        };
        let cam = make_lookat_camera(0.0, 0.0, 2.5, 60.0, 0.1, 10_000.0, (res, res)).unwrap();
        let set = lift_frame(&frame, &depth, &valid, &cam, LiftOptions::default()).unwrap();
        assert_eq!(set.len(), valid.count());
        assert_eq!(set.len(), res * res);
    }

    #[test]
    fn bundle_save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut gaussians = crate::scene::init_sphere_gaussians(10, 1.0).unwrap();
        gaussians.max_scale = Some(0.2);
        let field = DeformationField::new(FieldArchitecture::background(), 9);
        let cam = make_lookat_camera(0.0, 30.0, 2.5, 60.0, 0.1, 10_000.0, (8, 8)).unwrap();
        let mut ex = Mask::filled(8, 8, false);
        ex.set(1, 2, true);
        let frames = vec![
            Image::constant(8, 8, [0.25, 0.5, 0.75]),
            Image::constant(8, 8, [0.1, 0.2, 0.3]),
        ];
        let bundle = BackgroundBundle {
            gaussians,
            field,
            trained_views: vec![TrainedView {
                camera: cam,
                video: VideoBundle::from_frames(frames.clone()),
                exclude: Some(vec![ex.clone(), ex.clone()]),
                strength: 0.7,
                loop_index: 1,
            }],
            loop_index: 1,
        };
        bundle.save(dir.path()).unwrap();
        let loaded = BackgroundBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.trained_views.len(), 1);
        assert_eq!(loaded.loop_index, 1);
        let v = &loaded.trained_views[0];
        assert_eq!(v.camera, cam);
        assert_eq!(v.strength, 0.7);
        assert_eq!(v.loop_index, 1);
        assert_eq!(v.exclude.as_ref().unwrap()[0].data, ex.data);
        // Persist through f32: the round trip must preserve the f32 image
        // of the data exactly.
        for (a, b) in v.video.frames.iter().zip(&frames) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn dynamic_requires_views() {
        let gaussians = crate::scene::init_sphere_gaussians(5, 1.0).unwrap();
        let mut field = DeformationField::new(FieldArchitecture::background(), 1);
        let err = optimize_dynamic(&gaussians, &mut field, &[], &BackgroundHyper::default(), 1)
            .unwrap_err();
        assert!(matches!(err, CocoError::InvalidArgument(_)));
    }
}
