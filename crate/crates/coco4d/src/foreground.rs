//! Foreground 4D reconstruction: frame normalization, static Gaussian
//! reconstruction, motion training of the deformation field, and
//! screen-space trajectory refinement.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{add_noise, GenBackends, ScoreCondition};
use crate::config::ForegroundHyper;
use crate::error::{CocoError, Result};
use crate::geometry::{make_lookat_camera, CameraPose};
use crate::img::{Image, Mask, VideoBundle};
use crate::optim::{AdamState, GaussianAdam};
use crate::render::{
    render_backward, render_with_cache, ImageLoss, L2TargetLoss, RenderOptions,
};
use crate::scene::{
    densify_and_prune, init_sphere_gaussians, rigidity_loss_grad, DeformationField,
    DensifyOptions, FieldArchitecture, GaussianSet, NeighborGraph, TimeStamp,
};

/// Fraction of the frame height that the normalized object bounding box
/// spans in canonical (centered) frames.
pub const CANONICAL_EXTENT: f64 = 0.8;

/// Noise-level range sampled for SDS steps.
pub const SDS_GAMMA_RANGE: (f64, f64) = (0.02, 0.5);

/// Per-frame screen-space placement of the canonical object: a pixel shift
/// (x, y) of the object center and an isotropic scale relative to the
/// canonical extent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub shifts: Vec<[f64; 2]>,
    pub scales: Vec<f64>,
    pub n: usize,
}

impl Trajectory {
    pub fn check(&self) -> Result<()> {
        if self.shifts.len() != self.n || self.scales.len() != self.n {
            return Err(CocoError::InvalidArgument(format!(
                "trajectory lengths {}/{} != n {}",
                self.shifts.len(),
                self.scales.len(),
                self.n
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0)) {
            return Err(CocoError::InvalidArgument(format!(
                "trajectory scale {s} must be positive"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a> {
            shifts: &'a [[f64; 2]],
            scales: &'a [f64],
        }
        let doc = Doc {
            shifts: &self.shifts,
            scales: &self.scales,
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trajectory> {
        #[derive(Deserialize)]
        struct Doc {
            shifts: Vec<[f64; 2]>,
            scales: Vec<f64>,
        }
        let doc: Doc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let t = Trajectory {
            n: doc.shifts.len(),
            shifts: doc.shifts,
            scales: doc.scales,
        };
        t.check()?;
        Ok(t)
    }
}

/// The trained foreground: frozen canonical Gaussians, their deformation
/// field, the screen-space trajectory, and the seen-view camera.
#[derive(Debug, Clone)]
pub struct ForegroundBundle {
    pub gaussians: GaussianSet,
    pub field: DeformationField,
    pub trajectory: Trajectory,
    pub seen_view: CameraPose,
}

impl ForegroundBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.gaussians.save_ply(&dir.join("fg_gaussians.ply"))?;
        self.field
            .save(&dir.join("fg_deform.bin"), &dir.join("fg_deform.json"))?;
        self.trajectory.save(&dir.join("trajectory.json"))?;
        std::fs::write(
            dir.join("fg_meta.json"),
            serde_json::to_string_pretty(&self.seen_view)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ForegroundBundle> {
        let mut gaussians = GaussianSet::load_ply(&dir.join("fg_gaussians.ply"))?;
        gaussians.frozen = true;
        let field =
            DeformationField::load(&dir.join("fg_deform.bin"), &dir.join("fg_deform.json"))?;
        let trajectory = Trajectory::load(&dir.join("trajectory.json"))?;
        let seen_view: CameraPose =
            serde_json::from_str(&std::fs::read_to_string(dir.join("fg_meta.json"))?)?;
        Ok(ForegroundBundle {
            gaussians,
            field,
            trajectory,
            seen_view,
        })
    }
}

/// Bilinear sample in continuous pixel coordinates (pixel centers at
/// integer + 0.5), black outside the image bounds. Also returns the
/// gradient of the sampled value w.r.t. (x, y).
fn sample_padded(img: &Image, x: f64, y: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let mut val = [0.0; 3];
    let mut dvx = [0.0; 3];
    let mut dvy = [0.0; 3];
    let fetch = |r: i64, c: i64| -> [f64; 3] {
        if r < 0 || c < 0 || r >= img.height as i64 || c >= img.width as i64 {
            [0.0; 3]
        } else {
            img.pixel(r as usize, c as usize)
        }
    };
    let p00 = fetch(y0 as i64, x0 as i64);
    let p01 = fetch(y0 as i64, x0 as i64 + 1);
    let p10 = fetch(y0 as i64 + 1, x0 as i64);
    let p11 = fetch(y0 as i64 + 1, x0 as i64 + 1);
    for k in 0..3 {
        let top = p00[k] * (1.0 - fx) + p01[k] * fx;
        let bot = p10[k] * (1.0 - fx) + p11[k] * fx;
        val[k] = top * (1.0 - fy) + bot * fy;
        dvx[k] = (p01[k] - p00[k]) * (1.0 - fy) + (p11[k] - p10[k]) * fy;
        dvy[k] = bot - top;
    }
    (val, dvx, dvy)
}

/// Warps a full frame into canonical placement: the object bounding-box
/// center `tau` maps to the image center and sizes shrink by `1/s`.
pub fn warp_to_canonical(frame: &Image, tau: [f64; 2], s: f64) -> Image {
    let (h, w) = (frame.height, frame.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let x = tau[0] + s * (c as f64 + 0.5 - cx);
            let y = tau[1] + s * (r as f64 + 0.5 - cy);
            let (v, _, _) = sample_padded(frame, x, y);
            out.set_pixel(r, c, v);
        }
    }
    out
}

/// Inverse of [`warp_to_canonical`]: places the canonical frame back at
/// shift `tau` and scale `s`.
pub fn warp_from_canonical(canonical: &Image, tau: [f64; 2], s: f64) -> Image {
    let (h, w) = (canonical.height, canonical.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let x = cx + (c as f64 + 0.5 - tau[0]) / s;
            let y = cy + (r as f64 + 0.5 - tau[1]) / s;
            let (v, _, _) = sample_padded(canonical, x, y);
            out.set_pixel(r, c, v);
        }
    }
    out
}

fn warp_mask_to_canonical(mask: &Mask, tau: [f64; 2], s: f64) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Mask::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            let x = tau[0] + s * (c as f64 + 0.5 - cx);
            let y = tau[1] + s * (r as f64 + 0.5 - cy);
            let sr = (y - 0.5).round();
            let sc = (x - 0.5).round();
            if sr >= 0.0 && sc >= 0.0 && (sr as usize) < h && (sc as usize) < w {
                out.set(r, c, mask.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

/// Centers and rescales the masked foreground in every frame so the object
/// bounding box sits at the image center with a fixed canonical extent.
/// Returns the centered video (frames + masks) and the per-frame
/// (shift, scale) needed to undo the warp.
pub fn normalize_frames(fg_video: &VideoBundle) -> Result<(VideoBundle, Trajectory)> {
    fg_video.check_aligned()?;
    let masks = fg_video
        .masks
        .as_ref()
        .ok_or_else(|| CocoError::InvalidArgument("foreground video has no masks".into()))?;
    let n = fg_video.frames.len();
    let mut shifts = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut out_masks = Vec::with_capacity(n);
    for (i, (frame, mask)) in fg_video.frames.iter().zip(masks).enumerate() {
        let (r0, c0, r1, c1) = mask
            .bbox()
            .ok_or(CocoError::MissingForeground { frame: i + 1 })?;
        let extent = ((r1 - r0 + 1).max(c1 - c0 + 1)) as f64;
        let s = extent / (CANONICAL_EXTENT * frame.height as f64);
        let tau = [
            (c0 + c1 + 1) as f64 / 2.0,
            (r0 + r1 + 1) as f64 / 2.0,
        ];
        frames.push(warp_to_canonical(frame, tau, s));
        out_masks.push(warp_mask_to_canonical(mask, tau, s));
        shifts.push(tau);
        scales.push(s);
    }
    let trajectory = Trajectory { shifts, scales, n };
    trajectory.check()?;
    Ok((
        VideoBundle {
            frames,
            masks: Some(out_masks),
            depth: None,
        },
        trajectory,
    ))
}

/// One sampled SDS contribution: the gradient to inject into the rendered
/// image and a surrogate loss value whose gradient it is.
pub struct SdsSample {
    pub grad_rgb: Vec<f64>,
    pub surrogate_loss: f64,
    pub gamma: f64,
}

/// Draws a noise level and a noise image, scores the noised render through
/// the backend, and returns `w(gamma) * (eps_hat - eps)` as a
/// straight-through gradient on the rendered pixels (normalized per pixel
/// channel so it is commensurate with mean-squared photometric losses).
pub fn sds_step(
    rendered: &Image,
    condition: &ScoreCondition,
    backends: &dyn GenBackends,
    gamma_range: (f64, f64),
    weight_fn: &dyn Fn(f64) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<SdsSample> {
    let gamma = rng.gen_range(gamma_range.0..=gamma_range.1);
    let w = weight_fn(gamma);
    let npix = rendered.data.len() as f64;
    if w == 0.0 {
        return Ok(SdsSample {
            grad_rgb: vec![0.0; rendered.data.len()],
            surrogate_loss: 0.0,
            gamma,
        });
    }
    let mut eps = Image::zeros(rendered.height, rendered.width);
    for v in eps.data.iter_mut() {
        // Box-Muller standard normal.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let noisy = add_noise(rendered, &eps, gamma)?;
    let eps_hat = backends.score_epsilon(&noisy, condition, gamma)?;
    let mut grad_rgb = vec![0.0; rendered.data.len()];
    let mut surrogate = 0.0;
    for (i, g) in grad_rgb.iter_mut().enumerate() {
        *g = w * (eps_hat.data[i] - eps.data[i]) / npix;
        surrogate += *g * rendered.data[i];
    }
    Ok(SdsSample {
        grad_rgb,
        surrogate_loss: surrogate,
        gamma,
    })
}

/// The fixed azimuth ring of SDS cameras plus a jittered elevation.
fn sample_sds_camera(
    seen_view: &CameraPose,
    hyper: &ForegroundHyper,
    rng: &mut ChaCha8Rng,
) -> Result<CameraPose> {
    let steps = (360.0 / hyper.sds_azimuth_interval).round() as usize;
    let az = rng.gen_range(0..steps) as f64 * hyper.sds_azimuth_interval;
    let elev = rng.gen_range(-hyper.sds_elevation_jitter..=hyper.sds_elevation_jitter);
    make_lookat_camera(
        elev,
        az,
        seen_view.radius,
        seen_view.fovy_deg,
        seen_view.near,
        seen_view.far,
        seen_view.resolution,
    )
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

/// Per-iteration logged loss components of a training loop. `total` is the
/// exact sum of the components at each iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossLog {
    pub rgb: Vec<f64>,
    pub sds: Vec<f64>,
    pub rigid: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossLog {
    pub fn push(&mut self, rgb: f64, sds: f64, rigid: f64) -> f64 {
        let total = rgb + sds + rigid;
        self.rgb.push(rgb);
        self.sds.push(sds);
        self.rigid.push(rigid);
        self.total.push(total);
        total
    }
}

/// Reconstructs static canonical Gaussians from the centered first
/// foreground frame, supervised by the seen view photometrically and by
/// SDS from a ring of unseen cameras. Returns the set marked frozen.
pub fn reconstruct_static(
    first_frame: &Image,
    seen_view: &CameraPose,
    backends: &dyn GenBackends,
    hyper: &ForegroundHyper,
    seed: u64,
) -> Result<(GaussianSet, LossLog)> {
    let mut set = init_sphere_gaussians(hyper.init_points, 1.1)?;
    let mut opt = GaussianAdam::new(set.len(), &hyper.lrs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RenderOptions {
        background: [0.0; 3],
        ..RenderOptions::default()
    };
    let loss_fn = L2TargetLoss {
        target: first_frame.clone(),
    };
    let dopts = DensifyOptions {
        grad_threshold: hyper.densify_threshold,
        ..DensifyOptions::default()
    };
    let mut accum = vec![0.0; set.len()];
    let mut log = LossLog::default();
    for it in 0..hyper.static_iters {
        let (out, cache) = render_with_cache(&set, seen_view, &opts)?;
        let (rgb_loss, grad_rgb, grad_alpha) = loss_fn.eval(&out);
        let mut grads =
            render_backward(&set, seen_view, &opts, &cache, &grad_rgb, grad_alpha.as_deref());

        let cam = sample_sds_camera(seen_view, hyper, &mut rng)?;
        let (sds_out, sds_cache) = render_with_cache(&set, &cam, &opts)?;
        let condition = ScoreCondition {
            reference: first_frame.clone(),
            relative_camera: Some(cam.clone()),
            text: None,
        };
        let sds_w = hyper.sds_weight;
        let sample = sds_step(
            &sds_out.rgb,
            &condition,
            backends,
            SDS_GAMMA_RANGE,
            &|_| sds_w,
            &mut rng,
        )?;
        let sds_grads =
            render_backward(&set, &cam, &opts, &sds_cache, &sample.grad_rgb, None);
        grads.add(&sds_grads);

        let total = log.push(rgb_loss, sample.surrogate_loss, 0.0);
        check_finite(total, it, "foreground static reconstruction")?;

        for (i, a) in accum.iter_mut().enumerate() {
            let g = &grads.positions[3 * i..3 * i + 3];
            *a += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        }
        opt.step(&mut set, &grads);

        if (it + 1) % hyper.densify_interval == 0 && it + 1 < hyper.static_iters {
            let (new_set, _, mapping) = densify_and_prune(&set, &accum, &dopts);
            opt.reindex(&mapping);
            set = new_set;
            accum = vec![0.0; set.len()];
        }
    }
    set.frozen = true;
    Ok((set, log))
}

/// Trains the deformation field against the centered video (seen view) plus
/// per-timestamp SDS from one unseen camera and a rigidity regularizer.
/// The static set stays frozen and bitwise unchanged.
pub fn optimize_motion(
    set: &GaussianSet,
    seen_view: &CameraPose,
    centered_video: &VideoBundle,
    backends: &dyn GenBackends,
    hyper: &ForegroundHyper,
    seed: u64,
) -> Result<(DeformationField, LossLog)> {
    if !set.frozen {
        return Err(CocoError::InvalidArgument(
            "motion optimization requires a frozen static set".into(),
        ));
    }
    let n_frames = centered_video.frames.len();
    if n_frames == 0 {
        return Err(CocoError::InvalidArgument("empty centered video".into()));
    }
    let field = DeformationField::new(FieldArchitecture::foreground(), seed ^ 0x6465_666f);
    let mut field = field;
    let mut opts_states: Vec<AdamState> = field
        .params()
        .iter()
        .map(|p| AdamState::new(p.len(), hyper.deformation_lr))
        .collect();
    let graph = NeighborGraph::build(set, hyper.rigidity_k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ropts = RenderOptions {
        background: [0.0; 3],
        ..RenderOptions::default()
    };
    let mut log = LossLog::default();
    for it in 0..hyper.motion_iters {
        let mut fgrads: Option<crate::scene::FieldGrads> = None;
        let mut vid_sum = 0.0;
        let mut rigid_sum = 0.0;
        let mut sds_sum = 0.0;
        let batch: Vec<usize> = (0..hyper.motion_batch)
            .map(|_| rng.gen_range(0..n_frames))
            .collect();
        for (bi, &fidx) in batch.iter().enumerate() {
            let t = TimeStamp::new(fidx + 1, n_frames)?.normalized();
            let (deformed, dcache) = field.apply(set, t)?;
            let (out, cache) = render_with_cache(&deformed, seen_view, &ropts)?;
            let loss_fn = L2TargetLoss {
                target: centered_video.frames[fidx].clone(),
            };
            let (vid_loss, grad_rgb, _) = loss_fn.eval(&out);
            let mut grads =
                render_backward(&deformed, seen_view, &ropts, &cache, &grad_rgb, None);

            let (rigid_raw, rigid_grad) =
                rigidity_loss_grad(set, &deformed.positions, &graph)?;
            for (g, rg) in grads.positions.iter_mut().zip(&rigid_grad) {
                *g += hyper.rigidity_weight * rg;
            }
            vid_sum += vid_loss;
            rigid_sum += hyper.rigidity_weight * rigid_raw;

            // One unseen-camera SDS sample per iteration, at the first
            // timestamp of the batch.
            if bi == 0 {
                let cam = sample_sds_camera(seen_view, hyper, &mut rng)?;
                let (sds_out, sds_cache) = render_with_cache(&deformed, &cam, &ropts)?;
                let condition = ScoreCondition {
                    reference: centered_video.frames[fidx].clone(),
                    relative_camera: Some(cam.clone()),
                    text: None,
                };
                let sds_w = hyper.sds_weight;
                let sample = sds_step(
                    &sds_out.rgb,
                    &condition,
                    backends,
                    SDS_GAMMA_RANGE,
                    &|_| sds_w,
                    &mut rng,
                )?;
                let sds_grads =
                    render_backward(&deformed, &cam, &ropts, &sds_cache, &sample.grad_rgb, None);
                grads.add(&sds_grads);
                sds_sum += sample.surrogate_loss;
            }

            let fg = field.backward(&dcache, &grads);
            match &mut fgrads {
                None => fgrads = Some(fg),
                Some(acc) => acc.add(&fg),
            }
        }
        let inv_b = 1.0 / hyper.motion_batch as f64;
        let total = log.push(vid_sum * inv_b, sds_sum, rigid_sum * inv_b);
        check_finite(total, it, "foreground motion optimization")?;
        let fgrads = fgrads.unwrap();
        for ((state, param), grad) in opts_states
            .iter_mut()
            .zip(field.params_mut())
            .zip(fgrads.flat())
        {
            let scaled: Vec<f64> = grad.iter().map(|g| g * inv_b).collect();
            state.step(param, &scaled);
        }
    }
    Ok((field, log))
}

/// Refines the per-frame screen-space shift and scale against the original
/// (uncentered) masked foreground frames by gradient descent through the
/// differentiable warp of the canonical seen-view renders.
pub fn refine_trajectory(
    set: &GaussianSet,
    field: &DeformationField,
    seen_view: &CameraPose,
    fg_video: &VideoBundle,
    init: &Trajectory,
    hyper: &ForegroundHyper,
) -> Result<Trajectory> {
    init.check()?;
    let n = fg_video.frames.len();
    if init.n != n {
        return Err(CocoError::InvalidArgument(format!(
            "trajectory length {} != frame count {n}",
            init.n
        )));
    }
    let ropts = RenderOptions {
        background: [0.0; 3],
        ..RenderOptions::default()
    };
    // Canonical renders per frame (deterministic; no RNG involved).
    let canonical: Vec<Image> = (0..n)
        .map(|fidx| -> Result<Image> {
            let t = TimeStamp::new(fidx + 1, n)?.normalized();
            let (deformed, _) = field.apply(set, t)?;
            Ok(crate::render::render(&deformed, seen_view, &ropts)?.rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(refine_trajectory_images(
        &canonical,
        &fg_video.frames,
        init,
        hyper,
    ))
}


/// Solves a 3x3 symmetric positive-definite system by Gaussian elimination
/// with partial pivoting. Returns `None` if the matrix is singular.
fn solve_3x3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let mut a = [[0.0f64; 4]; 3];
    for r in 0..3 {
        a[r][..3].copy_from_slice(&m[r]);
        a[r][3] = rhs[r];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for r in (0..3).rev() {
        let mut v = a[r][3];
        for c in r + 1..3 {
            v -= a[r][c] * x[c];
        }
        x[r] = v / a[r][r];
    }
    Some(x)
}

/// Trajectory refinement over explicit canonical images: the shared core of
/// [`refine_trajectory`], also used directly by tests.
pub fn refine_trajectory_images(
    canonical: &[Image],
    targets: &[Image],
    init: &Trajectory,
    hyper: &ForegroundHyper,
) -> Trajectory {
    let n = targets.len();
    let refined: Vec<([f64; 2], f64)> = (0..n)
        .into_par_iter()
        .map(|fidx| {
            let target = &targets[fidx];
            let canon = &canonical[fidx];
            let (h, w) = (target.height, target.width);
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let mut params = [init.shifts[fidx][0], init.shifts[fidx][1], init.scales[fidx]];
            // Levenberg-damped Gauss-Newton on the warp parameters: the full
            // 3x3 normal matrix captures the shift/scale coupling (a shifted
            // initial guess induces an apparent scale error and vice versa),
            // so an exact init is a fixed point while a few-pixel
            // perturbation contracts geometrically at rate `trajectory_lr`.
            for _ in 0..hyper.trajectory_iters {
                let [tx, ty, s] = params;
                let npix = (h * w * 3) as f64;
                let mut grad = [0.0; 3];
                let mut hessian = [[0.0; 3]; 3];
                for r in 0..h {
                    for c in 0..w {
                        let px = c as f64 + 0.5;
                        let py = r as f64 + 0.5;
                        let x = cx + (px - tx) / s;
                        let y = cy + (py - ty) / s;
                        let (v, dvx, dvy) = sample_padded(canon, x, y);
                        let tgt = target.pixel(r, c);
                        for k in 0..3 {
                            let resid = 2.0 * (v[k] - tgt[k]) / npix;
                            let jac = [
                                dvx[k] * (-1.0 / s),
                                dvy[k] * (-1.0 / s),
                                dvx[k] * (-(px - tx) / (s * s))
                                    + dvy[k] * (-(py - ty) / (s * s)),
                            ];
                            for a in 0..3 {
                                grad[a] += resid * jac[a];
                                for b in 0..3 {
                                    hessian[a][b] += 2.0 * jac[a] * jac[b] / npix;
                                }
                            }
                        }
                    }
                }
                let damping = 1e-8 * (hessian[0][0] + hessian[1][1] + hessian[2][2]).max(1e-30);
                for a in 0..3 {
                    hessian[a][a] += damping;
                }
                if let Some(step) = solve_3x3(&hessian, &grad) {
                    for k in 0..3 {
                        params[k] -= hyper.trajectory_lr * step[k];
                    }
                }
                params[2] = params[2].max(1e-3);
            }
            ([params[0], params[1]], params[2])
        })
        .collect();
    Trajectory {
        shifts: refined.iter().map(|(s, _)| *s).collect(),
        scales: refined.iter().map(|(_, s)| *s).collect(),
        n,
    }
}
