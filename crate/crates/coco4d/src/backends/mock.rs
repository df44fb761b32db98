//! Deterministic procedural mock backends.
//!
//! The mock "world" is a small raycast scene: a two-level backdrop (a front
//! half-wall and a back wall, giving a depth step) with a smoothly drifting
//! texture, plus an articulated foreground blob (a shaded sphere with a
//! swinging satellite) that follows a parametric path. The video generator
//! records ground-truth masks and depth internally; segmentation and depth
//! estimation answer from that registry (keyed by exact frame content)
//! rather than receiving any side-channel from the pipeline.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GenBackends, ScoreCondition, SegmentOutput, alpha_bar};
use crate::error::{CocoError, Result};
use crate::geometry::{CameraPose, make_lookat_camera};
use crate::img::{DepthMap, Image, Mask, VideoBundle, mse};

/// Depth of the front half-wall (world z).
const FRONT_WALL_Z: f64 = -1.5;
/// Depth of the back wall.
const BACK_WALL_Z: f64 = -2.5;
/// Amplitude of the masked-region perturbation in inpaint_video.
pub const VIDEO_PERTURB_AMP: f64 = 0.02;

/// Seeded parameters of the procedural world.
#[derive(Debug, Clone)]
pub struct WorldParams {
    pub seed: u64,
    pub n_frames: usize,
    /// Texture phase offset.
    pub tex_phase: f64,
    /// Lateral sway amplitude of the backdrop pattern (world units).
    pub sway_amp: f64,
    /// Object path: x(t) = path_x0 + path_xamp * sin(2 pi t).
    pub path_x0: f64,
    pub path_xamp: f64,
    /// y(t) = path_yamp * sin(4 pi t).
    pub path_yamp: f64,
    /// Object center z (in front of the backdrop).
    pub obj_z: f64,
    /// World-size multiplier of the video object relative to canonical.
    pub obj_scale: f64,
}

impl WorldParams {
    pub fn from_seed(seed: u64, n_frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77_6f72_6c64);
        WorldParams {
            seed,
            n_frames,
            tex_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            sway_amp: 0.05,
            path_x0: 0.45 + rng.gen_range(-0.03..0.03),
            path_xamp: 0.25,
            path_yamp: 0.18,
            obj_z: 0.4,
            obj_scale: 0.3,
        }
    }

    /// Backdrop pattern drift at normalized time t.
    pub fn sway(&self, t: f64) -> f64 {
        self.sway_amp * (std::f64::consts::TAU * t).sin()
    }

    /// Foreground object center at normalized time t.
    pub fn object_center(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            self.path_x0 + self.path_xamp * (std::f64::consts::TAU * t).sin(),
            self.path_yamp * (2.0 * std::f64::consts::TAU * t).sin(),
            self.obj_z,
        )
    }

    /// Satellite swing angle at normalized time t.
    pub fn satellite_angle(&self, t: f64) -> f64 {
        0.3 + 0.7 * (std::f64::consts::TAU * t).sin()
    }
}

/// Which part of the world to rasterize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldLayer {
    /// Foreground over backdrop.
    Full,
    /// Backdrop only.
    BackgroundOnly,
    /// Video-space object on black.
    ForegroundOnly,
    /// Origin-centered unit-scale object on black (the multiview target).
    Canonical,
}

fn smooth01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn backdrop_color(wp: &WorldParams, front: bool, u: f64, y: f64) -> [f64; 3] {
    let p = wp.tex_phase;
    if front {
        [
            smooth01(0.30 + 0.15 * (0.9 * u + p).sin()),
            smooth01(0.42 + 0.15 * (0.7 * y - p).sin()),
            smooth01(0.55 + 0.12 * (0.5 * u + 0.4 * y + 0.5 * p).sin()),
        ]
    } else {
        [
            smooth01(0.55 + 0.15 * (0.6 * u - p).sin()),
            smooth01(0.40 + 0.14 * (0.8 * y + 0.5 * p).sin()),
            smooth01(0.30 + 0.12 * (0.45 * u - 0.5 * y + p).sin()),
        ]
    }
}

fn shade_sphere(normal: &Vector3<f64>, base: [f64; 3]) -> [f64; 3] {
    let light = Vector3::new(0.4, 0.5, 0.75).normalize();
    let lambert = 0.35 + 0.65 * normal.dot(&light).max(0.0);
    [base[0] * lambert, base[1] * lambert, base[2] * lambert]
}

/// Nearest positive ray-sphere intersection parameter.
fn hit_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = d.dot(&oc);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = -b - disc.sqrt();
    (s > 1e-9).then_some(s)
}

struct RayHit {
    depth: f64,
    color: [f64; 3],
    foreground: bool,
}

fn trace(
    wp: &WorldParams,
    eye: &Vector3<f64>,
    dir: &Vector3<f64>,
    forward: &Vector3<f64>,
    t: f64,
    layer: WorldLayer,
) -> Option<RayHit> {
    let mut best: Option<(f64, [f64; 3], bool)> = None;
    let mut consider = |s: f64, color: [f64; 3], fg: bool| {
        if best.map_or(true, |(bs, _, _)| s < bs) {
            best = Some((s, color, fg));
        }
    };

    if layer != WorldLayer::BackgroundOnly {
        let (center, scale) = if layer == WorldLayer::Canonical {
            (Vector3::zeros(), 1.0)
        } else {
            (wp.object_center(t), wp.obj_scale)
        };
        let theta = wp.satellite_angle(t);
        // The main sphere radius makes the canonical silhouette span 0.8 of
        // the frame height from the radius-2.5 seen view. The satellite
        // swings in front of it, staying inside that silhouette so the
        // seen-view bounding box and mask area are constant over time.
        let bodies = [
            (center, 1.048 * scale, [0.85, 0.35, 0.30]),
            (
                center
                    + scale * Vector3::new(0.30 * theta.cos(), 0.30 * theta.sin(), 1.05),
                0.26 * scale,
                [0.95, 0.75, 0.20],
            ),
        ];
        for (c, r, base) in bodies {
            if let Some(s) = hit_sphere(eye, dir, &c, r) {
                let p = eye + dir * s;
                let n = (p - c) / r;
                consider(s, shade_sphere(&n, base), true);
            }
        }
    }

    if layer == WorldLayer::Full || layer == WorldLayer::BackgroundOnly {
        let sway = wp.sway(t);
        // Front half-wall: z = FRONT_WALL_Z, pattern-space x < 0.
        if dir.z.abs() > 1e-12 {
            let s = (FRONT_WALL_Z - eye.z) / dir.z;
            if s > 1e-9 {
                let p = eye + dir * s;
                let u = p.x - sway;
                if u < 0.0 {
                    consider(s, backdrop_color(wp, true, u, p.y), false);
                }
            }
            // Back wall: z = BACK_WALL_Z, everywhere.
            let s = (BACK_WALL_Z - eye.z) / dir.z;
            if s > 1e-9 {
                let p = eye + dir * s;
                consider(s, backdrop_color(wp, false, p.x - sway, p.y), false);
            }
        }
    }

    best.map(|(s, color, fg)| RayHit {
        depth: (eye + dir * s - eye).dot(forward),
        color,
        foreground: fg,
    })
}

/// Rasterizes the procedural world. Returns (image, depth, foreground mask).
/// Depth is valid wherever any surface is hit; misses render black with
/// invalid depth.
pub fn render_world(
    wp: &WorldParams,
    camera: &CameraPose,
    t: f64,
    layer: WorldLayer,
) -> (Image, DepthMap, Mask) {
    let (h, w) = camera.resolution;
    let eye = camera.eye();
    let rot = camera.rotation();
    let forward: Vector3<f64> = rot.row(2).transpose();
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();

    let pixels: Vec<([f64; 3], f64, bool, bool)> = (0..h * w)
        .into_par_iter()
        .map(|pi| {
            let (r, c) = (pi / w, pi % w);
            let dx = (c as f64 + 0.5 - cx) / f;
            let dy = (r as f64 + 0.5 - cy) / f;
            let dir = (rot.transpose() * Vector3::new(dx, dy, 1.0)).normalize();
            match trace(wp, &eye, &dir, &forward, t, layer) {
                Some(hit) => (hit.color, hit.depth, true, hit.foreground),
                None => ([0.0; 3], 0.0, false, false),
            }
        })
        .collect();

    let mut img = Image::zeros(h, w);
    let mut depth = DepthMap {
        height: h,
        width: w,
        values: vec![0.0; h * w],
        valid: vec![false; h * w],
    };
    let mut mask = Mask::filled(h, w, false);
    for (pi, (color, d, valid, fg)) in pixels.into_iter().enumerate() {
        img.data[pi * 3..pi * 3 + 3].copy_from_slice(&color);
        depth.values[pi] = d;
        depth.valid[pi] = valid;
        mask.data[pi] = fg;
    }
    (img, depth, mask)
}

/// The reference camera for a given resolution (elevation 0, azimuth 0,
/// radius 2.5 — the seen view).
pub fn seen_view(resolution: (usize, usize)) -> CameraPose {
    make_lookat_camera(0.0, 0.0, 2.5, 60.0, 0.1, 10000.0, resolution).unwrap()
}

fn hash_image(img: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    feed(&(img.height as u64).to_le_bytes());
    feed(&(img.width as u64).to_le_bytes());
    for v in &img.data {
        feed(&v.to_bits().to_le_bytes());
    }
    h
}

fn masked_copy(frame: &Image, mask: &Mask, keep_masked: bool) -> Image {
    let mut out = Image::zeros(frame.height, frame.width);
    for pi in 0..mask.data.len() {
        if mask.data[pi] == keep_masked {
            out.data[pi * 3..pi * 3 + 3].copy_from_slice(&frame.data[pi * 3..pi * 3 + 3]);
        }
    }
    out
}

#[derive(Default)]
struct MockState {
    world: Option<WorldParams>,
    depth_reg: HashMap<u64, DepthMap>,
    mask_reg: HashMap<u64, Mask>,
    /// Canonical seen-view renders per resolution, for condition matching.
    canon_cache: HashMap<(usize, usize), Vec<Image>>,
}

/// Deterministic mock implementation of all generative backends.
#[derive(Default)]
pub struct MockWorld {
    state: Mutex<MockState>,
}

impl MockWorld {
    pub fn new() -> Self {
        MockWorld::default()
    }

    /// World parameters of the last generated video (oracle access for
    /// tests only; pipeline stages never call this).
    pub fn world_params(&self) -> Option<WorldParams> {
        self.state.lock().unwrap().world.clone()
    }

    fn canonical_renders(&self, res: (usize, usize)) -> Option<Vec<Image>> {
        let mut st = self.state.lock().unwrap();
        let wp = st.world.clone()?;
        Some(
            st.canon_cache
                .entry(res)
                .or_insert_with(|| {
                    let cam = seen_view(res);
                    (0..wp.n_frames)
                        .map(|i| {
                            let t = i as f64 / (wp.n_frames - 1) as f64;
                            render_world(&wp, &cam, t, WorldLayer::Canonical).0
                        })
                        .collect()
                })
                .clone(),
        )
    }

    /// Best-matching normalized timestamp for a conditioning image.
    fn match_time(&self, reference: &Image) -> Option<f64> {
        let renders = self.canonical_renders((reference.height, reference.width))?;
        let n = renders.len();
        let best = (0..n).min_by(|&a, &b| {
            mse(&renders[a], reference)
                .partial_cmp(&mse(&renders[b], reference))
                .unwrap()
        })?;
        Some(best as f64 / (n - 1) as f64)
    }
}

impl GenBackends for MockWorld {
    fn generate_reference_video(
        &self,
        prompt: &str,
        image: Option<&Image>,
        seed: u64,
        n_frames: usize,
        resolution: usize,
    ) -> Result<VideoBundle> {
        if prompt.is_empty() {
            return Err(CocoError::InvalidArgument("prompt must be non-empty".into()));
        }
        if n_frames < 2 {
            return Err(CocoError::InvalidArgument("need at least 2 frames".into()));
        }
        let wp = WorldParams::from_seed(seed, n_frames);
        let cam = seen_view((resolution, resolution));
        let mut frames = Vec::with_capacity(n_frames);
        let mut st = self.state.lock().unwrap();
        st.canon_cache.clear();
        for i in 0..n_frames {
            let t = i as f64 / (n_frames - 1) as f64;
            let (frame, full_depth, fg_mask) = render_world(&wp, &cam, t, WorldLayer::Full);
            let (_, bg_depth, _) = render_world(&wp, &cam, t, WorldLayer::BackgroundOnly);
            let (_, fg_depth, _) = render_world(&wp, &cam, t, WorldLayer::ForegroundOnly);
            let frame = if i == 0 {
                image.cloned().unwrap_or(frame)
            } else {
                frame
            };
            // Register ground truth for the full frame and for the
            // masked fg/bg variants segmentation will produce.
            let fg_frame = masked_copy(&frame, &fg_mask, true);
            let bg_frame = masked_copy(&frame, &fg_mask, false);
            st.mask_reg.insert(hash_image(&frame), fg_mask.clone());
            st.depth_reg.insert(hash_image(&frame), full_depth);
            let mut fgd = fg_depth;
            fgd.valid = fg_mask.data.clone();
            st.depth_reg.insert(hash_image(&fg_frame), fgd);
            // Background frames carry the fg hole; its depth is the true
            // backdrop depth but the hole is marked unobserved.
            let mut bgd = bg_depth;
            for (v, m) in bgd.valid.iter_mut().zip(&fg_mask.data) {
                *v = !m;
            }
            st.depth_reg.insert(hash_image(&bg_frame), bgd);
            frames.push(frame);
        }
        st.world = Some(wp);
        Ok(VideoBundle {
            frames,
            masks: None,
            depth: None,
        })
    }

    fn segment_video(&self, video: &VideoBundle) -> Result<SegmentOutput> {
        if video.frames.is_empty() {
            return Err(CocoError::InvalidArgument("segment_video: empty video".into()));
        }
        let st = self.state.lock().unwrap();
        let mut masks = Vec::with_capacity(video.len());
        let mut empty_warning = false;
        for frame in &video.frames {
            let mask = st
                .mask_reg
                .get(&hash_image(frame))
                .cloned()
                .unwrap_or_else(|| Mask::filled(frame.height, frame.width, false));
            if mask.count() == 0 {
                empty_warning = true;
            }
            masks.push(mask);
        }
        drop(st);
        let fg_frames: Vec<Image> = video
            .frames
            .iter()
            .zip(&masks)
            .map(|(f, m)| masked_copy(f, m, true))
            .collect();
        let bg_frames: Vec<Image> = video
            .frames
            .iter()
            .zip(&masks)
            .map(|(f, m)| masked_copy(f, m, false))
            .collect();
        Ok(SegmentOutput {
            fg: VideoBundle {
                frames: fg_frames,
                masks: Some(masks.clone()),
                depth: None,
            },
            bg: VideoBundle {
                frames: bg_frames,
                masks: Some(masks.clone()),
                depth: None,
            },
            masks,
            empty_warning,
        })
    }

    fn estimate_depth(&self, image: &Image) -> Result<DepthMap> {
        let st = self.state.lock().unwrap();
        if let Some(d) = st.depth_reg.get(&hash_image(image)) {
            return Ok(d.clone());
        }
        // Fallback: monotone vertical gradient.
        let (h, w) = (image.height, image.width);
        let mut d = DepthMap::constant(h, w, 1.0);
        for r in 0..h {
            for c in 0..w {
                d.values[r * w + c] = 1.0 + 2.0 * (r as f64 + 0.5) / h as f64;
            }
        }
        Ok(d)
    }

    fn inpaint_image(&self, image: &Image, mask: &Mask, _prompt: &str) -> Result<Image> {
        if mask.data.iter().all(|&m| m) {
            return Err(CocoError::DegenerateInput(
                "inpaint_image: all-ones mask has no boundary to anchor".into(),
            ));
        }
        if image.height != mask.height || image.width != mask.width {
            return Err(CocoError::InvalidArgument(
                "inpaint_image: mask/image resolution mismatch".into(),
            ));
        }
        let mut out = image.clone();
        harmonic_fill(&mut out.data, 3, image.height, image.width, &mask.data);
        Ok(out)
    }

    fn inpaint_video(
        &self,
        pseudo: &VideoBundle,
        masks: &[Mask],
        strength: f64,
    ) -> Result<VideoBundle> {
        if masks.len() != pseudo.len() {
            return Err(CocoError::InvalidArgument(format!(
                "inpaint_video: {} masks for {} frames",
                masks.len(),
                pseudo.len()
            )));
        }
        if !(0.0..=1.0).contains(&strength) {
            return Err(CocoError::InvalidArgument(format!(
                "inpaint_video: strength {strength} outside [0, 1]"
            )));
        }
        let n = pseudo.len();
        let frames = pseudo
            .frames
            .iter()
            .enumerate()
            .map(|(i, frame)| {
                let t = i as f64 / (n.max(2) - 1) as f64;
                // The refinement leaves the anchored first frame untouched.
                let amp = strength * VIDEO_PERTURB_AMP * t;
                let mut out = frame.clone();
                let (h, w) = (frame.height, frame.width);
                for r in 0..h {
                    for c in 0..w {
                        if !masks[i].get(r, c) {
                            continue;
                        }
                        for ch in 0..3 {
                            let phase = std::f64::consts::TAU
                                * (c as f64 / w as f64 + 0.4 * r as f64 / h as f64)
                                + 3.1 * t
                                + 1.7 * ch as f64;
                            let v = &mut out.data[(r * w + c) * 3 + ch];
                            *v = (*v + amp * phase.sin()).clamp(0.0, 1.0);
                        }
                    }
                }
                out
            })
            .collect();
        Ok(VideoBundle {
            frames,
            masks: Some(masks.to_vec()),
            depth: None,
        })
    }

    fn inpaint_depth(&self, depth: &DepthMap, mask: &Mask) -> Result<DepthMap> {
        let fill: Vec<bool> = depth
            .valid
            .iter()
            .zip(&mask.data)
            .map(|(&v, &m)| m || !v)
            .collect();
        if fill.iter().all(|&m| m) {
            return Err(CocoError::DegenerateInput(
                "inpaint_depth: no valid depth outside the mask".into(),
            ));
        }
        let mut log_d: Vec<f64> = depth
            .values
            .iter()
            .zip(&fill)
            .map(|(&v, &m)| if m { 0.0 } else { v.max(1e-9).ln() })
            .collect();
        harmonic_fill(&mut log_d, 1, depth.height, depth.width, &fill);
        // Unfilled pixels keep their original values bit-exactly.
        let values: Vec<f64> = log_d
            .into_iter()
            .zip(depth.values.iter().zip(&fill))
            .map(|(lv, (&orig, &m))| if m { lv.exp() } else { orig })
            .collect();
        Ok(DepthMap {
            height: depth.height,
            width: depth.width,
            values,
            valid: vec![true; depth.values.len()],
        })
    }

    fn score_epsilon(
        &self,
        noisy_image: &Image,
        condition: &ScoreCondition,
        gamma: f64,
    ) -> Result<Image> {
        let ab = alpha_bar(gamma)?;
        let target = match &condition.relative_camera {
            Some(cam) => match self.match_time(&condition.reference) {
                Some(t) => {
                    let wp = self.world_params().unwrap();
                    let mut cam = cam.clone();
                    cam.resolution = (noisy_image.height, noisy_image.width);
                    render_world(&wp, &cam, t, WorldLayer::Canonical).0
                }
                None => condition.reference.clone(),
            },
            None => condition.reference.clone(),
        };
        if target.height != noisy_image.height || target.width != noisy_image.width {
            return Err(CocoError::InvalidArgument(
                "score_epsilon: condition/noisy resolution mismatch".into(),
            ));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = noisy_image.clone();
        for (o, t) in out.data.iter_mut().zip(&target.data) {
            *o = (*o - sa * t) / sn;
        }
        Ok(out)
    }
}

/// In-place harmonic fill of `mask`ed pixels from the unmasked boundary
/// (Jacobi relaxation with a coarse-grid initialization). `nch` interleaved
/// channels. Unmasked pixels are untouched.
pub fn harmonic_fill(data: &mut [f64], nch: usize, h: usize, w: usize, mask: &[bool]) {
    assert_eq!(data.len(), h * w * nch);
    assert_eq!(mask.len(), h * w);
    if mask.iter().all(|&m| !m) {
        return;
    }
    // Coarse initialization to kill low-frequency error cheaply.
    if h > 8 && w > 8 {
        let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
        let mut cdata = vec![0.0; ch * cw * nch];
        let mut cmask = vec![true; ch * cw];
        for cr in 0..ch {
            for cc in 0..cw {
                let mut acc = vec![0.0; nch];
                let mut cnt = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (r, c) = (cr * 2 + dr, cc * 2 + dc);
                        if r < h && c < w && !mask[r * w + c] {
                            for k in 0..nch {
                                acc[k] += data[(r * w + c) * nch + k];
                            }
                            cnt += 1.0;
                        }
                    }
                }
                if cnt > 0.0 {
                    cmask[cr * cw + cc] = false;
                    for k in 0..nch {
                        cdata[(cr * cw + cc) * nch + k] = acc[k] / cnt;
                    }
                }
            }
        }
        harmonic_fill(&mut cdata, nch, ch, cw, &cmask);
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] {
                    let ci = ((r / 2) * cw + c / 2) * nch;
                    for k in 0..nch {
                        data[(r * w + c) * nch + k] = cdata[ci + k];
                    }
                }
            }
        }
    } else {
        // Seed with the mean of unmasked pixels.
        let mut mean = vec![0.0; nch];
        let mut cnt = 0.0;
        for pi in 0..h * w {
            if !mask[pi] {
                for k in 0..nch {
                    mean[k] += data[pi * nch + k];
                }
                cnt += 1.0;
            }
        }
        for pi in 0..h * w {
            if mask[pi] {
                for k in 0..nch {
                    data[pi * nch + k] = mean[k] / cnt;
                }
            }
        }
    }
    // Jacobi relaxation to the harmonic solution.
    let mut next = data.to_vec();
    for _ in 0..600 {
        let mut max_delta = 0.0f64;
        for r in 0..h {
            for c in 0..w {
                if !mask[r * w + c] {
                    continue;
                }
                let mut acc = vec![0.0; nch];
                let mut cnt = 0.0;
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                        let ni = (nr as usize * w + nc as usize) * nch;
                        for k in 0..nch {
                            acc[k] += data[ni + k];
                        }
                        cnt += 1.0;
                    }
                }
                let pi = (r * w + c) * nch;
                for k in 0..nch {
                    let v = acc[k] / cnt;
                    max_delta = max_delta.max((v - data[pi + k]).abs());
                    next[pi + k] = v;
                }
            }
        }
        for pi in 0..h * w {
            if mask[pi] {
                data[pi * nch..pi * nch + nch]
                    .copy_from_slice(&next[pi * nch..pi * nch + nch]);
            }
        }
        if max_delta < 1e-10 {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::psnr;

    fn world(seed: u64, n: usize) -> (MockWorld, VideoBundle) {
        let mock = MockWorld::new();
        let video = mock
            .generate_reference_video("a scene", None, seed, n, 64)
            .unwrap();
        (mock, video)
    }

    #[test]
    fn video_is_deterministic_across_instances() {
        let (_, a) = world(7, 16);
        let (_, b) = world(7, 16);
        assert_eq!(a.len(), 16);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
        let (_, c) = world(8, 16);
        assert_ne!(a.frames[3].data, c.frames[3].data);
    }

    #[test]
    fn mask_area_varies_smoothly() {
        let (mock, video) = world(7, 16);
        let seg = mock.segment_video(&video).unwrap();
        let areas: Vec<f64> = seg.masks.iter().map(|m| m.count() as f64).collect();
        assert!(areas.iter().all(|&a| a > 0.0));
        for pair in areas.windows(2) {
            assert!(
                (pair[1] - pair[0]).abs() / pair[0] < 0.05,
                "adjacent mask areas {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn image_conditioned_first_frame_is_exact() {
        let mock = MockWorld::new();
        let cond = Image::constant(64, 64, [0.2, 0.4, 0.6]);
        let video = mock
            .generate_reference_video("a scene", Some(&cond), 7, 4, 64)
            .unwrap();
        assert_eq!(video.frames[0].data, cond.data);
    }

    #[test]
    fn segmentation_partition_is_exact() {
        let (mock, video) = world(3, 8);
        let seg = mock.segment_video(&video).unwrap();
        assert!(!seg.empty_warning);
        for i in 0..8 {
            for pi in 0..64 * 64 {
                let orig = &video.frames[i].data[pi * 3..pi * 3 + 3];
                let f = &seg.fg.frames[i].data[pi * 3..pi * 3 + 3];
                let b = &seg.bg.frames[i].data[pi * 3..pi * 3 + 3];
                let sum: Vec<f64> = f.iter().zip(b).map(|(x, y)| x + y).collect();
                assert_eq!(orig, &sum[..]);
            }
        }
    }

    #[test]
    fn unknown_frame_yields_empty_mask_warning() {
        let (mock, _) = world(3, 4);
        let foreign = VideoBundle::from_frames(vec![Image::constant(32, 32, [0.5; 3])]);
        let seg = mock.segment_video(&foreign).unwrap();
        assert!(seg.empty_warning);
        assert_eq!(seg.masks[0].count(), 0);
    }

    #[test]
    fn depth_registry_and_fallback() {
        let (mock, video) = world(5, 4);
        let d = mock.estimate_depth(&video.frames[0]).unwrap();
        d.check().unwrap();
        assert!(d.valid.iter().all(|&v| v));
        // Ground truth: the two wall depths straddle the step from the
        // reference view at radius 2.5 (4.0 and 5.0 on-axis).
        let wp = mock.world_params().unwrap();
        let (_, gt, _) = render_world(&wp, &seen_view((64, 64)), 0.0, WorldLayer::Full);
        assert_eq!(d.values, gt.values);

        let fb = mock.estimate_depth(&Image::constant(16, 16, [0.1; 3])).unwrap();
        for c in 0..16 {
            for r in 1..16 {
                assert!(fb.get(r, c) > fb.get(r - 1, c));
            }
        }
        // Determinism.
        let fb2 = mock.estimate_depth(&Image::constant(16, 16, [0.1; 3])).unwrap();
        assert_eq!(fb.values, fb2.values);
    }

    #[test]
    fn wall_depths_from_reference_view() {
        let wp = WorldParams::from_seed(1, 8);
        let cam = seen_view((64, 64));
        let (_, depth, _) = render_world(&wp, &cam, 0.25, WorldLayer::BackgroundOnly);
        // On the horizontal center row: left side near the front wall
        // (depth ~4), right side the back wall (depth ~5).
        assert!((depth.get(32, 4) - 4.0).abs() < 0.2);
        assert!((depth.get(32, 60) - 5.0).abs() < 0.2);
    }

    #[test]
    fn inpaint_image_preserves_unmasked_and_fills_gradient() {
        let mock = MockWorld::new();
        let res = 32;
        let mut img = Image::zeros(res, res);
        for r in 0..res {
            for c in 0..res {
                let v = c as f64 / (res - 1) as f64;
                img.set_pixel(r, c, [v, 0.5 * v, 1.0 - v]);
            }
        }
        let mut mask = Mask::filled(res, res, false);
        for r in 8..24 {
            for c in 8..24 {
                mask.set(r, c, true);
            }
        }
        let out = mock.inpaint_image(&img, &mask, "y").unwrap();
        for r in 0..res {
            for c in 0..res {
                if !mask.get(r, c) {
                    assert_eq!(out.pixel(r, c), img.pixel(r, c));
                } else {
                    // Harmonic extension of a linear boundary is linear.
                    let want = img.pixel(r, c);
                    for k in 0..3 {
                        assert!(
                            (out.pixel(r, c)[k] - want[k]).abs() < 0.01,
                            "pixel ({r},{c}) ch {k}: {} vs {}",
                            out.pixel(r, c)[k],
                            want[k]
                        );
                    }
                }
            }
        }
        assert!(mock.inpaint_image(&img, &Mask::filled(res, res, true), "y").is_err());
        // Zero mask: identity.
        let id = mock.inpaint_image(&img, &Mask::filled(res, res, false), "y").unwrap();
        assert_eq!(id.data, img.data);
    }

    #[test]
    fn inpaint_video_strength_contract() {
        let mock = MockWorld::new();
        let frames: Vec<Image> = (0..4).map(|t| Image::constant(16, 16, [0.1 * t as f64 + 0.2; 3])).collect();
        let masks: Vec<Mask> = (0..4)
            .map(|_| {
                let mut m = Mask::filled(16, 16, false);
                for r in 4..12 {
                    for c in 4..12 {
                        m.set(r, c, true);
                    }
                }
                m
            })
            .collect();
        let pseudo = VideoBundle::from_frames(frames.clone());
        let zero = mock.inpaint_video(&pseudo, &masks, 0.0).unwrap();
        for (a, b) in zero.frames.iter().zip(&frames) {
            assert_eq!(a.data, b.data);
        }
        let out = mock.inpaint_video(&pseudo, &masks, 0.7).unwrap();
        for (i, (a, b)) in out.frames.iter().zip(&frames).enumerate() {
            for r in 0..16 {
                for c in 0..16 {
                    let d = (a.pixel(r, c)[0] - b.pixel(r, c)[0]).abs();
                    if masks[i].get(r, c) {
                        assert!(d <= 0.7 * VIDEO_PERTURB_AMP + 1e-12);
                    } else {
                        assert_eq!(a.pixel(r, c), b.pixel(r, c));
                    }
                }
            }
        }
        assert!(mock.inpaint_video(&pseudo, &masks[..2], 0.5).is_err());
    }

    #[test]
    fn inpaint_depth_harmonic_between_levels() {
        let mock = MockWorld::new();
        let mut depth = DepthMap::constant(16, 32, 2.0);
        for r in 0..16 {
            for c in 16..32 {
                depth.values[r * 32 + c] = 8.0;
            }
        }
        let mut mask = Mask::filled(16, 32, false);
        for r in 0..16 {
            for c in 12..20 {
                mask.set(r, c, true);
            }
        }
        let out = mock.inpaint_depth(&depth, &mask).unwrap();
        out.check().unwrap();
        assert!(out.valid.iter().all(|&v| v));
        // Boundary-exact and monotone across the hole on each row.
        for r in 0..16 {
            assert_eq!(out.get(r, 11), 2.0);
            assert_eq!(out.get(r, 20), 8.0);
            for c in 12..20 {
                assert!(out.get(r, c) >= out.get(r, c - 1) - 1e-9);
            }
        }
        // Constant-depth hole refills with the constant.
        let flat = DepthMap::constant(12, 12, 3.0);
        let mut hole = Mask::filled(12, 12, false);
        for r in 4..8 {
            for c in 4..8 {
                hole.set(r, c, true);
            }
        }
        let filled = mock.inpaint_depth(&flat, &hole).unwrap();
        for v in &filled.values {
            assert!((v - 3.0).abs() < 1e-6);
        }
        assert!(mock.inpaint_depth(&flat, &Mask::filled(12, 12, true)).is_err());
    }

    #[test]
    fn score_recovers_injected_noise_on_target() {
        let (mock, video) = world(7, 8);
        // Text-conditioned: the target is the condition image itself.
        let target = video.frames[2].clone();
        let mut eps = Image::zeros(64, 64);
        for (i, v) in eps.data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
        }
        let gamma = 0.3;
        let noisy = super::super::add_noise(&target, &eps, gamma).unwrap();
        let cond = ScoreCondition {
            reference: target.clone(),
            relative_camera: None,
            text: Some("y".into()),
        };
        let got = mock.score_epsilon(&noisy, &cond, gamma).unwrap();
        for (a, b) in got.data.iter().zip(&eps.data) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(mock.score_epsilon(&noisy, &cond, 0.0).is_err());
        assert!(mock.score_epsilon(&noisy, &cond, 1.5).is_err());
    }

    #[test]
    fn multiview_score_matches_conditioning_timestamp() {
        let (mock, _) = world(7, 8);
        let wp = mock.world_params().unwrap();
        let cam = seen_view((64, 64));
        // Condition on the canonical render at t = 3/7; the mock must pick
        // that timestamp and render the sampled camera's view of it.
        let t = 3.0 / 7.0;
        let reference = render_world(&wp, &cam, t, WorldLayer::Canonical).0;
        let sampled = make_lookat_camera(10.0, 40.0, 2.5, 60.0, 0.1, 10000.0, (64, 64)).unwrap();
        let expect_target = render_world(&wp, &sampled, t, WorldLayer::Canonical).0;
        let gamma = 0.4;
        let noisy = expect_target.clone(); // eps_hat = (x - sa*target)/sn
        let cond = ScoreCondition {
            reference,
            relative_camera: Some(sampled.clone()),
            text: None,
        };
        let got = mock.score_epsilon(&noisy, &cond, gamma).unwrap();
        let ab = alpha_bar(gamma).unwrap();
        for (g, t) in got.data.iter().zip(&expect_target.data) {
            let want = (t - ab.sqrt() * t) / (1.0 - ab).sqrt();
            assert!((g - want).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_object_fills_most_of_frame() {
        let wp = WorldParams::from_seed(2, 8);
        let (_, _, mask) = render_world(&wp, &seen_view((128, 128)), 0.0, WorldLayer::Canonical);
        let (r0, c0, r1, c1) = mask.bbox().unwrap();
        let extent = (r1 - r0 + 1).max(c1 - c0 + 1) as f64 / 128.0;
        assert!(
            (extent - 0.8).abs() < 0.1,
            "canonical extent {extent} should be near 0.8"
        );
        // Video object is substantially smaller.
        let (_, _, vm) = render_world(&wp, &seen_view((128, 128)), 0.0, WorldLayer::ForegroundOnly);
        let (r0, c0, r1, c1) = vm.bbox().unwrap();
        let vext = (r1 - r0 + 1).max(c1 - c0 + 1) as f64 / 128.0;
        assert!(vext < 0.45, "video extent {vext}");
    }

    #[test]
    fn full_frame_is_fg_over_bg() {
        let wp = WorldParams::from_seed(4, 8);
        let cam = seen_view((64, 64));
        let (full, _, mask) = render_world(&wp, &cam, 0.5, WorldLayer::Full);
        let (bg, _, _) = render_world(&wp, &cam, 0.5, WorldLayer::BackgroundOnly);
        let (fg, _, _) = render_world(&wp, &cam, 0.5, WorldLayer::ForegroundOnly);
        let mut composed = bg.clone();
        for pi in 0..64 * 64 {
            if mask.data[pi] {
                composed.data[pi * 3..pi * 3 + 3].copy_from_slice(&fg.data[pi * 3..pi * 3 + 3]);
            }
        }
        assert!(psnr(&full, &composed) > 60.0);
    }
}
