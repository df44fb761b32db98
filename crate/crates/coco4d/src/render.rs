//! Differentiable rasterization of a [`GaussianSet`] into RGB, coverage, and
//! depth images.
//!
//! 3D Gaussians are projected to screen-space 2D Gaussians with the
//! perspective-affine (EWA-style) approximation, globally depth-sorted, and
//! alpha-composited front to back. The backward pass produces analytic
//! gradients for every Gaussian attribute. Rendering is deterministic:
//! internal parallelism is over disjoint pixel bands and per-Gaussian
//! reductions happen in a fixed order.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::CameraPose;
use crate::img::{DepthMap, Image, Mask};
use crate::scene::{DeformationField, GaussianGrads, GaussianSet};

/// Screen-space low-pass filter added to every projected covariance.
const BLUR: f64 = 0.3;
/// Splat cutoff in standard deviations for the bounding box.
const CUTOFF_SIGMA: f64 = 3.5;
/// Contributions below this alpha are skipped.
const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Single-splat alpha ceiling.
const ALPHA_MAX: f64 = 0.999;
/// Early stop once transmittance falls below this.
const T_MIN: f64 = 1e-4;

const TILE: usize = 16;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Alpha threshold separating covered from empty pixels.
    pub mask_threshold: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0, 0.0, 0.0],
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    /// H*W coverage in [0, 1].
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected splat depth; valid where alpha > 0.
    pub depth: DepthMap,
    /// Per-pixel count of contributing Gaussians.
    pub contributing: Vec<u32>,
}

impl RenderOutput {
    /// Binarizes coverage: true where the pixel is covered.
    pub fn coverage_mask(&self, threshold: f64) -> Mask {
        Mask {
            height: self.rgb.height,
            width: self.rgb.width,
            data: self.alpha.iter().map(|&a| a >= threshold).collect(),
        }
    }
}

/// Per-splat screen-space data shared by forward and backward passes.
#[derive(Debug, Clone)]
struct Splat {
    /// Index into the source GaussianSet.
    gid: u32,
    z: f64,
    mean: Vector2<f64>,
    /// Inverse 2D covariance (a, b, c) for [[a, b], [b, c]].
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    p_cam: Vector3<f64>,
    /// Inclusive pixel bbox (x0, y0, x1, y1).
    bbox: [usize; 4],
}

/// Cache of everything the backward pass needs.
pub struct RenderCache {
    splats: Vec<Splat>,
    /// CSR contributor lists per pixel (indices into `splats`).
    contrib_offsets: Vec<u32>,
    contrib_items: Vec<u32>,
    /// Final transmittance per pixel.
    t_final: Vec<f64>,
}

fn prepare_splats(set: &GaussianSet, camera: &CameraPose) -> Vec<Splat> {
    let rot = camera.rotation();
    let eye = camera.eye();
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    let (h, w) = camera.resolution;
    let mut splats: Vec<Splat> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let p_cam = rot * (set.position(i) - eye);
            if p_cam.z <= camera.near || p_cam.z >= camera.far {
                return None;
            }
            let mean = Vector2::new(f * p_cam.x / p_cam.z + cx, f * p_cam.y / p_cam.z + cy);
            let q = normalized_quat(&set.rotation(i));
            let r_q = crate::scene::quat_to_matrix(&q);
            let s = set.activated_scale(i);
            let m = r_q * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
            let sigma_world = m * m.transpose();
            let sigma_cam = rot * sigma_world * rot.transpose();
            let j = jacobian(f, &p_cam);
            let cov = j * sigma_cam * j.transpose();
            let a = cov[(0, 0)] + BLUR;
            let b = cov[(0, 1)];
            let c = cov[(1, 1)] + BLUR;
            let det = a * c - b * b;
            if det <= 0.0 {
                return None;
            }
            let conic = [c / det, -b / det, a / det];
            let mid = 0.5 * (a + c);
            let lmax = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = CUTOFF_SIGMA * lmax.sqrt();
            let x0 = (mean.x - radius).floor().max(0.0) as i64;
            let y0 = (mean.y - radius).floor().max(0.0) as i64;
            let x1 = (mean.x + radius).ceil().min(w as f64 - 1.0) as i64;
            let y1 = (mean.y + radius).ceil().min(h as f64 - 1.0) as i64;
            if x1 < x0 || y1 < y0 || x0 >= w as i64 || y0 >= h as i64 {
                return None;
            }
            Some(Splat {
                gid: i as u32,
                z: p_cam.z,
                mean,
                conic,
                opacity: set.activated_opacity(i),
                color: set.color(i),
                p_cam,
                bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.gid.cmp(&b.gid)));
    splats
}

fn jacobian(f: f64, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z2 = p.z * p.z;
    nalgebra::Matrix2x3::new(f / p.z, 0.0, -f * p.x / z2, 0.0, f / p.z, -f * p.y / z2)
}

fn normalized_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Per-tile splat index lists, preserving depth order.
fn bin_tiles(splats: &[Splat], h: usize, w: usize) -> Vec<Vec<u32>> {
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let tx0 = s.bbox[0] / TILE;
        let tx1 = s.bbox[2] / TILE;
        let ty0 = s.bbox[1] / TILE;
        let ty1 = s.bbox[3] / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    tiles
}

/// Renders without keeping backward-pass state.
pub fn render(set: &GaussianSet, camera: &CameraPose, opts: &RenderOptions) -> Result<RenderOutput> {
    let (out, _) = render_with_cache(set, camera, opts)?;
    Ok(out)
}

/// Renders and returns the cache for [`render_backward`].
pub fn render_with_cache(
    set: &GaussianSet,
    camera: &CameraPose,
    opts: &RenderOptions,
) -> Result<(RenderOutput, RenderCache)> {
    camera.check()?;
    let (h, w) = camera.resolution;
    let splats = prepare_splats(set, camera);
    let tiles = bin_tiles(&splats, h, w);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);

    let mut rgb = vec![0.0; h * w * 3];
    let mut alpha = vec![0.0; h * w];
    let mut depth = vec![0.0; h * w];
    let mut contributing = vec![0u32; h * w];
    let mut t_final = vec![1.0; h * w];

    // Per-band (tile-row) contributor lists, processed in parallel over
    // disjoint output slices, then concatenated in order.
    let band_px = TILE * w;
    let band_results: Vec<(Vec<u32>, Vec<u32>)> = rgb
        .par_chunks_mut(band_px * 3)
        .zip(alpha.par_chunks_mut(band_px))
        .zip(depth.par_chunks_mut(band_px))
        .zip(contributing.par_chunks_mut(band_px))
        .zip(t_final.par_chunks_mut(band_px))
        .enumerate()
        .map(|(ty, ((((rgb_b, alpha_b), depth_b), contrib_b), tfin_b))| {
            let y_start = ty * TILE;
            let rows = alpha_b.len() / w;
            let mut offsets = Vec::with_capacity(rows * w + 1);
            let mut items: Vec<u32> = Vec::new();
            for dy in 0..rows {
                let py = y_start + dy;
                for px in 0..w {
                    offsets.push(items.len() as u32);
                    let tile = &tiles[ty * tiles_x + px / TILE];
                    let pc = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let mut t = 1.0;
                    let mut acc = [0.0f64; 3];
                    let mut d_acc = 0.0;
                    let mut a_acc = 0.0;
                    let mut count = 0u32;
                    for &si in tile {
                        let s = &splats[si as usize];
                        if px < s.bbox[0] || px > s.bbox[2] || py < s.bbox[1] || py > s.bbox[3]
                        {
                            continue;
                        }
                        let d = pc - s.mean;
                        let q = s.conic[0] * d.x * d.x
                            + 2.0 * s.conic[1] * d.x * d.y
                            + s.conic[2] * d.y * d.y;
                        let g = (-0.5 * q).exp();
                        let a = (s.opacity * g).min(ALPHA_MAX);
                        if a < ALPHA_MIN {
                            continue;
                        }
                        let wgt = a * t;
                        for ch in 0..3 {
                            acc[ch] += wgt * s.color[ch];
                        }
                        d_acc += wgt * s.z;
                        a_acc += wgt;
                        count += 1;
                        items.push(si);
                        t *= 1.0 - a;
                        if t < T_MIN {
                            break;
                        }
                    }
                    let pi = dy * w + px;
                    for ch in 0..3 {
                        rgb_b[pi * 3 + ch] = acc[ch] + t * opts.background[ch];
                    }
                    alpha_b[pi] = a_acc;
                    depth_b[pi] = if a_acc > 0.0 { d_acc / a_acc } else { 0.0 };
                    contrib_b[pi] = count;
                    tfin_b[pi] = t;
                }
            }
            (offsets, items)
        })
        .collect();

    let mut contrib_offsets = Vec::with_capacity(h * w + 1);
    let mut contrib_items = Vec::new();
    for (offsets, items) in band_results {
        let base = contrib_items.len() as u32;
        contrib_offsets.extend(offsets.iter().map(|o| o + base));
        contrib_items.extend(items);
    }
    contrib_offsets.push(contrib_items.len() as u32);
    debug_assert_eq!(contrib_offsets.len(), h * w + 1);
    assert!((0..tiles_y).count() > 0 || h == 0);

    let valid = alpha.iter().map(|&a| a > 0.0).collect();
    let out = RenderOutput {
        rgb: Image {
            height: h,
            width: w,
            data: rgb,
        },
        alpha,
        depth: DepthMap {
            height: h,
            width: w,
            values: depth,
            valid,
        },
        contributing,
    };
    let cache = RenderCache {
        splats,
        contrib_offsets,
        contrib_items,
        t_final,
    };
    Ok((out, cache))
}

/// Backward pass: maps per-pixel gradients on the rendered RGB (and
/// optionally alpha) to gradients on every Gaussian attribute. Frozen sets
/// report zero gradients. The depth output is treated as non-differentiable
/// (no loss in the pipeline backpropagates through it).
pub fn render_backward(
    set: &GaussianSet,
    camera: &CameraPose,
    opts: &RenderOptions,
    cache: &RenderCache,
    grad_rgb: &[f64],
    grad_alpha: Option<&[f64]>,
) -> GaussianGrads {
    let n = set.len();
    if set.frozen {
        return GaussianGrads::zeros(n);
    }
    let (h, w) = camera.resolution;
    assert_eq!(grad_rgb.len(), h * w * 3);
    let ns = cache.splats.len();

    // Phase 1: per-pixel gradients on 2D splat quantities
    // (mean, conic, opacity, color), accumulated per band then reduced in
    // band order for determinism.
    const SG: usize = 9; // dmean(2) dconic(3) dopacity(1) dcolor(3)
    let rows_per_band = TILE;
    let bands: Vec<usize> = (0..h.div_ceil(rows_per_band)).collect();
    let partials: Vec<Vec<f64>> = bands
        .par_iter()
        .map(|&band| {
            let mut sg = vec![0.0; ns * SG];
            let y0 = band * rows_per_band;
            let y1 = (y0 + rows_per_band).min(h);
            for py in y0..y1 {
                for px in 0..w {
                    let pi = py * w + px;
                    let start = cache.contrib_offsets[pi] as usize;
                    let end = cache.contrib_offsets[pi + 1] as usize;
                    if start == end {
                        continue;
                    }
                    let g_rgb = [
                        grad_rgb[pi * 3],
                        grad_rgb[pi * 3 + 1],
                        grad_rgb[pi * 3 + 2],
                    ];
                    let g_a = grad_alpha.map_or(0.0, |g| g[pi]);
                    if g_rgb == [0.0; 3] && g_a == 0.0 {
                        continue;
                    }
                    let pc = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    // Suffix accumulators, walking back to front.
                    let mut s_rgb = [
                        cache.t_final[pi] * opts.background[0],
                        cache.t_final[pi] * opts.background[1],
                        cache.t_final[pi] * opts.background[2],
                    ];
                    let mut s_a = 0.0;
                    let mut t_next = cache.t_final[pi];
                    for &si in cache.contrib_items[start..end].iter().rev() {
                        let s = &cache.splats[si as usize];
                        let d = pc - s.mean;
                        let q = s.conic[0] * d.x * d.x
                            + 2.0 * s.conic[1] * d.x * d.y
                            + s.conic[2] * d.y * d.y;
                        let g = (-0.5 * q).exp();
                        let raw_a = s.opacity * g;
                        let clamped = raw_a > ALPHA_MAX;
                        let a = raw_a.min(ALPHA_MAX);
                        let t_i = t_next / (1.0 - a);
                        let wgt = a * t_i;
                        // d loss / d alpha_i.
                        let mut dl_da = 0.0;
                        for ch in 0..3 {
                            dl_da += g_rgb[ch] * (s.color[ch] * t_i - s_rgb[ch] / (1.0 - a));
                            sg[si as usize * SG + 6 + ch] += g_rgb[ch] * wgt;
                        }
                        dl_da += g_a * (t_i - s_a / (1.0 - a));
                        s_a += wgt;
                        for ch in 0..3 {
                            s_rgb[ch] += wgt * s.color[ch];
                        }
                        t_next = t_i;
                        if clamped {
                            continue; // ceiling: zero gradient through alpha
                        }
                        // alpha = opacity * g.
                        let dl_dop = dl_da * g;
                        let dl_dg = dl_da * s.opacity;
                        let dl_dq = -0.5 * g * dl_dg;
                        // q = a dx^2 + 2 b dx dy + c dy^2.
                        let base = si as usize * SG;
                        sg[base] += dl_dq * -(2.0 * (s.conic[0] * d.x + s.conic[1] * d.y));
                        sg[base + 1] += dl_dq * -(2.0 * (s.conic[1] * d.x + s.conic[2] * d.y));
                        sg[base + 2] += dl_dq * d.x * d.x;
                        sg[base + 3] += dl_dq * d.x * d.y; // per off-diagonal entry
                        sg[base + 4] += dl_dq * d.y * d.y;
                        sg[base + 5] += dl_dop;
                    }
                }
            }
            sg
        })
        .collect();
    let mut sg = vec![0.0; ns * SG];
    for p in partials {
        for (a, b) in sg.iter_mut().zip(&p) {
            *a += b;
        }
    }

    // Phase 2: chain screen-space gradients back to 3D attributes.
    let rot = camera.rotation();
    let f = camera.focal();
    let per_splat: Vec<(u32, [f64; 13])> = cache
        .splats
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let base = si * SG;
            let dmean = Vector2::new(sg[base], sg[base + 1]);
            let dconic = Matrix2::new(sg[base + 2], sg[base + 3], sg[base + 3], sg[base + 4]);
            let dop_act = sg[base + 5];
            

            let gi = s.gid as usize;
            let qn = normalized_quat(&set.rotation(gi));
            let r_q = crate::scene::quat_to_matrix(&qn);
            let scales = set.activated_scale(gi);
            let m = r_q * Matrix3::from_diagonal(&Vector3::new(scales[0], scales[1], scales[2]));
            let sigma_world = m * m.transpose();
            let sigma_cam = rot * sigma_world * rot.transpose();
            let j = jacobian(f, &s.p_cam);
            let cov_nb = j * sigma_cam * j.transpose();
            let a = cov_nb[(0, 0)] + BLUR;
            let b = cov_nb[(0, 1)];
            let c = cov_nb[(1, 1)] + BLUR;
            let det = a * c - b * b;
            let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);

            // conic = cov^-1  =>  dcov = -conic * dconic * conic.
            let dcov = -conic * dconic * conic;
            // cov = J Sigma_cam J^T.
            let dsigma_cam = j.transpose() * dcov * j;
            let dj = (dcov + dcov.transpose()) * j * sigma_cam;
            // Jacobian entries depend on p_cam.
            let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
            let z2 = z * z;
            let mut dp_cam = Vector3::zeros();
            dp_cam.x += dj[(0, 2)] * (-f / z2);
            dp_cam.y += dj[(1, 2)] * (-f / z2);
            dp_cam.z += dj[(0, 0)] * (-f / z2)
                + dj[(1, 1)] * (-f / z2)
                + dj[(0, 2)] * (2.0 * f * x / (z2 * z))
                + dj[(1, 2)] * (2.0 * f * y / (z2 * z));
            // Projected mean.
            dp_cam.x += dmean.x * f / z;
            dp_cam.y += dmean.y * f / z;
            dp_cam.z += -f * (dmean.x * x + dmean.y * y) / z2;

            let dp_world = rot.transpose() * dp_cam;

            // Sigma_cam = W Sigma_world W^T.
            let dsigma_world = rot.transpose() * dsigma_cam * rot;
            // Sigma_world = M M^T.
            let dm = (dsigma_world + dsigma_world.transpose()) * m;
            // M = R(q) diag(s).
            let mut dlog_s = [0.0; 3];
            let raw_scales = [
                set.log_scales[3 * gi].exp(),
                set.log_scales[3 * gi + 1].exp(),
                set.log_scales[3 * gi + 2].exp(),
            ];
            for k in 0..3 {
                let ds_k = r_q.column(k).dot(&dm.column(k));
                // Truncation gate: clamped scales get zero gradient.
                let truncated = set
                    .max_scale
                    .map(|cap| raw_scales[k] > cap)
                    .unwrap_or(false);
                dlog_s[k] = if truncated { 0.0 } else { ds_k * scales[k] };
            }
            let mut dr_q = Matrix3::zeros();
            for k in 0..3 {
                dr_q.set_column(k, &(dm.column(k) * scales[k]).into());
            }
            let dq_n = quat_rotation_backward(&qn, &dr_q);
            // Through the normalization of the stored quaternion.
            let q_raw = set.rotation(gi);
            let norm =
                (q_raw[0] * q_raw[0] + q_raw[1] * q_raw[1] + q_raw[2] * q_raw[2] + q_raw[3] * q_raw[3])
                    .sqrt();
            let dot = qn[0] * dq_n[0] + qn[1] * dq_n[1] + qn[2] * dq_n[2] + qn[3] * dq_n[3];
            let dq = [
                (dq_n[0] - qn[0] * dot) / norm,
                (dq_n[1] - qn[1] * dot) / norm,
                (dq_n[2] - qn[2] * dot) / norm,
                (dq_n[3] - qn[3] * dot) / norm,
            ];

            // Opacity pre-sigmoid.
            let sig = s.opacity;
            let dop = dop_act * sig * (1.0 - sig);

            (
                s.gid,
                [
                    dp_world.x, dp_world.y, dp_world.z, dq[0], dq[1], dq[2], dq[3], dlog_s[0],
                    dlog_s[1], dlog_s[2], dop, 0.0, 0.0,
                ],
            )
        })
        .collect();

    let mut grads = GaussianGrads::zeros(n);
    for (si, (gid, g)) in per_splat.iter().enumerate() {
        let gi = *gid as usize;
        grads.positions[3 * gi] += g[0];
        grads.positions[3 * gi + 1] += g[1];
        grads.positions[3 * gi + 2] += g[2];
        for k in 0..4 {
            grads.rotations[4 * gi + k] += g[3 + k];
        }
        for k in 0..3 {
            grads.log_scales[3 * gi + k] += g[7 + k];
        }
        grads.opacities[gi] += g[10];
        let base = si * SG;
        for k in 0..3 {
            grads.colors[3 * gi + k] += sg[base + 6 + k];
        }
    }
    grads
}

/// d(loss)/dq for R(q) given d(loss)/dR at unit quaternion q.
fn quat_rotation_backward(q: &[f64; 4], dr: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let dot = |m: &Matrix3<f64>| m.component_mul(dr).sum();
    [dot(&dr_dw), dot(&dr_dx), dot(&dr_dy), dot(&dr_dz)]
}

/// Renders the deformed set at normalized time `t` and returns the frame
/// plus the inpaint mask marking EMPTY regions (the complement of
/// coverage at the configured alpha threshold).
pub fn render_mask(
    set: &GaussianSet,
    field: &DeformationField,
    t: f64,
    camera: &CameraPose,
    opts: &RenderOptions,
) -> Result<(Image, Mask)> {
    let (deformed, _) = field.apply(set, t)?;
    let out = render(&deformed, camera, opts)?;
    let empty = Mask {
        height: out.rgb.height,
        width: out.rgb.width,
        data: out.alpha.iter().map(|&a| a < opts.mask_threshold).collect(),
    };
    Ok((out.rgb, empty))
}

/// A scalar loss over a rendered image with its gradient, used by
/// [`render_gradcheck`].
pub trait ImageLoss: Sync {
    /// Returns (loss, d loss / d rgb, optional d loss / d alpha).
    fn eval(&self, out: &RenderOutput) -> (f64, Vec<f64>, Option<Vec<f64>>);
}

/// Mean squared error against a fixed target image.
pub struct L2TargetLoss {
    pub target: Image,
}

impl ImageLoss for L2TargetLoss {
    fn eval(&self, out: &RenderOutput) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let n = self.target.data.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.target.data.len()];
        for (i, (r, t)) in out.rgb.data.iter().zip(&self.target.data).enumerate() {
            let d = r - t;
            loss += d * d / n;
            grad[i] = 2.0 * d / n;
        }
        (loss, grad, None)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub max_rel_positions: f64,
    pub max_rel_rotations: f64,
    pub max_rel_log_scales: f64,
    pub max_rel_opacities: f64,
    pub max_rel_colors: f64,
    pub frozen_zero: bool,
}

/// Compares the analytic renderer gradients of a scalar image loss against
/// central finite differences on a tiny scene.
pub fn render_gradcheck(
    set: &GaussianSet,
    camera: &CameraPose,
    opts: &RenderOptions,
    loss: &dyn ImageLoss,
) -> Result<GradcheckReport> {
    let (out, cache) = render_with_cache(set, camera, opts)?;
    let (_, grad_rgb, grad_alpha) = loss.eval(&out);
    let analytic = render_backward(set, camera, opts, &cache, &grad_rgb, grad_alpha.as_deref());

    if set.frozen {
        let all_zero = analytic
            .positions
            .iter()
            .chain(&analytic.rotations)
            .chain(&analytic.log_scales)
            .chain(&analytic.opacities)
            .chain(&analytic.colors)
            .all(|&g| g == 0.0);
        return Ok(GradcheckReport {
            frozen_zero: all_zero,
            ..Default::default()
        });
    }

    let eval = |s: &GaussianSet| -> f64 {
        let o = render(s, camera, opts).unwrap();
        loss.eval(&o).0
    };
    let fd_tensor = |probe: &mut dyn FnMut(&mut GaussianSet) -> &mut Vec<f64>,
                     analytic: &[f64],
                     h: f64|
     -> f64 {
        let mut work = set.clone();
        let len = probe(&mut work).len();
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut max_rel = 0.0f64;
        for i in 0..len {
            let base = probe(&mut work)[i];
            probe(&mut work)[i] = base + h;
            let up = eval(&work);
            probe(&mut work)[i] = base - h;
            let down = eval(&work);
            probe(&mut work)[i] = base;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-3 * scale.max(1e-12));
            max_rel = max_rel.max((fd - analytic[i]).abs() / denom);
        }
        max_rel
    };

    let report = GradcheckReport {
        max_rel_positions: fd_tensor(&mut |s| &mut s.positions, &analytic.positions, 1e-5),
        max_rel_rotations: fd_tensor(&mut |s| &mut s.rotations, &analytic.rotations, 1e-5),
        max_rel_log_scales: fd_tensor(&mut |s| &mut s.log_scales, &analytic.log_scales, 1e-5),
        max_rel_opacities: fd_tensor(&mut |s| &mut s.opacities, &analytic.opacities, 1e-5),
        max_rel_colors: fd_tensor(&mut |s| &mut s.colors, &analytic.colors, 1e-6),
        frozen_zero: true,
    };
    Ok(report)
}
