use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussians::{GaussianGrads, GaussianSet};
use crate::error::{CocoError, Result};
use crate::img::{read_f32_container, write_f32_container};

/// Fully-connected layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
    }
}

/// Small fully-connected network: tanh hidden activations, linear output,
/// final layer zero-initialized so training starts at the identity
/// deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// One 2D feature plane of the space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    /// Axis indices into (x, y, z, t); axis 3 is time.
    pub axes: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    pub feat: usize,
    /// rows * cols * feat.
    pub data: Vec<f64>,
}

/// Multi-resolution space-time plane features (HexPlane-style): one plane per
/// axis pair per resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub planes: Vec<Plane>,
}

const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

impl PlaneGrid {
    pub fn new(levels: &[usize], feat: usize) -> Self {
        let mut planes = Vec::new();
        for &res in levels {
            for axes in PLANE_AXES {
                planes.push(Plane {
                    axes,
                    rows: res,
                    cols: res,
                    feat,
                    data: vec![0.0; res * res * feat],
                });
            }
        }
        PlaneGrid { planes }
    }

    pub fn feature_dim(&self) -> usize {
        self.planes.iter().map(|p| p.feat).sum()
    }
}

/// Configuration of a deformation field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldArchitecture {
    pub hidden: usize,
    pub pos_bands: usize,
    pub time_bands: usize,
    /// Plane-grid resolutions; empty disables the grid (foreground variant).
    pub grid_levels: Vec<usize>,
    pub grid_feat: usize,
    /// Positions are normalized by this half-extent for encoding and grids.
    pub spatial_extent: f64,
}

impl FieldArchitecture {
    pub fn foreground() -> Self {
        FieldArchitecture {
            hidden: 32,
            pos_bands: 4,
            time_bands: 2,
            grid_levels: vec![],
            grid_feat: 0,
            spatial_extent: 2.0,
        }
    }

    pub fn background() -> Self {
        FieldArchitecture {
            hidden: 32,
            pos_bands: 4,
            time_bands: 2,
            grid_levels: vec![8, 16],
            grid_feat: 2,
            spatial_extent: 6.0,
        }
    }

    fn encoding_dim(&self) -> usize {
        3 + 6 * self.pos_bands + 1 + 2 * self.time_bands
    }
}

/// Trainable field mapping (position, time) to per-Gaussian parameter deltas
/// (position, quaternion perturbation, log-scale).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub arch: FieldArchitecture,
    pub mlp: Mlp,
    pub grid: Option<PlaneGrid>,
}

const OUT_DIM: usize = 10; // 3 position + 4 quaternion + 3 log-scale deltas

impl DeformationField {
    pub fn new(arch: FieldArchitecture, seed: u64) -> Self {
        let grid = if arch.grid_levels.is_empty() {
            None
        } else {
            Some(PlaneGrid::new(&arch.grid_levels, arch.grid_feat))
        };
        let in_dim = arch.encoding_dim() + grid.as_ref().map_or(0, |g| g.feature_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp {
            layers: vec![
                Linear::new(in_dim, arch.hidden, &mut rng),
                Linear::new(arch.hidden, arch.hidden, &mut rng),
                Linear::zeros(arch.hidden, OUT_DIM),
            ],
        };
        DeformationField { arch, mlp, grid }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.layers[0].in_dim
    }

    fn encode(&self, pos: &[f64; 3], t: f64, out: &mut Vec<f64>) {
        let ext = self.arch.spatial_extent;
        for &p in pos {
            out.push(p / ext);
        }
        for band in 0..self.arch.pos_bands {
            let f = (1 << band) as f64 * std::f64::consts::PI;
            for &p in pos {
                out.push((f * p / ext).sin());
                out.push((f * p / ext).cos());
            }
        }
        out.push(t);
        for band in 0..self.arch.time_bands {
            let f = (1 << band) as f64 * std::f64::consts::PI;
            out.push((f * t).sin());
            out.push((f * t).cos());
        }
    }

    /// Applies the field at normalized time `t`, returning the deformed set
    /// and the cache needed for the backward pass. The input set is
    /// unchanged.
    pub fn apply(&self, set: &GaussianSet, t: f64) -> Result<(GaussianSet, DeformCache)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CocoError::Domain(format!(
                "deformation time {t} outside [0, 1]"
            )));
        }
        let n = set.len();
        let in_dim = self.input_dim();
        let hidden = self.arch.hidden;
        let plane_count = self.grid.as_ref().map_or(0, |g| g.planes.len());

        let mut inputs = vec![0.0; n * in_dim];
        let mut h1 = vec![0.0; n * hidden];
        let mut h2 = vec![0.0; n * hidden];
        let mut out = vec![0.0; n * OUT_DIM];
        // When there is no plane grid, keep one dummy slot per Gaussian so
        // the zipped chunk iterators stay aligned.
        let svals = (plane_count * 2).max(1);
        let mut sample_idx = vec![0u32; n * svals];
        let mut sample_frac = vec![0.0; n * svals];

        let chunk = 1024;
        inputs
            .par_chunks_mut(chunk * in_dim)
            .zip(h1.par_chunks_mut(chunk * hidden))
            .zip(h2.par_chunks_mut(chunk * hidden))
            .zip(out.par_chunks_mut(chunk * OUT_DIM))
            .zip(sample_idx.par_chunks_mut(chunk * svals))
            .zip(sample_frac.par_chunks_mut(chunk * svals))
            .enumerate()
            .for_each(|(ci, (((((ins, h1s), h2s), outs), sidx), sfrac))| {
                let base = ci * chunk;
                let count = ins.len() / in_dim;
                let mut enc = Vec::with_capacity(in_dim);
                for local in 0..count {
                    let i = base + local;
                    let pos = [
                        set.positions[3 * i],
                        set.positions[3 * i + 1],
                        set.positions[3 * i + 2],
                    ];
                    enc.clear();
                    self.encode(&pos, t, &mut enc);
                    if let Some(grid) = &self.grid {
                        for (pi, plane) in grid.planes.iter().enumerate() {
                            let (u, v) = plane_coords(plane, &pos, t, self.arch.spatial_extent);
                            let (i0, j0, fu, fv) = bilinear_cell(plane, u, v);
                            sidx[local * plane_count * 2 + 2 * pi] = i0 as u32;
                            sidx[local * plane_count * 2 + 2 * pi + 1] = j0 as u32;
                            sfrac[local * plane_count * 2 + 2 * pi] = fu;
                            sfrac[local * plane_count * 2 + 2 * pi + 1] = fv;
                            for f in 0..plane.feat {
                                enc.push(plane_sample(plane, i0, j0, fu, fv, f));
                            }
                        }
                    }
                    ins[local * in_dim..(local + 1) * in_dim].copy_from_slice(&enc);
                    let x = &ins[local * in_dim..(local + 1) * in_dim];
                    let h1v = &mut h1s[local * hidden..(local + 1) * hidden];
                    self.mlp.layers[0].forward(x, h1v);
                    for v in h1v.iter_mut() {
                        *v = v.tanh();
                    }
                    let h2v = &mut h2s[local * hidden..(local + 1) * hidden];
                    self.mlp.layers[1].forward(&h1s[local * hidden..(local + 1) * hidden], h2v);
                    for v in h2v.iter_mut() {
                        *v = v.tanh();
                    }
                    self.mlp.layers[2].forward(
                        &h2s[local * hidden..(local + 1) * hidden],
                        &mut outs[local * OUT_DIM..(local + 1) * OUT_DIM],
                    );
                }
            });

        let mut deformed = set.clone();
        deformed.frozen = false;
        let mut quat_prenorm = vec![0.0; n * 4];
        for i in 0..n {
            let d = &out[i * OUT_DIM..(i + 1) * OUT_DIM];
            deformed.positions[3 * i] += d[0];
            deformed.positions[3 * i + 1] += d[1];
            deformed.positions[3 * i + 2] += d[2];
            let q = set.rotation(i);
            let v = [q[0] + d[3], q[1] + d[4], q[2] + d[5], q[3] + d[6]];
            quat_prenorm[4 * i..4 * i + 4].copy_from_slice(&v);
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
            for (k, vv) in v.iter().enumerate() {
                deformed.rotations[4 * i + k] = vv / norm;
            }
            deformed.log_scales[3 * i] += d[7];
            deformed.log_scales[3 * i + 1] += d[8];
            deformed.log_scales[3 * i + 2] += d[9];
        }
        let cache = DeformCache {
            t,
            inputs,
            h1,
            h2,
            sample_idx,
            sample_frac,
            quat_prenorm,
        };
        Ok((deformed, cache))
    }

    /// Maps gradients w.r.t. the deformed attributes back to gradients on the
    /// field parameters. The base set is frozen during motion training, so
    /// no gradients flow to Gaussian attributes here.
    pub fn backward(&self, cache: &DeformCache, grads: &GaussianGrads) -> FieldGrads {
        let n = cache.quat_prenorm.len() / 4;
        let in_dim = self.input_dim();
        let hidden = self.arch.hidden;
        let plane_count = self.grid.as_ref().map_or(0, |g| g.planes.len());
        let enc_dim = self.arch.encoding_dim();

        let chunk = 2048;
        let ranges: Vec<(usize, usize)> = (0..n)
            .step_by(chunk)
            .map(|s| (s, (s + chunk).min(n)))
            .collect();
        let partials: Vec<FieldGrads> = ranges
            .par_iter()
            .map(|&(start, end)| {
                let mut fg = FieldGrads::zeros(self);
                let mut dout = [0.0; OUT_DIM];
                let mut dh2 = vec![0.0; hidden];
                let mut dh1 = vec![0.0; hidden];
                let mut dx = vec![0.0; in_dim];
                for i in start..end {
                    // Delta gradients from the deformed attributes.
                    dout[0] = grads.positions[3 * i];
                    dout[1] = grads.positions[3 * i + 1];
                    dout[2] = grads.positions[3 * i + 2];
                    let v = &cache.quat_prenorm[4 * i..4 * i + 4];
                    let norm =
                        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
                    let q = [v[0] / norm, v[1] / norm, v[2] / norm, v[3] / norm];
                    let gq = &grads.rotations[4 * i..4 * i + 4];
                    let dot = q[0] * gq[0] + q[1] * gq[1] + q[2] * gq[2] + q[3] * gq[3];
                    for k in 0..4 {
                        dout[3 + k] = (gq[k] - q[k] * dot) / norm;
                    }
                    dout[7] = grads.log_scales[3 * i];
                    dout[8] = grads.log_scales[3 * i + 1];
                    dout[9] = grads.log_scales[3 * i + 2];

                    let h2 = &cache.h2[i * hidden..(i + 1) * hidden];
                    let h1 = &cache.h1[i * hidden..(i + 1) * hidden];
                    let x = &cache.inputs[i * in_dim..(i + 1) * in_dim];

                    // Layer 2 (linear out).
                    let l2 = &self.mlp.layers[2];
                    dh2.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..OUT_DIM {
                        let g = dout[o];
                        if g == 0.0 {
                            continue;
                        }
                        fg.mlp_b[2][o] += g;
                        let wr = &l2.w[o * hidden..(o + 1) * hidden];
                        let gw = &mut fg.mlp_w[2][o * hidden..(o + 1) * hidden];
                        for k in 0..hidden {
                            gw[k] += g * h2[k];
                            dh2[k] += g * wr[k];
                        }
                    }
                    // tanh.
                    for k in 0..hidden {
                        dh2[k] *= 1.0 - h2[k] * h2[k];
                    }
                    // Layer 1.
                    let l1 = &self.mlp.layers[1];
                    dh1.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..hidden {
                        let g = dh2[o];
                        fg.mlp_b[1][o] += g;
                        let wr = &l1.w[o * hidden..(o + 1) * hidden];
                        let gw = &mut fg.mlp_w[1][o * hidden..(o + 1) * hidden];
                        for k in 0..hidden {
                            gw[k] += g * h1[k];
                            dh1[k] += g * wr[k];
                        }
                    }
                    for k in 0..hidden {
                        dh1[k] *= 1.0 - h1[k] * h1[k];
                    }
                    // Layer 0.
                    let l0 = &self.mlp.layers[0];
                    dx.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..hidden {
                        let g = dh1[o];
                        fg.mlp_b[0][o] += g;
                        let wr = &l0.w[o * in_dim..(o + 1) * in_dim];
                        let gw = &mut fg.mlp_w[0][o * in_dim..(o + 1) * in_dim];
                        for k in 0..in_dim {
                            gw[k] += g * x[k];
                            dx[k] += g * wr[k];
                        }
                    }
                    // Grid features: scatter input grads through the bilinear
                    // weights recorded in the forward pass.
                    if let Some(grid) = &self.grid {
                        let mut off = enc_dim;
                        for (pi, plane) in grid.planes.iter().enumerate() {
                            let i0 = cache.sample_idx[i * plane_count * 2 + 2 * pi] as usize;
                            let j0 = cache.sample_idx[i * plane_count * 2 + 2 * pi + 1] as usize;
                            let fu = cache.sample_frac[i * plane_count * 2 + 2 * pi];
                            let fv = cache.sample_frac[i * plane_count * 2 + 2 * pi + 1];
                            let i1 = (i0 + 1).min(plane.rows - 1);
                            let j1 = (j0 + 1).min(plane.cols - 1);
                            for f in 0..plane.feat {
                                let g = dx[off + f];
                                let pg = &mut fg.grid[pi];
                                pg[(i0 * plane.cols + j0) * plane.feat + f] +=
                                    g * (1.0 - fu) * (1.0 - fv);
                                pg[(i0 * plane.cols + j1) * plane.feat + f] +=
                                    g * (1.0 - fu) * fv;
                                pg[(i1 * plane.cols + j0) * plane.feat + f] +=
                                    g * fu * (1.0 - fv);
                                pg[(i1 * plane.cols + j1) * plane.feat + f] += g * fu * fv;
                            }
                            off += plane.feat;
                        }
                    }
                }
                fg
            })
            .collect();
        let mut total = FieldGrads::zeros(self);
        for p in partials {
            total.add(&p);
        }
        total
    }

    /// Named parameter tensors in a fixed order (used by the optimizer and
    /// the weight-blob serialization).
    pub fn tensor_names_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.mlp.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), vec![l.out_dim, l.in_dim]));
            out.push((format!("mlp.{i}.bias"), vec![l.out_dim]));
        }
        if let Some(grid) = &self.grid {
            for (i, p) in grid.planes.iter().enumerate() {
                out.push((format!("grid.{i}"), vec![p.rows, p.cols, p.feat]));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.mlp.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        if let Some(grid) = &self.grid {
            for p in &grid.planes {
                out.push(&p.data);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.mlp.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        if let Some(grid) = &mut self.grid {
            for p in &mut grid.planes {
                out.push(&mut p.data);
            }
        }
        out
    }

    /// Serializes to a flat little-endian f32 weight blob plus a JSON header
    /// listing tensor names and shapes.
    pub fn save(&self, blob_path: &Path, header_path: &Path) -> Result<()> {
        let tensors = self.tensor_names_shapes();
        let header = FieldHeader {
            architecture: self.arch.clone(),
            tensors: tensors
                .iter()
                .map(|(name, shape)| TensorInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        std::fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
        let flat: Vec<f64> = self.params().iter().flat_map(|p| p.iter().copied()).collect();
        write_f32_container(blob_path, &[flat.len()], &flat)?;
        Ok(())
    }

    pub fn load(blob_path: &Path, header_path: &Path) -> Result<DeformationField> {
        let header: FieldHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
        let mut field = DeformationField::new(header.architecture, 0);
        let expect = field.tensor_names_shapes();
        let got: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expect != got {
            return Err(CocoError::Load(format!(
                "{}: tensor list does not match architecture",
                header_path.display()
            )));
        }
        let (shape, flat) = read_f32_container(blob_path)?;
        let total: usize = expect.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if shape != vec![total] {
            return Err(CocoError::Load(format!(
                "{}: blob length {:?} != expected {total}",
                blob_path.display(),
                shape
            )));
        }
        let mut off = 0;
        for p in field.params_mut() {
            let len = p.len();
            p.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(field)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    architecture: FieldArchitecture,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Forward-pass cache for [`DeformationField::backward`].
#[derive(Debug, Clone)]
pub struct DeformCache {
    pub t: f64,
    inputs: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    sample_idx: Vec<u32>,
    sample_frac: Vec<f64>,
    quat_prenorm: Vec<f64>,
}

/// Gradients aligned with [`DeformationField::params`] layout.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub mlp_w: Vec<Vec<f64>>,
    pub mlp_b: Vec<Vec<f64>>,
    pub grid: Vec<Vec<f64>>,
}

impl FieldGrads {
    pub fn zeros(field: &DeformationField) -> Self {
        FieldGrads {
            mlp_w: field.mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            mlp_b: field.mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            grid: field
                .grid
                .as_ref()
                .map(|g| g.planes.iter().map(|p| vec![0.0; p.data.len()]).collect())
                .unwrap_or_default(),
        }
    }

    pub fn add(&mut self, other: &FieldGrads) {
        for (a, b) in self.mlp_w.iter_mut().zip(&other.mlp_w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.mlp_b.iter_mut().zip(&other.mlp_b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Flattens into the same order as [`DeformationField::params`].
    pub fn flat(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for (w, b) in self.mlp_w.iter().zip(&self.mlp_b) {
            out.push(w);
            out.push(b);
        }
        for g in &self.grid {
            out.push(g);
        }
        out
    }
}

fn plane_coords(plane: &Plane, pos: &[f64; 3], t: f64, extent: f64) -> (f64, f64) {
    let coord = |axis: usize| -> f64 {
        if axis == 3 {
            t
        } else {
            ((pos[axis] / extent) + 1.0) / 2.0
        }
    };
    (
        coord(plane.axes.0).clamp(0.0, 1.0),
        coord(plane.axes.1).clamp(0.0, 1.0),
    )
}

fn bilinear_cell(plane: &Plane, u: f64, v: f64) -> (usize, usize, f64, f64) {
    // u indexes rows, v columns; integer coordinates land on cell nodes.
    let ru = u * (plane.rows - 1).max(1) as f64;
    let cv = v * (plane.cols - 1).max(1) as f64;
    let i0 = (ru.floor() as usize).min(plane.rows.saturating_sub(2));
    let j0 = (cv.floor() as usize).min(plane.cols.saturating_sub(2));
    (i0, j0, ru - i0 as f64, cv - j0 as f64)
}

fn plane_sample(plane: &Plane, i0: usize, j0: usize, fu: f64, fv: f64, f: usize) -> f64 {
    let i1 = (i0 + 1).min(plane.rows - 1);
    let j1 = (j0 + 1).min(plane.cols - 1);
    let at = |i: usize, j: usize| plane.data[(i * plane.cols + j) * plane.feat + f];
    at(i0, j0) * (1.0 - fu) * (1.0 - fv)
        + at(i0, j1) * (1.0 - fu) * fv
        + at(i1, j0) * fu * (1.0 - fv)
        + at(i1, j1) * fu * fv
}

/// Mean squared difference of adjacent feature-grid cells along each grid
/// axis; zero exactly on constant grids.
pub fn tv_loss(field: &DeformationField) -> Result<f64> {
    match &field.grid {
        None => Err(CocoError::NotApplicable(
            "tv loss needs a field with grid features".into(),
        )),
        Some(grid) => Ok(tv_of_planes(&grid.planes).0),
    }
}

/// TV loss plus gradients aligned with the grid planes.
pub fn tv_loss_grad(field: &DeformationField) -> Result<(f64, Vec<Vec<f64>>)> {
    match &field.grid {
        None => Err(CocoError::NotApplicable(
            "tv loss needs a field with grid features".into(),
        )),
        Some(grid) => {
            let (loss, grads) = tv_of_planes(&grid.planes);
            Ok((loss, grads))
        }
    }
}

fn tv_of_planes(planes: &[Plane]) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut grads: Vec<Vec<f64>> = planes.iter().map(|p| vec![0.0; p.data.len()]).collect();
    // First pass: count pairs for the mean normalization.
    for p in planes {
        if p.cols > 1 {
            pairs += p.rows * (p.cols - 1) * p.feat;
        }
        if p.rows > 1 {
            pairs += (p.rows - 1) * p.cols * p.feat;
        }
    }
    if pairs == 0 {
        return (0.0, grads);
    }
    let norm = pairs as f64;
    for (pi, p) in planes.iter().enumerate() {
        let at = |i: usize, j: usize, f: usize| (i * p.cols + j) * p.feat + f;
        for i in 0..p.rows {
            for j in 0..p.cols {
                for f in 0..p.feat {
                    if j + 1 < p.cols {
                        let d = p.data[at(i, j + 1, f)] - p.data[at(i, j, f)];
                        total += d * d;
                        grads[pi][at(i, j + 1, f)] += 2.0 * d / norm;
                        grads[pi][at(i, j, f)] -= 2.0 * d / norm;
                    }
                    if i + 1 < p.rows {
                        let d = p.data[at(i + 1, j, f)] - p.data[at(i, j, f)];
                        total += d * d;
                        grads[pi][at(i + 1, j, f)] += 2.0 * d / norm;
                        grads[pi][at(i, j, f)] -= 2.0 * d / norm;
                    }
                }
            }
        }
    }
    (total / norm, grads)
}
