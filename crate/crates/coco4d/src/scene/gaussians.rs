use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::error::{CocoError, Result};

/// A splat cloud. Scales are stored as log-scale pre-activation, opacities
/// pre-sigmoid. `frozen` marks sets whose attributes must not receive
/// optimizer updates (the static foreground during motion training).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    /// N*3 world positions.
    pub positions: Vec<f64>,
    /// N*4 quaternions, (w, x, y, z), kept unit-norm.
    pub rotations: Vec<f64>,
    /// N*3 log-scales.
    pub log_scales: Vec<f64>,
    /// N pre-sigmoid opacities.
    pub opacities: Vec<f64>,
    /// N*3 RGB in [0, 1].
    pub colors: Vec<f64>,
    pub frozen: bool,
    /// When set, activated scales are truncated to this bound after every
    /// optimizer step.
    pub max_scale: Option<f64>,
}

impl GaussianSet {
    pub fn empty() -> Self {
        GaussianSet {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacities: Vec::new(),
            colors: Vec::new(),
            frozen: false,
            max_scale: None,
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    ) {
        self.positions
            .extend_from_slice(&[position.x, position.y, position.z]);
        self.rotations.extend_from_slice(&rotation);
        self.log_scales.extend_from_slice(&log_scale);
        self.opacities.push(opacity);
        self.colors.extend_from_slice(&color);
    }

    #[inline]
    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        )
    }

    #[inline]
    pub fn rotation(&self, i: usize) -> [f64; 4] {
        self.rotations[4 * i..4 * i + 4].try_into().unwrap()
    }

    #[inline]
    pub fn activated_scale(&self, i: usize) -> [f64; 3] {
        let mut s = [
            self.log_scales[3 * i].exp(),
            self.log_scales[3 * i + 1].exp(),
            self.log_scales[3 * i + 2].exp(),
        ];
        if let Some(m) = self.max_scale {
            for v in &mut s {
                *v = v.min(m);
            }
        }
        s
    }

    #[inline]
    pub fn activated_opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacities[i])
    }

    #[inline]
    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors[3 * i..3 * i + 3].try_into().unwrap()
    }

    pub fn normalize_rotations(&mut self) {
        for i in 0..self.len() {
            let q = &mut self.rotations[4 * i..4 * i + 4];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Projects stored log-scales so activated scales respect `max_scale`.
    /// Applied after optimizer steps when truncation is enabled.
    pub fn truncate_scales(&mut self) {
        if let Some(m) = self.max_scale {
            let cap = m.ln();
            for v in &mut self.log_scales {
                if *v > cap {
                    *v = cap;
                }
            }
        }
    }

    /// Appends another set's Gaussians.
    pub fn extend_from(&mut self, other: &GaussianSet) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacities.extend_from_slice(&other.opacities);
        self.colors.extend_from_slice(&other.colors);
    }

    /// Type-invariant check: unit quaternions, positive activated scales,
    /// truncation bound respected, colors in range.
    pub fn check(&self) -> Result<()> {
        for i in 0..self.len() {
            let q = self.rotation(i);
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(CocoError::Validation(format!(
                    "gaussian {i}: quaternion norm {n} not unit"
                )));
            }
            for s in self.activated_scale(i) {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(CocoError::Validation(format!(
                        "gaussian {i}: non-positive activated scale {s}"
                    )));
                }
                if let Some(m) = self.max_scale {
                    if s > m + 1e-12 {
                        return Err(CocoError::Validation(format!(
                            "gaussian {i}: activated scale {s} exceeds truncation bound {m}"
                        )));
                    }
                }
            }
            let o = self.activated_opacity(i);
            if !(0.0..=1.0).contains(&o) {
                return Err(CocoError::Validation(format!(
                    "gaussian {i}: activated opacity {o} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "ply")?;
        writeln!(out, "format binary_little_endian 1.0")?;
        writeln!(out, "element vertex {}", self.len())?;
        for name in PLY_PROPERTIES {
            writeln!(out, "property float {name}")?;
        }
        writeln!(out, "end_header")?;
        for i in 0..self.len() {
            let p = self.position(i);
            let q = self.rotation(i);
            let s = &self.log_scales[3 * i..3 * i + 3];
            let c = self.color(i);
            for v in [
                p.x,
                p.y,
                p.z,
                q[0],
                q[1],
                q[2],
                q[3],
                s[0],
                s[1],
                s[2],
                self.opacities[i],
                c[0],
                c[1],
                c[2],
            ] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<GaussianSet> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut count = None;
        let mut props = Vec::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(CocoError::Load(format!(
                    "{}: truncated PLY header",
                    path.display()
                )));
            }
            let l = line.trim();
            if let Some(rest) = l.strip_prefix("element vertex ") {
                count = Some(rest.parse::<usize>().map_err(|e| {
                    CocoError::Load(format!("{}: bad vertex count: {e}", path.display()))
                })?);
            } else if let Some(rest) = l.strip_prefix("property float ") {
                props.push(rest.to_string());
            } else if l == "end_header" {
                break;
            }
        }
        let count = count
            .ok_or_else(|| CocoError::Load(format!("{}: missing vertex element", path.display())))?;
        if props != PLY_PROPERTIES {
            return Err(CocoError::Load(format!(
                "{}: unexpected PLY properties {props:?}",
                path.display()
            )));
        }
        let mut set = GaussianSet::empty();
        let mut buf = [0u8; 4];
        for _ in 0..count {
            let mut vals = [0f64; 14];
            for v in &mut vals {
                reader.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf) as f64;
            }
            set.push(
                Vector3::new(vals[0], vals[1], vals[2]),
                [vals[3], vals[4], vals[5], vals[6]],
                [vals[7], vals[8], vals[9]],
                vals[10],
                [vals[11], vals[12], vals[13]],
            );
        }
        set.normalize_rotations();
        Ok(set)
    }
}

const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b",
];

/// Gradients for every Gaussian attribute, same shapes as the set.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacities: Vec<f64>,
    pub colors: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianGrads {
            positions: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            log_scales: vec![0.0; 3 * n],
            opacities: vec![0.0; n],
            colors: vec![0.0; 3 * n],
        }
    }

    pub fn add(&mut self, other: &GaussianGrads) {
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
        for (a, b) in self.opacities.iter_mut().zip(&other.opacities) {
            *a += b;
        }
        for (a, b) in self.colors.iter_mut().zip(&other.colors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self
            .positions
            .iter_mut()
            .chain(&mut self.rotations)
            .chain(&mut self.log_scales)
            .chain(&mut self.opacities)
            .chain(&mut self.colors)
        {
            *v *= k;
        }
    }
}

/// Frame index within an n-frame video, normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub frame_index: usize,
    pub n: usize,
}

impl TimeStamp {
    pub fn new(frame_index: usize, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(CocoError::InvalidArgument(format!(
                "timestamps need n >= 2 frames, got {n}"
            )));
        }
        if frame_index < 1 || frame_index > n {
            return Err(CocoError::InvalidArgument(format!(
                "frame index {frame_index} outside [1, {n}]"
            )));
        }
        Ok(TimeStamp { frame_index, n })
    }

    pub fn normalized(&self) -> f64 {
        (self.frame_index - 1) as f64 / (self.n - 1) as f64
    }
}

/// Uniform sphere-surface initialization using a Fibonacci lattice for
/// determinism. Colors start mid-gray, rotations identity.
pub fn init_sphere_gaussians(count: usize, radius: f64) -> Result<GaussianSet> {
    if count == 0 {
        return Err(CocoError::InvalidArgument(
            "gaussian count must be positive".into(),
        ));
    }
    if radius <= 0.0 {
        return Err(CocoError::InvalidArgument(format!(
            "sphere radius must be positive, got {radius}"
        )));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    // Roughly one lattice cell per Gaussian.
    let scale = (radius * (4.0 * std::f64::consts::PI / count as f64).sqrt() * 0.5).max(1e-6);
    let mut set = GaussianSet::empty();
    for i in 0..count {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - y * y).max(0.0).sqrt();
        let theta = 2.0 * std::f64::consts::PI * i as f64 / golden;
        let pos = radius * Vector3::new(r * theta.cos(), y, r * theta.sin());
        set.push(
            pos,
            [1.0, 0.0, 0.0, 0.0],
            [scale.ln(); 3],
            inv_sigmoid(0.1),
            [0.5, 0.5, 0.5],
        );
    }
    Ok(set)
}

fn inv_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// K-nearest-neighbor graph over static positions, computed once and reused
/// by the rigidity loss across timestamps.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub k: usize,
    /// N*k neighbor indices.
    pub indices: Vec<u32>,
}

impl NeighborGraph {
    pub fn build(set: &GaussianSet, k: usize) -> Result<NeighborGraph> {
        let n = set.len();
        if n < k + 1 {
            return Err(CocoError::InvalidArgument(format!(
                "need at least k+1 = {} gaussians for a {k}-NN graph, got {n}",
                k + 1
            )));
        }
        use rayon::prelude::*;
        let indices: Vec<u32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let pi = set.position(i);
                let mut dists: Vec<(f64, u32)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ((set.position(j) - pi).norm_squared(), j as u32))
                    .collect();
                dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                dists.truncate(k);
                dists.into_iter().map(|(_, j)| j)
            })
            .collect();
        Ok(NeighborGraph { k, indices })
    }
}

/// Mean over Gaussians and their static k-nearest neighbors of the squared
/// change in pairwise offset between the static and deformed positions.
pub fn rigidity_loss(
    static_set: &GaussianSet,
    deformed: &GaussianSet,
    graph: &NeighborGraph,
) -> Result<f64> {
    Ok(rigidity_loss_grad(static_set, &deformed.positions, graph)?.0)
}

/// Rigidity loss plus its gradient w.r.t. the deformed positions.
pub fn rigidity_loss_grad(
    static_set: &GaussianSet,
    deformed_positions: &[f64],
    graph: &NeighborGraph,
) -> Result<(f64, Vec<f64>)> {
    let n = static_set.len();
    if deformed_positions.len() != 3 * n {
        return Err(CocoError::InvalidArgument(format!(
            "deformed set size {} != static size {n}",
            deformed_positions.len() / 3
        )));
    }
    let k = graph.k;
    let count = (n * k) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; 3 * n];
    let dp = |i: usize| {
        Vector3::new(
            deformed_positions[3 * i],
            deformed_positions[3 * i + 1],
            deformed_positions[3 * i + 2],
        )
    };
    for i in 0..n {
        for jj in 0..k {
            let j = graph.indices[i * k + jj] as usize;
            let diff = (dp(i) - dp(j)) - (static_set.position(i) - static_set.position(j));
            loss += diff.norm_squared();
            let g = 2.0 / count * diff;
            grad[3 * i] += g.x;
            grad[3 * i + 1] += g.y;
            grad[3 * i + 2] += g.z;
            grad[3 * j] -= g.x;
            grad[3 * j + 1] -= g.y;
            grad[3 * j + 2] -= g.z;
        }
    }
    Ok((loss / count, grad))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensifyOptions {
    /// Absolute threshold on accumulated view-space position-gradient norm.
    pub grad_threshold: f64,
    /// Activated opacities below this floor are pruned.
    pub prune_opacity: f64,
    /// Gaussians larger than this activated scale split instead of clone.
    pub split_scale: f64,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        DensifyOptions {
            grad_threshold: 0.5,
            prune_opacity: 0.005,
            split_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones/splits Gaussians whose accumulated position-gradient norm exceeds
/// the threshold and prunes near-transparent ones. No-op when nothing
/// qualifies. The returned mapping gives, for each output Gaussian, the
/// input index it was carried over from (`None` for freshly created
/// clones/splits), so optimizer moments can be re-indexed.
pub fn densify_and_prune(
    set: &GaussianSet,
    accum_grad_norm: &[f64],
    opts: &DensifyOptions,
) -> (GaussianSet, DensifyReport, Vec<Option<usize>>) {
    assert_eq!(accum_grad_norm.len(), set.len());
    let mut out = GaussianSet::empty();
    out.frozen = set.frozen;
    out.max_scale = set.max_scale;
    let mut report = DensifyReport::default();
    let mut mapping = Vec::new();
    for i in 0..set.len() {
        if set.activated_opacity(i) < opts.prune_opacity {
            report.pruned += 1;
            continue;
        }
        let p = set.position(i);
        let q = set.rotation(i);
        let ls: [f64; 3] = set.log_scales[3 * i..3 * i + 3].try_into().unwrap();
        let o = set.opacities[i];
        let c = set.color(i);
        if accum_grad_norm[i] > opts.grad_threshold {
            let s = set.activated_scale(i);
            let max_axis = (0..3).max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
            if s[max_axis] > opts.split_scale {
                // Split: two smaller copies offset along the largest axis.
                report.split += 1;
                let axis = rotate_axis(&q, max_axis);
                let shrink = (1.0f64 / 1.6).ln();
                let mut ls2 = ls;
                for v in &mut ls2 {
                    *v += shrink;
                }
                let off = 0.5 * s[max_axis] * axis;
                out.push(p + off, q, ls2, o, c);
                out.push(p - off, q, ls2, o, c);
                mapping.push(None);
                mapping.push(None);
            } else {
                report.cloned += 1;
                out.push(p, q, ls, o, c);
                out.push(p, q, ls, o, c);
                mapping.push(Some(i));
                mapping.push(None);
            }
        } else {
            out.push(p, q, ls, o, c);
            mapping.push(Some(i));
        }
    }
    (out, report, mapping)
}

fn rotate_axis(q: &[f64; 4], axis: usize) -> Vector3<f64> {
    let r = quat_to_matrix(q);
    r.column(axis).into()
}

pub(crate) fn quat_to_matrix(q: &[f64; 4]) -> nalgebra::Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    nalgebra::Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}
