//! Plain Adam over flat f64 parameter tensors.

/// Adam state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One Adam step in place. Tensor length is fixed per state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    /// Grows state with zeros when a tensor gained elements (densification).
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }

    /// Rebuilds state after an arbitrary reindex of per-element groups.
    /// `mapping[new] = Some(old)` keeps old moments, `None` starts fresh.
    pub fn reindex(&mut self, mapping: &[Option<usize>], group: usize) {
        let mut m = vec![0.0; mapping.len() * group];
        let mut v = vec![0.0; mapping.len() * group];
        for (new, old) in mapping.iter().enumerate() {
            if let Some(old) = old {
                for k in 0..group {
                    m[new * group + k] = self.m[old * group + k];
                    v[new * group + k] = self.v[old * group + k];
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Adam states for all five Gaussian attribute tensors, with the
/// per-attribute learning rates applied.
#[derive(Debug, Clone)]
pub struct GaussianAdam {
    pub positions: AdamState,
    pub rotations: AdamState,
    pub log_scales: AdamState,
    pub opacities: AdamState,
    pub colors: AdamState,
}

impl GaussianAdam {
    pub fn new(n: usize, lrs: &crate::config::GaussianLrs) -> Self {
        GaussianAdam {
            positions: AdamState::new(3 * n, lrs.position),
            rotations: AdamState::new(4 * n, lrs.rotation),
            log_scales: AdamState::new(3 * n, lrs.scaling),
            opacities: AdamState::new(n, lrs.opacity),
            colors: AdamState::new(3 * n, lrs.feature),
        }
    }

    pub fn step(&mut self, set: &mut crate::scene::GaussianSet, g: &crate::scene::GaussianGrads) {
        self.positions.step(&mut set.positions, &g.positions);
        self.rotations.step(&mut set.rotations, &g.rotations);
        // The renderer normalizes quaternions internally (with gradients
        // through the normalization), so renormalizing the stored values
        // preserves the render while keeping the unit-norm invariant.
        for q in set.rotations.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                for v in q {
                    *v /= n;
                }
            }
        }
        self.log_scales.step(&mut set.log_scales, &g.log_scales);
        self.opacities.step(&mut set.opacities, &g.opacities);
        self.colors.step(&mut set.colors, &g.colors);
    }

    /// Rebuilds all moment tensors after densification/pruning.
    pub fn reindex(&mut self, mapping: &[Option<usize>]) {
        self.positions.reindex(mapping, 3);
        self.rotations.reindex(mapping, 4);
        self.log_scales.reindex(mapping, 3);
        self.opacities.reindex(mapping, 1);
        self.colors.reindex(mapping, 3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![5.0, -3.0];
        let mut opt = AdamState::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "p = {p:?}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![1.0, 2.0, 3.0];
            let mut opt = AdamState::new(3, 0.01);
            for i in 0..50 {
                let g: Vec<f64> = p.iter().map(|x: &f64| x.sin() + i as f64 * 0.01).collect();
                opt.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
