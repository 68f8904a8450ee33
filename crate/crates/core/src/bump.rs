//! Standard bump profiles: mollifier kernels and smooth compactly supported
//! test functions with analytic derivatives.

use crate::fields::Vec2;

/// exp(-1/(1-u^2)) on (-1,1), unnormalised.
pub fn bump_raw(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// d/du of [`bump_raw`].
pub fn bump_raw_d(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let s = 1.0 - u * u;
        bump_raw(u) * (-2.0 * u / (s * s))
    }
}

/// Discrete 1-D mollifier at scale 1/k: symmetric midpoint nodes on
/// [-1/k, 1/k] with weights normalised to unit sum. Symmetry kills odd
/// moments, so convolution is exact on affine functions.
#[derive(Debug, Clone)]
pub struct Kernel1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Kernel1d {
    pub fn new(k: u32, n: usize) -> Self {
        assert!(k >= 1 && n >= 3 && n % 2 == 1);
        let r = 1.0 / k as f64;
        let dz = 2.0 * r / n as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let z = -r + (i as f64 + 0.5) * dz;
            nodes.push(z);
            weights.push(bump_raw(z / r));
        }
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        Kernel1d { nodes, weights }
    }

    /// Discrete mass, exactly 1 by construction.
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Convolve a scalar function of time at `t`.
    pub fn convolve(&self, t: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(t - z))
            .sum()
    }
}

/// Smooth space-time test function `phi(t, x) = eta((t-t0)/rt) *
/// eta(|x-c|/rx)` with analytic time derivative and spatial gradient.
/// Compactly supported in `(t0-rt, t0+rt) x B_rx(c)`.
#[derive(Debug, Clone)]
pub struct SpaceTimeBump {
    pub t_center: f64,
    pub t_radius: f64,
    pub x_center: Vec2,
    pub x_radius: f64,
    pub amplitude: f64,
}

impl SpaceTimeBump {
    fn spatial(&self, x: Vec2) -> (f64, Vec2) {
        let dx = [x[0] - self.x_center[0], x[1] - self.x_center[1]];
        let rho2 = dx[0] * dx[0] + dx[1] * dx[1];
        let u2 = rho2 / (self.x_radius * self.x_radius);
        if u2 >= 1.0 {
            return (0.0, [0.0, 0.0]);
        }
        // treat the bump as a function of u^2 to avoid the sqrt singularity:
        // g = exp(-1/(1-u2)), dg/du2 = g * (-1/(1-u2)^2)
        let s = 1.0 - u2;
        let g = (-1.0 / s).exp();
        let dg_du2 = -g / (s * s);
        let du2_dx = [
            2.0 * dx[0] / (self.x_radius * self.x_radius),
            2.0 * dx[1] / (self.x_radius * self.x_radius),
        ];
        (g, [dg_du2 * du2_dx[0], dg_du2 * du2_dx[1]])
    }

    fn temporal(&self, t: f64) -> (f64, f64) {
        let u = (t - self.t_center) / self.t_radius;
        (bump_raw(u), bump_raw_d(u) / self.t_radius)
    }

    pub fn value(&self, t: f64, x: Vec2) -> f64 {
        let (g, _) = self.spatial(x);
        let (e, _) = self.temporal(t);
        self.amplitude * e * g
    }

    pub fn dt(&self, t: f64, x: Vec2) -> f64 {
        let (g, _) = self.spatial(x);
        let (_, de) = self.temporal(t);
        self.amplitude * de * g
    }

    pub fn grad(&self, t: f64, x: Vec2) -> Vec2 {
        let (_, dg) = self.spatial(x);
        let (e, _) = self.temporal(t);
        [self.amplitude * e * dg[0], self.amplitude * e * dg[1]]
    }

    /// Purely spatial value (time factor dropped).
    pub fn space_value(&self, x: Vec2) -> f64 {
        self.amplitude * self.spatial(x).0
    }

    pub fn space_grad(&self, x: Vec2) -> Vec2 {
        let (_, dg) = self.spatial(x);
        [self.amplitude * dg[0], self.amplitude * dg[1]]
    }
}
