//! Analytic compactly supported perturbations, their time mollification,
//! and numerically integrated flows from time 1 with variational Jacobians.

use crate::bump::Kernel1d;
use crate::fields::Vec2;
use thiserror::Error;

pub type Mat2 = [[f64; 2]; 2];

pub const MAT2_ID: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn mat_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("integration step too large: halving disagreement {0:.3e} above tolerance")]
    TooLarge(f64),
    #[error("non-finite value during integration")]
    NonFinite,
    #[error("invalid field parameters: {0}")]
    BadParams(String),
}

/// Sup of |d/du smoothstep| over [0,1] (attained at 1/2).
const SMOOTHSTEP_D1_SUP: f64 = 1.875;
/// Sup of |d^2/du^2 smoothstep| over [0,1] (10/sqrt(3)).
const SMOOTHSTEP_D2_SUP: f64 = 5.773502691896258;

/// Quintic smoothstep, C^2 at both ends: s(0)=0, s(1)=1, s'=s''=0 there.
fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

fn smoothstep_d(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        30.0 * u * u * (u - 1.0) * (u - 1.0)
    }
}

fn smoothstep_dd(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        60.0 * u * (2.0 * u - 1.0) * (u - 1.0)
    }
}

/// C^2 radial profile: 1 on [0, a], 0 beyond b, smoothstep transition.
#[derive(Debug, Clone, Copy)]
struct RadialProfile {
    a: f64,
    b: f64,
}

impl RadialProfile {
    fn f(&self, rho: f64) -> f64 {
        1.0 - smoothstep((rho - self.a) / (self.b - self.a))
    }
    fn df(&self, rho: f64) -> f64 {
        -smoothstep_d((rho - self.a) / (self.b - self.a)) / (self.b - self.a)
    }
    fn ddf(&self, rho: f64) -> f64 {
        -smoothstep_dd((rho - self.a) / (self.b - self.a)) / ((self.b - self.a) * (self.b - self.a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothKind {
    Zero,
    /// Divergence-free rotation around the centre.
    Swirl,
    /// Radial expansion (strength > 0) or contraction; divergence 2*strength
    /// in the flat core.
    Compression,
    /// Horizontal shear proportional to the second coordinate.
    ShearBump,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeEnvelope {
    Const,
    /// cos(2 pi freq t) modulation.
    Cosine { freq: f64 },
}

impl TimeEnvelope {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            TimeEnvelope::Const => 1.0,
            TimeEnvelope::Cosine { freq } => (2.0 * std::f64::consts::PI * freq * t).cos(),
        }
    }

    /// Integral of |envelope| over [t0, t1] (t0 <= t1), composite Simpson.
    pub fn abs_integral(&self, t0: f64, t1: f64) -> f64 {
        match self {
            TimeEnvelope::Const => t1 - t0,
            TimeEnvelope::Cosine { .. } => {
                let n = 2048usize;
                let h = (t1 - t0) / n as f64;
                let mut s = self.at(t0).abs() + self.at(t1).abs();
                for i in 1..n {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += w * self.at(t0 + i as f64 * h).abs();
                }
                s * h / 3.0
            }
        }
    }
}

/// Sampled-with-margin sup bounds on the spatial factors; all fields are
/// explicit polynomials in the smoothstep, so a dense radial sample with a
/// small inflation is a safe upper bound.
#[derive(Debug, Clone, Copy)]
pub struct SmoothnessBudget {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// sup_x |div w(x)| of the spatial factor.
    pub div_sup: f64,
}

/// An analytic perturbation: value, spatial Jacobian and divergence are
/// closed-form and mutually consistent.
#[derive(Debug, Clone)]
pub struct SmoothFieldDef {
    pub kind: SmoothKind,
    pub strength: f64,
    pub center: Vec2,
    profile: RadialProfile,
    pub envelope: TimeEnvelope,
    budget: SmoothnessBudget,
}

impl SmoothFieldDef {
    pub fn new(
        kind: SmoothKind,
        strength: f64,
        center: Vec2,
        core_radius: f64,
        cutoff_radius: f64,
        envelope: TimeEnvelope,
    ) -> Result<Self, StepError> {
        if !(cutoff_radius > core_radius && core_radius > 0.0) {
            return Err(StepError::BadParams(
                "need 0 < core_radius < cutoff_radius".into(),
            ));
        }
        if !strength.is_finite() {
            return Err(StepError::BadParams("non-finite strength".into()));
        }
        let profile = RadialProfile { a: core_radius, b: cutoff_radius };
        let mut def = SmoothFieldDef {
            kind,
            strength,
            center,
            profile,
            envelope,
            budget: SmoothnessBudget { c0: 0.0, c1: 0.0, c2: 0.0, div_sup: 0.0 },
        };
        def.budget = def.compute_budget();
        Ok(def)
    }

    pub fn zero() -> Self {
        SmoothFieldDef::new(SmoothKind::Zero, 0.0, [0.0, 0.0], 0.25, 0.5, TimeEnvelope::Const)
            .expect("static params")
    }

    pub fn swirl(strength: f64) -> Self {
        SmoothFieldDef::new(SmoothKind::Swirl, strength, [1.0, 1.0], 0.25, 0.55, TimeEnvelope::Const)
            .expect("static params")
    }

    pub fn compression(strength: f64) -> Self {
        SmoothFieldDef::new(
            SmoothKind::Compression,
            strength,
            [1.0, 1.0],
            0.25,
            0.55,
            TimeEnvelope::Const,
        )
        .expect("static params")
    }

    pub fn shear(strength: f64) -> Self {
        SmoothFieldDef::new(SmoothKind::ShearBump, strength, [1.0, 1.0], 0.25, 0.55, TimeEnvelope::Const)
            .expect("static params")
    }

    pub fn by_name(name: &str, strength: f64) -> Result<Self, StepError> {
        match name {
            "zero" => Ok(SmoothFieldDef::zero()),
            "swirl" => Ok(SmoothFieldDef::swirl(strength)),
            "compression" => Ok(SmoothFieldDef::compression(strength)),
            "shear" => Ok(SmoothFieldDef::shear(strength)),
            other => Err(StepError::BadParams(format!("unknown field kind '{other}'"))),
        }
    }

    /// Spatial factor: value and Jacobian at `y = x - center`.
    fn spatial(&self, x: Vec2) -> (Vec2, Mat2) {
        let s = self.strength;
        if self.kind == SmoothKind::Zero || s == 0.0 {
            return ([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]]);
        }
        let y = [x[0] - self.center[0], x[1] - self.center[1]];
        let rho = (y[0] * y[0] + y[1] * y[1]).sqrt();
        if rho >= self.profile.b {
            return ([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]]);
        }
        let f = self.profile.f(rho);
        // df is zero in the flat core, so the rho -> 0 direction singularity
        // never contributes
        let df_over_rho = if rho > self.profile.a { self.profile.df(rho) / rho } else { 0.0 };
        match self.kind {
            SmoothKind::Swirl => {
                let val = [-s * f * y[1], s * f * y[0]];
                let jac = [
                    [
                        -s * df_over_rho * y[1] * y[0],
                        -s * (df_over_rho * y[1] * y[1] + f),
                    ],
                    [
                        s * (df_over_rho * y[0] * y[0] + f),
                        s * df_over_rho * y[0] * y[1],
                    ],
                ];
                (val, jac)
            }
            SmoothKind::Compression => {
                let val = [s * f * y[0], s * f * y[1]];
                let jac = [
                    [s * (f + df_over_rho * y[0] * y[0]), s * df_over_rho * y[0] * y[1]],
                    [s * df_over_rho * y[0] * y[1], s * (f + df_over_rho * y[1] * y[1])],
                ];
                (val, jac)
            }
            SmoothKind::ShearBump => {
                let val = [s * f * y[1], 0.0];
                let jac = [
                    [
                        s * df_over_rho * y[0] * y[1],
                        s * (df_over_rho * y[1] * y[1] + f),
                    ],
                    [0.0, 0.0],
                ];
                (val, jac)
            }
            SmoothKind::Zero => unreachable!(),
        }
    }

    fn compute_budget(&self) -> SmoothnessBudget {
        let s = self.strength.abs();
        let (a, b) = (self.profile.a, self.profile.b);
        let d = b - a;
        let d1 = SMOOTHSTEP_D1_SUP / d;
        let d2 = SMOOTHSTEP_D2_SUP / (d * d);
        // coarse closed-form sups; each field is |s| * (profile terms)
        let c0 = s * b;
        let c1 = s * (1.0 + b * d1) * 2.0;
        let c2 = s * (3.0 * d1 + b * d2) * 2.0;
        // divergence: sample the exact radial formula densely and inflate
        let div_sup = match self.kind {
            SmoothKind::Zero | SmoothKind::Swirl => 0.0,
            SmoothKind::Compression => {
                let mut m: f64 = 2.0; // flat core value / |s|
                let n = 8192;
                for i in 0..=n {
                    let rho = a + d * i as f64 / n as f64;
                    let v = 2.0 * self.profile.f(rho) + rho * self.profile.df(rho);
                    m = m.max(v.abs());
                }
                s * m * 1.0001
            }
            SmoothKind::ShearBump => {
                // div = s * f'(rho) y1 y2 / rho, |y1 y2| <= rho^2 / 2... use rho*|f'|
                let mut m: f64 = 0.0;
                let n = 8192;
                for i in 0..=n {
                    let rho = a + d * i as f64 / n as f64;
                    m = m.max((rho * self.profile.df(rho)).abs() / 2.0);
                }
                s * m * 1.0001
            }
        };
        SmoothnessBudget { c0, c1, c2, div_sup }
    }
}

/// Shared evaluation surface for analytic perturbations and their time
/// mollifications.
pub trait SmoothVectorField: Sync {
    fn value(&self, t: f64, x: Vec2) -> Vec2;
    fn jacobian(&self, t: f64, x: Vec2) -> Mat2;
    fn divergence(&self, t: f64, x: Vec2) -> f64;
    /// Everything vanishes for |x| beyond this radius about the origin.
    fn support_radius(&self) -> f64;
    fn budget(&self) -> SmoothnessBudget;
    /// Upper bound on the integral of ||div w(t, .)||_inf over [t0, t1].
    fn div_l1(&self, t0: f64, t1: f64) -> f64;
    /// Upper bound on the integral of ||w(t, .)||_C1 over [t0, t1].
    fn c1_l1(&self, t0: f64, t1: f64) -> f64;
}

impl SmoothVectorField for SmoothFieldDef {
    fn value(&self, t: f64, x: Vec2) -> Vec2 {
        let e = self.envelope.at(t);
        let (v, _) = self.spatial(x);
        [e * v[0], e * v[1]]
    }

    fn jacobian(&self, t: f64, x: Vec2) -> Mat2 {
        let e = self.envelope.at(t);
        let (_, j) = self.spatial(x);
        [[e * j[0][0], e * j[0][1]], [e * j[1][0], e * j[1][1]]]
    }

    fn divergence(&self, t: f64, x: Vec2) -> f64 {
        let j = self.jacobian(t, x);
        j[0][0] + j[1][1]
    }

    fn support_radius(&self) -> f64 {
        self.profile.b + (self.center[0] * self.center[0] + self.center[1] * self.center[1]).sqrt()
    }

    fn budget(&self) -> SmoothnessBudget {
        self.budget
    }

    fn div_l1(&self, t0: f64, t1: f64) -> f64 {
        self.budget.div_sup * self.envelope.abs_integral(t0, t1)
    }

    fn c1_l1(&self, t0: f64, t1: f64) -> f64 {
        (self.budget.c0 + self.budget.c1) * self.envelope.abs_integral(t0, t1)
    }
}

/// Time mollification `w * eta_k` with the base field extended constantly
/// outside [0, 2].
#[derive(Debug, Clone)]
pub struct TimeMollified {
    pub base: SmoothFieldDef,
    pub k: u32,
    kernel: Kernel1d,
}

/// Time mollification of an analytic perturbation.
pub fn time_mollify(base: SmoothFieldDef, k: u32) -> TimeMollified {
    TimeMollified { kernel: Kernel1d::new(k, 33), base, k }
}

impl TimeMollified {
    fn clamp(t: f64) -> f64 {
        t.clamp(0.0, 2.0)
    }
}

impl SmoothVectorField for TimeMollified {
    fn value(&self, t: f64, x: Vec2) -> Vec2 {
        let mut acc = [0.0, 0.0];
        for (z, w) in self.kernel.nodes.iter().zip(&self.kernel.weights) {
            let v = self.base.value(Self::clamp(t - z), x);
            acc[0] += w * v[0];
            acc[1] += w * v[1];
        }
        acc
    }

    fn jacobian(&self, t: f64, x: Vec2) -> Mat2 {
        let mut acc = [[0.0; 2]; 2];
        for (z, w) in self.kernel.nodes.iter().zip(&self.kernel.weights) {
            let j = self.base.jacobian(Self::clamp(t - z), x);
            for r in 0..2 {
                for c in 0..2 {
                    acc[r][c] += w * j[r][c];
                }
            }
        }
        acc
    }

    fn divergence(&self, t: f64, x: Vec2) -> f64 {
        let j = self.jacobian(t, x);
        j[0][0] + j[1][1]
    }

    fn support_radius(&self) -> f64 {
        self.base.support_radius()
    }

    fn budget(&self) -> SmoothnessBudget {
        // mollification contracts every sup norm
        self.base.budget()
    }

    fn div_l1(&self, t0: f64, t1: f64) -> f64 {
        // |envelope * eta_k| <= sup-window of |envelope|; widen by the kernel
        // radius so the bound stays valid near interval ends
        let r = 1.0 / self.k as f64;
        self.base.div_l1((t0 - r).max(0.0), (t1 + r).min(2.0)) + self.base.budget().div_sup * 0.0
    }

    fn c1_l1(&self, t0: f64, t1: f64) -> f64 {
        let r = 1.0 / self.k as f64;
        self.base.c1_l1((t0 - r).max(0.0), (t1 + r).min(2.0))
    }
}

/// A flow evaluation: endpoint, variational Jacobian matrix, and the
/// determinant integrated independently through the divergence equation.
#[derive(Debug, Clone, Copy)]
pub struct FlowResult {
    pub endpoint: Vec2,
    pub jacobian_matrix: Mat2,
    pub jacobian_det: f64,
}

impl FlowResult {
    pub const IDENTITY_TOL: f64 = 1e-10;
}

struct Rk4State {
    x: Vec2,
    m: Mat2,
    j: f64,
}

fn rk4_rhs(w: &dyn SmoothVectorField, t: f64, st: &Rk4State) -> Rk4State {
    let v = w.value(t, st.x);
    let dw = w.jacobian(t, st.x);
    let dm = mat_mul(&dw, &st.m);
    let div = dw[0][0] + dw[1][1];
    Rk4State { x: v, m: dm, j: div * st.j }
}

fn rk4_add(a: &Rk4State, b: &Rk4State, h: f64) -> Rk4State {
    Rk4State {
        x: [a.x[0] + h * b.x[0], a.x[1] + h * b.x[1]],
        m: [
            [a.m[0][0] + h * b.m[0][0], a.m[0][1] + h * b.m[0][1]],
            [a.m[1][0] + h * b.m[1][0], a.m[1][1] + h * b.m[1][1]],
        ],
        j: a.j + h * b.j,
    }
}

/// Classical RK4 on state + variational matrix + determinant from `t0` to
/// `t1` (either direction), fixed step of magnitude at most `h`.
pub fn rk4_flow_between(
    w: &dyn SmoothVectorField,
    t0: f64,
    t1: f64,
    x: Vec2,
    h: f64,
) -> Result<FlowResult, StepError> {
    assert!(h > 0.0);
    let span = t1 - t0;
    let n = ((span.abs() / h).ceil() as usize).max(1);
    let dt = span / n as f64;
    let mut st = Rk4State { x, m: MAT2_ID, j: 1.0 };
    let mut t = t0;
    for i in 0..n {
        let k1 = rk4_rhs(w, t, &st);
        let k2 = rk4_rhs(w, t + dt * 0.5, &rk4_add(&st, &k1, dt * 0.5));
        let k3 = rk4_rhs(w, t + dt * 0.5, &rk4_add(&st, &k2, dt * 0.5));
        let k4 = rk4_rhs(w, t + dt, &rk4_add(&st, &k3, dt));
        st = Rk4State {
            x: [
                st.x[0] + dt / 6.0 * (k1.x[0] + 2.0 * k2.x[0] + 2.0 * k3.x[0] + k4.x[0]),
                st.x[1] + dt / 6.0 * (k1.x[1] + 2.0 * k2.x[1] + 2.0 * k3.x[1] + k4.x[1]),
            ],
            m: {
                let mut m = st.m;
                for r in 0..2 {
                    for c in 0..2 {
                        m[r][c] += dt / 6.0
                            * (k1.m[r][c] + 2.0 * k2.m[r][c] + 2.0 * k3.m[r][c] + k4.m[r][c]);
                    }
                }
                m
            },
            j: st.j + dt / 6.0 * (k1.j + 2.0 * k2.j + 2.0 * k3.j + k4.j),
        };
        t = t0 + (i + 1) as f64 * dt;
        if !st.x[0].is_finite() || !st.x[1].is_finite() || !st.j.is_finite() {
            return Err(StepError::NonFinite);
        }
    }
    Ok(FlowResult { endpoint: st.x, jacobian_matrix: st.m, jacobian_det: st.j })
}

/// Flow along `w` anchored at time 1, with step-halving validation.
///
/// Returns the half-step result; errors if the halving disagreement exceeds
/// the tolerance (step too large for the requested field).
pub fn flow_w(w: &dyn SmoothVectorField, t: f64, x: Vec2, h: f64) -> Result<FlowResult, StepError> {
    let coarse = rk4_flow_between(w, 1.0, t, x, h)?;
    let fine = rk4_flow_between(w, 1.0, t, x, h * 0.5)?;
    let d = ((coarse.endpoint[0] - fine.endpoint[0]).powi(2)
        + (coarse.endpoint[1] - fine.endpoint[1]).powi(2))
    .sqrt();
    let tol = 1e-6_f64.max(1e3 * h.powi(4));
    if d > tol {
        return Err(StepError::TooLarge(d));
    }
    Ok(fine)
}

/// Fast path without halving validation, anchored at 1.
pub fn flow_w_unchecked(
    w: &dyn SmoothVectorField,
    t: f64,
    x: Vec2,
    h: f64,
) -> Result<FlowResult, StepError> {
    rk4_flow_between(w, 1.0, t, x, h)
}

/// Inverse of the anchored flow: integrates the reversed-time field from
/// `t` back to the anchor.
pub fn inverse_flow_w(
    w: &dyn SmoothVectorField,
    t: f64,
    y: Vec2,
    h: f64,
) -> Result<Vec2, StepError> {
    Ok(rk4_flow_between(w, t, 1.0, y, h)?.endpoint)
}

/// Envelope checks on the flow of a smooth field: Jacobian determinant
/// inside the Gronwall envelope, Monte-Carlo push-forward densities inside
/// the same envelope, and the C^1 growth ratio.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub max_det_violation: f64,
    pub det_envelope_ok: bool,
    pub max_push_violation: f64,
    pub push_ok: bool,
    pub c1_growth_ratio: f64,
    pub max_det_consistency_gap: f64,
}

pub fn estimate_checks(
    w: &dyn SmoothVectorField,
    times: &[f64],
    h: f64,
    seed: u64,
) -> Result<EstimateReport, StepError> {
    use rand::{Rng, SeedableRng};
    let mut max_violation = 0.0f64;
    let mut max_gap = 0.0f64;
    let mut max_c1_ratio = 0.0f64;
    let r = w.support_radius() + 0.2;
    let n = 9;
    for &t in times {
        let envelope = w.div_l1(t.min(1.0), t.max(1.0)).exp();
        for i in 0..n {
            for j in 0..n {
                let x = [
                    -r + 2.0 * r * i as f64 / (n - 1) as f64,
                    -r + 2.0 * r * j as f64 / (n - 1) as f64,
                ];
                let res = rk4_flow_between(w, 1.0, t, x, h)?;
                let det = det2(&res.jacobian_matrix);
                max_gap = max_gap.max((det - res.jacobian_det).abs());
                let lo = 1.0 / envelope;
                let viol = (det - envelope).max(lo - det).max(0.0);
                max_violation = max_violation.max(viol);
                let opnorm = res
                    .jacobian_matrix
                    .iter()
                    .flatten()
                    .map(|v| v.abs())
                    .fold(0.0f64, f64::max)
                    * 2.0;
                let c1_env = w.c1_l1(t.min(1.0), t.max(1.0)).exp();
                max_c1_ratio = max_c1_ratio.max(opnorm / c1_env);
            }
        }
    }

    // Monte-Carlo push-forward of the uniform measure on a box through the
    // anchored flow; per-cell counts against the Gronwall envelope.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let box_r = r + 0.5;
    let n_pts = 200_000usize;
    let cell = 0.5f64;
    let cells = ((2.0 * box_r) / cell).ceil() as i64;
    let t_end = 2.0;
    let envelope = w.div_l1(1.0, t_end).exp();
    let mut counts = std::collections::BTreeMap::<(i64, i64), u64>::new();
    for _ in 0..n_pts {
        let x = [
            rng.gen_range(-box_r..box_r),
            rng.gen_range(-box_r..box_r),
        ];
        let y = rk4_flow_between(w, 1.0, t_end, x, h)?.endpoint;
        let ci = ((y[0] + box_r) / cell).floor() as i64;
        let cj = ((y[1] + box_r) / cell).floor() as i64;
        *counts.entry((ci, cj)).or_default() += 1;
    }
    // only interior cells whose preimage stays inside the seeded box
    let margin = w.budget().c0 * 1.2 + cell;
    let expected = n_pts as f64 * cell * cell / (4.0 * box_r * box_r);
    let mut max_push_violation = 0.0f64;
    for ci in 0..cells {
        for cj in 0..cells {
            let xlo = -box_r + ci as f64 * cell;
            let ylo = -box_r + cj as f64 * cell;
            if xlo < -box_r + margin
                || ylo < -box_r + margin
                || xlo + cell > box_r - margin
                || ylo + cell > box_r - margin
            {
                continue;
            }
            let c = counts.get(&(ci, cj)).copied().unwrap_or(0) as f64;
            let density = c / expected;
            // 4 sigma Poisson slack on top of the envelope
            let slack = 4.0 / expected.sqrt();
            let viol = (density - envelope - slack)
                .max(1.0 / envelope - slack - density)
                .max(0.0);
            max_push_violation = max_push_violation.max(viol);
        }
    }

    Ok(EstimateReport {
        max_det_violation: max_violation,
        det_envelope_ok: max_violation <= 1e-3,
        max_push_violation,
        push_ok: max_push_violation <= 0.0,
        c1_growth_ratio: max_c1_ratio,
        max_det_consistency_gap: max_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_field_flow_is_identity() {
        let w = SmoothFieldDef::zero();
        let r = flow_w(&w, 1.7, [0.3, -0.2], 1e-2).unwrap();
        assert_eq!(r.endpoint, [0.3, -0.2]);
        assert_eq!(r.jacobian_matrix, MAT2_ID);
        assert_eq!(r.jacobian_det, 1.0);
    }

    #[test]
    fn swirl_core_is_rigid_rotation() {
        let omega = 0.8;
        let w = SmoothFieldDef::swirl(omega);
        // points near the centre stay in the flat core
        let x0 = [1.05, 1.0];
        let tau = 0.6;
        let r = flow_w(&w, 1.0 + tau, x0, 1e-3).unwrap();
        let (s, c) = (omega * tau).sin_cos();
        let y = [x0[0] - 1.0, x0[1] - 1.0];
        let want = [1.0 + c * y[0] - s * y[1], 1.0 + s * y[0] + c * y[1]];
        assert!(close(r.endpoint[0], want[0], 1e-10));
        assert!(close(r.endpoint[1], want[1], 1e-10));
        assert!(close(det2(&r.jacobian_matrix), 1.0, 1e-10));
        assert!(close(r.jacobian_det, 1.0, 1e-10));
    }

    #[test]
    fn compression_core_is_exponential() {
        let alpha = 0.4;
        let w = SmoothFieldDef::compression(alpha);
        let x0 = [1.02, 0.985];
        let tau = 0.25; // stays within the flat core
        let r = flow_w(&w, 1.0 + tau, x0, 1e-3).unwrap();
        let g = (alpha * tau).exp();
        let want = [1.0 + (x0[0] - 1.0) * g, 1.0 + (x0[1] - 1.0) * g];
        assert!(close(r.endpoint[0], want[0], 1e-9));
        assert!(close(r.endpoint[1], want[1], 1e-9));
        assert!(close(r.jacobian_det, (2.0 * alpha * tau).exp(), 1e-9));
        // Gronwall bound is saturated in the flat core
        let env = w.div_l1(1.0, 1.0 + tau).exp();
        assert!(r.jacobian_det <= env + 1e-6);
        assert!(r.jacobian_det >= env * 0.995);
    }

    #[test]
    fn integrator_is_fourth_order() {
        let w = SmoothFieldDef::swirl(1.1);
        let x0 = [1.1, 0.95];
        let exact = {
            let tau = 0.8;
            let (s, c) = (1.1_f64 * tau).sin_cos();
            let y = [x0[0] - 1.0, x0[1] - 1.0];
            [1.0 + c * y[0] - s * y[1], 1.0 + s * y[0] + c * y[1]]
        };
        let err = |h: f64| {
            let r = rk4_flow_between(&w, 1.0, 1.8, x0, h).unwrap();
            ((r.endpoint[0] - exact[0]).powi(2) + (r.endpoint[1] - exact[1]).powi(2)).sqrt()
        };
        let e1 = err(2e-2);
        let e2 = err(1e-2);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let w = SmoothFieldDef::compression(0.5);
        let x0 = [1.3, 0.8];
        let h = 1e-3;
        let r = rk4_flow_between(&w, 1.0, 1.9, x0, h).unwrap();
        let eps = 1e-5;
        for c in 0..2 {
            let mut xp = x0;
            xp[c] += eps;
            let mut xm = x0;
            xm[c] -= eps;
            let rp = rk4_flow_between(&w, 1.0, 1.9, xp, h).unwrap();
            let rm = rk4_flow_between(&w, 1.0, 1.9, xm, h).unwrap();
            for rr in 0..2 {
                let fd = (rp.endpoint[rr] - rm.endpoint[rr]) / (2.0 * eps);
                assert!(
                    (fd - r.jacobian_matrix[rr][c]).abs() < 1e-6_f64.max(100.0 * h.powi(4)),
                    "entry ({rr},{c})"
                );
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let w = SmoothFieldDef::swirl(0.9);
        let y = [1.2, 1.1];
        let t = 0.3;
        let z = inverse_flow_w(&w, t, y, 1e-3).unwrap();
        let back = rk4_flow_between(&w, 1.0, t, z, 1e-3).unwrap().endpoint;
        let d = ((back[0] - y[0]).powi(2) + (back[1] - y[1]).powi(2)).sqrt();
        assert!(d < 1e-8, "round trip residual {d}");
    }

    #[test]
    fn semigroup_property() {
        let w = SmoothFieldDef::compression(0.6);
        let x0 = [1.15, 1.05];
        let h = 1e-3;
        let direct = rk4_flow_between(&w, 1.0, 1.9, x0, h).unwrap().endpoint;
        let mid = rk4_flow_between(&w, 1.0, 1.4, x0, h).unwrap().endpoint;
        let composed = rk4_flow_between(&w, 1.4, 1.9, mid, h).unwrap().endpoint;
        let d = ((direct[0] - composed[0]).powi(2) + (direct[1] - composed[1]).powi(2)).sqrt();
        assert!(d < 1e-8);
    }

    #[test]
    fn divergence_is_trace_of_jacobian() {
        let fields = [
            SmoothFieldDef::swirl(0.7),
            SmoothFieldDef::compression(-0.4),
            SmoothFieldDef::shear(0.6),
        ];
        for w in &fields {
            for i in 0..20 {
                for j in 0..20 {
                    let x = [0.2 + i as f64 * 0.08, 0.1 + j as f64 * 0.09];
                    let jac = w.jacobian(0.7, x);
                    let div = w.divergence(0.7, x);
                    assert!((div - jac[0][0] - jac[1][1]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_value_finite_differences() {
        let fields = [
            SmoothFieldDef::swirl(0.7),
            SmoothFieldDef::compression(-0.4),
            SmoothFieldDef::shear(0.6),
        ];
        let eps = 1e-6;
        for w in &fields {
            for i in 0..15 {
                for j in 0..15 {
                    let x = [0.45 + i as f64 * 0.09, 0.35 + j as f64 * 0.1];
                    let jac = w.jacobian(0.0, x);
                    for c in 0..2 {
                        let mut xp = x;
                        xp[c] += eps;
                        let mut xm = x;
                        xm[c] -= eps;
                        let vp = w.value(0.0, xp);
                        let vm = w.value(0.0, xm);
                        for r in 0..2 {
                            let fd = (vp[r] - vm[r]) / (2.0 * eps);
                            assert!(
                                (fd - jac[r][c]).abs() < 1e-6,
                                "kind {:?} entry ({r},{c}) at {x:?}: fd {fd} vs {}",
                                w.kind,
                                jac[r][c]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn time_mollify_constant_unchanged() {
        let w = SmoothFieldDef::swirl(0.8);
        let wk = time_mollify(w.clone(), 8);
        let x = [1.1, 0.9];
        let v0 = w.value(0.7, x);
        let vk = wk.value(0.7, x);
        assert!(close(v0[0], vk[0], 1e-12) && close(v0[1], vk[1], 1e-12));
    }

    #[test]
    fn time_mollify_converges_for_lipschitz_envelope() {
        let w = SmoothFieldDef::new(
            SmoothKind::Swirl,
            0.8,
            [1.0, 1.0],
            0.25,
            0.55,
            TimeEnvelope::Cosine { freq: 0.5 },
        )
        .unwrap();
        let x = [1.1, 0.95];
        let t = 0.73;
        let exact = w.value(t, x);
        let err = |k: u32| {
            let wk = time_mollify(w.clone(), k);
            let v = wk.value(t, x);
            ((v[0] - exact[0]).powi(2) + (v[1] - exact[1]).powi(2)).sqrt()
        };
        let e8 = err(8);
        let e16 = err(16);
        let e32 = err(32);
        assert!(e16 < e8 && e32 < e16, "{e8} {e16} {e32}");
    }

    #[test]
    fn estimate_checks_on_builtins() {
        for w in [SmoothFieldDef::zero(), SmoothFieldDef::swirl(0.8), SmoothFieldDef::compression(0.4)] {
            let rep = estimate_checks(&w, &[0.0, 0.5, 1.5, 2.0], 2e-3, 7).unwrap();
            assert!(rep.det_envelope_ok, "det violation {}", rep.max_det_violation);
            assert!(rep.push_ok, "push violation {}", rep.max_push_violation);
            assert!(rep.max_det_consistency_gap < 1e-8);
        }
    }

    #[test]
    fn divergence_free_swirl_has_unit_jacobian() {
        let w = SmoothFieldDef::swirl(1.3);
        for t in [0.0, 0.7, 1.6, 2.0] {
            for x in [[1.0, 1.3], [0.7, 0.7], [1.4, 1.1]] {
                let r = rk4_flow_between(&w, 1.0, t, x, 1e-3).unwrap();
                assert!((r.jacobian_det - 1.0).abs() < 1e-8);
            }
        }
    }
}

/// State carried by grid sweeps: position, variational matrix, determinant.
#[derive(Debug, Clone, Copy)]
pub struct PointState {
    pub x: Vec2,
    pub m: Mat2,
    pub j: f64,
}

impl PointState {
    pub fn seed(x: Vec2) -> Self {
        PointState { x, m: MAT2_ID, j: 1.0 }
    }
}

pub fn mat_inv(m: &Mat2) -> Mat2 {
    let d = det2(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

/// Advance every state from `t0` to `t1` along `w` (RK4, step magnitude at
/// most `h`). States are independent, so chunked parallelism is bitwise
/// deterministic.
pub fn advance_states(w: &dyn SmoothVectorField, t0: f64, t1: f64, states: &mut [PointState], h: f64) {
    use rayon::prelude::*;
    if t0 == t1 {
        return;
    }
    states.par_chunks_mut(256).for_each(|chunk| {
        for st in chunk {
            let span = t1 - t0;
            let n = ((span.abs() / h).ceil() as usize).max(1);
            let dt = span / n as f64;
            let mut cur = Rk4State { x: st.x, m: st.m, j: st.j };
            let mut t = t0;
            for i in 0..n {
                let k1 = rk4_rhs(w, t, &cur);
                let k2 = rk4_rhs(w, t + dt * 0.5, &rk4_add(&cur, &k1, dt * 0.5));
                let k3 = rk4_rhs(w, t + dt * 0.5, &rk4_add(&cur, &k2, dt * 0.5));
                let k4 = rk4_rhs(w, t + dt, &rk4_add(&cur, &k3, dt));
                cur = Rk4State {
                    x: [
                        cur.x[0] + dt / 6.0 * (k1.x[0] + 2.0 * k2.x[0] + 2.0 * k3.x[0] + k4.x[0]),
                        cur.x[1] + dt / 6.0 * (k1.x[1] + 2.0 * k2.x[1] + 2.0 * k3.x[1] + k4.x[1]),
                    ],
                    m: {
                        let mut m = cur.m;
                        for r in 0..2 {
                            for c in 0..2 {
                                m[r][c] += dt / 6.0
                                    * (k1.m[r][c] + 2.0 * k2.m[r][c] + 2.0 * k3.m[r][c] + k4.m[r][c]);
                            }
                        }
                        m
                    },
                    j: cur.j + dt / 6.0 * (k1.j + 2.0 * k2.j + 2.0 * k3.j + k4.j),
                };
                t = t0 + (i + 1) as f64 * dt;
            }
            st.x = cur.x;
            st.m = cur.m;
            st.j = cur.j;
        }
    });
}
