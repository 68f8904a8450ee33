//! Perturbed fields: the exact staged field conjugated through the flow of
//! an analytic perturbation, their truncations, composed flows, push-forward
//! pairings and densities, and compressibility certificates.
//!
//! Every weak-solution quantity is computed by forward change of variables
//! (pushing grid-aligned quadrature nodes through the numeric flow); the
//! exact flow part is never inverted inside an integral.

use crate::dyadic::Dyadic;
use crate::evolution::{pointwise_density, SolutionVariant};
use crate::fields::{eval_b, eval_trunc, Conventions, TruncKind, Vec2};
use crate::flow::{flow_field, ExactFlowSpec, FlowQuery};
use crate::smooth::{
    advance_states, det2, mat_inv, mat_vec, rk4_flow_between, PointState, SmoothVectorField,
    StepError,
};
use rayon::prelude::*;

/// Exact part of a perturbed spec: the staged field or a truncation of it.
#[derive(Debug, Clone, Copy)]
pub struct ExactPart {
    pub lambda: u32,
    pub trunc: Option<(TruncKind, u32)>,
}

impl ExactPart {
    pub fn value<S: crate::dyadic::Scalar>(
        &self,
        t: S,
        x: [S; 2],
        conv: Conventions,
    ) -> [S; 2] {
        let r = match self.trunc {
            None => eval_b(self.lambda, t, x, conv),
            Some((kind, q)) => eval_trunc(self.lambda, kind, q, t, x, conv),
        };
        r.unwrap_or([S::zero(), S::zero()])
    }
}

/// Inverse position and forward Jacobian of the anchored flow at one point:
/// `y = Xw^{-1}(t, x)`, `m = D_x Xw(t, y)`, `j = J Xw(t, y)`.
pub struct InverseProbe {
    pub y: Vec2,
    pub m: crate::smooth::Mat2,
    pub j: f64,
}

/// One backward integration with the variational system gives the inverse
/// position and, by matrix inversion, the forward Jacobian there.
pub fn inverse_probe(
    w: &dyn SmoothVectorField,
    t: f64,
    x: Vec2,
    h: f64,
) -> Result<InverseProbe, StepError> {
    let back = rk4_flow_between(w, t, 1.0, x, h)?;
    let m = mat_inv(&back.jacobian_matrix);
    Ok(InverseProbe { y: back.endpoint, m, j: 1.0 / det2(&back.jacobian_matrix) })
}

/// Pointwise value of the perturbed field
/// `D_x Xw(t, y) . b(t, y) + w(t, x)` with `y = Xw^{-1}(t, x)`.
pub fn eval_perturbed_field(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    t: f64,
    x: Vec2,
    conv: Conventions,
    h: f64,
) -> Result<Vec2, StepError> {
    let probe = inverse_probe(w, t, x, h)?;
    let b = part.value(t, probe.y, conv);
    let tb = mat_vec(&probe.m, b);
    let wv = w.value(t, x);
    Ok([tb[0] + wv[0], tb[1] + wv[1]])
}

/// Composition `Xw(t, X_b(t, x))` of the exact truncated flow (anchored at
/// time 1) with the numeric flow of the perturbation; this is the regular
/// Lagrangian flow of the assembled field.
pub fn composed_flow(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    t: f64,
    x: Vec2,
    conv: Conventions,
    h: f64,
) -> Result<Vec2, StepError> {
    let spec = ExactFlowSpec { lambda: part.lambda, trunc: part.trunc };
    let mid = flow_field(&FlowQuery { spec, start: 1.0, end: t, point: x }, conv)
        .expect("truncated flow is defined through the window");
    Ok(rk4_flow_between(w, 1.0, t, mid, h)?.endpoint)
}

/// Piecewise-smoothness region of the assembled field at `(t, x)`: stage,
/// containing square, and sector octant of the transported coordinates.
/// The field is analytic-in-space within one signature.
fn region_signature(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    t: f64,
    x: Vec2,
    conv: Conventions,
    h_inner: f64,
) -> Result<u64, StepError> {
    use crate::fields::{classify_time, StageSide, TimeClass};
    let windowed = match part.trunc {
        Some((kind, q)) => crate::fields::in_trunc_window(kind, q, t),
        None => false,
    };
    if windowed {
        return Ok(u64::MAX);
    }
    let stage = match classify_time(t) {
        Ok(TimeClass::Stage(s)) => s,
        _ => return Ok(u64::MAX - 1),
    };
    let y = rk4_flow_between(w, t, 1.0, x, h_inner)?.endpoint;
    let scale = (part.lambda + stage.k) as f64;
    let xi = [y[0] * scale.exp2(), y[1] * scale.exp2()];
    let stage_code = (stage.k as u64) << 1 | matches!(stage.side, StageSide::Backward) as u64;
    match crate::fields::filled_center(xi) {
        None => Ok(stage_code << 8),
        Some(m) => {
            let l = [xi[0] - m[0] as f64, xi[1] - m[1] as f64];
            let sector = ((l[0].abs() > l[1].abs()) as u64) << 2
                | ((l[0] >= 0.0) as u64) << 1
                | (l[1] >= 0.0) as u64;
            let mh = (m[0].rem_euclid(1 << 20) as u64) << 21 ^ m[1].rem_euclid(1 << 20) as u64;
            Ok(stage_code << 48 ^ mh << 4 ^ sector | 1 << 62)
        }
    }
}

/// RK4 integration of the assembled field itself, anchored at time 1.
/// Independent of [`composed_flow`]: every right-hand side evaluates the
/// conjugation through a fresh inverse probe.
///
/// The integrand is only piecewise smooth (sector and stage boundaries of
/// the transported exact part); a fixed-step march across a boundary loses
/// an order, so base steps whose endpoints land in different smoothness
/// regions are split at the bisected crossing before stepping on.
pub fn integrate_assembled_field(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    t_end: f64,
    x: Vec2,
    conv: Conventions,
    h_outer: f64,
    h_inner: f64,
) -> Result<Vec2, StepError> {
    let span = t_end - 1.0;
    if span == 0.0 {
        return Ok(x);
    }
    let f = |tt: f64, xx: Vec2| eval_perturbed_field(part, w, tt, xx, conv, h_inner);
    let one_step = |tt: f64, xx: Vec2, dt: f64| -> Result<Vec2, StepError> {
        let k1 = f(tt, xx)?;
        let k2 = f(tt + dt * 0.5, [xx[0] + dt * 0.5 * k1[0], xx[1] + dt * 0.5 * k1[1]])?;
        let k3 = f(tt + dt * 0.5, [xx[0] + dt * 0.5 * k2[0], xx[1] + dt * 0.5 * k2[1]])?;
        let k4 = f(tt + dt, [xx[0] + dt * k3[0], xx[1] + dt * k3[1]])?;
        Ok([
            xx[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            xx[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ])
    };
    let sig = |tt: f64, xx: Vec2| region_signature(part, w, tt, xx, conv, h_inner);

    // one extra step so sample times stay off the dyadic stage boundaries,
    // where the lower-closed convention gives isolated nonzero values
    let n = ((span.abs() / h_outer).ceil() as usize).max(1) + 1;
    let dt = span / n as f64;
    let mut p = x;
    let mut t = 1.0;
    for i in 0..n {
        let step_end = 1.0 + (i + 1) as f64 * dt;
        let mut remaining = step_end - t;
        let mut events = 0;
        while remaining.abs() > 1e-13 {
            let cand = one_step(t, p, remaining)?;
            let s0 = sig(t, p)?;
            let s1 = sig(t + remaining, cand)?;
            if s0 == s1 || events >= 12 {
                p = cand;
                t += remaining;
                break;
            }
            // bisect the first signature change along this sub-step
            let mut lo = 0.0f64;
            let mut hi = remaining;
            for _ in 0..22 {
                let mid = 0.5 * (lo + hi);
                let xm = one_step(t, p, mid)?;
                if sig(t + mid, xm)? == s0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // advance cleanly to the last in-region offset, then hop across
            // the boundary with a tiny step; a single straddling step would
            // smear the far-side field over the whole step through its
            // trailing sample. Land clearly past the line: stopping exactly
            // on it would park the trajectory on the zero ambiguity set.
            let overshoot = (hi - lo).abs().max(1e-9 * remaining.abs());
            let landing = if remaining > 0.0 {
                (hi + 2.0 * overshoot).min(remaining)
            } else {
                (hi - 2.0 * overshoot).max(remaining)
            };
            p = one_step(t, p, lo)?;
            p = one_step(t + lo, p, landing - lo)?;
            t += landing;
            remaining = step_end - t;
            events += 1;
        }
        t = step_end;
    }
    Ok(p)
}

/// Sorted sweep of a seed grid along `w` from the anchor time 1, invoking
/// the callback once per requested time with the full state array.
pub fn sweep_anchor1(
    w: &dyn SmoothVectorField,
    seeds: &[Vec2],
    times: &[f64],
    h: f64,
    mut on_time: impl FnMut(usize, &[PointState]),
) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let fwd: Vec<usize> = order.iter().copied().filter(|&i| times[i] >= 1.0).collect();
    let bwd: Vec<usize> = order.iter().rev().copied().filter(|&i| times[i] < 1.0).collect();
    for group in [fwd, bwd] {
        let mut states: Vec<PointState> = seeds.iter().map(|&x| PointState::seed(x)).collect();
        let mut t_cur = 1.0;
        for idx in group {
            advance_states(w, t_cur, times[idx], &mut states, h);
            t_cur = times[idx];
            on_time(idx, &states);
        }
    }
}

/// Time pieces on which the (possibly truncated) staged field is active,
/// intersected with `[t0, t1]`, down to the stage-depth cap.
fn active_time_pieces(part: ExactPart, t0: f64, t1: f64, depth: u32) -> Vec<(f64, f64)> {
    let mut pieces = Vec::new();
    let window = part.trunc.map(|(kind, q)| {
        let (lo, hi) = crate::fields::trunc_window(kind, q);
        (lo.to_f64(), hi.to_f64())
    });
    let mut push = |lo: f64, hi: f64| {
        let lo = lo.max(t0);
        let hi = hi.min(t1);
        if lo < hi {
            pieces.push((lo, hi));
        }
    };
    for k in 0..=depth {
        let (flo, fhi) = (1.0 - 0.5f64.powi(k as i32), 1.0 - 0.5f64.powi(k as i32 + 1));
        let (blo, bhi) = (2.0 - fhi, 2.0 - flo);
        for (lo, hi) in [(flo, fhi), (blo, bhi)] {
            match window {
                Some((wlo, whi)) => {
                    push(lo.min(wlo), hi.min(wlo));
                    push(lo.max(whi), hi.max(whi));
                }
                None => push(lo, hi),
            }
        }
    }
    pieces.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pieces
}

/// Options for the L^p distance quadrature.
#[derive(Debug, Clone, Copy)]
pub struct LpOptions {
    /// Spacing of the smooth-factor grid in the exact-flow coordinates.
    pub delta: f64,
    pub nodes_per_piece: usize,
    pub stage_depth: u32,
    pub h: f64,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions { delta: 1.0 / 16.0, nodes_per_piece: 3, stage_depth: 10, h: 2e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LpReport {
    pub lambda: u32,
    pub p: f64,
    pub distance: f64,
    pub bound: f64,
}

/// `||b_{lambda,w} - w||_{L^p(K)}` by the change of variables
/// `y = Xw^{-1}(t, x)`: the integrand becomes `|D Xw(t,y) b(t,y)|^p J(t,y)`
/// on a grid in `y`, with the sub-block profile of the exact field
/// integrated in closed form (`int_sector (4|s|)^p = 2^p/(p+2)` per unit
/// block, one sector per matrix column).
pub fn lp_distance_to_w(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    p: f64,
    t_range: (f64, f64),
    x_box: (Vec2, Vec2),
    opts: LpOptions,
) -> LpReport {
    assert!(p >= 1.0);
    let pieces = active_time_pieces(part, t_range.0, t_range.1, opts.stage_depth);
    let mut times = Vec::new();
    let mut weights = Vec::new();
    for (lo, hi) in &pieces {
        let n = opts.nodes_per_piece;
        for i in 0..n {
            times.push(lo + (hi - lo) * (i as f64 + 0.5) / n as f64);
            weights.push((hi - lo) / n as f64);
        }
    }
    // seed grid large enough that its image covers the x-box
    let pad = w.budget().c0 * 2.0 + 0.1;
    let lo = [x_box.0[0] - pad, x_box.0[1] - pad];
    let hi = [x_box.1[0] + pad, x_box.1[1] + pad];
    let nx = ((hi[0] - lo[0]) / opts.delta).round() as usize;
    let ny = ((hi[1] - lo[1]) / opts.delta).round() as usize;
    let mut seeds = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            seeds.push([
                lo[0] + (i as f64 + 0.5) * opts.delta,
                lo[1] + (j as f64 + 0.5) * opts.delta,
            ]);
        }
    }
    let profile_coeff = 2f64.powf(p) / (p + 2.0);
    let amp = 2f64.powf(-(part.lambda as f64) * p);
    let mut total = 0.0;
    sweep_anchor1(w, &seeds, &times, opts.h, |ti, states| {
        let mut acc = 0.0;
        for st in states {
            let x = st.x;
            if x[0] < x_box.0[0] || x[0] > x_box.1[0] || x[1] < x_box.0[1] || x[1] > x_box.1[1] {
                continue;
            }
            let c1 = (st.m[0][0] * st.m[0][0] + st.m[1][0] * st.m[1][0]).sqrt();
            let c2 = (st.m[0][1] * st.m[0][1] + st.m[1][1] * st.m[1][1]).sqrt();
            acc += 0.5 * amp * profile_coeff * (c1.powf(p) + c2.powf(p)) * st.j;
        }
        total += weights[ti] * acc * opts.delta * opts.delta;
    });
    let distance = total.powf(1.0 / p);
    // comparison bound: |K|^(1/p) exp(int [C1 + div])^(1/p) ||b||_inf
    let vol = (t_range.1 - t_range.0)
        * (x_box.1[0] - x_box.0[0])
        * (x_box.1[1] - x_box.0[1]);
    let integral = (w.c1_l1(0.0, 1.0) + w.div_l1(0.0, 1.0))
        .max(w.c1_l1(1.0, 2.0) + w.div_l1(1.0, 2.0));
    let bound = vol.powf(1.0 / p)
        * integral.exp().powf(1.0 / p)
        * crate::fields::sup_norm(part.lambda).to_f64();
    LpReport { lambda: part.lambda, p, distance, bound }
}

/// A perturbed solution branch, per the push-forward description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Unmixing,
    Mixed,
    TruncSym,
    TruncAsym,
}

impl Branch {
    pub fn variant(self, q: u32) -> SolutionVariant {
        match self {
            Branch::Unmixing => SolutionVariant::Unmixing,
            Branch::Mixed => SolutionVariant::Mixed,
            Branch::TruncSym => SolutionVariant::TruncSym { q },
            Branch::TruncAsym => SolutionVariant::TruncAsym { q },
        }
    }
}

/// A perturbed solution `Xw(t, .)# zeta(t, .)`, evaluable through pairings
/// and pointwise densities.
pub struct PerturbedSolution<'a> {
    pub lambda: u32,
    pub q: Option<u32>,
    pub w: &'a dyn SmoothVectorField,
    pub branch: Branch,
    pub conv: Conventions,
}

impl<'a> PerturbedSolution<'a> {
    pub fn variant(&self) -> SolutionVariant {
        self.branch.variant(self.q.unwrap_or(1))
    }

    /// Exact-side density at `(t, y)`.
    pub fn zeta(&self, t: f64, y: Vec2) -> f64 {
        pointwise_density(self.lambda, self.variant(), t, y, self.conv)
            .map(|d| d.value)
            .unwrap_or(0.5)
    }

    /// Pairing `int phi(x) rho(t, x) dx = int phi(Xw(t, y)) zeta(t, y) dy`
    /// over one period window, by forward change of variables on a grid
    /// aligned with the exact solution's cells.
    pub fn pairing(
        &self,
        t: f64,
        phi: &(dyn Fn(Vec2) -> f64 + Sync),
        support_box: (Vec2, Vec2),
        delta: f64,
        h: f64,
    ) -> f64 {
        let pad = self.w.budget().c0 * 2.0 + 0.1;
        let lo = [support_box.0[0] - pad, support_box.0[1] - pad];
        let hi = [support_box.1[0] + pad, support_box.1[1] + pad];
        let nx = ((hi[0] - lo[0]) / delta).round() as usize;
        let ny = ((hi[1] - lo[1]) / delta).round() as usize;
        let mut seeds = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                seeds.push([lo[0] + (i as f64 + 0.5) * delta, lo[1] + (j as f64 + 0.5) * delta]);
            }
        }
        let mut result = 0.0;
        sweep_anchor1(self.w, &seeds, &[t], h, |_, states| {
            let vals: Vec<f64> = states
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(st, &y)| {
                    let pv = phi(st.x);
                    if pv == 0.0 {
                        0.0
                    } else {
                        pv * self.zeta(t, y)
                    }
                })
                .collect();
            result = vals.iter().sum::<f64>() * delta * delta;
        });
        result
    }

    /// Density `rho(t, x) = zeta(t, y) / J Xw(t, y)`, `y = Xw^{-1}(t, x)`.
    pub fn density_eval(&self, t: f64, x: Vec2, h: f64) -> Result<f64, StepError> {
        let probe = inverse_probe(self.w, t, x, h)?;
        Ok(self.zeta(t, probe.y) / probe.j)
    }

    /// Sup-norm bound from the push-forward description: the exact density
    /// is at most 1 and the Jacobian obeys the Gronwall envelope.
    pub fn density_bound(&self) -> f64 {
        self.w.div_l1(0.0, 2.0).exp()
    }
}

/// Initial datum of the perturbed problem: the chessboard pushed forward by
/// the perturbation flow at time 0.
pub struct InitialDatum<'a> {
    pub lambda: u32,
    pub w: &'a dyn SmoothVectorField,
}

impl<'a> InitialDatum<'a> {
    pub fn eval(&self, x: Vec2, h: f64) -> Result<f64, StepError> {
        let probe = inverse_probe(self.w, 0.0, x, h)?;
        Ok(crate::dyadic::chessboard(self.lambda, probe.y) as f64 / probe.j)
    }
}

#[derive(Debug, Clone)]
pub struct CompressReport {
    pub constant: f64,
    pub max_violation: f64,
    pub ok: bool,
    pub cells_checked: usize,
}

/// Monte-Carlo push-forward certificate for the composed flow: empirical
/// densities of `X_{b,w}(t, .)# Lebesgue` against the Gronwall envelope of
/// the perturbation alone (the exact part is measure preserving), with a
/// 4-sigma Poisson slack on top.
pub fn compressibility_certificate(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    t: f64,
    n_points: usize,
    seed: u64,
    conv: Conventions,
    h: f64,
) -> Result<CompressReport, StepError> {
    use rand::{Rng, SeedableRng};
    assert!(part.trunc.is_some(), "certificate needs a truncated variant");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let box_r = w.support_radius() + 1.0;
    let cell = 0.5f64;
    let cells = ((2.0 * box_r) / cell).ceil() as i64;
    let mut counts = std::collections::BTreeMap::<(i64, i64), u64>::new();
    for _ in 0..n_points {
        let x = [rng.gen_range(-box_r..box_r), rng.gen_range(-box_r..box_r)];
        let y = composed_flow(part, w, t, x, conv, h)?;
        let ci = ((y[0] + box_r) / cell).floor() as i64;
        let cj = ((y[1] + box_r) / cell).floor() as i64;
        *counts.entry((ci, cj)).or_default() += 1;
    }
    let constant = w.div_l1(0.0, 2.0).exp();
    // displacement bound: perturbation drift plus one exact-part period
    let margin = w.budget().c0 * 2.0 + 1.0 + cell;
    let expected = n_points as f64 * cell * cell / (4.0 * box_r * box_r);
    let mut max_violation = 0.0f64;
    let mut checked = 0usize;
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
            checked += 1;
            let c = counts.get(&(ci, cj)).copied().unwrap_or(0) as f64;
            let density = c / expected;
            let slack = 4.0 / expected.sqrt();
            let viol = (density - constant - slack)
                .max(1.0 / constant - slack - density)
                .max(0.0);
            max_violation = max_violation.max(viol);
        }
    }
    Ok(CompressReport { constant, max_violation, ok: max_violation <= 0.0, cells_checked: checked })
}

/// Sampled sup norms for the unboundedness diagnostic: the perturbation
/// norm, the transported exact part, and their difference as a lower bound
/// on the assembled field over the interval.
#[derive(Debug, Clone)]
pub struct RemarkRow {
    pub t0: f64,
    pub t1: f64,
    pub w_sup: f64,
    pub transported_sup: f64,
    pub assembled_lower: f64,
}

pub fn unboundedness_diagnostic(
    part: ExactPart,
    w: &dyn SmoothVectorField,
    intervals: &[(f64, f64)],
    conv: Conventions,
    h: f64,
) -> Result<Vec<RemarkRow>, StepError> {
    let mut rows = Vec::new();
    for &(t0, t1) in intervals {
        let mut w_sup = 0.0f64;
        let mut tr_sup = 0.0f64;
        for i in 0..5 {
            let t = t0 + (t1 - t0) * (i as f64 + 0.5) / 5.0;
            for gx in 0..12 {
                for gy in 0..12 {
                    let x = [gx as f64 * 0.21 - 0.2, gy as f64 * 0.21 - 0.2];
                    let wv = w.value(t, x);
                    w_sup = w_sup.max((wv[0] * wv[0] + wv[1] * wv[1]).sqrt());
                    let probe = inverse_probe(w, t, x, h)?;
                    let b = part.value(t, probe.y, conv);
                    let tb = mat_vec(&probe.m, b);
                    tr_sup = tr_sup.max((tb[0] * tb[0] + tb[1] * tb[1]).sqrt());
                }
            }
        }
        rows.push(RemarkRow {
            t0,
            t1,
            w_sup,
            transported_sup: tr_sup,
            assembled_lower: (w_sup - tr_sup).max(0.0),
        });
    }
    Ok(rows)
}
