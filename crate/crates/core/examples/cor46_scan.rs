use tsl_core::fields::{Conventions, TruncKind};
use tsl_core::perturbed::{composed_flow, eval_perturbed_field, ExactPart};
use tsl_core::smooth::{SmoothFieldDef, SmoothVectorField, rk4_flow_between};
use tsl_core::fields::Vec2;

fn sig(part: ExactPart, w: &dyn SmoothVectorField, t: f64, x: Vec2, conv: Conventions, h: f64) -> u64 {
    use tsl_core::fields::{classify_time, in_trunc_window, filled_center, StageSide, TimeClass};
    let _ = conv;
    if let Some((kind, q)) = part.trunc {
        if in_trunc_window(kind, q, t) { return u64::MAX; }
    }
    let stage = match classify_time(t) { Ok(TimeClass::Stage(s)) => s, _ => return u64::MAX - 1 };
    let y = rk4_flow_between(w, t, 1.0, x, h).unwrap().endpoint;
    let scale = (part.lambda + stage.k) as f64;
    let xi = [y[0] * scale.exp2(), y[1] * scale.exp2()];
    let stage_code = (stage.k as u64) << 1 | matches!(stage.side, StageSide::Backward) as u64;
    match filled_center(xi) {
        None => stage_code << 8,
        Some(m) => {
            let l = [xi[0] - m[0] as f64, xi[1] - m[1] as f64];
            let sector = ((l[0].abs() > l[1].abs()) as u64) << 2
                | ((l[0] >= 0.0) as u64) << 1
                | (l[1] >= 0.0) as u64;
            let mh = (m[0].rem_euclid(1 << 20) as u64) << 21 ^ m[1].rem_euclid(1 << 20) as u64;
            stage_code << 48 ^ mh << 4 ^ sector | 1 << 62
        }
    }
}

fn main() {
    let conv = Conventions::default();
    let w = SmoothFieldDef::compression(0.8);
    let part = ExactPart { lambda: 0, trunc: Some((TruncKind::Asym, 2)) };
    let x = [0.85532798, 1.20939552];
    let (t_end, h_outer, h_inner) = (2.0f64, 1e-3f64, 1e-2f64);
    let f = |tt: f64, xx: Vec2| eval_perturbed_field(part, &w, tt, xx, conv, h_inner).unwrap();
    let one_step = |tt: f64, xx: Vec2, dt: f64| -> Vec2 {
        let k1 = f(tt, xx);
        let k2 = f(tt + dt * 0.5, [xx[0] + dt * 0.5 * k1[0], xx[1] + dt * 0.5 * k1[1]]);
        let k3 = f(tt + dt * 0.5, [xx[0] + dt * 0.5 * k2[0], xx[1] + dt * 0.5 * k2[1]]);
        let k4 = f(tt + dt, [xx[0] + dt * k3[0], xx[1] + dt * k3[1]]);
        [
            xx[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            xx[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    let span = t_end - 1.0;
    let n = ((span.abs() / h_outer).ceil() as usize).max(1) + 1;
    let dt = span / n as f64;
    let mut p = x;
    let mut t = 1.0;
    let mut last_dev = 0.0f64;
    for i in 0..n {
        let step_end = 1.0 + (i + 1) as f64 * dt;
        let mut remaining = step_end - t;
        let mut events = 0;
        while remaining.abs() > 1e-13 {
            let cand = one_step(t, p, remaining);
            let s0 = sig(part, &w, t, p, conv, h_inner);
            let s1 = sig(part, &w, t + remaining, cand, conv, h_inner);
            if s0 == s1 || events >= 12 {
                p = cand;
                t += remaining;
                break;
            }
            let mut lo = 0.0f64;
            let mut hi = remaining;
            for _ in 0..22 {
                let mid = 0.5 * (lo + hi);
                let xm = one_step(t, p, mid);
                if sig(part, &w, t + mid, xm, conv, h_inner) == s0 { lo = mid; } else { hi = mid; }
            }
            let overshoot = (hi - lo).abs().max(1e-9 * remaining.abs());
            let landing = if remaining > 0.0 { (hi + 2.0 * overshoot).min(remaining) } else { (hi - 2.0 * overshoot).max(remaining) };
            if t > 1.46 && t < 1.465 {
                println!("  BISECT t={t:.8} remaining={remaining:.3e} lo={lo:.6e} hi={hi:.6e}");
                let pre = composed_flow(part, &w, t, x, conv, 2e-4).unwrap();
                println!("  before: p=({:.8},{:.8}) composed=({:.8},{:.8})", p[0], p[1], pre[0], pre[1]);
            }
            let dbg = t > 1.46 && t < 1.465;
            p = one_step(t, p, lo);
            if dbg {
                let mid = composed_flow(part, &w, t + lo, x, conv, 2e-4).unwrap();
                println!("  after prefix: p=({:.8},{:.8}) composed=({:.8},{:.8}) dev {:.2e}", p[0], p[1], mid[0], mid[1], ((p[0]-mid[0]).powi(2)+(p[1]-mid[1]).powi(2)).sqrt());
                let y = rk4_flow_between(&w, t + lo, 1.0, p, h_inner).unwrap().endpoint;
                println!("  probe y=({:.8},{:.8}) xi=({:.6},{:.6})", y[0], y[1], 2.0*y[0], 2.0*y[1]);
            }
            p = one_step(t + lo, p, landing - lo);
            if dbg {
                let post = composed_flow(part, &w, t + landing, x, conv, 2e-4).unwrap();
                println!("  after hop: p=({:.8},{:.8}) composed=({:.8},{:.8}) dev {:.2e}", p[0], p[1], post[0], post[1], ((p[0]-post[0]).powi(2)+(p[1]-post[1]).powi(2)).sqrt());
            }
            t += landing;
            let acur = composed_flow(part, &w, t, x, conv, 2e-4).unwrap();
            let dv = ((p[0]-acur[0]).powi(2)+(p[1]-acur[1]).powi(2)).sqrt();
            println!("EVENT t={t:.6} dev {dv:.2e} (added {:+.2e}) sig {s0:x}->{s1:x}", dv - last_dev);
            last_dev = dv;
            remaining = step_end - t;
            events += 1;
        }
        t = step_end;
        if i % 25 == 0 && t > 1.3 && t < 1.55 {
            let acur = composed_flow(part, &w, t, x, conv, 2e-4).unwrap();
            let dv = ((p[0]-acur[0]).powi(2)+(p[1]-acur[1]).powi(2)).sqrt();
            println!("  step {i} t={t:.4} dev {dv:.2e}");
        }
    }
    let a = composed_flow(part, &w, t_end, x, conv, 2e-4).unwrap();
    let d = ((a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2)).sqrt();
    println!("endpoint err {d:.2e}");
}
