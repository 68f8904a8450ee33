//! Exact regular Lagrangian flow of the basic field, its periodisation, the
//! time-staged field and the truncated fields, from any start time.
//!
//! Level sets of the basic field are concentric squares; the flow moves each
//! point along its square at constant speed `4r`, so it is an arclength
//! computation. On dyadic inputs everything stays dyadic and the stage maps
//! are exact bijections; `f64` inputs take the same code path with a
//! documented 1e-12 tolerance.

use crate::dyadic::Scalar;
use crate::fields::{
    classify_time, filled_center, trunc_window, Conventions, FieldError, FieldSpec, Orientation,
    ReflectionSign, StageSide, TimeClass, TruncKind, MAX_STAGE,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow query touches the singular time t = 1")]
    SingularTime,
    #[error("stage depth exceeded near the singular time")]
    TooDeep,
    #[error("flow is closed-form only for exact field specs")]
    UnsupportedSpec,
    #[error("time {0} outside [0, 2]")]
    OutOfDomain(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Position on the square level set `max(|x1|, |x2|) = r`, measured by
/// arclength from the corner `(r, -r)` in the printed-formula orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerimeterPosition<S> {
    pub radius: S,
    pub arclength: S,
}

impl<S: Scalar> PerimeterPosition<S> {
    /// Classify a point on the square of radius `r > 0` onto its perimeter.
    pub fn from_point(x: [S; 2]) -> Option<Self> {
        let r = if x[0].abs() > x[1].abs() { x[0].abs() } else { x[1].abs() };
        if !(r > S::zero()) {
            return None;
        }
        let two_r = r.mul_pow2(1);
        let s = if x[0] == r && x[1] < r {
            // right edge, upward
            x[1] + r
        } else if x[1] == r && x[0] > -r {
            // top edge, leftward
            two_r + (r - x[0])
        } else if x[0] == -r && x[1] > -r {
            // left edge, downward
            two_r.mul_pow2(1) + (r - x[1])
        } else {
            // bottom edge, rightward
            two_r.mul_pow2(1) + two_r + (x[0] + r)
        };
        Some(PerimeterPosition { radius: r, arclength: s })
    }

    pub fn to_point(self) -> [S; 2] {
        let r = self.radius;
        let s = self.arclength;
        let two_r = r.mul_pow2(1);
        let four_r = r.mul_pow2(2);
        let six_r = four_r + two_r;
        if s < two_r {
            [r, s - r]
        } else if s < four_r {
            [two_r + r - s, r] // 3r - s
        } else if s < six_r {
            [-r, four_r + r - s] // 5r - s
        } else {
            [s - six_r - r, -r] // s - 7r
        }
    }
}

/// Flow of the basic autonomous field for a duration `t` (any sign).
///
/// Points advance along their square level set by arclength `4 r t`
/// continuously through corners; the map is the identity outside the open
/// support and at the centre, and is exact on dyadic data.
pub fn flow_v<S: Scalar>(t: S, x: [S; 2], orientation: Orientation) -> [S; 2] {
    let r = if x[0].abs() > x[1].abs() { x[0].abs() } else { x[1].abs() };
    let half = S::one().mul_pow2(-1);
    if !(r > S::zero()) || !(r < half) {
        return x;
    }
    let dur = match orientation {
        Orientation::Formula => t,
        Orientation::Mirrored => -t,
    };
    let pos = PerimeterPosition::from_point(x).expect("r > 0 classified");
    let perimeter = r.mul_pow2(3);
    let mut s = pos.arclength + r.mul_pow2(2) * dur;
    let wraps = s.div_floor(perimeter);
    s = s - perimeter * S::from_int(wraps);
    PerimeterPosition { radius: r, arclength: s }.to_point()
}

/// Flow of the periodised field at scale 2^-lambda for a duration `t`.
pub fn flow_u<S: Scalar>(lambda: u32, t: S, x: [S; 2], orientation: Orientation) -> [S; 2] {
    stage_map(lambda, 0, 1, t, x, orientation)
}

/// Flow of the stage-`k` field (the periodised field read at scale
/// 2^-lambda-k but at unreduced speed) for a duration `dt`.
fn stage_map<S: Scalar>(
    lambda: u32,
    k: u32,
    vsign: i32,
    dt: S,
    x: [S; 2],
    orientation: Orientation,
) -> [S; 2] {
    let scale = (lambda + k) as i32;
    let xi = [x[0].mul_pow2(scale), x[1].mul_pow2(scale)];
    let Some(m) = filled_center(xi) else { return x };
    let local = [xi[0] - S::from_int(m[0]), xi[1] - S::from_int(m[1])];
    // In block coordinates the trajectory is the basic flow at speed 2^k.
    let mut dv = dt.mul_pow2(k as i32);
    if vsign < 0 {
        dv = -dv;
    }
    let moved = flow_v(dv, local, orientation);
    [
        (S::from_int(m[0]) + moved[0]).mul_pow2(-scale),
        (S::from_int(m[1]) + moved[1]).mul_pow2(-scale),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Action {
    Zero,
    Stage { k: u32, vsign: i32 },
}

#[derive(Debug, Clone, Copy)]
struct Piece<S> {
    lo: S,
    hi: S,
    action: Action,
}

/// Exact-flow view of a field spec: the staged field or one of its
/// truncations.
#[derive(Debug, Clone, Copy)]
pub struct ExactFlowSpec {
    pub lambda: u32,
    pub trunc: Option<(TruncKind, u32)>,
}

impl ExactFlowSpec {
    pub fn from_field_spec(spec: &FieldSpec) -> Result<Self, FlowError> {
        match spec {
            FieldSpec::BuildingBlock { lambda } => Ok(ExactFlowSpec { lambda: *lambda, trunc: None }),
            FieldSpec::TruncSym { lambda, q } => {
                Ok(ExactFlowSpec { lambda: *lambda, trunc: Some((TruncKind::Sym, *q)) })
            }
            FieldSpec::TruncAsym { lambda, q } => {
                Ok(ExactFlowSpec { lambda: *lambda, trunc: Some((TruncKind::Asym, *q)) })
            }
            _ => Err(FlowError::UnsupportedSpec),
        }
    }
}

/// A flow evaluation request: move `point` from time `start` to time `end`.
#[derive(Debug, Clone, Copy)]
pub struct FlowQuery<S> {
    pub spec: ExactFlowSpec,
    pub start: S,
    pub end: S,
    pub point: [S; 2],
}

fn dyadic_to_scalar<S: Scalar>(d: crate::dyadic::Dyadic) -> S {
    S::from_int(i64::try_from(d.numerator()).expect("window bound fits i64"))
        .mul_pow2(-(d.exponent() as i32))
}

/// Enumerate forward stage pieces covering `[a, e]` with `0 <= a < e <= 1`,
/// where `e` never reaches 1 closer than the stage-depth cap allows.
fn forward_pieces<S: Scalar>(a: S, e: S, out: &mut Vec<Piece<S>>) -> Result<(), FlowError> {
    let one = S::one();
    let mut k = match classify_time(a)? {
        TimeClass::Stage(st) => {
            debug_assert_eq!(st.side, StageSide::Forward);
            st.k
        }
        TimeClass::Singular => return Err(FlowError::TooDeep),
    };
    loop {
        let lo = one - one.mul_pow2(-(k as i32));
        let hi = one - one.mul_pow2(-(k as i32) - 1);
        let plo = if lo > a { lo } else { a };
        let phi = if hi < e { hi } else { e };
        if plo < phi {
            out.push(Piece { lo: plo, hi: phi, action: Action::Stage { k, vsign: 1 } });
        }
        if !(hi < e) {
            return Ok(());
        }
        k += 1;
        if k > MAX_STAGE {
            return Err(FlowError::TooDeep);
        }
    }
}

/// Pieces of the field over `[a, b]` in increasing time order.
fn build_pieces<S: Scalar>(
    spec: ExactFlowSpec,
    a: S,
    b: S,
    conv: Conventions,
) -> Result<Vec<Piece<S>>, FlowError> {
    let one = S::one();
    let two = S::from_int(2);
    let bsign = match conv.reflection {
        ReflectionSign::Neg => -1,
        ReflectionSign::Pos => 1,
    };
    let mut out = Vec::new();

    // Backward-side pieces come from reflecting the forward enumeration.
    let mut backward = |lo: S, hi: S, out: &mut Vec<Piece<S>>| -> Result<(), FlowError> {
        let mut tmp = Vec::new();
        forward_pieces(two - hi, two - lo, &mut tmp)?;
        for p in tmp.into_iter().rev() {
            let action = match p.action {
                Action::Stage { k, .. } => Action::Stage { k, vsign: bsign },
                Action::Zero => Action::Zero,
            };
            out.push(Piece { lo: two - p.hi, hi: two - p.lo, action });
        }
        Ok(())
    };

    match spec.trunc {
        None => {
            if a < one && b > one {
                return Err(FlowError::SingularTime);
            }
            if a == one || b == one {
                return Err(FlowError::SingularTime);
            }
            if b < one {
                forward_pieces(a, b, &mut out)?;
            } else {
                backward(a, b, &mut out)?;
            }
        }
        Some((kind, q)) => {
            let (wlo, whi) = trunc_window(kind, q);
            let wlo: S = dyadic_to_scalar(wlo);
            let whi: S = dyadic_to_scalar(whi);
            if a < wlo {
                let e = if b < wlo { b } else { wlo };
                forward_pieces(a, e, &mut out)?;
            }
            let zlo = if a > wlo { a } else { wlo };
            let zhi = if b < whi { b } else { whi };
            if zlo < zhi {
                out.push(Piece { lo: zlo, hi: zhi, action: Action::Zero });
            }
            if b > whi {
                let s = if a > whi { a } else { whi };
                backward(s, b, &mut out)?;
            }
        }
    }
    Ok(out)
}

/// Flow the query's point from `start` to `end` by composing the stage maps.
/// The group property holds exactly because each piece map is an exact
/// bijection and pieces never overlap.
pub fn flow_field<S: Scalar>(query: &FlowQuery<S>, conv: Conventions) -> Result<[S; 2], FlowError> {
    let FlowQuery { spec, start: s, end: t, point } = *query;
    let zero = S::zero();
    let two = S::from_int(2);
    for v in [s, t] {
        if v < zero || v > two {
            return Err(FlowError::OutOfDomain(v.to_f64()));
        }
    }
    if spec.trunc.is_none() {
        let one = S::one();
        if s == one || t == one {
            return Err(FlowError::SingularTime);
        }
    }
    if s == t {
        return Ok(point);
    }
    let forward = t > s;
    let (a, b) = if forward { (s, t) } else { (t, s) };
    let pieces = build_pieces(spec, a, b, conv)?;
    let mut p = point;
    if forward {
        for piece in &pieces {
            p = apply_piece(spec.lambda, piece, piece.hi - piece.lo, p, conv.orientation);
        }
    } else {
        for piece in pieces.iter().rev() {
            p = apply_piece(spec.lambda, piece, -(piece.hi - piece.lo), p, conv.orientation);
        }
    }
    Ok(p)
}

fn apply_piece<S: Scalar>(
    lambda: u32,
    piece: &Piece<S>,
    dt: S,
    p: [S; 2],
    orientation: Orientation,
) -> [S; 2] {
    match piece.action {
        Action::Zero => p,
        Action::Stage { k, vsign } => stage_map(lambda, k, vsign, dt, p, orientation),
    }
}

/// Flow with start and end exchanged; exact inverse of [`flow_field`]
/// off the null ambiguity set.
pub fn inverse_flow<S: Scalar>(query: &FlowQuery<S>, conv: Conventions) -> Result<[S; 2], FlowError> {
    let swapped = FlowQuery { spec: query.spec, start: query.end, end: query.start, point: query.point };
    flow_field(&swapped, conv)
}

/// Rigid counterclockwise (or mirrored) quarter rotation about a centre;
/// the reference map for the rigidity checks.
pub fn quarter_rotation<S: Scalar>(center: [S; 2], x: [S; 2], orientation: Orientation) -> [S; 2] {
    let d = [x[0] - center[0], x[1] - center[1]];
    match orientation {
        Orientation::Formula => [center[0] - d[1], center[1] + d[0]],
        Orientation::Mirrored => [center[0] + d[1], center[1] - d[0]],
    }
}
