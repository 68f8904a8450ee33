//! Exact density evolution at dyadic checkpoint times via block rotations.
//!
//! At every stage boundary the flow acts on cell grids as a permutation:
//! each filled shifted-family square of the active scale rotates by a
//! quarter turn about its centre, empty squares stay fixed. Composing these
//! permutations realises the unmixing solution, the mixed branch, and the
//! two truncated solutions exactly, on one period window with wrap-around.

use crate::dyadic::{cell_average, CellGrid, Dyadic, GridError, Scalar, SquareFamily, SquareId};
use crate::fields::{Conventions, Orientation, ReflectionSign, TruncKind};
use crate::flow::{flow_field, ExactFlowSpec, FlowError, FlowQuery};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("checkpoint depth {0} exceeds the engine cap {1}")]
    TooDeep(u32, u32),
    #[error("the unmixing branch past t = 1 needs the negative reflection sign")]
    UnsupportedConvention,
}

/// Which bounded weak solution the engine realises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionVariant {
    /// Mixes toward 1/2 and unmixes back to the initial datum.
    Unmixing,
    /// Equals the unmixing branch before t = 1, constant 1/2 afterwards.
    Mixed,
    /// Along the symmetrically truncated field.
    TruncSym { q: u32 },
    /// Along the asymmetrically truncated field.
    TruncAsym { q: u32 },
}

impl SolutionVariant {
    pub fn truncation(&self) -> Option<(TruncKind, u32)> {
        match self {
            SolutionVariant::TruncSym { q } => Some((TruncKind::Sym, *q)),
            SolutionVariant::TruncAsym { q } => Some((TruncKind::Asym, *q)),
            _ => None,
        }
    }
}

/// Default cap on the stage depth the engine will materialise.
pub const DEFAULT_MAX_DEPTH: u32 = 8;

/// A stage-boundary time `0, 1 - 2^-K, 1, 1 + 2^-K, 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checkpoint {
    Zero,
    /// `t = 1 - 2^-K`, `K >= 1`.
    Before(u32),
    One,
    /// `t = 1 + 2^-K`, `K >= 1`.
    After(u32),
    Two,
}

impl Checkpoint {
    pub fn classify(t: Dyadic) -> Result<Checkpoint, GridError> {
        let one = Dyadic::ONE;
        let two = Dyadic::from_int(2);
        if t == Dyadic::ZERO {
            return Ok(Checkpoint::Zero);
        }
        if t == one {
            return Ok(Checkpoint::One);
        }
        if t == two {
            return Ok(Checkpoint::Two);
        }
        if t > Dyadic::ZERO && t < one {
            let d = one - t;
            if d.numerator() == 1 {
                return Ok(Checkpoint::Before(d.exponent()));
            }
        }
        if t > one && t < two {
            let d = t - one;
            if d.numerator() == 1 {
                return Ok(Checkpoint::After(d.exponent()));
            }
        }
        Err(GridError::NotCheckpoint(format!("{t}")))
    }

    pub fn time(&self) -> Dyadic {
        match self {
            Checkpoint::Zero => Dyadic::ZERO,
            Checkpoint::Before(k) => Dyadic::ONE - Dyadic::pow2(-(*k as i32)),
            Checkpoint::One => Dyadic::ONE,
            Checkpoint::After(k) => Dyadic::ONE + Dyadic::pow2(-(*k as i32)),
            Checkpoint::Two => Dyadic::from_int(2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RotateOp {
    k: u32,
    inverse: bool,
}

/// Stage rotations, in time order, taking the initial chessboard to the
/// solution at the checkpoint. `None` means the value is the constant-1/2
/// weak* limit instead of a rotated grid.
fn ops_for(
    variant: SolutionVariant,
    cp: Checkpoint,
    conv: Conventions,
) -> Result<Option<Vec<RotateOp>>, EvolveError> {
    let fwd = |upto: u32| -> Vec<RotateOp> {
        (0..upto).map(|k| RotateOp { k, inverse: false }).collect()
    };
    // With the negative reflection sign, backward stages invert their
    // forward counterparts; with the positive sign they repeat them.
    let binv = matches!(conv.reflection, ReflectionSign::Neg);
    match variant {
        SolutionVariant::Unmixing | SolutionVariant::Mixed => match cp {
            Checkpoint::Zero => Ok(Some(vec![])),
            Checkpoint::Before(kk) => Ok(Some(fwd(kk))),
            Checkpoint::One => Ok(None),
            Checkpoint::After(kk) => {
                if variant == SolutionVariant::Mixed {
                    return Ok(None);
                }
                if !binv {
                    return Err(EvolveError::UnsupportedConvention);
                }
                // reflection: the state at 1 + 2^-K equals the state at 1 - 2^-K
                Ok(Some(fwd(kk)))
            }
            Checkpoint::Two => {
                if variant == SolutionVariant::Mixed {
                    return Ok(None);
                }
                if !binv {
                    return Err(EvolveError::UnsupportedConvention);
                }
                Ok(Some(vec![]))
            }
        },
        SolutionVariant::TruncSym { q } | SolutionVariant::TruncAsym { q } => {
            // forward stages cut by the window start
            let fcap = match variant {
                SolutionVariant::TruncSym { .. } => q,
                _ => q + 2,
            };
            match cp {
                Checkpoint::Zero => Ok(Some(vec![])),
                Checkpoint::Before(kk) => Ok(Some(fwd(kk.min(fcap)))),
                Checkpoint::One => Ok(Some(fwd(fcap))),
                Checkpoint::After(kk) => {
                    let mut ops = fwd(fcap);
                    if kk <= q {
                        // backward stages q-1 down to kk have already acted
                        for k in (kk..q).rev() {
                            ops.push(RotateOp { k, inverse: binv });
                        }
                    }
                    Ok(Some(ops))
                }
                Checkpoint::Two => {
                    let mut ops = fwd(fcap);
                    for k in (0..q).rev() {
                        ops.push(RotateOp { k, inverse: binv });
                    }
                    Ok(Some(ops))
                }
            }
        }
    }
}

/// One full period window `[0, 2^(1-lambda))^2` at the given grid level.
pub fn period_window(lambda: u32, level: i32) -> ([i64; 2], [usize; 2]) {
    assert!(level + 1 - lambda as i32 >= 0);
    let n = 1usize << (level + 1 - lambda as i32) as u32;
    ([0, 0], [n, n])
}

/// Rotate every filled shifted-family square of scale `2^-(lambda+k)` on a
/// periodic window, as a cell permutation.
fn apply_rotation(grid: &mut CellGrid, lambda: u32, op: RotateOp, conv: Conventions) {
    let level = grid.level();
    let bpow = level - (lambda + op.k) as i32;
    assert!(bpow >= 1, "grid too coarse for stage {}", op.k);
    let b = 1i64 << bpow as u32;
    let n = grid.counts()[0] as i64;
    assert_eq!(grid.counts()[0], grid.counts()[1]);
    // counterclockwise for the printed orientation unless inverted
    let ccw = matches!(
        (conv.orientation, op.inverse),
        (Orientation::Formula, false) | (Orientation::Mirrored, true)
    );
    let half = b / 2;
    let centers = 1i64 << (op.k + 1);
    let mut old = vec![Dyadic::ZERO; (b * b) as usize];
    for m in 0..centers {
        for nn in 0..centers {
            if (m + nn) % 2 != 0 {
                continue;
            }
            let c = [m * b, nn * b];
            for dj in -half..half {
                for di in -half..half {
                    let ix = (c[0] + di).rem_euclid(n);
                    let iy = (c[1] + dj).rem_euclid(n);
                    old[((dj + half) * b + di + half) as usize] =
                        grid.value(ix, iy).expect("window cell");
                }
            }
            for dj in -half..half {
                for di in -half..half {
                    let (ti, tj) = if ccw { (-dj - 1, di) } else { (dj, -di - 1) };
                    let ix = (c[0] + ti).rem_euclid(n);
                    let iy = (c[1] + tj).rem_euclid(n);
                    grid.set(ix, iy, old[((dj + half) * b + di + half) as usize]);
                }
            }
        }
    }
}

/// Exact solution grid at a dyadic checkpoint time on one period window.
pub fn solution_grid(
    lambda: u32,
    variant: SolutionVariant,
    t: Dyadic,
    conv: Conventions,
    max_depth: u32,
) -> Result<CellGrid, EvolveError> {
    let cp = Checkpoint::classify(t)?;
    if let Checkpoint::Before(k) | Checkpoint::After(k) = cp {
        if k > max_depth {
            return Err(EvolveError::TooDeep(k, max_depth));
        }
    }
    let ops = ops_for(variant, cp, conv)?;
    match ops {
        None => {
            let level = lambda as i32 + 1;
            let (origin, n) = period_window(lambda, level);
            Ok(CellGrid::constant(level, origin, n, Dyadic::HALF))
        }
        Some(ops) => {
            let max_k = ops.iter().map(|o| o.k).max();
            let level = match max_k {
                Some(k) => (lambda + k + 1) as i32,
                None => lambda as i32,
            };
            let (origin, n) = period_window(lambda, level);
            let mut grid = CellGrid::chessboard_grid(lambda, level, origin, n);
            for op in ops {
                apply_rotation(&mut grid, lambda, op, conv);
            }
            Ok(grid)
        }
    }
}

/// A pointwise density value; `limit_flag` marks the constant-1/2 weak*
/// limit at the singular time, where the unmixing branch has no classical
/// value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityValue {
    pub value: f64,
    pub limit_flag: bool,
}

/// Pointwise density via the initial datum composed with the inverse flow.
/// Exact on dyadic inputs off cell boundaries.
pub fn pointwise_density<S: Scalar>(
    lambda: u32,
    variant: SolutionVariant,
    t: S,
    x: [S; 2],
    conv: Conventions,
) -> Result<DensityValue, EvolveError> {
    let one = S::one();
    if variant == SolutionVariant::Mixed && !(t < one) {
        return Ok(DensityValue { value: 0.5, limit_flag: false });
    }
    if variant == SolutionVariant::Unmixing {
        if t == one {
            return Ok(DensityValue { value: 0.5, limit_flag: true });
        }
        if t > one {
            if conv.reflection != ReflectionSign::Neg {
                return Err(EvolveError::UnsupportedConvention);
            }
            let reflected = S::from_int(2) - t;
            return pointwise_density(lambda, variant, reflected, x, conv);
        }
    }
    let spec = ExactFlowSpec { lambda, trunc: variant.truncation() };
    let y = flow_field(&FlowQuery { spec, start: t, end: S::zero(), point: x }, conv)?;
    Ok(DensityValue { value: crate::dyadic::chessboard(lambda, y) as f64, limit_flag: false })
}

/// Finite dictionary of indicator test squares: all `S1` squares with levels
/// in `[min_level, max_level]` inside the period window.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub lambda: u32,
    pub min_level: i32,
    pub max_level: i32,
}

impl Dictionary {
    pub fn squares(&self) -> Vec<SquareId> {
        let mut out = Vec::new();
        for level in self.min_level..=self.max_level {
            let n = 1i64 << (level + 1 - self.lambda as i32) as u32;
            for iy in 0..n {
                for ix in 0..n {
                    out.push(SquareId { level, index: [ix, iy], family: SquareFamily::S1 });
                }
            }
        }
        out
    }
}

/// Exact maximum over dictionary indicators of the pairing gap normalised
/// by the square's area: `max_S |avg_S(g1) - avg_S(g2)|`.
pub fn weak_star_gap(g1: &CellGrid, g2: &CellGrid, dict: &Dictionary) -> Result<Dyadic, GridError> {
    let mut gap = Dyadic::ZERO;
    for sq in dict.squares() {
        let a = cell_average(g1, &sq)?;
        let b = cell_average(g2, &sq)?;
        let d = (a - b).abs();
        if d > gap {
            gap = d;
        }
    }
    Ok(gap)
}

/// Refine both grids to a common level so they can be compared exactly.
pub fn align_levels(mut a: CellGrid, mut b: CellGrid) -> (CellGrid, CellGrid) {
    while a.level() < b.level() {
        a = a.refined();
    }
    while b.level() < a.level() {
        b = b.refined();
    }
    (a, b)
}

/// Per-level outcome of the self-similarity averages check.
#[derive(Debug, Clone)]
pub struct ObservationRow {
    pub q_prime: u32,
    pub squares: usize,
    pub pass: bool,
}

/// Verify, exactly, that at `t = 1 + 2^-q'` every `S1` square of side
/// `2^-(lambda+q')` in the window has solution average exactly 1/2, for all
/// `q' <= q`, along the asymmetric truncation.
pub fn observation_o_check(
    lambda: u32,
    q: u32,
    conv: Conventions,
) -> Result<Vec<ObservationRow>, EvolveError> {
    let mut rows = Vec::new();
    for qp in 1..=q {
        let t = Dyadic::ONE + Dyadic::pow2(-(qp as i32));
        let grid =
            solution_grid(lambda, SolutionVariant::TruncAsym { q }, t, conv, DEFAULT_MAX_DEPTH)?;
        let level = (lambda + qp) as i32;
        let n = 1i64 << (level + 1 - lambda as i32) as u32;
        let mut pass = true;
        let mut squares = 0usize;
        for iy in 0..n {
            for ix in 0..n {
                let sq = SquareId { level, index: [ix, iy], family: SquareFamily::S1 };
                let avg = cell_average(&grid, &sq)?;
                squares += 1;
                if avg != Dyadic::HALF {
                    pass = false;
                }
            }
        }
        rows.push(ObservationRow { q_prime: qp, squares, pass });
    }
    Ok(rows)
}

/// Closed-form value of the asymmetric-truncation solution at `t = 2`:
/// the frozen fine chessboard, complemented once per backward stage whose
/// filled square contains the point (quarter turns about cell corners
/// complement even-sided chessboard blocks).
pub fn asym_final_oracle(lambda: u32, q: u32, x: crate::dyadic::DyadicPoint) -> u8 {
    let fine = crate::dyadic::chessboard(lambda + q + 2, x);
    let parity = (q % 2) as u8;
    let mut flips = 0u8;
    for k in 0..q {
        let scale = (lambda + k) as i32;
        let half = Dyadic::HALF;
        let m0 = (x[0].mul_pow2(scale) + half).floor();
        let m1 = (x[1].mul_pow2(scale) + half).floor();
        if (m0 + m1).rem_euclid(2) == 0 {
            flips ^= 1;
        }
    }
    fine ^ parity ^ flips
}
