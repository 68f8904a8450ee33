//! Exact dyadic arithmetic, the two square families, the chessboard datum,
//! and piecewise-constant cell grids.
//!
//! Everything in this module is exact: values are `m / 2^e` with `i128`
//! numerators, and all grid identities are checked with integer arithmetic.
//! Cells are lower-closed, upper-open; a point on a grid line belongs to the
//! cell to its upper right.

use thiserror::Error;

/// Exact dyadic rational `num / 2^exp`.
///
/// Stored in canonical form (numerator odd, or zero with `exp == 0`), so
/// derived equality compares values. Arithmetic panics on `i128` overflow;
/// all desk-scale computations in this crate stay far below that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    num: i128,
    exp: u32,
}

fn shl_checked(n: i128, k: u32) -> i128 {
    assert!(k < 127, "dyadic shift overflow (exponent spread {k})");
    n.checked_mul(1i128 << k)
        .expect("dyadic numerator overflow")
}

impl Dyadic {
    pub fn new(num: i128, exp: u32) -> Self {
        let mut d = Dyadic { num, exp };
        d.normalize();
        d
    }

    pub const ZERO: Dyadic = Dyadic { num: 0, exp: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, exp: 0 };
    pub const HALF: Dyadic = Dyadic { num: 1, exp: 1 };

    pub fn from_int(n: i64) -> Self {
        Dyadic { num: n as i128, exp: 0 }
    }

    /// 2^k for any sign of `k`.
    pub fn pow2(k: i32) -> Self {
        Dyadic::ONE.mul_pow2(k)
    }

    fn normalize(&mut self) {
        if self.num == 0 {
            self.exp = 0;
            return;
        }
        while self.exp > 0 && self.num & 1 == 0 {
            self.num >>= 1;
            self.exp -= 1;
        }
    }

    pub fn numerator(&self) -> i128 {
        self.num
    }

    pub fn exponent(&self) -> u32 {
        self.exp
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    /// Multiply by 2^k exactly.
    pub fn mul_pow2(self, k: i32) -> Self {
        if self.num == 0 {
            return Dyadic::ZERO;
        }
        if k >= 0 {
            Dyadic::new(shl_checked(self.num, k as u32), self.exp)
        } else {
            Dyadic::new(self.num, self.exp + (-k) as u32)
        }
    }

    /// Exact floor as an integer.
    pub fn floor(self) -> i128 {
        // Arithmetic shift rounds toward -inf, which is floor.
        self.num >> self.exp
    }

    pub fn abs(self) -> Self {
        Dyadic { num: self.num.abs(), exp: self.exp }
    }

    pub fn to_f64(self) -> f64 {
        // powi(2, -e) is an exact power of two, so this only rounds the
        // numerator (exact whenever |num| < 2^53, which desk scales satisfy).
        (self.num as f64) * 2f64.powi(-(self.exp as i32))
    }

    /// Exact conversion from any finite `f64` (all are dyadic).
    pub fn try_from_f64(x: f64) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        if x == 0.0 {
            return Some(Dyadic::ZERO);
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1i128 } else { 1i128 };
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = (bits & ((1u64 << 52) - 1)) as i128;
        let (mantissa, e2) = if biased == 0 {
            (frac, -1074i64)
        } else {
            (frac | (1i128 << 52), biased - 1075)
        };
        let v = Dyadic::new(sign * mantissa, 0);
        if e2 >= 0 {
            if e2 > 60 {
                return None;
            }
            Some(v.mul_pow2(e2 as i32))
        } else {
            Some(v.mul_pow2(e2 as i32))
        }
    }
}

impl std::ops::Add for Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: Dyadic) -> Dyadic {
        let exp = self.exp.max(rhs.exp);
        let a = shl_checked(self.num, exp - self.exp);
        let b = shl_checked(rhs.num, exp - rhs.exp);
        Dyadic::new(a.checked_add(b).expect("dyadic add overflow"), exp)
    }
}

impl std::ops::Sub for Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: Dyadic) -> Dyadic {
        self + (-rhs)
    }
}

impl std::ops::Neg for Dyadic {
    type Output = Dyadic;
    fn neg(self) -> Dyadic {
        Dyadic { num: -self.num, exp: self.exp }
    }
}

impl std::ops::Mul for Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: Dyadic) -> Dyadic {
        let num = self.num.checked_mul(rhs.num).expect("dyadic mul overflow");
        Dyadic::new(num, self.exp + rhs.exp)
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let exp = self.exp.max(other.exp);
        let a = shl_checked(self.num, exp - self.exp);
        let b = shl_checked(other.num, exp - other.exp);
        a.cmp(&b)
    }
}

impl std::fmt::Display for Dyadic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.exp == 0 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/2^{}", self.num, self.exp)
        }
    }
}

/// Shared scalar interface so geometric code runs both exactly (on [`Dyadic`])
/// and fast (on `f64`, documented 1e-12 tolerance).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_int(n: i64) -> Self;
    fn mul_pow2(self, k: i32) -> Self;
    fn floor_int(self) -> i64;
    /// floor(self / rhs) for rhs > 0.
    fn div_floor(self, rhs: Self) -> i64;
    fn abs(self) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_int(n: i64) -> Self {
        n as f64
    }
    fn mul_pow2(self, k: i32) -> Self {
        self * (k as f64).exp2()
    }
    fn floor_int(self) -> i64 {
        self.floor() as i64
    }
    fn div_floor(self, rhs: Self) -> i64 {
        (self / rhs).floor() as i64
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for Dyadic {
    fn zero() -> Self {
        Dyadic::ZERO
    }
    fn one() -> Self {
        Dyadic::ONE
    }
    fn from_int(n: i64) -> Self {
        Dyadic::from_int(n)
    }
    fn mul_pow2(self, k: i32) -> Self {
        Dyadic::mul_pow2(self, k)
    }
    fn floor_int(self) -> i64 {
        let f = Dyadic::floor(self);
        i64::try_from(f).expect("dyadic floor out of i64 range")
    }
    fn div_floor(self, rhs: Self) -> i64 {
        assert!(rhs.num > 0, "div_floor needs positive divisor");
        // self/rhs = a 2^eb / (b 2^ea)
        let (a, ea) = (self.num, self.exp);
        let (b, eb) = (rhs.num, rhs.exp);
        let q = if eb >= ea {
            shl_checked(a, eb - ea).div_euclid(b)
        } else {
            a.div_euclid(shl_checked(b, ea - eb))
        };
        i64::try_from(q).expect("dyadic quotient out of i64 range")
    }
    fn abs(self) -> Self {
        Dyadic::abs(self)
    }
    fn to_f64(self) -> f64 {
        Dyadic::to_f64(self)
    }
}

/// A point with exact dyadic coordinates.
pub type DyadicPoint = [Dyadic; 2];

/// Chessboard two-colouring at scale 2^-lambda:
/// `(floor(2^l x1) + floor(2^l x2)) mod 2`, normalised into {0, 1}.
pub fn chessboard<S: Scalar>(lambda: u32, x: [S; 2]) -> u8 {
    let i = x[0].mul_pow2(lambda as i32).floor_int();
    let j = x[1].mul_pow2(lambda as i32).floor_int();
    (i + j).rem_euclid(2) as u8
}

/// The two square subdivisions: `S1` has vertices on `2^-j Z^2`, `S2` is the
/// same grid shifted by half a side in both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SquareFamily {
    S1,
    S2,
}

/// One square of a subdivision: side `2^-level`, lower-left corner at
/// `index * side` (family S1) or `index * side + side/2` (family S2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SquareId {
    pub level: i32,
    pub index: [i64; 2],
    pub family: SquareFamily,
}

impl SquareId {
    pub fn side(&self) -> Dyadic {
        Dyadic::pow2(-self.level)
    }

    /// Lower-left corner.
    pub fn corner(&self) -> DyadicPoint {
        let s = self.side();
        let shift = match self.family {
            SquareFamily::S1 => Dyadic::ZERO,
            SquareFamily::S2 => s.mul_pow2(-1),
        };
        [
            Dyadic::from_int(self.index[0]) * s + shift,
            Dyadic::from_int(self.index[1]) * s + shift,
        ]
    }

    pub fn center(&self) -> DyadicPoint {
        let c = self.corner();
        let h = self.side().mul_pow2(-1);
        [c[0] + h, c[1] + h]
    }
}

/// Locate the square of the requested family and level containing `x`.
/// Points on grid lines resolve to the lower-closed cell.
pub fn square_of<S: Scalar>(x: [S; 2], level: i32, family: SquareFamily) -> SquareId {
    let idx = |c: S| -> i64 {
        let scaled = c.mul_pow2(level);
        match family {
            SquareFamily::S1 => scaled.floor_int(),
            SquareFamily::S2 => (scaled - S::one().mul_pow2(-1)).floor_int(),
        }
    };
    SquareId { level, index: [idx(x[0]), idx(x[1])], family }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("square not aligned with grid cells: {0}")]
    Misaligned(String),
    #[error("square outside grid window: {0}")]
    OutOfWindow(String),
    #[error("{0} is not a checkpoint time")]
    NotCheckpoint(String),
}

/// Piecewise-constant density on a window of the `S1` grid at one level.
///
/// `origin` is the lower-left cell index (in cell units), `n` the cell counts.
/// Values are exact dyadics; all masses and averages stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    level: i32,
    origin: [i64; 2],
    n: [usize; 2],
    values: Vec<Dyadic>,
}

impl CellGrid {
    pub fn from_fn(
        level: i32,
        origin: [i64; 2],
        n: [usize; 2],
        mut f: impl FnMut(i64, i64) -> Dyadic,
    ) -> Self {
        let mut values = Vec::with_capacity(n[0] * n[1]);
        for jy in 0..n[1] {
            for jx in 0..n[0] {
                values.push(f(origin[0] + jx as i64, origin[1] + jy as i64));
            }
        }
        CellGrid { level, origin, n, values }
    }

    pub fn constant(level: i32, origin: [i64; 2], n: [usize; 2], v: Dyadic) -> Self {
        CellGrid { level, origin, n, values: vec![v; n[0] * n[1]] }
    }

    /// Chessboard datum at scale 2^-lambda sampled on a level-`level` grid.
    pub fn chessboard_grid(lambda: u32, level: i32, origin: [i64; 2], n: [usize; 2]) -> Self {
        assert!(level >= lambda as i32, "grid too coarse for the chessboard");
        let shift = level - lambda as i32;
        Self::from_fn(level, origin, n, |ix, iy| {
            let ci = ix >> shift;
            let cj = iy >> shift;
            Dyadic::from_int((ci + cj).rem_euclid(2))
        })
    }

    pub fn level(&self) -> i32 {
        self.level
    }

    pub fn origin(&self) -> [i64; 2] {
        self.origin
    }

    pub fn counts(&self) -> [usize; 2] {
        self.n
    }

    pub fn cell_side(&self) -> Dyadic {
        Dyadic::pow2(-self.level)
    }

    fn offset(&self, ix: i64, iy: i64) -> Option<usize> {
        let jx = ix - self.origin[0];
        let jy = iy - self.origin[1];
        if jx < 0 || jy < 0 || jx as usize >= self.n[0] || jy as usize >= self.n[1] {
            None
        } else {
            Some(jy as usize * self.n[0] + jx as usize)
        }
    }

    pub fn value(&self, ix: i64, iy: i64) -> Option<Dyadic> {
        self.offset(ix, iy).map(|o| self.values[o])
    }

    pub fn set(&mut self, ix: i64, iy: i64, v: Dyadic) {
        let o = self.offset(ix, iy).expect("cell outside window");
        self.values[o] = v;
    }

    /// Value at the cell containing `x` (lower-closed convention).
    pub fn value_at<S: Scalar>(&self, x: [S; 2]) -> Option<Dyadic> {
        let ix = x[0].mul_pow2(self.level).floor_int();
        let iy = x[1].mul_pow2(self.level).floor_int();
        self.value(ix, iy)
    }

    pub fn cell_center(&self, ix: i64, iy: i64) -> DyadicPoint {
        let s = self.cell_side();
        let h = s.mul_pow2(-1);
        [Dyadic::from_int(ix) * s + h, Dyadic::from_int(iy) * s + h]
    }

    /// Same window, one level finer; each cell splits into four equal children.
    pub fn refined(&self) -> CellGrid {
        let level = self.level + 1;
        let origin = [self.origin[0] * 2, self.origin[1] * 2];
        let n = [self.n[0] * 2, self.n[1] * 2];
        let mut values = Vec::with_capacity(n[0] * n[1]);
        for jy in 0..n[1] {
            for jx in 0..n[0] {
                values.push(self.values[(jy / 2) * self.n[0] + jx / 2]);
            }
        }
        CellGrid { level, origin, n, values }
    }

    /// Total mass `cell_area * sum(values)`, exact.
    pub fn total_mass(&self) -> Dyadic {
        let mut s = Dyadic::ZERO;
        for v in &self.values {
            s = s + *v;
        }
        s.mul_pow2(-2 * self.level)
    }

    /// Mean of |g1 - g2| over the window, exact. Grids must share geometry.
    pub fn l1_distance_per_area(&self, other: &CellGrid) -> Result<Dyadic, GridError> {
        if self.level != other.level || self.origin != other.origin || self.n != other.n {
            return Err(GridError::Misaligned(format!(
                "l1 distance between level {} and level {}",
                self.level, other.level
            )));
        }
        let mut s = Dyadic::ZERO;
        for (a, b) in self.values.iter().zip(&other.values) {
            s = s + (*a - *b).abs();
        }
        let cells = (self.n[0] * self.n[1]) as i128;
        // cells is n0*n1 with n0, n1 powers of two in all uses; fall back to
        // f64-free exact division only when it is.
        let mut d = Dyadic::new(s.numerator(), s.exponent());
        let mut c = cells;
        while c > 1 {
            assert!(c % 2 == 0, "window cell count must be a power of two");
            d = d.mul_pow2(-1);
            c /= 2;
        }
        Ok(d)
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (i64, i64, Dyadic)> + '_ {
        let (o, n) = (self.origin, self.n);
        self.values.iter().enumerate().map(move |(off, v)| {
            let jy = off / n[0];
            let jx = off % n[0];
            (o[0] + jx as i64, o[1] + jy as i64, *v)
        })
    }
}

/// Exact mean of grid values over one square.
///
/// The square must be a union of whole grid cells and lie inside the window.
pub fn cell_average(grid: &CellGrid, square: &SquareId) -> Result<Dyadic, GridError> {
    if square.level > grid.level {
        return Err(GridError::Misaligned(format!(
            "square level {} finer than grid level {}",
            square.level, grid.level
        )));
    }
    let d = (grid.level - square.level) as u32;
    let span = 1i64 << d;
    let start: [i64; 2] = match square.family {
        SquareFamily::S1 => [square.index[0] * span, square.index[1] * span],
        SquareFamily::S2 => {
            if d == 0 {
                return Err(GridError::Misaligned(
                    "S2 square needs a grid at least one level finer".into(),
                ));
            }
            [
                square.index[0] * span + span / 2,
                square.index[1] * span + span / 2,
            ]
        }
    };
    let mut sum = Dyadic::ZERO;
    for iy in start[1]..start[1] + span {
        for ix in start[0]..start[0] + span {
            match grid.value(ix, iy) {
                Some(v) => sum = sum + v,
                None => {
                    return Err(GridError::OutOfWindow(format!(
                        "cell ({ix},{iy}) of square {square:?}"
                    )))
                }
            }
        }
    }
    Ok(sum.mul_pow2(-2 * d as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dy(n: i128, e: u32) -> Dyadic {
        Dyadic::new(n, e)
    }

    #[test]
    fn equality_compares_values_not_representations() {
        assert_eq!(dy(4, 2), dy(1, 0));
        assert_eq!(dy(-6, 1), dy(-3, 0));
        assert_eq!(dy(0, 7), Dyadic::ZERO);
    }

    #[test]
    fn chessboard_examples() {
        assert_eq!(chessboard(0, [0.5, 0.25]), 0);
        assert_eq!(chessboard(1, [0.75, 0.25]), 1);
        assert_eq!(chessboard(0, [-0.25, 0.25]), 1);
        // exact path agrees
        assert_eq!(chessboard(0, [dy(-1, 2), dy(1, 2)]), 1);
    }

    #[test]
    fn chessboard_periodicity_and_complement() {
        for lambda in 0..3u32 {
            let period = Dyadic::pow2(1 - lambda as i32);
            let step = Dyadic::pow2(-(lambda as i32));
            for i in -8..8i64 {
                for j in -8..8i64 {
                    let x = [
                        Dyadic::new(2 * i as i128 + 1, 3 + lambda),
                        Dyadic::new(2 * j as i128 + 1, 3 + lambda),
                    ];
                    let c = chessboard(lambda, x);
                    assert_eq!(chessboard(lambda, [x[0] + period, x[1]]), c);
                    assert_eq!(chessboard(lambda, [x[0], x[1] + period]), c);
                    assert_eq!(chessboard(lambda, [x[0] + step, x[1]]), 1 - c);
                }
            }
        }
    }

    #[test]
    fn square_of_examples() {
        let x = [0.3, 0.7];
        let s = square_of(x, 0, SquareFamily::S1);
        assert_eq!(s.index, [0, 0]);
        let s = square_of(x, 1, SquareFamily::S1);
        assert_eq!(s.index, [0, 1]);
        let s = square_of(x, 0, SquareFamily::S2);
        assert_eq!(s.index, [-1, 0]);
        let c = s.corner();
        assert_eq!(c[0], dy(-1, 1));
        assert_eq!(c[1], dy(1, 1));
    }

    #[test]
    fn cell_average_of_chessboard() {
        let g = CellGrid::chessboard_grid(2, 2, [0, 0], [8, 8]);
        // level j square over a level-j grid: the cell's own value
        let own = cell_average(&g, &SquareId { level: 2, index: [1, 0], family: SquareFamily::S1 })
            .unwrap();
        assert_eq!(own, Dyadic::ONE);
        // one level coarser: exactly 1/2
        let avg = cell_average(&g, &SquareId { level: 1, index: [0, 0], family: SquareFamily::S1 })
            .unwrap();
        assert_eq!(avg, Dyadic::HALF);
        // S2 square fully inside the window
        let avg = cell_average(&g, &SquareId { level: 1, index: [0, 0], family: SquareFamily::S2 })
            .unwrap();
        assert_eq!(avg, Dyadic::HALF);
    }

    #[test]
    fn cell_average_constant() {
        let g = CellGrid::constant(3, [0, 0], [8, 8], dy(3, 2));
        let avg = cell_average(&g, &SquareId { level: 1, index: [0, 0], family: SquareFamily::S1 })
            .unwrap();
        assert_eq!(avg, dy(3, 2));
    }

    #[test]
    fn cell_average_errors() {
        let g = CellGrid::chessboard_grid(1, 1, [0, 0], [4, 4]);
        assert!(cell_average(&g, &SquareId { level: 2, index: [0, 0], family: SquareFamily::S1 })
            .is_err());
        assert!(cell_average(&g, &SquareId { level: 0, index: [7, 0], family: SquareFamily::S1 })
            .is_err());
        assert!(cell_average(&g, &SquareId { level: 1, index: [0, 0], family: SquareFamily::S2 })
            .is_err());
    }

    #[test]
    fn mass_is_exact() {
        let g = CellGrid::chessboard_grid(0, 1, [0, 0], [4, 4]);
        // window [0,2)^2, half the cells are 1
        assert_eq!(g.total_mass(), Dyadic::from_int(2));
    }

    #[test]
    fn div_floor_matches_f64() {
        let a = dy(13, 3); // 1.625
        let b = dy(3, 2); // 0.75
        assert_eq!(a.div_floor(b), 2);
        assert_eq!((-a).div_floor(b), -3);
    }

    proptest! {
        #[test]
        fn arithmetic_round_trips(
            na in -1_000_000i128..1_000_000,
            ea in 0u32..20,
            nb in -1_000_000i128..1_000_000,
            eb in 0u32..20,
        ) {
            let a = Dyadic::new(na, ea);
            let b = Dyadic::new(nb, eb);
            prop_assert_eq!((a + b) - b, a);
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!((a - b) + b, a);
        }

        #[test]
        fn floor_matches_f64(n in -1_000_000i128..1_000_000, e in 0u32..20) {
            let d = Dyadic::new(n, e);
            prop_assert_eq!(d.floor() as f64, d.to_f64().floor());
        }

        #[test]
        fn from_f64_exact_round_trip(x in -1000.0f64..1000.0) {
            let d = Dyadic::try_from_f64(x).unwrap();
            prop_assert_eq!(d.to_f64(), x);
        }
    }
}
