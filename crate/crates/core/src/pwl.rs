//! Concave piecewise-linear value functions on a uniform battery grid.
//!
//! A value function is stored as one sample per grid point and per access
//! state. Between grid points the function is the linear interpolant of the
//! two neighbouring samples; above the grid it is clamped to the value at
//! `b_max`. Interpolation is exact (bit-for-bit) at the grid points
//! themselves, which the solver relies on when comparing value functions
//! across grid resolutions.

use crate::AccessState;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PwlError {
    #[error("grid spacing must be positive and finite, got {0}")]
    BadDelta(f64),
    #[error("battery capacity must be positive and finite, got {0}")]
    BadCapacity(f64),
    #[error("capacity {b_max} is not an integer multiple of the spacing {delta}")]
    NotDivisible { b_max: f64, delta: f64 },
    #[error("sample list for access state {a} has {got} entries, grid has {want} points")]
    SampleCount { a: AccessState, got: usize, want: usize },
    #[error("non-finite sample {value} at grid index {index} (access state {a})")]
    NonFiniteSample { a: AccessState, index: usize, value: f64 },
    #[error("battery level must be non-negative, got {0}")]
    NegativeBattery(f64),
    #[error("grids differ: ({0} pts, delta {1}) vs ({2} pts, delta {3})")]
    GridMismatch(usize, f64, usize, f64),
    #[error("malformed value table: {0}")]
    Parse(String),
}

/// Uniform battery grid `{0, delta, 2*delta, ..., b_max}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryGrid {
    b_max: f64,
    delta: f64,
    points: Vec<f64>,
}

impl BatteryGrid {
    /// Builds the grid, rejecting capacities that are not an integer multiple
    /// of the spacing: silently stretching the grid would change the
    /// per-iteration approximation-error bound.
    pub fn new(b_max: f64, delta: f64) -> Result<BatteryGrid, PwlError> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(PwlError::BadDelta(delta));
        }
        if !(b_max.is_finite() && b_max > 0.0) {
            return Err(PwlError::BadCapacity(b_max));
        }
        let ratio = b_max / delta;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(PwlError::NotDivisible { b_max, delta });
        }
        let n = n as usize;
        let mut points: Vec<f64> = (0..=n).map(|i| i as f64 * delta).collect();
        // Pin the last point to the capacity as given so range checks against
        // b_max are exact.
        points[n] = b_max;
        Ok(BatteryGrid { b_max, delta, points })
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn same_as(&self, other: &BatteryGrid) -> bool {
        self.points.len() == other.points.len() && self.delta == other.delta && self.b_max == other.b_max
    }

    /// Index of the cell containing `b`, i.e. the largest `i` with
    /// `points[i] <= b`, capped at the last cell.
    pub fn cell_of(&self, b: f64) -> usize {
        let idx = (b / self.delta).floor() as isize;
        idx.clamp(0, self.points.len() as isize - 2) as usize
    }
}

/// Outcome of a monotonicity/concavity audit of a [`PwlValue`].
///
/// `monotonicity` is the largest drop `sample[i] - sample[i+1]` and
/// `convexity` the largest positive second difference, each per access
/// state; non-positive entries mean the shape holds exactly.
#[derive(Debug, Clone, Copy)]
pub struct ShapeReport {
    pub monotonicity: [f64; 2],
    pub convexity: [f64; 2],
}

impl ShapeReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst() <= tol
    }

    pub fn worst(&self) -> f64 {
        self.monotonicity
            .iter()
            .chain(self.convexity.iter())
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }
}

/// A value function sampled on a [`BatteryGrid`], one branch per access
/// state, extended to continuous battery levels by linear interpolation and
/// clamped above `b_max`.
///
/// Immutable after construction; all methods are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlValue {
    grid: BatteryGrid,
    samples: [Vec<f64>; 2],
}

impl PwlValue {
    pub fn new(grid: BatteryGrid, denied: Vec<f64>, granted: Vec<f64>) -> Result<PwlValue, PwlError> {
        let samples = [denied, granted];
        for a in AccessState::BOTH {
            let s = &samples[a.index()];
            if s.len() != grid.len() {
                return Err(PwlError::SampleCount { a, got: s.len(), want: grid.len() });
            }
            if let Some((i, &v)) = s.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(PwlError::NonFiniteSample { a, index: i, value: v });
            }
        }
        Ok(PwlValue { grid, samples })
    }

    /// The zero function; the usual starting point for value iteration.
    pub fn zeros(grid: BatteryGrid) -> PwlValue {
        let n = grid.len();
        PwlValue { grid, samples: [vec![0.0; n], vec![0.0; n]] }
    }

    pub fn grid(&self) -> &BatteryGrid {
        &self.grid
    }

    pub fn samples(&self, a: AccessState) -> &[f64] {
        &self.samples[a.index()]
    }

    /// Evaluates the interpolant at battery level `b`.
    ///
    /// Exact at grid points; constant at the `b_max` sample for `b > b_max`.
    /// Negative levels are a caller error: the battery dynamics keep
    /// `b >= 0`, so nothing ever needs a value there.
    pub fn eval(&self, b: f64, a: AccessState) -> Result<f64, PwlError> {
        if !(b >= 0.0) {
            return Err(PwlError::NegativeBattery(b));
        }
        Ok(eval_on_points(&self.grid.points, &self.samples[a.index()], b))
    }

    /// Sup-norm distance over both access states.
    ///
    /// For two interpolants on the same grid the supremum over the whole
    /// interval is attained at a grid point, so a sample-wise max suffices.
    pub fn sup_distance(&self, other: &PwlValue) -> Result<f64, PwlError> {
        if !self.grid.same_as(&other.grid) {
            return Err(PwlError::GridMismatch(
                self.grid.len(),
                self.grid.delta,
                other.grid.len(),
                other.grid.delta,
            ));
        }
        let mut d = 0.0f64;
        for a in AccessState::BOTH {
            for (x, y) in self.samples(a).iter().zip(other.samples(a)) {
                d = d.max((x - y).abs());
            }
        }
        Ok(d)
    }

    /// Audits the non-decreasing/concave shape that every solver-produced
    /// value function must satisfy.
    pub fn shape_check(&self) -> ShapeReport {
        let mut report = ShapeReport { monotonicity: [f64::NEG_INFINITY; 2], convexity: [f64::NEG_INFINITY; 2] };
        for a in AccessState::BOTH {
            let s = self.samples(a);
            let mut mono = 0.0f64;
            let mut conv = 0.0f64;
            for w in s.windows(2) {
                mono = mono.max(w[0] - w[1]);
            }
            for w in s.windows(3) {
                conv = conv.max(w[2] - 2.0 * w[1] + w[0]);
            }
            report.monotonicity[a.index()] = mono;
            report.convexity[a.index()] = conv;
        }
        report
    }

    /// Writes the tabular text form: a header row, then one row per grid
    /// point with the level and the per-access-state samples, tab separated.
    /// Floats use the shortest round-trip representation.
    pub fn write_table(&self, out: &mut String) {
        out.push_str("b\tv_a0\tv_a1\n");
        for (i, &b) in self.grid.points.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", b, self.samples[0][i], self.samples[1][i]));
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        self.write_table(&mut s);
        s
    }

    /// Parses the tabular form written by [`PwlValue::write_table`].
    pub fn parse_table(text: &str) -> Result<PwlValue, PwlError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| PwlError::Parse("empty table".into()))?;
        if header.trim() != "b\tv_a0\tv_a1" {
            return Err(PwlError::Parse(format!("unexpected header {header:?}")));
        }
        let mut points = Vec::new();
        let mut denied = Vec::new();
        let mut granted = Vec::new();
        for (ln, line) in lines.enumerate() {
            let mut cols = line.split('\t');
            let mut next = |name: &str| -> Result<f64, PwlError> {
                cols.next()
                    .ok_or_else(|| PwlError::Parse(format!("row {}: missing column {name}", ln + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| PwlError::Parse(format!("row {}: {name}: {e}", ln + 2)))
            };
            points.push(next("b")?);
            denied.push(next("v_a0")?);
            granted.push(next("v_a1")?);
        }
        if points.len() < 2 {
            return Err(PwlError::Parse("table needs at least two grid points".into()));
        }
        let delta = points[1] - points[0];
        let b_max = *points.last().unwrap();
        let grid = BatteryGrid::new(b_max, delta)?;
        for (i, (&got, &want)) in points.iter().zip(grid.points()).enumerate() {
            if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
                return Err(PwlError::Parse(format!("row {}: level {got} is off-grid (expected {want})", i + 2)));
            }
        }
        PwlValue::new(grid, denied, granted)
    }
}

/// Linear interpolation over an ordered point list with the clamp rule above
/// the last point. Shared by [`PwlValue::eval`] and the blended evaluations
/// inside the backup.
pub(crate) fn eval_on_points(points: &[f64], samples: &[f64], b: f64) -> f64 {
    let n = points.len();
    let last = points[n - 1];
    if b >= last {
        return samples[n - 1];
    }
    // Exact hits return the stored sample so grid evaluations are bit-exact.
    match points.binary_search_by(|p| p.partial_cmp(&b).unwrap()) {
        Ok(i) => samples[i],
        Err(i) => {
            // points[i-1] < b < points[i]; i >= 1 because b >= 0 = points[0].
            let lo = points[i - 1];
            let hi = points[i];
            let t = (b - lo) / (hi - lo);
            samples[i - 1] + t * (samples[i] - samples[i - 1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::AccessState::{Denied, Granted};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn simple() -> PwlValue {
        let grid = BatteryGrid::new(2.0, 1.0).unwrap();
        PwlValue::new(grid, vec![0.0, 0.5, 0.75], vec![0.0, 1.0, 1.5]).unwrap()
    }

    #[test]
    fn grid_rejects_non_divisible_capacity() {
        assert!(matches!(BatteryGrid::new(15.3, 1.0), Err(PwlError::NotDivisible { .. })));
        assert!(matches!(BatteryGrid::new(15.0, -1.0), Err(PwlError::BadDelta(_))));
        assert!(BatteryGrid::new(15.0, 0.1).is_ok());
        assert_eq!(BatteryGrid::new(15.0, 0.1).unwrap().len(), 151);
    }

    #[test]
    fn eval_midpoint_interpolation() {
        let f = simple();
        assert_eq!(f.eval(0.5, Granted).unwrap(), 0.5);
    }

    #[test]
    fn eval_exact_at_grid_points() {
        let f = simple();
        assert_eq!(f.eval(2.0, Granted).unwrap(), 1.5);
        // bit-exact at every stored point, both branches
        for (i, &b) in f.grid().points().iter().enumerate() {
            assert_eq!(f.eval(b, Granted).unwrap(), f.samples(Granted)[i]);
            assert_eq!(f.eval(b, Denied).unwrap(), f.samples(Denied)[i]);
        }
    }

    #[test]
    fn eval_clamps_above_capacity() {
        let f = simple();
        assert_eq!(f.eval(7.3, Granted).unwrap(), 1.5);
        assert_eq!(f.eval(f64::MAX, Granted).unwrap(), 1.5);
    }

    #[test]
    fn eval_rejects_negative_battery() {
        let f = simple();
        assert!(matches!(f.eval(-0.1, Granted), Err(PwlError::NegativeBattery(_))));
    }

    #[test]
    fn sup_distance_basics() {
        let f = simple();
        assert_eq!(f.sup_distance(&f).unwrap(), 0.0);
        let mut bumped = f.samples(Granted).to_vec();
        bumped[1] += 0.25;
        let g = PwlValue::new(f.grid().clone(), f.samples(Denied).to_vec(), bumped).unwrap();
        assert_eq!(f.sup_distance(&g).unwrap(), 0.25);
    }

    #[test]
    fn sup_distance_rejects_grid_mismatch() {
        let f = simple();
        let g = PwlValue::zeros(BatteryGrid::new(2.0, 0.5).unwrap());
        assert!(matches!(f.sup_distance(&g), Err(PwlError::GridMismatch(..))));
    }

    // Oracle: exhaustive dense evaluation of |f-g| must agree with the
    // grid-point maximum for interpolants on a shared grid.
    #[test]
    fn sup_distance_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let grid = BatteryGrid::new(15.0, 1.0).unwrap();
        for _ in 0..20 {
            let rand_samples = |rng: &mut StdRng| (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>();
            let f = PwlValue::new(grid.clone(), rand_samples(&mut rng), rand_samples(&mut rng)).unwrap();
            let g = PwlValue::new(grid.clone(), rand_samples(&mut rng), rand_samples(&mut rng)).unwrap();
            let mut dense = 0.0f64;
            for i in 0..10_000 {
                let b = 15.0 * i as f64 / 9_999.0;
                for a in AccessState::BOTH {
                    dense = dense.max((f.eval(b, a).unwrap() - g.eval(b, a).unwrap()).abs());
                }
            }
            let d = f.sup_distance(&g).unwrap();
            assert!((d - dense).abs() <= 1e-12, "sup {d} vs dense {dense}");
        }
    }

    #[test]
    fn shape_check_flags_convexity() {
        let grid = BatteryGrid::new(2.0, 1.0).unwrap();
        let ok = PwlValue::new(grid.clone(), vec![0.0, 1.0, 1.5], vec![0.0, 1.0, 1.5]).unwrap();
        assert!(ok.shape_check().passes(0.0));
        let bad = PwlValue::new(grid, vec![0.0, 1.0, 3.0], vec![0.0, 1.0, 1.5]).unwrap();
        let report = bad.shape_check();
        assert_eq!(report.convexity[Denied.index()], 1.0);
        assert!(!report.passes(0.5));
    }

    #[test]
    fn interpolation_preserves_concave_shape_densely() {
        // For concave non-decreasing samples the interpolant must be concave
        // and non-decreasing on the whole half-line.
        let grid = BatteryGrid::new(5.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..6).map(|i| (1.0 + i as f64).ln()).collect();
        let f = PwlValue::new(grid, samples.clone(), samples).unwrap();
        let xs: Vec<f64> = (0..2000).map(|i| 6.0 * i as f64 / 1999.0).collect();
        let vals: Vec<f64> = xs.iter().map(|&b| f.eval(b, Granted).unwrap()).collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        for w in vals.windows(3) {
            assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-9);
        }
    }

    #[test]
    fn interpolation_is_sup_norm_nonexpansive() {
        // Building interpolants from two sample sets cannot increase their
        // sup distance beyond the max grid-point gap.
        let mut rng = StdRng::seed_from_u64(11);
        let grid = BatteryGrid::new(8.0, 1.0).unwrap();
        for _ in 0..50 {
            let s1: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grid_gap = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            let f = PwlValue::new(grid.clone(), s1.clone(), s1).unwrap();
            let g = PwlValue::new(grid.clone(), s2.clone(), s2).unwrap();
            for i in 0..1000 {
                let b = 9.0 * i as f64 / 999.0;
                let gap = (f.eval(b, Granted).unwrap() - g.eval(b, Granted).unwrap()).abs();
                assert!(gap <= grid_gap + 1e-12);
            }
        }
    }

    #[test]
    fn table_round_trip_is_exact() {
        let mut rng = StdRng::seed_from_u64(3);
        let grid = BatteryGrid::new(1.5, 0.1).unwrap();
        let s: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f = PwlValue::new(grid, s, t).unwrap();
        let g = PwlValue::parse_table(&f.to_table()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(PwlValue::parse_table("").is_err());
        assert!(PwlValue::parse_table("b\tv_a0\tv_a1\n0\t0\n").is_err());
        assert!(PwlValue::parse_table("nope\n0\t0\t0\n").is_err());
    }
}
