//! Central finite-difference checks for the analytic adjoints.

use crate::Real;

/// Entries whose analytic and numeric magnitudes both fall below this are
/// compared absolutely rather than relatively.
pub const GRAD_FLOOR: Real = 1e-6;

/// Relative-error threshold the gradient suites are gated on.
#[cfg(not(feature = "single"))]
pub const GRAD_TOL: Real = 1e-4;
#[cfg(feature = "single")]
pub const GRAD_TOL: Real = 1e-2;

#[cfg(not(feature = "single"))]
const STEP: Real = 1e-4;
#[cfg(feature = "single")]
const STEP: Real = 1e-2;

/// Step-h and step-h/2 estimates further apart than this mark a kink.
#[cfg(not(feature = "single"))]
const KINK_TOL: Real = 1e-6;
#[cfg(feature = "single")]
const KINK_TOL: Real = 1e-2;

pub fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdReport {
    pub max_rel: Real,
    pub max_abs: Real,
    pub checked: usize,
    /// Coordinates left out because the function is not smooth there.
    pub skipped: usize,
}

impl FdReport {
    pub fn merge(&mut self, other: &FdReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel <= tol && self.checked > 0
    }
}

/// Fourth-order central difference.
fn central(x: &mut [Real], i: usize, h: Real, f: &impl Fn(&[Real]) -> Real) -> Real {
    let orig = x[i];
    let mut at = |d: Real| {
        x[i] = orig + d;
        f(x)
    };
    let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
    x[i] = orig;
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Compare `analytic` against central differences of `f` at `x`, every coordinate.
pub fn fd_check(x: &[Real], analytic: &[Real], f: impl Fn(&[Real]) -> Real) -> FdReport {
    let all: Vec<usize> = (0..x.len()).collect();
    fd_check_subset(x, analytic, &all, false, f)
}

/// Compare on the coordinates in `indices`. With `skip_kinks`, a coordinate
/// whose step-h and step-h/2 differences disagree is treated as sitting on a
/// non-smooth point (ReLU or max-pool switch) and skipped.
pub fn fd_check_subset(
    x: &[Real],
    analytic: &[Real],
    indices: &[usize],
    skip_kinks: bool,
    f: impl Fn(&[Real]) -> Real,
) -> FdReport {
    assert_eq!(x.len(), analytic.len());
    let mut buf = x.to_vec();
    let mut report = FdReport::default();
    for &i in indices {
        let h = STEP * x[i].abs().max(1.0);
        let numeric = central(&mut buf, i, h, &f);
        if skip_kinks {
            let half = central(&mut buf, i, h / 2.0, &f);
            if rel_err(numeric, half) > KINK_TOL {
                report.skipped += 1;
                continue;
            }
        }
        report.max_rel = report.max_rel.max(rel_err(analytic[i], numeric));
        report.max_abs = report.max_abs.max((analytic[i] - numeric).abs());
        report.checked += 1;
    }
    report
}
