//! Safeguarded Newton iteration for scalar roots on a half-open interval `(lower, upper]`.
//!
//! The slope is a central finite difference. Once two iterates of opposite
//! sign have been seen, Newton steps that leave the bracket are replaced by
//! bisection.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOptions {
    /// Stop when `|f(x)| <= tolerance`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Exclusive lower end of the search domain.
    pub lower: f64,
    /// Inclusive upper end of the search domain.
    pub upper: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 100,
            lower: 0.0,
            upper: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootFailure {
    /// Iteration budget exhausted, or the bracket collapsed without meeting the tolerance.
    NoConvergence { last_x: f64, last_fx: f64, iterations: usize },
    /// Newton left the domain with no bracket to fall back on.
    LeftDomain { last_x: f64, last_fx: f64, iterations: usize },
}

/// Finite-difference step for the slope at `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6_f64.max(1e-6 * x.abs())
}

/// Finds a root of `f` starting from `x0`. Errors from `f` are passed through.
pub fn newton_bracketed<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    x0: f64,
    options: &RootOptions,
) -> Result<Result<Root, RootFailure>, E> {
    let mut x = x0.clamp(options.lower + fd_step(options.lower), options.upper);
    // Most recent points with f < 0 and f > 0.
    let mut neg: Option<(f64, f64)> = None;
    let mut pos: Option<(f64, f64)> = None;
    let mut fx = f64::NAN;

    for iter in 0..options.max_iterations {
        fx = f(x)?;
        if !fx.is_finite() {
            return Ok(Err(RootFailure::NoConvergence { last_x: x, last_fx: fx, iterations: iter }));
        }
        if fx.abs() <= options.tolerance {
            return Ok(Ok(Root { x, fx, iterations: iter }));
        }
        if fx < 0.0 {
            neg = Some((x, fx));
        } else {
            pos = Some((x, fx));
        }
        let bracket = match (neg, pos) {
            (Some((a, _)), Some((b, _))) => Some((a.min(b), a.max(b))),
            _ => None,
        };
        if let Some((lo, hi)) = bracket {
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()) {
                return Ok(Err(RootFailure::NoConvergence { last_x: x, last_fx: fx, iterations: iter }));
            }
        }

        let h = fd_step(x);
        let slope = if x - h > options.lower {
            (f(x + h)? - f(x - h)?) / (2.0 * h)
        } else {
            (f(x + h)? - fx) / h
        };
        let newton = x - fx / slope;

        x = match bracket {
            Some((lo, hi)) => {
                if newton.is_finite() && newton > lo && newton < hi {
                    newton
                } else {
                    0.5 * (lo + hi)
                }
            }
            None => {
                if !newton.is_finite() {
                    return Ok(Err(RootFailure::LeftDomain { last_x: x, last_fx: fx, iterations: iter }));
                }
                if newton <= options.lower {
                    // Halve the distance to the lower end instead of stepping out.
                    0.5 * (x + options.lower)
                } else if newton > options.upper {
                    if x >= options.upper {
                        return Ok(Err(RootFailure::LeftDomain { last_x: x, last_fx: fx, iterations: iter }));
                    }
                    options.upper
                } else {
                    newton
                }
            }
        };
        if x - options.lower <= f64::MIN_POSITIVE {
            return Ok(Err(RootFailure::LeftDomain { last_x: x, last_fx: fx, iterations: iter }));
        }
    }
    Ok(Err(RootFailure::NoConvergence {
        last_x: x,
        last_fx: fx,
        iterations: options.max_iterations,
    }))
}

/// Plain bisection on a sign-changing bracket `[lo, hi]`.
pub fn bisect<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    mut lo: f64,
    mut hi: f64,
    options: &RootOptions,
) -> Result<Result<Root, RootFailure>, E> {
    let mut f_lo = f(lo)?;
    let mut mid = lo;
    let mut f_mid = f_lo;
    for iter in 0..(options.max_iterations.max(200)) {
        mid = 0.5 * (lo + hi);
        f_mid = f(mid)?;
        if f_mid.abs() <= options.tolerance {
            return Ok(Ok(Root { x: mid, fx: f_mid, iterations: iter }));
        }
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs() {
            break;
        }
    }
    Ok(Err(RootFailure::NoConvergence { last_x: mid, last_fx: f_mid, iterations: options.max_iterations }))
}
