//! Built-in benchmark problems, the external-program adapter and the
//! brute-force expectation oracle.

mod external;
mod functions;
mod oracle;

pub use external::{decode_value, encode_point, ExternalCommand, DEFAULT_TIMEOUT};
pub use functions::{f1, f2, f3, f4};
pub use oracle::{gauss_legendre, true_qoi_oracle, OracleMethod, OracleResult, OracleSpec, MIN_LHS_POINTS};

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, EvalError, Result};
use crate::problem::{BlackBox, Domain, Problem, ReferenceQoi};

pub const BUILTIN_NAMES: [&str; 4] = ["f1", "f2", "f3", "f4"];

const NORMALIZATION_UNKNOWN: &str = "published value, output normalization unknown";

/// Smallest `x₃` the clipped variant of `f3` passes on.
pub const F3_CLIP: f64 = -1.0 + 1e-9;

/// `f3` on a domain reaching below `x₃ = −1`: the third coordinate is clipped
/// and a warning is logged the first time it happens.
struct ClippedF3 {
    warned: AtomicBool,
}

impl BlackBox for ClippedF3 {
    fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        if x[2] < F3_CLIP {
            if !self.warned.swap(true, Ordering::Relaxed) {
                log::warn!("f3: x3 = {} clipped to {F3_CLIP}", x[2]);
            }
            let mut y = x.to_vec();
            y[2] = F3_CLIP;
            return f3(&y);
        }
        f3(x)
    }
}

struct Builtin(fn(&[f64]) -> Result<f64, EvalError>);

impl BlackBox for Builtin {
    fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        (self.0)(x)
    }
}

fn reference(value: f64, provenance: &str) -> Option<ReferenceQoi> {
    Some(ReferenceQoi { value, provenance: provenance.to_string() })
}

/// Evaluates a built-in function by name at a raw point.
pub fn evaluate_builtin(name: &str, x: &[f64]) -> Result<f64> {
    let expected = match name {
        "f1" | "f2" => 1,
        "f3" => 3,
        "f4" => 5,
        other => return Err(Error::Config(format!("unknown problem `{other}`"))),
    };
    if x.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: x.len() });
    }
    let v = match name {
        "f1" => f1(x[0]),
        "f2" => f2(x[0]),
        "f3" => f3(x)?,
        _ => f4(x),
    };
    Ok(v)
}

/// A built-in problem with its default domain and budget.
///
/// `f3` defaults to the unit cube; `wide_f3` selects `[−2,6]³` with clipping.
pub fn builtin(name: &str, wide_f3: bool) -> Result<Problem> {
    let problem = match name {
        "f1" => Problem::new("f1", Arc::new(Builtin(|x| Ok(f1(x[0])))), Domain::unit(1))
            .with_budget(3, 28)
            .with_reference(reference(-1.3599, NORMALIZATION_UNKNOWN)),
        "f2" => Problem::new("f2", Arc::new(Builtin(|x| Ok(f2(x[0])))), Domain::unit(1))
            .with_budget(3, 28)
            .with_reference(reference(2.0, "published value")),
        "f3" if wide_f3 => Problem::new(
            "f3",
            Arc::new(ClippedF3 { warned: AtomicBool::new(false) }),
            Domain::new(vec![(-2.0, 6.0); 3])?,
        )
        .with_budget(2, 32)
        .with_reference(reference(-0.7864, NORMALIZATION_UNKNOWN)),
        "f3" => Problem::new("f3", Arc::new(Builtin(f3)), Domain::unit(3))
            .with_budget(2, 32)
            .with_reference(reference(-0.7864, NORMALIZATION_UNKNOWN)),
        "f4" => Problem::new("f4", Arc::new(Builtin(|x| Ok(f4(x)))), Domain::unit(5))
            .with_budget(20, 65)
            .with_reference(reference(0.3883, NORMALIZATION_UNKNOWN)),
        other => return Err(Error::Config(format!("unknown problem `{other}`"))),
    };
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        let b: Vec<(usize, usize)> = BUILTIN_NAMES
            .iter()
            .map(|n| builtin(n, false).map(|p| (p.n_initial, p.n_max)).unwrap())
            .collect();
        assert_eq!(b, vec![(3, 28), (3, 28), (2, 32), (20, 65)]);
        assert!(builtin("f9", false).is_err());
    }

    #[test]
    fn wide_f3_clips() {
        let p = builtin("f3", true).unwrap();
        let clipped = p.evaluator.evaluate(&[0.0, 0.0, -2.0]).unwrap();
        assert_eq!(clipped, f3(&[0.0, 0.0, F3_CLIP]).unwrap());
        assert!(builtin("f3", false).unwrap().evaluator.evaluate(&[0.0, 0.0, -2.0]).is_err());
    }

    #[test]
    fn evaluate_by_name() {
        assert_eq!(evaluate_builtin("f3", &[0.0, 0.0, 0.0]).unwrap(), 41.0);
        assert!(matches!(evaluate_builtin("f4", &[0.0]), Err(Error::DimensionMismatch { .. })));
    }
}
