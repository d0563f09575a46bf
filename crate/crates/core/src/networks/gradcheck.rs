//! Central finite-difference validation of analytic gradients.

use super::tape::{Grads, ParamId, ParamStore};
use super::NetworkError;

/// Step size for central differences at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of parameter scalars checked.
    pub n_scalars: usize,
    /// Maximum of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `name[r,c]` of the worst parameter scalar.
    pub worst: Option<String>,
    pub ok: bool,
}

/// Compares the analytic gradient produced by `loss_fn` against central
/// finite differences over every parameter scalar.
///
/// `loss_fn(params, Some(grads))` must return the loss and add its gradient
/// into `grads`; `loss_fn(params, None)` must return the loss only. The
/// relative error is normalized by `max(1, |analytic|, |numeric|)` so the
/// check is absolute for small gradients, where finite differences lose
/// precision, and relative for large ones.
pub fn gradient_check<F>(
    params: &mut ParamStore,
    tolerance: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport, NetworkError>
where
    F: FnMut(&ParamStore, Option<&mut Grads>) -> f64,
{
    let mut grads = Grads::zeros_like(params);
    let base = loss_fn(params, Some(&mut grads));
    if !base.is_finite() {
        return Err(NetworkError::NonFiniteLoss(base));
    }

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut n_scalars = 0;
    for idx in 0..params.len() {
        let id = ParamId(idx);
        let (rows, cols) = params.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                n_scalars += 1;
                let orig = params.get(id)[[r, c]];
                params.get_mut(id)[[r, c]] = orig + FD_STEP;
                let fp = loss_fn(params, None);
                params.get_mut(id)[[r, c]] = orig - FD_STEP;
                let fm = loss_fn(params, None);
                params.get_mut(id)[[r, c]] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(NetworkError::NonFiniteLoss(if fp.is_finite() {
                        fm
                    } else {
                        fp
                    }));
                }
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let analytic = grads.get(id)[[r, c]];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                    worst = Some(format!("{}[{r},{c}]", params.name(id)));
                }
            }
        }
    }
    Ok(GradCheckReport {
        n_scalars,
        max_rel_error: max_rel,
        worst,
        ok: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::tape::Tape;
    use ndarray::Array2;

    #[test]
    fn quadratic_loss_checks_out() {
        let mut store = ParamStore::new();
        let a = store.register(
            "a",
            Array2::from_shape_fn((2, 3), |(r, c)| 0.3 * r as f64 - 0.2 * c as f64 + 0.1),
        );
        let report = gradient_check(&mut store, 1e-8, |p, g| {
            let mut t = Tape::new(p);
            let v = t.param(a);
            let sq = t.square(v);
            let loss = t.sum(sq);
            if let Some(g) = g {
                t.backward(loss, g);
            }
            t.scalar(loss)
        })
        .unwrap();
        assert!(report.ok, "rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.n_scalars, 6);
    }

    #[test]
    fn constant_loss_has_zero_gradient_both_ways() {
        let mut store = ParamStore::new();
        let a = store.register("a", Array2::from_elem((1, 4), 2.0));
        let report = gradient_check(&mut store, 1e-10, |p, g| {
            let mut t = Tape::new(p);
            let v = t.param(a);
            let zero = t.scale(v, 0.0);
            let loss = t.sum(zero);
            if let Some(g) = g {
                t.backward(loss, g);
            }
            t.scalar(loss) + 5.0
        })
        .unwrap();
        assert!(report.ok);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_a_diagnostic_failure() {
        let mut store = ParamStore::new();
        store.register("a", Array2::from_elem((1, 1), 1.0));
        let err = gradient_check(&mut store, 1e-4, |_, _| f64::NAN).unwrap_err();
        assert!(matches!(err, NetworkError::NonFiniteLoss(_)));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let a = store.register("a", Array2::from_elem((1, 2), 1.5));
        let report = gradient_check(&mut store, 1e-4, |p, g| {
            let mut t = Tape::new(p);
            let v = t.param(a);
            let sq = t.square(v);
            let correct = t.sum(sq);
            // Report the gradient of 2x the loss.
            let doubled = t.scale(correct, 2.0);
            if let Some(g) = g {
                t.backward(doubled, g);
            }
            t.scalar(correct)
        })
        .unwrap();
        assert!(!report.ok);
        assert!(report.worst.unwrap().starts_with("a["));
    }
}
