//! Central finite-difference verification of analytic gradients.

use super::{GradError, NodeId, ParamStore, Tape};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter (and flat index) where the worst error occurred.
    pub worst: String,
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences over every component of every parameter.
///
/// `build` must deterministically reconstruct the loss graph for the given
/// parameters. Returns the max over components of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    step: f64,
    build: F,
) -> Result<FdReport, GradError>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId), GradError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (tape, loss) = build(params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(GradError::NonFiniteLoss("<base point>".into()));
    }
    let analytic = tape.backward(loss, params)?;

    let eval = |p: &ParamStore, name: &str| -> Result<f64, GradError> {
        let (t, l) = build(p)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(GradError::NonFiniteLoss(name.to_string()));
        }
        Ok(v)
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let n = params.shape(name).unwrap().len();
        let ga = analytic.get(name).unwrap().to_vec();
        for i in 0..n {
            let fp = eval(&params.with_perturbed(name, i, step)?, name)?;
            let fm = eval(&params.with_perturbed(name, i, -step)?, name)?;
            let num = (fp - fm) / (2.0 * step);
            let rel = (ga[i] - num).abs() / ga[i].abs().max(num.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(FdReport { max_rel_err, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn quadratic_loss_checks_to_rounding() {
        let mut store = ParamStore::new();
        store
            .insert("w", Shape::new(1, 4), vec![0.3, -1.2, 2.0, 0.01])
            .unwrap();
        let report = finite_difference_check(&store, 1e-5, |p| {
            let mut t = Tape::new();
            let w = t.param(p, "w")?;
            let sq = t.mul(w, w)?;
            let loss = t.sum(sq)?;
            Ok((t, loss))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_loss_reports_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Shape::new(1, 1), vec![700.0]).unwrap();
        let res = finite_difference_check(&store, 20.0, |p| {
            let mut t = Tape::new();
            let w = t.param(p, "w")?;
            let e = t.exp(w)?;
            let e2 = t.mul(e, e)?; // overflows to inf near w = 720
            let loss = t.sum(e2)?;
            Ok((t, loss))
        });
        assert!(matches!(res, Err(GradError::NonFiniteLoss(_))));
    }
}
