//! Central finite-difference check of tape gradients.

use serde::Serialize;

use super::{Graph, NumericsError, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Denominator floor, so coordinates with near-zero gradient are judged on absolute error.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn f32_default() -> Self {
        Self { h: 1e-3, tol: 1e-2, floor: 1e-1 }
    }

    pub fn f64_default() -> Self {
        Self { h: 1e-5, tol: 1e-5, floor: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offender {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub dtype: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Offender>,
    /// Relative error per coordinate, one vector per parameter.
    pub rel_errors: Vec<Vec<f64>>,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of scalar `f` against central differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must be
/// deterministic. Every coordinate of every parameter is perturbed.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], cfg: GradCheckConfig) -> Result<GradCheckReport, NumericsError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, NumericsError>,
{
    if cfg.h <= 0.0 {
        return Err(NumericsError::InvalidHyper { what: "finite-difference step must be positive" });
    }
    let eval = |ps: &[Tensor<T>], track: bool| -> Result<(T, Option<Vec<Vec<T>>>), NumericsError> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.requires_grad = track;
                g.leaf(t)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        if !track {
            let v = g.value(out);
            if v.numel() != 1 {
                return Err(NumericsError::NonScalarLoss { shape: v.shape().to_vec() });
            }
            return Ok((v.item(), None));
        }
        let mut grads = g.backward(out)?;
        let gs = vars
            .iter()
            .map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default())
            .collect();
        Ok((grads.loss(), Some(gs)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("tracked evaluation returns gradients");
    let h = T::of(cfg.h);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut rel_errors = Vec::with_capacity(params.len());
    let mut worst: Option<Offender> = None;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let mut errs = Vec::with_capacity(p.numel());
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[pi].data_mut()[i] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[pi].data_mut()[i] = orig;
            // Divide by the step actually taken after rounding to T.
            let span = ((orig + h) - (orig - h)).as_f64();
            let numeric = (fp.as_f64() - fm.as_f64()) / span;
            let a = analytic[pi].get(i).map_or(0.0, |v| v.as_f64());
            let e = rel_error(a, numeric, cfg.floor);
            if worst.as_ref().is_none_or(|w| e > w.rel_error) {
                worst = Some(Offender { param: pi, index: i, analytic: a, numeric, rel_error: e });
            }
            errs.push(e);
            checked += 1;
        }
        rel_errors.push(errs);
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        dtype: T::NAME,
        checked,
        max_rel_error,
        worst,
        rel_errors,
        tol: cfg.tol,
        passed: max_rel_error < cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let x = Tensor::<f64>::new(&[1], vec![2.0]).unwrap();
        let rep = grad_check(|g, v| g.mul(v[0], v[0]), &[x], GradCheckConfig::f64_default()).unwrap();
        let w = rep.worst.unwrap();
        assert_eq!(w.analytic, 4.0);
        assert!((w.numeric - 4.0).abs() < 1e-9);
        assert!(rep.passed);
    }

    #[test]
    fn reports_worst_offender_for_wrong_gradient() {
        // relu has a kink at 0; a central difference straddling it reads 0.5.
        let x = Tensor::<f64>::new(&[2], vec![0.0, 1.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let r = g.relu(v[0])?;
                g.sum(r)
            },
            &[x],
            GradCheckConfig::f64_default(),
        )
        .unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst.unwrap().index, 0);
        assert_eq!(rep.rel_errors[0].len(), 2);
    }
}
