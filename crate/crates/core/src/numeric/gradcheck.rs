use super::graph::{Graph, Mode, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, so round-off on near-zero entries does not dominate the report.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// Relative discrepancy `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`, truncation error `O(h²)`.
    #[default]
    Central,
    /// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`, truncation
    /// error `O(h⁴)`. Twice the evaluations, but a step large enough to keep
    /// round-off small no longer costs accuracy on strongly curved objectives.
    FivePoint,
}

impl std::str::FromStr for Stencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(Stencil::Central),
            "five_point" | "five-point" => Ok(Stencil::FivePoint),
            other => Err(Error::ConfigInvalid(format!("unknown stencil {other:?}"))),
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of
/// every parameter in `params`. Graphs are built in eval mode.
pub fn finite_diff_check<F>(f: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_with_floor(f, params, eps, DEFAULT_REL_FLOOR)
}

pub fn finite_diff_check_with_floor<F>(
    f: F,
    params: &mut ParamStore,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_with(f, params, eps, floor, Stencil::Central)
}

/// [`finite_diff_check_with_floor`] with a choice of difference formula.
pub fn finite_diff_check_with<F>(
    f: F,
    params: &mut ParamStore,
    eps: f64,
    floor: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::ConfigInvalid(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = f(&mut g, params)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(format!("objective returned {v}")));
        }
        Ok(v)
    };

    params.zero_grad();
    let mut g = Graph::new(Mode::Eval, 0);
    let out = f(&mut g, params)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::NonFiniteValue("objective at base point".into()));
    }
    g.backward(out)?.accumulate_into(&g, params);
    drop(g);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).value.numel();
        for i in 0..n {
            let orig = params.get(id).value.data()[i];
            let mut at = |offset: f64| {
                params.get_mut(id).value.data_mut()[i] = orig + offset;
                let v = eval(params);
                params.get_mut(id).value.data_mut()[i] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(eps)? - at(-eps)?) / (2.0 * eps),
                Stencil::FivePoint => {
                    let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
                }
            };
            let analytic = params.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric, floor);
            report.elements += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn square_is_exact_under_central_differences() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let rep = finite_diff_check(
            |g, p| {
                let v = g.param(p, x);
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &mut ps,
            1e-5,
        )
        .unwrap();
        assert!((rep.analytic - 6.0).abs() < 1e-12);
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        // x⁴ at x = 1.5: central differences are off by 4·x·h², five-point
        // differences are exact up to round-off.
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(1.5));
        let quartic = |g: &mut Graph, p: &ParamStore| {
            let v = g.param(p, x);
            let sq = g.mul(v, v)?;
            let q = g.mul(sq, sq)?;
            Ok(g.sum_all(q))
        };
        let h = 1e-2;
        let central =
            finite_diff_check_with(quartic, &mut ps, h, DEFAULT_REL_FLOOR, Stencil::Central)
                .unwrap();
        let five =
            finite_diff_check_with(quartic, &mut ps, h, DEFAULT_REL_FLOOR, Stencil::FivePoint)
                .unwrap();
        assert!(
            (central.numeric - central.analytic - 4.0 * 1.5 * h * h).abs() < 1e-10,
            "{central:?}"
        );
        assert!(five.max_rel_err < 1e-12, "{five:?}");
        assert_eq!(ps.value(x).data()[0], 1.5);
    }

    #[test]
    fn stencil_names_parse() {
        assert_eq!("central".parse::<Stencil>().unwrap(), Stencil::Central);
        assert_eq!("five_point".parse::<Stencil>().unwrap(), Stencil::FivePoint);
        assert!("seven".parse::<Stencil>().is_err());
    }

    #[test]
    fn nan_objective_is_reported() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(1.0));
        let res = finite_diff_check(
            |g, p| {
                let v = g.param(p, x);
                let c = g.constant(Tensor::scalar(f64::NAN));
                let s = g.add(v, c)?;
                Ok(g.sum_all(s))
            },
            &mut ps,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor::scalar(1.0));
        let res = finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &mut ps, 0.0);
        assert!(res.is_err());
    }
}
