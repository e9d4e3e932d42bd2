use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Analytic gradients at or below this are summation round-off of an
/// exactly flat direction.
pub const ROUNDOFF: f64 = 1e-12;

/// Steps of the two-point fallbacks, relative to `eps`.
const NARROW: [f64; 1] = [1e-2];

/// Disagreement between successive estimates that signals a kink (ReLU, max)
/// inside the wider stencil; the narrower estimate is used then.
const KINK_TOL: f64 = 1e-5;

/// Round-off allowance of the narrow estimate.
const KINK_FLOOR: f64 = 1e-7;

/// Outcome for one input element.
#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// False when no gradient reaches the element (argmax branches, dead
    /// units) and the finite difference agrees it is flat.
    pub checked: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn unchecked(&self) -> usize {
        self.elements.iter().filter(|e| !e.checked).count()
    }

    pub fn checked(&self) -> usize {
        self.elements.len() - self.unchecked()
    }

    pub fn worst(&self) -> Option<&ElementCheck> {
        self.elements
            .iter()
            .filter(|e| e.checked)
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, tol)
}

/// Compares reverse-mode gradients of the scalar function `f` against the
/// fourth-order central difference
/// `(8 (f(x+eps) - f(x-eps)) - (f(x+2eps) - f(x-2eps))) / (12 eps)` for
/// every element of every input, falling back to a two-point difference
/// with step `eps / 100` when a kink lies inside the wide stencil. Mismatches are reported, not raised.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(g);

    let mut values = inputs.to_vec();
    let mut elements = Vec::new();
    for (input, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            let orig = values[input].data()[index];
            let mut at = |k: f64| -> Result<f64> {
                values[input].data_mut()[index] = orig + T::lit(k * eps);
                evaluate(&values)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            let mut numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            for step in NARROW {
                let (p, m) = (at(step)?, at(-step)?);
                let narrow = (p - m) / (2.0 * step * eps);
                let smooth = (numeric - narrow).abs() <= KINK_TOL * numeric.abs().max(narrow.abs()) + KINK_FLOOR;
                if smooth {
                    break;
                }
                numeric = narrow;
            }
            values[input].data_mut()[index] = orig;

            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            let flat = a.abs() <= ROUNDOFF && numeric.abs() <= DENOMINATOR_FLOOR;
            elements.push(ElementCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_err: if flat { 0.0 } else { rel_err },
                checked: !flat,
            });
        }
    }
    let max_rel_err = elements
        .iter()
        .map(|e| e.rel_err)
        .fold(0.0, |m: f64, e| if e.is_nan() { f64::INFINITY } else { m.max(e) });
    Ok(GradCheckReport {
        elements,
        max_rel_err,
        tol,
    })
}
