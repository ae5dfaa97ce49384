//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are treated as this value when forming relative
/// errors, so gradients that are zero up to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(param index, entry index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of every parameter.
pub fn check_gradients<'p, F>(params: &[&Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph<'p>, &[Var]) -> Result<Var>,
{
    check_gradients_at(params, h, None, f)
}

/// Like [`check_gradients`], restricted to the listed `(param, entry)`
/// coordinates when `entries` is given.
pub fn check_gradients_at<'p, F>(
    params: &[&Tensor],
    h: f64,
    entries: Option<&[(usize, usize)]>,
    mut f: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Graph<'p>, &[Var]) -> Result<Var>,
{
    let mut owned: Vec<Tensor> = params.iter().map(|&t| t.clone()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars = bind_copies(&mut g, &owned);
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(&owned)
            .map(|(&v, t)| grads.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };
    let coords: Vec<(usize, usize)> = match entries {
        Some(e) => e.to_vec(),
        None => owned
            .iter()
            .enumerate()
            .filter(|(_, t)| t.requires_grad)
            .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
            .collect(),
    };
    let mut report = GradReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (p, i) in coords {
        if p >= owned.len() || i >= owned[p].len() {
            return Err(Error::Input(format!("gradcheck coordinate ({p}, {i}) out of range")));
        }
        let orig = owned[p].data()[i];
        owned[p].data_mut()[i] = orig + h;
        let up = eval(&owned, &mut f)?;
        owned[p].data_mut()[i] = orig - h;
        let down = eval(&owned, &mut f)?;
        owned[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[p][i];
        let err = rel_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at ({p}, {i})")));
        }
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i, a, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Binds owned copies so the caller's closure may borrow data of any lifetime.
fn bind_copies(g: &mut Graph<'_>, params: &[Tensor]) -> Vec<Var> {
    params.iter().map(|t| g.leaf(t.data().to_vec(), t.rows(), t.cols(), t.requires_grad)).collect()
}

fn eval<'p, F>(params: &[Tensor], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'p>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = bind_copies(&mut g, params);
    let loss = f(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // ln has a correct backward; compare against a hand-broken analytic value.
        assert!(rel_error(1.0, 1.1) > 1e-2);
        assert_eq!(rel_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn cubic_matches() {
        let x = Tensor::new(&[2], vec![0.3, -1.2]).unwrap().trainable();
        let r = check_gradients(&[&x], 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let cu = g.mul(sq, v[0])?;
            Ok(g.sum(cu))
        })
        .unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
