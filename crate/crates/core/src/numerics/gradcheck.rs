//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{Matrix, ParameterStore};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs() + numeric.abs())
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} = {value}")))
    }
}

/// Checks the gradient of a scalar function of one matrix input.
///
/// `f` receives a fresh graph and the input variable and must return a
/// `[1, 1]` node. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
pub fn gradient_check<F>(f: F, point: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let eval = |m: &Matrix| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(m.clone());
        let out = f(&mut g, x)?;
        finite(g.scalar(out), "function value")
    };

    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = f(&mut g, x)?;
    finite(g.scalar(out), "function value")?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(point.dim()));

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let plus = eval(&probe)?;
        probe[[r, c]] = orig - eps;
        let minus = eval(&probe)?;
        probe[[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = finite(analytic[[r, c]], "analytic gradient")?;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Same check, over every scalar of every parameter in `store`.
///
/// `f` builds the scalar loss on a graph bound to the store it is given.
pub fn gradient_check_params<F>(store: &ParameterStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        finite(g.scalar(out), "function value")
    };

    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    finite(g.scalar(out), "function value")?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Matrix> = store
        .iter()
        .map(|(_, _, m)| Matrix::zeros(m.dim()))
        .collect();
    for (id, grad) in grads.params() {
        analytic[id.index()] = grad.clone();
    }

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let cols = store.get(id).ncols();
        for idx in 0..store.get(id).len() {
            let (r, c) = (idx / cols, idx % cols);
            let orig = store.get(id)[[r, c]];
            probe.get_mut(id)[[r, c]] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id)[[r, c]] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = finite(analytic[id.index()][[r, c]], "analytic gradient")?;
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let err = gradient_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &array![[3.0]],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = Matrix::from_shape_simple_fn((1, 5), || rng.random_range(-2.0..2.0));
        let err = gradient_check(
            |g, x| g.cross_entropy(x, &[2], &[1.0]),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_op_passes_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_m = |r, c| Matrix::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        let w = rand_m(3, 4);
        let row = rand_m(1, 4);
        let other = rand_m(2, 4);
        let col = rand_m(2, 1);
        let mask = array![[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 1.0]];
        let point = rand_m(2, 3);
        let err = gradient_check(
            |g, x| {
                let w = g.constant(w.clone());
                let row = g.input(row.clone());
                let other = g.constant(other.clone());
                let col = g.constant(col.clone());
                let h = g.matmul(x, w)?;
                let h = g.add_row(h, row)?;
                let t = g.tanh(h);
                let s = g.sigmoid(h);
                let r = g.relu(h);
                let p = g.mul(t, s)?;
                let p = g.sub(p, r)?;
                let p = g.maximum(p, t)?;
                let p = g.mul_col(p, col)?;
                let q = g.masked_softmax(h, &mask)?;
                let q2 = g.softmax(p);
                let m = g.mean(&[q, q2, other])?;
                let cat = g.concat_cols(&[m, p])?;
                let a = g.slice_cols(cat, 2, 6)?;
                let a = g.one_minus(a);
                let rows = g.concat_rows(&[a, m])?;
                let mx = g.max_rows(rows);
                let mr = g.mean_rows(rows);
                let both = g.concat_rows(&[mx, mr])?;
                let sl = g.slice_rows(rows, 1, 3)?;
                let wts = g.slice_cols(q2, 0, 2)?;
                let ws = g.weighted_sum(wts, &[sl, a])?;
                let ws = g.scale(ws, 1.7);
                let ws = g.mul_const(ws, Matrix::from_elem((2, 4), 0.5))?;
                let sel = g.select_rows(&[true, false], ws, both)?;
                let ce = g.cross_entropy(sel, &[1, 3], &[1.0, 0.5])?;
                let s2 = g.sum(sel);
                g.add(ce, s2)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_gradients_touch_only_used_rows() {
        let table = array![[0.3, -0.2], [0.5, 0.1], [-0.4, 0.9]];
        let err = gradient_check(
            |g, t| {
                let e = g.gather(t, &[2, 2, 0])?;
                let m = g.gather_mean(t, &[vec![0, 2], vec![2]])?;
                let e = g.tanh(e);
                let s = g.sum(e);
                let m = g.sum(m);
                g.add(s, m)
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);

        let mut g = Graph::new();
        let t = g.input(table.clone());
        let e = g.gather(t, &[0]).unwrap();
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        let gt = grads.wrt(t).unwrap();
        assert!(gt.row(1).iter().chain(gt.row(2).iter()).all(|&v| v == 0.0));
        assert!(gt.row(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let err = gradient_check(
            |g, x| {
                let big = g.scale(x, f64::INFINITY);
                Ok(g.sum(big))
            },
            &array![[1.0]],
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(gradient_check(|g, x| Ok(g.sum(x)), &array![[1.0]], 0.0).is_err());
    }
}
