//! Independent reference evaluations used by unit tests.

use crate::params::{ParamId, ParamSet};

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain scalar-loop LSTM step over row-major weights, gate order i, f, g, o.
pub fn scalar_lstm(
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    h: &[f64],
    c: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let n = x.len();
    let mut z = vec![0.0; 4 * d];
    for r in 0..4 * d {
        let mut acc = b[r];
        for k in 0..n {
            acc += wx[r * n + k] * x[k];
        }
        for k in 0..d {
            acc += wh[r * d + k] * h[k];
        }
        z[r] = acc;
    }
    let mut nh = vec![0.0; d];
    let mut nc = vec![0.0; d];
    for k in 0..d {
        let i = sigmoid_ref(z[k]);
        let f = sigmoid_ref(z[d + k]);
        let g = z[2 * d + k].tanh();
        let o = sigmoid_ref(z[3 * d + k]);
        nc[k] = f * c[k] + i * g;
        nh[k] = o * nc[k].tanh();
    }
    (nh, nc)
}

/// Central differences of `f` with respect to every entry of one array.
pub fn finite_difference(
    set: &ParamSet,
    id: ParamId,
    eps: f64,
    f: impl Fn(&ParamSet) -> f64,
) -> Vec<f64> {
    let mut work = set.clone();
    (0..set.get(id).len())
        .map(|k| {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = f(&work);
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = f(&work);
            work.get_mut(id).data_mut()[k] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rtol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale < 1e-8 {
            continue;
        }
        assert!(
            (a - n).abs() / scale <= rtol,
            "entry {k}: analytic {a} vs numeric {n}"
        );
    }
}
