//! Single LSTM cell step, built from graph primitives so backpropagation
//! through time inside an unroll window comes from the tape for free.

use crate::error::NumericError;
use crate::graph::{Graph, NodeId};
use crate::real::Real;

/// One LSTM step.
///
/// Gate layout along the 4H axis is (input, forget, candidate, output):
///   gates = W_ih x + W_hh h_prev + b
///   i = sigmoid(g_i), f = sigmoid(g_f), c~ = tanh(g_c), o = sigmoid(g_o)
///   c = f * c_prev + i * c~
///   h = o * tanh(c)
pub fn lstm_step<R: Real>(
    g: &mut Graph<R>,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    b: NodeId,
    hidden: usize,
) -> Result<(NodeId, NodeId), NumericError> {
    let from_x = g.affine(w_ih, x, b)?;
    let from_h = g.matvec(w_hh, h_prev)?;
    let gates = g.add(from_x, from_h)?;
    if g.numel(gates) != 4 * hidden {
        return Err(NumericError::ShapeMismatch {
            expected: format!("gates of length {}", 4 * hidden),
            got: format!("{}", g.numel(gates)),
        });
    }
    let gi = g.slice(gates, 0, hidden)?;
    let gf = g.slice(gates, hidden, hidden)?;
    let gc = g.slice(gates, 2 * hidden, hidden)?;
    let go = g.slice(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(gi);
    let f = g.sigmoid(gf);
    let cand = g.tanh(gc);
    let o = g.sigmoid(go);
    let fc = g.mul(f, c_prev)?;
    let ic = g.mul(i, cand)?;
    let c = g.add(fc, ic)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    #[test]
    fn zero_params_halve_cell_state() {
        // All weights and biases zero: gates sigmoid(0)=0.5, candidate 0,
        // so c_new = 0.5*c_prev and h_new = 0.5*tanh(0.5*c_prev).
        let hidden = 3;
        let params: ParamSet<f64> = ParamSet::new();
        let mut g = Graph::new(&params);
        let w_ih = g.leaf(&[4 * hidden, 2], vec![0.0; 4 * hidden * 2]);
        let w_hh = g.leaf(&[4 * hidden, hidden], vec![0.0; 4 * hidden * hidden]);
        let b = g.leaf(&[4 * hidden], vec![0.0; 4 * hidden]);
        let x = g.leaf(&[2], vec![1.0, -2.0]);
        let h_prev = g.leaf(&[hidden], vec![0.3, -0.5, 0.9]);
        let c_prev_vals = [0.8, -1.2, 0.4];
        let c_prev = g.leaf(&[hidden], c_prev_vals.to_vec());
        let (h, c) = lstm_step(&mut g, x, h_prev, c_prev, w_ih, w_hh, b, hidden).unwrap();
        for j in 0..hidden {
            let expect_c = 0.5 * c_prev_vals[j];
            assert!((g.data(c)[j] - expect_c).abs() < 1e-12);
            let expect_h = 0.5 * (0.5 * c_prev_vals[j]).tanh();
            assert!((g.data(h)[j] - expect_h).abs() < 1e-12);
        }
    }

    #[test]
    fn origin_is_fixed_point() {
        let hidden = 2;
        let params: ParamSet<f64> = ParamSet::new();
        let mut g = Graph::new(&params);
        let w_ih = g.leaf(&[4 * hidden, 2], vec![0.0; 4 * hidden * 2]);
        let w_hh = g.leaf(&[4 * hidden, hidden], vec![0.0; 4 * hidden * hidden]);
        let b = g.leaf(&[4 * hidden], vec![0.0; 4 * hidden]);
        let x = g.zeros(2);
        let h_prev = g.zeros(hidden);
        let c_prev = g.zeros(hidden);
        let (h, c) = lstm_step(&mut g, x, h_prev, c_prev, w_ih, w_hh, b, hidden).unwrap();
        assert!(g.data(h).iter().all(|&v| v == 0.0));
        assert!(g.data(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params: ParamSet<f64> = ParamSet::new();
        let mut g = Graph::new(&params);
        let w_ih = g.leaf(&[8, 2], vec![0.0; 16]);
        let w_hh = g.leaf(&[8, 2], vec![0.0; 16]);
        let b = g.leaf(&[8], vec![0.0; 8]);
        let x = g.leaf(&[3], vec![0.0; 3]); // wrong input width
        let h_prev = g.zeros(2);
        let c_prev = g.zeros(2);
        assert!(lstm_step(&mut g, x, h_prev, c_prev, w_ih, w_hh, b, 2).is_err());
    }
}
