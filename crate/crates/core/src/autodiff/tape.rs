//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation runs eagerly, storing its result (and whatever context
//! its backward pass needs) as a node. Nodes are appended in topological
//! order, so one reverse sweep over the tape propagates gradients from a
//! scalar objective to every leaf. All arithmetic is f64.

use std::rc::Rc;

use crate::kinematics::{fk_backward, fk_forward, JointPositions, Pose, Skeleton};

/// Lightweight handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

/// Scales the gradients an op kind propagates to its inputs during the
/// reverse sweep. Exists so the gradient checker can prove it detects a
/// broken backward implementation; never set during normal operation.
#[derive(Clone, Debug)]
pub struct BackwardFault {
    pub op_kind: String,
    pub scale: f64,
}

pub(crate) struct GruSaved {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub n: Vec<f64>,
    /// g = h U_n + b_hn, the candidate's recurrent pre-activation.
    pub g: Vec<f64>,
}

pub(crate) enum BnMode {
    /// Normalizes with batch statistics; keeps them for the backward pass
    /// and for running-average updates.
    Train {
        mean: Vec<f64>,
        var: Vec<f64>,
        invstd: Vec<f64>,
    },
    /// Normalizes with the fixed statistics supplied by the caller.
    Eval { invstd: Vec<f64> },
}

pub(crate) enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Dropout { a: usize, mask: Vec<f64> },
    Concat { a: usize, b: usize },
    SliceCols { a: usize, start: usize },
    Conv1d { x: usize, w: usize, bias: usize, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, mode: BnMode },
    Mean { a: usize },
    Sum { a: usize },
    SumSq { a: usize },
    SumAbs { a: usize },
    SumJointNorms { a: usize },
    StackTime { frames: Vec<usize> },
    RowAffine { a: usize, scale: Vec<f64> },
    Fk { pose: usize, skeleton: Rc<Skeleton> },
    MmdImq { x: usize, prior: Vec<f64>, c: f64 },
    GruCell { x: usize, h: usize, weights: [usize; 10], saved: GruSaved },
}

fn op_kind(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Dropout { .. } => "dropout",
        Op::Concat { .. } => "concat",
        Op::SliceCols { .. } => "slice",
        Op::Conv1d { .. } => "conv1d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::SumSq { .. } => "sum_sq",
        Op::SumAbs { .. } => "sum_abs",
        Op::SumJointNorms { .. } => "sum_joint_norms",
        Op::StackTime { .. } => "stack_time",
        Op::RowAffine { .. } => "row_affine",
        Op::Fk { .. } => "fk",
        Op::MmdImq { .. } => "mmd",
        Op::GruCell { .. } => "gru_cell",
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    /// Empty until the reverse sweep touches this node.
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pub fault: Option<BackwardFault>,
}

/// out += a (m x k) * b (k x n)
fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (m x n) * b^T, b stored (k x n); out is m x k.
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T * b, a stored (m x k), b (m x n); out is k x n.
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fold an out-of-range index back into [0, n) by edge-excluding reflection
/// (... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize) - 2;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Output length of a strided window sweep that rounds up: every input
/// position is covered even when the last window spills past the padded
/// end (the spill is filled by continued reflection).
pub fn conv1d_output_len(input_len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let span = input_len + 2 * pad;
    assert!(span >= kernel, "conv input too short: {input_len} + 2*{pad} < {kernel}");
    (span - kernel).div_ceil(stride) + 1
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Gradient accumulated by the last `backward`; `None` when the reverse
    /// sweep never reached this node (a true zero gradient).
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        let g = &self.nodes[t.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "leaf data does not match shape {shape:?}"
        );
        self.push(shape.to_vec(), value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], Op::Leaf)
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        assert_eq!(self.nodes[t.0].value.len(), 1, "not a scalar");
        self.nodes[t.0].value[0]
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants 2-d inputs");
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        assert_eq!(k, k2, "matmul inner dims: {sa:?} x {sb:?}");
        let mut value = vec![0.0; m * n];
        mm_nn_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut value, m, k, n);
        self.push(vec![m, n], value, Op::Matmul { a: a.0, b: b.0 })
    }

    fn zip_op(&mut self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64, op: Op) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.zip_op(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.zip_op(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.zip_op(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a length-n bias vector to every row of an (m x n) tensor.
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Tensor {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "add_bias wants a 2-d input");
        assert_eq!(self.shape(bias), &[sa[1]], "bias must match columns");
        let n = sa[1];
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[bias.0].value[i % n])
            .collect();
        self.push(sa, value, Op::AddBias { a: a.0, bias: bias.0 })
    }

    fn map_op(&mut self, a: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.map_op(a, |x| x * c, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.map_op(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.map_op(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.map_op(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.map_op(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        self.map_op(
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            Op::LeakyRelu { a: a.0, slope },
        )
    }

    /// Inverted dropout: kept elements are scaled by 1/(1-rate) so the
    /// expectation is unchanged. Identity when not training or rate is 0.
    pub fn dropout(
        &mut self,
        a: Tensor,
        rate: f64,
        train: bool,
        rng: &mut impl rand::Rng,
    ) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if !train || rate == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Dropout { a: a.0, mask })
    }

    /// Concatenates two 2-d tensors along columns.
    pub fn concat(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat wants matching rows");
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut value = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            value.extend_from_slice(&self.nodes[a.0].value[i * p..(i + 1) * p]);
            value.extend_from_slice(&self.nodes[b.0].value[i * q..(i + 1) * q]);
        }
        self.push(vec![m, p + q], value, Op::Concat { a: a.0, b: b.0 })
    }

    /// Takes columns [start, start+len) of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Tensor {
        let sa = self.shape(a).to_vec();
        assert!(sa.len() == 2 && start + len <= sa[1], "slice out of range");
        let (m, n) = (sa[0], sa[1]);
        let mut value = Vec::with_capacity(m * len);
        for i in 0..m {
            value.extend_from_slice(&self.nodes[a.0].value[i * n + start..i * n + start + len]);
        }
        self.push(vec![m, len], value, Op::SliceCols { a: a.0, start })
    }

    /// 1-d convolution over (batch, channels, length) with reflection
    /// padding. The output length rounds up, so a trailing partial window
    /// is evaluated by extending the reflection.
    pub fn conv1d(&mut self, x: Tensor, w: Tensor, bias: Tensor, stride: usize, pad: usize) -> Tensor {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 3 && sw.len() == 3, "conv1d wants (b,c,l) input and (o,c,k) weight");
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let (o, cw, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(c, cw, "conv1d channel mismatch");
        assert_eq!(self.shape(bias), &[o], "conv1d bias must have one value per filter");
        assert!(stride >= 1);
        assert!(pad == 0 || l >= 2, "reflection padding needs length >= 2");
        let lout = conv1d_output_len(l, k, stride, pad);
        let mut value = vec![0.0; b * o * lout];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[bias.0].value;
        for bi in 0..b {
            for oi in 0..o {
                for t in 0..lout {
                    let mut acc = bv[oi];
                    for ci in 0..c {
                        let xrow = &xv[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                        let wrow = &wv[(oi * c + ci) * k..(oi * c + ci + 1) * k];
                        for (kk, &wval) in wrow.iter().enumerate() {
                            let src = (t * stride + kk) as isize - pad as isize;
                            acc += wval * xrow[reflect_index(src, l)];
                        }
                    }
                    value[(bi * o + oi) * lout + t] = acc;
                }
            }
        }
        self.push(
            vec![b, o, lout],
            value,
            Op::Conv1d { x: x.0, w: w.0, bias: bias.0, stride, pad },
        )
    }

    /// Per-channel batch normalization of a (batch, channels, length)
    /// tensor using the batch's own statistics (biased variance).
    pub fn batch_norm_train(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Tensor {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "batch_norm wants (b,c,l)");
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let n = (b * l) as f64;
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    mean[ci] += xv[(bi * c + ci) * l + t];
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    let d = xv[(bi * c + ci) * l + t] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut value = vec![0.0; xv.len()];
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    let idx = (bi * c + ci) * l + t;
                    let h = (xv[idx] - mean[ci]) * invstd[ci];
                    xhat[idx] = h;
                    value[idx] = gv[ci] * h + bv[ci];
                }
            }
        }
        self.push(
            sx,
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                mode: BnMode::Train { mean, var, invstd },
            },
        )
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Tensor {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "batch_norm wants (b,c,l)");
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        assert!(running_mean.len() == c && running_var.len() == c);
        let invstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut value = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    let idx = (bi * c + ci) * l + t;
                    let h = (xv[idx] - running_mean[ci]) * invstd[ci];
                    xhat[idx] = h;
                    value[idx] = gv[ci] * h + bv[ci];
                }
            }
        }
        self.push(
            sx,
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                mode: BnMode::Eval { invstd },
            },
        )
    }

    /// Batch statistics a training-mode batch-norm node computed, for
    /// updating running averages.
    pub fn batch_norm_stats(&self, t: Tensor) -> (&[f64], &[f64]) {
        match &self.nodes[t.0].op {
            Op::BatchNorm { mode: BnMode::Train { mean, var, .. }, .. } => (mean, var),
            _ => panic!("not a training-mode batch_norm node"),
        }
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean { a: a.0 })
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.iter().sum::<f64>();
        self.push(vec![1], vec![s], Op::Sum { a: a.0 })
    }

    pub fn sum_sq(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.iter().map(|&x| x * x).sum::<f64>();
        self.push(vec![1], vec![s], Op::SumSq { a: a.0 })
    }

    pub fn sum_abs(&mut self, a: Tensor) -> Tensor {
        let s = self.nodes[a.0].value.iter().map(|&x| x.abs()).sum::<f64>();
        self.push(vec![1], vec![s], Op::SumAbs { a: a.0 })
    }

    /// Sum of Euclidean norms of consecutive 3-component groups along the
    /// last dimension, over all rows: sum_b sum_j |x[b, 3j..3j+3]|.
    pub fn sum_joint_norms(&mut self, a: Tensor) -> Tensor {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "sum_joint_norms wants a 2-d input");
        assert_eq!(sa[1] % 3, 0, "columns must group into threes");
        let s = self.nodes[a.0]
            .value
            .chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .sum::<f64>();
        self.push(vec![1], vec![s], Op::SumJointNorms { a: a.0 })
    }

    /// Stacks T frame tensors of shape (b, d) into (b, d, T), giving the
    /// channels-first layout convolutions expect.
    pub fn stack_time(&mut self, frames: &[Tensor]) -> Tensor {
        assert!(!frames.is_empty());
        let s0 = self.shape(frames[0]).to_vec();
        assert_eq!(s0.len(), 2);
        let (b, d, t_len) = (s0[0], s0[1], frames.len());
        for f in frames {
            assert_eq!(self.shape(*f), &s0[..], "stack_time frames must share a shape");
        }
        let mut value = vec![0.0; b * d * t_len];
        for (t, f) in frames.iter().enumerate() {
            let fv = &self.nodes[f.0].value;
            for bi in 0..b {
                for di in 0..d {
                    value[(bi * d + di) * t_len + t] = fv[bi * d + di];
                }
            }
        }
        self.push(
            vec![b, d, t_len],
            value,
            Op::StackTime { frames: frames.iter().map(|f| f.0).collect() },
        )
    }

    /// Per-column affine map y = x * scale + shift applied to every row.
    /// scale and shift are constants (no gradient flows into them).
    pub fn row_affine(&mut self, a: Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "row_affine wants a 2-d input");
        let n = sa[1];
        assert!(scale.len() == n && shift.len() == n);
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scale[i % n] + shift[i % n])
            .collect();
        self.push(sa, value, Op::RowAffine { a: a.0, scale: scale.to_vec() })
    }

    /// Forward kinematics of each row of a (batch, 3*joints) pose tensor;
    /// rows of world-space joint positions come back in the same layout.
    pub fn fk(&mut self, pose: Tensor, skeleton: &Rc<Skeleton>) -> Tensor {
        let sp = self.shape(pose).to_vec();
        assert_eq!(sp.len(), 2, "fk wants a 2-d input");
        assert_eq!(sp[1], skeleton.dim(), "pose width must be 3 * joints");
        let dim = sp[1];
        let mut value = Vec::with_capacity(self.nodes[pose.0].value.len());
        for row in self.nodes[pose.0].value.chunks_exact(dim) {
            value.extend(fk_forward(skeleton, &Pose::from_flat(row)).to_flat());
        }
        self.push(sp, value, Op::Fk { pose: pose.0, skeleton: Rc::clone(skeleton) })
    }

    /// Unbiased kernel two-sample statistic between the rows of `x` and a
    /// fixed prior sample, with the inverse multiquadric kernel
    /// k(a, b) = c / (c + |a - b|^2). Both samples need at least two rows.
    pub fn mmd_imq(&mut self, x: Tensor, prior: &[f64], c: f64) -> Tensor {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "mmd wants a 2-d input");
        let (n, d) = (sx[0], sx[1]);
        assert_eq!(prior.len() % d, 0, "prior width must match x");
        let m = prior.len() / d;
        assert!(n >= 2 && m >= 2, "unbiased mmd needs at least two rows per sample");
        assert!(c > 0.0);
        let xv = &self.nodes[x.0].value;
        let kernel = |a: &[f64], b: &[f64]| {
            let mut dist = 0.0;
            for (p, q) in a.iter().zip(b) {
                dist += (p - q) * (p - q);
            }
            c / (c + dist)
        };
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += kernel(&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += kernel(&prior[i * d..(i + 1) * d], &prior[j * d..(j + 1) * d]);
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..m {
                xy += kernel(&xv[i * d..(i + 1) * d], &prior[j * d..(j + 1) * d]);
            }
        }
        let value = xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64
            - 2.0 * xy / (n * m) as f64;
        self.push(vec![1], vec![value], Op::MmdImq { x: x.0, prior: prior.to_vec(), c })
    }

    /// Gated recurrent unit step. See `gru.rs` for the exact equations.
    pub(crate) fn gru_cell_op(&mut self, x: Tensor, h: Tensor, weights: [Tensor; 10]) -> Tensor {
        let (sx, sh) = (self.shape(x).to_vec(), self.shape(h).to_vec());
        assert!(sx.len() == 2 && sh.len() == 2 && sx[0] == sh[0], "gru_cell batch mismatch");
        let (b, din, dh) = (sx[0], sx[1], sh[1]);
        let w_ids = weights.map(|t| t.0);
        for (i, wid) in w_ids.iter().enumerate() {
            let want: &[usize] = match i {
                0..=2 => &[din, dh],
                3..=5 => &[dh, dh],
                _ => &[dh],
            };
            assert_eq!(&self.nodes[*wid].shape[..], want, "gru weight {i} has the wrong shape");
        }
        let xv = &self.nodes[x.0].value;
        let hv = &self.nodes[h.0].value;
        let wv = |i: usize| -> &[f64] { &self.nodes[w_ids[i]].value };

        // Gate pre-activations; biases broadcast over the batch.
        let bcast = |bias: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; b * dh];
            for row in out.chunks_exact_mut(dh) {
                row.copy_from_slice(bias);
            }
            out
        };
        let mut pre_r = bcast(wv(6));
        mm_nn_acc(xv, wv(0), &mut pre_r, b, din, dh);
        mm_nn_acc(hv, wv(3), &mut pre_r, b, dh, dh);
        let r: Vec<f64> = pre_r.iter().map(|&v| sigmoid(v)).collect();

        let mut pre_u = bcast(wv(7));
        mm_nn_acc(xv, wv(1), &mut pre_u, b, din, dh);
        mm_nn_acc(hv, wv(4), &mut pre_u, b, dh, dh);
        let u: Vec<f64> = pre_u.iter().map(|&v| sigmoid(v)).collect();

        let mut g = bcast(wv(9));
        mm_nn_acc(hv, wv(5), &mut g, b, dh, dh);

        let mut pre_n = bcast(wv(8));
        mm_nn_acc(xv, wv(2), &mut pre_n, b, din, dh);
        for i in 0..b * dh {
            pre_n[i] += r[i] * g[i];
        }
        let n: Vec<f64> = pre_n.iter().map(|&v| v.tanh()).collect();

        // h' = (1 - u) n + u h, written as n + u (h - n).
        let value: Vec<f64> = (0..b * dh).map(|i| n[i] + u[i] * (hv[i] - n[i])).collect();
        self.push(
            vec![b, dh],
            value,
            Op::GruCell { x: x.0, h: h.0, weights: w_ids, saved: GruSaved { r, u, n, g } },
        )
    }

    fn ensure_grad(nodes: &mut [Node], idx: usize) {
        if nodes[idx].grad.is_empty() {
            let len = nodes[idx].value.len();
            nodes[idx].grad = vec![0.0; len];
        }
    }

    /// Reverse sweep seeding d(root)/d(root) = 1. The root must be scalar.
    /// Gradients accumulate; nodes the sweep never reaches keep no buffer.
    pub fn backward(&mut self, root: Tensor) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward wants a scalar root");
        Self::ensure_grad(&mut self.nodes, root.0);
        self.nodes[root.0].grad[0] += 1.0;
        let fault = self.fault.clone();

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_empty() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let mut g: Vec<f64> = node.grad.clone();
            if let Some(f) = &fault {
                if f.op_kind == op_kind(&node.op) {
                    for v in &mut g {
                        *v *= f.scale;
                    }
                }
            }
            backprop(before, node, &g);
        }
    }
}

/// Propagates `g` (the node's output gradient) into the node's inputs,
/// which all live in `before` (strictly earlier on the tape).
fn backprop(before: &mut [Node], node: &Node, g: &[f64]) {
    let ensure = Tape::ensure_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = before[*a].shape[1];
            ensure(before, *a);
            ensure(before, *b);
            // dA += g B^T; dB += A^T g. Copy operand values to appease the
            // borrow checker (a and b may alias the same node).
            let bval = before[*b].value.clone();
            let aval = before[*a].value.clone();
            mm_nt_acc(g, &bval, &mut before[*a].grad, m, n, k);
            mm_tn_acc(&aval, g, &mut before[*b].grad, m, k, n);
        }
        Op::Add { a, b } => {
            for (t, sign) in [(a, 1.0), (b, 1.0)] {
                ensure(before, *t);
                for (o, &gv) in before[*t].grad.iter_mut().zip(g) {
                    *o += sign * gv;
                }
            }
        }
        Op::Sub { a, b } => {
            for (t, sign) in [(a, 1.0), (b, -1.0)] {
                ensure(before, *t);
                for (o, &gv) in before[*t].grad.iter_mut().zip(g) {
                    *o += sign * gv;
                }
            }
        }
        Op::Mul { a, b } => {
            ensure(before, *a);
            ensure(before, *b);
            let bval = before[*b].value.clone();
            let aval = before[*a].value.clone();
            for i in 0..g.len() {
                before[*a].grad[i] += g[i] * bval[i];
                before[*b].grad[i] += g[i] * aval[i];
            }
        }
        Op::AddBias { a, bias } => {
            ensure(before, *a);
            ensure(before, *bias);
            for (o, &gv) in before[*a].grad.iter_mut().zip(g) {
                *o += gv;
            }
            let n = before[*bias].grad.len();
            for (i, &gv) in g.iter().enumerate() {
                before[*bias].grad[i % n] += gv;
            }
        }
        Op::Scale { a, c } => {
            ensure(before, *a);
            for (o, &gv) in before[*a].grad.iter_mut().zip(g) {
                *o += c * gv;
            }
        }
        Op::AddScalar { a } => {
            ensure(before, *a);
            for (o, &gv) in before[*a].grad.iter_mut().zip(g) {
                *o += gv;
            }
        }
        Op::Tanh { a } => {
            ensure(before, *a);
            for i in 0..g.len() {
                let y = node.value[i];
                before[*a].grad[i] += g[i] * (1.0 - y * y);
            }
        }
        Op::Sigmoid { a } => {
            ensure(before, *a);
            for i in 0..g.len() {
                let y = node.value[i];
                before[*a].grad[i] += g[i] * y * (1.0 - y);
            }
        }
        Op::Relu { a } => {
            ensure(before, *a);
            for i in 0..g.len() {
                if before[*a].value[i] > 0.0 {
                    before[*a].grad[i] += g[i];
                }
            }
        }
        Op::LeakyRelu { a, slope } => {
            ensure(before, *a);
            for i in 0..g.len() {
                let d = if before[*a].value[i] >= 0.0 { 1.0 } else { *slope };
                before[*a].grad[i] += g[i] * d;
            }
        }
        Op::Dropout { a, mask } => {
            ensure(before, *a);
            for i in 0..g.len() {
                before[*a].grad[i] += g[i] * mask[i];
            }
        }
        Op::Concat { a, b } => {
            let m = node.shape[0];
            let p = before[*a].shape[1];
            let q = before[*b].shape[1];
            ensure(before, *a);
            ensure(before, *b);
            for i in 0..m {
                for j in 0..p {
                    before[*a].grad[i * p + j] += g[i * (p + q) + j];
                }
                for j in 0..q {
                    before[*b].grad[i * q + j] += g[i * (p + q) + p + j];
                }
            }
        }
        Op::SliceCols { a, start } => {
            let m = node.shape[0];
            let len = node.shape[1];
            let n = before[*a].shape[1];
            ensure(before, *a);
            for i in 0..m {
                for j in 0..len {
                    before[*a].grad[i * n + start + j] += g[i * len + j];
                }
            }
        }
        Op::Conv1d { x, w, bias, stride, pad } => {
            let (b, o, lout) = (node.shape[0], node.shape[1], node.shape[2]);
            let (c, l) = (before[*x].shape[1], before[*x].shape[2]);
            let k = before[*w].shape[2];
            ensure(before, *x);
            ensure(before, *w);
            ensure(before, *bias);
            let xval = before[*x].value.clone();
            let wval = before[*w].value.clone();
            for bi in 0..b {
                for oi in 0..o {
                    for t in 0..lout {
                        let gv = g[(bi * o + oi) * lout + t];
                        if gv == 0.0 {
                            continue;
                        }
                        before[*bias].grad[oi] += gv;
                        for ci in 0..c {
                            for kk in 0..k {
                                let src = (t * stride + kk) as isize - *pad as isize;
                                let si = reflect_index(src, l);
                                let xi = (bi * c + ci) * l + si;
                                let wi = (oi * c + ci) * k + kk;
                                before[*w].grad[wi] += gv * xval[xi];
                                before[*x].grad[xi] += gv * wval[wi];
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, mode } => {
            let (b, c, l) = (node.shape[0], node.shape[1], node.shape[2]);
            let n = (b * l) as f64;
            ensure(before, *x);
            ensure(before, *gamma);
            ensure(before, *beta);
            let gval = before[*gamma].value.clone();
            // dgamma = sum g*xhat, dbeta = sum g (both per channel).
            for bi in 0..b {
                for ci in 0..c {
                    for t in 0..l {
                        let idx = (bi * c + ci) * l + t;
                        before[*gamma].grad[ci] += g[idx] * xhat[idx];
                        before[*beta].grad[ci] += g[idx];
                    }
                }
            }
            match mode {
                BnMode::Train { invstd, .. } => {
                    // dx = invstd/N * (N dxh - sum dxh - xhat * sum dxh*xhat)
                    for ci in 0..c {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xhat = 0.0;
                        for bi in 0..b {
                            for t in 0..l {
                                let idx = (bi * c + ci) * l + t;
                                let dxh = g[idx] * gval[ci];
                                sum_dxh += dxh;
                                sum_dxh_xhat += dxh * xhat[idx];
                            }
                        }
                        for bi in 0..b {
                            for t in 0..l {
                                let idx = (bi * c + ci) * l + t;
                                let dxh = g[idx] * gval[ci];
                                before[*x].grad[idx] += invstd[ci] / n
                                    * (n * dxh - sum_dxh - xhat[idx] * sum_dxh_xhat);
                            }
                        }
                    }
                }
                BnMode::Eval { invstd } => {
                    for bi in 0..b {
                        for ci in 0..c {
                            for t in 0..l {
                                let idx = (bi * c + ci) * l + t;
                                before[*x].grad[idx] += g[idx] * gval[ci] * invstd[ci];
                            }
                        }
                    }
                }
            }
        }
        Op::Mean { a } => {
            ensure(before, *a);
            let n = before[*a].grad.len() as f64;
            for o in before[*a].grad.iter_mut() {
                *o += g[0] / n;
            }
        }
        Op::Sum { a } => {
            ensure(before, *a);
            for o in before[*a].grad.iter_mut() {
                *o += g[0];
            }
        }
        Op::SumSq { a } => {
            ensure(before, *a);
            for i in 0..before[*a].grad.len() {
                before[*a].grad[i] += g[0] * 2.0 * before[*a].value[i];
            }
        }
        Op::SumAbs { a } => {
            ensure(before, *a);
            for i in 0..before[*a].grad.len() {
                let x = before[*a].value[i];
                // Subgradient 0 at the kink.
                before[*a].grad[i] += g[0] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }
        Op::SumJointNorms { a } => {
            ensure(before, *a);
            let vals = before[*a].value.clone();
            for (chunk_idx, chunk) in vals.chunks_exact(3).enumerate() {
                let nrm = (chunk[0] * chunk[0] + chunk[1] * chunk[1] + chunk[2] * chunk[2]).sqrt();
                if nrm == 0.0 {
                    continue; // subgradient 0 at the cone tip
                }
                for k in 0..3 {
                    before[*a].grad[chunk_idx * 3 + k] += g[0] * chunk[k] / nrm;
                }
            }
        }
        Op::StackTime { frames } => {
            let (b, d, t_len) = (node.shape[0], node.shape[1], node.shape[2]);
            for (t, f) in frames.iter().enumerate() {
                ensure(before, *f);
                for bi in 0..b {
                    for di in 0..d {
                        before[*f].grad[bi * d + di] += g[(bi * d + di) * t_len + t];
                    }
                }
            }
        }
        Op::RowAffine { a, scale } => {
            ensure(before, *a);
            let n = scale.len();
            for (i, &gv) in g.iter().enumerate() {
                before[*a].grad[i] += gv * scale[i % n];
            }
        }
        Op::Fk { pose, skeleton } => {
            ensure(before, *pose);
            let dim = skeleton.dim();
            let poses = before[*pose].value.clone();
            for (ri, (row, grow)) in poses.chunks_exact(dim).zip(g.chunks_exact(dim)).enumerate() {
                let grads = fk_backward(
                    skeleton,
                    &Pose::from_flat(row),
                    &JointPositions::from_flat(grow),
                );
                for (j, gj) in grads.iter().enumerate() {
                    for k in 0..3 {
                        before[*pose].grad[ri * dim + 3 * j + k] += gj[k];
                    }
                }
            }
        }
        Op::MmdImq { x, prior, c } => {
            let (n, d) = (before[*x].shape[0], before[*x].shape[1]);
            let m = prior.len() / d;
            ensure(before, *x);
            let xv = before[*x].value.clone();
            let g0 = g[0];
            // dk(a,b)/da = -2c (a-b) / (c + |a-b|^2)^2
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (xi, xj) = (&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                    let mut dist = 0.0;
                    for (p, q) in xi.iter().zip(xj) {
                        dist += (p - q) * (p - q);
                    }
                    let denom = (c + dist) * (c + dist);
                    // Both ordered pairs (i,j), (j,i) differentiate to the
                    // same x_i term, hence the factor 2.
                    let w = g0 * 2.0 / (n * (n - 1)) as f64 * (-2.0 * c / denom);
                    for k in 0..d {
                        before[*x].grad[i * d + k] += w * (xi[k] - xj[k]);
                    }
                }
                for j in 0..m {
                    let (xi, yj) = (&xv[i * d..(i + 1) * d], &prior[j * d..(j + 1) * d]);
                    let mut dist = 0.0;
                    for (p, q) in xi.iter().zip(yj) {
                        dist += (p - q) * (p - q);
                    }
                    let denom = (c + dist) * (c + dist);
                    let w = g0 * (-2.0) / (n * m) as f64 * (-2.0 * c / denom);
                    for k in 0..d {
                        before[*x].grad[i * d + k] += w * (xi[k] - yj[k]);
                    }
                }
            }
        }
        Op::GruCell { x, h, weights, saved } => {
            let (b, dh) = (node.shape[0], node.shape[1]);
            let din = before[*x].shape[1];
            let [w_r, w_u, w_n, u_r, u_u, u_n, b_r, b_u, b_in, b_hn] = *weights;
            for id in [*x, *h, w_r, w_u, w_n, u_r, u_u, u_n, b_r, b_u, b_in, b_hn] {
                ensure(before, id);
            }
            let xv = before[*x].value.clone();
            let hv = before[*h].value.clone();
            let sz = b * dh;
            let (r, u, nn, gg) = (&saved.r, &saved.u, &saved.n, &saved.g);

            let mut d_pre_n = vec![0.0; sz];
            let mut d_pre_u = vec![0.0; sz];
            let mut d_pre_r = vec![0.0; sz];
            let mut d_g = vec![0.0; sz];
            for i in 0..sz {
                // h' = n + u (h - n)
                let dn = g[i] * (1.0 - u[i]);
                let du = g[i] * (hv[i] - nn[i]);
                before[*h].grad[i] += g[i] * u[i];
                d_pre_n[i] = dn * (1.0 - nn[i] * nn[i]);
                d_pre_u[i] = du * u[i] * (1.0 - u[i]);
                let dr = d_pre_n[i] * gg[i];
                d_g[i] = d_pre_n[i] * r[i];
                d_pre_r[i] = dr * r[i] * (1.0 - r[i]);
            }

            // Candidate: pre_n = x W_n + r*g + b_in, g = h U_n + b_hn.
            mm_tn_acc(&xv, &d_pre_n, &mut before[w_n].grad, b, din, dh);
            {
                let wv = before[w_n].value.clone();
                mm_nt_acc(&d_pre_n, &wv, &mut before[*x].grad, b, dh, din);
            }
            for i in 0..sz {
                before[b_in].grad[i % dh] += d_pre_n[i];
                before[b_hn].grad[i % dh] += d_g[i];
            }
            mm_tn_acc(&hv, &d_g, &mut before[u_n].grad, b, dh, dh);
            {
                let uv = before[u_n].value.clone();
                mm_nt_acc(&d_g, &uv, &mut before[*h].grad, b, dh, dh);
            }

            // Gates: pre = x W + h U + b.
            for (d_pre, w_id, u_id, b_id) in
                [(&d_pre_u, w_u, u_u, b_u), (&d_pre_r, w_r, u_r, b_r)]
            {
                mm_tn_acc(&xv, d_pre, &mut before[w_id].grad, b, din, dh);
                mm_tn_acc(&hv, d_pre, &mut before[u_id].grad, b, dh, dh);
                {
                    let wv = before[w_id].value.clone();
                    mm_nt_acc(d_pre, &wv, &mut before[*x].grad, b, dh, din);
                }
                {
                    let uv = before[u_id].value.clone();
                    mm_nt_acc(d_pre, &uv, &mut before[*h].grad, b, dh, dh);
                }
                for i in 0..sz {
                    before[b_id].grad[i % dh] += d_pre[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Finite-difference check of d(scalar)/d(leaf) for a graph builder.
    /// The builder must be deterministic in the leaf values.
    fn fd_check(
        leaf_shapes: &[&[usize]],
        build: impl Fn(&mut Tape, &[Tensor]) -> Tensor,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let datas: Vec<Vec<f64>> = leaf_shapes
            .iter()
            .map(|s| randv(&mut rng, s.iter().product()))
            .collect();
        let eval = |datas: &[Vec<f64>]| -> (f64, Vec<Option<Vec<f64>>>) {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = leaf_shapes
                .iter()
                .zip(datas)
                .map(|(s, d)| tape.leaf(s, d.clone()))
                .collect();
            let out = build(&mut tape, &leaves);
            assert_eq!(tape.value(out).len(), 1, "fd_check wants a scalar output");
            let v = tape.value(out)[0];
            tape.backward(out);
            let grads = leaves
                .iter()
                .map(|l| tape.grad(*l).map(|g| g.to_vec()))
                .collect();
            (v, grads)
        };
        let (_, grads) = eval(&datas);
        let h = 1e-6;
        for (li, data) in datas.iter().enumerate() {
            for i in 0..data.len() {
                let mut dp = datas.clone();
                dp[li][i] += h;
                let mut dm = datas.clone();
                dm[li][i] -= h;
                let fd = (eval(&dp).0 - eval(&dm).0) / (2.0 * h);
                let an = grads[li].as_ref().map_or(0.0, |g| g[i]);
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} elem {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_bias_chain_matches_fd() {
        fd_check(
            &[&[3, 4], &[4, 2], &[2]],
            |t, l| {
                let y = t.matmul(l[0], l[1]);
                let y = t.add_bias(y, l[2]);
                let y = t.tanh(y);
                t.sum_sq(y)
            },
            1,
            1e-7,
        );
    }

    #[test]
    fn elementwise_ops_match_fd() {
        fd_check(
            &[&[2, 5], &[2, 5]],
            |t, l| {
                let s = t.add(l[0], l[1]);
                let d = t.sub(l[0], l[1]);
                let m = t.mul(s, d);
                let m = t.sigmoid(m);
                let m = t.scale(m, 3.5);
                let m = t.add_scalar(m, -0.25);
                t.sum(m)
            },
            2,
            1e-7,
        );
    }

    #[test]
    fn relu_family_matches_fd() {
        // Shift values away from the kink so finite differences are clean.
        fd_check(
            &[&[4, 3]],
            |t, l| {
                let x = t.add_scalar(l[0], 0.05);
                let a = t.relu(x);
                let b = t.leaky_relu(x, 0.2);
                let s = t.add(a, b);
                t.mean(s)
            },
            3,
            1e-6,
        );
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.leaf(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = tape.concat(a, b);
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = tape.slice_cols(c, 2, 3);
        assert_eq!(tape.value(back), tape.value(b));
        fd_check(
            &[&[2, 2], &[2, 3]],
            |t, l| {
                let c = t.concat(l[0], l[1]);
                let s = t.slice_cols(c, 1, 3);
                let s = t.tanh(s);
                t.sum_sq(s)
            },
            4,
            1e-7,
        );
    }

    #[test]
    fn reflection_padding_folds_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn conv_output_lengths_round_up() {
        // Stride-2 k=4 pad=1 halves the length, rounding up.
        assert_eq!(conv1d_output_len(150, 4, 2, 1), 75);
        assert_eq!(conv1d_output_len(75, 4, 2, 1), 38);
        assert_eq!(conv1d_output_len(38, 4, 2, 1), 19);
        assert_eq!(conv1d_output_len(19, 1, 1, 0), 19);
        assert_eq!(conv1d_output_len(8, 4, 2, 1), 4);
        assert_eq!(conv1d_output_len(4, 4, 2, 1), 2);
        assert_eq!(conv1d_output_len(2, 4, 2, 1), 1);
        assert_eq!(conv1d_output_len(1, 1, 1, 0), 1);
    }

    /// Plain oracle: materialize the reflected input (long enough for the
    /// rounded-up window count), then convolve without any index games.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        bias: &[f64],
        (b, c, l): (usize, usize, usize),
        (o, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let lout = conv1d_output_len(l, k, stride, pad);
        let padded_len = (lout - 1) * stride + k;
        let mut out = vec![0.0; b * o * lout];
        for bi in 0..b {
            for oi in 0..o {
                for t in 0..lout {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        let row = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                        let padded: Vec<f64> = (0..padded_len)
                            .map(|p| row[reflect_index(p as isize - pad as isize, l)])
                            .collect();
                        for kk in 0..k {
                            acc += w[(oi * c + ci) * k + kk] * padded[t * stride + kk];
                        }
                    }
                    out[(bi * o + oi) * lout + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv1d_matches_materialized_padding_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(b, c, l, o, k, stride, pad) in
            &[(2, 3, 9, 4, 4, 2, 1), (1, 2, 5, 3, 3, 1, 1), (2, 1, 8, 2, 4, 2, 1), (1, 3, 7, 2, 1, 1, 0)]
        {
            let x = randv(&mut rng, b * c * l);
            let w = randv(&mut rng, o * c * k);
            let bias = randv(&mut rng, o);
            let mut tape = Tape::new();
            let xt = tape.leaf(&[b, c, l], x.clone());
            let wt = tape.leaf(&[o, c, k], w.clone());
            let bt = tape.leaf(&[o], bias.clone());
            let y = tape.conv1d(xt, wt, bt, stride, pad);
            let oracle = conv_oracle(&x, &w, &bias, (b, c, l), (o, k), stride, pad);
            assert_eq!(tape.value(y).len(), oracle.len());
            for (a, b) in tape.value(y).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_matches_fd() {
        fd_check(
            &[&[2, 2, 6], &[3, 2, 4], &[3]],
            |t, l| {
                let y = t.conv1d(l[0], l[1], l[2], 2, 1);
                let y = t.leaky_relu(y, 0.2);
                t.sum_sq(y)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn batch_norm_train_normalizes_and_matches_fd() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gamma = tape.leaf(&[1], vec![1.0]);
        let beta = tape.leaf(&[1], vec![0.0]);
        let y = tape.batch_norm_train(x, gamma, beta, 1e-5);
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 6.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps keeps it slightly under 1
        let (m, vr) = tape.batch_norm_stats(y);
        assert!((m[0] - 3.5).abs() < 1e-12);
        assert!((vr[0] - 35.0 / 12.0).abs() < 1e-12);

        fd_check(
            &[&[2, 3, 4], &[3], &[3]],
            |t, l| {
                let y = t.batch_norm_train(l[0], l[1], l[2], 1e-5);
                let y = t.tanh(y);
                t.sum_sq(y)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn batch_norm_eval_uses_fixed_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = tape.leaf(&[2], vec![2.0, 1.0]);
        let beta = tape.leaf(&[2], vec![0.5, -0.5]);
        let y = tape.batch_norm_eval(x, gamma, beta, 0.0, &[1.0, 3.0], &[4.0, 1.0]);
        let v = tape.value(y);
        // channel 0: 2*(x-1)/2 + 0.5; channel 1: (x-3)/1 - 0.5
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 1.5).abs() < 1e-12);
        assert!((v[2] + 0.5).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-12);

        fd_check(
            &[&[2, 2, 3], &[2], &[2]],
            |t, l| {
                let y = t.batch_norm_eval(l[0], l[1], l[2], 1e-5, &[0.2, -0.1], &[1.5, 0.7]);
                t.sum_sq(y)
            },
            8,
            1e-6,
        );
    }

    #[test]
    fn reductions_by_hand() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 3], vec![1.0, -2.0, 2.0, 0.0, 3.0, -1.0]);
        let (m, s, ss, sa) = (tape.mean(x), tape.sum(x), tape.sum_sq(x), tape.sum_abs(x));
        assert_eq!(tape.scalar_value(m), 0.5);
        assert_eq!(tape.scalar_value(s), 3.0);
        assert_eq!(tape.scalar_value(ss), 19.0);
        assert_eq!(tape.scalar_value(sa), 9.0);
        // Rows group as (1,-2,2) and (0,3,-1): norms 3 and sqrt(10).
        let jn = tape.sum_joint_norms(x);
        assert!((tape.scalar_value(jn) - (3.0 + 10.0_f64.sqrt())).abs() < 1e-12);

        fd_check(
            &[&[2, 6]],
            |t, l| {
                let a = t.sum_joint_norms(l[0]);
                let b = t.sum_abs(l[0]);
                let c = t.mean(l[0]);
                let ab = t.add(a, b);
                t.add(ab, c)
            },
            9,
            1e-6,
        );
    }

    #[test]
    fn stack_time_layout_and_grads() {
        let mut tape = Tape::new();
        let f0 = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let f1 = tape.leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let s = tape.stack_time(&[f0, f1]);
        assert_eq!(tape.shape(s), &[2, 2, 2]);
        // (b, d, t): batch 0 channel 0 holds (1, 5), channel 1 holds (2, 6).
        assert_eq!(tape.value(s), &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
        fd_check(
            &[&[2, 3], &[2, 3], &[2, 3]],
            |t, l| {
                let s = t.stack_time(&[l[0], l[1], l[2]]);
                let s = t.tanh(s);
                t.sum_sq(s)
            },
            10,
            1e-7,
        );
    }

    #[test]
    fn row_affine_applies_per_column_and_matches_fd() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.row_affine(x, &[2.0, -1.0], &[10.0, 0.5]);
        assert_eq!(tape.value(y), &[12.0, -1.5, 16.0, -3.5]);
        fd_check(
            &[&[3, 4]],
            |t, l| {
                let y = t.row_affine(l[0], &[0.5, 2.0, -1.0, 3.0], &[0.1, 0.2, 0.3, 0.4]);
                let y = t.sigmoid(y);
                t.sum(y)
            },
            11,
            1e-7,
        );
    }

    #[test]
    fn dropout_scales_and_is_deterministic_per_stream() {
        let mut t1 = Tape::new();
        let x1 = t1.leaf(&[10, 10], vec![1.0; 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y1 = t1.dropout(x1, 0.3, true, &mut rng);
        let mut t2 = Tape::new();
        let x2 = t2.leaf(&[10, 10], vec![1.0; 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y2 = t2.dropout(x2, 0.3, true, &mut rng);
        assert_eq!(t1.value(y1), t2.value(y2));
        for &v in t1.value(y1) {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15);
        }
        // Eval mode is the identity (same node comes back).
        let mut t3 = Tape::new();
        let x3 = t3.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y3 = t3.dropout(x3, 0.3, false, &mut rng);
        assert_eq!(x3, y3);
    }

    #[test]
    fn fk_op_matches_module_functions_and_fd() {
        use crate::kinematics::Skeleton;
        let skel = Rc::new(Skeleton::chain(4, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pose_rows = randv(&mut rng, 2 * 12);
        let mut tape = Tape::new();
        let p = tape.leaf(&[2, 12], pose_rows.clone());
        let y = tape.fk(p, &skel);
        for (row_in, row_out) in pose_rows.chunks_exact(12).zip(tape.value(y).chunks_exact(12)) {
            let direct = fk_forward(&skel, &Pose::from_flat(row_in)).to_flat();
            assert_eq!(row_out, &direct[..]);
        }
        let skel2 = Rc::clone(&skel);
        fd_check(
            &[&[2, 12]],
            move |t, l| {
                let y = t.fk(l[0], &skel2);
                t.sum_joint_norms(y)
            },
            13,
            1e-5,
        );
    }

    #[test]
    fn mmd_degenerate_pairs_by_hand() {
        // Two identical x rows vs two identical prior rows:
        // xx = yy = k(a,a) = 1, xy = k(a,b), so mmd = 2 - 2 k(a,b).
        let c = 8.0;
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let prior = vec![0.0, 2.0, 0.0, 2.0];
        let y = tape.mmd_imq(x, &prior, c);
        let dist = 1.0 + 4.0;
        let want = 2.0 - 2.0 * c / (c + dist);
        assert!((tape.scalar_value(y) - want).abs() < 1e-15);

        // Identical samples cancel exactly.
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let y = tape.mmd_imq(x, &[1.0, 0.0, 1.0, 0.0], c);
        assert_eq!(tape.scalar_value(y), 0.0);
    }

    #[test]
    fn mmd_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let prior = randv(&mut rng, 5 * 3);
        fd_check(
            &[&[4, 3]],
            move |t, l| t.mmd_imq(l[0], &prior, 6.0),
            15,
            1e-6,
        );
    }

    #[test]
    fn grad_accumulates_over_shared_subexpressions() {
        // y = x*x summed twice along different paths: dy/dx = 4x.
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2], vec![3.0, -2.0]);
        let sq = tape.mul(x, x);
        let a = tape.sum(sq);
        let b = tape.sum(sq);
        let y = tape.add(a, b);
        tape.backward(y);
        assert_eq!(tape.grad(x).unwrap(), &[12.0, -8.0]);
    }

    #[test]
    fn untouched_leaves_report_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 2], vec![1.0, 2.0]);
        let unused = tape.leaf(&[1, 2], vec![3.0, 4.0]);
        let y = tape.sum_sq(x);
        tape.backward(y);
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn backward_fault_perturbs_matching_ops_only() {
        let run = |fault: Option<BackwardFault>| -> Vec<f64> {
            let mut tape = Tape::new();
            tape.fault = fault;
            let x = tape.leaf(&[2, 2], vec![0.3, -0.4, 0.5, 0.1]);
            let y = tape.tanh(x);
            let s = tape.sum_sq(y);
            tape.backward(s);
            tape.grad(x).unwrap().to_vec()
        };
        let clean = run(None);
        let faulty = run(Some(BackwardFault { op_kind: "tanh".into(), scale: 1.5 }));
        let unrelated = run(Some(BackwardFault { op_kind: "conv1d".into(), scale: 1.5 }));
        assert_eq!(clean, unrelated);
        for (c, f) in clean.iter().zip(&faulty) {
            assert!((f - 1.5 * c).abs() < 1e-12);
        }
    }
}
