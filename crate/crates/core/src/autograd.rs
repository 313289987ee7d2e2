//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! copied in from a [`ParamStore`] and, after [`Graph::backward`], their
//! gradients are *added* to the store's accumulators; zeroing is left to the
//! optimizer. Frozen parameters enter the graph as constants, so no gradient
//! work is spent on them.
//!
//! Shape mismatches are contract violations and panic with both shapes in the
//! message, the same way out-of-bounds indexing does.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::optim::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, rot90_source, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    ClampMin(Var, T),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Rot90 {
        x: Var,
        k: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ToPatches(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Rot90 { .. } => "rot90",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Pick { .. } => "pick",
            Op::SelectRows { .. } => "select_rows",
            Op::ToPatches(..) => "to_patches",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()))
    }
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates. `var` is the unbiased estimate.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Column matrix `[C·KH·KW, B·OH·OW]` of a whole batch, sample-major
/// within each row.
fn batch_im2col<T: Scalar>(x: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let sample = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); rows * batch * cols];
    for b in 0..batch {
        kernels::im2col(&x[b * sample..(b + 1) * sample], g, &mut col, batch * cols, b * cols);
    }
    col
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) {
    assert!(a == b, "shape mismatch in {op}: {a:?} vs {b:?}");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A free leaf whose gradient can be read back with [`Graph::gradients`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Copies a parameter into the graph. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), !p.frozen, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Index and op name of the first node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    // ----- elementwise -------------------------------------------------

    fn broadcast_binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let da = self.value(a).data();
        let db = self.value(b).data();
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_vec(&sa, data);
        }
        let out = kernels::broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("shape mismatch in {name}: {sa:?} vs {sb:?}"));
        let stra = kernels::broadcast_strides(&sa, &out);
        let strb = kernels::broadcast_strides(&sb, &out);
        let mut data = vec![T::zero(); numel(&out)];
        kernels::for_each_broadcast(&out, &stra, &strb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::from_vec(&out, data)
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, "div", |x, y| x / y);
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    /// `max(a, c)`; the gradient passes where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| if x > c { x } else { c });
        self.push(t, Op::ClampMin(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.push(t, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sqrt());
        self.push(t, Op::Sqrt(a), &[a])
    }

    // ----- linear algebra ----------------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "shape mismatch in matmul: {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects a matrix, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_vec(&[c, r], out), Op::Transpose(a), &[a])
    }

    /// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1],
            "shape mismatch in conv2d: {sx:?} vs {sw:?}"
        );
        assert!(stride >= 1, "conv2d stride must be positive");
        let g = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        assert!(
            sx[2] + 2 * pad >= sw[2] && sx[3] + 2 * pad >= sw[3],
            "shape mismatch in conv2d: kernel {sw:?} larger than padded input {sx:?}"
        );
        let (batch, out_c) = (sx[0], sw[0]);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let col = batch_im2col(xd, &g, batch);
        let mut wide = vec![T::zero(); out_c * batch * cols];
        kernels::matmul_nn(wd, &col, &mut wide, out_c, rows, batch * cols, false);
        let mut out = vec![T::zero(); batch * out_c * cols];
        for o in 0..out_c {
            for b in 0..batch {
                out[(b * out_c + o) * cols..(b * out_c + o + 1) * cols]
                    .copy_from_slice(&wide[(o * batch + b) * cols..(o * batch + b + 1) * cols]);
            }
        }
        let t = Tensor::from_vec(&[batch, out_c, g.out_h(), g.out_w()], out);
        self.push(t, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    // ----- normalization / pooling ---------------------------------------

    /// Training-mode batch norm over `(B, H, W)` per channel of `[B, C, H, W]`
    /// (or over `B` for `[B, C]`), using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 4 || s.len() == 2, "batch_norm expects [B,C,H,W] or [B,C], got {s:?}");
        let c = s[1];
        check_same("batch_norm gamma", self.shape(gamma), &[c]);
        check_same("batch_norm beta", self.shape(beta), &[c]);
        let (batch, spatial) = (s[0], if s.len() == 4 { s[2] * s[3] } else { 1 });
        let m = batch * spatial;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..batch {
                let off = (b * c + ch) * spatial;
                acc += xd[off..off + spatial].iter().copied().sum::<T>();
            }
            mean[ch] = acc / lit(m as f64);
            let mut acc = T::zero();
            for b in 0..batch {
                let off = (b * c + ch) * spatial;
                acc += xd[off..off + spatial].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
            var[ch] = acc / lit(m as f64);
        }
        let eps_t: T = lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let unbiased: T = if m > 1 { lit(m as f64 / (m - 1) as f64) } else { T::one() };
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let t = Tensor::from_vec(&s, out);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 4 || s.len() == 2, "batch_norm expects [B,C,H,W] or [B,C], got {s:?}");
        let c = s[1];
        check_same("batch_norm gamma", self.shape(gamma), &[c]);
        check_same("batch_norm beta", self.shape(beta), &[c]);
        assert!(running_mean.len() == c && running_var.len() == c, "running statistics size");
        let spatial = if s.len() == 4 { s[2] * s[3] } else { 1 };
        let eps_t: T = lit(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *o = gd[ch] * (xd[i] - running_mean[ch]) * inv_std[ch] + bd[ch];
        }
        let t = Tensor::from_vec(&s, out);
        self.push(
            t,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 4 && s[2] >= 2 && s[3] >= 2, "max_pool2 expects [B,C,H>=2,W>=2], got {s:?}");
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &c in &cands[1..] {
                        if xd[c] > xd[best] {
                            best = c;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], oh, ow], out);
        self.push(t, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `[B, C, H, W] → [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects [B,C,H,W], got {s:?}");
        let spatial = s[2] * s[3];
        let inv: T = lit(1.0 / spatial as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::from_vec(&[s[0], s[1]], out), Op::GlobalAvgPool(x), &[x])
    }

    // ----- reductions / reshaping ----------------------------------------

    /// Sums over `axis`. With `keepdim` the axis is kept with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Var {
        let s = self.shape(x).to_vec();
        assert!(axis < s.len(), "sum_axis: axis {axis} out of range for {s:?}");
        let (outer, dim, inner) = kernels::axis_split(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = s.clone();
        if keepdim || s.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        self.push(Tensor::from_vec(&shape, out), Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis, keepdim);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, lit(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            assert!(same_rest, "shape mismatch in concat: {first:?} vs {s:?}");
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Counter-clockwise rotation of the trailing two axes by `k` × 90°.
    pub fn rot90(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x).rot90(k);
        self.push(t, Op::Rot90 { x, k: k % 4 }, &[x])
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = softmax_along(self.value(x), axis, false);
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = softmax_along(self.value(x), axis, true);
        self.push(t, Op::LogSoftmax { x, axis }, &[x])
    }

    /// `out[i] = x[i, idx[i]]` for `x: [n, k]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && s[0] == idx.len(), "shape mismatch in pick: {s:?} vs [{}]", idx.len());
        let xd = self.value(x).data();
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < s[1], "pick index {j} out of range for {s:?}");
                xd[i * s[1] + j]
            })
            .collect();
        self.push(
            Tensor::from_vec(&[idx.len()], out),
            Op::Pick { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Gathers rows (first-axis slices) in the given order; repeats allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert!(!idx.is_empty(), "select_rows with no indices");
        let width = numel(&s[1..]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &r in idx {
            assert!(r < s[0], "select_rows index {r} out of range for {s:?}");
            out.extend_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::SelectRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// `[B, C, H, W] → [B·H·W, C]`: one row per spatial position, ordered by
    /// sample, then row, then column.
    pub fn to_patches(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "to_patches expects [B,C,H,W], got {s:?}");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = xd[(bi * c + ci) * hw + p];
                }
            }
        }
        self.push(Tensor::from_vec(&[b * hw, c], out), Op::ToPatches(x), &[x])
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Accumulates d(loss)/d(param) into `store` for every unfrozen parameter
    /// used in the graph. Calling twice adds the gradients twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                if node.requires_grad {
                    store.accumulate_grad(id, g);
                }
            }
        }
        // Unfrozen parameters that feed the graph but sit on no path to the
        // loss still get an (all-zero) gradient.
        for node in &self.nodes {
            if let Some(id) = node.param {
                if node.requires_grad && store.get(id).grad.is_none() {
                    store.accumulate_grad(id, &vec![T::zero(); node.value.numel()]);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.broadcast_backward(*a, *b, out_shape, grads, |o, _, _| (g[o], sign * g[o]));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.broadcast_backward(*a, *b, out_shape, grads, |o, ia, ib| (g[o] * bd[ib], g[o] * ad[ia]));
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.broadcast_backward(*a, *b, out_shape, grads, |o, ia, ib| {
                    let inv = T::one() / bd[ib];
                    (g[o] * inv, -g[o] * ad[ia] * inv * inv)
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_map(*a, grads, |k| g[k] * c);
            }
            Op::AddScalar(a) => self.accumulate_map(*a, grads, |k| g[k]),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate_map(*a, grads, |k| if x[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::ClampMin(a, c) => {
                let x = self.value(*a).data();
                let c = *c;
                self.accumulate_map(*a, grads, |k| if x[k] > c { g[k] } else { T::zero() });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate_map(*a, grads, |k| g[k] * y[k]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate_map(*a, grads, |k| g[k] / x[k]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two: T = lit(2.0);
                self.accumulate_map(*a, grads, |k| two * g[k] * x[k]);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let half: T = lit(0.5);
                self.accumulate_map(*a, grads, |k| half * g[k] / y[k]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt(g, self.value(*b).data(), &mut ga, m, n, k, false);
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn(self.value(*a).data(), g, &mut gb, k, m, n, false);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_backward(*x, *w, *stride, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (batch, c) = (s[0], s[1]);
                let spatial = if s.len() == 4 { s[2] * s[3] } else { 1 };
                let m: T = lit((batch * spatial) as f64);
                let gd = self.value(*gamma).data();
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for k in off..off + spatial {
                            dbeta[ch] += g[k];
                            dgamma[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let coef = gd[ch] * inv_std[ch] / m;
                            for k in off..off + spatial {
                                dx[k] = coef * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &dbeta);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let spatial = if s.len() == 4 { s[2] * s[3] } else { 1 };
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for k in 0..g.len() {
                    let ch = (k / spatial) % c;
                    dbeta[ch] += g[k];
                    dgamma[ch] += g[k] * (xd[k] - mean[ch]) * inv_std[ch];
                    dx[k] = g[k] * gd[ch] * inv_std[ch];
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &dbeta);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src] += g[k];
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let spatial = s[2] * s[3];
                let inv: T = lit(1.0 / spatial as f64);
                self.accumulate_map(*x, grads, |k| g[k / spatial] * inv);
            }
            Op::SumAxis { x, axis } => {
                let (_, dim, inner) = kernels::axis_split(self.shape(*x), *axis);
                self.accumulate_map(*x, grads, |k| {
                    let o = k / (dim * inner);
                    let r = k % inner;
                    g[o * inner + r]
                });
            }
            Op::SumAll(x) => self.accumulate_map(*x, grads, |_| g[0]),
            Op::Reshape(x) => self.accumulate_map(*x, grads, |k| g[k]),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out_shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gv.extend_from_slice(&g[base..base + d * inner]);
                        }
                        accumulate(grads, v, &gv);
                    }
                    start += d;
                }
            }
            Op::Rot90 { x, k } => {
                let s = self.shape(*x);
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let (oh, ow) = (out_shape[r - 2], out_shape[r - 1]);
                let mut dx = vec![T::zero(); g.len()];
                for p in 0..g.len() / (h * w) {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[p * h * w + rot90_source(*k, h, w, i, j)] += g[p * oh * ow + i * ow + j];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = kernels::axis_split(out_shape, *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + r;
                        let dotp: T = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            dx[at(d)] = y[at(d)] * (g[at(d)] - dotp);
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &dx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = kernels::axis_split(out_shape, *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + r;
                        let gsum: T = (0..dim).map(|d| g[at(d)]).sum();
                        for d in 0..dim {
                            dx[at(d)] = g[at(d)] - y[at(d)].exp() * gsum;
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Pick { x, idx } => {
                if self.wants(*x) {
                    let k = self.shape(*x)[1];
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * k + j] += g[i];
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::SelectRows { x, idx } => {
                if self.wants(*x) {
                    let width = numel(&self.shape(*x)[1..]);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(&g[i * width..(i + 1) * width]) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::ToPatches(x) => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                self.accumulate_map(*x, grads, |k| {
                    let p = k % hw;
                    let ci = (k / hw) % c;
                    let bi = k / (hw * c);
                    g[(bi * hw + p) * c + ci]
                });
            }
        }
    }

    fn accumulate_map(&self, v: Var, grads: &mut [Option<Vec<T>>], f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).numel();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().enumerate().for_each(|(k, a)| *a += f(k)),
            slot @ None => *slot = Some((0..n).map(f).collect()),
        }
    }

    fn broadcast_backward(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(usize, usize, usize) -> (T, T),
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let stra = kernels::broadcast_strides(sa, out_shape);
        let strb = kernels::broadcast_strides(sb, out_shape);
        let mut ga = vec![T::zero(); numel(sa)];
        let mut gb = vec![T::zero(); numel(sb)];
        kernels::for_each_broadcast(out_shape, &stra, &strb, |o, ia, ib| {
            let (da, db) = f(o, ia, ib);
            ga[ia] += da;
            gb[ib] += db;
        });
        if self.wants(a) {
            accumulate(grads, a, &ga);
        }
        if self.wants(b) {
            accumulate(grads, b, &gb);
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, pad: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        let (batch, out_c) = (sx[0], sw[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let sample = geom.channels * geom.height * geom.width;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let wide_n = batch * cols;
        let mut gw = vec![T::zero(); out_c * wide_n];
        for o in 0..out_c {
            for b in 0..batch {
                gw[(o * batch + b) * cols..(o * batch + b + 1) * cols]
                    .copy_from_slice(&g[(b * out_c + o) * cols..(b * out_c + o + 1) * cols]);
            }
        }
        let mut dw = if want_w { vec![T::zero(); wd.len()] } else { Vec::new() };
        let mut dx = if want_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        if want_w {
            let col = batch_im2col(xd, &geom, batch);
            kernels::matmul_nt(&gw, &col, &mut dw, out_c, wide_n, rows, false);
        }
        if want_x {
            let mut dcol = vec![T::zero(); rows * wide_n];
            kernels::matmul_tn(wd, &gw, &mut dcol, rows, out_c, wide_n, false);
            for b in 0..batch {
                kernels::col2im(&dcol, &geom, &mut dx[b * sample..(b + 1) * sample], wide_n, b * cols);
            }
        }
        if want_w {
            accumulate(grads, w, &dw);
        }
        if want_x {
            accumulate(grads, x, &dx);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Softmax (or log-softmax) of `t` along `axis`, shifted by the max.
pub fn softmax_along<T: Scalar>(t: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let s = t.shape();
    assert!(axis < s.len(), "softmax axis {axis} out of range for {s:?}");
    let (outer, dim, inner) = kernels::axis_split(s, axis);
    let x = t.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + r;
            let mx = (0..dim).map(|d| x[at(d)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..dim).map(|d| (x[at(d)] - mx).exp()).sum();
            let lz = z.ln();
            for d in 0..dim {
                out[at(d)] = if log {
                    x[at(d)] - mx - lz
                } else {
                    (x[at(d)] - mx).exp() / z
                };
            }
        }
    }
    Tensor::from_vec(s, out)
}
