use std::cell::RefCell;

use super::{Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, b: Var, cols: usize },
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    ReduceAxis { a: Var, rows: usize, cols: usize, axis: usize, mean: bool },
    Concat { parts: Vec<(Var, usize)>, outer: usize },
    Reshape(Var),
    Gather { a: Var, indices: Vec<usize> },
    Normalize { a: Var, cols: usize, norms: Vec<f64> },
    Softmax { a: Var, cols: usize, temperature: f64 },
    LogSoftmax { a: Var, cols: usize, temperature: f64 },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    KlDiv { p: Var, q: Var, temperature: f64, p_probs: Vec<f64>, q_probs: Vec<f64>, log_ratio: Vec<f64> },
    Margin { logits: Var, label: usize, rival: usize },
    Clamp { a: Var, lo: f64, hi: f64 },
    ProjectLinf { a: Var, reference: Var, radius: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records forward operations for reverse-mode differentiation.
///
/// A tape is single-owner: it is not `Sync`, and every `Var` it hands out is
/// only meaningful for this tape. Use one tape per sample for parallel work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn has(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let start = out.len();
    let mut total = 0.0;
    for &v in logits {
        let e = ((v - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    for p in &mut out[start..] {
        *p /= total;
    }
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&v| (v - max) / temperature - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same values, cut from the gradient graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push(value, false, Op::Leaf)
    }

    /// Matrix product. Either operand may be a vector: `[k] x [k, n] -> [n]`
    /// and `[m, k] x [k] -> [m]`.
    pub fn matmul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let (out, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
                (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
                (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
                (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
                _ => return Err(mismatch("matmul", sa, sb)),
            };
            let (ad, bd) = (av.data(), bv.data());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let row = &ad[i * k..(i + 1) * k];
                let out_row = &mut data[i * n..(i + 1) * n];
                for (p, &aip) in row.iter().enumerate() {
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bpj) in out_row.iter_mut().zip(brow) {
                        *o += aip * bpj;
                    }
                }
            }
            (Tensor::new(out_shape, data)?, m, k, n)
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&self, a: Var) -> TensorResult<Var> {
        let (out, rows, cols) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.ndim() != 2 {
                return Err(TensorError::InvalidArgument {
                    op: "transpose",
                    reason: format!("expected a matrix, got shape {:?}", av.shape()),
                });
            }
            let (r, c) = (av.shape()[0], av.shape()[1]);
            let d = av.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = d[i * c + j];
                }
            }
            (Tensor::new(vec![c, r], data)?, r, c)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Transpose { a, rows, cols }))
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(op_name, av.shape(), bv.shape()));
        }
        av.zip_map(bv, f)
    }

    pub fn add(&self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Adds the vector `b` to every row of `a` (`[m, n] + [n]`); a vector `a`
    /// is treated as a single row.
    pub fn add_row(&self, a: Var, b: Var) -> TensorResult<Var> {
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let cols = av.cols();
            if bv.ndim() != 1 || bv.len() != cols || av.ndim() == 0 {
                return Err(mismatch("add_row", av.shape(), bv.shape()));
            }
            let bd = bv.data();
            let data = av
                .data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
                .collect();
            (Tensor::new(av.shape().to_vec(), data)?, cols)
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::AddRow { a, b, cols }))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Scale(a, factor))
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, a: Var, offset: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|v| v + offset);
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Shift(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// Hinge `[a]_+`.
    pub fn hinge(&self, a: Var) -> Var {
        self.relu(a)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> TensorResult<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> TensorResult<Var> {
        self.reduce_axis(a, axis, false)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> TensorResult<Var> {
        let (out, rows, cols) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.ndim() != 2 || axis > 1 {
                return Err(TensorError::InvalidArgument {
                    op: "reduce_axis",
                    reason: format!("axis {axis} on shape {:?}", av.shape()),
                });
            }
            let (r, c) = (av.shape()[0], av.shape()[1]);
            let d = av.data();
            let data = if axis == 0 {
                let mut acc = vec![0.0; c];
                for row in d.chunks(c) {
                    for (s, v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                if mean {
                    acc.iter_mut().for_each(|s| *s /= r as f64);
                }
                acc
            } else {
                d.chunks(c)
                    .map(|row| {
                        let s: f64 = row.iter().sum();
                        if mean {
                            s / c as f64
                        } else {
                            s
                        }
                    })
                    .collect()
            };
            (Tensor::vector(data), r, c)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::ReduceAxis { a, rows, cols, axis, mean }))
    }

    /// Concatenates along `axis`. Vectors join end to end (axis 0); matrices
    /// stack rows (axis 0) or join columns (axis 1).
    pub fn concat(&self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let (out, layout, outer) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let ndim = first.len();
            if ndim == 0 || ndim > 2 || axis >= ndim {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    reason: format!("axis {axis} on shape {first:?}"),
                });
            }
            let outer = if ndim == 2 && axis == 1 { first[0] } else { 1 };
            let mut layout = Vec::with_capacity(parts.len());
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for &p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == ndim
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(mismatch("concat", &first, s));
                }
                out_shape[axis] += s[axis];
                layout.push((p, nodes[p.0].value.len() / outer));
            }
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for &(p, inner) in &layout {
                    data.extend_from_slice(&nodes[p.0].value.data()[o * inner..(o + 1) * inner]);
                }
            }
            (Tensor::new(out_shape, data)?, layout, outer)
        };
        let rg = self.needs(parts);
        Ok(self.push(out, rg, Op::Concat { parts: layout, outer }))
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack(&self, rows: &[Var]) -> TensorResult<Var> {
        let reshaped = rows
            .iter()
            .map(|&r| {
                let n = self.nodes.borrow()[r.0].value.len();
                self.reshape(r, &[1, n])
            })
            .collect::<TensorResult<Vec<_>>>()?;
        self.concat(&reshaped, 0)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.nodes.borrow()[a.0].value.reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Picks flat entries of `a` into a vector; gradients scatter back.
    pub fn gather(&self, a: Var, indices: &[usize]) -> TensorResult<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].value.data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
                return Err(TensorError::InvalidArgument {
                    op: "gather",
                    reason: format!("index {bad} out of range for length {}", d.len()),
                });
            }
            Tensor::vector(indices.iter().map(|&i| d[i]).collect())
        };
        let rg = self.needs(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::Gather {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> TensorResult<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("rows {start}..{end} of shape {shape:?}"),
            });
        }
        let cols = shape[1];
        let idx: Vec<usize> = (start * cols..end * cols).collect();
        let flat = self.gather(a, &idx)?;
        self.reshape(flat, &[end - start, cols])
    }

    /// `u / ||u||_2` along the last axis (row-wise for matrices).
    pub fn l2_normalize(&self, a: Var) -> TensorResult<Var> {
        let (out, cols, norms) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.ndim() == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "l2_normalize",
                    reason: "scalar input".into(),
                });
            }
            let cols = av.cols();
            let mut norms = Vec::with_capacity(av.rows());
            let mut data = Vec::with_capacity(av.len());
            for row in av.data().chunks(cols) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !n.is_finite() {
                    return Err(TensorError::NonFinite { op: "l2_normalize" });
                }
                if n == 0.0 {
                    return Err(TensorError::Degenerate {
                        op: "l2_normalize",
                        reason: "zero vector".into(),
                    });
                }
                norms.push(n);
                data.extend(row.iter().map(|v| v / n));
            }
            (Tensor::new(av.shape().to_vec(), data)?, cols, norms)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Normalize { a, cols, norms }))
    }

    fn check_temperature(op: &'static str, temperature: f64) -> TensorResult<()> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op,
                reason: format!("temperature must be positive, got {temperature}"),
            })
        }
    }

    fn finite_input(&self, op: &'static str, a: Var) -> TensorResult<()> {
        if self.nodes.borrow()[a.0].value.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// `softmax(a / temperature)` along the last axis.
    pub fn softmax_t(&self, a: Var, temperature: f64) -> TensorResult<Var> {
        Self::check_temperature("softmax_t", temperature)?;
        self.finite_input("softmax_t", a)?;
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let cols = av.cols();
            let mut data = Vec::with_capacity(av.len());
            for row in av.data().chunks(cols) {
                softmax_into(row, temperature, &mut data);
            }
            (Tensor::new(av.shape().to_vec(), data)?, cols)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Softmax { a, cols, temperature }))
    }

    /// `log softmax(a / temperature)` along the last axis.
    pub fn log_softmax_t(&self, a: Var, temperature: f64) -> TensorResult<Var> {
        Self::check_temperature("log_softmax_t", temperature)?;
        self.finite_input("log_softmax_t", a)?;
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let cols = av.cols();
            let data: Vec<f64> = av
                .data()
                .chunks(cols)
                .flat_map(|row| log_softmax(row, temperature))
                .collect();
            (Tensor::new(av.shape().to_vec(), data)?, cols)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::LogSoftmax { a, cols, temperature }))
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> TensorResult<Var> {
        self.finite_input("cross_entropy", logits)?;
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if lv.ndim() != 1 || label >= lv.len() {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy",
                    reason: format!("label {label} for logits of shape {:?}", lv.shape()),
                });
            }
            let logp = log_softmax(lv.data(), 1.0);
            let probs = logp.iter().map(|v| v.exp()).collect::<Vec<_>>();
            (-logp[label], probs)
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, label, probs },
        ))
    }

    /// `KL(softmax(p / T) || softmax(q / T))` for two logit vectors.
    pub fn kl_div(&self, p_logits: Var, q_logits: Var, temperature: f64) -> TensorResult<Var> {
        Self::check_temperature("kl_div", temperature)?;
        self.finite_input("kl_div", p_logits)?;
        self.finite_input("kl_div", q_logits)?;
        let (kl, p_probs, q_probs, log_ratio) = {
            let nodes = self.nodes.borrow();
            let (pv, qv) = (&nodes[p_logits.0].value, &nodes[q_logits.0].value);
            if pv.ndim() != 1 || pv.shape() != qv.shape() {
                return Err(mismatch("kl_div", pv.shape(), qv.shape()));
            }
            let lp = log_softmax(pv.data(), temperature);
            let lq = log_softmax(qv.data(), temperature);
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
            let ratio: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
            let kl = p.iter().zip(&ratio).map(|(pi, r)| pi * r).sum::<f64>();
            (kl, p, q, ratio)
        };
        let rg = self.needs(&[p_logits, q_logits]);
        Ok(self.push(
            Tensor::scalar(kl),
            rg,
            Op::KlDiv {
                p: p_logits,
                q: q_logits,
                temperature,
                p_probs,
                q_probs,
                log_ratio,
            },
        ))
    }

    /// `max_{c != label} logits[c] - logits[label]`; ties in the max go to the
    /// lowest class index.
    pub fn competitor_margin(&self, logits: Var, label: usize) -> TensorResult<Var> {
        let (value, rival) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if lv.ndim() != 1 || label >= lv.len() || lv.len() < 2 {
                return Err(TensorError::InvalidArgument {
                    op: "competitor_margin",
                    reason: format!("label {label} for logits of shape {:?}", lv.shape()),
                });
            }
            let d = lv.data();
            let rival = runner_up(d, label);
            (d[rival] - d[label], rival)
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::Margin { logits, label, rival },
        ))
    }

    /// Elementwise sign. Its derivative is zero almost everywhere, so the
    /// result is not differentiable.
    pub fn sign(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(sign);
        self.push(out, false, Op::Leaf)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> TensorResult<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let out = self.nodes.borrow()[a.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Clamp { a, lo, hi }))
    }

    /// Projects `a` onto the l-infinity ball of `radius` around `reference`.
    pub fn project_linf(&self, a: Var, reference: Var, radius: f64) -> TensorResult<Var> {
        if !(radius >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "project_linf",
                reason: format!("radius must be non-negative, got {radius}"),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[reference.0].value);
            if av.shape() != rv.shape() {
                return Err(mismatch("project_linf", av.shape(), rv.shape()));
            }
            av.zip_map(rv, |x, r| project_scalar(x, r, radius))?
        };
        let rg = self.needs(&[a, reference]);
        Ok(self.push(out, rg, Op::ProjectLinf { a, reference, radius }))
    }

    /// Reverse pass from a scalar `loss`. Every op between the leaves and the
    /// loss is visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let loss_node = &nodes[loss.0];
        if loss_node.value.len() != 1 || loss_node.value.ndim() > 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !loss_node.requires_grad {
            grads.resize(nodes.len(), None);
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves and requires-grad nodes keep their buffers.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !nodes[i].requires_grad {
                *slot = None;
            }
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips `x` to `[reference - radius, reference + radius]`. The ends are
/// pulled inward by an ulp where rounding would otherwise leave
/// `|result - reference|` a hair above `radius`.
pub fn project_scalar(x: f64, reference: f64, radius: f64) -> f64 {
    let mut lo = reference - radius;
    while reference - lo > radius {
        lo = lo.next_up();
    }
    let mut hi = reference + radius;
    while hi - reference > radius {
        hi = hi.next_down();
    }
    x.max(lo).min(hi)
}

/// Highest-valued index other than `label`, lowest index on ties.
pub(crate) fn runner_up(values: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in values.iter().enumerate() {
        if c != label && (best == usize::MAX || v > values[best]) {
            best = c;
        }
    }
    best
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contribution: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if rg(a) {
                // dA = dC B^T
                let bd = val(b);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, nodes, a, da);
            }
            if rg(b) {
                // dB = A^T dC
                let ad = val(a);
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Transpose { a, rows, cols } => {
            let mut da = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    da[i * cols + j] = g[j * rows + i];
                }
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                let d = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, a, d);
            }
            if rg(b) {
                let d = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, b, d);
            }
        }
        &Op::AddRow { a, b, cols } => {
            accumulate(grads, nodes, a, g.to_vec());
            if rg(b) {
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Scale(a, factor) => {
            accumulate(grads, nodes, a, g.iter().map(|v| v * factor).collect());
        }
        &Op::Shift(a) => accumulate(grads, nodes, a, g.to_vec()),
        &Op::Tanh(a) => {
            let y = node.value.data();
            let d = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Relu(a) => {
            let d = g
                .iter()
                .zip(val(a))
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::Sum(a) => {
            let n = nodes[a.0].value.len();
            accumulate(grads, nodes, a, vec![g[0]; n]);
        }
        &Op::ReduceAxis { a, rows, cols, axis, mean } => {
            let mut da = vec![0.0; rows * cols];
            let denom = match (mean, axis) {
                (false, _) => 1.0,
                (true, 0) => rows as f64,
                (true, _) => cols as f64,
            };
            for r in 0..rows {
                for c in 0..cols {
                    let gv = if axis == 0 { g[c] } else { g[r] };
                    da[r * cols + c] = gv / denom;
                }
            }
            accumulate(grads, nodes, a, da);
        }
        Op::Concat { parts, outer } => {
            let total: usize = parts.iter().map(|(_, inner)| inner).sum();
            let mut offset = 0;
            for &(p, inner) in parts {
                if rg(p) {
                    let mut d = Vec::with_capacity(inner * outer);
                    for o in 0..*outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g[base..base + inner]);
                    }
                    accumulate(grads, nodes, p, d);
                }
                offset += inner;
            }
        }
        &Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
        Op::Gather { a, indices } => {
            let mut da = vec![0.0; nodes[a.0].value.len()];
            for (&i, gv) in indices.iter().zip(g) {
                da[i] += gv;
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Normalize { a, cols, norms } => {
            let y = node.value.data();
            let mut da = Vec::with_capacity(y.len());
            for ((yrow, grow), n) in y.chunks(*cols).zip(g.chunks(*cols)).zip(norms) {
                let proj: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                da.extend(yrow.iter().zip(grow).map(|(yv, gv)| (gv - yv * proj) / n));
            }
            accumulate(grads, nodes, *a, da);
        }
        &Op::Softmax { a, cols, temperature } => {
            let p = node.value.data();
            let mut da = Vec::with_capacity(p.len());
            for (prow, grow) in p.chunks(cols).zip(g.chunks(cols)) {
                let inner: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                da.extend(
                    prow.iter()
                        .zip(grow)
                        .map(|(pv, gv)| pv * (gv - inner) / temperature),
                );
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::LogSoftmax { a, cols, temperature } => {
            let y = node.value.data();
            let mut da = Vec::with_capacity(y.len());
            for (yrow, grow) in y.chunks(cols).zip(g.chunks(cols)) {
                let total: f64 = grow.iter().sum();
                da.extend(
                    yrow.iter()
                        .zip(grow)
                        .map(|(yv, gv)| (gv - yv.exp() * total) / temperature),
                );
            }
            accumulate(grads, nodes, a, da);
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            d[*label] -= g[0];
            accumulate(grads, nodes, *logits, d);
        }
        Op::KlDiv {
            p,
            q,
            temperature,
            p_probs,
            q_probs,
            log_ratio,
        } => {
            let kl = node.value.item();
            if rg(*p) {
                let d = p_probs
                    .iter()
                    .zip(log_ratio)
                    .map(|(pi, r)| g[0] * pi * (r - kl) / temperature)
                    .collect();
                accumulate(grads, nodes, *p, d);
            }
            if rg(*q) {
                let d = q_probs
                    .iter()
                    .zip(p_probs)
                    .map(|(qi, pi)| g[0] * (qi - pi) / temperature)
                    .collect();
                accumulate(grads, nodes, *q, d);
            }
        }
        &Op::Margin { logits, label, rival } => {
            let mut d = vec![0.0; nodes[logits.0].value.len()];
            d[rival] += g[0];
            d[label] -= g[0];
            accumulate(grads, nodes, logits, d);
        }
        &Op::Clamp { a, lo, hi } => {
            let d = g
                .iter()
                .zip(val(a))
                .map(|(gv, &x)| if (lo..=hi).contains(&x) { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, a, d);
        }
        &Op::ProjectLinf { a, reference, radius } => {
            let (ad, rd) = (val(a), val(reference));
            let inside: Vec<bool> = ad
                .iter()
                .zip(rd)
                .map(|(&x, &r)| x >= r - radius && x <= r + radius)
                .collect();
            if rg(a) {
                let d = g
                    .iter()
                    .zip(&inside)
                    .map(|(gv, &ins)| if ins { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, nodes, a, d);
            }
            if rg(reference) {
                let d = g
                    .iter()
                    .zip(&inside)
                    .map(|(gv, &ins)| if ins { 0.0 } else { *gv })
                    .collect();
                accumulate(grads, nodes, reference, d);
            }
        }
    }
}
