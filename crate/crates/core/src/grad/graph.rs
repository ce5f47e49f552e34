//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! therefore already in topological order, and `backward` walks them in
//! reverse, accumulating vector-Jacobian products into parent gradients.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SquaredError { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    ChannelsLast(Var),
    SelectCols { input: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Euclidean norm of the gradient at `v`; zero when `v` was unreachable.
    pub fn norm(&self, v: Var) -> f64 {
        self.get(v)
            .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn len_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform weights `1/n`, or the caller's weights after a length check.
fn reduction_weights(op: &'static str, n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        Some(w) if w.len() == n => Ok(w.to_vec()),
        Some(w) => Err(shape_err(op, &[n], &[w.len()])),
        None => Ok(vec![1.0 / n as f64; n]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(len_of(&shape), value.len());
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} produced non-finite value {bad}")));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf that receives a gradient but is not bound to a parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf bound to the named parameter; `backward_into` writes its gradient back.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let t = params.tensor(name)?.clone();
        let v = self.variable(t);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, value, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(name, shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("pow", a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if len_of(shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &y)| *o += x * y);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// `[r, c] + [c]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let c = sa[1];
        let bv = self.value(bias).to_vec();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let rg = self.rg(&[a, bias]);
        self.push("add_bias", sa, value, Op::AddBias(a, bias), rg)
    }

    /// Stride-1 "same" convolution. `input: [n, c, h, w]`, `weight: [o, c, k, k]` with odd `k`,
    /// `bias: [o]`; output `[n, o, h, w]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", &si, &sw));
        }
        if sb != [sw[0]] {
            return Err(shape_err("conv2d(bias)", &sw, &sb));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        let pad = (k / 2) as isize;
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let plane = h * w;
        let mut out = vec![0.0; n * o * plane];
        for ni in 0..n {
            for oi in 0..o {
                let dst = &mut out[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                dst.iter_mut().for_each(|v| *v = b[oi]);
                for ci in 0..c {
                    let src = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = conv_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = conv_range(w, dx);
                            let wv = wt[((oi * c + ci) * k + ky) * k + kx];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let drow = &mut dst[y * w + x0..y * w + x1];
                                let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                                drow.iter_mut().zip(srow).for_each(|(d, &s)| *d += wv * s);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        self.push("conv2d", vec![n, o, h, w], out, Op::Conv2d { input, weight, bias }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().expect("non-empty shape");
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let rg = self.rg(&[a]);
        self.push("softmax", shape, out, Op::Softmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", vec![1], vec![m], Op::Mean(a), rg)
    }

    /// `sum_i w_i (pred_i - target_i)^2`; without weights this is the mean squared error.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n {
            return Err(shape_err("squared_error", self.shape(pred), &[target.len()]));
        }
        let weights = reduction_weights("squared_error", n, weights)?;
        let s = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred]);
        let op = Op::SquaredError {
            pred,
            target: target.to_vec(),
            weights,
        };
        self.push("squared_error", vec![1], vec![s], op, rg)
    }

    /// Categorical cross-entropy of row-wise softmax over `logits: [r, c]`:
    /// `sum_i w_i * -log softmax(logits_i)[targets_i]`, mean over rows without weights.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Graph(format!("cross_entropy: class {bad} out of range for {c} classes")));
        }
        let weights = reduction_weights("cross_entropy", targets.len(), weights)?;
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for ((row, &t), &w) in probs.chunks_mut(c).zip(targets).zip(&weights) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t]);
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        self.push("cross_entropy", vec![1], vec![loss], op, rg)
    }

    /// Binary cross-entropy on logits, `sum_i w_i * bce(sigmoid(z_i), t_i)`; mean without weights.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let weights = reduction_weights("bce_with_logits", n, weights)?;
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        let rg = self.rg(&[logits]);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
            weights,
        };
        self.push("bce_with_logits", vec![1], vec![loss], op, rg)
    }

    /// `[n, c, h, w] -> [n*h*w, c]`
    pub fn channels_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err("channels_last", &s, &[4]));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let src = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for (p, &v) in src.iter().enumerate() {
                    out[(ni * plane + p) * c + ci] = v;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("channels_last", vec![n * plane, c], out, Op::ChannelsLast(a), rg)
    }

    /// Columns `start..start+len` of a `[r, c]` matrix.
    pub fn select_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(shape_err("select_cols", &s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push("select_cols", vec![r, len], out, Op::SelectCols { input: a, start }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // Drop gradients on nodes that never required them (constants).
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates every bound parameter's gradient into `params`.
    pub fn backward_into(&self, root: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(root)?;
        self.accumulate_into(&grads, params, 1.0)?;
        Ok(grads)
    }

    /// Adds `scale * grad` for every parameter leaf reached by `grads`.
    pub fn accumulate_into(&self, grads: &Gradients, params: &mut ParamSet, scale: f64) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, grads.grads.get(i).and_then(|g| g.as_ref())) else {
                continue;
            };
            let entry = params.get_mut(name)?;
            if scale == 1.0 {
                entry.tensor.accumulate_grad(g);
            } else {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                entry.tensor.accumulate_grad(&scaled);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, || g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                self.send(grads, *b, || g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => self.send(grads, *a, || g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.send(grads, *a, || g.to_vec()),
            Op::Relu(a) => self.send(grads, *a, || {
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect()
            }),
            Op::Sigmoid(a) => self.send(grads, *a, || {
                g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect()
            }),
            Op::Exp(a) => self.send(grads, *a, || g.iter().zip(&node.value).map(|(x, y)| x * y).collect()),
            Op::Log(a) => self.send(grads, *a, || g.iter().zip(val(*a)).map(|(x, v)| x / v).collect()),
            Op::Abs(a) => self.send(grads, *a, || {
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else if v < 0.0 { -x } else { 0.0 })
                    .collect()
            }),
            Op::Pow(a, p) => self.send(grads, *a, || {
                g.iter().zip(val(*a)).map(|(x, v)| x * p * v.powf(p - 1.0)).collect()
            }),
            Op::ClampMin(a, floor) => self.send(grads, *a, || {
                g.iter()
                    .zip(val(*a))
                    .map(|(x, v)| if v >= floor { *x } else { 0.0 })
                    .collect()
            }),
            Op::Softmax(a) => {
                let c = *node.shape.last().unwrap();
                self.send(grads, *a, || {
                    let mut out = vec![0.0; g.len()];
                    for ((o, gy), y) in out.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        o.iter_mut()
                            .zip(gy.iter().zip(y))
                            .for_each(|(o, (gi, yi))| *o = yi * (gi - dot));
                    }
                    out
                });
            }
            Op::Sum(a) => self.send(grads, *a, || vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                self.send(grads, *a, || vec![g[0] / n as f64; n]);
            }
            Op::SquaredError { pred, target, weights } => self.send(grads, *pred, || {
                val(*pred)
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((p, t), w)| g[0] * 2.0 * w * (p - t))
                    .collect()
            }),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = probs.len() / targets.len();
                self.send(grads, *logits, || {
                    let mut out = probs.clone();
                    for ((row, &t), &w) in out.chunks_mut(c).zip(targets).zip(weights) {
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w * g[0]);
                    }
                    out
                });
            }
            Op::BceWithLogits { logits, targets, weights } => self.send(grads, *logits, || {
                val(*logits)
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, t), w)| g[0] * w * (sigmoid(z) - t))
                    .collect()
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                self.send(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum();
                        }
                    }
                    da
                });
                self.send(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(d, gv)| *d += x * gv);
                        }
                    }
                    db
                });
            }
            Op::AddBias(a, bias) => {
                let c = node.shape[1];
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *bias, || {
                    let mut db = vec![0.0; c];
                    g.chunks(c).for_each(|row| db.iter_mut().zip(row).for_each(|(d, x)| *d += x));
                    db
                });
            }
            Op::Conv2d { input, weight, bias } => self.conv2d_backward(node, g, *input, *weight, *bias, grads),
            Op::ChannelsLast(a) => {
                let s = &self.nodes[a.0].shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                self.send(grads, *a, || {
                    let mut out = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            for p in 0..plane {
                                out[(ni * c + ci) * plane + p] = g[(ni * plane + p) * c + ci];
                            }
                        }
                    }
                    out
                });
            }
            Op::SelectCols { input, start } => {
                let s = &self.nodes[input.0].shape;
                let (r, c) = (s[0], s[1]);
                let len = node.shape[1];
                self.send(grads, *input, || {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    out
                });
            }
        }
    }

    fn conv2d_backward(&self, node: &Node, g: &[f64], input: Var, weight: Var, bias: Var, grads: &mut [Option<Vec<f64>>]) {
        let si = &self.nodes[input.0].shape;
        let sw = &self.nodes[weight.0].shape;
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        let pad = (k / 2) as isize;
        let plane = h * w;
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        debug_assert_eq!(g.len(), node.value.len());

        self.send(grads, bias, || {
            (0..o)
                .map(|oi| {
                    (0..n)
                        .map(|ni| g[(ni * o + oi) * plane..(ni * o + oi + 1) * plane].iter().sum::<f64>())
                        .sum()
                })
                .collect()
        });
        let need_w = self.nodes[weight.0].requires_grad;
        let need_x = self.nodes[input.0].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let mut dw = vec![0.0; wt.len()];
        let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        for ni in 0..n {
            for oi in 0..o {
                let gp = &g[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = conv_range(h, dy);
                        for kx in 0..k {
                            let dxo = kx as isize - pad;
                            let (x0, x1) = conv_range(w, dxo);
                            let widx = ((oi * c + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gp[y * w + x0..y * w + x1];
                                let s0 = base + sy * w + (x0 as isize + dxo) as usize;
                                let s1 = s0 + (x1 - x0);
                                if need_w {
                                    acc += grow.iter().zip(&x[s0..s1]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if need_x {
                                    dx[s0..s1].iter_mut().zip(grow).for_each(|(d, gv)| *d += wv * gv);
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        if need_w {
            self.send(grads, weight, || dw);
        }
        if need_x {
            self.send(grads, input, || dx);
        }
    }

    /// Accumulates a parent gradient; the closure only runs when the parent needs one.
    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, f: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let g = f();
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Output positions `[lo, hi)` whose shifted source index `y + d` lies inside `0..n`.
fn conv_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}
