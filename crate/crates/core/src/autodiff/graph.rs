
use super::kernels::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col, ConvDims};
use super::tensor::Tensor;
use super::{softplus, softplus_grad};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Conv2d { x: Var, w: Var, dims: ConvDims, cols: Vec<f64> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu(Var),
    Softplus { a: Var, beta: f64 },
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    CrossEntropy { logits: Var, labels: Var },
    Mse { pred: Var, target: Var },
    Reshape(Var),
    GroupLasso { x: Var, groups: Vec<(Vec<usize>, f64)> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Copies the gradient of `v` into `tensor.grad`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => Ok(()),
        }
    }
}

/// Tape of recorded operations for one forward pass.
///
/// Nodes are appended in execution order, so the tape order is already a
/// topological order. A graph can be differentiated once; a second
/// [`Graph::backward`] call returns [`Error::GraphConsumed`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `b` may be a trailing suffix of `a` (leading-batch broadcast).
fn broadcast_ok(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_err(op, format!("{b:?} does not broadcast onto {a:?}")));
    }
    Ok(())
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Registers a leaf from raw parts.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("graph node shapes are validated on construction")
    }

    /// `[m, k] · [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Stride-1 convolution of `[batch, c_in, h, w]` with `[c_out, c_in, kh, kw]`
    /// and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?} (want [batch, c_in, h, w]) vs kernel {sw:?} (want [c_out, c_in, kh, kw])"),
            ));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let dims = ConvDims {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            pad: padding,
            h_out: sx[2] + 2 * padding - sw[2] + 1,
            w_out: sx[3] + 2 * padding - sw[3] + 1,
        };
        let (k, p) = (dims.k(), dims.p());
        let in_stride = dims.c_in * dims.h * dims.w;
        let out_stride = dims.c_out * p;
        let mut cols = vec![0.0; dims.batch * k * p];
        let mut out = vec![0.0; dims.batch * out_stride];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for b in 0..dims.batch {
                let c = &mut cols[b * k * p..(b + 1) * k * p];
                im2col(&dims, &xv[b * in_stride..(b + 1) * in_stride], c);
                gemm_nn(dims.c_out, k, p, wv, c, &mut out[b * out_stride..(b + 1) * out_stride], false);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            vec![dims.batch, dims.c_out, dims.h_out, dims.w_out],
            out,
            Op::Conv2d { x, w, dims, cols },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok("add", self.shape(a), self.shape(b))?;
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `(1/β)·ln(1 + exp(β·x))`
    pub fn softplus(&mut self, a: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("softplus beta must be positive, got {beta}")));
        }
        Ok(self.unary(a, |x| softplus(x, beta), Op::Softplus { a, beta }))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy between `logits` and `labels` in `[0, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Var) -> Result<Var> {
        same_shape("cross_entropy", self.shape(logits), self.shape(labels))?;
        let z = self.value(logits);
        let y = self.value(labels);
        let n = z.len() as f64;
        let loss = z.iter().zip(y).map(|(&z, &y)| softplus(z, 1.0) - y * z).sum::<f64>() / n;
        let rg = self.rg(logits) || self.rg(labels);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, labels }, rg))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mse", self.shape(pred), self.shape(target))?;
        let p = self.value(pred);
        let t = self.value(target);
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Vec::new(), vec![loss], Op::Mse { pred, target }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} → {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// Weighted sum of group L2 norms, `Σ_g w_g·‖x_g‖₂`.
    ///
    /// The subgradient at `x_g = 0` is taken as zero.
    pub fn group_lasso(&mut self, x: Var, groups: &[(Vec<usize>, f64)]) -> Result<Var> {
        let v = self.value(x);
        let mut total = 0.0;
        for (idx, weight) in groups {
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
                return Err(shape_err("group_lasso", format!("index {bad} out of range for {} entries", v.len())));
            }
            total += weight * idx.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
        }
        let rg = self.rg(x);
        Ok(self.push(
            Vec::new(),
            vec![total],
            Op::GroupLasso {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // Only nodes that require grad keep one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm_nt(*m, *n, *k, gout, bv, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm_tn(*m, *k, *n, av, gout, gb, true);
                }
            }
            Op::Conv2d { x, w, dims, cols } => {
                let (k, p) = (dims.k(), dims.p());
                let out_stride = dims.c_out * p;
                let in_stride = dims.c_in * dims.h * dims.w;
                if let Some(gw) = self.acc(grads, *w) {
                    for b in 0..dims.batch {
                        gemm_nt(
                            dims.c_out,
                            p,
                            k,
                            &gout[b * out_stride..(b + 1) * out_stride],
                            &cols[b * k * p..(b + 1) * k * p],
                            gw,
                            true,
                        );
                    }
                }
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let mut dcols = vec![0.0; k * p];
                    let gx = self.acc(grads, *x).expect("checked requires_grad");
                    for b in 0..dims.batch {
                        gemm_tn(dims.c_out, k, p, wv, &gout[b * out_stride..(b + 1) * out_stride], &mut dcols, false);
                        col2im_add(dims, &dcols, &mut gx[b * in_stride..(b + 1) * in_stride]);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for (j, d) in gout.iter().enumerate() {
                        gb[j % nb] += d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, d) in gout.iter().enumerate() {
                        ga[j] += d * bv[j % nb];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (j, d) in gout.iter().enumerate() {
                        gb[j % nb] += d * av[j];
                    }
                }
            }
            Op::Relu(a) => self.unary_back(grads, *a, gout, &node.value, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus { a, beta } => self.unary_back(grads, *a, gout, &node.value, |x, _| softplus_grad(x, *beta)),
            Op::Log(a) => self.unary_back(grads, *a, gout, &node.value, |x, _| 1.0 / x),
            Op::Exp(a) => self.unary_back(grads, *a, gout, &node.value, |_, y| y),
            Op::Square(a) => self.unary_back(grads, *a, gout, &node.value, |x, _| 2.0 * x),
            Op::Sqrt(a) => self.unary_back(grads, *a, gout, &node.value, |_, y| 0.5 / y),
            Op::Reshape(a) => self.unary_back(grads, *a, gout, &node.value, |_, _| 1.0),
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = gout[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let (z, y) = (self.value(*logits), self.value(*labels));
                let s = gout[0] / z.len() as f64;
                if let Some(gz) = self.acc(grads, *logits) {
                    for j in 0..z.len() {
                        gz[j] += s * (softplus_grad(z[j], 1.0) - y[j]);
                    }
                }
                if let Some(gy) = self.acc(grads, *labels) {
                    for j in 0..z.len() {
                        gy[j] -= s * z[j];
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let s = 2.0 * gout[0] / p.len() as f64;
                if let Some(gp) = self.acc(grads, *pred) {
                    for j in 0..p.len() {
                        gp[j] += s * (p[j] - t[j]);
                    }
                }
                if let Some(gt) = self.acc(grads, *target) {
                    for j in 0..p.len() {
                        gt[j] -= s * (p[j] - t[j]);
                    }
                }
            }
            Op::GroupLasso { x, groups } => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for (idx, weight) in groups {
                        let norm = idx.iter().map(|&j| xv[j] * xv[j]).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let s = gout[0] * weight / norm;
                            for &j in idx {
                                gx[j] += s * xv[j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, grads: &mut [Option<Vec<f64>>], a: Var, gout: &[f64], out: &[f64], d: impl Fn(f64, f64) -> f64) {
        let xin = &self.nodes[a.0].value;
        if let Some(ga) = self.acc(grads, a) {
            for j in 0..ga.len() {
                ga[j] += gout[j] * d(xin[j], out[j]);
            }
        }
    }
}

