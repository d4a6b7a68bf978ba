//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes once in reverse.
//! A tape built with [`Tape::dry_run`] tracks only shapes and FLOPs, so
//! paper-scale models can be costed without allocating activations.

use crate::complexity::{FlopCounter, FlopKind};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    axis_split, conv2d_backward, conv2d_forward, matmul_kernel, matmul_nt_kernel, matmul_tn_acc,
    permute_index, softmax_kernel, ConvGeom, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, gather: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    dry: bool,
    scope: FlopKind,
    flops: FlopCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            dry: false,
            scope: FlopKind::Other,
            flops: FlopCounter::default(),
        }
    }

    /// A tape that records shapes and FLOP counts but computes no values.
    pub fn dry_run() -> Self {
        Tape {
            dry: true,
            ..Self::new()
        }
    }

    pub fn is_dry(&self) -> bool {
        self.dry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Sets the category new FLOPs are charged to and returns the previous one.
    pub fn set_scope(&mut self, kind: FlopKind) -> FlopKind {
        std::mem::replace(&mut self.scope, kind)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a node.
    ///
    /// Panics on a dry-run tape, which never materializes values.
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("dry-run tape holds no values")
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let value = (!self.dry).then_some(t);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf carrying only a shape; valid on dry-run tapes.
    pub fn leaf_shape(&mut self, shape: &[usize], requires_grad: bool) -> Var {
        if self.dry {
            self.nodes.push(Node {
                shape: shape.to_vec(),
                value: None,
                op: Op::Leaf,
                requires_grad,
            });
            Var(self.nodes.len() - 1)
        } else {
            self.leaf(Tensor::zeros(shape), requires_grad)
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Option<Vec<f64>>, op: Op, flops: u64) -> Var {
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.flops.add(self.scope, flops);
        let value = data.map(|d| Tensor::from_parts(shape.clone(), d));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, .. } => vec![*x, *gamma],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn numel(&self, v: Var) -> usize {
        self.shape(v).iter().product()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Option<Vec<f64>> {
        (!self.dry).then(|| {
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect()
        })
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Option<Vec<f64>> {
        (!self.dry).then(|| self.data(x).iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        let n = self.numel(a) as u64;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        let n = self.numel(a) as u64;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), n))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        let n = self.numel(a) as u64;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.map(x, |v| v * s);
        let n = self.numel(x) as u64;
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), n)
    }

    /// Adds `bias[D]` along the last axis of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(bias).len() != 1 || xs.last() != self.shape(bias).first() {
            return shape_err("add_bias", xs, self.shape(bias));
        }
        let d = self.shape(bias)[0];
        let data = (!self.dry).then(|| {
            let b = self.data(bias);
            self.data(x)
                .iter()
                .enumerate()
                .map(|(i, v)| v + b[i % d])
                .collect()
        });
        let n = self.numel(x) as u64;
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), n))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = (!self.dry).then(|| {
            let mut out = vec![0.0; m * n];
            matmul_kernel(self.data(a), self.data(b), m, k, n, &mut out);
            out
        });
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), 2 * (m * k * n) as u64))
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("batch_matmul", sa, sb);
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("batch_matmul", sa, sb);
        }
        let data = (!self.dry).then(|| {
            let (ad, bd) = (self.data(a), self.data(b));
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let asl = &ad[i * m * k..(i + 1) * m * k];
                let bsl = &bd[i * k * n..(i + 1) * k * n];
                let osl = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    matmul_nt_kernel(asl, bsl, m, k, n, osl);
                } else {
                    matmul_kernel(asl, bsl, m, k, n, osl);
                }
            }
            out
        });
        let flops = 2 * (batch * m * k * n) as u64;
        Ok(self.push(vec![batch, m, n], data, Op::BatchMatMul { a, b, trans_b }, flops))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.map(x, |v| v.max(0.0));
        let n = self.numel(x) as u64;
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.map(x, sigmoid);
        let n = self.numel(x) as u64;
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid(x), 4 * n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = (!self.dry).then(|| softmax_kernel(self.data(x), &shape, axis));
        let n = self.numel(x) as u64;
        Ok(self.push(shape, data, Op::Softmax { x, axis }, 5 * n))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension(format!(
                "layer_norm needs a non-empty last axis, got {shape:?}"
            )));
        }
        if self.shape(gamma) != [d] {
            return shape_err("layer_norm", &shape, self.shape(gamma));
        }
        if self.shape(beta) != [d] {
            return shape_err("layer_norm", &shape, self.shape(beta));
        }
        let rows = self.numel(x) / d;
        let (normed, xhat, inv_std) = if self.dry {
            (None, Vec::new(), Vec::new())
        } else {
            let xd = self.data(x);
            let mut xhat = vec![0.0; xd.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
            }
            let g = self.data(gamma);
            let out = xhat.iter().enumerate().map(|(i, v)| v * g[i % d]).collect();
            (Some(out), xhat, inv_std)
        };
        // beta enters through an AddBias node so its gradient needs no special case.
        let ln = self.push(
            shape,
            normed,
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
            },
            7 * (rows * d) as u64,
        );
        self.add_bias(ln, beta)
    }

    /// Same-padded 2-D cross-correlation, `x[T,F,Cin] ⋆ w[k,k,Cin,Cout] + b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = ConvGeom::check(self.shape(x), self.shape(w), self.shape(b))?;
        let data = (!self.dry).then(|| {
            conv2d_forward(
                &geom,
                self.data(x),
                self.data(w),
                &vec![0.0; geom.cout],
            )
        });
        let macs = geom.t * geom.f * geom.k * geom.k * geom.cin * geom.cout;
        let y = self.push(
            vec![geom.t, geom.f, geom.cout],
            data,
            Op::Conv2d { x, w, geom },
            2 * macs as u64,
        );
        self.add_bias(y, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let data = (!self.dry).then(|| {
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &v in inputs {
                    let chunk = self.shape(v)[axis] * inner;
                    out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        });
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            0,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || start + len > src[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} on axis {axis} out of range for {src:?}",
                start + len
            )));
        }
        let mut shape = src.clone();
        shape[axis] = len;
        let data = (!self.dry).then(|| {
            let (outer, full, inner) = axis_split(&src, axis);
            let xd = self.data(x);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                out.extend_from_slice(&xd[base..base + len * inner]);
            }
            out
        });
        Ok(self.push(shape, data, Op::Slice { x, axis, start }, 0))
    }

    /// General axis permutation.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, gather) = permute_index(self.shape(x), axes)?;
        let data = (!self.dry).then(|| {
            let xd = self.data(x);
            gather.iter().map(|&i| xd[i]).collect()
        });
        Ok(self.push(shape, data, Op::Permute { x, gather }, 0))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return shape_err("reshape", self.shape(x), shape);
        }
        let data = (!self.dry).then(|| self.data(x).to_vec());
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), 0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let data = (!self.dry).then(|| vec![self.data(x).iter().sum()]);
        let n = self.numel(x) as u64;
        self.push(vec![], data, Op::Sum(x), n)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x);
        let data = (!self.dry).then(|| vec![self.data(x).iter().sum::<f64>() / n as f64]);
        self.push(vec![], data, Op::Mean(x), n as u64 + 1)
    }

    /// Mean binary cross-entropy between logits and `targets` over the
    /// entries where `mask` is set, in the stable form
    /// `log(1 + exp(-|l|)) + max(l, 0) - l·b`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let n = self.numel(logits);
        if targets.len() != n || mask.len() != n {
            return shape_err("bce_with_logits", self.shape(logits), &[targets.len(), mask.len()]);
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("bce_with_logits with an empty mask".into()));
        }
        let (data, grad) = if self.dry {
            (None, Vec::new())
        } else {
            let l = self.data(logits);
            let mut loss = 0.0;
            let mut grad = vec![0.0; n];
            for i in (0..n).filter(|&i| mask[i]) {
                loss += (-l[i].abs()).exp().ln_1p() + l[i].max(0.0) - l[i] * targets[i];
                grad[i] = (sigmoid(l[i]) - targets[i]) / count as f64;
            }
            (Some(vec![loss / count as f64]), grad)
        };
        Ok(self.push(
            vec![],
            data,
            Op::BceWithLogits { logits, grad },
            6 * count as u64,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dry {
            return Err(Error::Contract("backward on a dry-run tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            for (input, g) in self.local_grads(node, &dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        let mut out = Gradients { grads };
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && out.grads[i].is_none() {
                out.grads[i] = Some(Tensor::zeros(&node.shape));
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Vec<(Var, Tensor)> {
        let g = dy.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.shape(v).to_vec(), data);
        let y = || node.value.as_ref().expect("value").data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, like(*b, g.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, like(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect())),
                    (*b, like(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect())),
                ]
            }
            Op::Scale(x, s) => vec![(*x, like(*x, g.iter().map(|v| v * s).collect()))],
            Op::AddBias(x, b) => {
                let d = self.shape(*b)[0];
                let mut db = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    db[i % d] += v;
                }
                vec![(*x, dy.clone()), (*b, like(*b, db))]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                matmul_nt_kernel(g, self.data(*b), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(self.data(*a), g, m, k, n, &mut db);
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let asl = &ad[i * m * k..(i + 1) * m * k];
                    let bsl = &bd[i * k * n..(i + 1) * k * n];
                    let das = &mut da[i * m * k..(i + 1) * m * k];
                    let dbs = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // C = A·Bᵀ, B is n×k: dA = dC·B, dB = dCᵀ·A
                        matmul_kernel(gs, bsl, m, n, k, das);
                        matmul_tn_acc(gs, asl, m, n, k, dbs);
                    } else {
                        matmul_nt_kernel(gs, bsl, m, n, k, das);
                        matmul_tn_acc(asl, gs, m, k, n, dbs);
                    }
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                vec![(
                    *x,
                    like(*x, g.iter().zip(xd).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect()),
                )]
            }
            Op::Sigmoid(x) => {
                let yd = y();
                vec![(*x, like(*x, g.iter().zip(yd).map(|(d, s)| d * s * (1.0 - s)).collect()))]
            }
            Op::Softmax { x, axis } => {
                let yd = y();
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * yd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = yd[p] * (g[p] - dot);
                        }
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (gr, xr) = (&g[rows.clone()], &xhat[rows.clone()]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dx[r * d + j] =
                            is / d as f64 * (d as f64 * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                    }
                }
                vec![(*x, like(*x, dx)), (*gamma, like(*gamma, dgamma))]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw, _) = conv2d_backward(geom, self.data(*x), self.data(*w), g);
                vec![(*x, like(*x, dx)), (*w, like(*w, dw))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.numel(*v)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        p.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                inputs.iter().zip(parts).map(|(v, p)| (*v, like(*v, p))).collect()
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x);
                let (outer, full, inner) = axis_split(src, *axis);
                let len = node.shape[*axis];
                let mut dx = vec![0.0; self.numel(*x)];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Permute { x, gather } => {
                let mut dx = vec![0.0; g.len()];
                for (o, &i) in gather.iter().enumerate() {
                    dx[i] = g[o];
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.to_vec()))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), g[0]))],
            Op::Mean(x) => {
                let n = self.numel(*x) as f64;
                vec![(*x, Tensor::full(self.shape(*x), g[0] / n))]
            }
            Op::BceWithLogits { logits, grad } => {
                vec![(*logits, like(*logits, grad.iter().map(|v| v * g[0]).collect()))]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` for nodes that do not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = tape.constant(Tensor::eye(3));
        let bv = tape.constant(b.clone());
        let out = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(out), &b);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::full(&[3, 4], 7.5));
        let zz = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(zz), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let yd = tape.value(y).data();
        assert!((yd[0] + 1.0).abs() < 1e-4 && (yd[1] - 1.0).abs() < 1e-4);

        let g4 = tape.constant(Tensor::ones(&[4]));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[4], 3.3));
        let yc = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(yc).data().iter().all(|v| v.abs() < 1e-12));

        let g0 = tape.constant(Tensor::zeros(&[4]));
        let bc = tape.constant(Tensor::full(&[4], 0.7));
        let x4 = tape.constant(t(&[4], &[1.0, -2.0, 5.0, 0.5]));
        let y4 = tape.layer_norm(x4, g0, bc, 1e-5).unwrap();
        assert!(tape.value(y4).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_zero_width_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        let g = tape.constant(Tensor::zeros(&[0]));
        let b = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_padding_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 5, 1]));
        let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b).unwrap();
        let yd = tape.value(y).data();
        assert_eq!(tape.shape(y), &[4, 5, 1]);
        assert_eq!(yd[0], 4.0);
        assert_eq!(yd[5 + 1], 9.0);
        assert_eq!(yd[4], 4.0);
        assert_eq!(yd[5 + 4], 6.0);
    }

    #[test]
    fn conv_identity_channel_map() {
        let mut tape = Tape::new();
        let xv = Tensor::new(&[2, 3, 2], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 4, 2]));
        let w = tape.constant(Tensor::ones(&[3, 3, 3, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 4.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn elementwise_suite_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        let z = tape.constant(Tensor::zeros(&[1]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.constant(Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        let xt = tape.transpose(x).unwrap();
        let xtt = tape.transpose(xt).unwrap();
        assert_eq!(tape.value(xtt), tape.value(x));
        assert_eq!(tape.value(xt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let sl = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(sl).data(), &[1.0, 2.0, 4.0, 5.0]);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).data(), &[2.5]);
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn dry_run_tracks_shapes_and_flops() {
        let mut tape = Tape::dry_run();
        let a = tape.leaf_shape(&[4, 8], true);
        let b = tape.leaf_shape(&[8, 3], true);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[4, 3]);
        assert_eq!(tape.flops().total(), 2 * 4 * 8 * 3);
        assert!(tape.backward(c).is_err());
    }
}
