//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each node owns its forward
//! value and remembers the operation (and whatever it saved) that produced
//! it, so nodes are already in topological order. [`Graph::backward`] walks
//! the list in exact reverse order; a gradient reaching a node from several
//! consumers is summed in that traversal order.
//!
//! Only first-order derivatives are supported. Operations whose inputs are
//! all constants are recorded as constants and skipped during the backward
//! pass, which is what keeps frozen parameters cheap.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Logit written at masked attention positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        dims: (usize, usize, usize),
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        dims: (usize, usize, usize),
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MulConst {
        x: Var,
        factors: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    MaskKeys {
        x: Var,
        key_pad: Vec<bool>,
        heads: usize,
        seq: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every gradient-enabled leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[m×k] · b[k×n]`, or `a[m×k] · b[n×k]ᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(op, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(op, sa, sb));
        }
        let mut out = vec![T::ZERO; m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::gemm_nt(av, bv, &mut out, m, k, n);
        } else {
            kernels::gemm_nn(av, bv, &mut out, m, k, n);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            rg,
            Op::MatMul {
                a,
                b,
                trans_b,
                dims: (m, k, n),
            },
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for rank-2 tensors (`b` is `[n×k]`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b { "bmm_t" } else { "bmm" };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(op, sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err(op, sa, sb));
        }
        let mut out = vec![T::ZERO; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for ((ab, bb), cb) in av
            .chunks_exact(m * k)
            .zip(bv.chunks_exact(k * n))
            .zip(out.chunks_exact_mut(m * n))
        {
            if trans_b {
                kernels::gemm_nt(ab, bb, cb, m, k, n);
            } else {
                kernels::gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            rg,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                groups: g,
                dims: (m, k, n),
            },
        ))
    }

    /// Batched product `[g×m×k] · [g×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a · bᵀ` with `b` shaped `[g×n×k]`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        Ok(match name {
            "add" => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            _ => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
        })
    }

    /// Elementwise sum of two tensors of equal shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add")?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Add { a, b }))
    }

    /// Elementwise product of two tensors of equal shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Mul { a, b }))
    }

    /// Adds a `[n]` bias to every row of `x[...×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_row", sx, sb));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::add_assign(row, bv);
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|&v| v * factor).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Scale { x, factor })
    }

    /// Elementwise product with a constant factor tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let value = self.value(x);
        if factors.len() != value.numel() {
            return Err(shape_err("mul_const", value.shape(), &[factors.len()]));
        }
        let out = value
            .data()
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::MulConst { x, factors },
        ))
    }

    /// `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let out = value
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Relu { x })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let out = value.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Gelu { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let n = value.last_dim();
        let mut out = value.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_row(row);
        }
        let shape = value.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Softmax { x })
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != d {
                return Err(shape_err("layer_norm", sx, sp));
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let inv_d = T::ONE / T::from_f64(d as f64);
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = kernels::sum(row) * inv_d;
            let var = row
                .iter()
                .fold(T::ZERO, |acc, &v| acc + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Selects rows of a rank-2 `table`: `out[i] = table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("gather_rows", st, &[rows.len()]));
        }
        let (n_rows, d) = (st[0], st[1]);
        if rows.is_empty() {
            return Err(shape_err("gather_rows", st, &[0]));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n_rows {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: r,
                    bound: n_rows,
                });
            }
            out.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            rg,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Overwrites attention logits at padded key positions with
    /// [`MASKED_LOGIT`]. `x` is `[batch·heads × seq × seq]` and `key_pad` is
    /// `[batch × seq]`, true where the key is padding.
    pub fn mask_keys(&mut self, x: Var, key_pad: &[bool], heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] != sx[2] || heads == 0 || sx[0] % heads != 0 {
            return Err(shape_err("mask_keys", sx, &[key_pad.len()]));
        }
        let seq = sx[2];
        let batch = sx[0] / heads;
        if key_pad.len() != batch * seq {
            return Err(shape_err("mask_keys", sx, &[key_pad.len()]));
        }
        let masked = T::from_f64(MASKED_LOGIT);
        let mut out = self.value(x).data().to_vec();
        for (g, block) in out.chunks_exact_mut(seq * seq).enumerate() {
            let pad = &key_pad[(g / heads) * seq..(g / heads + 1) * seq];
            for row in block.chunks_exact_mut(seq) {
                for (v, &p) in row.iter_mut().zip(pad) {
                    if p {
                        *v = masked;
                    }
                }
            }
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::MaskKeys {
                x,
                key_pad: key_pad.to_vec(),
                heads,
                seq,
            },
        ))
    }

    /// `[batch·seq × heads·dh]` → `[batch·heads × seq × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != batch * seq || heads == 0 || sx[1] % heads != 0 {
            return Err(shape_err("split_heads", sx, &[batch, seq, heads]));
        }
        let d = sx[1];
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &xv[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch * heads, seq, dh], out),
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] != batch * heads || sx[1] != seq {
            return Err(shape_err("merge_heads", sx, &[batch, seq, heads]));
        }
        let dh = sx[2];
        let d = dh * heads;
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                let dst = (b * seq + t) * d;
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dh;
                    out[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch * seq, d], out),
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the rows whose `ignore` flag is false. `logits` is `[rows × classes]`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || targets.len() != sl[0] || ignore.len() != sl[0] {
            return Err(shape_err("cross_entropy_masked", sl, &[targets.len()]));
        }
        let classes = sl[1];
        let active: Vec<usize> = (0..sl[0]).filter(|&r| !ignore[r]).collect();
        if active.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(active.len() * classes);
        let mut total = T::ZERO;
        for &r in &active {
            let t = targets[r];
            if t >= classes {
                return Err(Error::Index {
                    context: "cross_entropy_masked target",
                    index: t,
                    bound: classes,
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            total += kernels::log_sum_exp(row) - row[t];
            let start = probs.len();
            probs.extend_from_slice(row);
            kernels::softmax_row(&mut probs[start..]);
        }
        let loss = total / T::from_f64(active.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active,
                probs,
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = kernels::sum(self.value(x).data());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("node {} is not on this tape", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, i, &mut grads, &mut out);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, contribution: Vec<T>) {
        match &mut grads[var.0] {
            Some(existing) => kernels::add_assign(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        index: usize,
        grads: &mut [Option<Vec<T>>],
        out: &mut BTreeMap<usize, Tensor<T>>,
    ) {
        match &node.op {
            Op::Leaf => {
                out.insert(
                    index,
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                dims: (m, k, n),
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::ZERO; m * k];
                    if trans_b {
                        kernels::gemm_nn(&g, bv, &mut da, m, n, k);
                    } else {
                        kernels::gemm_nt(&g, bv, &mut da, m, n, k);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::ZERO; k * n];
                    if trans_b {
                        kernels::gemm_tn(&g, av, &mut db, n, m, k);
                    } else {
                        kernels::gemm_tn(av, &g, &mut db, k, m, n);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                trans_b,
                groups,
                dims: (m, k, n),
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![T::ZERO; groups * m * k];
                    for ((gb, bb), dab) in g
                        .chunks_exact(m * n)
                        .zip(bv.chunks_exact(k * n))
                        .zip(da.chunks_exact_mut(m * k))
                    {
                        if trans_b {
                            kernels::gemm_nn(gb, bb, dab, m, n, k);
                        } else {
                            kernels::gemm_nt(gb, bb, dab, m, n, k);
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::ZERO; groups * k * n];
                    for ((gb, ab), dbb) in g
                        .chunks_exact(m * n)
                        .zip(av.chunks_exact(m * k))
                        .zip(db.chunks_exact_mut(k * n))
                    {
                        if trans_b {
                            kernels::gemm_tn(gb, ab, dbb, n, m, k);
                        } else {
                            kernels::gemm_tn(ab, gb, dbb, k, m, n);
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) && self.wants(b) {
                    self.accumulate(grads, a, g.clone());
                    self.accumulate(grads, b, g);
                } else if self.wants(a) {
                    self.accumulate(grads, a, g);
                } else {
                    self.accumulate(grads, b, g);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let da = g.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(av).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddRow { x, bias } => {
                if self.wants(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![T::ZERO; n];
                    for row in g.chunks_exact(n) {
                        kernels::add_assign(&mut db, row);
                    }
                    self.accumulate(grads, bias, db);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, g);
                }
            }
            &Op::Scale { x, factor } => {
                let dx = g.iter().map(|&d| d * factor).collect();
                self.accumulate(grads, x, dx);
            }
            Op::MulConst { x, factors } => {
                let dx = g.iter().zip(factors).map(|(&d, &f)| d * f).collect();
                self.accumulate(grads, *x, dx);
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::ZERO { d } else { T::ZERO })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![T::ZERO; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let inner = kernels::dot(gr, yr);
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - inner);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::ZERO; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((acc, &gg), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *acc += gg * h;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::ZERO; d];
                    for gr in g.chunks_exact(d) {
                        kernels::add_assign(&mut db, gr);
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let inv_d = T::ONE / T::from_f64(d as f64);
                    let mut dx = vec![T::ZERO; g.len()];
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, ((gr, hr), dr)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        for ((dh, &gg), &gm) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *dh = gg * gm;
                        }
                        let mean_d = kernels::sum(&dxhat) * inv_d;
                        let mean_dh = kernels::dot(&dxhat, hr) * inv_d;
                        for ((o, &dh), &h) in dr.iter_mut().zip(&dxhat).zip(hr) {
                            *o = rstd[r] * (dh - mean_d - h * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, rows } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = vec![T::ZERO; shape[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    kernels::add_assign(&mut dt[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MaskKeys {
                x,
                key_pad,
                heads,
                seq,
            } => {
                let mut dx = g;
                for (gi, block) in dx.chunks_exact_mut(seq * seq).enumerate() {
                    let pad = &key_pad[(gi / heads) * seq..(gi / heads + 1) * seq];
                    for row in block.chunks_exact_mut(*seq) {
                        for (v, &p) in row.iter_mut().zip(pad) {
                            if p {
                                *v = T::ZERO;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.shape(x)[1];
                let dh = d / heads;
                let mut dx = vec![T::ZERO; g.len()];
                for b in 0..batch {
                    for t in 0..seq {
                        let dst = (b * seq + t) * d;
                        for h in 0..heads {
                            let src = ((b * heads + h) * seq + t) * dh;
                            dx[dst + h * dh..dst + (h + 1) * dh]
                                .copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = self.shape(x)[2];
                let d = dh * heads;
                let mut dx = vec![T::ZERO; g.len()];
                for b in 0..batch {
                    for t in 0..seq {
                        let src = (b * seq + t) * d;
                        for h in 0..heads {
                            let dst = ((b * heads + h) * seq + t) * dh;
                            dx[dst..dst + dh]
                                .copy_from_slice(&g[src + h * dh..src + (h + 1) * dh]);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                let shape = self.shape(*logits);
                let classes = shape[1];
                let scale = g[0] / T::from_f64(active.len() as f64);
                let mut dl = vec![T::ZERO; shape[0] * classes];
                for (&r, pr) in active.iter().zip(probs.chunks_exact(classes)) {
                    let dr = &mut dl[r * classes..(r + 1) * classes];
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d = p * scale;
                    }
                    dr[targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, g);
            }
        }
    }
}
