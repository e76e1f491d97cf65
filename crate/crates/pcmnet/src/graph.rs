//! Reverse-mode differentiation over a flat tape of tensor primitives.
//!
//! The op set is exactly what the network and losses need: matmul (plain and
//! batched), 1-D convolution with same-length padding, elementwise add/mul,
//! scalar affine, last-axis concat, relu/sigmoid/exp/clamped-log, masked
//! softmax over the last axis, full-tensor sum/mean, linear-interpolation
//! gathers, row scatter/permute/slice, and reshape. Every primitive checks
//! output finiteness; NaN/Inf is an error, not a silent value.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{PcmError, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        kernel: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        x: NodeId,
        mul: f64,
        add: f64,
    },
    ConcatLast {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Log {
        x: NodeId,
        eps: f64,
    },
    MaskedSoftmax {
        x: NodeId,
        mask: Rc<Vec<bool>>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    LerpGather {
        x: NodeId,
        positions: Rc<Vec<f64>>,
    },
    LerpGatherMean {
        x: NodeId,
        positions: Rc<Vec<f64>>,
        group: usize,
    },
    ScatterRows {
        x: NodeId,
        rows: Rc<Vec<usize>>,
    },
    PermuteRows {
        x: NodeId,
        perm: Rc<Vec<usize>>,
    },
    Reshape {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }
}

/// Recorded computation: nodes in topological order plus named parameters.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// `c += op(a) * op(b)` with row-major storage.
///
/// `op(a)` is `m x kk` (stored `kk x m` when `ta`), `op(b)` is `kk x n`
/// (stored `n x kk` when `tb`).
fn gemm(
    m: usize,
    n: usize,
    kk: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if kk == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (kk as isize, 1) };
    let (rsb, csb) = if tb { (1, kk as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            kk,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unfold1d(x: &[f64], t: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let mut u = vec![0.0; t * cin * kernel];
    for ti in 0..t {
        for d in 0..kernel {
            let src = ti as isize + d as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for i in 0..cin {
                u[ti * cin * kernel + i * kernel + d] = x[src * cin + i];
            }
        }
    }
    u
}

fn fold1d_into(du: &[f64], t: usize, cin: usize, kernel: usize, dx: &mut [f64]) {
    let pad = (kernel - 1) / 2;
    for ti in 0..t {
        for d in 0..kernel {
            let src = ti as isize + d as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for i in 0..cin {
                dx[src * cin + i] += du[ti * cin * kernel + i * kernel + d];
            }
        }
    }
}

/// Broadcast pattern accepted by add/mul: identical shapes, or a rank-1
/// right operand matching the last axis (broadcast over leading dims).
fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape == b.shape {
        return Ok(false);
    }
    if b.rank() == 1 && !a.shape.is_empty() && *a.shape.last().unwrap() == b.shape[0] {
        return Ok(true);
    }
    Err(PcmError::Shape(format!(
        "incompatible elementwise shapes {:?} and {:?}",
        a.shape, b.shape
    )))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].value.scalar_value()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, what: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(PcmError::NonFinite(what.to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(id)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "input")
    }

    /// Named trainable leaf.
    pub fn parameter(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let id = self.push(Op::Leaf, value, true, "parameter")?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (bk, bn) = self.value(b).dims2()?;
        let n = if transpose_b {
            if bn != k {
                return Err(PcmError::Shape(format!(
                    "matmul_nt inner dims {} vs {}",
                    k, bn
                )));
            }
            bk
        } else {
            if bk != k {
                return Err(PcmError::Shape(format!("matmul inner dims {} vs {}", k, bk)));
            }
            bn
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            n,
            k,
            &self.value(a).data,
            false,
            &self.value(b).data,
            transpose_b,
            &mut out,
            0.0,
        );
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Op::MatMul {
                a,
                b,
                transpose_b,
            },
            Tensor::new(vec![m, n], out)?,
            needs,
            "matmul",
        )
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (ba, m, k) = self.value(a).dims3()?;
        let (bb, bk, bn) = self.value(b).dims3()?;
        if ba != bb {
            return Err(PcmError::Shape(format!("bmm batch dims {} vs {}", ba, bb)));
        }
        let n = if transpose_b {
            if bn != k {
                return Err(PcmError::Shape(format!("bmm_nt inner dims {} vs {}", k, bn)));
            }
            bk
        } else {
            if bk != k {
                return Err(PcmError::Shape(format!("bmm inner dims {} vs {}", k, bk)));
            }
            bn
        };
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                m,
                n,
                k,
                &self.value(a).data[i * m * k..(i + 1) * m * k],
                false,
                &self.value(b).data[i * bk * bn..(i + 1) * bk * bn],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Op::Bmm {
                a,
                b,
                transpose_b,
            },
            Tensor::new(vec![ba, m, n], out)?,
            needs,
            "bmm",
        )
    }

    /// Same-length 1-D convolution along rows of a `T x Cin` input.
    /// Weight shape is `[Cout, Cin, kernel]`, kernel 1 or 3.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (t, cin) = self.value(x).dims2()?;
        let (cout, wcin, kernel) = self.value(w).dims3()?;
        if wcin != cin {
            return Err(PcmError::Shape(format!(
                "conv1d channels {} vs weight {}",
                cin, wcin
            )));
        }
        if kernel != 1 && kernel != 3 {
            return Err(PcmError::Invalid(format!(
                "conv1d kernel must be 1 or 3, got {}",
                kernel
            )));
        }
        let u = unfold1d(&self.value(x).data, t, cin, kernel);
        let mut out = vec![0.0; t * cout];
        gemm(
            t,
            cout,
            cin * kernel,
            &u,
            false,
            &self.value(w).data,
            true,
            &mut out,
            0.0,
        );
        let needs = self.ng(x) || self.ng(w);
        self.push(
            Op::Conv1d { x, w, kernel },
            Tensor::new(vec![t, cout], out)?,
            needs,
            "conv1d",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = broadcast_kind(self.value(a), self.value(b))?;
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let out: Vec<f64> = if bcast {
            let c = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % c])
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Add { a, b }, Tensor::new(shape, out)?, needs, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = broadcast_kind(self.value(a), self.value(b))?;
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let out: Vec<f64> = if bcast {
            let c = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, x)| x * bv[i % c])
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        };
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, needs, "mul")
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data.iter().map(|v| mul * v + add).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x);
        self.push(
            Op::Affine { x, mul, add },
            Tensor::new(shape, out)?,
            needs,
            "affine",
        )
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = &self.value(a).shape;
        let sb = &self.value(b).shape;
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(PcmError::Shape(format!(
                "concat shapes {:?} and {:?}",
                sa, sb
            )));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Op::ConcatLast { a, b },
            Tensor::new(shape, out)?,
            needs,
            "concat",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x);
        self.push(Op::Relu { x }, Tensor::new(shape, out)?, needs, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .value(x)
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x);
        self.push(Op::Sigmoid { x }, Tensor::new(shape, out)?, needs, "sigmoid")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data.iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x);
        self.push(Op::Exp { x }, Tensor::new(shape, out)?, needs, "exp")
    }

    /// Natural log with an epsilon clamp: `ln(max(x, eps))`.
    pub fn log(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data.iter().map(|v| v.max(eps).ln()).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x);
        self.push(Op::Log { x, eps }, Tensor::new(shape, out)?, needs, "log")
    }

    /// Softmax over the last axis restricted to unmasked entries. Masked
    /// entries get exactly zero weight. A row with no unmasked entries is an
    /// error; callers must resolve empty groups first.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Rc<Vec<bool>>) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape.is_empty() {
            return Err(PcmError::Shape("masked_softmax on scalar".into()));
        }
        if mask.len() != v.numel() {
            return Err(PcmError::Shape(format!(
                "mask length {} vs tensor {}",
                mask.len(),
                v.numel()
            )));
        }
        let n = *v.shape.last().unwrap();
        let rows = v.numel() / n;
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let lo = r * n;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                if mask[lo + k] {
                    max = max.max(v.data[lo + k]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(PcmError::EmptySoftmaxRow(r));
            }
            let mut sum = 0.0;
            for k in 0..n {
                if mask[lo + k] {
                    let e = (v.data[lo + k] - max).exp();
                    out[lo + k] = e;
                    sum += e;
                }
            }
            for k in 0..n {
                out[lo + k] /= sum;
            }
        }
        let shape = v.shape.clone();
        let needs = self.ng(x);
        self.push(
            Op::MaskedSoftmax { x, mask },
            Tensor::new(shape, out)?,
            needs,
            "masked_softmax",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.ng(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), needs, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(PcmError::Shape("mean of empty tensor".into()));
        }
        let s: f64 = self.value(x).data.iter().sum::<f64>() / n as f64;
        let needs = self.ng(x);
        self.push(Op::Mean { x }, Tensor::scalar(s), needs, "mean")
    }

    /// Gather rows of a `T x C` tensor at fractional positions by linear
    /// interpolation; positions are clamped to `[0, T-1]`.
    pub fn lerp_gather(&mut self, x: NodeId, positions: Rc<Vec<f64>>) -> Result<NodeId> {
        let (t, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; positions.len() * c];
        for (r, &p) in positions.iter().enumerate() {
            let (lo, hi, f) = lerp_indices(p, t);
            for j in 0..c {
                out[r * c + j] =
                    (1.0 - f) * self.value(x).data[lo * c + j] + f * self.value(x).data[hi * c + j];
            }
        }
        let needs = self.ng(x);
        self.push(
            Op::LerpGather { x, positions: positions.clone() },
            Tensor::new(vec![positions.len(), c], out)?,
            needs,
            "lerp_gather",
        )
    }

    /// Like `lerp_gather`, but positions come in fixed-size groups and each
    /// output row is the mean over its group.
    pub fn lerp_gather_mean(
        &mut self,
        x: NodeId,
        positions: Rc<Vec<f64>>,
        group: usize,
    ) -> Result<NodeId> {
        if group == 0 || positions.len() % group != 0 {
            return Err(PcmError::Invalid(format!(
                "position count {} not divisible by group {}",
                positions.len(),
                group
            )));
        }
        let (t, c) = self.value(x).dims2()?;
        let n = positions.len() / group;
        let mut out = vec![0.0; n * c];
        let inv = 1.0 / group as f64;
        for r in 0..n {
            for s in 0..group {
                let (lo, hi, f) = lerp_indices(positions[r * group + s], t);
                for j in 0..c {
                    out[r * c + j] += inv
                        * ((1.0 - f) * self.value(x).data[lo * c + j]
                            + f * self.value(x).data[hi * c + j]);
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Op::LerpGatherMean {
                x,
                positions: positions.clone(),
                group,
            },
            Tensor::new(vec![n, c], out)?,
            needs,
            "lerp_gather_mean",
        )
    }

    /// Scatter the rows of an `N x C` tensor into a zero `out_rows x C`
    /// tensor at the given (unique) destination rows.
    pub fn scatter_rows(
        &mut self,
        x: NodeId,
        rows: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2()?;
        if rows.len() != n {
            return Err(PcmError::Shape(format!(
                "row index count {} vs input rows {}",
                rows.len(),
                n
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(PcmError::Invalid(format!(
                "scatter row {} out of range {}",
                bad, out_rows
            )));
        }
        let mut out = vec![0.0; out_rows * c];
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&self.value(x).data[i * c..(i + 1) * c]);
        }
        let needs = self.ng(x);
        self.push(
            Op::ScatterRows { x, rows: rows.clone() },
            Tensor::new(vec![out_rows, c], out)?,
            needs,
            "scatter_rows",
        )
    }

    /// Reorder rows: `out[r] = in[perm[r]]`.
    pub fn permute_rows(&mut self, x: NodeId, perm: Rc<Vec<usize>>) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2()?;
        if perm.len() != n {
            return Err(PcmError::Shape(format!(
                "permutation length {} vs rows {}",
                perm.len(),
                n
            )));
        }
        let mut out = vec![0.0; n * c];
        for (r, &src) in perm.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&self.value(x).data[src * c..(src + 1) * c]);
        }
        let needs = self.ng(x);
        self.push(
            Op::PermuteRows { x, perm: perm.clone() },
            Tensor::new(vec![n, c], out)?,
            needs,
            "permute_rows",
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(PcmError::Shape(format!(
                "reshape {:?} -> {:?}",
                self.value(x).shape,
                shape
            )));
        }
        let data = self.value(x).data.clone();
        let needs = self.ng(x);
        self.push(Op::Reshape { x }, Tensor::new(shape, data)?, needs, "reshape")
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(PcmError::Shape(format!(
                "slice {}..{} out of {} columns",
                start,
                start + len,
                c
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).data[i * c + start..i * c + start + len]);
        }
        let needs = self.ng(x);
        self.push(
            Op::SliceCols { x, start, len },
            Tensor::new(vec![r, len], out)?,
            needs,
            "slice_cols",
        )
    }

    /// Reverse-mode sweep from a scalar loss. Returns d(loss)/d(param) for
    /// every registered parameter; parameters the loss does not depend on get
    /// exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(PcmError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.value(*id).shape.clone();
            let data = match &grads[id.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.value(*id).numel()],
            };
            by_name.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = self.value(*a).dims2()?;
                let n = node.value.shape[1];
                if self.ng(*a) {
                    let da = self.grad_buf(grads, *a);
                    if *transpose_b {
                        // dA += dC * B, B stored n x k
                        gemm(m, k, n, g, false, &self.value(*b).data, false, da, 1.0);
                    } else {
                        // dA += dC * B^T, B stored k x n
                        gemm(m, k, n, g, false, &self.value(*b).data, true, da, 1.0);
                    }
                }
                if self.ng(*b) {
                    let db = self.grad_buf(grads, *b);
                    if *transpose_b {
                        // dB += dC^T * A, result n x k
                        gemm(n, k, m, g, true, &self.value(*a).data, false, db, 1.0);
                    } else {
                        // dB += A^T * dC, result k x n
                        gemm(k, n, m, &self.value(*a).data, true, g, false, db, 1.0);
                    }
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (ba, m, k) = self.value(*a).dims3()?;
                let n = node.value.shape[2];
                let (_, brows, bcols) = self.value(*b).dims3()?;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.ng(*a) {
                    let da = self.grad_buf(grads, *a);
                    for i in 0..ba {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * brows * bcols..(i + 1) * brows * bcols];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        gemm(m, k, n, gi, false, bi, !*transpose_b, dai, 1.0);
                    }
                }
                if self.ng(*b) {
                    let db = self.grad_buf(grads, *b);
                    for i in 0..ba {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * brows * bcols..(i + 1) * brows * bcols];
                        if *transpose_b {
                            gemm(n, k, m, gi, true, ai, false, dbi, 1.0);
                        } else {
                            gemm(k, n, m, ai, true, gi, false, dbi, 1.0);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, kernel } => {
                let (t, cin) = self.value(*x).dims2()?;
                let (cout, _, _) = self.value(*w).dims3()?;
                let u = unfold1d(&self.value(*x).data, t, cin, *kernel);
                if self.ng(*x) {
                    let mut du = vec![0.0; t * cin * kernel];
                    gemm(
                        t,
                        cin * kernel,
                        cout,
                        g,
                        false,
                        &self.value(*w).data,
                        false,
                        &mut du,
                        0.0,
                    );
                    let dx = self.grad_buf(grads, *x);
                    fold1d_into(&du, t, cin, *kernel, dx);
                }
                if self.ng(*w) {
                    let dw = self.grad_buf(grads, *w);
                    gemm(cout, cin * kernel, t, g, true, &u, false, dw, 1.0);
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    let da = self.grad_buf(grads, *a);
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.ng(*b) {
                    let db = self.grad_buf(grads, *b);
                    let c = db.len();
                    if c == g.len() {
                        for (d, gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                    } else {
                        for (i, gv) in g.iter().enumerate() {
                            db[i % c] += gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let c = bv.len();
                if self.ng(*a) {
                    let da = self.grad_buf(grads, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i % c];
                    }
                }
                if self.ng(*b) {
                    let db = self.grad_buf(grads, *b);
                    for i in 0..g.len() {
                        db[i % c] += g[i] * av[i];
                    }
                }
            }
            Op::Affine { x, mul, .. } => {
                if self.ng(*x) {
                    let dx = self.grad_buf(grads, *x);
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += mul * gv;
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.value(*a).shape.last().unwrap();
                let cb = *self.value(*b).shape.last().unwrap();
                let rows = self.value(*a).numel() / ca;
                if self.ng(*a) {
                    let da = self.grad_buf(grads, *a);
                    for r in 0..rows {
                        for j in 0..ca {
                            da[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                }
                if self.ng(*b) {
                    let db = self.grad_buf(grads, *b);
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.ng(*x) {
                    let xv = &self.value(*x).data;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.ng(*x) {
                    let yv = &node.value.data;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..g.len() {
                        dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Exp { x } => {
                if self.ng(*x) {
                    let yv = &node.value.data;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..g.len() {
                        dx[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Log { x, eps } => {
                if self.ng(*x) {
                    let xv = &self.value(*x).data;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..g.len() {
                        if xv[i] > *eps {
                            dx[i] += g[i] / xv[i];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                if self.ng(*x) {
                    let yv = &node.value.data;
                    let n = *node.value.shape.last().unwrap();
                    let rows = yv.len() / n;
                    let dx = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let lo = r * n;
                        let mut dot = 0.0;
                        for k in 0..n {
                            if mask[lo + k] {
                                dot += yv[lo + k] * g[lo + k];
                            }
                        }
                        for k in 0..n {
                            if mask[lo + k] {
                                dx[lo + k] += yv[lo + k] * (g[lo + k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.ng(*x) {
                    let dx = self.grad_buf(grads, *x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.ng(*x) {
                    let dx = self.grad_buf(grads, *x);
                    let inv = 1.0 / dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += g[0] * inv;
                    }
                }
            }
            Op::LerpGather { x, positions } => {
                if self.ng(*x) {
                    let (t, c) = self.value(*x).dims2()?;
                    let dx = self.grad_buf(grads, *x);
                    for (r, &p) in positions.iter().enumerate() {
                        let (lo, hi, f) = lerp_indices(p, t);
                        for j in 0..c {
                            dx[lo * c + j] += (1.0 - f) * g[r * c + j];
                            dx[hi * c + j] += f * g[r * c + j];
                        }
                    }
                }
            }
            Op::LerpGatherMean { x, positions, group } => {
                if self.ng(*x) {
                    let (t, c) = self.value(*x).dims2()?;
                    let dx = self.grad_buf(grads, *x);
                    let inv = 1.0 / *group as f64;
                    let n = positions.len() / group;
                    for r in 0..n {
                        for s in 0..*group {
                            let (lo, hi, f) = lerp_indices(positions[r * group + s], t);
                            for j in 0..c {
                                dx[lo * c + j] += inv * (1.0 - f) * g[r * c + j];
                                dx[hi * c + j] += inv * f * g[r * c + j];
                            }
                        }
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                if self.ng(*x) {
                    let c = self.value(*x).shape[1];
                    let dx = self.grad_buf(grads, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::PermuteRows { x, perm } => {
                if self.ng(*x) {
                    let c = self.value(*x).shape[1];
                    let dx = self.grad_buf(grads, *x);
                    for (r, &src) in perm.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.ng(*x) {
                    let dx = self.grad_buf(grads, *x);
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.ng(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..r {
                        for j in 0..*len {
                            dx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        slot.as_mut().unwrap()
    }
}

fn lerp_indices(p: f64, t: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (t - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(t - 1);
    (lo, hi, p - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn masked_softmax_symmetric_pair() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let y = g.masked_softmax(x, Rc::new(vec![true, true])).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_excludes_masked_entry() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![3], vec![5.0, -2.0, 7.0]).unwrap())
            .unwrap();
        let y = g
            .masked_softmax(x, Rc::new(vec![true, false, true]))
            .unwrap();
        let v = &g.value(y).data;
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!(v.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn masked_softmax_all_masked_row_is_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let err = g.masked_softmax(x, Rc::new(vec![false, false]));
        assert!(matches!(err, Err(PcmError::EmptySoftmaxRow(0))));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, vec![2, 3]);
        let b = randn(&mut rng, vec![3, 4]);
        let mut g = Graph::new();
        let na = g.input(a.clone()).unwrap();
        let nb = g.input(b.clone()).unwrap();
        let nc = g.matmul(na, nb).unwrap();
        let oracle = reference::matmul_naive(&a.data, &b.data, 2, 3, 4);
        for (x, y) in g.value(nc).data.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, vec![3, 5]);
        let b = randn(&mut rng, vec![4, 5]);
        let bt: Vec<f64> = (0..5)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| b.data[j * 5 + i])
            .collect();
        let mut g = Graph::new();
        let na = g.input(a.clone()).unwrap();
        let nb = g.input(b.clone()).unwrap();
        let nc = g.matmul_nt(na, nb).unwrap();
        let oracle = reference::matmul_naive(&a.data, &bt, 3, 5, 4);
        for (x, y) in g.value(nc).data.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g
            .parameter("x", Tensor::new(vec![1], vec![3.0]).unwrap().with_grad())
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data, vec![6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g
            .parameter("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        let _w = g
            .parameter("w", Tensor::new(vec![2], vec![5.0, 5.0]).unwrap().with_grad())
            .unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data, vec![0.0, 0.0]);
        assert_eq!(grads.get("x").unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g
            .parameter("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_rejected() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![1], vec![1e308]).unwrap())
            .unwrap();
        let doubled = g.add(x, x);
        assert!(matches!(doubled, Err(PcmError::NonFinite(_))));
    }

    #[test]
    fn conv1d_same_padding_shapes_and_values() {
        // kernel 3 over a ramp with identity-ish weight picks the center tap
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        // w[o=0][i=0][d] = [0, 1, 0]
        let w = g
            .input(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let y = g.conv1d(x, w).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);

        // left tap shifts, zero-padded at the boundary
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let w = g
            .input(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let y = g.conv1d(x, w).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn lerp_gather_midpoints() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let y = g
            .lerp_gather(x, Rc::new(vec![0.0, 0.5, 1.0]))
            .unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn every_primitive_adjoint_passes_finite_differences() {
        // A composite graph touching all differentiable primitives, checked
        // against central differences on 10 seeds.
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt = randn(&mut rng, vec![5, 4]).with_grad();
            let wt = randn(&mut rng, vec![4, 4]).with_grad();
            let ct = randn(&mut rng, vec![1, 3, 3]).with_grad();
            let mask: Vec<bool> = (0..20).map(|i| i % 4 != 1).collect();

            let eval = |x: &Tensor, w: &Tensor, cw: &Tensor, g: &mut Graph| -> NodeId {
                let xn = g.parameter("x", x.clone()).unwrap();
                let wn = g.parameter("w", w.clone()).unwrap();
                let cn = g.parameter("c", cw.clone()).unwrap();
                let mm = g.matmul(xn, wn).unwrap();
                let nt = g.matmul_nt(mm, wn).unwrap();
                let sm = g.masked_softmax(nt, Rc::new(mask.clone())).unwrap();
                let cat = g.concat_last(sm, mm).unwrap();
                let sl = g.slice_cols(cat, 2, 3).unwrap();
                let sig = g.sigmoid(sl).unwrap();
                let rl = g.relu(sig).unwrap();
                let lg = g.log(rl, 1e-8).unwrap();
                let af = g.affine(lg, 0.3, 1.7).unwrap();
                let ex = g.exp(af).unwrap();
                let cv = g.conv1d(ex, cn).unwrap();
                let gth = g
                    .lerp_gather(cv, Rc::new(vec![0.3, 2.6, 4.0]))
                    .unwrap();
                let gm = g
                    .lerp_gather_mean(cv, Rc::new(vec![0.0, 1.5, 2.0, 3.3]), 2)
                    .unwrap();
                let sc = g.scatter_rows(gm, Rc::new(vec![1, 3]), 4).unwrap();
                let pm = g
                    .permute_rows(sc, Rc::new(vec![3, 1, 0, 2]))
                    .unwrap();
                let b3 = g.reshape(pm, vec![1, 4, 3]).unwrap();
                let bm = g.bmm_nt(b3, b3).unwrap();
                let bm2 = g.bmm(bm, b3).unwrap();
                let fl = g.reshape(bm2, vec![4, 3]).unwrap();
                let both = g.add(fl, fl).unwrap();
                let prod = g.mul(both, both).unwrap();
                let s1 = g.sum(prod).unwrap();
                let g1 = g.sum(gth).unwrap();
                let m1 = g.mean(prod).unwrap();
                let t1 = g.add(s1, g1).unwrap();
                g.add(t1, m1).unwrap()
            };

            let mut g = Graph::new();
            let loss = eval(&xt, &wt, &ct, &mut g);
            let grads = g.backward(loss).unwrap();

            let step = 1e-6;
            let mut max_rel: f64 = 0.0;
            for (name, base) in [("x", &xt), ("w", &wt), ("c", &ct)] {
                let analytic = grads.get(name).unwrap();
                for i in 0..base.numel() {
                    let mut plus = base.clone();
                    plus.data[i] += step;
                    let mut minus = base.clone();
                    minus.data[i] -= step;
                    let (xp, wp, cp) = match name {
                        "x" => (&plus, &wt, &ct),
                        "w" => (&xt, &plus, &ct),
                        _ => (&xt, &wt, &plus),
                    };
                    let (xm, wm, cm) = match name {
                        "x" => (&minus, &wt, &ct),
                        "w" => (&xt, &minus, &ct),
                        _ => (&xt, &wt, &minus),
                    };
                    let mut gp = Graph::new();
                    let lp = eval(xp, wp, cp, &mut gp);
                    let mut gm = Graph::new();
                    let lm = eval(xm, wm, cm, &mut gm);
                    let num = (gp.scalar_value(lp).unwrap() - gm.scalar_value(lm).unwrap())
                        / (2.0 * step);
                    let a = analytic.data[i];
                    let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(
                max_rel < 1e-5,
                "seed {}: max relative gradient error {:.3e}",
                seed,
                max_rel
            );
        }
    }
}
