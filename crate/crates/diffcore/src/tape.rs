use crate::error::{dim_err, Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::kernels::{self, split_axis};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How per-element loss terms are combined into the scalar objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast {
        x: Var,
        v: Var,
        axis: usize,
    },
    MulBroadcast {
        x: Var,
        v: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Bilinear(Var),
    AdaptivePool(Var),
    Conv2d {
        x: Var,
        w: Var,
        k: usize,
        cols: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    WeightedCe {
        logits: Var,
        probs: Vec<T>,
        target: Vec<u8>,
        weights: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for a later reverse sweep.
///
/// Nodes are appended in evaluation order, so the node list is itself a
/// topological order and backward simply walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Grads<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_axis(op: &'static str, rank: usize, axis: usize) -> Result<()> {
    if axis >= rank {
        return dim_err(op, format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal leading dimension. `ta`/`tb` transpose the
    /// trailing two axes of the respective operand.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return dim_err(
                "matmul",
                format!("unsupported operand ranks {sa:?} x {sb:?}"),
            );
        }
        let batched = sa.len() == 3;
        let batch = if batched { sa[0] } else { 1 };
        if batched && sb[0] != batch {
            return dim_err("matmul", format!("batch mismatch {sa:?} x {sb:?}"));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return dim_err(
                "matmul",
                format!(
                    "inner dimensions disagree: {sa:?}{} x {sb:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                ),
            );
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let av = MatRef::new(&da[i * ra * ca..(i + 1) * ra * ca], ra, ca).t_if(ta);
                let bv = MatRef::new(&db[i * rb * cb..(i + 1) * rb * cb], rb, cb).t_if(tb);
                gemm(av, bv, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let shape = if batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let ng = self.ng(&[a, b]);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            ng,
            Op::MatMul { a, b, ta, tb },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`, the layout of a linear layer with weight `[d_out x d_in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push("add", t, ng, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push("mul", t, ng, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a]);
        self.push("scale", t, ng, Op::Scale(a, c))
    }

    fn broadcast_check(
        &self,
        op: &'static str,
        x: Var,
        v: Var,
        axis: usize,
    ) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        check_axis(op, sx.len(), axis)?;
        if self.value(v).numel() != sx[axis] || self.shape(v).len() != 1 {
            return dim_err(
                op,
                format!(
                    "vector {:?} does not match axis {axis} of {sx:?}",
                    self.shape(v)
                ),
            );
        }
        Ok(split_axis(sx, axis))
    }

    /// `x + v` with the vector `v` broadcast along `axis` of `x`.
    pub fn add_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.broadcast_check("add_broadcast", x, v, axis)?;
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for o in 0..outer {
            for (s, &vs) in vd.iter().enumerate().take(n) {
                let base = (o * n + s) * inner;
                data[base..base + inner].iter_mut().for_each(|e| *e += vs);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x, v]);
        self.push("add_broadcast", t, ng, Op::AddBroadcast { x, v, axis })
    }

    /// `x * v` with the vector `v` broadcast along `axis` of `x`.
    pub fn mul_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.broadcast_check("mul_broadcast", x, v, axis)?;
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for o in 0..outer {
            for (s, &vs) in vd.iter().enumerate().take(n) {
                let base = (o * n + s) * inner;
                data[base..base + inner].iter_mut().for_each(|e| *e *= vs);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x, v]);
        self.push("mul_broadcast", t, ng, Op::MulBroadcast { x, v, axis })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push("gelu", t, ng, Op::Gelu(x))
    }

    /// Normalises over the last axis, then applies the optional affine pair.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if shape.is_empty() || d == 0 {
            return dim_err("layer_norm", "normalised dimension is empty");
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return dim_err(
                    "layer_norm",
                    format!("affine parameter {:?} does not match d={d}", self.shape(p)),
                );
            }
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = if var == T::zero() {
                    T::zero()
                } else {
                    (v - mean) * rs
                };
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.value(g).data();
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(gd).for_each(|(o, &g)| *o *= g));
        }
        if let Some(b) = beta {
            let bd = self.value(b).data();
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b));
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let ng = self.ng(&inputs);
        let t = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            t,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", shape.len(), axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for s in 0..n {
                    m = m.max(out[base + s * inner]);
                }
                let mut z = T::zero();
                for s in 0..n {
                    let e = (out[base + s * inner] - m).exp();
                    out[base + s * inner] = e;
                    z += e;
                }
                for s in 0..n {
                    out[base + s * inner] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        self.push("softmax", t, ng, Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", base.len(), axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(inputs);
        self.push(
            "concat",
            t,
            ng,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", shape.len(), axis)?;
        if len == 0 || start + len > shape[axis] {
            return dim_err(
                "narrow",
                format!(
                    "range {start}..{} outside axis of length {}",
                    start + len,
                    shape[axis]
                ),
            );
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * n + start) * inner;
            out.extend_from_slice(&d[b..b + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(s, out)?;
        let ng = self.ng(&[x]);
        self.push("narrow", t, ng, Op::Narrow { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        self.push("reshape", t, ng, Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            );
        }
        let out = kernels::permute(self.value(x).data(), &shape, perm);
        let ns: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(ns, out)?;
        let ng = self.ng(&[x]);
        self.push(
            "permute",
            t,
            ng,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Bilinear resampling of `[C x h x w]` to `[C x out_h x out_w]` with
    /// half-pixel centres (the `align_corners = false` convention).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return dim_err("bilinear_resize", format!("expected [C, h, w], got {s:?}"));
        }
        if out_h == 0 || out_w == 0 {
            return dim_err("bilinear_resize", "target size must be at least 1x1");
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            let plane = &d[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        let ng = self.ng(&[x]);
        self.push("bilinear_resize", t, ng, Op::Bilinear(x))
    }

    /// Adaptive average pooling of `[C x h x w]` onto an `out_h x out_w` grid.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return dim_err(
                "adaptive_avg_pool",
                format!("cannot pool {s:?} to {out_h}x{out_w}"),
            );
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let by = kernels::pool_bins(h, out_h);
        let bx = kernels::pool_bins(w, out_w);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            let plane = &d[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    let n = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out[(ci * out_h + oy) * out_w + ox] = acc / n;
                }
            }
        }
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        let ng = self.ng(&[x]);
        self.push("adaptive_avg_pool", t, ng, Op::AdaptivePool(x))
    }

    /// Stride-1 "same" convolution of `[Cin x H x W]` with weight
    /// `[Cout x Cin x k x k]` (k odd); borders replicate the edge pixels.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2].is_multiple_of(2) {
            return dim_err(
                "conv2d",
                format!("input {sx:?} incompatible with weight {sw:?}"),
            );
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let hw = h * wd;
        let ng = self.ng(&[x, w]);
        let cols = if k == 1 {
            Vec::new()
        } else {
            kernels::im2col(self.value(x).data(), cin, h, wd, k)
        };
        let mut out = vec![T::zero(); cout * hw];
        {
            let colref = if k == 1 { self.value(x).data() } else { &cols };
            let wm = MatRef::new(self.value(w).data(), cout, cin * k * k);
            gemm(
                wm,
                MatRef::new(colref, cin * k * k, hw),
                T::zero(),
                &mut out,
            );
        }
        let t = Tensor::new(vec![cout, h, wd], out)?;
        let keep = if ng && self.nodes[w.0].needs_grad {
            cols
        } else {
            Vec::new()
        };
        self.push(
            "conv2d",
            t,
            ng,
            Op::Conv2d {
                x,
                w,
                k,
                cols: keep,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(&[x]);
        self.push("sum", Tensor::scalar(s), ng, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        let ng = self.ng(&[x]);
        self.push("mean", Tensor::scalar(s), ng, Op::Mean(x))
    }

    /// Class-weighted cross-entropy over class-major logits `[K x ...]`.
    ///
    /// Each pixel contributes `w[y] * -log softmax(logits)[y]`; `Mean` divides
    /// the total by the number of pixels.
    pub fn weighted_ce(
        &mut self,
        logits: Var,
        target: &[u8],
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return dim_err(
                "weighted_ce",
                format!("expected class-major logits, got {shape:?}"),
            );
        }
        let k = shape[0];
        let px = self.value(logits).numel() / k;
        if target.len() != px || weights.len() != k {
            return dim_err(
                "weighted_ce",
                format!(
                    "{} targets / {} weights for logits {shape:?}",
                    target.len(),
                    weights.len()
                ),
            );
        }
        if let Some(pos) = target.iter().position(|&y| y as usize >= k) {
            return Err(Error::Data(format!(
                "target value {} at pixel {pos} is not a class index below {k}",
                target[pos]
            )));
        }
        let ld = self.value(logits).data();
        let wt: Vec<T> = weights.iter().map(|&w| T::from_f64(w)).collect();
        let mut probs = vec![T::zero(); k * px];
        let mut total = 0.0f64;
        for p in 0..px {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(ld[c * px + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (ld[c * px + p] - m).exp();
                probs[c * px + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * px + p] /= z;
            }
            let y = target[p] as usize;
            let nll = (m + z.ln() - ld[y * px + p]).as_f64();
            total += weights[y] * nll;
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / px as f64,
        };
        let ng = self.ng(&[logits]);
        self.push(
            "weighted_ce",
            Tensor::scalar(T::from_f64(total * scale)),
            ng,
            Op::WeightedCe {
                logits,
                probs,
                target: target.to_vec(),
                weights: wt,
                scale: T::from_f64(scale),
            },
        )
    }

    /// Patchifies `[C x H x W]` into non-overlapping `p x p` patches in
    /// row-major patch order; each row is flattened in `(c, dy, dx)` order.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
            return dim_err("patchify", format!("patch size {p} does not tile {s:?}"));
        }
        let (c, gh, gw) = (s[0], s[1] / p, s[2] / p);
        let v = self.reshape(x, &[c, gh, p, gw, p])?;
        let v = self.permute(v, &[1, 3, 0, 2, 4])?;
        self.reshape(v, &[gh * gw, c * p * p])
    }

    /// Token embedding: patchify then project with `proj [(C·p·p) x d]`.
    pub fn patch_embed(&mut self, x: Var, p: usize, proj: Var) -> Result<Var> {
        let patches = self.patchify(x, p)?;
        self.matmul(patches, proj)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Tensor::new(self.nodes[i].value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Grads { leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batched = sa.len() == 3;
                let batch = if batched { sa[0] } else { 1 };
                let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let (m, n) = (
                    out_shape[out_shape.len() - 2],
                    out_shape[out_shape.len() - 1],
                );
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        let gv = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let bv =
                            MatRef::new(&db[bi * rb * cb..(bi + 1) * rb * cb], rb, cb).t_if(*tb);
                        let dst = &mut ga[bi * ra * ca..(bi + 1) * ra * ca];
                        if *ta {
                            gemm(bv, gv.t(), T::one(), dst);
                        } else {
                            gemm(gv, bv.t(), T::one(), dst);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        let gv = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let av =
                            MatRef::new(&da[bi * ra * ca..(bi + 1) * ra * ca], ra, ca).t_if(*ta);
                        let dst = &mut gb[bi * rb * cb..(bi + 1) * rb * cb];
                        if *tb {
                            gemm(gv.t(), av, T::one(), dst);
                        } else {
                            gemm(av.t(), gv, T::one(), dst);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut()
                        .zip(g.iter().zip(db))
                        .for_each(|(s, (&g, &y))| *s += g * y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut()
                        .zip(g.iter().zip(da))
                        .for_each(|(s, (&g, &x))| *s += g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c);
                }
            }
            Op::AddBroadcast { x, v, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *v) {
                    for o in 0..outer {
                        for (c, sv) in s.iter_mut().enumerate().take(n) {
                            let base = (o * n + c) * inner;
                            *sv += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MulBroadcast { x, v, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let (dx, dv) = (self.value(*x).data(), self.value(*v).data());
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for (c, &vs) in dv.iter().enumerate().take(n) {
                            let base = (o * n + c) * inner;
                            s[base..base + inner]
                                .iter_mut()
                                .zip(&g[base..base + inner])
                                .for_each(|(s, &g)| *s += g * vs);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *v) {
                    for o in 0..outer {
                        for (c, sv) in s.iter_mut().enumerate().take(n) {
                            let base = (o * n + c) * inner;
                            *sv += g[base..base + inner]
                                .iter()
                                .zip(&dx[base..base + inner])
                                .map(|(&g, &x)| g * x)
                                .sum::<T>();
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut()
                        .zip(g.iter().zip(dx))
                        .for_each(|(s, (&g, &x))| *s += g * kernels::gelu_grad(x));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = rstd.len();
                if let Some(b) = beta {
                    if let Some(s) = self.slot(grads, *b) {
                        for r in 0..rows {
                            s.iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                                .for_each(|(s, &g)| *s += g);
                        }
                    }
                }
                if let Some(gm) = gamma {
                    if let Some(s) = self.slot(grads, *gm) {
                        for r in 0..rows {
                            let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                            s.iter_mut()
                                .zip(gr.iter().zip(xr))
                                .for_each(|(s, (&g, &xh))| *s += g * xh);
                        }
                    }
                }
                let gamma_vals = gamma.map(|gm| self.value(gm).data());
                if let Some(s) = self.slot(grads, *x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = match gamma_vals {
                                Some(gv) => gr[j] * gv[j],
                                None => gr[j],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            s[r * d + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot = (0..n)
                                .map(|c| g[base + c * inner] * y[base + c * inner])
                                .sum::<T>();
                            for c in 0..n {
                                let idx = base + c * inner;
                                s[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut off = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if let Some(s) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + n) * inner];
                            s[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, &g)| *s += g);
                        }
                    }
                    off += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x);
                let (outer, n, inner) = split_axis(full, *axis);
                let len = out_shape[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let b = (o * n + start) * inner;
                        s[b..b + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(s, &g)| *s += g);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(s) = self.slot(grads, *x) {
                    let back = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
                    s.iter_mut().zip(back).for_each(|(s, g)| *s += g);
                }
            }
            Op::Bilinear(x) => {
                let si = self.shape(*x);
                let (c, h, w) = (si[0], si[1], si[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                if let Some(s) = self.slot(grads, *x) {
                    for ci in 0..c {
                        let plane = &mut s[ci * h * w..(ci + 1) * h * w];
                        let src = &g[ci * oh * ow..(ci + 1) * oh * ow];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let ly = T::from_f64(ly);
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let lx = T::from_f64(lx);
                                let gv = src[oy * ow + ox];
                                let top = gv * (T::one() - ly);
                                let bot = gv * ly;
                                plane[y0 * w + x0] += top * (T::one() - lx);
                                plane[y0 * w + x1] += top * lx;
                                plane[y1 * w + x0] += bot * (T::one() - lx);
                                plane[y1 * w + x1] += bot * lx;
                            }
                        }
                    }
                }
            }
            Op::AdaptivePool(x) => {
                let si = self.shape(*x);
                let (c, h, w) = (si[0], si[1], si[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let by = kernels::pool_bins(h, oh);
                let bx = kernels::pool_bins(w, ow);
                if let Some(s) = self.slot(grads, *x) {
                    for ci in 0..c {
                        for (oy, &(y0, y1)) in by.iter().enumerate() {
                            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                                let n = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                                let gv = g[(ci * oh + oy) * ow + ox] / n;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        s[(ci * h + y) * w + xx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, k, cols } => {
                let sx = self.shape(*x);
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = out_shape[0];
                let hw = h * wd;
                let kk = cin * k * k;
                let gv = MatRef::new(g, cout, hw);
                if let Some(s) = self.slot(grads, *w) {
                    let colref = if *k == 1 {
                        self.value(*x).data()
                    } else {
                        cols.as_slice()
                    };
                    gemm(gv, MatRef::new(colref, kk, hw).t(), T::one(), s);
                }
                let wv = MatRef::new(self.value(*w).data(), cout, kk);
                if let Some(s) = self.slot(grads, *x) {
                    if *k == 1 {
                        gemm(wv.t(), gv, T::one(), s);
                    } else {
                        let mut dcols = vec![T::zero(); kk * hw];
                        gemm(wv.t(), gv, T::zero(), &mut dcols);
                        kernels::col2im(&dcols, cin, h, wd, *k, s);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            Op::WeightedCe {
                logits,
                probs,
                target,
                weights,
                scale,
            } => {
                let px = target.len();
                let k = weights.len();
                if let Some(s) = self.slot(grads, *logits) {
                    let gs = g[0] * *scale;
                    for (p, &y) in target.iter().enumerate() {
                        let y = y as usize;
                        let wy = weights[y] * gs;
                        for c in 0..k {
                            let ind = if c == y { T::one() } else { T::zero() };
                            s[c * px + p] += wy * (probs[c * px + p] - ind);
                        }
                    }
                }
            }
        }
    }
}
