use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::conv::{Conv2dGeom, Patches};
use super::lstm::{self, LstmCache, LstmDims};
use super::{check_shape, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Log10,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<S: Float> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: usize,
        k: usize,
        bias: Option<usize>,
        patches: Patches,
        cout: usize,
    },
    ConvTranspose {
        x: usize,
        k: usize,
        bias: Option<usize>,
        /// Patches of the equivalent forward convolution whose input is this
        /// op's output.
        patches: Patches,
        cin: usize,
    },
    Binary {
        a: usize,
        b: usize,
        kind: Binary,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    Scale {
        x: usize,
        c: S,
    },
    Clamp {
        x: usize,
        lo: S,
        hi: S,
    },
    PRelu {
        x: usize,
        alpha: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        src_block: usize,
        offset: usize,
        block: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Gather {
        x: usize,
        idx: Rc<[usize]>,
    },
    ScatterAdd {
        x: usize,
        idx: Rc<[usize]>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    MaskedFill {
        x: usize,
        mask: Rc<[bool]>,
    },
    Lstm {
        x: usize,
        w_ih: usize,
        w_hh: usize,
        b: usize,
        reverse: bool,
        cache: LstmCache<S>,
    },
}

impl<S: Float> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Conv { x, k, bias, .. } | Op::ConvTranspose { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias.iter().copied());
                v
            }
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::MaskedFill { x, .. } => vec![*x],
            Op::PRelu { x, alpha } => vec![*x, *alpha],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Lstm {
                x, w_ih, w_hh, b, ..
            } => vec![*x, *w_ih, *w_hh, *b],
        }
    }
}

struct Node<S: Float> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Float> Gradients<S> {
    /// Gradient of the loss with respect to a leaf, or `None` when the leaf
    /// does not require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations for reverse-mode differentiation. Single-threaded;
/// independent tapes may run on separate threads.
#[derive(Default)]
pub struct Tape<S: Float> {
    nodes: RefCell<Vec<Node<S>>>,
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn slot<S: Float>(grads: &mut [Option<Vec<S>>], i: usize, len: usize) -> &mut Vec<S> {
    grads[i].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Float>(grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let acc = slot(grads, i, g.len());
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

impl<S: Float> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf_node(&self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a copy of `t`; gradients are tracked when `t` requires them.
    pub fn leaf(&self, t: &Tensor<S>) -> Var {
        self.leaf_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        Ok(self.leaf_node(shape, data, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [S]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone()).unwrap()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.value(v)[0]
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            false,
            false,
            m,
            k,
            n,
            S::one(),
            &nodes[a.0].value,
            &nodes[b.0].value,
            S::zero(),
            &mut out,
        );
        drop(nodes);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = bias {
            let s = self.shape(b);
            if s != [channels] {
                return Err(Error::dim(op, &s, &[channels]));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x` (`C_in×H×W`) with `k` (`C_out×C_in×kh×kw`),
    /// plus an optional per-channel bias.
    pub fn conv2d(&self, x: Var, k: Var, bias: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = geom
            .conv_out(h, w, kh, kw)
            .ok_or_else(|| Error::dim("conv2d", &sx, &sk))?;
        self.check_bias(bias, cout, "conv2d bias")?;
        let patches = Patches {
            c: cin,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        let nodes = self.nodes.borrow();
        let mut col = vec![S::zero(); patches.rows() * patches.cols()];
        patches.im2col(&nodes[x.0].value, &mut col);
        let mut out = vec![S::zero(); cout * patches.cols()];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(patches.cols()).zip(&nodes[b.0].value) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        S::gemm(
            false,
            false,
            cout,
            patches.rows(),
            patches.cols(),
            S::one(),
            &nodes[k.0].value,
            &col,
            S::one(),
            &mut out,
        );
        drop(nodes);
        Ok(self.push(
            vec![cout, oh, ow],
            out,
            Op::Conv {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                patches,
                cout,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`] with kernel `k` laid out as
    /// `C_in×C_out×kh×kw`, mapping `C_in×H×W` to
    /// `C_out×((H−1)·sh−2ph+kh)×((W−1)·sw−2pw+kw)`.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[0] {
            return Err(Error::dim("conv2d_transpose", &sx, &sk));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[1], sk[2], sk[3]);
        let (oh, ow) = geom
            .transpose_out(h, w, kh, kw)
            .ok_or_else(|| Error::dim("conv2d_transpose", &sx, &sk))?;
        self.check_bias(bias, cout, "conv2d_transpose bias")?;
        let patches = Patches {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            oh: h,
            ow: w,
            geom,
        };
        let nodes = self.nodes.borrow();
        let mut col = vec![S::zero(); patches.rows() * patches.cols()];
        S::gemm(
            true,
            false,
            patches.rows(),
            cin,
            patches.cols(),
            S::one(),
            &nodes[k.0].value,
            &nodes[x.0].value,
            S::zero(),
            &mut col,
        );
        let mut out = vec![S::zero(); cout * oh * ow];
        patches.col2im(&col, &mut out);
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(oh * ow).zip(&nodes[b.0].value) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        drop(nodes);
        Ok(self.push(
            vec![cout, oh, ow],
            out,
            Op::ConvTranspose {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                patches,
                cin,
            },
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::dim(name, &na.shape, &nb.shape));
        };
        let len = la.max(lb);
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<S> = (0..len)
            .map(|i| {
                f(
                    na.value[if la == 1 { 0 } else { i }],
                    nb.value[if lb == 1 { 0 } else { i }],
                )
            })
            .collect();
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
            },
        ))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[x.0];
        if let Unary::Log10 = kind {
            if let Some(bad) = n.value.iter().find(|v| **v <= S::zero() || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log10",
                    msg: format!("nonpositive argument {bad}"),
                });
            }
        }
        let out: Vec<S> = n
            .value
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => S::one() / (S::one() + (-v).exp()),
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(S::zero()),
                Unary::Abs => v.abs(),
                Unary::Log10 => v.log10(),
                Unary::Square => v * v,
            })
            .collect();
        let shape = n.shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Unary { x: x.0, kind }))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    /// Rectifier; its derivative at 0 is taken as 0.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// Base-10 logarithm; nonpositive inputs are a domain error.
    pub fn log10(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log10)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&self, x: Var, c: S) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let out = nodes[x.0].value.iter().map(|&v| v * c).collect();
        let shape = nodes[x.0].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Scale { x: x.0, c }))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let nodes = self.nodes.borrow();
        let out = nodes[x.0]
            .value
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        let shape = nodes[x.0].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Clamp { x: x.0, lo, hi }))
    }

    /// Parametric rectifier with a single learnable slope `alpha` (shape `[1]`).
    pub fn prelu(&self, x: Var, alpha: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        if nodes[alpha.0].value.len() != 1 {
            return Err(Error::dim(
                "prelu",
                &nodes[x.0].shape,
                &nodes[alpha.0].shape,
            ));
        }
        let a = nodes[alpha.0].value[0];
        let out = nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > S::zero() { v } else { a * v })
            .collect();
        let shape = nodes[x.0].shape.clone();
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::PRelu {
                x: x.0,
                alpha: alpha.0,
            },
        ))
    }

    /// Entries where `mask` is true are replaced by `-inf`, so a following
    /// softmax assigns them exactly zero weight.
    pub fn mask_neg_inf(&self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[x.0];
        if mask.len() != n.value.len() {
            return Err(Error::dim("mask", &n.shape, &[mask.len()]));
        }
        let out = n
            .value
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { S::neg_infinity() } else { v })
            .collect();
        let shape = n.shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::MaskedFill { x: x.0, mask }))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let shape = nodes[x.0].shape.clone();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let src = &nodes[x.0].value;
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x: x.0,
                outer,
                n,
                inner,
            },
        ))
    }

    /// Normalises each row over the last dimension, then applies `gain` and
    /// `bias` (both of length `D`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let shape = nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        for p in [gain, bias] {
            if nodes[p.0].shape != [d] {
                return Err(Error::dim("layer_norm", &shape, &nodes[p.0].shape));
            }
        }
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let src = &nodes[x.0].value;
        let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
        let rows = src.len() / d;
        let dn = S::from_f64(d as f64);
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    // ---- shape ----------------------------------------------------------

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.0].shape.clone();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        let mut blocks = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
            blocks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &blk) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&nodes[p.0].value[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                outer,
                blocks,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let shape = nodes[x.0].shape.clone();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let src_block = n * inner;
        let (offset, block) = (start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            out.extend_from_slice(&nodes[x.0].value[o * src_block + offset..][..block]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        drop(nodes);
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                x: x.0,
                outer,
                src_block,
                offset,
                block,
            },
        ))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let value = self.nodes.borrow()[x.0].value.clone();
        check_shape(&shape, value.len())?;
        Ok(self.push(shape, value, Op::Reshape { x: x.0 }))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let s = nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &nodes[x.0].value;
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        drop(nodes);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x: x.0, rows, cols }))
    }

    /// `out[i] = x[idx[i]]` over the flattened input; gradients scatter back.
    pub fn gather(&self, x: Var, idx: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, idx.len())?;
        let nodes = self.nodes.borrow();
        let src = &nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        drop(nodes);
        Ok(self.push(shape, out, Op::Gather { x: x.0, idx }))
    }

    /// `out[idx[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter_add(
        &self,
        x: Var,
        idx: Rc<[usize]>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        check_shape(&shape, len)?;
        let nodes = self.nodes.borrow();
        let src = &nodes[x.0].value;
        if idx.len() != src.len() {
            return Err(Error::dim("scatter_add", &nodes[x.0].shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::Contract(format!(
                "scatter index {bad} out of range for {len} elements"
            )));
        }
        let mut out = vec![S::zero(); len];
        for (&i, &v) in idx.iter().zip(src) {
            out[i] += v;
        }
        drop(nodes);
        Ok(self.push(shape, out, Op::ScatterAdd { x: x.0, idx }))
    }

    /// Repeats a rank-2 tensor `reps` times along the first axis.
    pub fn tile(&self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || reps == 0 {
            return Err(Error::Contract(format!("tile of {s:?} by {reps}")));
        }
        let n = s[0] * s[1];
        let idx: Rc<[usize]> = (0..reps * n).map(|i| i % n).collect();
        self.gather(x, idx, vec![reps * s[0], s[1]])
    }

    /// Selects rows of a rank-2 tensor.
    pub fn index_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("index_rows", &s, &[2]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Contract(format!("row {bad} out of range for {s:?}")));
        }
        let d = s[1];
        let idx: Rc<[usize]> = rows.iter().flat_map(|&r| (r * d)..(r + 1) * d).collect();
        self.gather(x, idx, vec![rows.len(), d])
    }

    pub fn reduce_sum(&self, x: Var) -> Result<Var> {
        let total = self.nodes.borrow()[x.0].value.iter().copied().sum();
        Ok(self.push(vec![1], vec![total], Op::Sum { x: x.0 }))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let v = &nodes[x.0].value;
        let m = v.iter().copied().sum::<S>() / S::from_f64(v.len() as f64);
        drop(nodes);
        Ok(self.push(vec![1], vec![m], Op::Mean { x: x.0 }))
    }

    // ---- recurrent ------------------------------------------------------

    /// One LSTM layer in one direction over `x` (`T×D_in`), with weights
    /// `w_ih` (`D_in×4H`), `w_hh` (`H×4H`) and bias `b` (`4H`), gate order
    /// input/forget/cell/output. Returns the hidden states `T×H` in input
    /// time order.
    pub fn lstm(&self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (sx, si, sh, sb) = (
            &nodes[x.0].shape,
            &nodes[w_ih.0].shape,
            &nodes[w_hh.0].shape,
            &nodes[b.0].shape,
        );
        if sx.len() != 2 || sx[0] == 0 {
            return Err(Error::Input(format!(
                "lstm input must be T×D with T ≥ 1, got {sx:?}"
            )));
        }
        if si.len() != 2 || si[0] != sx[1] || si[1] % 4 != 0 {
            return Err(Error::dim("lstm w_ih", sx, si));
        }
        let hidden = si[1] / 4;
        if sh[..] != [hidden, 4 * hidden] {
            return Err(Error::dim("lstm w_hh", si, sh));
        }
        if sb[..] != [4 * hidden] {
            return Err(Error::dim("lstm bias", si, sb));
        }
        let dims = LstmDims {
            steps: sx[0],
            input: sx[1],
            hidden,
            reverse,
        };
        let (hs, cache) = lstm::forward(
            &dims,
            &nodes[x.0].value,
            &nodes[w_ih.0].value,
            &nodes[w_hh.0].value,
            &nodes[b.0].value,
        );
        drop(nodes);
        Ok(self.push(
            vec![dims.steps, hidden],
            hs,
            Op::Lstm {
                x: x.0,
                w_ih: w_ih.0,
                w_hh: w_hh.0,
                b: b.0,
                reverse,
                cache,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_op(&nodes, i, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (i, n) in nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_op<S: Float>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[i];
    let needs = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| nodes[j].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if needs(*a) {
                let acc = slot(grads, *a, m * k);
                S::gemm(false, true, *m, *n, *k, S::one(), g, val(*b), S::one(), acc);
            }
            if needs(*b) {
                let acc = slot(grads, *b, k * n);
                S::gemm(true, false, *k, *m, *n, S::one(), val(*a), g, S::one(), acc);
            }
        }
        Op::Conv {
            x,
            k,
            bias,
            patches,
            cout,
        } => {
            let cols = patches.cols();
            if let Some(b) = bias.filter(|&b| needs(b)) {
                let acc = slot(grads, b, *cout);
                for (a, row) in acc.iter_mut().zip(g.chunks(cols)) {
                    *a += row.iter().copied().sum::<S>();
                }
            }
            if needs(*k) {
                let mut col = vec![S::zero(); patches.rows() * cols];
                patches.im2col(val(*x), &mut col);
                let acc = slot(grads, *k, cout * patches.rows());
                S::gemm(
                    false,
                    true,
                    *cout,
                    cols,
                    patches.rows(),
                    S::one(),
                    g,
                    &col,
                    S::one(),
                    acc,
                );
            }
            if needs(*x) {
                let mut dcol = vec![S::zero(); patches.rows() * cols];
                S::gemm(
                    true,
                    false,
                    patches.rows(),
                    *cout,
                    cols,
                    S::one(),
                    val(*k),
                    g,
                    S::zero(),
                    &mut dcol,
                );
                let acc = slot(grads, *x, patches.c * patches.h * patches.w);
                patches.col2im(&dcol, acc);
            }
        }
        Op::ConvTranspose {
            x,
            k,
            bias,
            patches,
            cin,
        } => {
            if let Some(b) = bias.filter(|&b| needs(b)) {
                let acc = slot(grads, b, patches.c);
                for (a, row) in acc.iter_mut().zip(g.chunks(patches.h * patches.w)) {
                    *a += row.iter().copied().sum::<S>();
                }
            }
            if needs(*x) || needs(*k) {
                let cols = patches.cols();
                let mut gcol = vec![S::zero(); patches.rows() * cols];
                patches.im2col(g, &mut gcol);
                if needs(*x) {
                    let acc = slot(grads, *x, cin * cols);
                    S::gemm(
                        false,
                        false,
                        *cin,
                        patches.rows(),
                        cols,
                        S::one(),
                        val(*k),
                        &gcol,
                        S::one(),
                        acc,
                    );
                }
                if needs(*k) {
                    let acc = slot(grads, *k, cin * patches.rows());
                    S::gemm(
                        false,
                        true,
                        *cin,
                        cols,
                        patches.rows(),
                        S::one(),
                        val(*x),
                        &gcol,
                        S::one(),
                        acc,
                    );
                }
            }
        }
        Op::Binary { a, b, kind } => {
            let (va, vb) = (val(*a), val(*b));
            let (la, lb) = (va.len(), vb.len());
            let at = |v: &[S], l: usize, j: usize| v[if l == 1 { 0 } else { j }];
            for (inp, other, other_len, is_a) in [(*a, vb, lb, true), (*b, va, la, false)] {
                if !needs(inp) {
                    continue;
                }
                let len = nodes[inp].value.len();
                let acc = slot(grads, inp, len);
                for (j, &gj) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => gj,
                        Binary::Sub => {
                            if is_a {
                                gj
                            } else {
                                -gj
                            }
                        }
                        Binary::Mul => gj * at(other, other_len, j),
                    };
                    acc[if len == 1 { 0 } else { j }] += d;
                }
            }
        }
        Op::Unary { x, kind } => {
            if !needs(*x) {
                return;
            }
            let (xv, yv) = (val(*x), node.value.as_slice());
            let acc = slot(grads, *x, xv.len());
            let ln10 = S::from_f64(std::f64::consts::LN_10);
            for j in 0..g.len() {
                let d = match kind {
                    Unary::Sigmoid => yv[j] * (S::one() - yv[j]),
                    Unary::Tanh => S::one() - yv[j] * yv[j],
                    Unary::Relu => {
                        if xv[j] > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }
                    Unary::Abs => {
                        if xv[j] > S::zero() {
                            S::one()
                        } else if xv[j] < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    }
                    Unary::Log10 => S::one() / (xv[j] * ln10),
                    Unary::Square => S::from_f64(2.0) * xv[j],
                };
                acc[j] += g[j] * d;
            }
        }
        Op::Scale { x, c } => {
            if needs(*x) {
                let acc = slot(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, &gj)| *a += gj * *c);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if needs(*x) {
                let xv = val(*x);
                let acc = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        acc[j] += g[j];
                    }
                }
            }
        }
        Op::PRelu { x, alpha } => {
            let xv = val(*x);
            let a = val(*alpha)[0];
            if needs(*x) {
                let acc = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += if xv[j] > S::zero() { g[j] } else { a * g[j] };
                }
            }
            if needs(*alpha) {
                let da: S = xv
                    .iter()
                    .zip(g)
                    .filter(|(v, _)| **v <= S::zero())
                    .map(|(&v, &gj)| v * gj)
                    .sum();
                slot(grads, *alpha, 1)[0] += da;
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            if !needs(*x) {
                return;
            }
            let y = node.value.as_slice();
            let acc = slot(grads, *x, y.len());
            for o in 0..*outer {
                for ii in 0..*inner {
                    let at = |j: usize| (o * n + j) * inner + ii;
                    let dot: S = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..*n {
                        acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let rows = g.len() / d;
            let gv = val(*gain);
            if needs(*bias) {
                let acc = slot(grads, *bias, d);
                for row in g.chunks(d) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            if needs(*gain) {
                let acc = slot(grads, *gain, d);
                for (row, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += row[j] * xh[j];
                    }
                }
            }
            if needs(*x) {
                let dn = S::from_f64(d as f64);
                let acc = slot(grads, *x, g.len());
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxh: Vec<S> = (0..d).map(|j| gr[j] * gv[j]).collect();
                    let s1: S = dxh.iter().copied().sum();
                    let s2: S = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        acc[r * d + j] += rstd[r] / dn * (dn * dxh[j] - s1 - xh[j] * s2);
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            blocks,
        } => {
            let total: usize = blocks.iter().sum();
            let mut off = 0;
            for (&p, &blk) in parts.iter().zip(blocks) {
                if needs(p) {
                    let acc = slot(grads, p, outer * blk);
                    for o in 0..*outer {
                        let src = &g[o * total + off..][..blk];
                        acc[o * blk..(o + 1) * blk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &v)| *a += v);
                    }
                }
                off += blk;
            }
        }
        Op::Slice {
            x,
            outer,
            src_block,
            offset,
            block,
        } => {
            if needs(*x) {
                let acc = slot(grads, *x, outer * src_block);
                for o in 0..*outer {
                    acc[o * src_block + offset..][..*block]
                        .iter_mut()
                        .zip(&g[o * block..(o + 1) * block])
                        .for_each(|(a, &v)| *a += v);
                }
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                add_into(grads, *x, g);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if needs(*x) {
                let acc = slot(grads, *x, rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        acc[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            if needs(*x) {
                let acc = slot(grads, *x, nodes[*x].value.len());
                for (&j, &v) in idx.iter().zip(g) {
                    acc[j] += v;
                }
            }
        }
        Op::ScatterAdd { x, idx } => {
            if needs(*x) {
                let acc = slot(grads, *x, idx.len());
                for (a, &j) in acc.iter_mut().zip(idx.iter()) {
                    *a += g[j];
                }
            }
        }
        Op::Sum { x } => {
            if needs(*x) {
                let len = nodes[*x].value.len();
                slot(grads, *x, len).iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean { x } => {
            if needs(*x) {
                let len = nodes[*x].value.len();
                let d = g[0] / S::from_f64(len as f64);
                slot(grads, *x, len).iter_mut().for_each(|a| *a += d);
            }
        }
        Op::MaskedFill { x, mask } => {
            if needs(*x) {
                let acc = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    if !mask[j] {
                        acc[j] += g[j];
                    }
                }
            }
        }
        Op::Lstm {
            x,
            w_ih,
            w_hh,
            b,
            reverse,
            cache,
        } => {
            let sx = &nodes[*x].shape;
            let dims = LstmDims {
                steps: sx[0],
                input: sx[1],
                hidden: node.shape[1],
                reverse: *reverse,
            };
            let lg = lstm::backward(
                &dims,
                val(*x),
                val(*w_ih),
                val(*w_hh),
                &node.value,
                cache,
                g,
            );
            for (j, gv) in [(*x, lg.x), (*w_ih, lg.w_ih), (*w_hh, lg.w_hh), (*b, lg.b)] {
                if needs(j) {
                    add_into(grads, j, &gv);
                }
            }
        }
    }
}
