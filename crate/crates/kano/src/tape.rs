//! Reverse-mode differentiation over a closed, enumerated operation set.
//!
//! Values are eagerly computed as the graph is built (define-by-run); the
//! tape records every node in creation order so the backward sweep can walk
//! it in reverse. A tape is single-threaded; distinct tapes are independent.
//!
//! Any op that produces a non-finite value poisons the tape; `forward`
//! surfaces the error naming the offending op instead of silently carrying
//! NaNs forward.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{KanoError, Result};
use crate::linops;
use crate::spline::{self, GridSpec};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// multiply by a compile-time constant
    Scale(usize, f64),
    /// tensor * rank-0 variable
    MulScalarVar(usize, usize),
    /// tensor / rank-0 variable
    DivScalarVar(usize, usize),
    Matmul(usize, usize),
    Silu(usize),
    Softplus(usize),
    Relu(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose2(usize),
    /// (n, d) -> (n, d * n_basis); cache holds d(basis)/dx in the same layout
    BasisExpand(usize, GridSpec),
    /// (a, b) -> (a * times, b), each row repeated `times` times consecutively
    RepeatRows(usize, usize),
    BlurDown {
        kern: usize,
        x: usize,
        stride: usize,
    },
    BlurUpT {
        kern: usize,
        r: usize,
        stride: usize,
    },
    KernelGrad {
        x: usize,
        r: usize,
        stride: usize,
        ksize: usize,
    },
    Conv2d {
        w: usize,
        x: usize,
    },
    AvgPool2(usize),
    UpNearest2(usize),
    ConcatC(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::DivScalarVar(..) => "div_scalar",
            Op::Matmul(..) => "matmul",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Transpose2(..) => "transpose2",
            Op::BasisExpand(..) => "bspline_basis",
            Op::RepeatRows(..) => "repeat_rows",
            Op::BlurDown { .. } => "blur_down",
            Op::BlurUpT { .. } => "blur_up_transpose",
            Op::KernelGrad { .. } => "kernel_grad",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::UpNearest2(..) => "up_nearest2",
            Op::ConcatC(..) => "concat_channels",
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    cache: Option<ArrayD<f64>>,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    seed: u64,
    poisoned: Option<&'static str>,
    forward_root: Option<usize>,
}

/// Records a computation graph; see module docs.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    pub(crate) id: usize,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

fn as3(a: &ArrayD<f64>) -> ndarray::Array3<f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("rank-3 value")
        .to_owned()
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                seed,
                poisoned: None,
                forward_root: None,
            })),
        }
    }

    pub fn seed(&self) -> u64 {
        self.inner.borrow().seed
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: ArrayD<f64>, cache: Option<ArrayD<f64>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        if inner.poisoned.is_none() && !value.iter().all(|v| v.is_finite()) {
            inner.poisoned = Some(op.name());
        }
        inner.nodes.push(Node {
            value,
            grad: None,
            cache,
            op,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value, None)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Finish the forward pass: returns the scalar value at `root`, or the
    /// recorded error if any op produced a non-finite value.
    pub fn forward(&self, root: &Var) -> Result<f64> {
        let mut inner = self.inner.borrow_mut();
        if let Some(op) = inner.poisoned {
            return Err(KanoError::NonFinite { op });
        }
        let v = &inner.nodes[root.id].value;
        if v.len() != 1 {
            return Err(KanoError::shape(
                "forward",
                format!("root has {} elements, expected a scalar", v.len()),
            ));
        }
        let out = *v.iter().next().unwrap();
        inner.forward_root = Some(root.id);
        Ok(out)
    }

    /// Reverse sweep seeding d(root)/d(root) = 1. `forward` must have been
    /// called on the same root first.
    pub fn backward(&self, root: &Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if let Some(op) = inner.poisoned {
            return Err(KanoError::NonFinite { op });
        }
        if inner.forward_root != Some(root.id) {
            return Err(KanoError::BackwardBeforeForward);
        }
        let shape = inner.nodes[root.id].value.raw_dim();
        inner.nodes[root.id].grad = Some(ArrayD::ones(shape));
        for i in (0..=root.id).rev() {
            let g = match &inner.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            inner.backprop(i, &g);
        }
        // gradients must come out finite as well
        if let Some(bad) = inner
            .nodes
            .iter()
            .find(|n| n.grad.as_ref().is_some_and(|g| !g.iter().all(|v| v.is_finite())))
        {
            return Err(KanoError::NonFinite { op: bad.op.name() });
        }
        Ok(())
    }

    // ---- op constructors -------------------------------------------------

    fn binary_same_shape(&self, name: &'static str, a: &Var, b: &Var) -> (ArrayD<f64>, ArrayD<f64>) {
        assert!(Rc::ptr_eq(&a.tape.inner, &self.inner), "{name}: tape mismatch");
        assert!(Rc::ptr_eq(&b.tape.inner, &self.inner), "{name}: tape mismatch");
        let inner = self.inner.borrow();
        let va = inner.nodes[a.id].value.clone();
        let vb = inner.nodes[b.id].value.clone();
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        (va, vb)
    }

    fn value_of(&self, v: &Var) -> ArrayD<f64> {
        self.inner.borrow().nodes[v.id].value.clone()
    }
}

impl TapeInner {
    fn acc(&mut self, id: usize, delta: ArrayD<f64>) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }

    fn backprop(&mut self, i: usize, g: &ArrayD<f64>) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, -g.clone());
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                self.acc(a, g * &vb);
                self.acc(b, g * &va);
            }
            Op::Scale(a, c) => self.acc(a, g * c),
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[s].value.iter().next().copied().unwrap();
                let va = self.nodes[a].value.clone();
                self.acc(a, g * sv);
                let gs: f64 = g.iter().zip(va.iter()).map(|(x, y)| x * y).sum();
                self.acc(s, ArrayD::from_elem(IxDyn(&[]), gs));
            }
            Op::DivScalarVar(a, s) => {
                let sv = self.nodes[s].value.iter().next().copied().unwrap();
                let va = self.nodes[a].value.clone();
                self.acc(a, g / sv);
                let gs: f64 = g
                    .iter()
                    .zip(va.iter())
                    .map(|(gi, ai)| -gi * ai / (sv * sv))
                    .sum();
                self.acc(s, ArrayD::from_elem(IxDyn(&[]), gs));
            }
            Op::Matmul(a, b) => {
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                let g2 = as2(g);
                let ga = g2.dot(&as2(&vb).t());
                let gb = as2(&va).t().dot(&g2);
                self.acc(a, ga.into_dyn());
                self.acc(b, gb.into_dyn());
            }
            Op::Silu(a) => {
                let d = self.nodes[a].value.mapv(spline::silu_deriv);
                self.acc(a, g * &d);
            }
            Op::Softplus(a) => {
                let d = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
                self.acc(a, g * &d);
            }
            Op::Relu(a) => {
                let d = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(a, g * &d);
            }
            Op::Abs(a) => {
                // subgradient at 0 defined as 0
                let d = self.nodes[a].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                // gradient 1 inside and at the boundary, 0 outside
                let d = self.nodes[a]
                    .value
                    .mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                self.acc(a, g * &d);
            }
            Op::Sum(a) => {
                let gv = g.iter().next().copied().unwrap();
                let shape = self.nodes[a].value.raw_dim();
                self.acc(a, ArrayD::from_elem(shape, gv));
            }
            Op::Mean(a) => {
                let n = self.nodes[a].value.len() as f64;
                let gv = g.iter().next().copied().unwrap() / n;
                let shape = self.nodes[a].value.raw_dim();
                self.acc(a, ArrayD::from_elem(shape, gv));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a].value.raw_dim();
                self.acc(a, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::Transpose2(a) => {
                let gt = as2(g).t().as_standard_layout().to_owned();
                self.acc(a, gt.into_dyn());
            }
            Op::BasisExpand(a, grid) => {
                let ders = self.nodes[i].cache.as_ref().unwrap().clone();
                let nb = grid.n_basis();
                let g2 = as2(g);
                let d2 = as2(&ders);
                let (n, dnb) = g2.dim();
                let d = dnb / nb;
                let mut ga = Array2::<f64>::zeros((n, d));
                for r in 0..n {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for k in 0..nb {
                            acc += g2[[r, c * nb + k]] * d2[[r, c * nb + k]];
                        }
                        ga[[r, c]] = acc;
                    }
                }
                self.acc(a, ga.into_dyn());
            }
            Op::RepeatRows(a, times) => {
                let g2 = as2(g);
                let (rows, cols) = g2.dim();
                let d = rows / times;
                let mut ga = Array2::<f64>::zeros((d, cols));
                for r in 0..rows {
                    let src = r / times;
                    for c in 0..cols {
                        ga[[src, c]] += g2[[r, c]];
                    }
                }
                self.acc(a, ga.into_dyn());
            }
            Op::BlurDown { kern, x, stride } => {
                let k2 = as2(&self.nodes[kern].value).to_owned();
                let x3 = as3(&self.nodes[x].value);
                let g3 = as3(g);
                let (_, h, w) = x3.dim();
                let gx = linops::blur_down_adjoint_core(&g3, &k2, stride, h, w);
                let gk = linops::kernel_grad_core(&x3, &g3, stride, k2.dim().0);
                self.acc(x, gx.into_dyn());
                self.acc(kern, gk.into_dyn());
            }
            Op::BlurUpT { kern, r, stride } => {
                let k2 = as2(&self.nodes[kern].value).to_owned();
                let r3 = as3(&self.nodes[r].value);
                let g3 = as3(g);
                let gr = linops::blur_down_core(&g3, &k2, stride);
                let gk = linops::kernel_grad_core(&g3, &r3, stride, k2.dim().0);
                self.acc(r, gr.into_dyn());
                self.acc(kern, gk.into_dyn());
            }
            Op::KernelGrad {
                x,
                r,
                stride,
                ksize,
            } => {
                let x3 = as3(&self.nodes[x].value);
                let r3 = as3(&self.nodes[r].value);
                let g2 = as2(g).to_owned();
                let (_, h, w) = x3.dim();
                let _ = ksize;
                let gx = linops::blur_down_adjoint_core(&r3, &g2, stride, h, w);
                let gr = linops::blur_down_core(&x3, &g2, stride);
                self.acc(x, gx.into_dyn());
                self.acc(r, gr.into_dyn());
            }
            Op::Conv2d { w, x } => {
                let w4 = self.nodes[w]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let x3 = as3(&self.nodes[x].value);
                let g3 = as3(g);
                let (_, h, wid) = x3.dim();
                let gx = linops::conv2d_grad_input(&g3, &w4, h, wid);
                let gw = linops::conv2d_grad_weight(&g3, &x3, w4.dim().2);
                self.acc(x, gx.into_dyn());
                self.acc(w, gw.into_dyn());
            }
            Op::AvgPool2(a) => {
                let g3 = as3(g);
                self.acc(a, linops::avg_pool2_adjoint(&g3).into_dyn());
            }
            Op::UpNearest2(a) => {
                let g3 = as3(g);
                self.acc(a, linops::up_nearest2_adjoint(&g3).into_dyn());
            }
            Op::ConcatC(a, b) => {
                let ca = self.nodes[a].value.shape()[0];
                let g3 = as3(g);
                let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned();
                self.acc(a, ga.into_dyn());
                self.acc(b, gb.into_dyn());
            }
        }
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_of(self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Accumulated gradient after `backward`; zeros if this node was unused.
    pub fn grad(&self) -> ArrayD<f64> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(node.value.raw_dim()))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = self.tape.binary_same_shape("add", self, other);
        self.tape.push(Op::Add(self.id, other.id), a + b, None)
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = self.tape.binary_same_shape("sub", self, other);
        self.tape.push(Op::Sub(self.id, other.id), a - b, None)
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = self.tape.binary_same_shape("mul", self, other);
        self.tape.push(Op::Mul(self.id, other.id), a * b, None)
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value() * c;
        self.tape.push(Op::Scale(self.id, c), v, None)
    }

    pub fn mul_scalar(&self, s: &Var) -> Var {
        let sv = s.value();
        assert_eq!(sv.len(), 1, "mul_scalar: scalar operand");
        let v = self.value() * *sv.iter().next().unwrap();
        self.tape.push(Op::MulScalarVar(self.id, s.id), v, None)
    }

    pub fn div_scalar(&self, s: &Var) -> Var {
        let sv = s.value();
        assert_eq!(sv.len(), 1, "div_scalar: scalar operand");
        let v = self.value() / *sv.iter().next().unwrap();
        self.tape.push(Op::DivScalarVar(self.id, s.id), v, None)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        let v = as2(&a).dot(&as2(&b));
        self.tape
            .push(Op::Matmul(self.id, other.id), v.into_dyn(), None)
    }

    pub fn silu(&self) -> Var {
        let v = self.value().mapv(spline::silu);
        self.tape.push(Op::Silu(self.id), v, None)
    }

    pub fn softplus(&self) -> Var {
        // numerically stable ln(1 + e^x)
        let v = self
            .value()
            .mapv(|x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() });
        self.tape.push(Op::Softplus(self.id), v, None)
    }

    pub fn relu(&self) -> Var {
        let v = self.value().mapv(|x| x.max(0.0));
        self.tape.push(Op::Relu(self.id), v, None)
    }

    pub fn abs(&self) -> Var {
        let v = self.value().mapv(f64::abs);
        self.tape.push(Op::Abs(self.id), v, None)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        self.tape.push(Op::Clamp(self.id, lo, hi), v, None)
    }

    pub fn sum(&self) -> Var {
        let s: f64 = self.value().iter().sum();
        self.tape
            .push(Op::Sum(self.id), ArrayD::from_elem(IxDyn(&[]), s), None)
    }

    pub fn mean(&self) -> Var {
        let v = self.value();
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.tape
            .push(Op::Mean(self.id), ArrayD::from_elem(IxDyn(&[]), s), None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push(Op::Reshape(self.id), v, None)
    }

    pub fn transpose2(&self) -> Var {
        let v = self.value();
        let t = as2(&v).t().as_standard_layout().to_owned();
        self.tape.push(Op::Transpose2(self.id), t.into_dyn(), None)
    }

    /// `(n, d) -> (n, d * n_basis)` of B-spline basis values per element.
    pub fn basis_expand(&self, grid: &GridSpec) -> Var {
        let v = self.value();
        let x2 = as2(&v).to_owned();
        let (vals, ders) = spline::basis_expand(&x2, grid);
        self.tape.push(
            Op::BasisExpand(self.id, *grid),
            vals.into_dyn(),
            Some(ders.into_dyn()),
        )
    }

    pub fn repeat_rows(&self, times: usize) -> Var {
        let v = self.value();
        let a = as2(&v);
        let (rows, cols) = a.dim();
        let mut out = Array2::<f64>::zeros((rows * times, cols));
        for r in 0..rows * times {
            for c in 0..cols {
                out[[r, c]] = a[[r / times, c]];
            }
        }
        self.tape
            .push(Op::RepeatRows(self.id, times), out.into_dyn(), None)
    }

    /// `self` is a (k,k) kernel, `x` a (C,H,W) cube.
    pub fn blur_down(&self, x: &Var, stride: usize) -> Var {
        let k = self.value();
        let xv = x.value();
        let y = linops::blur_down_core(&as3(&xv), &as2(&k).to_owned(), stride);
        self.tape.push(
            Op::BlurDown {
                kern: self.id,
                x: x.id,
                stride,
            },
            y.into_dyn(),
            None,
        )
    }

    /// Adjoint of `blur_down`: `self` is a (k,k) kernel, `r` a low-res cube.
    pub fn blur_up_transpose(&self, r: &Var, stride: usize) -> Var {
        let k = self.value();
        let rv = r.value();
        let r3 = as3(&rv);
        let (_, ho, wo) = r3.dim();
        let z = linops::blur_down_adjoint_core(
            &r3,
            &as2(&k).to_owned(),
            stride,
            ho * stride,
            wo * stride,
        );
        self.tape.push(
            Op::BlurUpT {
                kern: self.id,
                r: r.id,
                stride,
            },
            z.into_dyn(),
            None,
        )
    }

    /// Kernel-side contraction: `self` is a (C,H,W) cube, `r` the residual.
    pub fn kernel_grad(&self, r: &Var, stride: usize, ksize: usize) -> Var {
        let xv = self.value();
        let rv = r.value();
        let g = linops::kernel_grad_core(&as3(&xv), &as3(&rv), stride, ksize);
        self.tape.push(
            Op::KernelGrad {
                x: self.id,
                r: r.id,
                stride,
                ksize,
            },
            g.into_dyn(),
            None,
        )
    }

    /// `self` is a (c_out, c_in, k, k) weight tensor, `x` a (c_in,H,W) cube.
    pub fn conv2d(&self, x: &Var) -> Var {
        let wv = self.value();
        let xv = x.value();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let y = linops::conv2d_core(&as3(&xv), &w4);
        self.tape.push(
            Op::Conv2d {
                w: self.id,
                x: x.id,
            },
            y.into_dyn(),
            None,
        )
    }

    pub fn avg_pool2(&self) -> Var {
        let v = self.value();
        let y = linops::avg_pool2(&as3(&v));
        self.tape.push(Op::AvgPool2(self.id), y.into_dyn(), None)
    }

    pub fn up_nearest2(&self) -> Var {
        let v = self.value();
        let y = linops::up_nearest2(&as3(&v));
        self.tape.push(Op::UpNearest2(self.id), y.into_dyn(), None)
    }

    pub fn concat_channels(&self, other: &Var) -> Var {
        let a = self.value();
        let b = other.value();
        let a3 = as3(&a);
        let b3 = as3(&b);
        let y = ndarray::concatenate(Axis(0), &[a3.view(), b3.view()]).unwrap();
        self.tape
            .push(Op::ConcatC(self.id, other.id), y.into_dyn(), None)
    }
}

/// Central finite-difference check of the analytic gradient of `build`.
///
/// `build` constructs a scalar-rooted graph from the supplied leaves; the
/// returned value is the maximum over all leaf coordinates of
/// `|analytic - central_difference| / max(|analytic|, |cd|, 1e-8)`.
pub fn finite_diff_check<F>(build: F, leaves: &[ArrayD<f64>], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_floor(build, leaves, h, 1e-8)
}

/// [`finite_diff_check`] with an explicit absolute floor in the relative
/// error denominator. A floor near the expected finite-difference noise
/// level (`eps * |loss| / h` and above) keeps coordinates whose true
/// gradient sits below that noise from dominating the reported maximum.
pub fn finite_diff_check_floor<F>(
    build: F,
    leaves: &[ArrayD<f64>],
    h: f64,
    floor: f64,
) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite_diff_check: h must be positive");
    assert!(floor > 0.0, "finite_diff_check: floor must be positive");
    let eval = |vals: &[ArrayD<f64>]| -> Result<f64> {
        let tape = Tape::new(0);
        let vars: Vec<Var> = vals.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&tape, &vars)?;
        tape.forward(&root)
    };

    // analytic gradients
    let tape = Tape::new(0);
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&tape, &vars)?;
    tape.forward(&root)?;
    tape.backward(&root)?;
    let grads: Vec<ArrayD<f64>> = vars.iter().map(Var::grad).collect();

    let mut work: Vec<ArrayD<f64>> = leaves.to_vec();
    let mut max_rel: f64 = 0.0;
    for li in 0..leaves.len() {
        for idx in 0..leaves[li].len() {
            let orig = work[li].as_slice_mut().unwrap()[idx];
            work[li].as_slice_mut().unwrap()[idx] = orig + h;
            let fp = eval(&work)?;
            work[li].as_slice_mut().unwrap()[idx] = orig - h;
            let fm = eval(&work)?;
            work[li].as_slice_mut().unwrap()[idx] = orig;
            let cd = (fp - fm) / (2.0 * h);
            if !cd.is_finite() {
                return Err(KanoError::NonFinite { op: "finite_diff" });
            }
            let a = grads[li].as_slice().unwrap()[idx];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn square_forward_and_backward() {
        let tape = Tape::new(0);
        let x = tape.scalar(3.0);
        let y = x.mul(&x);
        assert_eq!(tape.forward(&y).unwrap(), 9.0);
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().into_iter().next().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_zero_tensor() {
        let tape = Tape::new(0);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[4, 5])));
        let s = x.sum();
        assert_eq!(tape.forward(&s).unwrap(), 0.0);
    }

    #[test]
    fn chain_matches_direct_evaluation() {
        // 5-op chain vs direct arithmetic
        let tape = Tape::new(0);
        let x = tape.scalar(0.7);
        let y = tape.scalar(-1.3);
        let r = x.mul(&y).add(&x).silu().abs().scale(2.0);
        let got = tape.forward(&r).unwrap();
        let direct = (spline::silu(0.7 * -1.3 + 0.7)).abs() * 2.0;
        assert!((got - direct).abs() <= 1e-15);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new(0);
        let x = tape.scalar(2.0);
        let z = tape.scalar(5.0);
        let y = x.mul(&x);
        tape.forward(&y).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(z.grad().into_iter().next().unwrap(), 0.0);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new(0);
        let x = tape.scalar(1.5);
        let y = x.add(&x);
        tape.forward(&y).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().into_iter().next().unwrap(), 2.0);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let tape = Tape::new(0);
        let x = tape.scalar(1.0);
        let y = x.mul(&x);
        assert!(matches!(
            tape.backward(&y),
            Err(KanoError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn non_finite_intermediate_names_the_op() {
        let tape = Tape::new(0);
        let x = tape.scalar(1.0);
        let z = tape.scalar(0.0);
        let y = x.div_scalar(&z);
        let s = y.sum();
        match tape.forward(&s) {
            Err(KanoError::NonFinite { op }) => assert_eq!(op, "div_scalar"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_finite_diff_is_exact() {
        let build = |_t: &Tape, vars: &[Var]| -> Result<Var> {
            Ok(vars[0].mul(&vars[0]).sum())
        };
        let leaves = vec![arr1(&[1.0, -2.0, 0.5]).into_dyn()];
        let err = finite_diff_check(build, &leaves, 1e-4).unwrap();
        assert!(err <= 1e-9, "error {err}");
    }

    #[test]
    fn constant_loss_gives_zero_error() {
        let build = |t: &Tape, vars: &[Var]| -> Result<Var> {
            let _ = vars;
            Ok(t.scalar(4.0))
        };
        let leaves = vec![arr1(&[1.0, 2.0]).into_dyn()];
        let err = finite_diff_check(build, &leaves, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_gradcheck() {
        let build = |_t: &Tape, vars: &[Var]| -> Result<Var> {
            Ok(vars[0].matmul(&vars[1]).silu().sum())
        };
        let leaves = vec![
            arr2(&[[0.3, -0.7], [1.1, 0.2]]).into_dyn(),
            arr2(&[[0.5, 0.4], [-0.2, 0.9]]).into_dyn(),
        ];
        let err = finite_diff_check(build, &leaves, 1e-6).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let run = || {
            let tape = Tape::new(9);
            let x = tape.leaf(arr2(&[[0.25, -0.5], [0.75, 1.25]]).into_dyn());
            let y = x.silu().mul(&x).sum();
            let f = tape.forward(&y).unwrap();
            tape.backward(&y).unwrap();
            (f, x.grad())
        };
        let (f1, g1) = run();
        let (f2, g2) = run();
        assert_eq!(f1.to_bits(), f2.to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
