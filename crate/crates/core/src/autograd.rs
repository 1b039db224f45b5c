//! A small reverse-mode tape over `f64` n-d arrays.
//!
//! Nodes record a closure that maps the output gradient to parent gradients.
//! Closures are only built when some parent requires a gradient, so forward
//! passes over frozen parameters and constants cost no extra memory. Frozen
//! parameters enter the tape as leaves that never require a gradient, which is
//! how the backbone and codec stay out of every gradient buffer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};

use crate::error::{Error, Result};
use crate::freq_filter::{filter_array, FrequencyMask};
use crate::params::ParamStore;

pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that accumulated one, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

pub(crate) fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor expected")
}

fn to_dyn(a: Array2<f64>) -> Tensor {
    a.into_dyn()
}

fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push<F>(&self, value: Tensor, parents: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(make_backward()) } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that accumulates a gradient; used for inputs under test.
    pub fn variable(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// The tape leaf for a named parameter; trainable parameters require grad.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not registered"));
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = back(&g, &needs);
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    if !need {
                        continue;
                    }
                    if let Some(pg) = pg {
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            if node.requires_grad && node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        // Interior gradients are dropped as they are consumed; only leaves keep theirs.
        Gradients {
            by_node: grads,
            params: self.params.borrow().clone(),
        }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(out, &[a, b], || Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(out, &[a, b], || Box::new(|g, _| vec![Some(g.clone()), Some(-g)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(out, &[a, b], move || {
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * &*vb),
                    need[1].then(|| g * &*va),
                ]
            })
        })
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|v| v * k);
        self.push(out, &[a], move || Box::new(move |g, _| vec![Some(g.mapv(|v| v * k))]))
    }

    /// `a + row` with `row` of shape `[d]` broadcast over the last axis of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let d = *va.shape().last().expect("non-scalar");
        assert_eq!(vr.shape(), &[d], "add_row: row width mismatch");
        let out = &*va + &*vr;
        self.push(out, &[a, row], move || {
            Box::new(move |g, need| {
                let gr = need[1].then(|| sum_to_last(g));
                vec![Some(g.clone()), gr]
            })
        })
    }

    /// `a * row` with `row` of shape `[d]` broadcast over the last axis of `a`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let d = *va.shape().last().expect("non-scalar");
        assert_eq!(vr.shape(), &[d], "mul_row: row width mismatch");
        let out = &*va * &*vr;
        self.push(out, &[a, row], move || {
            Box::new(move |g, need| {
                let ga = need[0].then(|| g * &*vr);
                let gr = need[1].then(|| sum_to_last(&(g * &*va)));
                vec![ga, gr]
            })
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v.max(0.0));
        self.push(out, &[a], move || {
            Box::new(move |g, _| {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&*va).for_each(|gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(ga)]
            })
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(out, &[a], move || {
            Box::new(move |g, _| {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&*va).for_each(|gv, &x| {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *gv *= sig * (1.0 + x * (1.0 - sig));
                });
                vec![Some(ga)]
            })
        })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.raw_dim();
        let out = Tensor::from_elem(IxDyn(&[]), va.sum());
        self.push(out, &[a], move || {
            Box::new(move |g, _| vec![Some(Tensor::from_elem(shape.clone(), g.sum()))])
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference between `a` and a constant target.
    pub fn mse(&self, a: Var, target: &Tensor) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(a, t);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ----- shape -------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        let out = va
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(out, &[a], move || {
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&in_shape))
                        .expect("reshape grad"),
                )]
            })
        })
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.value(a);
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(out, &[a], move || {
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            })
        })
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(out, parts, move || {
            Box::new(move |g, need| {
                let mut start = 0;
                lens.iter()
                    .zip(need)
                    .map(|(&len, &n)| {
                        let piece = n.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + len))
                                .to_owned()
                        });
                        start += len;
                        piece
                    })
                    .collect()
            })
        })
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let full = va.raw_dim();
        let out = va
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(out, &[a], move || {
            Box::new(move |g, _| {
                let mut ga = Tensor::zeros(full.clone());
                ga.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(ga)]
            })
        })
    }

    // ----- linear algebra ---------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (a2, b2) = (as2(&va), as2(&vb));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
        let out = to_dyn(a2.dot(&b2));
        self.push(out, &[a, b], move || {
            Box::new(move |g, need| {
                let g2 = as2(g);
                let ga = need[0].then(|| to_dyn(g2.dot(&as2(&vb).t())));
                let gb = need[1].then(|| to_dyn(as2(&va).t().dot(&g2)));
                vec![ga, gb]
            })
        })
    }

    /// Row-wise affine map `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y = Rc::new(out.clone());
        self.push(to_dyn(out), &[a], move || {
            Box::new(move |g, _| {
                let g2 = as2(g);
                let mut ga = Array2::zeros(y.raw_dim());
                for ((gr, yr), mut out_row) in g2.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                    let dot = gr.dot(&yr);
                    Zip::from(&mut out_row)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gv, &yv| *o = yv * (gv - dot));
                }
                vec![Some(to_dyn(ga))]
            })
        })
    }

    /// Normalizes every row of `[n, d]` to zero mean and unit variance.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let d = a2.ncols() as f64;
        let mut xhat = a2.to_owned();
        let mut inv_std = Vec::with_capacity(a2.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let xh = Rc::new(xhat.clone());
        self.push(to_dyn(xhat), &[a], move || {
            Box::new(move |g, _| {
                let g2 = as2(g);
                let mut ga = Array2::zeros(xh.raw_dim());
                for (i, mut out_row) in ga.rows_mut().into_iter().enumerate() {
                    let gr = g2.row(i);
                    let xr = xh.row(i);
                    let mean_g = gr.sum() / d;
                    let mean_gx = gr.dot(&xr) / d;
                    Zip::from(&mut out_row)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|o, &gv, &xv| *o = inv_std[i] * (gv - mean_g - xv * mean_gx));
                }
                vec![Some(to_dyn(ga))]
            })
        })
    }

    // ----- spatiotemporal ----------------------------------------------

    /// Same-padded stride-1 3D convolution of `x: [B, Cin, D, H, W]` with
    /// `w: [Cout, Cin, kd, kh, kw]` (odd kernel sizes) and optional bias `[Cout]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(shape_err(&[0, ws[1], 0, 0, 0], &xs));
        }
        if let Some(vb) = &vb {
            if vb.shape() != [ws[0]] {
                return Err(shape_err(&[ws[0]], vb.shape()));
            }
        }
        let geom = ConvGeom::new(&xs, &ws);
        let w2 = vw
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ws[0], geom.patch))
            .expect("kernel reshape");
        let mut out = Tensor::zeros(IxDyn(&[xs[0], ws[0], xs[2], xs[3], xs[4]]));
        let mut cols = Vec::with_capacity(xs[0]);
        let xstd = vx.as_standard_layout();
        for bi in 0..xs[0] {
            let input = xstd.slice(s![bi, .., .., .., ..]);
            let col = geom.im2col(input.as_slice().expect("standard layout"));
            let mut y = w2.dot(&col);
            if let Some(vb) = &vb {
                for (mut row, &bias) in y.rows_mut().into_iter().zip(vb.iter()) {
                    row.mapv_inplace(|v| v + bias);
                }
            }
            out.slice_mut(s![bi, .., .., .., ..])
                .assign(&y.into_shape_with_order((ws[0], xs[2], xs[3], xs[4])).expect("conv out"));
            cols.push(col);
        }
        let w2 = Rc::new(w2);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let has_bias = b.is_some();
        Ok(self.push(out, &parents, move || {
            Box::new(move |g, need| {
                let gs = g.shape().to_vec();
                let spatial = gs[2] * gs[3] * gs[4];
                let g_std = g.as_standard_layout();
                let mut gx = need[0].then(|| Tensor::zeros(IxDyn(&geom.input_shape())));
                let mut gw = need[1].then(|| Array2::<f64>::zeros((gs[1], geom.patch)));
                let mut gb = (has_bias && need[2]).then(|| ndarray::Array1::<f64>::zeros(gs[1]));
                for (bi, col) in cols.iter().enumerate() {
                    let gy = g_std
                        .slice(s![bi, .., .., .., ..])
                        .to_owned()
                        .into_shape_with_order((gs[1], spatial))
                        .expect("grad reshape");
                    if let Some(gw) = gw.as_mut() {
                        *gw += &gy.dot(&col.t());
                    }
                    if let Some(gb) = gb.as_mut() {
                        *gb += &gy.sum_axis(Axis(1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcol = w2.t().dot(&gy);
                        let mut slot = gx.slice_mut(s![bi, .., .., .., ..]);
                        geom.col2im_add(&gcol, slot.as_slice_mut().expect("standard layout"));
                    }
                }
                let mut grads = vec![
                    gx,
                    gw.map(|a| a.into_shape_with_order(IxDyn(&geom.kernel_shape())).expect("gw")),
                ];
                if has_bias {
                    grads.push(gb.map(|a| a.into_dyn()));
                }
                grads
            })
        }))
    }

    /// Non-overlapping max pooling of `[B, C, D, H, W]`; trailing remainders are dropped.
    pub fn max_pool3d(&self, x: Var, pool: [usize; 3]) -> Result<Var> {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        if xs.len() != 5 {
            return Err(shape_err(&[0, 0, 0, 0, 0], &xs));
        }
        if xs[2] < pool[0] || xs[3] < pool[1] || xs[4] < pool[2] {
            return Err(Error::invalid(format!(
                "pool {pool:?} larger than feature dims {:?}",
                &xs[2..]
            )));
        }
        let (od, oh, ow) = (xs[2] / pool[0], xs[3] / pool[1], xs[4] / pool[2]);
        let out_shape = [xs[0], xs[1], od, oh, ow];
        let xstd = vx.as_standard_layout();
        let data = xstd.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let mut argmax = Vec::with_capacity(out.capacity());
        let (sd, sh) = (xs[3] * xs[4], xs[4]);
        for bc in 0..xs[0] * xs[1] {
            let base = bc * xs[2] * sd;
            for d in 0..od {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for pd in 0..pool[0] {
                            for ph in 0..pool[1] {
                                for pw in 0..pool[2] {
                                    let i = base
                                        + (d * pool[0] + pd) * sd
                                        + (h * pool[1] + ph) * sh
                                        + (w * pool[2] + pw);
                                    if data[i] > best {
                                        best = data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let in_len = data.len();
        let out = Tensor::from_shape_vec(IxDyn(&out_shape), out).expect("pool out");
        Ok(self.push(out, &[x], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; in_len];
                for (gv, &i) in g.as_standard_layout().iter().zip(&argmax) {
                    gx[i] += gv;
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&xs), gx).expect("pool grad"))]
            })
        }))
    }

    /// Per-channel normalization of `[B, C, ...]` with affine `gamma`, `beta`.
    /// With `stats = None` batch statistics are used (training); otherwise the
    /// given `(mean, var)` are treated as constants. Returns the output and the
    /// batch statistics that were used.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let xs = vx.shape().to_vec();
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let batch = xs[0];
        let count = (batch * inner) as f64;
        let xstd = vx.as_standard_layout();
        let data = xstd.as_slice().expect("standard layout");
        let at = move |b: usize, ch: usize| (b * c + ch) * inner;

        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += data[at(b, ch)..at(b, ch) + inner].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += data[at(b, ch)..at(b, ch) + inner]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for ch in 0..c {
                let r = at(b, ch)..at(b, ch) + inner;
                for i in r {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = vg[ch] * xh + vb[ch];
                }
            }
        }
        let training = stats.is_none();
        let out = Tensor::from_shape_vec(IxDyn(&xs), out).expect("bn out");
        let gvals = Rc::clone(&vg);
        let inv = inv_std.clone();
        let v = self.push(out, &[x, gamma, beta], move || {
            Box::new(move |g, need| {
                let gstd = g.as_standard_layout();
                let gd = gstd.as_slice().expect("standard layout");
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        for i in at(b, ch)..at(b, ch) + inner {
                            ggamma[ch] += gd[i] * xhat[i];
                            gbeta[ch] += gd[i];
                        }
                    }
                }
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let gm = gvals[ch];
                        if training {
                            // sums of dxhat and dxhat * xhat over the channel
                            let s1 = gm * gbeta[ch];
                            let s2 = gm * ggamma[ch];
                            for b in 0..batch {
                                for i in at(b, ch)..at(b, ch) + inner {
                                    let dxh = gd[i] * gm;
                                    gx[i] = inv[ch] / count * (count * dxh - s1 - xhat[i] * s2);
                                }
                            }
                        } else {
                            for b in 0..batch {
                                for i in at(b, ch)..at(b, ch) + inner {
                                    gx[i] = gd[i] * gm * inv[ch];
                                }
                            }
                        }
                    }
                    Tensor::from_shape_vec(IxDyn(&xs), gx).expect("bn grad")
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::from_shape_vec(IxDyn(&[c]), ggamma.clone()).expect("gg")),
                    need[2].then(|| Tensor::from_shape_vec(IxDyn(&[c]), gbeta.clone()).expect("gb")),
                ]
            })
        });
        (v, mean, var)
    }

    /// Band filter along `axes`. The filter is a real convolution with an even
    /// kernel, hence self-adjoint, so its backward pass is the same filter.
    pub fn freq_filter(&self, x: Var, axes: &[usize], mask: Rc<FrequencyMask>, residual: bool) -> Result<Var> {
        let vx = self.value(x);
        let out = filter_array(&vx, axes, &mask, residual)?;
        let axes = axes.to_vec();
        Ok(self.push(out, &[x], move || {
            Box::new(move |g, _| {
                vec![Some(filter_array(g, &axes, &mask, residual).expect("grad has input shape"))]
            })
        }))
    }
}

/// Sums every axis but the last.
fn sum_to_last(g: &Tensor) -> Tensor {
    let d = *g.shape().last().expect("non-scalar");
    let rows = g.len() / d;
    g.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, d))
        .expect("flatten")
        .sum_axis(Axis(0))
        .into_dyn()
}

#[derive(Clone)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    patch: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        let kernel = [ws[2], ws[3], ws[4]];
        Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            dims: [xs[2], xs[3], xs[4]],
            kernel,
            patch: xs[1] * kernel.iter().product::<usize>(),
        }
    }

    fn input_shape_single(&self) -> usize {
        self.cin * self.dims.iter().product::<usize>()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cin, self.dims[0], self.dims[1], self.dims[2]]
    }

    fn kernel_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    /// Visits `(column row, spatial index, input index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kernel;
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let spatial = d * h * w;
        for ci in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let row = ((ci * kd + a) * kh + b) * kw + c;
                        for z in 0..d {
                            let zz = z as isize + a as isize - pd as isize;
                            if zz < 0 || zz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let yy = y as isize + b as isize - ph as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for x in 0..w {
                                    let xx = x as isize + c as isize - pw as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let src = ci * spatial
                                        + (zz as usize * h + yy as usize) * w
                                        + xx as usize;
                                    f(row, (z * h + y) * w + x, src);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Array2<f64> {
        let spatial: usize = self.dims.iter().product();
        let mut col = Array2::<f64>::zeros((self.patch, spatial));
        {
            let buf = col.as_slice_mut().expect("fresh array");
            self.for_each_tap(|row, pos, src| buf[row * spatial + pos] = input[src]);
        }
        col
    }

    fn col2im_add(&self, col: &Array2<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.input_shape_single());
        let spatial: usize = self.dims.iter().product();
        let std = col.as_standard_layout();
        let buf = std.as_slice().expect("standard layout");
        self.for_each_tap(|row, pos, src| out[src] += buf[row * spatial + pos]);
    }
}
