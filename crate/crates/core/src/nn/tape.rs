//! The autodiff tape: a per-step arena of values and the ops that made them.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    /// Constant input; receives a gradient (readable via [`Grads::wrt`]) but
    /// propagates nothing further.
    Input,
    /// Leaf bound to a parameter store entry.
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// x^p, elementwise. For non-integer or negative p the input must be > 0.
    PowScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var, f64),
    /// (m,k) x (k,n) matrix product.
    MatMul(Var, Var),
    /// 2D transpose.
    Transpose(Var),
    /// (n,d) + (d,): broadcast a row vector over rows.
    AddRow(Var, Var),
    /// Sum of all elements -> 0-d scalar.
    Sum(Var),
    /// Mean of all elements -> 0-d scalar.
    Mean(Var),
    /// Row-wise log(sum(exp(x))) for a 2D input -> 1-d of length n.
    LogSumExpRows(Var),
    /// Pick one column per row of a 2D input -> 1-d of length n.
    TakePerRow(Var, Vec<usize>),
    /// Row-wise x / max(||x||, eps) for a 2D input; cached norms.
    RowNormalize(Var, Vec<f64>),
    /// Mean of binary cross entropy with logits against a constant target.
    BceWithLogits { logits: Var, targets: ArrayD<f64> },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// 2x2 max pooling, stride 2; cached flat argmax per output element.
    MaxPool2(Var, Vec<u32>),
    /// Nearest-neighbor 2x upsampling.
    Upsample2(Var),
    /// Concatenate along axis 1 (channels for 4D, columns for 2D).
    ConcatAxis1(Vec<Var>),
    /// (b,c,h,w) -> (b,c) spatial mean.
    GlobalAvgPool(Var),
    Reshape(Var),
    /// Row gather from a (j,e) table -> (n,e); scatter-add backward.
    EmbedLookup { table: Var, idx: Vec<usize> },
}

/// Arena of forward values plus the op graph, built once per step.
#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    inner: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, if it participated in the graph.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.inner[v.0].as_ref()
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn accumulate_params(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, op) in tape.ops.iter().enumerate() {
            if let Op::Param(id) = op {
                if let Some(g) = &self.inner[i] {
                    let acc = store.grad_mut(*id);
                    *acc += g;
                }
            }
        }
    }
}

fn scalar0(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Value of a 0-d (or single-element) node as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.values[v.0];
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    // ---- leaves ----

    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn input2(&mut self, value: &Array2<f64>) -> Var {
        self.input(value.clone().into_dyn())
    }

    pub fn input4(&mut self, value: &Array4<f64>) -> Var {
        self.input(value.clone().into_dyn())
    }

    pub fn scalar_input(&mut self, value: f64) -> Var {
        self.input(scalar0(value))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Re-enter a node's value as a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.values[v.0].clone();
        self.input(val)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x.powf(p));
        self.push(v, Op::PowScalar(a, p))
    }

    /// Elementwise reciprocal; input must be nonzero (used on sums of
    /// positives).
    pub fn recip(&mut self, a: Var) -> Var {
        self.pow_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        debug_assert!(self.values[a.0].iter().all(|&x| x > 0.0), "ln of non-positive");
        let v = self.values[a.0].mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.values[a.0]
            .mapv(|x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) });
        self.push(v, Op::Elu(a, alpha))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        debug_assert_eq!(av.ncols(), bv.nrows());
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// Transpose of a 2D node.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let rv = self.values[row.0].view();
        debug_assert_eq!(rv.ndim(), 1);
        debug_assert_eq!(av.ncols(), rv.len());
        let rv1 = rv.into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &rv1).into_dyn();
        self.push(v, Op::AddRow(a, row))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar0(self.values[a.0].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let v = scalar0(self.values[a.0].sum() / n);
        self.push(v, Op::Mean(a))
    }

    /// Numerically stable row-wise logsumexp of a 2D node.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array1::<f64>::zeros(av.nrows());
        for (i, row) in av.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out[i] = m + s.ln();
        }
        self.push(out.into_dyn(), Op::LogSumExpRows(a))
    }

    /// Select one column per row from a 2D node.
    pub fn take_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        debug_assert_eq!(av.nrows(), idx.len());
        let out: Array1<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| av[[i, j]])
            .collect();
        self.push(out.into_dyn(), Op::TakePerRow(a, idx.to_vec()))
    }

    /// Row-wise L2 normalization with norms floored at 1e-12.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut norms = Vec::with_capacity(av.nrows());
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.mapv_inplace(|x| x / n);
        }
        self.push(out.into_dyn(), Op::RowNormalize(a, norms))
    }

    /// Mean binary cross entropy on logits against constant targets in {0,1}.
    ///
    /// Uses the max(x,0) - x t + ln(1 + e^-|x|) form, stable for large |x|.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &ArrayD<f64>) -> Var {
        let x = &self.values[logits.0];
        debug_assert_eq!(x.shape(), targets.shape());
        let mut total = 0.0;
        for (&xi, &ti) in x.iter().zip(targets.iter()) {
            total += xi.max(0.0) - xi * ti + (-(xi.abs())).exp().ln_1p();
        }
        let v = scalar0(total / x.len() as f64);
        self.push(
            v,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
        )
    }

    // ---- convolutional / spatial ----

    /// 2D convolution, NCHW layout, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wdt) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let wm = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let ym = wm.dot(&cols); // (cout, bsz*ho*wo)

        let mut out = Array4::<f64>::zeros((bsz, cout, ho, wo));
        {
            let ym_s = ym.as_slice().unwrap();
            let out_s = out.as_slice_mut().unwrap();
            let hw = ho * wo;
            for co in 0..cout {
                for bi in 0..bsz {
                    let src = &ym_s[co * bsz * hw + bi * hw..][..hw];
                    let dst = &mut out_s[bi * cout * hw + co * hw..][..hw];
                    dst.copy_from_slice(src);
                }
            }
        }
        if let Some(bias) = b {
            let bv = self.values[bias.0].view();
            let bv = bv.as_slice().unwrap();
            debug_assert_eq!(bv.len(), cout);
            for bi in 0..bsz {
                for co in 0..cout {
                    let mut lane = out.index_axis_mut(Axis(0), bi);
                    let mut lane = lane.index_axis_mut(Axis(0), co);
                    lane += bv[co];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let xv = self.values[a.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((bsz, c, ho, wo));
        let mut arg = vec![0u32; bsz * c * ho * wo];
        let mut ai = 0;
        for bi in 0..bsz {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), bi);
                let plane = plane.index_axis(Axis(0), ci);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                                let v = plane[[iy, ix]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy * w + ix) as u32;
                                }
                            }
                        }
                        out[[bi, ci, oy, ox]] = best;
                        arg[ai] = best_idx;
                        ai += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2(a, arg))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let xv = self.values[a.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((bsz, c, h * 2, w * 2));
        for bi in 0..bsz {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = xv[[bi, ci, y, x]];
                        out[[bi, ci, 2 * y, 2 * x]] = v;
                        out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(a))
    }

    /// Concatenate along axis 1 (channels of NCHW or columns of 2D).
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        self.push(v, Op::ConcatAxis1(parts.to_vec()))
    }

    /// Spatial global average pool: (b,c,h,w) -> (b,c).
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let xv = self.values[a.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array2::<f64>::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), bi);
                out[[bi, ci]] = plane.index_axis(Axis(0), ci).sum() / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Gather rows of a (j,e) table by index -> (n,e).
    pub fn embed_lookup(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.values[table.0].view().into_dimensionality::<Ix2>().unwrap();
        let e = tv.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), e));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(j));
        }
        self.push(
            out.into_dyn(),
            Op::EmbedLookup {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Returns per-node gradients; call
    /// [`Grads::accumulate_params`] to fold parameter gradients into a store.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { inner: grads }
    }

    fn add_grad(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.ops[i] {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                Self::add_grad(grads, *a, g * &self.values[b.0]);
                Self::add_grad(grads, *b, g * &self.values[a.0]);
            }
            Op::Neg(a) => Self::add_grad(grads, *a, g.mapv(|x| -x)),
            Op::AddScalar(a) => Self::add_grad(grads, *a, g.clone()),
            Op::MulScalar(a, c) => Self::add_grad(grads, *a, g.mapv(|x| x * c)),
            Op::PowScalar(a, p) => {
                let x = &self.values[a.0];
                let dg = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gi, &xi| gi * p * xi.powf(p - 1.0));
                Self::add_grad(grads, *a, dg);
            }
            Op::Exp(a) => Self::add_grad(grads, *a, g * &self.values[i]),
            Op::Ln(a) => {
                let dg = ndarray::Zip::from(g)
                    .and(&self.values[a.0])
                    .map_collect(|&gi, &xi| gi / xi);
                Self::add_grad(grads, *a, dg);
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                let dg = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gi, &yi| gi * yi * (1.0 - yi));
                Self::add_grad(grads, *a, dg);
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                let dg = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                Self::add_grad(grads, *a, dg);
            }
            Op::Relu(a) => {
                let dg = ndarray::Zip::from(g)
                    .and(&self.values[a.0])
                    .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                Self::add_grad(grads, *a, dg);
            }
            Op::Elu(a, alpha) => {
                let dg = ndarray::Zip::from(g)
                    .and(&self.values[a.0])
                    .map_collect(|&gi, &xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            gi * alpha * xi.exp()
                        }
                    });
                Self::add_grad(grads, *a, dg);
            }
            Op::MatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                Self::add_grad(grads, *a, gv.dot(&bv.t()).into_dyn());
                Self::add_grad(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Transpose(a) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                Self::add_grad(
                    grads,
                    *a,
                    gv.t().as_standard_layout().to_owned().into_dyn(),
                );
            }
            Op::AddRow(a, row) => {
                Self::add_grad(grads, *a, g.clone());
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                Self::add_grad(grads, *row, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::Sum(a) => {
                let gs = *g.iter().next().unwrap();
                Self::add_grad(
                    grads,
                    *a,
                    ArrayD::from_elem(self.values[a.0].raw_dim(), gs),
                );
            }
            Op::Mean(a) => {
                let n = self.values[a.0].len() as f64;
                let gs = *g.iter().next().unwrap() / n;
                Self::add_grad(
                    grads,
                    *a,
                    ArrayD::from_elem(self.values[a.0].raw_dim(), gs),
                );
            }
            Op::LogSumExpRows(a) => {
                // d lse / dx = softmax(x) per row
                let xv = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let yv = self.values[i].view();
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dg = Array2::<f64>::zeros(xv.dim());
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let lse = yv[r];
                    for (c, &x) in row.iter().enumerate() {
                        dg[[r, c]] = gv[r] * (x - lse).exp();
                    }
                }
                Self::add_grad(grads, *a, dg.into_dyn());
            }
            Op::TakePerRow(a, idx) => {
                let shape = self.values[a.0].shape().to_vec();
                let mut dg = Array2::<f64>::zeros((shape[0], shape[1]));
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                for (r, &c) in idx.iter().enumerate() {
                    dg[[r, c]] = gv[r];
                }
                Self::add_grad(grads, *a, dg.into_dyn());
            }
            Op::RowNormalize(a, norms) => {
                let xv = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dg = Array2::<f64>::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let n = norms[r];
                    let x = xv.row(r);
                    let gr = gv.row(r);
                    let xg: f64 = x.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..xv.ncols() {
                        dg[[r, c]] = gr[c] / n - x[c] * xg / (n * n * n);
                    }
                }
                Self::add_grad(grads, *a, dg.into_dyn());
            }
            Op::BceWithLogits { logits, targets } => {
                let gs = *g.iter().next().unwrap();
                let x = &self.values[logits.0];
                let n = x.len() as f64;
                let dg = ndarray::Zip::from(x)
                    .and(targets)
                    .map_collect(|&xi, &ti| gs * (sigmoid(xi) - ti) / n);
                Self::add_grad(grads, *logits, dg);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, cin, _h, _w) = xv.dim();
                let (cout, _cinw, kh, kw) = wv.dim();
                let (_gb, _gc, ho, wo) = gv.dim();
                let hw = ho * wo;

                // dy as (cout, bsz*ho*wo), matching the forward layout
                let mut dym = Array2::<f64>::zeros((cout, bsz * hw));
                {
                    let g_s = gv.as_standard_layout();
                    let g_s = g_s.as_slice().unwrap();
                    let dym_s = dym.as_slice_mut().unwrap();
                    for co in 0..cout {
                        for bi in 0..bsz {
                            let src = &g_s[bi * cout * hw + co * hw..][..hw];
                            let dst = &mut dym_s[co * bsz * hw + bi * hw..][..hw];
                            dst.copy_from_slice(src);
                        }
                    }
                }

                // weight grad: dW = dy . cols^T
                let cols = im2col(&xv, kh, kw, *stride, *pad, ho, wo);
                let dwm = dym.dot(&cols.t()); // (cout, cin*kh*kw)
                let dw = dwm
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn();
                Self::add_grad(grads, *w, dw);

                // input grad: cols' = W^T . dy, scatter back
                let wm = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let dcols = wm.t().dot(&dym); // (cin*kh*kw, bsz*ho*wo)
                let dx = col2im(
                    &dcols,
                    bsz,
                    cin,
                    xv.dim().2,
                    xv.dim().3,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    ho,
                    wo,
                );
                Self::add_grad(grads, *x, dx.into_dyn());

                if let Some(bias) = b {
                    let mut db = Array1::<f64>::zeros(cout);
                    for co in 0..cout {
                        let mut s = 0.0;
                        for bi in 0..bsz {
                            let plane = gv.index_axis(Axis(0), bi);
                            s += plane.index_axis(Axis(0), co).sum();
                        }
                        db[co] = s;
                    }
                    Self::add_grad(grads, *bias, db.into_dyn());
                }
            }
            Op::MaxPool2(a, arg) => {
                let shape = self.values[a.0].shape().to_vec();
                let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
                let (ho, wo) = (h / 2, w / 2);
                let mut ai = 0;
                for bi in 0..bsz {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let flat = arg[ai] as usize;
                                ai += 1;
                                dx[[bi, ci, flat / w, flat % w]] += gv[[bi, ci, oy, ox]];
                            }
                        }
                    }
                }
                Self::add_grad(grads, *a, dx.into_dyn());
            }
            Op::Upsample2(a) => {
                let shape = self.values[a.0].shape().to_vec();
                let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dx[[bi, ci, y, x]] = gv[[bi, ci, 2 * y, 2 * x]]
                                    + gv[[bi, ci, 2 * y, 2 * x + 1]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * x]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * x + 1]];
                            }
                        }
                    }
                }
                Self::add_grad(grads, *a, dx.into_dyn());
            }
            Op::ConcatAxis1(parts) => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.values[p.0].shape()[1];
                    let part_g = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    Self::add_grad(grads, *p, part_g);
                    offset += len;
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.values[a.0].shape().to_vec();
                let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gval = gv[[bi, ci]] * inv;
                        dx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(gval);
                    }
                }
                Self::add_grad(grads, *a, dx.into_dyn());
            }
            Op::Reshape(a) => {
                let orig = self.values[a.0].raw_dim();
                let dg = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(orig)
                    .unwrap();
                Self::add_grad(grads, *a, dg);
            }
            Op::EmbedLookup { table, idx } => {
                let tshape = self.values[table.0].shape().to_vec();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<f64>::zeros((tshape[0], tshape[1]));
                for (r, &j) in idx.iter().enumerate() {
                    let mut row = dt.row_mut(j);
                    row += &gv.row(r);
                }
                Self::add_grad(grads, *table, dt.into_dyn());
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfold (b,cin,h,w) into (cin*kh*kw, b*ho*wo) patch columns with zero padding.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (bsz, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, bsz * ho * wo));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let cols_s = cols.as_slice_mut().unwrap();
    let row_len = bsz * ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_base = row * row_len;
                for bi in 0..bsz {
                    let in_base = (bi * cin + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst_off = out_base + bi * ho * wo + oy * wo;
                        if iy < 0 || iy >= h as isize {
                            continue; // zeros already in place
                        }
                        let src_row = in_base + iy as usize * w;
                        if stride == 1 {
                            // contiguous run of valid ox
                            let ix0 = kx as isize - pad as isize;
                            let ox_start = if ix0 < 0 { (-ix0) as usize } else { 0 };
                            let ox_end = wo.min((w as isize - ix0).max(0) as usize);
                            if ox_start < ox_end {
                                let src0 = (src_row as isize + ix0 + ox_start as isize) as usize;
                                cols_s[dst_off + ox_start..dst_off + ox_end]
                                    .copy_from_slice(&xs[src0..src0 + (ox_end - ox_start)]);
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cols_s[dst_off + ox] = xs[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back onto the input (transpose of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros((bsz, cin, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let cols_s = cols.as_slice().unwrap();
    let row_len = bsz * ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_base = row * row_len;
                for bi in 0..bsz {
                    let out_base = (bi * cin + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = out_base + iy as usize * w;
                        let src_off = src_base + bi * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dxs[dst_row + ix as usize] += cols_s[src_off + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
