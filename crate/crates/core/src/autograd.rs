//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation records its output value and a closure mapping the output
//! gradient to input gradients. Parameters enter the tape as named leaves so
//! that [`Tape::backward`] can hand back a name-keyed gradient map, which is
//! what the optimizer consumes. Operations are coarse (a whole convolution is
//! one node), so the bookkeeping cost is small next to the arithmetic.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, CowArray, Ix2, IxDyn, Zip};

use crate::multiview::PlaneId;

pub type Tensor = ArrayD<f64>;

/// Variance floor of [`Tape::channel_standardize`].
pub const NORM_EPS: f64 = 1e-5;

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<String>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Name-keyed parameter gradients.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn add(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Accumulate another gradient map into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}


fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn grad_scalar(g: &Tensor) -> f64 {
    g.iter().next().copied().unwrap_or(0.0)
}

/// Reduce a tensor with trailing channel axis to `(rows, channels)`,
/// copying only when the layout is not contiguous.
fn as_rows(t: &Tensor) -> CowArray<'_, f64, Ix2> {
    let c = *t.shape().last().expect("rank >= 1");
    let rows = t.len() / c.max(1);
    match t.view().into_shape_with_order((rows, c)) {
        Ok(v) => CowArray::from(v),
        Err(_) => CowArray::from(
            t.as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, c))
                .expect("standard layout"),
        ),
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<Box<dyn Fn(&str) -> bool + Send + Sync>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose names satisfy `pred` enter the tape as constants.
    pub fn with_frozen(pred: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Some(Box::new(pred)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        grad_scalar(self.value(v))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let frozen = self.frozen.as_ref().is_some_and(|f| f(name));
        self.nodes.push(Node {
            value: value.clone(),
            inputs: Vec::new(),
            backward: None,
            param: Some(name.to_string()),
            requires_grad: !frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter leaf that contributed to it.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let loss_value = &self.nodes[loss.0].value;
        grads[loss.0] = Some(ArrayD::ones(loss_value.raw_dim()));
        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(name) = &node.param {
                if node.requires_grad {
                    out.add(name, &g);
                }
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = bw(&g, &inputs, &node.value, &needs);
            for ((&i, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &gi,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        out
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            &[a, b],
            Box::new(|g, x, _, needs| {
                vec![
                    needs[0].then(|| g * x[1]),
                    needs[1].then(|| g * x[0]),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(
            v,
            &[a, b],
            Box::new(|g, x, out, needs| {
                vec![
                    needs[0].then(|| g / x[1]),
                    needs[1].then(|| -(g * out) / x[1]),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, &[a], Box::new(move |g, _, _, _| vec![Some(g * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            &[a],
            Box::new(|g, x, _, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(x[0]).for_each(|gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(
            v,
            &[a],
            Box::new(|g, x, _, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(x[0]).for_each(|gv, &xv| {
                    *gv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                });
                vec![Some(gx)]
            }),
        )
    }

    /// Multiplies by a constant mask; used for dropout.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, &[a], Box::new(move |g, _, _, _| vec![Some(g * &mask)]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(
            v,
            &[a],
            Box::new(|g, x, _, _| vec![Some(ArrayD::from_elem(x[0].raw_dim(), grad_scalar(g)))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `(m, n) -> (n)`, summing over rows.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = view2(self.value(a)).sum_axis(Axis(0)).into_dyn();
        self.push(
            v,
            &[a],
            Box::new(|g, x, _, _| {
                let m = x[0].shape()[0];
                let row = Array2::from_shape_vec((1, g.len()), g.iter().copied().collect()).unwrap();
                let full = row.broadcast((m, g.len())).unwrap().to_owned();
                vec![Some(full.into_dyn())]
            }),
        )
    }

    /// `(m, n) -> (n)`, averaging over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).shape()[0].max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = view2(self.value(a)).dot(&view2(self.value(b))).into_dyn();
        self.push(
            v,
            &[a, b],
            Box::new(|g, x, _, needs| {
                let g2 = view2(g);
                vec![
                    needs[0].then(|| g2.dot(&view2(x[1]).t()).into_dyn()),
                    needs[1].then(|| view2(x[0]).t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = view2(self.value(a)).t().to_owned().into_dyn();
        self.push(
            v,
            &[a],
            Box::new(|g, _, _, _| vec![Some(view2(g).t().to_owned().into_dyn())]),
        )
    }

    /// `x (..., C) + b (C)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(
            v,
            &[x, b],
            Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| as_rows(g).sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    /// Per-channel affine map over the trailing axis: `x * scale + shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let v = self.value(x) * self.value(scale) + self.value(shift);
        self.push(
            v,
            &[x, scale, shift],
            Box::new(|g, inp, _, needs| {
                let gx = needs[0].then(|| g * inp[1]);
                let gscale = needs[1].then(|| {
                    let gx_rows = as_rows(g);
                    let x_rows = as_rows(inp[0]);
                    (&gx_rows * &x_rows).sum_axis(Axis(0)).into_dyn()
                });
                let gshift = needs[2].then(|| as_rows(g).sum_axis(Axis(0)).into_dyn());
                vec![gx, gscale, gshift]
            }),
        )
    }

    /// Standardises each trailing-axis channel over all other axes:
    /// `(x - mean) / sqrt(var + NORM_EPS)` with population variance.
    pub fn channel_standardize(&mut self, x: Var) -> Var {
        let rows = as_rows(self.value(x));
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let centered = &rows - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let y = (&centered * &inv).into_shape_with_order(self.value(x).raw_dim()).expect("same size");
        self.push(
            y,
            &[x],
            Box::new(move |g, _, out, _| {
                let gr = as_rows(g);
                let yr = as_rows(out);
                let n = gr.nrows().max(1) as f64;
                let gmean = gr.sum_axis(Axis(0)) / n;
                let gy_mean = (&gr * &yr).sum_axis(Axis(0)) / n;
                let gx = (&gr - &gmean - &(&yr * &gy_mean)) * &inv;
                vec![Some(gx.into_shape_with_order(g.raw_dim()).expect("same size"))]
            }),
        )
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = view2(self.value(a));
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(
            y.into_dyn(),
            &[a],
            Box::new(|g, _, out, _| {
                let y = view2(out);
                let g2 = view2(g);
                let dots = (&g2 * &y).sum_axis(Axis(1));
                let mut gx = Array2::zeros(y.raw_dim());
                Zip::from(gx.rows_mut())
                    .and(g2.rows())
                    .and(y.rows())
                    .and(&dots)
                    .for_each(|mut gr, grow, yrow, &d| {
                        Zip::from(&mut gr)
                            .and(&grow)
                            .and(&yrow)
                            .for_each(|o, &gv, &yv| *o = yv * (gv - d));
                    });
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(
            v,
            &[a],
            Box::new(|g, x, _, _| {
                let gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(x[0].raw_dim())
                    .unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            v,
            &[a],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    /// Columns `lo..hi` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let v = view2(self.value(a)).slice(s![.., lo..hi]).to_owned().into_dyn();
        self.push(
            v,
            &[a],
            Box::new(move |g, x, _, _| {
                let mut gx = Array2::<f64>::zeros((x[0].shape()[0], x[0].shape()[1]));
                gx.slice_mut(s![.., lo..hi]).assign(&view2(g));
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| view2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .expect("row counts agree")
            .into_dyn();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.push(
            v,
            parts,
            Box::new(move |g, _, _, needs| {
                let g2 = view2(g);
                let mut lo = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| g2.slice(s![.., lo..lo + w]).to_owned().into_dyn());
                        lo += w;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Replaces the listed rows of `e (N, d)` with `token (d)`.
    pub fn mask_rows(&mut self, e: Var, token: Var, positions: &[usize]) -> Var {
        let mut v = view2(self.value(e)).to_owned();
        let tok = self.value(token).clone();
        for &p in positions {
            v.row_mut(p).assign(&tok);
        }
        let positions = positions.to_vec();
        self.push(
            v.into_dyn(),
            &[e, token],
            Box::new(move |g, _, _, needs| {
                let g2 = view2(g);
                let ge = needs[0].then(|| {
                    let mut ge = g2.to_owned();
                    for &p in &positions {
                        ge.row_mut(p).fill(0.0);
                    }
                    ge.into_dyn()
                });
                let gt = needs[1].then(|| {
                    let mut acc = ndarray::Array1::<f64>::zeros(g2.ncols());
                    for &p in &positions {
                        acc += &g2.row(p);
                    }
                    acc.into_dyn()
                });
                vec![ge, gt]
            }),
        )
    }

    /// Selects rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = view2(self.value(a));
        let v = x.select(Axis(0), rows).into_dyn();
        let rows = rows.to_vec();
        self.push(
            v,
            &[a],
            Box::new(move |g, x, _, _| {
                let g2 = view2(g);
                let mut gx = Array2::<f64>::zeros((x[0].shape()[0], x[0].shape()[1]));
                for (k, &r) in rows.iter().enumerate() {
                    let mut row = gx.row_mut(r);
                    row += &g2.row(k);
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    // ---- distances and losses --------------------------------------------

    /// Euclidean distance between two vectors. The gradient at zero distance
    /// is taken as zero.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Var {
        let diff = self.value(a) - self.value(b);
        let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(
            scalar(d),
            &[a, b],
            Box::new(move |g, _, _, needs| {
                let gs = grad_scalar(g);
                let ga = if d > 0.0 {
                    &diff * (gs / d)
                } else {
                    ArrayD::zeros(diff.raw_dim())
                };
                let gb = needs[1].then(|| -&ga);
                vec![needs[0].then_some(ga), gb]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits (M, L)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = view2(self.value(logits));
        let m = x.nrows();
        let mut probs = x.to_owned();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let mx = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        loss /= m as f64;
        let targets = targets.to_vec();
        self.push(
            scalar(loss),
            &[logits],
            Box::new(move |g, _, _, _| {
                let gs = grad_scalar(g) / m as f64;
                let mut gx = probs.clone();
                for (mut row, &t) in gx.rows_mut().into_iter().zip(&targets) {
                    row[t] -= 1.0;
                    row.mapv_inplace(|v| v * gs);
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    // ---- convolution ------------------------------------------------------

    /// 2D convolution over channel-last input `x (N, H, W, Ci)` with weight
    /// `w (Co, Ci, k, k)`, replicate padding of `k / 2` and the given stride.
    /// Output spatial extent is `ceil(n / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride);
        let wmat = weight_matrix(self.value(w));
        let cols = im2col(self.value(x), &geom);
        let out = cols.dot(&wmat);
        let v = out
            .into_shape_with_order(IxDyn(&[geom.n, geom.ho, geom.wo, geom.co]))
            .unwrap();
        self.push(
            v,
            &[x, w],
            Box::new(move |g, inp, _, needs| {
                let g = g.as_standard_layout();
                let g2 = g
                    .view()
                    .into_shape_with_order((geom.n * geom.ho * geom.wo, geom.co))
                    .unwrap();
                let gw = needs[1].then(|| {
                    let cols = im2col(inp[0], &geom);
                    let gmat = cols.t().dot(&g2);
                    weight_from_matrix(&gmat, &geom)
                });
                let gx = needs[0].then(|| {
                    let wmat = weight_matrix(inp[1]);
                    let gcols = g2.dot(&wmat.t());
                    col2im(&gcols, &geom)
                });
                vec![gx, gw]
            }),
        )
    }

    /// `(N, H, W, C) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let area = (h * w) as f64;
        let v = self
            .value(x)
            .as_standard_layout()
            .into_shape_with_order((n, h * w, c))
            .unwrap()
            .sum_axis(Axis(1))
            .mapv(|s| s / area)
            .into_dyn();
        self.push(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                let g2 = view2(g).mapv(|v| v / area);
                let full = g2
                    .into_shape_with_order((n, 1, c))
                    .unwrap()
                    .broadcast((n, h * w, c))
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[n, h, w, c]))
                    .unwrap();
                vec![Some(full)]
            }),
        )
    }

    // ---- volume reconstruction -------------------------------------------

    /// Replicates each row of `e (N, d)` across the two in-plane axes of a
    /// `(W, D, H)` grid, returning voxel rows `(W*D*H, d)` in row-major voxel
    /// order.
    pub fn broadcast_plane(&mut self, e: Var, plane: PlaneId, grid: [usize; 3]) -> Var {
        let ev = view2(self.value(e)).to_owned();
        let d = ev.ncols();
        let index = plane_index_map(plane, grid);
        let mut out = Array2::<f64>::zeros((index.len(), d));
        for (mut row, &k) in out.rows_mut().into_iter().zip(&index) {
            row.assign(&ev.row(k));
        }
        self.push(
            out.into_dyn(),
            &[e],
            Box::new(move |g, x, _, _| {
                let g2 = view2(g);
                let mut ge = Array2::<f64>::zeros((x[0].shape()[0], d));
                for (row, &k) in g2.rows().into_iter().zip(&index) {
                    let mut target = ge.row_mut(k);
                    target += &row;
                }
                vec![Some(ge.into_dyn())]
            }),
        )
    }

    /// Linear resize of one axis with aligned corners.
    pub fn resize_axis(&mut self, x: Var, axis: usize, target: usize) -> Var {
        let src = self.value(x).shape()[axis];
        let taps = linear_taps(src, target);
        let v = apply_taps(self.value(x), axis, &taps, target);
        self.push(
            v,
            &[x],
            Box::new(move |g, inp, _, _| vec![Some(apply_taps_transposed(g, axis, &taps, inp[0].shape()[axis]))]),
        )
    }
}

/// For each voxel of a `(W, D, H)` grid in row-major order, the slice index
/// along `plane`'s axis.
pub fn plane_index_map(plane: PlaneId, grid: [usize; 3]) -> Vec<usize> {
    let [w, d, h] = grid;
    let mut out = Vec::with_capacity(w * d * h);
    for i in 0..w {
        for j in 0..d {
            for k in 0..h {
                out.push(match plane {
                    PlaneId::Sagittal => i,
                    PlaneId::Coronal => j,
                    PlaneId::Axial => k,
                });
            }
        }
    }
    out
}

/// `(lo, hi, weight_hi)` per target index for align-corners linear resize.
pub(crate) fn linear_taps(src: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|t| {
            if src == 1 || target == 1 {
                return (0, 0, 0.0);
            }
            let pos = t as f64 * (src - 1) as f64 / (target - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn apply_taps(x: &Tensor, axis: usize, taps: &[(usize, usize, f64)], target: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape[axis] = target;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (t, &(lo, hi, w)) in taps.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(axis), t);
        let a = x.index_axis(Axis(axis), lo);
        let b = x.index_axis(Axis(axis), hi);
        Zip::from(&mut dst)
            .and(&a)
            .and(&b)
            .for_each(|o, &av, &bv| *o = (1.0 - w) * av + w * bv);
    }
    out
}

fn apply_taps_transposed(g: &Tensor, axis: usize, taps: &[(usize, usize, f64)], src: usize) -> Tensor {
    let mut shape = g.shape().to_vec();
    shape[axis] = src;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (t, &(lo, hi, w)) in taps.iter().enumerate() {
        let gs = g.index_axis(Axis(axis), t);
        {
            let mut dst = out.index_axis_mut(Axis(axis), lo);
            dst.scaled_add(1.0 - w, &gs);
        }
        if w != 0.0 {
            let mut dst = out.index_axis_mut(Axis(axis), hi);
            dst.scaled_add(w, &gs);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be (N, H, W, C)");
        assert_eq!(w.len(), 4, "conv2d weight must be (Co, Ci, k, k)");
        assert_eq!(x[3], w[1], "conv2d channel mismatch");
        assert_eq!(w[2], w[3], "square kernels only");
        let k = w[2];
        Self {
            n: x[0],
            h: x[1],
            w: x[2],
            ci: x[3],
            co: w[0],
            k,
            stride,
            pad: k / 2,
            ho: x[1].div_ceil(stride),
            wo: x[2].div_ceil(stride),
        }
    }

    fn src(&self, o: usize, kk: usize, extent: usize) -> usize {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        p.clamp(0, extent as isize - 1) as usize
    }
}

/// Weight `(Co, Ci, k, k)` as a `(k*k*Ci, Co)` matrix with row order
/// `(ky, kx, ci)`, matching the column layout of [`im2col`].
fn weight_matrix(w: &Tensor) -> Array2<f64> {
    let s = w.shape();
    let (co, ci, k) = (s[0], s[1], s[2]);
    let mut m = Array2::<f64>::zeros((k * k * ci, co));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    m[[(ky * k + kx) * ci + c, o]] = w[[o, c, ky, kx]];
                }
            }
        }
    }
    m
}

fn weight_from_matrix(m: &Array2<f64>, geom: &ConvGeometry) -> Tensor {
    let (co, ci, k) = (geom.co, geom.ci, geom.k);
    let mut w = ArrayD::<f64>::zeros(IxDyn(&[co, ci, k, k]));
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    w[[o, c, ky, kx]] = m[[(ky * k + kx) * ci + c, o]];
                }
            }
        }
    }
    w
}

fn im2col(x: &Tensor, g: &ConvGeometry) -> Array2<f64> {
    let xs = x.as_slice().expect("standard layout input");
    let kk = g.k * g.k * g.ci;
    let rows = g.n * g.ho * g.wo;
    let mut cols = vec![0.0; rows * kk];
    let mut r = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[r * kk..(r + 1) * kk];
                for ky in 0..g.k {
                    let iy = g.src(oy, ky, g.h);
                    for kx in 0..g.k {
                        let ix = g.src(ox, kx, g.w);
                        let base = ((n * g.h + iy) * g.w + ix) * g.ci;
                        let dst = (ky * g.k + kx) * g.ci;
                        row[dst..dst + g.ci].copy_from_slice(&xs[base..base + g.ci]);
                    }
                }
                r += 1;
            }
        }
    }
    Array2::from_shape_vec((rows, kk), cols).unwrap()
}

fn col2im(cols: &Array2<f64>, g: &ConvGeometry) -> Tensor {
    let cs = cols.as_slice().expect("standard layout");
    let kk = g.k * g.k * g.ci;
    let mut x = vec![0.0; g.n * g.h * g.w * g.ci];
    let mut r = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cs[r * kk..(r + 1) * kk];
                for ky in 0..g.k {
                    let iy = g.src(oy, ky, g.h);
                    for kx in 0..g.k {
                        let ix = g.src(ox, kx, g.w);
                        let base = ((n * g.h + iy) * g.w + ix) * g.ci;
                        let src = (ky * g.k + kx) * g.ci;
                        for c in 0..g.ci {
                            x[base + c] += row[src + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.h, g.w, g.ci]), x).unwrap()
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use crate::params::ParamStore;

    /// Registers every entry of `params` as a parameter leaf.
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v)))
            .collect()
    }

    /// Gradient norms below this are compared in absolute terms.
    pub const GRAD_FLOOR: f64 = 1e-4;

    /// Largest per-tensor relative error `|fd - an| / max(|fd|, |an|)` (L2
    /// norms) between the tape gradient and central finite differences over
    /// every parameter in `params`. `build` must register the
    /// parameters it uses via [`Tape::param`] from the store it is given.
    pub fn check(params: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Var, eps: f64) -> f64 {
        let eval = |p: &ParamStore| {
            let mut tape = Tape::new();
            let loss = build(&mut tape, p);
            (tape.scalar(loss), tape.backward(loss))
        };
        let (_, grads) = eval(params);
        let mut worst: f64 = 0.0;
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let value = params.get(&name).unwrap();
            let analytic = grads
                .get(&name)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            let mut diff2 = 0.0;
            let mut fd2: f64 = 0.0;
            let mut an2: f64 = 0.0;
            for idx in 0..value.len() {
                let mut plus = params.clone();
                plus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] += eps;
                let mut minus = params.clone();
                minus.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                diff2 += (fd - an).powi(2);
                fd2 += fd * fd;
                an2 += an * an;
            }
            let err = diff2.sqrt() / fd2.sqrt().max(an2.sqrt()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{bind, check};
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn params(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (n, s) in entries {
            store.insert(*n, rand_tensor(&mut rng, s));
        }
        store
    }

    #[test]
    fn column_major_gradients_reach_channel_ops() {
        // The transpose backward hands a column-major gradient upstream.
        let p = params(&[("x", &[3, 2]), ("b", &[2]), ("s", &[2]), ("w", &[2, 3])], 21);
        let err = check(
            &p,
            |t, ps| {
                let v = bind(t, ps);
                let y = t.add_bias(v["x"], v["b"]);
                let y = t.channel_affine(y, v["s"], v["b"]);
                let y = t.channel_standardize(y);
                let z = t.transpose(y);
                let z = t.mul(z, v["w"]);
                t.sum(z)
            },
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn matmul_softmax_chain_gradients() {
        let p = params(&[("a", &[3, 4]), ("b", &[4, 5])], 1);
        let err = check(
            &p,
            |t, p| {
                let v = bind(t, p);
                let m = t.matmul(v["a"], v["b"]);
                let s = t.softmax_rows(m);
                let sq = t.mul(s, m);
                t.sum(sq)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_gradients_with_stride() {
        let p = params(&[("x", &[2, 5, 4, 3]), ("w", &[2, 3, 3, 3])], 2);
        for stride in [1, 2] {
            let err = check(
                &p,
                |t, p| {
                let v = bind(t, p);
                    let y = t.conv2d(v["x"], v["w"], stride);
                    let y2 = t.mul(y, y);
                    t.sum(y2)
                },
                1e-6,
            );
            assert!(err < 1e-6, "stride {stride}: {err}");
        }
    }

    #[test]
    fn affine_pool_relu_gradients() {
        let p = params(
            &[("x", &[2, 3, 3, 2]), ("s", &[2]), ("b", &[2]), ("w", &[2, 3])],
            3,
        );
        let err = check(
            &p,
            |t, p| {
                let v = bind(t, p);
                let y = t.channel_standardize(v["x"]);
                let y = t.channel_affine(y, v["s"], v["b"]);
                let y = t.relu(y);
                let pooled = t.global_avg_pool(y);
                let z = t.matmul(pooled, v["w"]);
                let z2 = t.mul(z, z);
                t.mean(z2)
            },
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn shape_ops_gradients() {
        let p = params(&[("a", &[4, 3]), ("tok", &[3]), ("c", &[4, 2])], 4);
        let err = check(
            &p,
            |t, p| {
                let v = bind(t, p);
                let m = t.mask_rows(v["a"], v["tok"], &[1, 3]);
                let cat = t.concat_cols(&[m, v["c"]]);
                let sl = t.slice_cols(cat, 1, 4);
                let tr = t.transpose(sl);
                let r = t.reshape(tr, &[2, 6]);
                let g = t.gather_rows(r, &[1, 1, 0]);
                let p = t.permute(g, &[1, 0]);
                let sq = t.mul(p, p);
                let rows = t.mean_rows(sq);
                t.sum(rows)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn loss_primitive_gradients() {
        let p = params(&[("a", &[5]), ("b", &[5]), ("l", &[4, 3]), ("q", &[4, 3])], 5);
        let err = check(
            &p,
            |t, p| {
                let v = bind(t, p);
                let d = t.l2_distance(v["a"], v["b"]);
                let ce = t.softmax_cross_entropy(v["l"], &[0, 2, 1, 2]);
                let ab = t.abs(v["q"]);
                let num = t.add_scalar(ab, 1.0);
                let den = t.add_scalar(ab, 2.0);
                let ratio = t.div(num, den);
                let r = t.mean(ratio);
                let s = t.add(d, ce);
                t.add(s, r)
            },
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn broadcast_and_resize_gradients() {
        let p = params(&[("e", &[3, 2]), ("m", &[2, 3, 2, 2])], 6);
        let err = check(
            &p,
            |t, p| {
                let v = bind(t, p);
                let b = t.broadcast_plane(v["e"], PlaneId::Coronal, [2, 3, 2]);
                let r = t.resize_axis(v["m"], 0, 4);
                let r = t.resize_axis(r, 1, 5);
                let r2 = t.mul(r, r);
                let b2 = t.mul(b, b);
                let s1 = t.sum(r2);
                let s2 = t.sum(b2);
                t.add(s1, s2)
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut tape = Tape::with_frozen(|n| n.starts_with("enc"));
        let a = tape.param("enc.w", &ArrayD::ones(IxDyn(&[2])));
        let b = tape.param("head.w", &ArrayD::ones(IxDyn(&[2])));
        let m = tape.mul(a, b);
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert!(g.get("enc.w").is_none());
        assert!(g.get("head.w").is_some());
    }

    #[test]
    fn replicate_padding_keeps_constant_maps_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 7, 5, 2]), 0.5));
        let w = tape.constant(ArrayD::from_elem(IxDyn(&[3, 2, 3, 3]), 0.25));
        let y = tape.conv2d(x, w, 2);
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 4, 3, 3]);
        for v in out.iter() {
            assert!((v - 0.5 * 0.25 * 18.0).abs() < 1e-12);
        }
    }
}
