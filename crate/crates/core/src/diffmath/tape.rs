//! Tensor-level reverse-mode tape.
//!
//! Every primitive records its output value and enough context to
//! propagate gradients. Nodes are appended in evaluation order, so the
//! node list is already topologically sorted and backward walks it once
//! in reverse.

use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Behaviour of bilinear lookups that land outside the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBounds {
    #[default]
    Clamp,
    Zero,
}

/// Precomputed bilinear taps for one lookup; weights are zero for
/// lookups that resolve to a zero row.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps<T> {
    idx: [u32; 4],
    w: [T; 4],
}

impl<T: Real> Taps<T> {
    /// Taps into an `height × width` grid for pixel coordinates `(u, v)`
    /// whose pixel centres sit at integer + 0.5.
    pub(crate) fn new(u: T, v: T, width: usize, height: usize, policy: OutOfBounds) -> Self {
        let half = T::lit(0.5);
        let zero_row = Self {
            idx: [0; 4],
            w: [T::zero(); 4],
        };
        if !u.is_finite() || !v.is_finite() {
            return zero_row;
        }
        if policy == OutOfBounds::Zero
            && (u < T::zero() || v < T::zero() || u > T::lit(width as f64) || v > T::lit(height as f64))
        {
            return zero_row;
        }
        let gx = (u - half).max(T::zero()).min(T::lit((width - 1) as f64));
        let gy = (v - half).max(T::zero()).min(T::lit((height - 1) as f64));
        let x0 = gx.floor().to_usize().unwrap_or(0).min(width - 1);
        let y0 = gy.floor().to_usize().unwrap_or(0).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fx = gx - T::lit(x0 as f64);
        let fy = gy - T::lit(y0 as f64);
        let one = T::one();
        Self {
            idx: [
                (y0 * width + x0) as u32,
                (y0 * width + x1) as u32,
                (y1 * width + x0) as u32,
                (y1 * width + x1) as u32,
            ],
            w: [
                (one - fx) * (one - fy),
                fx * (one - fy),
                (one - fx) * fy,
                fx * fy,
            ],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Act {
        x: Var,
        act: Activation,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<T>,
    },
    UpsampleHwc {
        x: Var,
        taps_y: Vec<(usize, usize, T)>,
        taps_x: Vec<(usize, usize, T)>,
    },
    Gather {
        map: Var,
        taps: Vec<Taps<T>>,
    },
    PoolMeanVar(Vec<Var>),
    RenderWeights {
        sigma: Var,
        deltas: Vec<T>,
    },
    RayWeightedSum {
        weights: Var,
        values: Var,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    GradDiffMse {
        pred: Var,
        target: Vec<T>,
        patch: usize,
    },
    WeightedSqErr {
        weights: Var,
        pred: Var,
        target: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    track: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    strict: bool,
    num_params: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            strict: false,
            num_params: 0,
        }
    }

    /// A tape that rejects any non-finite intermediate value.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.strict && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
            track: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant input. Tensors flagged `requires_grad` get
    /// their gradient reported through [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let track = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.num_params = self.num_params.max(store.len());
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
            track: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x·w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let (kw, m) = self.value(w).dims2()?;
        if k != kw {
            return Err(shape_err!("linear input width {k} vs weight rows {kw}"));
        }
        let mut out = Vec::with_capacity(n * m);
        match b {
            Some(b) => {
                let bias = self.value(b).data();
                if bias.len() != m {
                    return Err(shape_err!("bias length {} vs {m}", bias.len()));
                }
                for _ in 0..n {
                    out.extend_from_slice(bias);
                }
            }
            None => out.resize(n * m, T::zero()),
        }
        let beta = T::one();
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            m as isize,
            1,
            beta,
            &mut out,
            m as isize,
            1,
        );
        let value = Tensor::new(vec![n, m], out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::None {
            return Ok(x);
        }
        let value = self.value(x).map(|v| act.apply(v));
        self.push(value, Op::Act { x, act })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    fn same_len(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(shape_err!("concat rows {r} vs {n}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * c..(row + 1) * c]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != tail[..] {
                return Err(shape_err!("concat trailing shape {:?} vs {tail:?}", &s[1..]));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if start + len > c || len == 0 {
            return Err(shape_err!("column slice {start}+{len} of width {c}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for row in 0..n {
            out.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        self.push(value, Op::SliceCols { x, start })
    }

    /// 3×3 convolution with zero padding 1: `x: [cin, h, w]`,
    /// `w: [cout, cin, 3, 3]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [cin, h, wd] = xs[..] else {
            return Err(shape_err!("conv input must be [c, h, w], got {xs:?}"));
        };
        let [cout, wcin, 3, 3] = ws[..] else {
            return Err(shape_err!("conv weight must be [cout, cin, 3, 3], got {ws:?}"));
        };
        if wcin != cin {
            return Err(shape_err!("conv weight expects {wcin} channels, input has {cin}"));
        }
        if self.value(b).len() != cout || stride == 0 {
            return Err(shape_err!("conv bias/stride"));
        }
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let cols = im2col(self.value(x).data(), cin, h, wd, stride, ho, wo);
        let hw = ho * wo;
        let mut out = Vec::with_capacity(cout * hw);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat_n(bias, hw));
        }
        let kk = cin * 9;
        T::gemm(
            cout,
            kk,
            hw,
            T::one(),
            self.value(w).data(),
            kk as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            &mut out,
            hw as isize,
            1,
        );
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            },
        )
    }

    /// Bilinear resize of `[c, h, w]` to a channels-last `[out_h, out_w, c]`
    /// grid, aligning pixel centres.
    pub fn upsample_hwc(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [c, h, w] = xs[..] else {
            return Err(shape_err!("upsample input must be [c, h, w], got {xs:?}"));
        };
        let taps_y = resize_taps::<T>(h, out_h);
        let taps_x = resize_taps::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        let plane = h * w;
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let one = T::one();
                let w00 = (one - fy) * (one - fx);
                let w01 = (one - fy) * fx;
                let w10 = fy * (one - fx);
                let w11 = fy * fx;
                let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                for (ch, d) in dst.iter_mut().enumerate() {
                    let base = ch * plane;
                    *d = w00 * src[base + y0 * w + x0]
                        + w01 * src[base + y0 * w + x1]
                        + w10 * src[base + y1 * w + x0]
                        + w11 * src[base + y1 * w + x1];
                }
            }
        }
        let value = Tensor::new(vec![out_h, out_w, c], out)?;
        self.push(value, Op::UpsampleHwc { x, taps_y, taps_x })
    }

    /// Bilinear lookups into a channels-last `[h, w, c]` map at pixel
    /// coordinates; produces `[points, c]`.
    pub fn gather_bilinear(
        &mut self,
        map: Var,
        coords: &[(T, T)],
        policy: OutOfBounds,
    ) -> Result<Var> {
        let (h, w, c) = hwc_dims(self.value(map))?;
        let taps: Vec<Taps<T>> = coords
            .iter()
            .map(|&(u, v)| Taps::new(u, v, w, h, policy))
            .collect();
        let value = gather_values(self.value(map).data(), c, &taps)?;
        self.push(value, Op::Gather { map, taps })
    }

    /// Same lookup as [`Tape::gather_bilinear`] against a constant map.
    pub fn gather_bilinear_const(
        &mut self,
        map: &Tensor<T>,
        coords: &[(T, T)],
        policy: OutOfBounds,
    ) -> Result<Var> {
        let (h, w, c) = hwc_dims(map)?;
        let taps: Vec<Taps<T>> = coords
            .iter()
            .map(|&(u, v)| Taps::new(u, v, w, h, policy))
            .collect();
        let value = gather_values(map.data(), c, &taps)?;
        Ok(self.leaf(value))
    }

    /// Elementwise mean and population variance across views,
    /// concatenated as `[points, 2c]`.
    pub fn pool_mean_var(&mut self, views: &[Var]) -> Result<Var> {
        if views.is_empty() {
            return Err(Error::Argument("pooling needs at least one view".into()));
        }
        let (p, c) = self.value(views[0]).dims2()?;
        for &v in views {
            if self.value(v).dims2()? != (p, c) {
                return Err(shape_err!("pooled views differ in shape"));
            }
        }
        let n = T::lit(views.len() as f64);
        let mut out = vec![T::zero(); p * 2 * c];
        for row in 0..p {
            let dst = &mut out[row * 2 * c..(row + 1) * 2 * c];
            for &v in views {
                let src = &self.nodes[v.0].value.data()[row * c..(row + 1) * c];
                for (d, s) in dst[..c].iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
            for d in &mut dst[..c] {
                *d = *d / n;
            }
            for &v in views {
                let src = &self.nodes[v.0].value.data()[row * c..(row + 1) * c];
                for ch in 0..c {
                    let e = src[ch] - dst[ch];
                    dst[c + ch] = dst[c + ch] + e * e;
                }
            }
            for d in &mut dst[c..] {
                *d = *d / n;
            }
        }
        let value = Tensor::new(vec![p, 2 * c], out)?;
        self.push(value, Op::PoolMeanVar(views.to_vec()))
    }

    /// Quadrature weights `w_i = T_i (1 - exp(-σ_i δ_i))` for `[rays, samples]`.
    pub fn render_weights(&mut self, sigma: Var, deltas: &[T]) -> Result<Var> {
        let (r, s) = self.value(sigma).dims2()?;
        if deltas.len() != r * s {
            return Err(shape_err!("{} deltas for {r}x{s} samples", deltas.len()));
        }
        let sig = self.value(sigma).data();
        if let Some(bad) = sig.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("density {bad}")));
        }
        let mut out = vec![T::zero(); r * s];
        for ray in 0..r {
            let mut optical = T::zero();
            for i in 0..s {
                let k = ray * s + i;
                let a = sig[k] * deltas[k];
                let trans = (-optical).exp();
                out[k] = trans * -(-a).exp_m1();
                optical = optical + a;
            }
        }
        let value = Tensor::new(vec![r, s], out)?;
        self.push(
            value,
            Op::RenderWeights {
                sigma,
                deltas: deltas.to_vec(),
            },
        )
    }

    /// `out[r] = Σ_s w[r, s] · values[r·S + s]` for `values: [r·S, k]`.
    pub fn ray_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (r, s) = self.value(weights).dims2()?;
        let (n, k) = self.value(values).dims2()?;
        if n != r * s {
            return Err(shape_err!("{n} value rows for {r}x{s} weights"));
        }
        let w = self.value(weights).data();
        let vals = self.value(values).data();
        let mut out = vec![T::zero(); r * k];
        for ray in 0..r {
            let dst = &mut out[ray * k..(ray + 1) * k];
            for i in 0..s {
                let wi = w[ray * s + i];
                let src = &vals[(ray * s + i) * k..(ray * s + i + 1) * k];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *d + wi * *v;
                }
            }
        }
        let value = Tensor::new(vec![r, k], out)?;
        self.push(value, Op::RayWeightedSum { weights, values })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(shape_err!("mse {} vs {}", p.len(), target.len()));
        }
        let n = T::lit(p.len() as f64);
        let total: T = p.iter().zip(target).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Mean squared difference between horizontal and vertical finite
    /// differences of predicted and target patches. `pred` holds
    /// `[patches·p·p, channels]` rows in patch-major, row-major order.
    pub fn grad_diff_mse(&mut self, pred: Var, target: &[T], patch: usize) -> Result<Var> {
        let (rows, c) = self.value(pred).dims2()?;
        if patch < 2 || rows % (patch * patch) != 0 || target.len() != rows * c {
            return Err(shape_err!("patch loss over {rows} rows with patch {patch}"));
        }
        let p = self.value(pred).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for_each_patch_diff(rows / (patch * patch), patch, c, |a, b| {
            let e = (p[b] - p[a]) - (target[b] - target[a]);
            total = total + e * e;
            count += 1;
        });
        self.push(
            Tensor::scalar(total / T::lit(count as f64)),
            Op::GradDiffMse {
                pred,
                target: target.to_vec(),
                patch,
            },
        )
    }

    /// `(1/R) Σ_r Σ_s w[r,s] · mean_d (pred − target)²` over `[r·S, d]` rows.
    pub fn weighted_sq_err(&mut self, weights: Var, pred: Var, target: &[T]) -> Result<Var> {
        let (r, s) = self.value(weights).dims2()?;
        let (n, d) = self.value(pred).dims2()?;
        if n != r * s || target.len() != n * d {
            return Err(shape_err!("weighted error over {n}x{d} with {r}x{s} weights"));
        }
        let w = self.value(weights).data();
        let p = self.value(pred).data();
        let mut total = T::zero();
        for row in 0..n {
            let err: T = (0..d)
                .map(|j| {
                    let e = p[row * d + j] - target[row * d + j];
                    e * e
                })
                .sum();
            total = total + w[row] * err / T::lit(d as f64);
        }
        self.push(
            Tensor::scalar(total / T::lit(r as f64)),
            Op::WeightedSqErr {
                weights,
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// `Σ coef · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, coef) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err!("weighted_sum expects scalars"));
            }
            total = total + coef * self.value(v).data()[0];
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Propagate `seed` (defaults to 1 for scalar outputs) from `output`
    /// back to every parameter and tracked leaf. Consumes the tape.
    pub fn backward(&mut self, output: Var, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        self.consumed = true;
        let out_len = self.value(output).len();
        let seed = match seed {
            Some(s) if s.len() == out_len => s.into_data(),
            Some(s) => return Err(shape_err!("seed has {} elements, output {out_len}", s.len())),
            None if out_len == 1 => vec![T::one()],
            None => return Err(shape_err!("non-scalar output needs an explicit seed")),
        };
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
        }

        let mut out = Gradients::empty(self.num_params);
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[id];
            if let Some(pid) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match &mut out.params[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            } else if node.track {
                out.leaves
                    .push((id, Tensor::new(node.value.shape().to_vec(), g)?));
            }
        }
        Ok(out)
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2()?;
                let m = self.value(*w).dims2()?.1;
                if needs(&self.nodes, *x) {
                    let dx = grad_slot(grads, *x, n * k);
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        m as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        m as isize,
                        T::one(),
                        dx,
                        k as isize,
                        1,
                    );
                }
                if needs(&self.nodes, *w) {
                    let dw = grad_slot(grads, *w, k * m);
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        self.value(*x).data(),
                        1,
                        k as isize,
                        g,
                        m as isize,
                        1,
                        T::one(),
                        dw,
                        m as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    let db = grad_slot(grads, *b, m);
                    for row in g.chunks_exact(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d = *d + *v;
                        }
                    }
                }
            }
            Op::Act { x, act } => {
                let y = node.value.data();
                let xin = self.value(*x).data();
                let dx = grad_slot(grads, *x, y.len());
                match act {
                    Activation::None => add_into(dx, g),
                    Activation::Relu => {
                        for i in 0..y.len() {
                            if y[i] > T::zero() {
                                dx[i] = dx[i] + g[i];
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for i in 0..y.len() {
                            dx[i] = dx[i] + g[i] * y[i] * (T::one() - y[i]);
                        }
                    }
                    Activation::Softplus => {
                        for i in 0..y.len() {
                            dx[i] = dx[i] + g[i] * sigmoid(xin[i]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grad_slot(grads, *a, g.len()), g);
                add_into(grad_slot(grads, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * bv[i];
                }
                let db = grad_slot(grads, *b, g.len());
                for i in 0..g.len() {
                    db[i] = db[i] + g[i] * av[i];
                }
            }
            Op::Scale(a, f) => {
                let da = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * *f;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let da = grad_slot(grads, *a, n);
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2()?.0;
                let total = node.value.dims2()?.1;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims2()?.1;
                    if needs(&self.nodes, p) {
                        let dp = grad_slot(grads, p, n * c);
                        for row in 0..n {
                            add_into(
                                &mut dp[row * c..(row + 1) * c],
                                &g[row * total + offset..row * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(grad_slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Reshape(x) => add_into(grad_slot(grads, *x, g.len()), g),
            Op::SliceCols { x, start } => {
                let (n, c) = self.value(*x).dims2()?;
                let len = node.value.dims2()?.1;
                let dx = grad_slot(grads, *x, n * c);
                for row in 0..n {
                    add_into(
                        &mut dx[row * c + start..row * c + start + len],
                        &g[row * len..(row + 1) * len],
                    );
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let os = node.value.shape();
                let (cout, ho, wo) = (os[0], os[1], os[2]);
                let hw = ho * wo;
                let kk = cin * 9;
                let db = grad_slot(grads, *b, cout);
                for (o, row) in g.chunks_exact(hw).enumerate() {
                    db[o] = db[o] + row.iter().copied().sum();
                }
                let dw = grad_slot(grads, *w, cout * kk);
                T::gemm(
                    cout,
                    hw,
                    kk,
                    T::one(),
                    g,
                    hw as isize,
                    1,
                    cols,
                    1,
                    hw as isize,
                    T::one(),
                    dw,
                    kk as isize,
                    1,
                );
                if needs(&self.nodes, *x) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    T::gemm(
                        kk,
                        cout,
                        hw,
                        T::one(),
                        self.value(*w).data(),
                        1,
                        kk as isize,
                        g,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    let dx = grad_slot(grads, *x, cin * h * wd);
                    col2im_add(&dcols, dx, cin, h, wd, *stride, ho, wo);
                }
            }
            Op::UpsampleHwc { x, taps_y, taps_x } => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let plane = h * w;
                let out_w = taps_x.len();
                let dx = grad_slot(grads, *x, c * plane);
                for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                        let one = T::one();
                        let w00 = (one - fy) * (one - fx);
                        let w01 = (one - fy) * fx;
                        let w10 = fy * (one - fx);
                        let w11 = fy * fx;
                        let src = &g[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                        for (ch, &gv) in src.iter().enumerate() {
                            let base = ch * plane;
                            dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + w00 * gv;
                            dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + w01 * gv;
                            dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + w10 * gv;
                            dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + w11 * gv;
                        }
                    }
                }
            }
            Op::Gather { map, taps } => {
                let (h, w, c) = hwc_dims(self.value(*map))?;
                let dm = grad_slot(grads, *map, h * w * c);
                for (p, t) in taps.iter().enumerate() {
                    let src = &g[p * c..(p + 1) * c];
                    for j in 0..4 {
                        let wt = t.w[j];
                        if wt == T::zero() {
                            continue;
                        }
                        let base = t.idx[j] as usize * c;
                        for (d, gv) in dm[base..base + c].iter_mut().zip(src) {
                            *d = *d + wt * *gv;
                        }
                    }
                }
            }
            Op::PoolMeanVar(views) => {
                let (p, c2) = node.value.dims2()?;
                let c = c2 / 2;
                let n = T::lit(views.len() as f64);
                let two = T::lit(2.0);
                let pooled = node.value.data();
                for &v in views {
                    let xv = self.value(v).data();
                    let dv = grad_slot(grads, v, p * c);
                    for row in 0..p {
                        for ch in 0..c {
                            let mean = pooled[row * c2 + ch];
                            let gm = g[row * c2 + ch];
                            let gvar = g[row * c2 + c + ch];
                            let e = xv[row * c + ch] - mean;
                            dv[row * c + ch] = dv[row * c + ch] + (gm + two * e * gvar) / n;
                        }
                    }
                }
            }
            Op::RenderWeights { sigma, deltas } => {
                let (r, s) = self.value(*sigma).dims2()?;
                let sig = self.value(*sigma).data();
                let w = node.value.data();
                let ds = grad_slot(grads, *sigma, r * s);
                for ray in 0..r {
                    // suffix = Σ_{i>k} w_i g_i ; trans_next = T_{k+1}
                    let mut optical = T::zero();
                    let mut trans_next = vec![T::zero(); s];
                    for i in 0..s {
                        let k = ray * s + i;
                        optical = optical + sig[k] * deltas[k];
                        trans_next[i] = (-optical).exp();
                    }
                    let mut suffix = T::zero();
                    for i in (0..s).rev() {
                        let k = ray * s + i;
                        ds[k] = ds[k] + deltas[k] * (trans_next[i] * g[k] - suffix);
                        suffix = suffix + w[k] * g[k];
                    }
                }
            }
            Op::RayWeightedSum { weights, values } => {
                let (r, s) = self.value(*weights).dims2()?;
                let k = self.value(*values).dims2()?.1;
                let w = self.value(*weights).data();
                let vals = self.value(*values).data();
                if needs(&self.nodes, *weights) {
                    let dw = grad_slot(grads, *weights, r * s);
                    for ray in 0..r {
                        let gr = &g[ray * k..(ray + 1) * k];
                        for i in 0..s {
                            let row = &vals[(ray * s + i) * k..(ray * s + i + 1) * k];
                            let dot: T = row.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            dw[ray * s + i] = dw[ray * s + i] + dot;
                        }
                    }
                }
                if needs(&self.nodes, *values) {
                    let dv = grad_slot(grads, *values, r * s * k);
                    for ray in 0..r {
                        let gr = &g[ray * k..(ray + 1) * k];
                        for i in 0..s {
                            let wi = w[ray * s + i];
                            let dst = &mut dv[(ray * s + i) * k..(ray * s + i + 1) * k];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d = *d + wi * *gv;
                            }
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = T::lit(2.0) * g[0] / T::lit(p.len() as f64);
                let dp = grad_slot(grads, *pred, p.len());
                for i in 0..p.len() {
                    dp[i] = dp[i] + scale * (p[i] - target[i]);
                }
            }
            Op::GradDiffMse {
                pred,
                target,
                patch,
            } => {
                let (rows, c) = self.value(*pred).dims2()?;
                let p = self.value(*pred).data();
                let mut count = 0usize;
                for_each_patch_diff(rows / (patch * patch), *patch, c, |_, _| count += 1);
                let scale = T::lit(2.0) * g[0] / T::lit(count as f64);
                let dp = grad_slot(grads, *pred, rows * c);
                for_each_patch_diff(rows / (patch * patch), *patch, c, |a, b| {
                    let e = (p[b] - p[a]) - (target[b] - target[a]);
                    dp[b] = dp[b] + scale * e;
                    dp[a] = dp[a] - scale * e;
                });
            }
            Op::WeightedSqErr {
                weights,
                pred,
                target,
            } => {
                let (r, _) = self.value(*weights).dims2()?;
                let (n, d) = self.value(*pred).dims2()?;
                let w = self.value(*weights).data();
                let p = self.value(*pred).data();
                let inv = g[0] / T::lit(r as f64) / T::lit(d as f64);
                {
                    let dw = grad_slot(grads, *weights, n);
                    for row in 0..n {
                        let err: T = (0..d)
                            .map(|j| {
                                let e = p[row * d + j] - target[row * d + j];
                                e * e
                            })
                            .sum();
                        dw[row] = dw[row] + inv * err;
                    }
                }
                let dp = grad_slot(grads, *pred, n * d);
                let two = T::lit(2.0);
                for row in 0..n {
                    for j in 0..d {
                        let i = row * d + j;
                        dp[i] = dp[i] + inv * w[row] * two * (p[i] - target[i]);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, coef) in terms {
                    let dv = grad_slot(grads, v, 1);
                    dv[0] = dv[0] + coef * g[0];
                }
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Act { .. } => "activation",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(..) => "sum",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::Reshape(..) => "reshape",
        Op::SliceCols { .. } => "slice_cols",
        Op::Conv2d { .. } => "conv2d",
        Op::UpsampleHwc { .. } => "upsample",
        Op::Gather { .. } => "gather",
        Op::PoolMeanVar(..) => "pool",
        Op::RenderWeights { .. } => "render_weights",
        Op::RayWeightedSum { .. } => "ray_weighted_sum",
        Op::Mse { .. } => "mse",
        Op::GradDiffMse { .. } => "grad_diff_mse",
        Op::WeightedSqErr { .. } => "weighted_sq_err",
        Op::WeightedSum(..) => "weighted_sum",
    }
}

/// Leaves that are neither parameters nor tracked never need gradients.
fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    let n = &nodes[v.0];
    !matches!(n.op, Op::Leaf) || n.param.is_some() || n.track
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn hwc_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err!("expected [h, w, c] map, got {:?}", t.shape())),
    }
}

fn gather_values<T: Real>(map: &[T], c: usize, taps: &[Taps<T>]) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); taps.len() * c];
    for (p, t) in taps.iter().enumerate() {
        let dst = &mut out[p * c..(p + 1) * c];
        for j in 0..4 {
            let wt = t.w[j];
            if wt == T::zero() {
                continue;
            }
            let base = t.idx[j] as usize * c;
            for (d, s) in dst.iter_mut().zip(&map[base..base + c]) {
                *d = *d + wt * *s;
            }
        }
    }
    Tensor::new(vec![taps.len(), c], out)
}

/// Per-output-index source taps for a centre-aligned linear resize.
fn resize_taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * wo + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    dx: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = (c * h + iy as usize) * w + ix as usize;
                        dx[i] = dx[i] + row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Visit (a, b) flat index pairs whose difference `b - a` forms one
/// horizontal or vertical finite difference inside a patch.
fn for_each_patch_diff(patches: usize, p: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    for patch in 0..patches {
        let base = patch * p * p;
        for y in 0..p {
            for x in 0..p {
                for ch in 0..c {
                    let here = (base + y * p + x) * c + ch;
                    if x + 1 < p {
                        f(here, (base + y * p + x + 1) * c + ch);
                    }
                    if y + 1 < p {
                        f(here, (base + (y + 1) * p + x) * c + ch);
                    }
                }
            }
        }
    }
}
