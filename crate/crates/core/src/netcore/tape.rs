//! Reverse-mode tape.
//!
//! Each op method validates shapes, computes its output eagerly and records
//! what the backward pass needs. Shape errors are programming errors in the
//! fixed architectures built on top, so they surface as `Result`s from the
//! layer constructors' forward methods rather than panics in hot loops.

use std::collections::HashMap;

use super::conv::{batch_to_channel_major, channel_major_to_batch, col2im, im2col, ConvGeom};
use super::{shape_err, ParamGrads, ParamId, ParamStore, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Relu,
    Exp,
    Square,
}

enum Op<F> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Vec<F>,
        out_c: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        in_c: usize,
    },
    Upsample {
        x: Var,
        fh: usize,
        fw: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        a: F,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    TimeSelect {
        x: Var,
        t: usize,
    },
    TimeStack {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Mean {
        x: Var,
    },
    KlNormal {
        mu: Var,
        logvar: Var,
    },
    BlockRotate {
        x: Var,
        rots: Vec<[F; 9]>,
        offsets: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records a computation for one forward/backward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    /// Names of executed layer stages, in order.
    trace: Vec<String>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `[n, c, rest..]` into `(n, c, inner)`.
fn axis1(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let c = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (n, c, inner)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            trace: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&mut self, stage: impl Into<String>) {
        self.trace.push(stage.into());
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    /// A constant input; gradients still flow to it and can be read back.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The tape's single leaf for `id`; repeated calls share it.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// `x[n, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut y = vec![F::zero(); n * dout];
        F::gemm(
            n,
            din,
            dout,
            F::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            F::zero(),
            &mut y,
            dout as isize,
            1,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let out = Tensor::from_vec(&[n, dout], y)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        one_d: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd, out_c, kh, kw) = if one_d {
            if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] {
                return Err(shape_err("conv1d", format!("x {xs:?}, w {ws:?}")));
            }
            (xs[0], xs[1], 1, xs[2], ws[0], 1, ws[2])
        } else {
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
                return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}")));
            }
            (xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3])
        };
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(shape_err("conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(n, c, h, wd, (kh, kw), stride, pad)
            .ok_or_else(|| shape_err("conv", format!("kernel larger than padded input {xs:?}")))?;
        let col = im2col(self.value(x).data(), &geom);
        let s = geom.ho * geom.wo;
        let mut ym = vec![F::zero(); out_c * geom.cols()];
        F::gemm(
            out_c,
            geom.rows(),
            geom.cols(),
            F::one(),
            self.value(w).data(),
            geom.rows() as isize,
            1,
            &col,
            geom.cols() as isize,
            1,
            F::zero(),
            &mut ym,
            geom.cols() as isize,
            1,
        );
        let mut y = channel_major_to_batch(&ym, n, out_c, s);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in y.chunks_mut(s).enumerate() {
                let bb = bd[i % out_c];
                for v in chunk {
                    *v += bb;
                }
            }
        }
        let shape = if one_d {
            vec![n, out_c, geom.wo]
        } else {
            vec![n, out_c, geom.ho, geom.wo]
        };
        let out = Tensor::from_vec(&shape, y)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                geom,
                col,
                out_c,
            },
        ))
    }

    /// `x[n, c, l]`, `w[out, c, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv_impl(x, w, b, (1, stride), (0, pad), true)
    }

    /// `x[n, c, h, w]`, `w[out, c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv_impl(x, w, b, (stride, stride), (pad, pad), false)
    }

    /// Transposed 2-D convolution; `w[in, out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] {
            return Err(shape_err("conv_transpose2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (n, in_c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", "padding too large"))?;
        let wo = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d", "padding too large"))?;
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(shape_err("conv_transpose2d", "bias"));
            }
        }
        let geom = ConvGeom::new(n, out_c, ho, wo, (kh, kw), (stride, stride), (pad, pad))
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| shape_err("conv_transpose2d", "inconsistent geometry"))?;
        let xm = batch_to_channel_major(self.value(x).data(), n, in_c, h * wd);
        let mut col = vec![F::zero(); geom.rows() * geom.cols()];
        // col[(co,i,j), (n,h,w)] = Σ_ci w[ci, (co,i,j)] · x[ci, (n,h,w)]
        F::gemm(
            geom.rows(),
            in_c,
            geom.cols(),
            F::one(),
            self.value(w).data(),
            1,
            geom.rows() as isize,
            &xm,
            geom.cols() as isize,
            1,
            F::zero(),
            &mut col,
            geom.cols() as isize,
            1,
        );
        let mut y = col2im(&col, &geom);
        if let Some(b) = b {
            let bd = self.value(b).data();
            let s = ho * wo;
            for (i, chunk) in y.chunks_mut(s).enumerate() {
                let bb = bd[i % out_c];
                for v in chunk {
                    *v += bb;
                }
            }
        }
        let out = Tensor::from_vec(&[n, out_c, ho, wo], y)?;
        Ok(self.push(
            out,
            Op::ConvT {
                x,
                w,
                b,
                geom,
                in_c,
            },
        ))
    }

    /// Nearest-neighbour upsampling of the trailing one or two axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (fh, fw, h, w) = match xs.len() {
            3 => (1, factor, 1, xs[2]),
            4 => (factor, factor, xs[2], xs[3]),
            _ => return Err(shape_err("upsample", format!("{xs:?}"))),
        };
        let (n, c) = (xs[0], xs[1]);
        let (ho, wo) = (h * fh, w * fw);
        let src = self.value(x).data();
        let mut y = vec![F::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    y[nc * ho * wo + oh * wo + ow] = src[nc * h * w + (oh / fh) * w + ow / fw];
                }
            }
        }
        let mut shape = xs.clone();
        if xs.len() == 3 {
            shape[2] = wo;
        } else {
            shape[2] = ho;
            shape[3] = wo;
        }
        let out = Tensor::from_vec(&shape, y)?;
        Ok(self.push(out, Op::Upsample { x, fh, fw }))
    }

    /// Group normalization over `[n, c, ...]`; `gamma`, `beta` are `[c]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = axis1(&xs);
        if xs.len() < 2 || groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{xs:?} with {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", "affine parameters"));
        }
        let eps = F::from_f64(1e-5);
        let cg = c / groups;
        let m = cg * inner;
        let mf = F::from_f64(m as f64);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); n * groups];
        for b in 0..n {
            for g in 0..groups {
                let start = (b * c + g * cg) * inner;
                let seg = &xd[start..start + m];
                let mut mean = F::zero();
                for &v in seg {
                    mean += v;
                }
                mean = mean / mf;
                let mut var = F::zero();
                for &v in seg {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / mf;
                let r = F::one() / (var + eps).sqrt();
                rstd[b * groups + g] = r;
                for (i, &v) in seg.iter().enumerate() {
                    let ch = g * cg + i / inner;
                    let xh = (v - mean) * r;
                    xhat[start + i] = xh;
                    y[start + i] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    /// `x[n, c, ...]·(1 + scale[n, c]) + shift[n, c]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = axis1(&xs);
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(shape_err(
                "film",
                format!("x {xs:?}, scale {:?}", self.shape(scale)),
            ));
        }
        let xd = self.value(x).data();
        let sd = self.value(scale).data();
        let hd = self.value(shift).data();
        let mut y = vec![F::zero(); xd.len()];
        for i in 0..n * c {
            let a = F::one() + sd[i];
            for j in 0..inner {
                y[i * inner + j] = xd[i * inner + j] * a + hd[i];
            }
        }
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, Op::Film { x, scale, shift }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let y = ad.iter().zip(bd).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(self.shape(a), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a·x + c`.
    pub fn affine(&mut self, x: Var, a: F, c: F) -> Var {
        let t = self.value(x).map(|v| a * v + c);
        self.push(t, Op::Affine { x, a })
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x).map(|v| match kind {
            Unary::Sigmoid => v.sigmoid(),
            Unary::Tanh => v.tanh(),
            Unary::Silu => v * v.sigmoid(),
            Unary::Relu => v.max(F::zero()),
            Unary::Exp => v.exp(),
            Unary::Square => v * v,
        });
        self.push(t, Op::Unary { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Concatenation along axis 1 of `[n, c_i, rest..]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (n, _, inner) = axis1(&first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let (pn, pc, pi) = axis1(s);
            if pn != n || pi != inner || s.len() != first.len() {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&p, &wc) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                y.extend_from_slice(&d[b * wc * inner..(b + 1) * wc * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let out = Tensor::from_vec(&shape, y)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = axis1(&xs);
        if xs.len() < 2 || start + len > c {
            return Err(shape_err("slice", format!("{xs:?}[{start}..{}]", start + len)));
        }
        let d = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            y.extend_from_slice(&d[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = xs;
        shape[1] = len;
        let out = Tensor::from_vec(&shape, y)?;
        Ok(self.push(out, Op::Slice { x, start, len }))
    }

    /// `x[n, c, l]` → `x[:, :, t]`.
    pub fn time_select(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[2] {
            return Err(shape_err("time_select", format!("{xs:?} at {t}")));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let d = self.value(x).data();
        let y = (0..n * c).map(|i| d[i * l + t]).collect();
        let out = Tensor::from_vec(&[n, c], y)?;
        Ok(self.push(out, Op::TimeSelect { x, t }))
    }

    /// Stack `[n, c]` tensors into `[n, c, t]`.
    pub fn time_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 2 || parts.iter().any(|&p| self.shape(p) != s0.as_slice()) {
            return Err(shape_err("time_stack", format!("{s0:?}")));
        }
        let (n, c, l) = (s0[0], s0[1], parts.len());
        let mut y = vec![F::zero(); n * c * l];
        for (t, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                y[i * l + t] = v;
            }
        }
        let out = Tensor::from_vec(&[n, c, l], y)?;
        Ok(self.push(
            out,
            Op::TimeStack {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mse", |p, q| (p - q) * (p - q))?;
        let m = F::from_f64(t.len() as f64);
        let v = t.sum() / m;
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum() / F::from_f64(t.len() as f64);
        self.push(Tensor::scalar(v), Op::Mean { x })
    }

    /// `KL(N(μ, e^{lv}) ‖ N(0, I))`, summed over non-batch axes and averaged over axis 0.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let t = self.binary(mu, logvar, "kl_normal", |m, lv| {
            F::from_f64(0.5) * (m * m + lv.exp() - lv - F::one())
        })?;
        let n = F::from_f64(self.shape(mu)[0] as f64);
        let v = t.sum() / n;
        Ok(self.push(Tensor::scalar(v), Op::KlNormal { mu, logvar }))
    }

    /// Rotates 3-vector blocks of `x[n, c]` starting at each offset by the per-sample
    /// rotation `rots[n]` (row-major 3×3). Other channels pass through.
    pub fn block_rotate(&mut self, x: Var, rots: Vec<[F; 9]>, offsets: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || rots.len() != xs[0] || offsets.iter().any(|&o| o + 3 > xs[1]) {
            return Err(shape_err("block_rotate", format!("{xs:?}")));
        }
        let c = xs[1];
        let mut y = self.value(x).data().to_vec();
        for (b, r) in rots.iter().enumerate() {
            for &o in &offsets {
                let v = [y[b * c + o], y[b * c + o + 1], y[b * c + o + 2]];
                for i in 0..3 {
                    y[b * c + o + i] = r[3 * i] * v[0] + r[3 * i + 1] * v[1] + r[3 * i + 2] * v[2];
                }
            }
        }
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, Op::BlockRotate { x, rots, offsets }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::from_vec(n.value.shape(), d).unwrap()))
                .collect(),
            params,
        }
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let acc = |grads: &mut [Option<Vec<F>>], v: Var, d: Vec<F>| match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let mut dx = vec![F::zero(); n * din];
                F::gemm(n, dout, din, F::one(), g, dout as isize, 1, val(*w), din as isize, 1, F::zero(), &mut dx, din as isize, 1);
                let mut dw = vec![F::zero(); dout * din];
                F::gemm(dout, n, din, F::one(), g, 1, dout as isize, val(*x), din as isize, 1, F::zero(), &mut dw, din as isize, 1);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![F::zero(); dout];
                    for row in g.chunks(dout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Conv { x, w, b, geom, col, out_c } => {
                let s = geom.ho * geom.wo;
                let gm = batch_to_channel_major(g, geom.n, *out_c, s);
                let mut dw = vec![F::zero(); out_c * geom.rows()];
                F::gemm(*out_c, geom.cols(), geom.rows(), F::one(), &gm, geom.cols() as isize, 1, col, 1, geom.cols() as isize, F::zero(), &mut dw, geom.rows() as isize, 1);
                let mut dcol = vec![F::zero(); geom.rows() * geom.cols()];
                F::gemm(geom.rows(), *out_c, geom.cols(), F::one(), val(*w), 1, geom.rows() as isize, &gm, geom.cols() as isize, 1, F::zero(), &mut dcol, geom.cols() as isize, 1);
                acc(grads, *w, dw);
                acc(grads, *x, col2im(&dcol, geom));
                if let Some(b) = b {
                    let mut db = vec![F::zero(); *out_c];
                    for (k, chunk) in g.chunks(s).enumerate() {
                        for &v in chunk {
                            db[k % out_c] += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::ConvT { x, w, b, geom, in_c } => {
                let (h, wd) = (geom.ho, geom.wo);
                let dcol = im2col(g, geom);
                let mut dxm = vec![F::zero(); in_c * geom.cols()];
                F::gemm(*in_c, geom.rows(), geom.cols(), F::one(), val(*w), geom.rows() as isize, 1, &dcol, geom.cols() as isize, 1, F::zero(), &mut dxm, geom.cols() as isize, 1);
                let xm = batch_to_channel_major(val(*x), geom.n, *in_c, h * wd);
                let mut dw = vec![F::zero(); in_c * geom.rows()];
                F::gemm(*in_c, geom.cols(), geom.rows(), F::one(), &xm, geom.cols() as isize, 1, &dcol, 1, geom.cols() as isize, F::zero(), &mut dw, geom.rows() as isize, 1);
                acc(grads, *x, channel_major_to_batch(&dxm, geom.n, *in_c, h * wd));
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let oc = geom.c;
                    let s = geom.h * geom.w;
                    let mut db = vec![F::zero(); oc];
                    for (k, chunk) in g.chunks(s).enumerate() {
                        for &v in chunk {
                            db[k % oc] += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Upsample { x, fh, fw } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let (h, w) = if xs.len() == 3 { (1, xs[2]) } else { (xs[2], xs[3]) };
                let (ho, wo) = (h * fh, w * fw);
                let mut dx = vec![F::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            dx[nc * h * w + (oh / fh) * w + ow / fw] += g[nc * ho * wo + oh * wo + ow];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let xs = self.shape(*x);
                let (n, c, inner) = axis1(xs);
                let cg = c / groups;
                let m = cg * inner;
                let mf = F::from_f64(m as f64);
                let gd = val(*gamma);
                let mut dx = vec![F::zero(); g.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for b in 0..n {
                    for grp in 0..*groups {
                        let start = (b * c + grp * cg) * inner;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for k in 0..m {
                            let ch = grp * cg + k / inner;
                            let dxh = g[start + k] * gd[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[start + k];
                            dgamma[ch] += g[start + k] * xhat[start + k];
                            dbeta[ch] += g[start + k];
                        }
                        let r = rstd[b * groups + grp];
                        for k in 0..m {
                            let ch = grp * cg + k / inner;
                            let dxh = g[start + k] * gd[ch];
                            dx[start + k] = r * (dxh - s1 / mf - xhat[start + k] * s2 / mf);
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Film { x, scale, shift } => {
                let xs = self.shape(*x);
                let (n, c, inner) = axis1(xs);
                let xd = val(*x);
                let sd = val(*scale);
                let mut dx = vec![F::zero(); g.len()];
                let mut ds = vec![F::zero(); n * c];
                let mut dh = vec![F::zero(); n * c];
                for k in 0..n * c {
                    let a = F::one() + sd[k];
                    for j in 0..inner {
                        let gv = g[k * inner + j];
                        dx[k * inner + j] = gv * a;
                        ds[k] += gv * xd[k * inner + j];
                        dh[k] += gv;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *scale, ds);
                acc(grads, *shift, dh);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ad = val(*a);
                let bd = val(*b);
                acc(grads, *a, g.iter().zip(bd).map(|(&gv, &q)| gv * q).collect());
                acc(grads, *b, g.iter().zip(ad).map(|(&gv, &p)| gv * p).collect());
            }
            Op::Affine { x, a } => {
                acc(grads, *x, g.iter().map(|&v| v * *a).collect());
            }
            Op::Unary { x, kind } => {
                let xd = val(*x);
                let yd = node.value.data();
                let d: Vec<F> = match kind {
                    Unary::Sigmoid => g.iter().zip(yd).map(|(&gv, &y)| gv * y * (F::one() - y)).collect(),
                    Unary::Tanh => g.iter().zip(yd).map(|(&gv, &y)| gv * (F::one() - y * y)).collect(),
                    Unary::Silu => g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &v)| {
                            let s = v.sigmoid();
                            gv * s * (F::one() + v * (F::one() - s))
                        })
                        .collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                        .collect(),
                    Unary::Exp => g.iter().zip(yd).map(|(&gv, &y)| gv * y).collect(),
                    Unary::Square => g.iter().zip(xd).map(|(&gv, &v)| gv * F::from_f64(2.0) * v).collect(),
                };
                acc(grads, *x, d);
            }
            Op::Concat { parts, widths } => {
                let shape = node.value.shape();
                let (n, total, inner) = axis1(shape);
                let mut offset = 0;
                for (&p, &wc) in parts.iter().zip(widths) {
                    let mut d = Vec::with_capacity(n * wc * inner);
                    for b in 0..n {
                        let s = (b * total + offset) * inner;
                        d.extend_from_slice(&g[s..s + wc * inner]);
                    }
                    acc(grads, p, d);
                    offset += wc;
                }
            }
            Op::Slice { x, start, len } => {
                let (n, c, inner) = axis1(self.shape(*x));
                let mut d = vec![F::zero(); n * c * inner];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[b * len * inner..(b + 1) * len * inner]);
                }
                acc(grads, *x, d);
            }
            Op::TimeSelect { x, t } => {
                let xs = self.shape(*x);
                let l = xs[2];
                let mut d = vec![F::zero(); xs.iter().product()];
                for (k, &gv) in g.iter().enumerate() {
                    d[k * l + t] = gv;
                }
                acc(grads, *x, d);
            }
            Op::TimeStack { parts } => {
                let l = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    let m = self.nodes[p.0].value.len();
                    acc(grads, p, (0..m).map(|k| g[k * l + t]).collect());
                }
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { F::zero() })
                        .collect(),
                );
            }
            Op::Mse { a, b } => {
                let ad = val(*a);
                let bd = val(*b);
                let scale = g[0] * F::from_f64(2.0 / ad.len() as f64);
                let da: Vec<F> = ad.iter().zip(bd).map(|(&p, &q)| (p - q) * scale).collect();
                let db = da.iter().map(|&v| -v).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Mean { x } => {
                let m = self.nodes[x.0].value.len();
                acc(grads, *x, vec![g[0] / F::from_f64(m as f64); m]);
            }
            Op::KlNormal { mu, logvar } => {
                let n = F::from_f64(self.shape(*mu)[0] as f64);
                let s = g[0] / n;
                let half = F::from_f64(0.5);
                acc(grads, *mu, val(*mu).iter().map(|&m| m * s).collect());
                acc(grads, *logvar, val(*logvar).iter().map(|&lv| half * (lv.exp() - F::one()) * s).collect());
            }
            Op::BlockRotate { x, rots, offsets } => {
                let c = self.shape(*x)[1];
                let mut d = g.to_vec();
                for (b, r) in rots.iter().enumerate() {
                    for &o in offsets {
                        let v = [g[b * c + o], g[b * c + o + 1], g[b * c + o + 2]];
                        for i in 0..3 {
                            d[b * c + o + i] = r[i] * v[0] + r[3 + i] * v[1] + r[6 + i] * v[2];
                        }
                    }
                }
                acc(grads, *x, d);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients laid out like `store`; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<F>) -> ParamGrads<F> {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                out.values[id.0] = g.clone();
            }
        }
        out
    }
}
