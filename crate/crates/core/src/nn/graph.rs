//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node index is a topological
//! order and backward is a single reverse sweep. Values are kept after
//! backward; calling [`Graph::zero_grad`] and running backward again yields the
//! same gradients.

use crate::error::{shape_err, Result};
#[cfg(test)]
use crate::error::Error;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    GlobalAvgPool(Var),
    Downsample2(Var),
    Upsample2(Var),
    ScaleChannels { x: Var, s: Var },
    MulMask { x: Var, mask: Var },
    Reshape(Var),
    Transpose2(Var),
    Sum(Var),
    Mse { pred: Var, target: Var },
    BandMse { pred: Var, target: Var, weights: Vec<f64> },
    VolumeRender { sigma: Var, radiance: Var, deltas: Vec<f64>, background: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `c = a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the strides and extents above stay inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- forward ops -------------------------------------------------------

    /// `x[B, in] * w[in, out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(batch * fout);
        let bias = self.value(b).data();
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            fin,
            1,
            self.value(w).data(),
            fout,
            1,
            1.0,
            &mut out,
            fout,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, fout], out)?,
            Op::Dense { x, w, b },
            rg,
        ))
    }

    fn conv_geom(&self, x: Var, k: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return Err(shape_err(format!("conv2d: x {xs:?}, k {ks:?}")));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w}+{pad}"
            )));
        }
        Ok(ConvGeom {
            c: xs[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Cross-correlation of `x[B, C, H, W]` with `k[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, k, stride, pad)?;
        let batch = self.shape(x)[0];
        let o = self.shape(k)[0];
        if self.shape(b) != [o] {
            return Err(shape_err("conv2d: bias length"));
        }
        let rows = g.c * g.kh * g.kw;
        let hw = g.ho * g.wo;
        let mut out = vec![0.0; batch * o * hw];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * hw]
        };
        let (xd, kd, bd) = (
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
        );
        for bi in 0..batch {
            let xb = &xd[bi * g.c * g.h * g.w..(bi + 1) * g.c * g.h * g.w];
            let ob = &mut out[bi * o * hw..(bi + 1) * o * hw];
            for (oc, row) in ob.chunks_mut(hw).enumerate() {
                row.fill(bd[oc]);
            }
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(o, rows, hw, kd, rows, 1, src, hw, 1, 1.0, ob, hw);
        }
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(
            Tensor::new(vec![batch, o, g.ho, g.wo], out)?,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * k).collect();
        let t = Tensor::new(t.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, k), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(format!("concat: {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn nchw(&self, x: Var, what: &str) -> Result<[usize; 4]> {
        match self.shape(x) {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(shape_err(format!("{what}: expected NCHW, got {s:?}"))),
        }
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// 2x2 mean pooling.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "downsample2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("downsample2 needs even dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for (plane, dst) in xd.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] =
                        0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out)?,
            Op::Downsample2(x),
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "upsample2")?;
        let (ho, wo) = (h * 2, w * 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for (plane, dst) in xd.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out)?,
            Op::Upsample2(x),
            rg,
        ))
    }

    /// `x[B, C, H, W] * s[B, C]` broadcast over space.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "scale_channels")?;
        if self.shape(s) != [b, c] {
            return Err(shape_err("scale_channels: scale must be [B, C]"));
        }
        let hw = h * w;
        let sd = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sd)
            .flat_map(|(plane, k)| plane.iter().map(move |v| v * k))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::ScaleChannels { x, s },
            rg,
        ))
    }

    /// `x[B, C, H, W] * mask[B, 1, H, W]` broadcast over channels.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw(x, "mul_mask")?;
        if self.shape(mask) != [b, 1, h, w] {
            return Err(shape_err("mul_mask: mask must be [B, 1, H, W]"));
        }
        let hw = h * w;
        let (xd, md) = (self.value(x).data(), self.value(mask).data());
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            let m = &md[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = xd[off + p] * m[p];
                }
            }
        }
        let rg = self.rg(&[x, mask]);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::MulMask { x, mask },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[R, C] -> [C, R]`.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            &[r, c] => (r, c),
            s => return Err(shape_err(format!("transpose2 expects a matrix, got {s:?}"))),
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose2(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(format!(
                "mse: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target }, rg))
    }

    /// `sum_k w_k * mean_r sum_c (pred - target)^2` for `pred[R, K*3]`.
    pub fn band_mse(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        let s = self.shape(pred);
        if s.len() != 2 || s[1] != weights.len() * 3 || self.shape(target) != s {
            return Err(shape_err(format!(
                "band_mse: pred {s:?}, target {:?}, {} bands",
                self.shape(target),
                weights.len()
            )));
        }
        let rays = s[0].max(1) as f64;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let k3 = weights.len() * 3;
        let mut total = 0.0;
        for (pr, tr) in p.chunks(k3.max(1)).zip(t.chunks(k3.max(1))) {
            for (i, (a, b)) in pr.iter().zip(tr).enumerate() {
                total += weights[i / 3] * (a - b) * (a - b);
            }
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(total / rays),
            Op::BandMse {
                pred,
                target,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Alpha compositing along rays.
    ///
    /// `sigma` holds `R * N` densities, `radiance` is `[R * N, C]`, and
    /// `deltas[i]` is the interval length owned by sample `i`. The output is
    /// `[R, C]`; `background` is added with weight `1 - sum(weights)`.
    pub fn volume_render(
        &mut self,
        sigma: Var,
        radiance: Var,
        samples_per_ray: usize,
        deltas: Vec<f64>,
        background: f64,
    ) -> Result<Var> {
        let total = self.value(sigma).numel();
        let rs = self.shape(radiance);
        if samples_per_ray == 0
            || total % samples_per_ray != 0
            || rs.len() != 2
            || rs[0] != total
            || deltas.len() != total
        {
            return Err(shape_err(format!(
                "volume_render: sigma {total}, radiance {rs:?}, deltas {}, n {samples_per_ray}",
                deltas.len()
            )));
        }
        let ch = rs[1];
        let rays = total / samples_per_ray;
        let (sd, rd) = (self.value(sigma).data(), self.value(radiance).data());
        let mut out = vec![0.0; rays * ch];
        for r in 0..rays {
            let mut trans = 1.0;
            let o = &mut out[r * ch..(r + 1) * ch];
            for i in r * samples_per_ray..(r + 1) * samples_per_ray {
                let alpha = 1.0 - (-sd[i] * deltas[i]).exp();
                let w = trans * alpha;
                for c in 0..ch {
                    o[c] += w * rd[i * ch + c];
                }
                trans *= 1.0 - alpha;
            }
            if background != 0.0 {
                for v in o.iter_mut() {
                    *v += background * trans;
                }
            }
        }
        let rg = self.rg(&[sigma, radiance]);
        Ok(self.push(
            Tensor::new(vec![rays, ch], out)?,
            Op::VolumeRender {
                sigma,
                radiance,
                deltas,
                background,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let Graph { nodes, grads } = self;
        // Interior gradients are per-sweep; only leaves accumulate.
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g)?;
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) -> Result<()> {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let (batch, fin) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let fout = out.shape()[1];
            if let Some(dx) = buf(nodes, grads, *x) {
                // dx += g * w^T
                gemm(batch, fout, fin, g, fout, 1, val(*w), 1, fout, 1.0, dx, fin);
            }
            if let Some(dw) = buf(nodes, grads, *w) {
                // dw += x^T * g
                gemm(fin, batch, fout, val(*x), 1, fin, g, fout, 1, 1.0, dw, fout);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for row in g.chunks(fout) {
                    add_into(db, row);
                }
            }
        }
        Op::Conv2d {
            x,
            k,
            b,
            stride,
            pad,
        } => {
            let xs = nodes[x.0].value.shape();
            let ks = nodes[k.0].value.shape();
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let geom = ConvGeom {
                c: xs[1],
                h: xs[2],
                w: xs[3],
                kh: ks[2],
                kw: ks[3],
                stride: *stride,
                pad: *pad,
                ho,
                wo,
            };
            let (batch, o) = (xs[0], ks[0]);
            let rows = geom.c * geom.kh * geom.kw;
            let hw = ho * wo;
            let plane = geom.c * geom.h * geom.w;
            let pointwise = geom.is_pointwise();
            let xd = val(*x);
            let kd = val(*k);
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * hw] };
            if nodes[k.0].requires_grad {
                let mut dk = vec![0.0; o * rows];
                for bi in 0..batch {
                    let xb = &xd[bi * plane..(bi + 1) * plane];
                    let src: &[f64] = if pointwise {
                        xb
                    } else {
                        geom.im2col(xb, &mut cols);
                        &cols
                    };
                    let gb = &g[bi * o * hw..(bi + 1) * o * hw];
                    gemm(o, hw, rows, gb, hw, 1, src, 1, hw, 1.0, &mut dk, rows);
                }
                add_into(buf(nodes, grads, *k).unwrap(), &dk);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for bi in 0..batch {
                    for oc in 0..o {
                        let s: f64 = g[(bi * o + oc) * hw..(bi * o + oc + 1) * hw].iter().sum();
                        db[oc] += s;
                    }
                }
            }
            if let Some(dx) = buf(nodes, grads, *x) {
                let mut dcols = vec![0.0; rows * hw];
                for bi in 0..batch {
                    let gb = &g[bi * o * hw..(bi + 1) * o * hw];
                    let dxb = &mut dx[bi * plane..(bi + 1) * plane];
                    if pointwise {
                        gemm(rows, o, hw, kd, 1, rows, gb, hw, 1, 1.0, dxb, hw);
                    } else {
                        gemm(rows, o, hw, kd, 1, rows, gb, hw, 1, 0.0, &mut dcols, hw);
                        geom.col2im(&dcols, dxb);
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(*x);
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xd) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = buf(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Scale(x, k) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += k * gi;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let d = nodes[p.0].value.shape()[*axis] * inner;
                if let Some(dp) = buf(nodes, grads, *p) {
                    for o in 0..outer {
                        add_into(
                            &mut dp[o * d..(o + 1) * d],
                            &g[o * total + offset..o * total + offset + d],
                        );
                    }
                }
                offset += d;
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let hw = s[2] * s[3];
            if let Some(dx) = buf(nodes, grads, *x) {
                for (plane, gi) in dx.chunks_mut(hw).zip(g) {
                    for d in plane {
                        *d += gi / hw as f64;
                    }
                }
            }
        }
        Op::Downsample2(x) => {
            let s = nodes[x.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            if let Some(dx) = buf(nodes, grads, *x) {
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * gp[y * wo + xx];
                            let i = 2 * y * w + 2 * xx;
                            plane[i] += v;
                            plane[i + 1] += v;
                            plane[i + w] += v;
                            plane[i + w + 1] += v;
                        }
                    }
                }
            }
        }
        Op::Upsample2(x) => {
            let s = nodes[x.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let wo = 2 * w;
            if let Some(dx) = buf(nodes, grads, *x) {
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..wo {
                            plane[(y / 2) * w + xx / 2] += gp[y * wo + xx];
                        }
                    }
                }
            }
        }
        Op::ScaleChannels { x, s } => {
            let xs = nodes[x.0].value.shape();
            let hw = xs[2] * xs[3];
            let (xd, sd) = (val(*x), val(*s));
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((plane, gp), k) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(sd) {
                    for (d, gi) in plane.iter_mut().zip(gp) {
                        *d += gi * k;
                    }
                }
            }
            if let Some(ds) = buf(nodes, grads, *s) {
                for ((d, gp), xp) in ds.iter_mut().zip(g.chunks(hw)).zip(xd.chunks(hw)) {
                    *d += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::MulMask { x, mask } => {
            let xs = nodes[x.0].value.shape();
            let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let (xd, md) = (val(*x), val(*mask));
            if let Some(dx) = buf(nodes, grads, *x) {
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            dx[off + p] += g[off + p] * md[bi * hw + p];
                        }
                    }
                }
            }
            if let Some(dm) = buf(nodes, grads, *mask) {
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            dm[bi * hw + p] += g[off + p] * xd[off + p];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::Transpose2(x) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(dx) = buf(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = buf(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mse { pred, target } => {
            let (p, t) = (val(*pred), val(*target));
            let k = 2.0 * g[0] / p.len().max(1) as f64;
            if let Some(dp) = buf(nodes, grads, *pred) {
                for ((d, a), b) in dp.iter_mut().zip(p).zip(t) {
                    *d += k * (a - b);
                }
            }
            if let Some(dt) = buf(nodes, grads, *target) {
                for ((d, a), b) in dt.iter_mut().zip(p).zip(t) {
                    *d -= k * (a - b);
                }
            }
        }
        Op::BandMse {
            pred,
            target,
            weights,
        } => {
            let (p, t) = (val(*pred), val(*target));
            let rays = nodes[pred.0].value.shape()[0].max(1) as f64;
            let k3 = weights.len() * 3;
            let coef = |idx: usize| 2.0 * g[0] * weights[(idx % k3) / 3] / rays;
            if let Some(dp) = buf(nodes, grads, *pred) {
                for (idx, d) in dp.iter_mut().enumerate() {
                    *d += coef(idx) * (p[idx] - t[idx]);
                }
            }
            if let Some(dt) = buf(nodes, grads, *target) {
                for (idx, d) in dt.iter_mut().enumerate() {
                    *d -= coef(idx) * (p[idx] - t[idx]);
                }
            }
        }
        Op::VolumeRender {
            sigma,
            radiance,
            deltas,
            background,
        } => {
            let (rays, ch) = (out.shape()[0], out.shape()[1]);
            let n = deltas.len() / rays;
            let (sd, rd) = (val(*sigma), val(*radiance));
            let mut trans = vec![0.0; n + 1];
            let mut weight = vec![0.0; n];
            let mut dsig = vec![0.0; deltas.len()];
            let mut drad = vec![0.0; rd.len()];
            let mut suffix = vec![0.0; ch];
            for r in 0..rays {
                let base = r * n;
                trans[0] = 1.0;
                for i in 0..n {
                    let e = (-sd[base + i] * deltas[base + i]).exp();
                    weight[i] = trans[i] * (1.0 - e);
                    trans[i + 1] = trans[i] * e;
                }
                let gr = &g[r * ch..(r + 1) * ch];
                let bg_term: f64 = gr.iter().map(|gc| gc * background * trans[n]).sum();
                suffix.fill(0.0);
                for i in (0..n).rev() {
                    let s = &rd[(base + i) * ch..(base + i + 1) * ch];
                    let mut da = -bg_term;
                    for c in 0..ch {
                        da += gr[c] * (trans[i + 1] * s[c] - suffix[c]);
                        drad[(base + i) * ch + c] = gr[c] * weight[i];
                    }
                    for c in 0..ch {
                        suffix[c] += weight[i] * s[c];
                    }
                    dsig[base + i] = da * deltas[base + i];
                }
            }
            if let Some(ds) = buf(nodes, grads, *sigma) {
                add_into(ds, &dsig);
            }
            if let Some(dr) = buf(nodes, grads, *radiance) {
                add_into(dr, &drad);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.dense(x, bad, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = g.constant(t(&[1, 1, 3, 3], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let mut hot = vec![0.0; 9];
        hot[4] = 1.0;
        let x = g.constant(t(&[1, 1, 3, 3], &hot));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        // Every 3x3 window centred in a 3x3 image covers the middle pixel.
        assert!(g.value(y).data().iter().all(|v| *v == 1.0));

        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn relu_grad_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn pooling_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let d = g.downsample2(x).unwrap();
        assert_eq!(g.value(d).data(), &[2.5]);

        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 0.7));
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let d = g.downsample2(c).unwrap();
        let u = g.upsample2(d).unwrap();
        assert_eq!(g.value(u), g.value(c));

        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.downsample2(odd).is_err());
    }

    #[test]
    fn concat_axes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = g.concat(&[b, b], 0).unwrap();
        assert_eq!(g.shape(d), &[4, 2]);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::new();
        let p = g.input(t(&[2], &[1.0, 1.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        let l = g.mse(p, z).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0]);
        let l0 = g.mse(p, p).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
    }

    #[test]
    fn second_backward_matches_after_reset() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let w = g.input(t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
        let b = g.input(t(&[2], &[0.05, -0.05]));
        let y = g.dense(x, w, b).unwrap();
        let s = g.sigmoid(y);
        let l = g.sum(s);
        g.backward(l).unwrap();
        let first: Vec<f64> = g.grad(w).unwrap().to_vec();
        let before = g.value(s).clone();
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &first[..]);
        assert_eq!(g.value(s), &before);
        // Without a reset, leaf gradients accumulate.
        g.backward(l).unwrap();
        for (a, b) in g.grad(w).unwrap().iter().zip(&first) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn volume_render_hand_case() {
        let mut g = Graph::new();
        let s = g.constant(t(&[2], &[1.0, 2.0]));
        let r = g.constant(t(&[2, 1], &[1.0, 0.5]));
        let o = g.volume_render(s, r, 2, vec![0.5, 0.5], 0.0).unwrap();
        let want = (1.0 - (-0.5f64).exp()) + (-0.5f64).exp() * (1.0 - (-1.0f64).exp()) * 0.5;
        assert!((g.value(o).item() - want).abs() < 1e-15);
        assert!((want - 0.58518).abs() < 5e-5);
    }
}
