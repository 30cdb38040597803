//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! Every op is evaluated eagerly when it is recorded; `backward` walks the
//! tape in reverse. Nodes whose inputs carry no gradient requirement are
//! skipped, so frozen networks cost only their forward pass. All kernels are
//! single-threaded and reduce in a fixed order, which keeps results
//! bit-reproducible.

use crate::error::{LcxError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Modulate { x: Var, s: Var },
    LeakyRelu { x: Var, slope: f32 },
    MulConst { x: Var, f: Var },
    Tanh { x: Var },
    Upsample2x { x: Var },
    Add { a: Var, b: Var },
    AddScalar { x: Var },
    Scale { x: Var, c: f32 },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
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

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf (network input or parameter).
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// `y = x wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(LcxError::shape(format!(
                "linear: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            1.0,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b }, ng))
    }

    /// 2D convolution with square kernel; `x: [N,C,H,W]`, `w: [O,C,K,K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(LcxError::shape(format!(
                "conv2d: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(LcxError::shape("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let hw_out = geom.h_out * geom.w_out;
        let kk = c_in * k * k;
        let mut cols = vec![0.0f32; kk * hw_out];
        let mut out = vec![0.0f32; n * c_out * hw_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for s in 0..n {
            im2col(&xv[s * c_in * h * wd..(s + 1) * c_in * h * wd], &geom, &mut cols);
            let o = &mut out[s * c_out * hw_out..(s + 1) * c_out * hw_out];
            for (ch, plane) in o.chunks_mut(hw_out).enumerate() {
                plane.fill(bv[ch]);
            }
            gemm(c_out, kk, hw_out, wv, false, &cols, false, o, 1.0);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Per-sample channel scaling: `y[n,c,..] = x[n,c,..] * s[n,c]`.
    pub fn modulate(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() < 2 || ss != [xs[0], xs[1]] {
            return Err(LcxError::shape(format!("modulate: x {xs:?}, s {ss:?}")));
        }
        let plane: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (chunk, &scale) in out.data_mut().chunks_mut(plane).zip(sv) {
            for v in chunk {
                *v *= scale;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::Modulate { x, s }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    /// Elementwise `x * f` with `f` held constant; `f` must match `x` in shape.
    pub fn mul_const(&mut self, x: Var, f: Tensor) -> Result<Var> {
        if f.shape() != self.shape(x) {
            return Err(LcxError::shape(format!(
                "mul_const: x {:?} vs factors {:?}",
                self.shape(x),
                f.shape()
            )));
        }
        let mut out = self.value(x).clone();
        for (v, &c) in out.data_mut().iter_mut().zip(f.data()) {
            *v *= c;
        }
        let f = self.leaf(f, false);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst { x, f }, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let ng = self.ng(x);
        self.push(out, Op::Tanh { x }, ng)
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(LcxError::shape(format!("upsample2x: x {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let src = self.value(x).data();
        let mut out = vec![0.0f32; planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dp[y * 2 * w + xx] = sp[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { x }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LcxError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v += c;
        }
        let ng = self.ng(x);
        self.push(out, Op::AddScalar { x }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut out = self.value(x).clone();
        out.scale(c);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(LcxError::shape(format!("global_avg_pool: x {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], out)?, Op::GlobalAvgPool { x }, ng))
    }

    /// Backpropagates `seed` (same shape as `out`) through the tape.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.shape(out) {
            return Err(LcxError::shape(format!(
                "backward seed {:?} vs output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[0];
                if self.ng(x) {
                    let mut dx = Tensor::zeros(&[n, i]);
                    gemm(n, o, i, gy.data(), false, self.value(w).data(), false, dx.data_mut(), 0.0);
                    self.accumulate(grads, x, dx);
                }
                if self.ng(w) {
                    let mut dw = Tensor::zeros(&[o, i]);
                    gemm(o, n, i, gy.data(), true, self.value(x).data(), false, dw.data_mut(), 0.0);
                    self.accumulate(grads, w, dw);
                }
                if self.ng(b) {
                    let mut db = Tensor::zeros(&[o]);
                    for row in gy.data().chunks(o) {
                        for (d, g) in db.data_mut().iter_mut().zip(row) {
                            *d += *g;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(x)[0];
                let c_out = self.shape(w)[0];
                let hw_out = geom.h_out * geom.w_out;
                let kk = geom.c_in * geom.k * geom.k;
                let in_len = geom.c_in * geom.h * geom.w;
                let wv = self.value(w).data();
                let xv = self.value(x).data();
                let mut cols = vec![0.0f32; kk * hw_out];
                let mut dx = self.ng(x).then(|| Tensor::zeros(self.shape(x)));
                let mut dw = self.ng(w).then(|| Tensor::zeros(self.shape(w)));
                for s in 0..n {
                    let gys = &gy.data()[s * c_out * hw_out..(s + 1) * c_out * hw_out];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                        gemm(c_out, hw_out, kk, gys, false, &cols, true, dw.data_mut(), 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kk, c_out, hw_out, wv, true, gys, false, &mut cols, 0.0);
                        col2im(&cols, &geom, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if self.ng(b) {
                    let mut db = Tensor::zeros(&[c_out]);
                    for (i, plane) in gy.data().chunks(hw_out).enumerate() {
                        db.data_mut()[i % c_out] += plane.iter().sum::<f32>();
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Modulate { x, s } => {
                let xs = self.shape(x);
                let plane: usize = xs[2..].iter().product();
                let sv = self.value(s).data();
                if self.ng(x) {
                    let mut dx = gy.clone();
                    for (chunk, &scale) in dx.data_mut().chunks_mut(plane).zip(sv) {
                        for v in chunk {
                            *v *= scale;
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.ng(s) {
                    let ds: Vec<f32> = gy
                        .data()
                        .chunks(plane)
                        .zip(self.value(x).data().chunks(plane))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                        .collect();
                    let t = Tensor::new(self.shape(s).to_vec(), ds).expect("modulate grad");
                    self.accumulate(grads, s, t);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = gy.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                    if xv < 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::MulConst { x, f } => {
                let mut dx = gy.clone();
                for (d, &c) in dx.data_mut().iter_mut().zip(self.value(f).data()) {
                    *d *= c;
                }
                self.accumulate(grads, x, dx);
            }
            Op::Tanh { x } => {
                let mut dx = gy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(grads, x, dx);
            }
            Op::Upsample2x { x } => {
                let xs = self.shape(x);
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let mut dx = Tensor::zeros(xs);
                for p in 0..planes {
                    let gp = &gy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dp[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            Op::AddScalar { x } => self.accumulate(grads, x, gy.clone()),
            Op::Scale { x, c } => {
                let mut dx = gy.clone();
                dx.scale(c);
                self.accumulate(grads, x, dx);
            }
            Op::Reshape { x } => {
                let dx = gy.clone().reshaped(self.shape(x)).expect("reshape grad");
                self.accumulate(grads, x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(x);
                let plane = xs[2] * xs[3];
                let mut dx = Tensor::zeros(xs);
                for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(gy.data()) {
                    chunk.fill(g / plane as f32);
                }
                self.accumulate(grads, x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar objective `sum(out * probe)` evaluated in f64 for finite differences.
    fn objective(build: &dyn Fn(&mut Graph, Var) -> Var, x: &Tensor, probe: &Tensor) -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let y = build(&mut g, xv);
        g.value(y)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    fn check_input_grad(build: &dyn Fn(&mut Graph, Var) -> Var, x: Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = build(&mut g, xv);
        let probe = rand_tensor(&mut rng, g.shape(y));
        let grads = g.backward(y, probe.clone()).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        for _ in 0..6 {
            let i = rng.random_range(0..x.numel());
            let h = 1e-2f32;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(build, &xp, &probe) - objective(build, &xm, &probe)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!(
                (fd - an).abs() <= 2e-2 * (1.0 + an.abs()),
                "coordinate {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false), g.leaf(b.clone(), false));
            let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
            let ys = g.shape(y).to_vec();
            for n in 0..2 {
                for o in 0..4 {
                    for oy in 0..ys[2] {
                        for ox in 0..ys[3] {
                            let mut acc = b.data()[o] as f64;
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                            continue;
                                        }
                                        let xi = ((n * 3 + c) * 5 + iy as usize) * 6 + ix as usize;
                                        let wi = ((o * 3 + c) * 3 + ky) * 3 + kx;
                                        acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                    }
                                }
                            }
                            let got = g.value(y).data()[((n * 4 + o) * ys[2] + oy) * ys[3] + ox] as f64;
                            assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_upsample_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let build = move |g: &mut Graph, x: Var| {
            let wv = g.leaf(w.clone(), false);
            let bv = g.leaf(b.clone(), false);
            let u = g.upsample2x(x).unwrap();
            let c = g.conv2d(u, wv, bv, 2, 1).unwrap();
            g.tanh(c)
        };
        check_input_grad(&build, x, 3);
    }

    #[test]
    fn linear_modulate_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        let feat = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let x = rand_tensor(&mut rng, &[2, 5]);
        let build = move |g: &mut Graph, x: Var| {
            let wv = g.leaf(w.clone(), false);
            let bv = g.leaf(b.clone(), false);
            let f = g.leaf(feat.clone(), false);
            let s = g.linear(x, wv, bv).unwrap();
            let s = g.add_scalar(s, 1.0);
            let m = g.modulate(f, s).unwrap();
            let a = g.leaky_relu(m, 0.2);
            let r = g.add(a, f).unwrap();
            let p = g.global_avg_pool(r).unwrap();
            g.reshape(p, &[6]).unwrap()
        };
        check_input_grad(&build, x, 5);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2], 1.0), false);
        let w = g.leaf(Tensor::full(&[2, 2], 0.5), true);
        let b = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.linear(x, w, b).unwrap();
        let grads = g.backward(y, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
