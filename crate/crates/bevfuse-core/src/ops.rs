//! Elementary differentiable operations on the tape.
//!
//! Fixed vocabulary: elementwise arithmetic, matmul, ReLU/sigmoid, softmax,
//! 3x3 zero-padded convolution, bilinear/trilinear sampling, reductions,
//! layer norm, and the layout plumbing (stack/concat/permute). The fused
//! attention kernels and losses register their own rules in their modules.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{BackwardCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Lane iteration for axis-wise ops: (outer, axis, inner) sizes.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// elementwise

struct AddOp {
    a: Var,
    b: Var,
}
impl TapeOp for AddOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let da = ctx.grad_mut(self.a);
        for (d, gi) in da.iter_mut().zip(g) {
            *d += gi;
        }
        let db = ctx.grad_mut(self.b);
        for (d, gi) in db.iter_mut().zip(g) {
            *d += gi;
        }
    }
}

struct SubOp {
    a: Var,
    b: Var,
}
impl TapeOp for SubOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let da = ctx.grad_mut(self.a);
        for (d, gi) in da.iter_mut().zip(g) {
            *d += gi;
        }
        let db = ctx.grad_mut(self.b);
        for (d, gi) in db.iter_mut().zip(g) {
            *d -= gi;
        }
    }
}

struct MulOp {
    a: Var,
    b: Var,
}
impl TapeOp for MulOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let bv = ctx.value(self.b).data.clone();
        let av = ctx.value(self.a).data.clone();
        let da = ctx.grad_mut(self.a);
        for i in 0..g.len() {
            da[i] += g[i] * bv[i];
        }
        let db = ctx.grad_mut(self.b);
        for i in 0..g.len() {
            db[i] += g[i] * av[i];
        }
    }
}

struct ScaleOp {
    a: Var,
    k: f64,
}
impl TapeOp for ScaleOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let da = ctx.grad_mut(self.a);
        for (d, gi) in da.iter_mut().zip(g) {
            *d += self.k * gi;
        }
    }
}

struct ReluOp {
    x: Var,
}
impl TapeOp for ReluOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let xv = ctx.value(self.x).data.clone();
        let dx = ctx.grad_mut(self.x);
        for i in 0..g.len() {
            if xv[i] > 0.0 {
                dx[i] += g[i];
            }
        }
    }
}

struct SigmoidOp {
    x: Var,
}
impl TapeOp for SigmoidOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let y = ctx.out_value().data.clone();
        let dx = ctx.grad_mut(self.x);
        for i in 0..g.len() {
            dx[i] += g[i] * y[i] * (1.0 - y[i]);
        }
    }
}

struct SoftmaxOp {
    x: Var,
    axis: usize,
}
impl TapeOp for SoftmaxOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let y = ctx.out_value().clone();
        let (outer, a, inner) = lane_split(&y.shape, self.axis);
        let dx = ctx.grad_mut(self.x);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * a * inner + i;
                let mut dot = 0.0;
                for k in 0..a {
                    let idx = base + k * inner;
                    dot += g[idx] * y.data[idx];
                }
                for k in 0..a {
                    let idx = base + k * inner;
                    dx[idx] += y.data[idx] * (g[idx] - dot);
                }
            }
        }
    }
}

struct MatMulOp {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}
impl TapeOp for MatMulOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = ctx.value(self.a).data.clone();
        let bv = ctx.value(self.b).data.clone();
        {
            let da = ctx.grad_mut(self.a);
            // dA = G * B^T
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * bv[p * n + j];
                    }
                    da[i * k + p] += s;
                }
            }
        }
        let db = ctx.grad_mut(self.b);
        // dB = A^T * G
        for p in 0..k {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..m {
                    s += av[i * k + p] * g[i * n + j];
                }
                db[p * n + j] += s;
            }
        }
    }
}

struct Conv2dLiteOp {
    map: Var,
    kernel: Var,
}
impl TapeOp for Conv2dLiteOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let map = ctx.value(self.map).clone();
        let ker = ctx.value(self.kernel).clone();
        let (cin, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
        let cout = ker.shape[0];
        {
            let dmap = ctx.grad_mut(self.map);
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..w {
                        let go = g[(co * h + i) * w + j];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            for dy in 0..3usize {
                                let y = i as isize + dy as isize - 1;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let x = j as isize + dx as isize - 1;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    dmap[(ci * h + y as usize) * w + x as usize] +=
                                        go * ker.data[((co * cin + ci) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let dker = ctx.grad_mut(self.kernel);
        for co in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let go = g[(co * h + i) * w + j];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        for dy in 0..3usize {
                            let y = i as isize + dy as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let x = j as isize + dx as isize - 1;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                dker[((co * cin + ci) * 3 + dy) * 3 + dx] +=
                                    go * map.data[(ci * h + y as usize) * w + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct AddChanBiasOp {
    x: Var,
    bias: Var,
    plane: usize,
}
impl TapeOp for AddChanBiasOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        {
            let dx = ctx.grad_mut(self.x);
            for (d, gi) in dx.iter_mut().zip(g) {
                *d += gi;
            }
        }
        let db = ctx.grad_mut(self.bias);
        for (c, dbc) in db.iter_mut().enumerate() {
            let base = c * self.plane;
            for p in 0..self.plane {
                *dbc += g[base + p];
            }
        }
    }
}

struct AddRowBiasOp {
    x: Var,
    bias: Var,
    cols: usize,
}
impl TapeOp for AddRowBiasOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        {
            let dx = ctx.grad_mut(self.x);
            for (d, gi) in dx.iter_mut().zip(g) {
                *d += gi;
            }
        }
        let db = ctx.grad_mut(self.bias);
        for (i, gi) in g.iter().enumerate() {
            db[i % self.cols] += gi;
        }
    }
}

struct SumAllOp {
    x: Var,
}
impl TapeOp for SumAllOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let dx = ctx.grad_mut(self.x);
        for d in dx.iter_mut() {
            *d += g[0];
        }
    }
}

struct LayerNormRowsOp {
    x: Var,
    gamma: Var,
    beta: Var,
    cols: usize,
    eps: f64,
}
impl TapeOp for LayerNormRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let x = ctx.value(self.x).data.clone();
        let gamma = ctx.value(self.gamma).data.clone();
        let c = self.cols;
        let rows = x.len() / c;
        let cf = c as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        {
            let dx = ctx.grad_mut(self.x);
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / cf;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                let sigma = crate::mathf::sqrt(var + self.eps);
                let mut mean_gg = 0.0;
                let mut mean_ggx = 0.0;
                for i in 0..c {
                    let xhat = (row[i] - mu) / sigma;
                    let gg = grow[i] * gamma[i];
                    mean_gg += gg;
                    mean_ggx += gg * xhat;
                    dgamma[i] += grow[i] * xhat;
                    dbeta[i] += grow[i];
                }
                mean_gg /= cf;
                mean_ggx /= cf;
                for i in 0..c {
                    let xhat = (row[i] - mu) / sigma;
                    dx[r * c + i] += (grow[i] * gamma[i] - mean_gg - xhat * mean_ggx) / sigma;
                }
            }
        }
        {
            let dg = ctx.grad_mut(self.gamma);
            for i in 0..c {
                dg[i] += dgamma[i];
            }
        }
        let db = ctx.grad_mut(self.beta);
        for i in 0..c {
            db[i] += dbeta[i];
        }
    }
}

// ---------------------------------------------------------------------------
// sampling

/// Corner decomposition of a 1D linear interpolation coordinate.
#[inline]
pub(crate) fn lerp_cell(t: f64) -> (isize, f64) {
    let f = crate::mathf::floor(t);
    (f as isize, t - f)
}

#[inline]
pub(crate) fn in_range(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

pub(crate) fn bilinear_value(map: &[f64], h: usize, w: usize, c_plane: usize, u: f64, v: f64) -> f64 {
    let (x0, fx) = lerp_cell(u);
    let (y0, fy) = lerp_cell(v);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let y = y0 + dy;
        if !in_range(y, h) || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = x0 + dx;
            if !in_range(x, w) || wx == 0.0 {
                continue;
            }
            acc += wy * wx * map[c_plane + y as usize * w + x as usize];
        }
    }
    acc
}

struct BilinearSampleOp {
    map: Var,
    uv: Var,
}
impl TapeOp for BilinearSampleOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let map = ctx.value(self.map).clone();
        let uv = ctx.value(self.uv).data.clone();
        let (c, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
        let (x0, fx) = lerp_cell(uv[0]);
        let (y0, fy) = lerp_cell(uv[1]);
        let mut du = 0.0;
        let mut dv = 0.0;
        {
            let dmap = ctx.grad_mut(self.map);
            for ch in 0..c {
                let plane = ch * h * w;
                for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                    let y = y0 + dy;
                    if !in_range(y, h) {
                        continue;
                    }
                    for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                        let x = x0 + dx;
                        if !in_range(x, w) {
                            continue;
                        }
                        let m = map.data[plane + y as usize * w + x as usize];
                        dmap[plane + y as usize * w + x as usize] += g[ch] * wy * wx;
                        du += g[ch] * wy * dwx * m;
                        dv += g[ch] * dwy * wx * m;
                    }
                }
            }
        }
        let duv = ctx.grad_mut(self.uv);
        duv[0] += du;
        duv[1] += dv;
    }
}

struct TrilinearSampleOp {
    map: Var,
    udv: Var,
}
impl TapeOp for TrilinearSampleOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let map = ctx.value(self.map).clone();
        let udv = ctx.value(self.udv).data.clone();
        let (c, d, h, w) = (map.shape[0], map.shape[1], map.shape[2], map.shape[3]);
        let (x0, fx) = lerp_cell(udv[0]);
        let (y0, fy) = lerp_cell(udv[1]);
        let (z0, fz) = lerp_cell(udv[2]);
        let mut duv = [0.0; 3];
        {
            let dmap = ctx.grad_mut(self.map);
            for ch in 0..c {
                let vol = ch * d * h * w;
                for (dz, wz, dwz) in [(0isize, 1.0 - fz, -1.0), (1, fz, 1.0)] {
                    let z = z0 + dz;
                    if !in_range(z, d) {
                        continue;
                    }
                    for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                        let y = y0 + dy;
                        if !in_range(y, h) {
                            continue;
                        }
                        for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                            let x = x0 + dx;
                            if !in_range(x, w) {
                                continue;
                            }
                            let idx = vol + (z as usize * h + y as usize) * w + x as usize;
                            let m = map.data[idx];
                            dmap[idx] += g[ch] * wz * wy * wx;
                            duv[0] += g[ch] * wz * wy * dwx * m;
                            duv[1] += g[ch] * wz * dwy * wx * m;
                            duv[2] += g[ch] * dwz * wy * wx * m;
                        }
                    }
                }
            }
        }
        let dv = ctx.grad_mut(self.udv);
        for i in 0..3 {
            dv[i] += duv[i];
        }
    }
}

// ---------------------------------------------------------------------------
// layout

struct StackOp {
    parts: Vec<Var>,
    part_len: usize,
}
impl TapeOp for StackOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        for (i, p) in self.parts.iter().enumerate() {
            let dp = ctx.grad_mut(*p);
            let src = &g[i * self.part_len..(i + 1) * self.part_len];
            for (d, gi) in dp.iter_mut().zip(src) {
                *d += gi;
            }
        }
    }
}

struct ConcatColsOp {
    a: Var,
    b: Var,
    ca: usize,
    cb: usize,
}
impl TapeOp for ConcatColsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let ct = self.ca + self.cb;
        let rows = g.len() / ct;
        {
            let da = ctx.grad_mut(self.a);
            for r in 0..rows {
                for i in 0..self.ca {
                    da[r * self.ca + i] += g[r * ct + i];
                }
            }
        }
        let db = ctx.grad_mut(self.b);
        for r in 0..rows {
            for i in 0..self.cb {
                db[r * self.cb + i] += g[r * ct + self.ca + i];
            }
        }
    }
}

struct ReshapeOp {
    x: Var,
}
impl TapeOp for ReshapeOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let dx = ctx.grad_mut(self.x);
        for (d, gi) in dx.iter_mut().zip(g) {
            *d += gi;
        }
    }
}

struct RowsToBevOp {
    x: Var,
    c: usize,
    cells: usize,
}
impl TapeOp for RowsToBevOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let dx = ctx.grad_mut(self.x);
        for q in 0..self.cells {
            for ch in 0..self.c {
                dx[q * self.c + ch] += g[ch * self.cells + q];
            }
        }
    }
}

struct BevToRowsOp {
    x: Var,
    c: usize,
    cells: usize,
}
impl TapeOp for BevToRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let dx = ctx.grad_mut(self.x);
        for q in 0..self.cells {
            for ch in 0..self.c {
                dx[ch * self.cells + q] += g[q * self.c + ch];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape methods

impl Tape {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        Ok(self.push_op(t, Box::new(AddOp { a, b })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        Ok(self.push_op(t, Box::new(SubOp { a, b })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        Ok(self.push_op(t, Box::new(MulOp { a, b })))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * k).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        self.push_op(t, Box::new(ScaleOp { a, k }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor { shape: self.value(x).shape.clone(), data };
        self.push_op(t, Box::new(ReluOp { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data.iter().map(|&v| crate::mathf::sigmoid(v)).collect();
        let t = Tensor { shape: self.value(x).shape.clone(), data };
        self.push_op(t, Box::new(SigmoidOp { x }))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape.len() {
            return Err(CoreError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {:?}", xv.shape),
            });
        }
        let (outer, a, inner) = lane_split(&xv.shape, axis);
        let mut data = xv.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * a * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..a {
                    mx = mx.max(data[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..a {
                    let e = crate::mathf::exp(data[base + k * inner] - mx);
                    data[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..a {
                    data[base + k * inner] /= sum;
                }
            }
        }
        let t = Tensor { shape: xv.shape.clone(), data };
        Ok(self.push_op(t, Box::new(SoftmaxOp { x, axis })))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        Ok(self.push_op(t, Box::new(MatMulOp { a, b, m, k, n })))
    }

    /// 3x3 stride-1 zero-padding-1 cross-correlation.
    pub fn conv2d_lite(&mut self, map: Var, kernel: Var) -> Result<Var> {
        let (sm, sk) = (self.value(map).shape.clone(), self.value(kernel).shape.clone());
        if sm.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != sm[0] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d_lite",
                detail: format!("map {sm:?} kernel {sk:?}"),
            });
        }
        let (cin, h, w) = (sm[0], sm[1], sm[2]);
        let cout = sk[0];
        let mv = &self.value(map).data;
        let kv = &self.value(kernel).data;
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for ci in 0..cin {
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let kw = kv[((co * cin + ci) * 3 + dy) * 3 + dx];
                        if kw == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let y = i as isize + dy as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let mrow = &mv[(ci * h + y as usize) * w..(ci * h + y as usize + 1) * w];
                            let orow = &mut out[(co * h + i) * w..(co * h + i + 1) * w];
                            let shift = dx as isize - 1;
                            let j_lo = (-shift).max(0) as usize;
                            let j_hi = (w as isize - shift).min(w as isize) as usize;
                            for j in j_lo..j_hi {
                                orow[j] += kw * mrow[(j as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor { shape: vec![cout, h, w], data: out };
        Ok(self.push_op(t, Box::new(Conv2dLiteOp { map, kernel })))
    }

    /// Add a per-channel bias to a [C, ...] tensor.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        let c = self.value(bias).len();
        if sx.is_empty() || sx[0] != c {
            return Err(CoreError::ShapeMismatch {
                op: "add_chan_bias",
                detail: format!("x {sx:?} bias len {c}"),
            });
        }
        let plane: usize = sx[1..].iter().product();
        let bv = self.value(bias).data.clone();
        let mut data = self.value(x).data.clone();
        for ch in 0..c {
            for p in 0..plane {
                data[ch * plane + p] += bv[ch];
            }
        }
        let t = Tensor { shape: sx, data };
        Ok(self.push_op(t, Box::new(AddChanBiasOp { x, bias, plane })))
    }

    /// Add a bias vector to every row of a [R, C] tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        let c = self.value(bias).len();
        if sx.len() != 2 || sx[1] != c {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_bias",
                detail: format!("x {sx:?} bias len {c}"),
            });
        }
        let bv = self.value(bias).data.clone();
        let mut data = self.value(x).data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv[i % c];
        }
        let t = Tensor { shape: sx, data };
        Ok(self.push_op(t, Box::new(AddRowBiasOp { x, bias, cols: c })))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        self.push_op(Tensor::scalar(s), Box::new(SumAllOp { x }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Layer norm over the last axis of a [R, C] tensor.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        if sx.len() != 2 || self.value(gamma).len() != sx[1] || self.value(beta).len() != sx[1] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!("x {sx:?}"),
            });
        }
        let c = sx[1];
        let cf = c as f64;
        let gv = self.value(gamma).data.clone();
        let bv = self.value(beta).data.clone();
        let mut data = self.value(x).data.clone();
        for r in 0..sx[0] {
            let row = &mut data[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / cf;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cf;
            let sigma = crate::mathf::sqrt(var + eps);
            for i in 0..c {
                row[i] = (row[i] - mu) / sigma * gv[i] + bv[i];
            }
        }
        let t = Tensor { shape: sx, data };
        Ok(self.push_op(t, Box::new(LayerNormRowsOp { x, gamma, beta, cols: c, eps })))
    }

    /// Bilinear sample of a [C, H, W] map at (u, v) pixel coordinates, zero
    /// beyond a 1-cell border; differentiable in the map and in (u, v).
    pub fn bilinear_sample(&mut self, map: Var, uv: Var) -> Result<Var> {
        let sm = self.value(map).shape.clone();
        if sm.len() != 3 || self.value(uv).len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "bilinear_sample",
                detail: format!("map {sm:?}"),
            });
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let u = self.value(uv).data[0];
        let v = self.value(uv).data[1];
        let mapd = &self.value(map).data;
        let data: Vec<f64> = (0..c).map(|ch| bilinear_value(mapd, h, w, ch * h * w, u, v)).collect();
        let t = Tensor { shape: vec![c], data };
        Ok(self.push_op(t, Box::new(BilinearSampleOp { map, uv })))
    }

    /// Trilinear sample of a [C, D, H, W] map at (u, v, d), zero-padded.
    pub fn trilinear_sample(&mut self, map: Var, udv: Var) -> Result<Var> {
        let sm = self.value(map).shape.clone();
        if sm.len() != 4 || self.value(udv).len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "trilinear_sample",
                detail: format!("map {sm:?}"),
            });
        }
        let (c, d, h, w) = (sm[0], sm[1], sm[2], sm[3]);
        let coords = self.value(udv).data.clone();
        let (x0, fx) = lerp_cell(coords[0]);
        let (y0, fy) = lerp_cell(coords[1]);
        let (z0, fz) = lerp_cell(coords[2]);
        let mapd = &self.value(map).data;
        let mut data = vec![0.0; c];
        for (ch, out) in data.iter_mut().enumerate() {
            let vol = ch * d * h * w;
            for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
                let z = z0 + dz;
                if !in_range(z, d) || wz == 0.0 {
                    continue;
                }
                for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    let y = y0 + dy;
                    if !in_range(y, h) || wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let x = x0 + dx;
                        if !in_range(x, w) || wx == 0.0 {
                            continue;
                        }
                        *out += wz * wy * wx * mapd[vol + (z as usize * h + y as usize) * w + x as usize];
                    }
                }
            }
        }
        let t = Tensor { shape: vec![c], data };
        Ok(self.push_op(t, Box::new(TrilinearSampleOp { map, udv })))
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "stack", detail: "no parts".into() });
        }
        let s0 = self.value(parts[0]).shape.clone();
        for p in parts {
            if self.value(*p).shape != s0 {
                return Err(CoreError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", self.value(*p).shape, s0),
                });
            }
        }
        let part_len: usize = s0.iter().product();
        let mut data = Vec::with_capacity(part_len * parts.len());
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let t = Tensor { shape, data };
        Ok(self.push_op(t, Box::new(StackOp { parts: parts.to_vec(), part_len })))
    }

    /// Concatenate two [R, C] tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b).data[r * cb..(r + 1) * cb]);
        }
        let t = Tensor { shape: vec![rows, ca + cb], data };
        Ok(self.push_op(t, Box::new(ConcatColsOp { a, b, ca, cb })))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.value(x).shape),
            });
        }
        let t = Tensor { shape: shape.to_vec(), data: self.value(x).data.clone() };
        Ok(self.push_op(t, Box::new(ReshapeOp { x })))
    }

    /// [Q, C] query rows -> [C, X, Y] BEV planes, q = i * Y + j.
    pub fn rows_to_bev(&mut self, x: Var, grid_x: usize, grid_y: usize) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        let cells = grid_x * grid_y;
        if sx.len() != 2 || sx[0] != cells {
            return Err(CoreError::ShapeMismatch {
                op: "rows_to_bev",
                detail: format!("x {sx:?} cells {cells}"),
            });
        }
        let c = sx[1];
        let xd = &self.value(x).data;
        let mut data = vec![0.0; c * cells];
        for q in 0..cells {
            for ch in 0..c {
                data[ch * cells + q] = xd[q * c + ch];
            }
        }
        let t = Tensor { shape: vec![c, grid_x, grid_y], data };
        Ok(self.push_op(t, Box::new(RowsToBevOp { x, c, cells })))
    }

    /// [C, X, Y] BEV planes -> [Q, C] query rows.
    pub fn bev_to_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape.clone();
        if sx.len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "bev_to_rows",
                detail: format!("x {sx:?}"),
            });
        }
        let (c, cells) = (sx[0], sx[1] * sx[2]);
        let xd = &self.value(x).data;
        let mut data = vec![0.0; cells * c];
        for q in 0..cells {
            for ch in 0..c {
                data[q * c + ch] = xd[ch * cells + q];
            }
        }
        let t = Tensor { shape: vec![cells, c], data };
        Ok(self.push_op(t, Box::new(BevToRowsOp { x, c, cells })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let eye = t.leaf(tensor(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = t.leaf(tensor(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).data, t.value(x).data);

        let a = t.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(tensor(&[2, 1], &[1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[8]));
        let y = t.softmax(x, 0).unwrap();
        for v in &t.value(y).data {
            assert!((v - 0.125).abs() < 1e-15);
        }

        let x = t.leaf(tensor(&[3], &[1000.0, 0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        let d = &t.value(y).data;
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut t = Tape::new();
        let vals = [0.3, -1.2, 2.5, 0.0, 7.1];
        let x = t.leaf(tensor(&[5], &vals));
        let y = t.softmax(x, 0).unwrap();
        let sum: f64 = t.value(y).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = vals.iter().map(|v| v + 10.0).collect();
        let xs = t.leaf(tensor(&[5], &shifted));
        let ys = t.softmax(xs, 0).unwrap();
        for (a, b) in t.value(y).data.iter().zip(&t.value(ys).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_grid_point_constant_and_padding() {
        let mut t = Tape::new();
        // 1 channel, 8x8 ramp map.
        let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let map = t.leaf(tensor(&[1, 8, 8], &data));
        // Exact at integer coordinates: (u,v) = (3,5) -> map[5,3].
        let uv = t.leaf(tensor(&[2], &[3.0, 5.0]));
        let s = t.bilinear_sample(map, uv).unwrap();
        assert_eq!(t.value(s).data[0], 43.0);

        let cmap = t.leaf(Tensor::filled(&[2, 4, 4], 2.5));
        let uv2 = t.leaf(tensor(&[2], &[1.3, 2.7]));
        let s2 = t.bilinear_sample(cmap, uv2).unwrap();
        for v in &t.value(s2).data {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let uv3 = t.leaf(tensor(&[2], &[-10.0, -10.0]));
        let s3 = t.bilinear_sample(cmap, uv3).unwrap();
        assert_eq!(t.value(s3).data, vec![0.0, 0.0]);
    }

    #[test]
    fn bilinear_midpoint_is_neighbor_average() {
        let mut t = Tape::new();
        // Map varying along x only.
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 4 + x] = (x * x) as f64;
            }
        }
        let map = t.leaf(tensor(&[1, 4, 4], &data));
        let uv = t.leaf(tensor(&[2], &[1.5, 2.0]));
        let s = t.bilinear_sample(map, uv).unwrap();
        assert!((t.value(s).data[0] - (1.0 + 4.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn conv_delta_kernel_is_identity_and_ones_kernel_counts() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..25).map(|i| (i as f64) * 0.5 - 3.0).collect();
        let map = t.leaf(tensor(&[1, 5, 5], &data));
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // centered delta
        let kernel = t.leaf(tensor(&[1, 1, 3, 3], &kdata));
        let y = t.conv2d_lite(map, kernel).unwrap();
        assert_eq!(t.value(y).data, data);

        let ones_map = t.leaf(Tensor::filled(&[1, 5, 5], 1.0));
        let ones_k = t.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y2 = t.conv2d_lite(ones_map, ones_k).unwrap();
        let out = &t.value(y2).data;
        assert_eq!(out[2 * 5 + 2], 9.0); // interior
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[2], 6.0); // edge
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut t = Tape::new();
        let map = t.leaf(Tensor::zeros(&[2, 4, 4]));
        let kernel = t.leaf(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(t.conv2d_lite(map, kernel).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut t = Tape::new();
        let x = t.leaf(tensor(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 10.0]));
        let gamma = t.leaf(Tensor::filled(&[4], 1.0));
        let beta = t.leaf(Tensor::zeros(&[4]));
        let y = t.layer_norm_rows(x, gamma, beta, 1e-6).unwrap();
        for r in 0..2 {
            let row = &t.value(y).data[r * 4..(r + 1) * 4];
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stack_and_permute_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(tensor(&[2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let s = t.stack(&[a, b]).unwrap();
        assert_eq!(t.value(s).shape, vec![2, 2, 3]);

        let rows = t.leaf(tensor(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let bev = t.rows_to_bev(rows, 2, 2).unwrap();
        assert_eq!(t.value(bev).shape, vec![2, 2, 2]);
        let back = t.bev_to_rows(bev).unwrap();
        assert_eq!(t.value(back).data, t.value(rows).data);
    }
}
