//! Reverse-mode automatic differentiation over a linear tape of tensor ops.
//!
//! Image tensors use the `[batch, channels, height, width]` layout.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, groups: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    MulMap { x: Var, map: Var },
    Upsample { x: Var, rows: Vec<Lerp>, cols: Vec<Lerp> },
    Squash { x: Var, eps: f64 },
    Bce { p: Var, target: Vec<f64>, clamp: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Half-pixel-centre sampling (`align_corners = false`), clamped at the low
/// edge and replicated at the high edge.
fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Lerp {
                i0,
                i1,
                frac: pos - i0 as f64,
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[clamp, 1 - clamp]`.
pub fn bce(p: &[f64], target: &[f64], clamp: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let q = p.clamp(clamp, 1.0 - clamp);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

fn dims4(t: &Tensor, what: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::InvalidArgument(format!(
            "{what} expects a rank-4 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Visits every (output row range, input row range) overlap of a kernel tap
/// with "same" zero padding along one axis of length `n`.
fn tap_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    cpg: usize,
    opg: usize,
    k: usize,
}

impl ConvDims {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> + '_ {
        let p = (self.k / 2) as isize;
        (0..self.k).flat_map(move |kh| (0..self.k).map(move |kw| (kh, kw, kh as isize - p, kw as isize - p)))
    }
}

fn conv_forward(d: &ConvDims, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.cout * hw];
    for n in 0..d.batch {
        for oc in 0..d.cout {
            let g = oc / d.opg;
            let plane = &mut out[(n * d.cout + oc) * hw..][..hw];
            plane.iter_mut().for_each(|v| *v = b[oc]);
            for icl in 0..d.cpg {
                let xp = &x[(n * d.cin + g * d.cpg + icl) * hw..][..hw];
                for (kh, kw, dy, dx) in d.taps() {
                    let wv = w[((oc * d.cpg + icl) * d.k + kh) * d.k + kw];
                    let (r0, r1) = tap_range(d.h, dy);
                    let (c0, c1) = tap_range(d.w, dx);
                    for r in r0..r1 {
                        let ir = (r as isize + dy) as usize;
                        let ic0 = (c0 as isize + dx) as usize;
                        let orow = &mut plane[r * d.w + c0..r * d.w + c1];
                        let irow = &xp[ir * d.w + ic0..][..c1 - c0];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a "same" grouped convolution; each output is computed only
/// when requested.
fn conv_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let mut db = want[2].then(|| vec![0.0; d.cout]);
    for n in 0..d.batch {
        for oc in 0..d.cout {
            let g = oc / d.opg;
            let gp = &dout[(n * d.cout + oc) * hw..][..hw];
            if let Some(db) = db.as_mut() {
                db[oc] += gp.iter().sum::<f64>();
            }
            for icl in 0..d.cpg {
                let xoff = (n * d.cin + g * d.cpg + icl) * hw;
                for (kh, kw, dy, dxo) in d.taps() {
                    let widx = ((oc * d.cpg + icl) * d.k + kh) * d.k + kw;
                    let (r0, r1) = tap_range(d.h, dy);
                    let (c0, c1) = tap_range(d.w, dxo);
                    let ic0 = (c0 as isize + dxo) as usize;
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let ir = (r as isize + dy) as usize;
                        let grow = &gp[r * d.w + c0..r * d.w + c1];
                        let start = xoff + ir * d.w + ic0;
                        if dw.is_some() {
                            let xrow = &x[start..start + (c1 - c0)];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = w[widx];
                            for (o, gv) in dx[start..start + (c1 - c0)].iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Grouped 2-D convolution, stride 1, odd square kernel, zero "same"
    /// padding. `w` is `[cout, cin / groups, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
        let [batch, cin, h, wd] = dims4(self.value(x), "conv2d input")?;
        let [cout, cpg, k, k2] = dims4(self.value(w), "conv2d weight")?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(Error::InvalidArgument(format!(
                "conv2d: {cin} input and {cout} output channels incompatible with {groups} groups of {cpg}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel must be odd and square, got {k}x{k2}")));
        }
        Error::check_dim("conv2d bias", cout, self.value(b).len())?;
        let d = ConvDims {
            batch,
            cin,
            cout,
            h,
            w: wd,
            cpg,
            opg: cout / groups,
            k,
        };
        let out = conv_forward(&d, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![batch, cout, h, wd], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, groups }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2; height and width must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("maxpool2 needs even sides, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * r + dr) * w + 2 * col + dc;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `y = x wᵀ + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (batch, fin, fout) = match (xs, ws) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "linear: input {xs:?} incompatible with weight {ws:?}"
                )))
            }
        };
        Error::check_dim("linear bias", fout, self.value(b).len())?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * fout];
        for n in 0..batch {
            let xr = &xd[n * fin..(n + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                out[n * fout + o] = bd[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Elementwise product of every `[h, w]` plane of `x` with `map`.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let [_, _, h, w] = dims4(self.value(x), "mul_map input")?;
        if self.value(map).shape() != [h, w] {
            return Err(Error::InvalidArgument(format!(
                "mul_map: map shape {:?} does not match planes {h}x{w}",
                self.value(map).shape()
            )));
        }
        let m = self.value(map).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .flat_map(|plane| plane.iter().zip(m).map(|(a, b)| a * b))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(map);
        Ok(self.push(t, Op::MulMap { x, map }, rg))
    }

    /// Bilinear resize of every plane to `size x size`.
    pub fn upsample(&mut self, x: Var, size: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "upsample input")?;
        if size == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("upsample needs nonempty planes".into()));
        }
        let (rows, cols) = (lerp_table(h, size), lerp_table(w, size));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * size * size);
        for plane in src.chunks(h * w) {
            for r in &rows {
                for cl in &cols {
                    let at = |i: usize, j: usize| plane[i * w + j];
                    let top = at(r.i0, cl.i0) * (1.0 - cl.frac) + at(r.i0, cl.i1) * cl.frac;
                    let bot = at(r.i1, cl.i0) * (1.0 - cl.frac) + at(r.i1, cl.i1) * cl.frac;
                    out.push(top * (1.0 - r.frac) + bot * r.frac);
                }
            }
        }
        let t = Tensor::new(vec![b, c, size, size], out)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Upsample { x, rows, cols }, rg))
    }

    /// `eps + (1 - 2 eps) * sigmoid(x)`, strictly inside `(0, 1)` for `eps > 0`.
    pub fn squash(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| eps + (1.0 - 2.0 * eps) * sigmoid(*v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, Op::Squash { x, eps }, rg)
    }

    /// Scalar mean BCE of probabilities `p` against `target` (same length).
    pub fn bce(&mut self, p: Var, target: Vec<f64>, clamp: f64) -> Result<Var> {
        Error::check_dim("bce target length", self.value(p).len(), target.len())?;
        let loss = bce(self.value(p).data(), &target, clamp);
        let rg = self.needs(p);
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, Op::Bce { p, target, clamp }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        Error::check_dim("loss size", 1, self.value(loss).len())?;
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            for (target, contrib) in self.local_grads(i, &g) {
                let node = &mut self.nodes[target.0];
                match node.value.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    None => node.value.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, groups } => {
                let [batch, cin, h, wd] = dims4(self.value(*x), "").expect("checked");
                let [cout, cpg, k, _] = dims4(self.value(*w), "").expect("checked");
                let d = ConvDims {
                    batch,
                    cin,
                    cout,
                    h,
                    w: wd,
                    cpg,
                    opg: cout / groups,
                    k,
                };
                let want = [self.needs(*x), self.needs(*w), self.needs(*b)];
                let (dx, dw, db) = conv_backward(&d, self.value(*x).data(), self.value(*w).data(), g, want);
                out.extend(dx.map(|v| (*x, v)));
                out.extend(dw.map(|v| (*w, v)));
                out.extend(db.map(|v| (*b, v)));
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                out.push((*x, g.iter().zip(src).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (batch, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*w).shape()[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    for n in 0..batch {
                        let row = &mut dx[n * fin..(n + 1) * fin];
                        for o in 0..fout {
                            let gv = g[n * fout + o];
                            for (r, wv) in row.iter_mut().zip(&wd[o * fin..(o + 1) * fin]) {
                                *r += gv * wv;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    for n in 0..batch {
                        let xr = &xd[n * fin..(n + 1) * fin];
                        for o in 0..fout {
                            let gv = g[n * fout + o];
                            for (r, xv) in dw[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                                *r += gv * xv;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::MulMap { x, map } => {
                let m = self.value(*map).data();
                let plane = m.len();
                if self.needs(*x) {
                    let dx = g.chunks(plane).flat_map(|p| p.iter().zip(m).map(|(a, b)| a * b)).collect();
                    out.push((*x, dx));
                }
                if self.needs(*map) {
                    let mut dm = vec![0.0; plane];
                    for (gp, xp) in g.chunks(plane).zip(self.value(*x).data().chunks(plane)) {
                        for ((d, gv), xv) in dm.iter_mut().zip(gp).zip(xp) {
                            *d += gv * xv;
                        }
                    }
                    out.push((*map, dm));
                }
            }
            Op::Upsample { x, rows, cols } => {
                let [_, _, h, w] = dims4(self.value(*x), "").expect("checked");
                let size = rows.len() * cols.len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.chunks(size)) {
                    let mut gi = gplane.iter();
                    for r in rows {
                        for cl in cols {
                            let gv = *gi.next().expect("sized");
                            let (a, b) = (gv * (1.0 - r.frac), gv * r.frac);
                            dplane[r.i0 * w + cl.i0] += a * (1.0 - cl.frac);
                            dplane[r.i0 * w + cl.i1] += a * cl.frac;
                            dplane[r.i1 * w + cl.i0] += b * (1.0 - cl.frac);
                            dplane[r.i1 * w + cl.i1] += b * cl.frac;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Squash { x, eps } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, v)| {
                        let s = sigmoid(*v);
                        gv * (1.0 - 2.0 * eps) * s * (1.0 - s)
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Bce { p, target, clamp } => {
                let n = target.len() as f64;
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(pv, t)| {
                        if *pv < *clamp || *pv > 1.0 - clamp {
                            0.0
                        } else {
                            g[0] * (pv - t) / (pv * (1.0 - pv)) / n
                        }
                    })
                    .collect();
                out.push((*p, dp));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum of c * f(x)) / dx for a unary op.
    fn check_unary(shape: Vec<usize>, f: impl Fn(&mut Tape, Var) -> Var, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let weights: Vec<f64> = {
            let mut t = Tape::new();
            let v = t.leaf(x0.clone(), false);
            let y = f(&mut t, v);
            (0..t.value(y).len()).map(|_| rng.gen_range(0.1..0.9)).collect()
        };
        // weighted BCE-free scalar: route through a linear reduction
        let scalar = |x: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let y = f(&mut t, v);
            let n = t.value(y).len();
            let flat = t.reshape(y, vec![1, n]).unwrap();
            let w = t.leaf(Tensor::new(vec![1, n], weights.clone()).unwrap(), false);
            let b = t.leaf(Tensor::zeros(vec![1]), false);
            let s = t.linear(flat, w, b).unwrap();
            let s = t.reshape(s, vec![1]).unwrap();
            let val = t.value(s).data()[0];
            t.backward(s).unwrap();
            (val, t.grad(v).map(|g| g.to_vec()))
        };
        let (_, grad) = scalar(&x0);
        let grad = grad.unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (scalar(&plus).0 - scalar(&minus).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn upsample_gradient() {
        check_unary(vec![1, 2, 3, 3], |t, v| t.upsample(v, 7).unwrap(), 1);
        check_unary(vec![2, 1, 4, 4], |t, v| t.upsample(v, 6).unwrap(), 2);
    }

    #[test]
    fn squash_and_pool_gradients() {
        check_unary(vec![1, 1, 4, 4], |t, v| t.squash(v, 1e-6), 3);
        check_unary(vec![2, 2, 4, 4], |t, v| t.maxpool2(v).unwrap(), 4);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(vec![1, 1, 12, 12], 0.37), false);
        let y = t.upsample(x, 36).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn upsample_identity_at_same_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random(vec![1, 1, 5, 5], &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(src.clone(), false);
        let y = t.upsample(x, 5).unwrap();
        assert_eq!(t.value(y).data(), src.data());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, cin, cout, groups, h, w, k) = (2, 4, 6, 2, 5, 4, 3);
        let x = random(vec![b, cin, h, w], &mut rng);
        let wt = random(vec![cout, cin / groups, k, k], &mut rng);
        let bias = random(vec![cout], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone(), false), t.leaf(wt.clone(), false), t.leaf(bias.clone(), false));
        let y = t.conv2d(xv, wv, bv, groups).unwrap();
        let (cpg, opg) = (cin / groups, cout / groups);
        for n in 0..b {
            for oc in 0..cout {
                for r in 0..h {
                    for c in 0..w {
                        let mut s = bias.data()[oc];
                        for icl in 0..cpg {
                            let ic = (oc / opg) * cpg + icl;
                            for kh in 0..k {
                                for kw in 0..k {
                                    let (ir, icol) = (r as isize + kh as isize - 1, c as isize + kw as isize - 1);
                                    if ir < 0 || icol < 0 || ir >= h as isize || icol >= w as isize {
                                        continue;
                                    }
                                    s += wt.data()[((oc * cpg + icl) * k + kh) * k + kw]
                                        * x.data()[((n * cin + ic) * h + ir as usize) * w + icol as usize];
                                }
                            }
                        }
                        let got = t.value(y).data()[((n * cout + oc) * h + r) * w + c];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce(&[0.5; 9], &[1.0; 9], 1e-6) - 2f64.ln()).abs() < 1e-15);
        assert!((bce(&[0.5, 0.5], &[0.0, 1.0], 1e-6) - 2f64.ln()).abs() < 1e-15);
        let perfect = bce(&[0.0, 1.0], &[0.0, 1.0], 1e-6);
        assert!(perfect <= -(1.0f64 - 1e-6).ln() + 1e-15);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(vec![1, 2], 1.0), false);
        let w = t.leaf(Tensor::filled(vec![1, 2], 0.5), true);
        let b = t.leaf(Tensor::zeros(vec![1]), false);
        let y = t.linear(x, w, b).unwrap();
        let p = t.squash(y, 1e-6);
        let l = t.bce(p, vec![1.0], 1e-6).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(x).is_none());
        assert!(t.grad(b).is_none());
        assert!(t.grad(w).is_some());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
        let w = t.leaf(Tensor::zeros(vec![4, 1, 3, 3]), false);
        let b = t.leaf(Tensor::zeros(vec![4]), false);
        assert!(t.conv2d(x, w, b, 2).is_err());
        let odd = t.leaf(Tensor::zeros(vec![1, 1, 3, 3]), false);
        assert!(t.maxpool2(odd).is_err());
        let m = t.leaf(Tensor::zeros(vec![3, 3]), false);
        assert!(t.mul_map(x, m).is_err());
    }
}
