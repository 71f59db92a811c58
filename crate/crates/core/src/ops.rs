//! Differentiable operations recorded on a [`Graph`].
//!
//! Spatial maps are `H x W x C` (channels last); convolution kernels are
//! `kh x kw x Cin x Cout`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, Var};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSumExp(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    DivRows(Var, Var),
    Concat(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    BceWithLogits { logits: Var, target: Vec<f64> },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let (shape, ng) = (node.shape.clone(), node.needs_grad);
        self.push(shape, value, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let ng = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        Ok(self.push(shape, value, op, ng))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn dims3(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(Error::dim(op, s, &[0, 0, 0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x * s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::dim("scale_by", &self.nodes[x.0].shape, &self.nodes[s.0].shape));
        }
        let c = self.nodes[s.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, s]);
        Ok(self.push(shape, value, Op::ScaleBy(x, s), ng))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x[..., C] + b[C]`, broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.nodes[x.0].shape.last().unwrap();
        if self.nodes[b.0].value.len() != c {
            return Err(Error::dim("add_bias", &self.nodes[x.0].shape, &self.nodes[b.0].shape));
        }
        let bias = &self.nodes[b.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % c])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, b]);
        Ok(self.push(shape, value, Op::AddBias(x, b), ng))
    }

    /// Matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::dim("reshape", &self.nodes[x.0].shape, shape));
        }
        let value = self.nodes[x.0].value.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, ng))
    }

    /// `log(sum(exp(x)))` over every element.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xv.iter().map(|v| (v - max).exp()).sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![max + s.ln()], Op::LogSumExp(x), ng)
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.nodes[x.0].shape.clone();
        let c = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != c {
                return Err(Error::dim("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// `x / sqrt(|x|^2 + eps^2)` along `axis`; zero slices stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || eps <= 0.0 {
            return Err(Error::Contract(format!("l2_normalize: axis {axis} / eps {eps} invalid for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let ss: f64 = (0..len).map(|k| xv[at(k)] * xv[at(k)]).sum();
                let n = (ss + eps * eps).sqrt();
                norms[o * inner + i] = n;
                for k in 0..len {
                    out[at(k)] = xv[at(k)] / n;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::L2Normalize { x, axis, norms }, ng))
    }

    /// Zero-padded cross-correlation of `x[H x W x Cin]` with `k[kh x kw x Cin x Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = self.dims3("conv2d", x)?;
        let (kh, kw, kc, cout) = match self.nodes[k.0].shape[..] {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::dim("conv2d", &self.nodes[x.0].shape, s)),
        };
        if kc != cin {
            return Err(Error::dim("conv2d", &self.nodes[x.0].shape, &self.nodes[k.0].shape));
        }
        if stride == 0 || kh % 2 == 0 || kw % 2 == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Contract(format!(
                "conv2d: stride {stride}, pad {pad}, kernel {kh}x{kw} invalid for {h}x{w}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let opx = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                for ky in 0..kh {
                    let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                    for kx in 0..kw {
                        let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < w) else { continue };
                        let xin = &xv[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (ky * kw + kx) * cin * cout;
                        for (ci, &xval) in xin.iter().enumerate() {
                            if xval == 0.0 {
                                continue;
                            }
                            let krow = &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, &kval) in opx.iter_mut().zip(krow) {
                                *o += xval * kval;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, k]);
        Ok(self.push(vec![ho, wo, cout], out, Op::Conv2d { x, k, stride, pad }, ng))
    }

    /// Nearest-neighbour 2x upsampling of an `H x W x C` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.dims3("upsample2x", x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![2 * h, 2 * w, c], out, Op::Upsample2x(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![m], Op::Mean(x), ng)
    }

    /// Sums over the last axis, dropping it (`[m x n] -> [m]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() < 2 {
            return Err(Error::dim("sum_last", shape, &[0, 0]));
        }
        let c = *shape.last().unwrap();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let out = self.nodes[x.0].value.chunks(c).map(|r| r.iter().sum()).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, out, Op::SumLast(x), ng))
    }

    /// `x[m x n] / d[m]`, row-wise.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (m, n) = self.dims2("div_rows", x)?;
        if self.nodes[d.0].value.len() != m {
            return Err(Error::dim("div_rows", &self.nodes[x.0].shape, &self.nodes[d.0].shape));
        }
        let (xv, dv) = (&self.nodes[x.0].value, &self.nodes[d.0].value);
        let out = (0..m * n).map(|i| xv[i] / dv[i / n]).collect();
        let ng = self.ng(&[x, d]);
        Ok(self.push(vec![m, n], out, Op::DivRows(x, d), ng))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.nodes[parts[0].0].shape.clone();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    /// Row lookup into a `[V x C]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.dims2("gather_rows", table)?;
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(vec![ids.len(), c], out, Op::GatherRows { table, ids: ids.to_vec() }, ng))
    }

    /// `x[start..start+len]` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if len == 0 || start + len > shape[0] {
            return Err(Error::dim("slice_rows", &shape, &[start, len]));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.nodes[x.0].value[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, out, Op::SliceRows { x, start }, ng))
    }

    /// Column means of `[m x n]`, as `[1 x n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += xv[r * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a fixed target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.len() != target.len() {
            return Err(Error::dim("bce_with_logits", &self.nodes[logits.0].shape, &[target.len()]));
        }
        let total: f64 = lv
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / lv.len() as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits { logits, target: target.to_vec() },
            ng,
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m x n] += a[m x k] * b[k x n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Pushes `gout` (the gradient of node `i`) into the gradients of its inputs.
pub(crate) fn backprop(nodes: &[Node], i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = slot(nodes, grads, v) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = slot(nodes, grads, *a) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(nodes, grads, *b) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            if let Some(g) = slot(nodes, grads, *a) {
                for ((g, d), y) in g.iter_mut().zip(gout).zip(val(*b)) {
                    *g += d * y;
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for ((g, d), x) in g.iter_mut().zip(gout).zip(val(*a)) {
                    *g += d * x;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(g) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    g[j] += gout[j] / bv[j];
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for j in 0..g.len() {
                    g[j] -= gout[j] * av[j] / (bv[j] * bv[j]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * c);
            }
        }
        Op::ScaleBy(x, s) => {
            let c = val(*s)[0];
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * c);
            }
            if let Some(g) = slot(nodes, grads, *s) {
                g[0] += gout.iter().zip(val(*x)).map(|(d, v)| d * v).sum::<f64>();
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(nodes, grads, *b) {
                let c = g.len();
                for (j, d) in gout.iter().enumerate() {
                    g[j % c] += d;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(g) = slot(nodes, grads, *a) {
                // dA = dC * B^T
                for r in 0..m {
                    let drow = &gout[r * n..(r + 1) * n];
                    for p in 0..k {
                        g[r * k + p] += dot(drow, &bv[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                // dB = A^T * dC
                for r in 0..m {
                    let drow = &gout[r * n..(r + 1) * n];
                    for p in 0..k {
                        let a_rp = av[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        for (gv, d) in g[p * n..(p + 1) * n].iter_mut().zip(drow) {
                            *gv += a_rp * d;
                        }
                    }
                }
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[0];
            let (av, bv) = (val(*a), val(*b));
            if let Some(g) = slot(nodes, grads, *a) {
                // dA = dC * B
                matmul_acc(gout, bv, g, m, n, k);
            }
            if let Some(g) = slot(nodes, grads, *b) {
                // dB = dC^T * A
                for r in 0..m {
                    let arow = &av[r * k..(r + 1) * k];
                    for j in 0..n {
                        let d = gout[r * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        for (gv, x) in g[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *gv += d * x;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(g) = slot(nodes, grads, *x) {
                for r in 0..m {
                    for c in 0..n {
                        g[r * n + c] += gout[c * m + r];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            if let Some(g) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + ii;
                        let s: f64 = (0..len).map(|k| y[at(k)] * gout[at(k)]).sum();
                        for k in 0..len {
                            g[at(k)] += y[at(k)] * (gout[at(k)] - s);
                        }
                    }
                }
            }
        }
        Op::LogSumExp(x) => {
            let lse = node.value[0];
            if let Some(g) = slot(nodes, grads, *x) {
                for (gv, xv) in g.iter_mut().zip(val(*x)) {
                    *gv += gout[0] * (xv - lse).exp();
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let c = node.shape[node.shape.len() - 1];
            let gv = val(*gamma);
            if let Some(g) = slot(nodes, grads, *gamma) {
                for (j, d) in gout.iter().enumerate() {
                    g[j % c] += d * xhat[j];
                }
            }
            if let Some(g) = slot(nodes, grads, *beta) {
                for (j, d) in gout.iter().enumerate() {
                    g[j % c] += d;
                }
            }
            if let Some(g) = slot(nodes, grads, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let base = r * c;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dh = gout[base + j] * gv[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[base + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dh = gout[base + j] * gv[j];
                        g[base + j] += is * (dh - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            if let Some(g) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + ii;
                        let n = norms[o * inner + ii];
                        let yd: f64 = (0..len).map(|k| y[at(k)] * gout[at(k)]).sum();
                        for k in 0..len {
                            g[at(k)] += (gout[at(k)] - y[at(k)] * yd) / n;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, k, stride, pad } => {
            let (h, w, cin) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
            let (kh, kw, cout) = (nodes[k.0].shape[0], nodes[k.0].shape[1], nodes[k.0].shape[3]);
            let (ho, wo) = (node.shape[0], node.shape[1]);
            let (xv, kv) = (val(*x), val(*k));
            let (stride, pad) = (*stride, *pad);
            let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
                let iy = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h)?;
                let ix = (ox * stride + kx).checked_sub(pad).filter(|&v| v < w)?;
                Some(iy * w + ix)
            };
            if let Some(g) = slot(nodes, grads, *x) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let dpx = &gout[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let Some(p) = taps(oy, ox, ky, kx) else { continue };
                                let kbase = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    g[p * cin + ci] += dot(dpx, &kv[kbase + ci * cout..kbase + (ci + 1) * cout]);
                                }
                            }
                        }
                    }
                }
            }
            if let Some(g) = slot(nodes, grads, *k) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let dpx = &gout[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let Some(p) = taps(oy, ox, ky, kx) else { continue };
                                let kbase = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let xval = xv[p * cin + ci];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let krow = &mut g[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (gk, d) in krow.iter_mut().zip(dpx) {
                                        *gk += xval * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2x(x) => {
            let (h, w, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
            if let Some(g) = slot(nodes, grads, *x) {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((y / 2) * w + xx / 2) * c;
                        let dst = (y * 2 * w + xx) * c;
                        for ch in 0..c {
                            g[src + ch] += gout[dst + ch];
                        }
                    }
                }
            }
        }
        Op::Relu(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), xv) in g.iter_mut().zip(gout).zip(val(*x)) {
                    if *xv > 0.0 {
                        *gv += d;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), &v) in g.iter_mut().zip(gout).zip(val(*x)) {
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *gv += d * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), y) in g.iter_mut().zip(gout).zip(&node.value) {
                    *gv += d * y * (1.0 - y);
                }
            }
        }
        Op::Softplus(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), &v) in g.iter_mut().zip(gout).zip(val(*x)) {
                    *gv += d * sigmoid(v);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), y) in g.iter_mut().zip(gout).zip(&node.value) {
                    *gv += d * y;
                }
            }
        }
        Op::Log(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                for ((gv, d), v) in g.iter_mut().zip(gout).zip(val(*x)) {
                    *gv += d / v;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                g.iter_mut().for_each(|gv| *gv += gout[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                let d = gout[0] / g.len() as f64;
                g.iter_mut().for_each(|gv| *gv += d);
            }
        }
        Op::SumLast(x) => {
            if let Some(g) = slot(nodes, grads, *x) {
                let c = g.len() / gout.len();
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv += gout[j / c];
                }
            }
        }
        Op::DivRows(x, d) => {
            let n = node.shape[1];
            let (xv, dv) = (val(*x), val(*d));
            if let Some(g) = slot(nodes, grads, *x) {
                for (j, gv) in g.iter_mut().enumerate() {
                    *gv += gout[j] / dv[j / n];
                }
            }
            if let Some(g) = slot(nodes, grads, *d) {
                for (r, gv) in g.iter_mut().enumerate() {
                    let s: f64 = (0..n).map(|c| gout[r * n + c] * xv[r * n + c]).sum();
                    *gv -= s / (dv[r] * dv[r]);
                }
            }
        }
        Op::Concat(parts) => {
            let total = node.shape[node.shape.len() - 1];
            let rows = node.value.len() / total;
            let mut offset = 0;
            for p in parts {
                let wd = nodes[p.0].shape[nodes[p.0].shape.len() - 1];
                if let Some(g) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        for c in 0..wd {
                            g[r * wd + c] += gout[r * total + offset + c];
                        }
                    }
                }
                offset += wd;
            }
        }
        Op::GatherRows { table, ids } => {
            let c = nodes[table.0].shape[1];
            if let Some(g) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        g[id * c + j] += gout[r * c + j];
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let row = gout.len() / node.shape[0];
            if let Some(g) = slot(nodes, grads, *x) {
                for (j, d) in gout.iter().enumerate() {
                    g[start * row + j] += d;
                }
            }
        }
        Op::MeanRows(x) => {
            let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(g) = slot(nodes, grads, *x) {
                for r in 0..m {
                    for j in 0..n {
                        g[r * n + j] += gout[j] / m as f64;
                    }
                }
            }
        }
        Op::BceWithLogits { logits, target } => {
            if let Some(g) = slot(nodes, grads, *logits) {
                let scale = gout[0] / target.len() as f64;
                for ((gv, &z), &t) in g.iter_mut().zip(val(*logits)).zip(target) {
                    *gv += scale * (sigmoid(z) - t);
                }
            }
        }
    }
}
