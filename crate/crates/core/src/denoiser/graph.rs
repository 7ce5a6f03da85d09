//! Reverse-mode differentiation over the handful of layer types the
//! denoiser needs.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order; [`Graph::backward`] walks the record in reverse. Work is split
//! across batch items with rayon, and every cross-item reduction (weight
//! gradients, norm statistics) is summed sequentially in item order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Var },
    AvgPool { x: Var },
    Upsample { x: Var },
    Concat { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A trainable leaf; `id` indexes the gradient vector returned by
    /// [`Graph::backward`].
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    /// Same-size convolution with zero padding. `w` is `[cout, cin, k, k]`
    /// with odd `k`, `b` is `[cout, 1, 1, 1]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
            let [n, cin, h, wd] = xt.shape;
            let [cout, wcin, k, _] = wt.shape;
            assert_eq!(cin, wcin, "conv input channels");
            let mut out = Tensor::zeros([n, cout, h, wd]);
            let olen = out.item_len();
            out.data
                .par_chunks_mut(olen)
                .enumerate()
                .for_each(|(i, o)| conv_item(xt.item(i), &wt.data, &bt.data, cin, cout, k, h, wd, o));
            out
        };
        self.push(out, Op::Conv { x, w, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) = {
            let (xt, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            let [n, c, h, w] = xt.shape;
            assert_eq!(c % groups, 0, "channels must divide into groups");
            let glen = (c / groups) * h * w;
            let cpg = c / groups;
            let mut out = Tensor::zeros(xt.shape);
            let stats: Vec<(f64, f64)> = out
                .data
                .par_chunks_mut(glen)
                .zip(xt.data.par_chunks(glen))
                .enumerate()
                .map(|(k, (o, xs))| {
                    let grp = k % groups;
                    let mean = xs.iter().sum::<f64>() / glen as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                    let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                    for (ci, (oc, xc)) in o.chunks_mut(h * w).zip(xs.chunks(h * w)).enumerate() {
                        let ch = grp * cpg + ci;
                        let (gm, bt) = (g.data[ch], b.data[ch]);
                        for (ov, xv) in oc.iter_mut().zip(xc) {
                            *ov = (xv - mean) * rstd * gm + bt;
                        }
                    }
                    (mean, rstd)
                })
                .collect();
            debug_assert_eq!(stats.len(), n * groups);
            (out, stats)
        };
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = {
            let xt = self.value(x);
            Tensor::from_vec(xt.shape, xt.data.iter().map(|&v| v * sigmoid(v)).collect())
        };
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let mut o = self.value(a).clone();
            o.add_assign(self.value(b));
            o
        };
        self.push(out, Op::Add { a, b })
    }

    /// `x[n, c, :, :] += v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let out = {
            let (xt, vt) = (self.value(x), self.value(v));
            let [n, c, h, w] = xt.shape;
            assert_eq!(vt.shape, [n, c, 1, 1], "channel bias shape");
            let mut o = xt.clone();
            for (k, plane) in o.data.chunks_mut(h * w).enumerate() {
                let bias = vt.data[k];
                plane.iter_mut().for_each(|p| *p += bias);
            }
            o
        };
        self.push(out, Op::AddChannel { x, v })
    }

    /// `x` is `[n, din, 1, 1]`, `w` is `[dout, din, 1, 1]`, `b` is `[dout, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
            let (n, din) = (xt.shape[0], xt.shape[1]);
            let dout = wt.shape[0];
            assert_eq!(wt.shape[1], din, "linear input width");
            let mut o = Tensor::zeros([n, dout, 1, 1]);
            for i in 0..n {
                let xi = xt.item(i);
                for j in 0..dout {
                    let row = &wt.data[j * din..(j + 1) * din];
                    o.data[i * dout + j] = bt.data[j] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            o
        };
        self.push(out, Op::Linear { x, w, b })
    }

    /// 2x2 mean pooling; spatial extent must be even.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let out = {
            let xt = self.value(x);
            let [n, c, h, w] = xt.shape;
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool needs even extent");
            let (oh, ow) = (h / 2, w / 2);
            let mut o = Tensor::zeros([n, c, oh, ow]);
            for (op, ip) in o.data.chunks_mut(oh * ow).zip(xt.data.chunks(h * w)) {
                for y in 0..oh {
                    for x in 0..ow {
                        let i = 2 * y * w + 2 * x;
                        op[y * ow + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + w] + ip[i + w + 1]);
                    }
                }
            }
            o
        };
        self.push(out, Op::AvgPool { x })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let out = {
            let xt = self.value(x);
            let [n, c, h, w] = xt.shape;
            let (oh, ow) = (2 * h, 2 * w);
            let mut o = Tensor::zeros([n, c, oh, ow]);
            for (op, ip) in o.data.chunks_mut(oh * ow).zip(xt.data.chunks(h * w)) {
                for y in 0..oh {
                    for x in 0..ow {
                        op[y * ow + x] = ip[(y / 2) * w + x / 2];
                    }
                }
            }
            o
        };
        self.push(out, Op::Upsample { x })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (at, bt) = (self.value(a), self.value(b));
            let [n, ca, h, w] = at.shape;
            let cb = bt.shape[1];
            assert_eq!([bt.shape[0], bt.shape[2], bt.shape[3]], [n, h, w], "concat extent");
            let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
            for i in 0..n {
                data.extend_from_slice(at.item(i));
                data.extend_from_slice(bt.item(i));
            }
            Tensor::from_vec([n, ca + cb, h, w], data)
        };
        self.push(out, Op::Concat { a, b })
    }

    /// Back-propagates `grad_out` from `out`. Returns one gradient slot per
    /// parameter id below `num_params` (`None` if the parameter was unused).
    pub fn backward(&self, out: Var, grad_out: Tensor, num_params: usize) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(grad_out);
        let mut param_grads: Vec<Option<Tensor>> = (0..num_params).map(|_| None).collect();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    accumulate(&mut param_grads[*id], g);
                }
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) = conv_backward(self.value(*x), self.value(*w), &g);
                    contributions.extend([(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (gx, gg, gb) =
                        group_norm_backward(self.value(*x), self.value(*gamma), *groups, stats, &g);
                    contributions.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::Silu { x } => {
                    let xt = self.value(*x);
                    let data = xt
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    contributions.push((*x, Tensor::from_vec(xt.shape, data)));
                }
                Op::Add { a, b } => {
                    contributions.push((*b, g.clone()));
                    contributions.push((*a, g));
                }
                Op::AddChannel { x, v } => {
                    let [n, c, h, w] = g.shape;
                    let gv = Tensor::from_vec(
                        [n, c, 1, 1],
                        g.data.chunks(h * w).map(|p| p.iter().sum()).collect(),
                    );
                    contributions.push((*v, gv));
                    contributions.push((*x, g));
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, din) = (xt.shape[0], xt.shape[1]);
                    let dout = wt.shape[0];
                    let mut gx = Tensor::zeros(xt.shape);
                    let mut gw = Tensor::zeros(wt.shape);
                    let mut gb = Tensor::zeros([dout, 1, 1, 1]);
                    for i in 0..n {
                        let xi = xt.item(i);
                        for j in 0..dout {
                            let gy = g.data[i * dout + j];
                            gb.data[j] += gy;
                            let row = &wt.data[j * din..(j + 1) * din];
                            let grow = &mut gw.data[j * din..(j + 1) * din];
                            for k in 0..din {
                                gx.data[i * din + k] += gy * row[k];
                                grow[k] += gy * xi[k];
                            }
                        }
                    }
                    contributions.extend([(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::AvgPool { x } => {
                    let xt = self.value(*x);
                    let [_, _, h, w] = xt.shape;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros(xt.shape);
                    for (gp, op) in gx.data.chunks_mut(h * w).zip(g.data.chunks(oh * ow)) {
                        for y in 0..h {
                            for x in 0..w {
                                gp[y * w + x] = 0.25 * op[(y / 2) * ow + x / 2];
                            }
                        }
                    }
                    contributions.push((*x, gx));
                }
                Op::Upsample { x } => {
                    let xt = self.value(*x);
                    let [_, _, h, w] = xt.shape;
                    let ow = 2 * w;
                    let mut gx = Tensor::zeros(xt.shape);
                    for (gp, op) in gx.data.chunks_mut(h * w).zip(g.data.chunks(4 * h * w)) {
                        for y in 0..h {
                            for x in 0..w {
                                let i = 2 * y * ow + 2 * x;
                                gp[y * w + x] = op[i] + op[i + 1] + op[i + ow] + op[i + ow + 1];
                            }
                        }
                    }
                    contributions.push((*x, gx));
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.value(*a).shape, self.value(*b).shape);
                    let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                    let mut ga = Vec::with_capacity(sa[0] * la);
                    let mut gb = Vec::with_capacity(sb[0] * lb);
                    for item in g.data.chunks(la + lb) {
                        ga.extend_from_slice(&item[..la]);
                        gb.extend_from_slice(&item[la..]);
                    }
                    contributions.push((*a, Tensor::from_vec(sa, ga)));
                    contributions.push((*b, Tensor::from_vec(sb, gb)));
                }
            }
            for (v, t) in contributions {
                accumulate(&mut grads[v.0], t);
            }
        }
        param_grads
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Row ranges `[lo, hi)` of output positions whose input offset `d` stays in bounds.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_item(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, k: usize, h: usize, wd: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(b[co]);
        for ci in 0..cin {
            let xi = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd;
                        let orow = &mut o[y * wd + x0..y * wd + x1];
                        let irow = &xi[(src as isize + x0 as isize + dx) as usize..];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(xt: &Tensor, wt: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, cin, h, wd] = xt.shape;
    let [cout, _, k, _] = wt.shape;
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let per_item: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = xt.item(i);
            let go = g.item(i);
            let mut gx = vec![0.0; cin * plane];
            let mut gw = vec![0.0; wt.data.len()];
            let mut gb = vec![0.0; cout];
            for co in 0..cout {
                let gop = &go[co * plane..(co + 1) * plane];
                gb[co] = gop.iter().sum();
                for ci in 0..cin {
                    let xi = &x[ci * plane..(ci + 1) * plane];
                    let gxi = &mut gx[ci * plane..(ci + 1) * plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(wd, dx);
                            let widx = ((co * cin + ci) * k + ky) * k + kx;
                            let wv = wt.data[widx];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let src = ((y as isize + dy) as usize * wd) as isize + dx;
                                let grow = &gop[y * wd + x0..y * wd + x1];
                                let s = (src + x0 as isize) as usize;
                                let irow = &xi[s..s + (x1 - x0)];
                                let gxrow = &mut gxi[s..s + (x1 - x0)];
                                for ((gv, iv), gxv) in grow.iter().zip(irow).zip(gxrow.iter_mut()) {
                                    acc += gv * iv;
                                    *gxv += wv * gv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            (gx, gw, gb)
        })
        .collect();
    let mut gx = Vec::with_capacity(xt.data.len());
    let mut gw = Tensor::zeros(wt.shape);
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    for (ix, iw, ib) in per_item {
        gx.extend_from_slice(&ix);
        for (a, b) in gw.data.iter_mut().zip(&iw) {
            *a += b;
        }
        for (a, b) in gb.data.iter_mut().zip(&ib) {
            *a += b;
        }
    }
    (Tensor::from_vec(xt.shape, gx), gw, gb)
}

fn group_norm_backward(
    xt: &Tensor,
    gamma: &Tensor,
    groups: usize,
    stats: &[(f64, f64)],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [_, c, h, w] = xt.shape;
    let plane = h * w;
    let cpg = c / groups;
    let glen = cpg * plane;
    let m = glen as f64;
    // Per (item, group): input gradient plus per-channel gamma/beta partials.
    let per_group: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = xt
        .data
        .par_chunks(glen)
        .zip(g.data.par_chunks(glen))
        .enumerate()
        .map(|(k, (xs, gs))| {
            let grp = k % groups;
            let (mean, rstd) = stats[k];
            let mut sum1 = 0.0;
            let mut sum2 = 0.0;
            let mut dgamma = vec![0.0; cpg];
            let mut dbeta = vec![0.0; cpg];
            for ci in 0..cpg {
                let gm = gamma.data[grp * cpg + ci];
                for p in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[p] - mean) * rstd;
                    let dxhat = gs[p] * gm;
                    sum1 += dxhat;
                    sum2 += dxhat * xhat;
                    dgamma[ci] += gs[p] * xhat;
                    dbeta[ci] += gs[p];
                }
            }
            let mut gx = vec![0.0; glen];
            for ci in 0..cpg {
                let gm = gamma.data[grp * cpg + ci];
                for p in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[p] - mean) * rstd;
                    let dxhat = gs[p] * gm;
                    gx[p] = rstd * (dxhat - sum1 / m - xhat * sum2 / m);
                }
            }
            (gx, dgamma, dbeta)
        })
        .collect();
    let mut gx = Vec::with_capacity(xt.data.len());
    let mut gg = Tensor::zeros(gamma.shape);
    let mut gb = Tensor::zeros(gamma.shape);
    for (k, (ix, dg, db)) in per_group.into_iter().enumerate() {
        let grp = k % groups;
        gx.extend_from_slice(&ix);
        for ci in 0..cpg {
            gg.data[grp * cpg + ci] += dg[ci];
            gb.data[grp * cpg + ci] += db[ci];
        }
    }
    (Tensor::from_vec(xt.shape, gx), gg, gb)
}
