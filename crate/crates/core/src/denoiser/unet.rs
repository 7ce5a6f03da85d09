//! Encoder-decoder noise predictor with skip connections.
//!
//! Each resolution level holds one residual block (group norm, SiLU, 3x3
//! convolution, twice) that also receives a projection of the sinusoidal
//! timestep embedding. Levels are joined by 2x2 mean pooling on the way
//! down and nearest upsampling plus skip concatenation on the way up. There
//! is no attention.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub patch_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
}

impl DenoiserConfig {
    /// 16x16 patches, 8 base channels, two levels. Trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 32,
        }
    }

    pub fn desk32() -> Self {
        Self {
            patch_size: 32,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 64,
        }
    }

    pub fn paper64() -> Self {
        Self {
            patch_size: 64,
            base_channels: 32,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            time_embed_dim: 128,
        }
    }

    pub fn paper128() -> Self {
        Self {
            patch_size: 128,
            base_channels: 64,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            time_embed_dim: 256,
        }
    }

    /// The default preset for a patch size.
    pub fn for_patch_size(ps: usize) -> Result<Self> {
        match ps {
            16 => Ok(Self::desk()),
            32 => Ok(Self::desk32()),
            64 => Ok(Self::paper64()),
            128 => Ok(Self::paper128()),
            _ => Err(Error::InvalidArgument(format!(
                "no preset for patch size {ps}; use 16, 32, 64 or 128"
            ))),
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if ![16, 32, 64, 128].contains(&self.patch_size) {
            return bad(format!("patch size {} not in {{16, 32, 64, 128}}", self.patch_size));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        let coarsest = self.patch_size >> (self.depth() - 1);
        if coarsest < 2 || coarsest << (self.depth() - 1) != self.patch_size {
            return bad(format!(
                "{} levels leave a {coarsest}px coarsest grid for patch size {}",
                self.depth(),
                self.patch_size
            ));
        }
        if (0..self.depth()).any(|l| self.channels(l) % NORM_GROUPS != 0) {
            return bad(format!("every level's channel count must be a multiple of {NORM_GROUPS}"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time embedding width must be even and positive".into());
        }
        Ok(())
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: NormLayer,
    conv1: ConvLayer,
    time: DenseLayer,
    norm2: NormLayer,
    conv2: ConvLayer,
    skip: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: DenseLayer,
    time2: DenseLayer,
    conv_in: ConvLayer,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: NormLayer,
    conv_out: ConvLayer,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: [usize; 4], std: f64) -> usize {
        let n = shape.iter().product();
        let data = self.rng.normal_vec(n).into_iter().map(|v| v * std).collect();
        self.store.add(name, Tensor::from_vec(shape, data))
    }

    fn constant(&mut self, name: String, shape: [usize; 4], v: f64) -> usize {
        let n = shape.iter().product();
        self.store.add(name, Tensor::from_vec(shape, vec![v; n]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> ConvLayer {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        ConvLayer {
            w: self.normal(format!("{name}.weight"), [cout, cin, k, k], std),
            b: self.constant(format!("{name}.bias"), [cout, 1, 1, 1], 0.0),
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> DenseLayer {
        let std = (1.0 / din as f64).sqrt();
        DenseLayer {
            w: self.normal(format!("{name}.weight"), [dout, din, 1, 1], std),
            b: self.constant(format!("{name}.bias"), [dout, 1, 1, 1], 0.0),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        NormLayer {
            gamma: self.constant(format!("{name}.gamma"), [c, 1, 1, 1], 1.0),
            beta: self.constant(format!("{name}.beta"), [c, 1, 1, 1], 0.0),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1.0),
            time: self.dense(&format!("{name}.time"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 0.5),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
}

/// Sinusoidal embedding of integer timesteps, `[n, dim, 1, 1]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::from_vec([ts.len(), dim, 1, 1], data)
}

impl Denoiser {
    /// Fresh network with seeded He-style initialization.
    pub fn new(config: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore {
                names: Vec::new(),
                tensors: Vec::new(),
            },
            rng,
        };
        let e = config.time_embed_dim;
        let time1 = b.dense("time.fc1", e, e);
        let time2 = b.dense("time.fc2", e, e);
        let c0 = config.channels(0);
        let conv_in = b.conv("conv_in", 1, c0, 3, 1.0);
        let depth = config.depth();
        let mut down = Vec::with_capacity(depth);
        let mut cin = c0;
        for l in 0..depth {
            let c = config.channels(l);
            down.push(b.res(&format!("down.{l}"), cin, c, e));
            cin = c;
        }
        let mid = b.res("mid", cin, cin, e);
        let mut up = vec![None; depth];
        let mut h = cin;
        for l in (0..depth).rev() {
            let c = config.channels(l);
            up[l] = Some(b.res(&format!("up.{l}"), h + c, c, e));
            h = c;
        }
        let norm_out = b.norm("norm_out", c0);
        let conv_out = b.conv("conv_out", c0, 1, 3, 0.1);
        let layout = Layout {
            time1,
            time2,
            conv_in,
            down,
            mid,
            up: up.into_iter().map(|u| u.expect("every level built")).collect(),
            norm_out,
            conv_out,
        };
        Ok(Self {
            config,
            params: b.store,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values by name, checking names and shapes.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.params.names[i] {
                return Err(Error::Incompatible(format!(
                    "parameter {i}: expected '{}', found '{name}'",
                    self.params.names[i]
                )));
            }
            if t.shape != self.params.tensors[i].shape {
                return Err(Error::Incompatible(format!(
                    "parameter '{name}': expected shape {:?}, found {:?}",
                    self.params.tensors[i].shape, t.shape
                )));
            }
        }
        for (slot, (_, t)) in self.params.tensors.iter_mut().zip(named) {
            *slot = t.clone();
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, &self.params.tensors[id])
    }

    fn conv(&self, g: &mut Graph, l: ConvLayer, x: Var) -> Var {
        let (w, b) = (self.p(g, l.w), self.p(g, l.b));
        g.conv(x, w, b)
    }

    fn norm(&self, g: &mut Graph, l: NormLayer, x: Var) -> Var {
        let (gm, bt) = (self.p(g, l.gamma), self.p(g, l.beta));
        g.group_norm(x, gm, bt, NORM_GROUPS)
    }

    fn dense(&self, g: &mut Graph, l: DenseLayer, x: Var) -> Var {
        let (w, b) = (self.p(g, l.w), self.p(g, l.b));
        g.linear(x, w, b)
    }

    fn res(&self, g: &mut Graph, blk: ResBlock, x: Var, emb: Var) -> Var {
        let h = self.norm(g, blk.norm1, x);
        let h = g.silu(h);
        let h = self.conv(g, blk.conv1, h);
        let t = self.dense(g, blk.time, emb);
        let h = g.add_channel(h, t);
        let h = self.norm(g, blk.norm2, h);
        let h = g.silu(h);
        let h = self.conv(g, blk.conv2, h);
        let skip = match blk.skip {
            Some(s) => self.conv(g, s, x),
            None => x,
        };
        g.add(h, skip)
    }

    /// Records the forward pass for a batch `[n, 1, ps, ps]` into `g`.
    pub fn build(&self, g: &mut Graph, x: &Tensor, ts: &[usize]) -> Result<Var> {
        let ps = self.config.patch_size;
        if x.shape[1..] != [1, ps, ps] {
            return Err(Error::InvalidArgument(format!(
                "denoiser expects [n, 1, {ps}, {ps}] input, got {:?}",
                x.shape
            )));
        }
        if ts.len() != x.batch() {
            return Err(Error::InvalidArgument(format!(
                "{} timesteps for a batch of {}",
                ts.len(),
                x.batch()
            )));
        }
        let lay = &self.layout;
        let temb = g.input(timestep_embedding(ts, self.config.time_embed_dim));
        let e = self.dense(g, lay.time1, temb);
        let e = g.silu(e);
        let e = self.dense(g, lay.time2, e);
        let emb = g.silu(e);

        let xin = g.input(x.clone());
        let mut h = self.conv(g, lay.conv_in, xin);
        let depth = self.config.depth();
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            h = self.res(g, lay.down[l], h, emb);
            skips.push(h);
            if l + 1 < depth {
                h = g.avg_pool(h);
            }
        }
        h = self.res(g, lay.mid, h, emb);
        for l in (0..depth).rev() {
            if l + 1 < depth {
                h = g.upsample(h);
            }
            h = g.concat(h, skips[l]);
            h = self.res(g, lay.up[l], h, emb);
        }
        let h = self.norm(g, lay.norm_out, h);
        let h = g.silu(h);
        Ok(self.conv(g, lay.conv_out, h))
    }

    /// Noise prediction for a batch. Output has the input's shape.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.build(&mut g, x, ts)?;
        let y = g.value(out).clone();
        if !y.all_finite() {
            return Err(Error::NonFinite {
                timestep: ts.first().copied().unwrap_or(0),
                context: "denoiser produced non-finite activations".into(),
            });
        }
        Ok(y)
    }

    /// Mean squared error against `target` and its gradient for every parameter.
    pub fn loss_and_grad(&self, x: &Tensor, ts: &[usize], target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let out = self.build(&mut g, x, ts)?;
        let y = g.value(out);
        if y.shape != target.shape {
            return Err(Error::InvalidArgument("target shape differs from output".into()));
        }
        let n = y.len() as f64;
        let diff: Vec<f64> = y.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad_out = Tensor::from_vec(y.shape, diff.iter().map(|d| 2.0 * d / n).collect());
        let grads = g.backward(out, grad_out, self.params.len());
        let grads = grads
            .into_iter()
            .zip(&self.params.tensors)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape)))
            .collect();
        Ok((loss, grads))
    }

    /// Mean squared error only.
    pub fn loss(&self, x: &Tensor, ts: &[usize], target: &Tensor) -> Result<f64> {
        let y = self.forward(x, ts)?;
        let n = y.len() as f64;
        Ok(y.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }
}
