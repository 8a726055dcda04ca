use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FRAME_CHANNELS: usize = 3;
pub const BASE_IN_CHANNELS: usize = 2 * FRAME_CHANNELS;
pub const CONTROL_IN_CHANNELS: usize = crate::conditioning::CONTROL_CHANNELS;
pub const TIME_SINUSOID_DIM: usize = 128;
const GN_EPS: f64 = 1e-5;

/// Shapes of the denoiser; enough to rebuild every parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub control_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_sinusoid_dim: usize,
    pub lora_rank: usize,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, base_channels: usize) -> Self {
        Self {
            height,
            width,
            in_channels: BASE_IN_CHANNELS,
            control_channels: CONTROL_IN_CHANNELS,
            base_channels,
            channel_mults: vec![1, 2, 4],
            blocks_per_level: 2,
            groups: 8,
            time_sinusoid_dim: TIME_SINUSOID_DIM,
            lora_rank: 8,
        }
    }

    pub fn with_lora_rank(mut self, rank: usize) -> Self {
        self.lora_rank = rank;
        self
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial divisor of the deepest level.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != BASE_IN_CHANNELS || self.control_channels != CONTROL_IN_CHANNELS {
            return Err(Error::Invalid(format!(
                "denoiser takes {BASE_IN_CHANNELS} base + {CONTROL_IN_CHANNELS} control channels, got {} + {}",
                self.in_channels, self.control_channels
            )));
        }
        if self.channel_mults.is_empty() || self.blocks_per_level == 0 || self.lora_rank == 0 {
            return Err(Error::Invalid("empty level list, block count or LoRA rank".into()));
        }
        if !self.time_sinusoid_dim.is_multiple_of(2) || self.time_sinusoid_dim == 0 {
            return Err(Error::Invalid("time sinusoid width must be even".into()));
        }
        for m in &self.channel_mults {
            if !(m * self.base_channels).is_multiple_of(self.groups) || *m == 0 {
                return Err(Error::Invalid(format!(
                    "{} channels not divisible into {} groups",
                    m * self.base_channels,
                    self.groups
                )));
            }
        }
        let f = self.downsample_factor();
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid(format!("resolution {}x{} not divisible by {f}", self.width, self.height)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Lora {
    a: ParamId,
    b: ParamId,
    rank: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    lora: Option<Lora>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    lora: Option<Lora>,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv,
    levels: Vec<Level>,
    mid: ResBlock,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Indexed by encoder level, deepest last.
    levels: Vec<Vec<ResBlock>>,
    norm_out: Norm,
    conv_out: Conv,
}

#[derive(Clone, Debug)]
struct ControlBranch {
    hint_in: Conv,
    hint_out: Conv,
    encoder: Encoder,
    skip_proj: Vec<Conv>,
    mid_proj: Conv,
}

/// Parameter ids of every layer; independent of the scalar type.
#[derive(Clone, Debug)]
pub struct Layout {
    time1: Dense,
    time2: Dense,
    encoder: Encoder,
    decoder: Decoder,
    control: ControlBranch,
}

struct Builder<'a, T: Scalar, R: Rng> {
    ps: &'a mut ParamStore<T>,
    rng: &'a mut R,
    lora_rank: Option<usize>,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn lora(&mut self, name: &str, out: usize, fan_in: usize) -> Result<Option<Lora>> {
        let Some(rank) = self.lora_rank else { return Ok(None) };
        let a = self.ps.fan_in(format!("lora.{name}.a"), &[rank, fan_in], fan_in, self.rng)?;
        let b = self.ps.zeros(format!("lora.{name}.b"), &[out, rank])?;
        Ok(Some(Lora { a, b, rank }))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Conv> {
        let fan_in = cin * k * k;
        let shape = [cout, cin, k, k];
        let w = if zero {
            self.ps.zeros(format!("{name}.weight"), &shape)?
        } else {
            self.ps.fan_in(format!("{name}.weight"), &shape, fan_in, self.rng)?
        };
        let b = self.ps.zeros(format!("{name}.bias"), &[cout])?;
        let lora = self.lora(name, cout, fan_in)?;
        Ok(Conv { w, b, lora, stride, pad: (k - 1) / 2 })
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Result<Dense> {
        let w = self.ps.fan_in(format!("{name}.weight"), &[fout, fin], fin, self.rng)?;
        let b = self.ps.zeros(format!("{name}.bias"), &[fout])?;
        let lora = self.lora(name, fout, fin)?;
        Ok(Dense { w, b, lora })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm { g: self.ps.ones(format!("{name}.gamma"), &[c])?, b: self.ps.zeros(format!("{name}.beta"), &[c])? })
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false)?,
            temb: self.dense(&format!("{name}.temb"), tdim, cout)?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false)?,
            skip: if cin == cout { None } else { Some(self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)?) },
        })
    }

    fn encoder(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<Encoder> {
        let tdim = cfg.time_dim();
        let c0 = cfg.base_channels;
        let conv_in = self.conv(&format!("{prefix}.conv_in"), cfg.in_channels, c0, 3, 1, false)?;
        let mut levels = Vec::new();
        let mut ch = c0;
        for (l, m) in cfg.channel_mults.iter().enumerate() {
            let cout = m * c0;
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_level {
                blocks.push(self.res(&format!("{prefix}.down{l}.res{i}"), ch, cout, tdim)?);
                ch = cout;
            }
            let down = if l + 1 < cfg.channel_mults.len() {
                Some(self.conv(&format!("{prefix}.down{l}.downsample"), ch, ch, 3, 2, false)?)
            } else {
                None
            };
            levels.push(Level { blocks, down });
        }
        let mid = self.res(&format!("{prefix}.mid"), ch, ch, tdim)?;
        Ok(Encoder { conv_in, levels, mid })
    }
}

impl Layout {
    /// Registers all parameters in `ps`. Names: `base.*` for the UNet,
    /// `ctrl.*` for the control branch, `lora.base.*` for adapters.
    pub fn build<T: Scalar, R: Rng>(cfg: &ModelConfig, ps: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { ps, rng, lora_rank: Some(cfg.lora_rank) };
        let tdim = cfg.time_dim();
        let c0 = cfg.base_channels;
        let time1 = b.dense("base.time.linear1", cfg.time_sinusoid_dim, tdim)?;
        let time2 = b.dense("base.time.linear2", tdim, tdim)?;
        let encoder = b.encoder("base.enc", cfg)?;
        let chans: Vec<usize> = cfg.channel_mults.iter().map(|m| m * c0).collect();
        let top = chans.len() - 1;
        let mut dec_levels = vec![Vec::new(); chans.len()];
        for l in (0..chans.len()).rev() {
            let below = if l == top { chans[top] } else { chans[l + 1] };
            let mut ch = below + chans[l];
            for i in 0..cfg.blocks_per_level {
                dec_levels[l].push(b.res(&format!("base.dec.up{l}.res{i}"), ch, chans[l], tdim)?);
                ch = chans[l];
            }
        }
        let norm_out = b.norm("base.dec.norm_out", c0)?;
        let conv_out = b.conv("base.dec.conv_out", c0, FRAME_CHANNELS, 3, 1, true)?;
        let decoder = Decoder { levels: dec_levels, norm_out, conv_out };

        b.lora_rank = None;
        let hint_in = b.conv("ctrl.hint.conv1", cfg.control_channels, c0, 3, 1, false)?;
        let hint_out = b.conv("ctrl.hint.conv2", c0, c0, 3, 1, false)?;
        let ctrl_enc = b.encoder("ctrl.enc", cfg)?;
        let mut skip_proj = Vec::new();
        for (l, &c) in chans.iter().enumerate() {
            skip_proj.push(b.conv(&format!("ctrl.zero{l}"), c, c, 1, 1, true)?);
        }
        let mid_proj = b.conv("ctrl.zero_mid", chans[top], chans[top], 1, 1, true)?;
        let control = ControlBranch { hint_in, hint_out, encoder: ctrl_enc, skip_proj, mid_proj };
        Ok(Layout { time1, time2, encoder, decoder, control })
    }

    /// Ids of the zero-initialized connections between control and base.
    pub fn zero_connections(&self) -> Vec<ParamId> {
        let c = &self.control;
        let mut ids = vec![c.mid_proj.w, c.mid_proj.b];
        for p in &c.skip_proj {
            ids.extend([p.w, p.b]);
        }
        ids
    }
}

/// Which parts of the network take part in a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardFlags {
    pub lora: bool,
    pub record: bool,
}

struct Fwd<'a, T: Scalar> {
    ps: &'a ParamStore<T>,
    flags: ForwardFlags,
    groups: usize,
}

impl<T: Scalar> Fwd<'_, T> {
    fn p(&self, id: ParamId) -> Var<T> {
        self.ps.var(id, self.flags.record)
    }

    fn weight(&self, w: ParamId, lora: Option<Lora>) -> Result<Var<T>> {
        let base = self.p(w);
        match lora {
            Some(l) if self.flags.lora => {
                let delta = ops::matmul(&self.p(l.b), &self.p(l.a))?;
                let delta = ops::reshape(&delta, base.shape())?;
                let delta = ops::scale(&delta, T::from_f64_lossy(1.0 / l.rank as f64));
                ops::add(&base, &delta)
            }
            _ => Ok(base),
        }
    }

    fn conv(&self, c: &Conv, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weight(c.w, c.lora)?;
        ops::conv2d(x, &w, Some(&self.p(c.b)), c.stride, c.pad)
    }

    fn dense(&self, d: &Dense, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weight(d.w, d.lora)?;
        ops::linear(x, &w, &self.p(d.b))
    }

    fn norm_act(&self, n: &Norm, x: &Var<T>) -> Result<Var<T>> {
        let y = ops::group_norm(x, &self.p(n.g), &self.p(n.b), self.groups, GN_EPS)?;
        Ok(ops::silu(&y))
    }

    fn res(&self, r: &ResBlock, x: &Var<T>, temb: &Var<T>) -> Result<Var<T>> {
        let h = self.conv(&r.conv1, &self.norm_act(&r.norm1, x)?)?;
        let h = ops::add_channel_bias(&h, &self.dense(&r.temb, temb)?)?;
        let h = self.conv(&r.conv2, &self.norm_act(&r.norm2, &h)?)?;
        let skip = match &r.skip {
            Some(c) => self.conv(c, x)?,
            None => x.clone(),
        };
        ops::add(&skip, &h)
    }

    /// Returns per-level features (before downsampling) and the mid output.
    fn encode(&self, e: &Encoder, x: &Var<T>, hint: Option<&Var<T>>, temb: &Var<T>) -> Result<(Vec<Var<T>>, Var<T>)> {
        let mut h = self.conv(&e.conv_in, x)?;
        if let Some(hint) = hint {
            h = ops::add(&h, hint)?;
        }
        let mut skips = Vec::with_capacity(e.levels.len());
        for level in &e.levels {
            for b in &level.blocks {
                h = self.res(b, &h, temb)?;
            }
            skips.push(h.clone());
            if let Some(d) = &level.down {
                h = self.conv(d, &h)?;
            }
        }
        let mid = self.res(&e.mid, &h, temb)?;
        Ok((skips, mid))
    }
}

/// `[N, dim]` sinusoidal embedding of integer timesteps.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[ts.len(), dim]);
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.data_mut()[i * dim + k] = T::from_f64_lossy(arg.sin());
            out.data_mut()[i * dim + half + k] = T::from_f64_lossy(arg.cos());
        }
    }
    out
}

/// Forward pass of the full denoiser against an explicit parameter store.
///
/// `x_t` and `prev` are `[N,3,H,W]` in `[-1,1]`; `control` is `[N,10,H,W]`.
pub(crate) fn forward<T: Scalar>(
    layout: &Layout,
    cfg: &ModelConfig,
    ps: &ParamStore<T>,
    x_t: &Var<T>,
    ts: &[usize],
    prev: &Var<T>,
    control: Option<&Var<T>>,
    flags: ForwardFlags,
) -> Result<Var<T>> {
    let (n, h, w) = match *x_t.shape() {
        [n, c, h, w] if c == FRAME_CHANNELS => (n, h, w),
        ref s => return Err(Error::Shape(format!("x_t must be [N,3,H,W], got {s:?}"))),
    };
    prev.value().expect_shape(&[n, FRAME_CHANNELS, h, w])?;
    if let Some(c) = control {
        c.value().expect_shape(&[n, cfg.control_channels, h, w])?;
    }
    if ts.len() != n {
        return Err(Error::Shape(format!("{} timesteps for a batch of {n}", ts.len())));
    }
    let f = cfg.downsample_factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("resolution {w}x{h} not divisible by {f}")));
    }
    let fw = Fwd { ps, flags, groups: cfg.groups };
    let sinus = Var::constant(timestep_embedding(ts, cfg.time_sinusoid_dim));
    let temb = fw.dense(&layout.time2, &ops::silu(&fw.dense(&layout.time1, &sinus)?))?;
    let temb = ops::silu(&temb);

    let input = ops::concat_channels(&[x_t, prev])?;
    let (mut skips, mut h) = fw.encode(&layout.encoder, &input, None, &temb)?;

    if let Some(c) = control {
        let cb = &layout.control;
        let hint = fw.conv(&cb.hint_out, &ops::silu(&fw.conv(&cb.hint_in, c)?))?;
        let ctrl = Fwd { flags: ForwardFlags { lora: false, ..flags }, ..fw };
        let (cskips, cmid) = ctrl.encode(&cb.encoder, &input, Some(&hint), &temb)?;
        for ((s, cs), proj) in skips.iter_mut().zip(&cskips).zip(&cb.skip_proj) {
            *s = ops::add(s, &ctrl.conv(proj, cs)?)?;
        }
        h = ops::add(&h, &ctrl.conv(&cb.mid_proj, &cmid)?)?;
    }

    let dec = &layout.decoder;
    for l in (0..dec.levels.len()).rev() {
        h = ops::concat_channels(&[&h, &skips[l]])?;
        for b in &dec.levels[l] {
            h = fw.res(b, &h, &temb)?;
        }
        if l > 0 {
            h = ops::upsample2x(&h)?;
        }
    }
    fw.conv(&dec.conv_out, &fw.norm_act(&dec.norm_out, &h)?)
}
