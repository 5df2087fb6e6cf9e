//! Generator, critic, contrastive heads and metric feature extractors.

mod extractor;

pub use extractor::{Certification, ExtractorConfig, ExtractorKind, FeatureExtractor, FEATURE_DIM};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, ConvTranspose2d, GroupNorm, Linear, ProjectionHead, ResBlock, TimeEmbedding};
use crate::wavelet::{dwt2_var, idwt2_var, SubbandVars};

/// Default base width for a given temporal bin count.
pub fn default_base_channels(bins: usize) -> usize {
    match bins {
        1 => 64,
        3 => 72,
        _ => 96,
    }
}

fn default_mults(levels: usize) -> Vec<usize> {
    (0..levels).map(|l| 1 << (l / 2)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub bins: usize,
    pub scale_levels: usize,
    pub base_channels: usize,
    /// Width multiplier per scale; `C_l = base_channels * channel_mults[l]`.
    pub channel_mults: Vec<usize>,
    pub downsample_count: usize,
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    /// Chain length M; valid timestep indices are `0..M`.
    pub timesteps: usize,
}

impl GeneratorConfig {
    pub fn for_bins(bins: usize) -> Self {
        Self {
            bins,
            scale_levels: 5,
            base_channels: default_base_channels(bins),
            channel_mults: default_mults(5),
            downsample_count: 3,
            latent_dim: 8,
            time_embed_dim: 64,
            timesteps: 5,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Scales (0-based) whose global block halves the resolution. The first
    /// and last scales never downsample.
    pub fn downsamples_after(&self, level: usize) -> bool {
        level >= 1 && level <= self.downsample_count
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        // Extra factor keeps the bottleneck even for the wavelet split.
        1 << (self.downsample_count + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if self.scale_levels == 0 {
            return bad("scale_levels must be at least 1".into());
        }
        if self.channel_mults.len() != self.scale_levels {
            return bad(format!(
                "channel_mults has {} entries for {} scales",
                self.channel_mults.len(),
                self.scale_levels
            ));
        }
        if self.downsample_count + 2 > self.scale_levels {
            return bad(format!(
                "downsample_count {} exceeds scale_levels - 2 = {}",
                self.downsample_count,
                self.scale_levels.saturating_sub(2)
            ));
        }
        for l in 0..self.scale_levels {
            let c = self.channels(l);
            if c == 0 || c % self.bins != 0 {
                return bad(format!(
                    "scale {} has {c} channels, not divisible by {} bins",
                    l + 1,
                    self.bins
                ));
            }
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        Ok(())
    }

    fn check_timestep(&self, t_i: usize) -> Result<()> {
        if t_i >= self.timesteps {
            return Err(Error::Index(format!(
                "timestep {t_i} out of range 0..{}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Outputs of the encoder.
pub struct Encoding<'t> {
    /// Per-scale inputs `F_l` to the disentangled stage.
    pub inputs: Vec<Var<'t>>,
    /// Per-scale concatenated disentangled outputs, used for skips and
    /// contrastive sampling.
    pub features: Vec<Var<'t>>,
    /// Output of the last global block.
    pub bottleneck: Var<'t>,
}

pub struct GeneratorOutput<'t> {
    pub x1: Var<'t>,
    pub z_hat: Var<'t>,
}

/// Time-conditional U-Net whose encoder keeps temporal bins in separate
/// channel groups until each scale's global block.
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    time: TimeEmbedding,
    input_proj: Vec<Conv2d>,
    groups: Vec<Vec<ResBlock>>,
    global: Vec<Conv2d>,
    latent_in: Conv2d,
    spatial_block: ResBlock,
    spatial_attn: Attention,
    hh_block: ResBlock,
    dec_blocks: Vec<ResBlock>,
    dec_up: Vec<Option<Up>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    z_conv1: Conv2d,
    z_conv2: Conv2d,
    z_fc: Linear,
}

enum Up {
    Transposed(ConvTranspose2d),
    Same(Conv2d),
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let b = config.bins;
        let levels = config.scale_levels;
        let td = config.time_embed_dim;
        let time = TimeEmbedding::new(&mut s, "time", td, td, rng);
        let c1 = config.channels(0) / b;
        let input_proj = (0..b)
            .map(|g| Conv2d::same(&mut s, &format!("enc.in.g{g}"), 2, c1, 3, rng))
            .collect();
        let mut groups = Vec::with_capacity(levels);
        let mut global = Vec::with_capacity(levels);
        for l in 0..levels {
            let cg = config.channels(l) / b;
            groups.push(
                (0..b)
                    .map(|g| ResBlock::new(&mut s, &format!("enc.l{l}.g{g}"), cg, cg, td, rng))
                    .collect(),
            );
            let cin = config.channels(l);
            let cout = config.channels((l + 1).min(levels - 1));
            let name = format!("enc.l{l}.global");
            global.push(if config.downsamples_after(l) {
                Conv2d::new(&mut s, &name, cin, cout, 4, 2, 1, rng)
            } else {
                Conv2d::same(&mut s, &name, cin, cout, 3, rng)
            });
        }
        let cl = config.channels(levels - 1);
        let latent_in = Conv2d::same(&mut s, "mid.latent", cl + config.latent_dim, cl, 1, rng);
        let spatial_block = ResBlock::new(&mut s, "mid.spatial", cl, cl, td, rng);
        let spatial_attn = Attention::new(&mut s, "mid.attn", cl, rng);
        let hh_block = ResBlock::new(&mut s, "mid.hh", cl, cl, td, rng);
        let mut dec_blocks = Vec::with_capacity(levels);
        let mut dec_up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = config.channels(l);
            dec_blocks.push(ResBlock::new(&mut s, &format!("dec.l{l}"), 2 * c, c, td, rng));
            dec_up.push(if l == 0 {
                None
            } else {
                let cprev = config.channels(l - 1);
                let name = format!("dec.l{l}.up");
                Some(if config.downsamples_after(l - 1) {
                    Up::Transposed(ConvTranspose2d::new(&mut s, &name, c, cprev, 4, 2, 1, rng))
                } else {
                    Up::Same(Conv2d::same(&mut s, &name, c, cprev, 3, rng))
                })
            });
        }
        let c0 = config.channels(0);
        let out_norm = GroupNorm::new(&mut s, "dec.out.norm", c0);
        let out_conv = Conv2d::same(&mut s, "dec.out.conv", c0, 2 * b, 3, rng);
        let z_conv1 = Conv2d::new(&mut s, "zhead.conv1", 2 * b, 16, 4, 2, 1, rng);
        let z_conv2 = Conv2d::new(&mut s, "zhead.conv2", 16, 32, 4, 2, 1, rng);
        let z_fc = Linear::new(&mut s, "zhead.fc", 32, config.latent_dim, rng);
        Ok(Self {
            config,
            params: s,
            time,
            input_proj,
            groups,
            global,
            latent_in,
            spatial_block,
            spatial_attn,
            hh_block,
            dec_blocks,
            dec_up,
            out_norm,
            out_conv,
            z_conv1,
            z_conv2,
            z_fc,
        })
    }

    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> Bound<'t, 's> {
        Bound::new(tape, &self.params, trainable)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zeroes the last layer of both bottleneck branches, making the
    /// bottleneck compute `2F`.
    pub fn zero_init_bottleneck(&mut self) {
        self.spatial_block.zero_init_output(&mut self.params);
        self.spatial_attn.zero_init_output(&mut self.params);
        self.hh_block.zero_init_output(&mut self.params);
    }

    /// Time embedding for chain step `t_i`.
    pub fn time_embedding<'t>(&self, p: &Bound<'t, '_>, t_i: usize) -> Result<Var<'t>> {
        self.config.check_timestep(t_i)?;
        Ok(self.time.forward(p, t_i as f64 / self.config.timesteps as f64))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        if shape.len() != 3 || shape[0] != 2 * self.config.bins {
            return Err(Error::Shape(format!(
                "expected ({}, H, W) input, got {shape:?}",
                2 * self.config.bins
            )));
        }
        if shape[1] % m != 0 || shape[2] % m != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} must be positive multiples of {m}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    /// Runs the per-bin blocks of scale `level` on `f` and returns one
    /// output per channel group.
    pub fn disentangled_stage<'t>(&self, p: &Bound<'t, '_>, level: usize, f: Var<'t>, temb: Var<'t>) -> Vec<Var<'t>> {
        let blocks = &self.groups[level];
        let cg = f.shape()[0] / blocks.len();
        blocks
            .iter()
            .enumerate()
            .map(|(g, blk)| blk.forward(p, f.narrow0(g * cg, cg), temb))
            .collect()
    }

    pub fn encode<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, temb: Var<'t>) -> Result<Encoding<'t>> {
        self.check_input(&x.shape())?;
        let first: Vec<Var<'t>> = self
            .input_proj
            .iter()
            .enumerate()
            .map(|(g, conv)| conv.forward(p, x.narrow0(2 * g, 2)))
            .collect();
        let mut f = Var::cat0(&first);
        let levels = self.config.scale_levels;
        let mut inputs = Vec::with_capacity(levels);
        let mut features = Vec::with_capacity(levels);
        for l in 0..levels {
            inputs.push(f);
            let ft = Var::cat0(&self.disentangled_stage(p, l, f, temb));
            features.push(ft);
            f = self.global[l].forward(p, ft);
        }
        Ok(Encoding {
            inputs,
            features,
            bottleneck: f,
        })
    }

    /// Concatenates the broadcast latent and mixes it back to the bottleneck width.
    pub fn inject_latent<'t>(&self, p: &Bound<'t, '_>, f: Var<'t>, z: Var<'t>) -> Var<'t> {
        let s = f.shape();
        let zmap = z.expand_spatial(s[1], s[2]);
        self.latent_in.forward(p, Var::cat0(&[f, zmap]))
    }

    /// Sum of a spatial branch (residual block and attention) and a
    /// frequency branch that only rewrites the HH subband.
    pub fn bottleneck<'t>(&self, p: &Bound<'t, '_>, f: Var<'t>, temb: Var<'t>) -> Result<Var<'t>> {
        let bands = dwt2_var(f)?;
        let spatial = self.spatial_attn.forward(p, self.spatial_block.forward(p, f, temb));
        let hh = self.hh_block.forward(p, bands.hh, temb);
        let freq = idwt2_var(SubbandVars { hh, ..bands })?;
        Ok(spatial.add(freq))
    }

    pub fn decode<'t>(&self, p: &Bound<'t, '_>, mut h: Var<'t>, skips: &[Var<'t>], temb: Var<'t>) -> Var<'t> {
        let levels = self.config.scale_levels;
        for (i, (blk, up)) in self.dec_blocks.iter().zip(&self.dec_up).enumerate() {
            let l = levels - 1 - i;
            h = blk.forward(p, Var::cat0(&[h, skips[l]]), temb);
            if let Some(up) = up {
                h = match up {
                    Up::Transposed(c) => c.forward(p, h),
                    Up::Same(c) => c.forward(p, h),
                }
                .silu();
            }
        }
        self.out_conv.forward(p, self.out_norm.forward(p, h).silu()).tanh()
    }

    /// Estimates the latent from a generated sample.
    pub fn latent_head<'t>(&self, p: &Bound<'t, '_>, x1: Var<'t>) -> Var<'t> {
        let h = self.z_conv1.forward(p, x1).leaky_relu(0.2);
        let h = self.z_conv2.forward(p, h).leaky_relu(0.2);
        self.z_fc.forward(p, h.mean_trailing())
    }

    /// Predicts the target-domain endpoint from `x_t` at step `t_i` with latent `z`.
    pub fn generate<'t>(&self, p: &Bound<'t, '_>, x_t: Var<'t>, t_i: usize, z: Var<'t>) -> Result<GeneratorOutput<'t>> {
        if z.shape() != [self.config.latent_dim] {
            return Err(Error::Shape(format!(
                "latent must have shape [{}], got {:?}",
                self.config.latent_dim,
                z.shape()
            )));
        }
        let temb = self.time_embedding(p, t_i)?;
        let enc = self.encode(p, x_t, temb)?;
        let mid = self.inject_latent(p, enc.bottleneck, z);
        let mid = self.bottleneck(p, mid, temb)?;
        let x1 = self.decode(p, mid, &enc.features, temb);
        let z_hat = self.latent_head(p, x1);
        Ok(GeneratorOutput { x1, z_hat })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub bins: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub timesteps: usize,
}

impl CriticConfig {
    pub fn for_bins(bins: usize) -> Self {
        Self {
            bins,
            base_channels: 64,
            time_embed_dim: 64,
            timesteps: 5,
        }
    }

    /// Number of stride-2 stages; score maps are `H / 2^STAGES`.
    pub const STAGES: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.base_channels == 0 || self.timesteps == 0 {
            return Err(Error::Config("critic dims must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("critic time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Time-conditional patch critic.
pub struct Critic {
    pub config: CriticConfig,
    pub params: ParamStore,
    time: TimeEmbedding,
    convs: Vec<Conv2d>,
    norms: Vec<Option<GroupNorm>>,
    time_proj: Vec<Linear>,
    head: Conv2d,
}

impl Critic {
    pub fn new<R: Rng>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let td = config.time_embed_dim;
        let time = TimeEmbedding::new(&mut s, "time", td, td, rng);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut time_proj = Vec::new();
        let mut cin = 2 * config.bins;
        for k in 0..CriticConfig::STAGES {
            let cout = config.base_channels << k;
            convs.push(Conv2d::new(&mut s, &format!("stage{k}.conv"), cin, cout, 4, 2, 1, rng));
            norms.push((k > 0).then(|| GroupNorm::new(&mut s, &format!("stage{k}.norm"), cout)));
            time_proj.push(Linear::new(&mut s, &format!("stage{k}.time"), td, cout, rng));
            cin = cout;
        }
        let head = Conv2d::same(&mut s, "head", cin, 1, 3, rng);
        Ok(Self {
            config,
            params: s,
            time,
            convs,
            norms,
            time_proj,
            head,
        })
    }

    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> Bound<'t, 's> {
        Bound::new(tape, &self.params, trainable)
    }

    /// Patch score map of shape `(1, H/8, W/8)`.
    pub fn criticize<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, t_i: usize) -> Result<Var<'t>> {
        let s = x.shape();
        let m = 1 << CriticConfig::STAGES;
        if s.len() != 3 || s[0] != 2 * self.config.bins || s[1] % m != 0 || s[2] % m != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!(
                "critic expects ({}, H, W) with H, W multiples of {m}, got {s:?}",
                2 * self.config.bins
            )));
        }
        if t_i >= self.config.timesteps {
            return Err(Error::Index(format!(
                "timestep {t_i} out of range 0..{}",
                self.config.timesteps
            )));
        }
        let temb = self
            .time
            .forward(p, t_i as f64 / self.config.timesteps as f64)
            .silu();
        let mut h = x;
        for ((conv, norm), tp) in self.convs.iter().zip(&self.norms).zip(&self.time_proj) {
            h = conv.forward(p, h);
            if let Some(n) = norm {
                h = n.forward(p, h);
            }
            h = h.add_bias_channel(tp.forward(p, temb)).leaky_relu(0.2);
        }
        Ok(self.head.forward(p, h))
    }
}

/// Per-scale projection heads for the spatial and temporal contrastive
/// losses.
pub struct FeatureHeads {
    pub params: ParamStore,
    pub embed_dim: usize,
    spatial: Vec<ProjectionHead>,
    temporal: Vec<ProjectionHead>,
}

impl FeatureHeads {
    /// `channels[l]` is the width of the encoder features at scale `l`.
    pub fn new<R: Rng>(channels: &[usize], embed_dim: usize, rng: &mut R) -> Self {
        let mut s = ParamStore::new();
        let spatial = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ProjectionHead::new(&mut s, &format!("sc.l{l}"), c, embed_dim, rng))
            .collect();
        let temporal = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ProjectionHead::new(&mut s, &format!("tc.l{l}"), c, embed_dim, rng))
            .collect();
        Self {
            params: s,
            embed_dim,
            spatial,
            temporal,
        }
    }

    pub fn for_generator<R: Rng>(cfg: &GeneratorConfig, embed_dim: usize, rng: &mut R) -> Self {
        let channels: Vec<usize> = (0..cfg.scale_levels).map(|l| cfg.channels(l)).collect();
        Self::new(&channels, embed_dim, rng)
    }

    pub fn levels(&self) -> usize {
        self.spatial.len()
    }

    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> Bound<'t, 's> {
        Bound::new(tape, &self.params, trainable)
    }

    /// `[S, C_l]` rows to `[S, embed_dim]` unit vectors.
    pub fn spatial<'t>(&self, p: &Bound<'t, '_>, level: usize, rows: Var<'t>) -> Var<'t> {
        self.spatial[level].forward(p, rows)
    }

    pub fn temporal<'t>(&self, p: &Bound<'t, '_>, level: usize, rows: Var<'t>) -> Var<'t> {
        self.temporal[level].forward(p, rows)
    }
}
