//! Layer building blocks. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and runs against a [`Bound`] view of that store.

use rand::Rng;

use crate::autodiff::{Bound, ConvGeometry, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Group count used for a `channels`-wide group norm: the largest divisor
/// of `channels` up to 8 that still leaves two channels per group.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8)
        .rev()
        .find(|&g| channels % g == 0 && (channels / g >= 2 || g == 1))
        .unwrap_or(1)
}

fn uniform_param<R: Rng>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ParamId {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    store.add(name, Tensor::uniform(shape, bound, rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: uniform_param(store, format!("{name}.w"), &[cout, cin, kernel, kernel], fan_in, rng),
            bias: uniform_param(store, format!("{name}.b"), &[cout], fan_in, rng),
            geom: ConvGeometry::square2d(kernel, stride, pad),
        }
    }

    pub fn same<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, kernel, 1, kernel / 2, rng)
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv(p.get(self.weight), Some(p.get(self.bias)), self.geom)
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// 3-D convolution over `(C, D, H, W)` inputs.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv3d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let fan_in = cin * kd * kh * kw;
        Self {
            weight: uniform_param(store, format!("{name}.w"), &[cout, cin, kd, kh, kw], fan_in, rng),
            bias: uniform_param(store, format!("{name}.b"), &[cout], fan_in, rng),
            geom,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv(p.get(self.weight), Some(p.get(self.bias)), self.geom)
    }
}

/// Learned transposed convolution; `kernel 4, stride 2, pad 1` doubles H, W.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cout * kernel * kernel;
        Self {
            weight: uniform_param(store, format!("{name}.w"), &[cin, cout, kernel, kernel], fan_in, rng),
            bias: uniform_param(store, format!("{name}.b"), &[cout], fan_in, rng),
            geom: ConvGeometry::square2d(kernel, stride, pad),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv_transpose(p.get(self.weight), Some(p.get(self.bias)), self.geom)
    }
}

/// `y = x W + b` on `[n, in]` rows, or on a bare `[in]` vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_param(store, format!("{name}.w"), &[in_dim, out_dim], in_dim, rng),
            bias: uniform_param(store, format!("{name}.b"), &[out_dim], in_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let vector = x.shape().len() == 1;
        let rows = if vector { x.reshape(&[1, self.in_dim]) } else { x };
        let y = rows.matmul(p.get(self.weight)).add_bias_last(p.get(self.bias));
        if vector {
            y.reshape(&[self.out_dim])
        } else {
            y
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.group_norm(p.get(self.gamma), p.get(self.beta), self.groups, NORM_EPS)
    }
}

/// Sinusoidal features of a scalar position in `[0, 1]`.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    // Scale so that positions in [0, 1] sweep a useful range of frequencies.
    let pos = position * 1000.0;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / (half.max(2) - 1) as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (pos * f).sin()));
    out.extend(freqs.iter().map(|f| (pos * f).cos()));
    Tensor::new(&[dim], out)
}

/// Sinusoidal embedding followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub sin_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sin_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            sin_dim,
            fc1: Linear::new(store, &format!("{name}.fc1"), sin_dim, out_dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), out_dim, out_dim, rng),
        }
    }

    /// Embeds the normalised position `t` (timestep index over chain length).
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, t: f64) -> Var<'t> {
        let s = p.tape().constant(sinusoidal_embedding(t, self.sin_dim));
        self.fc2.forward(p, self.fc1.forward(p, s).silu())
    }
}

/// Pre-norm residual block with an additive time-embedding bias.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::same(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            time: Linear::new(store, &format!("{name}.time"), time_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::same(store, &format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, temb: Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(p, self.norm1.forward(p, x).silu());
        let h = h.add_bias_channel(self.time.forward(p, temb.silu()));
        let h = self.conv2.forward(p, self.norm2.forward(p, h).silu());
        let shortcut = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x,
        };
        h.add(shortcut)
    }

    /// Zeroes the last convolution so the block starts as its shortcut.
    pub fn zero_init_output(&self, store: &mut ParamStore) {
        self.conv2.zero_init(store);
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            qkv: Conv2d::same(store, &format!("{name}.qkv"), channels, 3 * channels, 1, rng),
            out: Conv2d::same(store, &format!("{name}.out"), channels, channels, 1, rng),
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let n = h * w;
        let qkv = self.qkv.forward(p, self.norm.forward(p, x));
        let q = qkv.narrow0(0, c).reshape(&[c, n]);
        let k = qkv.narrow0(c, c).reshape(&[c, n]);
        let v = qkv.narrow0(2 * c, c).reshape(&[c, n]);
        let attn = q
            .transpose()
            .matmul(k)
            .scale(1.0 / (c as f64).sqrt())
            .softmax_rows();
        let mixed = v.matmul(attn.transpose()).reshape(&[c, h, w]);
        x.add(self.out.forward(p, mixed))
    }

    pub fn zero_init_output(&self, store: &mut ParamStore) {
        self.out.zero_init(store);
    }
}

/// Two-layer MLP projection to unit-norm rows.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, out_dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), out_dim, out_dim, rng),
        }
    }

    /// `[S, in] -> [S, out]` with every row L2-normalised.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, rows: Var<'t>) -> Var<'t> {
        let h = self.fc1.forward(p, rows).relu();
        self.fc2.forward(p, h).l2_normalize_rows(1e-7)
    }
}
