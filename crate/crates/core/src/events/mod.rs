//! Event streams, multi-bin polarity histograms, synthetic scenes and the
//! `EVH1` / `EVS1` binary formats.

mod io;
mod synthetic;

pub use io::{
    decode_histogram, decode_stream, encode_histogram, encode_stream, read_histogram, read_stream,
    write_histogram, write_stream, HISTOGRAM_MAGIC, STREAM_MAGIC,
};
pub use synthetic::{
    generate_day_scene, generate_night_scene, render_shapes, sample_shapes, MovingRect,
    SceneConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bin counts the pipeline is configured for.
pub const SUPPORTED_BINS: [usize; 3] = [1, 3, 8];

pub fn check_supported_bins(bins: usize) -> Result<()> {
    if SUPPORTED_BINS.contains(&bins) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unsupported bin count {bins}; expected one of {SUPPORTED_BINS:?}"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Seconds.
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Time-sorted events from a `width x height` sensor over `[t_start, t_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
    t_start: f64,
    t_end: f64,
}

impl EventStream {
    pub fn new(
        width: u32,
        height: u32,
        t_start: f64,
        t_end: f64,
        events: Vec<Event>,
    ) -> Result<Self> {
        check_window(t_start, t_end)?;
        let mut prev = f64::NEG_INFINITY;
        for (index, e) in events.iter().enumerate() {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                    width,
                    height,
                });
            }
            if !(e.t >= t_start && e.t < t_end) {
                return Err(Error::InvalidEvent {
                    index,
                    reason: format!("timestamp {} outside window [{t_start}, {t_end})", e.t),
                });
            }
            if e.t < prev {
                return Err(Error::InvalidEvent {
                    index,
                    reason: format!("timestamp {} precedes previous event at {prev}", e.t),
                });
            }
            prev = e.t;
        }
        Ok(Self {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    pub fn empty(width: u32, height: u32, t_start: f64, t_end: f64) -> Result<Self> {
        Self::new(width, height, t_start, t_end, Vec::new())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn window(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

fn check_window(t_start: f64, t_end: f64) -> Result<()> {
    if t_end > t_start && t_start.is_finite() && t_end.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidWindow {
            start: t_start,
            end: t_end,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Day,
    Night,
    Translated,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Day => 0,
            Domain::Night => 1,
            Domain::Translated => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Domain::Day),
            1 => Some(Domain::Night),
            2 => Some(Domain::Translated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
            Domain::Translated => "translated",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Domain::Day),
            "night" => Ok(Domain::Night),
            "translated" => Ok(Domain::Translated),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

/// Event counts in `2B` channels (bin-major, positive before negative)
/// over an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EventHistogram {
    bins: usize,
    height: usize,
    width: usize,
    domain: Domain,
    data: Vec<f32>,
}

impl EventHistogram {
    pub fn zeros(bins: usize, height: usize, width: usize, domain: Domain) -> Self {
        Self {
            bins,
            height,
            width,
            domain,
            data: vec![0.0; 2 * bins * height * width],
        }
    }

    pub fn from_data(
        bins: usize,
        height: usize,
        width: usize,
        domain: Domain,
        data: Vec<f32>,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if data.len() != 2 * bins * height * width {
            return Err(Error::Shape(format!(
                "histogram payload has {} values, expected 2*{bins}*{height}*{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Shape(format!(
                "histogram entry {i} is {} (counts must be non-negative)",
                data[i]
            )));
        }
        Ok(Self {
            bins,
            height,
            width,
            domain,
            data,
        })
    }

    /// Builds a histogram from a `(2B, H, W)` tensor, clamping negatives to 0.
    pub fn from_tensor(t: &Tensor, domain: Domain) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] % 2 != 0 || s[0] == 0 {
            return Err(Error::Shape(format!(
                "expected (2B, H, W) tensor, got {s:?}"
            )));
        }
        let data = t.data().iter().map(|&v| v.max(0.0) as f32).collect();
        Self::from_data(s[0] / 2, s[1], s[2], domain, data)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        2 * self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    /// Total positive-channel and negative-channel mass.
    pub fn polarity_totals(&self) -> (f64, f64) {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for c in 0..self.channels() {
            let s: f64 = self.channel(c).iter().map(|&v| f64::from(v)).sum();
            if c % 2 == 0 {
                pos += s;
            } else {
                neg += s;
            }
        }
        (pos, neg)
    }

    /// `|P - N| / (P + N)`; zero for an empty histogram.
    pub fn polarity_imbalance(&self) -> f64 {
        let (p, n) = self.polarity_totals();
        if p + n <= 0.0 {
            0.0
        } else {
            (p - n).abs() / (p + n)
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.channels(), self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Counts clipped to `[0, cap]` and mapped linearly onto `[-1, 1]`.
    pub fn normalized(&self, cap: f64) -> Tensor {
        Tensor::new(
            &[self.channels(), self.height, self.width],
            self.data
                .iter()
                .map(|&v| f64::from(v).clamp(0.0, cap) / cap * 2.0 - 1.0)
                .collect(),
        )
    }

    /// Inverse of [`normalized`](Self::normalized), rounded to whole counts.
    pub fn from_normalized(t: &Tensor, cap: f64, domain: Domain) -> Result<Self> {
        let counts = t.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * cap).round());
        Self::from_tensor(&counts, domain)
    }
}

/// Temporal bin of timestamp `t` in `[t_start, t_end)` split into `bins`
/// right-open intervals; `t -> t_end` clamps to the last bin.
pub fn bin_index(t: f64, t_start: f64, t_end: f64, bins: usize) -> usize {
    let frac = (t - t_start) / (t_end - t_start);
    ((frac * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Voxelises a stream into `2B` polarity/bin channels of raw counts.
pub fn bin_events(stream: &EventStream, bins: usize, domain: Domain) -> Result<EventHistogram> {
    if bins == 0 {
        return Err(Error::Config("bin count must be at least 1".into()));
    }
    let (t0, t1) = stream.window();
    check_window(t0, t1)?;
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut hist = EventHistogram::zeros(bins, h, w, domain);
    for e in stream.events() {
        let b = bin_index(e.t, t0, t1, bins);
        let ch = 2 * b + usize::from(e.p == Polarity::Negative);
        hist.data[(ch * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(hist)
}
