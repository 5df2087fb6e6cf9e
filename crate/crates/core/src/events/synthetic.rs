//! Synthetic day and night event scenes.
//!
//! Day scenes are rectangles moving at constant velocity; pixels whose
//! centre enters a rectangle fire one event of the rectangle's contrast
//! polarity and pixels it leaves fire the opposite polarity. Night scenes add
//! one-polarity bursts under light sources, uniform background noise and
//! positional jitter of the edge events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

/// Occupancy is sampled this many times per window.
const SUBSTEPS: usize = 48;

const STREAM_SHAPES: u64 = 0;
const STREAM_JITTER: u64 = 1;
const STREAM_LIGHTS: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Window length in seconds; events lie in `[0, window)`.
    pub window: f64,
    pub n_shapes: usize,
    pub night_light_count: usize,
    /// Background noise events per pixel per window.
    pub night_noise_rate: f64,
    /// Standard deviation of the positional jitter, pixels.
    pub edge_jitter_sigma: f64,
    /// Probability that a light-burst event is positive.
    pub polarity_bias: f64,
    /// Burst events per pixel per window inside a light disk.
    pub light_burst_rate: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            window: 0.1,
            n_shapes: 4,
            night_light_count: 3,
            night_noise_rate: 0.05,
            edge_jitter_sigma: 0.7,
            polarity_bias: 0.85,
            light_burst_rate: 1.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scene resolution {}x{} is below the 8x8 minimum",
                self.height, self.width
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("scene resolution exceeds 65535".into()));
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::Config(format!("window {} must be positive", self.window)));
        }
        if !(0.0..=1.0).contains(&self.polarity_bias) {
            return Err(Error::Config(format!(
                "polarity_bias {} outside [0, 1]",
                self.polarity_bias
            )));
        }
        for (name, v) in [
            ("night_noise_rate", self.night_noise_rate),
            ("edge_jitter_sigma", self.edge_jitter_sigma),
            ("light_burst_rate", self.light_burst_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be a non-negative number")));
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Axis-aligned rectangle translating at constant velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MovingRect {
    /// Top-left corner at the start of the window, pixels.
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    /// Displacement over one full window, pixels.
    pub vx: f64,
    pub vy: f64,
    /// Polarity fired by pixels the rectangle enters.
    pub contrast: Polarity,
}

impl MovingRect {
    /// Whether pixel `(col, row)`'s centre lies inside the rectangle at
    /// window fraction `tau`.
    fn covers(&self, col: i64, row: i64, tau: f64) -> bool {
        let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
        let left = self.x0 + self.vx * tau;
        let top = self.y0 + self.vy * tau;
        cx >= left && cx < left + self.w && cy >= top && cy < top + self.h
    }

    fn pixel_span(&self, tau0: f64, tau1: f64) -> (i64, i64, i64, i64) {
        let xs = [self.x0 + self.vx * tau0, self.x0 + self.vx * tau1];
        let ys = [self.y0 + self.vy * tau0, self.y0 + self.vy * tau1];
        let x_lo = xs[0].min(xs[1]).floor() as i64 - 1;
        let x_hi = (xs[0].max(xs[1]) + self.w).ceil() as i64 + 1;
        let y_lo = ys[0].min(ys[1]).floor() as i64 - 1;
        let y_hi = (ys[0].max(ys[1]) + self.h).ceil() as i64 + 1;
        (x_lo, x_hi, y_lo, y_hi)
    }
}

/// Draws `cfg.n_shapes` rectangles from the shape stream of `cfg.seed`.
pub fn sample_shapes(cfg: &SceneConfig) -> Vec<MovingRect> {
    let mut rng = cfg.rng(STREAM_SHAPES);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let side = w.min(h);
    let min_size = (side / 8.0).max(2.0);
    let max_size = (side / 4.0).max(3.0);
    (0..cfg.n_shapes)
        .map(|_| {
            let sw = rng.random_range(min_size..=max_size).round();
            let sh = rng.random_range(min_size..=max_size).round();
            let x0 = rng.random_range(-sw / 2.0..=w - sw / 2.0);
            let y0 = rng.random_range(-sh / 2.0..=h - sh / 2.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.1..=0.25) * side;
            let contrast = if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            MovingRect {
                x0,
                y0,
                w: sw,
                h: sh,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                contrast,
            }
        })
        .collect()
}

/// Edge events of `shapes` over one window, time-sorted.
pub fn render_shapes(cfg: &SceneConfig, shapes: &[MovingRect]) -> Result<EventStream> {
    cfg.validate()?;
    let mut events = edge_events(cfg, shapes);
    sort_events(&mut events);
    EventStream::new(cfg.width as u32, cfg.height as u32, 0.0, cfg.window, events)
}

fn edge_events(cfg: &SceneConfig, shapes: &[MovingRect]) -> Vec<Event> {
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let mut events = Vec::new();
    for shape in shapes {
        for k in 1..=SUBSTEPS {
            let tau0 = (k - 1) as f64 / SUBSTEPS as f64;
            let tau1 = k as f64 / SUBSTEPS as f64;
            let t = (k as f64 - 0.5) / SUBSTEPS as f64 * cfg.window;
            let (x_lo, x_hi, y_lo, y_hi) = shape.pixel_span(tau0, tau1);
            for row in y_lo.max(0)..=y_hi.min(h - 1) {
                for col in x_lo.max(0)..=x_hi.min(w - 1) {
                    let before = shape.covers(col, row, tau0);
                    let after = shape.covers(col, row, tau1);
                    let p = match (before, after) {
                        (false, true) => shape.contrast,
                        (true, false) => shape.contrast.flipped(),
                        _ => continue,
                    };
                    events.push(Event::new(col as u16, row as u16, t, p));
                }
            }
        }
    }
    events
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive Poisson mean");
    d.sample(rng) as usize
}

/// Balanced-polarity edge events of moving shapes; deterministic in the seed.
pub fn generate_day_scene(cfg: &SceneConfig) -> Result<EventStream> {
    cfg.validate()?;
    render_shapes(cfg, &sample_shapes(cfg))
}

/// The day scene for the same seed, plus light bursts, background noise and
/// edge jitter.
pub fn generate_night_scene(cfg: &SceneConfig) -> Result<EventStream> {
    cfg.validate()?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let clamp = |v: f64, hi: f64| v.round().clamp(0.0, hi - 1.0) as u16;
    let mut events = edge_events(cfg, &sample_shapes(cfg));

    if cfg.edge_jitter_sigma > 0.0 {
        let mut rng = cfg.rng(STREAM_JITTER);
        let normal = Normal::new(0.0, cfg.edge_jitter_sigma).expect("positive sigma");
        for e in events.iter_mut() {
            let dx: f64 = normal.sample(&mut rng);
            let dy: f64 = normal.sample(&mut rng);
            e.x = clamp(f64::from(e.x) + dx, w);
            e.y = clamp(f64::from(e.y) + dy, h);
        }
    }

    if cfg.night_light_count > 0 {
        let mut rng = cfg.rng(STREAM_LIGHTS);
        let side = w.min(h);
        let (r_lo, r_hi) = ((side / 16.0).max(1.5), (side / 8.0).max(2.5));
        for _ in 0..cfg.night_light_count {
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let r = rng.random_range(r_lo..=r_hi);
            let n = poisson(&mut rng, cfg.light_burst_rate * std::f64::consts::PI * r * r);
            for _ in 0..n {
                let (dx, dy) = loop {
                    let dx = rng.random_range(-r..=r);
                    let dy = rng.random_range(-r..=r);
                    if dx * dx + dy * dy <= r * r {
                        break (dx, dy);
                    }
                };
                let t = rng.random_range(0.0..cfg.window);
                let p = if rng.random_bool(cfg.polarity_bias) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                events.push(Event::new(clamp(cx + dx, w), clamp(cy + dy, h), t, p));
            }
        }
    }

    if cfg.night_noise_rate > 0.0 {
        let mut rng = cfg.rng(STREAM_NOISE);
        let n = poisson(&mut rng, cfg.night_noise_rate * w * h);
        for _ in 0..n {
            let x = rng.random_range(0..cfg.width) as u16;
            let y = rng.random_range(0..cfg.height) as u16;
            let t = rng.random_range(0.0..cfg.window);
            let p = if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            events.push(Event::new(x, y, t, p));
        }
    }

    sort_events(&mut events);
    EventStream::new(cfg.width as u32, cfg.height as u32, 0.0, cfg.window, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{bin_events, bin_index, Domain};

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            n_shapes: 3,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn day_scene_is_deterministic() {
        let a = generate_day_scene(&small(1)).unwrap();
        let b = generate_day_scene(&small(1)).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert_ne!(a, generate_day_scene(&small(2)).unwrap());
    }

    #[test]
    fn no_shapes_no_noise_is_empty() {
        let cfg = SceneConfig {
            n_shapes: 0,
            night_noise_rate: 0.0,
            ..small(3)
        };
        assert!(generate_day_scene(&cfg).unwrap().is_empty());
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        let cfg = SceneConfig {
            height: 7,
            ..small(0)
        };
        assert!(matches!(generate_day_scene(&cfg), Err(Error::Config(_))));
        let cfg = SceneConfig {
            polarity_bias: 1.5,
            ..small(0)
        };
        assert!(generate_night_scene(&cfg).is_err());
    }

    #[test]
    fn leading_edge_advances_one_column_per_bin() {
        // Bright 6x6 square, 3 px per window = 1 px per bin with B = 3.
        // Its right edge starts at column c0 so the centre of column c0 + b
        // is crossed at window fraction (2b + 1) / 6, the middle of bin b.
        let c0 = 12.0;
        let v = 3.0;
        let rect = MovingRect {
            x0: c0 - 6.0,
            y0: 10.0,
            w: 6.0,
            h: 6.0,
            vx: v,
            vy: 0.0,
            contrast: Polarity::Positive,
        };
        let cfg = small(0);
        let s = render_shapes(&cfg, &[rect]).unwrap();
        let right_edge = c0;
        for e in s.events().iter().filter(|e| e.p == Polarity::Positive) {
            let b = bin_index(e.t, 0.0, cfg.window, 3);
            // Closed-form crossing time of this column's centre.
            let tau = (f64::from(e.x) + 0.5 - right_edge) / v;
            assert_eq!(b, (tau * 3.0).floor() as usize);
            assert_eq!(f64::from(e.x), c0 + b as f64);
        }
        let h = bin_events(&s, 3, Domain::Day).unwrap();
        for b in 0..3 {
            for row in 10..16 {
                assert_eq!(h.get(2 * b, row, 12 + b), 1.0, "bin {b} row {row}");
            }
        }
        // Balanced: one leaving event per entering event.
        let (p, n) = h.polarity_totals();
        assert_eq!(p, n);
    }

    #[test]
    fn degenerate_night_equals_day() {
        let cfg = SceneConfig {
            night_noise_rate: 0.0,
            edge_jitter_sigma: 0.0,
            night_light_count: 0,
            ..small(5)
        };
        assert_eq!(
            generate_night_scene(&cfg).unwrap(),
            generate_day_scene(&cfg).unwrap()
        );
    }

    #[test]
    fn full_bias_makes_bursts_positive() {
        let cfg = SceneConfig {
            n_shapes: 0,
            night_noise_rate: 0.0,
            edge_jitter_sigma: 0.0,
            polarity_bias: 1.0,
            ..small(6)
        };
        let s = generate_night_scene(&cfg).unwrap();
        assert!(!s.is_empty());
        assert!(s.events().iter().all(|e| e.p == Polarity::Positive));
    }

    #[test]
    fn background_noise_matches_poisson_mean() {
        let seeds = 100;
        let mean = 0.1 * 32.0 * 32.0;
        let total: usize = (0..seeds)
            .map(|seed| {
                let cfg = SceneConfig {
                    n_shapes: 0,
                    night_light_count: 0,
                    edge_jitter_sigma: 0.0,
                    night_noise_rate: 0.1,
                    ..small(seed)
                };
                generate_night_scene(&cfg).unwrap().len()
            })
            .sum();
        let empirical = total as f64 / seeds as f64;
        let sigma = (mean / seeds as f64).sqrt();
        assert!(
            (empirical - mean).abs() <= 3.0 * sigma,
            "mean {empirical} vs {mean} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn night_is_more_imbalanced_than_day() {
        let (mut day, mut night) = (0.0, 0.0);
        for seed in 0..20 {
            let cfg = small(seed);
            day += bin_events(&generate_day_scene(&cfg).unwrap(), 3, Domain::Day)
                .unwrap()
                .polarity_imbalance();
            night += bin_events(&generate_night_scene(&cfg).unwrap(), 3, Domain::Night)
                .unwrap()
                .polarity_imbalance();
        }
        assert!(night > 2.0 * day, "night {night} day {day}");
    }
}
