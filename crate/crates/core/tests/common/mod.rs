#![allow(dead_code)]

use eventsb::events::{bin_events, generate_day_scene, generate_night_scene, Domain, EventHistogram, SceneConfig};

/// `n` synthetic histograms of side `size`; `offset` separates disjoint sets.
pub fn synthetic(n: usize, night: bool, size: usize, bins: usize, offset: u64) -> Vec<EventHistogram> {
    (0..n)
        .map(|i| {
            let sc = SceneConfig {
                height: size,
                width: size,
                seed: offset + 5000 * night as u64 + i as u64,
                ..SceneConfig::default()
            };
            let s = if night { generate_night_scene(&sc) } else { generate_day_scene(&sc) }.unwrap();
            bin_events(&s, bins, if night { Domain::Night } else { Domain::Day }).unwrap()
        })
        .collect()
}

pub fn mean_imbalance(set: &[EventHistogram]) -> f64 {
    set.iter().map(|h| h.polarity_imbalance()).sum::<f64>() / set.len() as f64
}
