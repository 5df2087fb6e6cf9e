//! Loss-curve and histogram renderings.

use std::io::Cursor;

use eventsb::events::EventHistogram;
use eventsb::objectives::LOSS_CSV_HEADER;
use image::{ImageFormat, Rgb, RgbImage};

use crate::failure::{CliResult, Failure};

pub const RED: Rgb<u8> = Rgb([220, 0, 0]);
pub const BLUE: Rgb<u8> = Rgb([0, 0, 220]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);

/// Loss columns in file order; `tc` is `None` where the term was skipped.
#[derive(Debug, Default, PartialEq)]
pub struct LossTable {
    pub names: Vec<String>,
    pub series: Vec<Vec<Option<f64>>>,
}

/// Parses a loss log; errors carry the 1-based line number.
pub fn parse_loss_csv(text: &str) -> CliResult<LossTable> {
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h.trim(),
        _ => return Err(Failure::data("line 1: loss CSV is empty")),
    };
    if header != LOSS_CSV_HEADER {
        return Err(Failure::data(format!("line 1: expected header {LOSS_CSV_HEADER:?}, found {header:?}")));
    }
    let names: Vec<String> = header.split(',').skip(2).map(str::to_string).collect();
    let mut series = vec![Vec::new(); names.len()];
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 2 {
            return Err(Failure::data(format!(
                "line {n}: expected {} fields, found {}",
                names.len() + 2,
                fields.len()
            )));
        }
        for f in &fields[..2] {
            f.trim()
                .parse::<usize>()
                .map_err(|_| Failure::data(format!("line {n}: {f:?} is not a non-negative integer")))?;
        }
        for (k, f) in fields[2..].iter().enumerate() {
            let f = f.trim();
            let v = if f == "skipped" {
                None
            } else {
                Some(f.parse::<f64>().map_err(|_| Failure::data(format!("line {n}: {f:?} is not a number")))?)
            };
            series[k].push(v);
        }
    }
    if series[0].is_empty() {
        return Err(Failure::data("line 2: loss CSV has no rows"));
    }
    Ok(LossTable { names, series })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

const PANEL_W: u32 = 600;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 8;

/// One stacked panel per loss column, each with its own y range.
pub fn render_losses(table: &LossTable) -> RgbImage {
    let colors = [
        Rgb([31, 119, 180]),
        Rgb([255, 127, 14]),
        Rgb([44, 160, 44]),
        Rgb([214, 39, 40]),
        Rgb([148, 103, 189]),
        Rgb([0, 0, 0]),
    ];
    let n = table.series.len() as u32;
    let mut img = RgbImage::from_pixel(PANEL_W, n * PANEL_H, WHITE);
    for (k, s) in table.series.iter().enumerate() {
        let top = k as u32 * PANEL_H;
        let (x0, x1) = (MARGIN, PANEL_W - MARGIN);
        let (y0, y1) = (top + MARGIN, top + PANEL_H - MARGIN);
        for x in x0..=x1 {
            img.put_pixel(x, y0, GREY);
            img.put_pixel(x, y1, GREY);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, GREY);
            img.put_pixel(x1, y, GREY);
        }
        let vals: Vec<f64> = s.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            continue;
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let len = s.len().max(2) - 1;
        let to_px = |i: usize, v: f64| {
            let x = x0 as f64 + 1.0 + (x1 - x0 - 2) as f64 * i as f64 / len as f64;
            let y = y1 as f64 - 1.0 - (y1 - y0 - 2) as f64 * (v - lo) / span;
            (x.round() as i64, y.round() as i64)
        };
        let mut prev = None;
        for (i, v) in s.iter().enumerate() {
            match v.filter(|v| v.is_finite()) {
                Some(v) => {
                    let p = to_px(i, v);
                    line(&mut img, prev.unwrap_or(p), p, colors[k % colors.len()]);
                    prev = Some(p);
                }
                None => prev = None,
            }
        }
    }
    img
}

/// One panel per bin, each cell a 2x2 block: top-left red where the
/// positive channel is nonzero, bottom-right blue where the negative one is.
pub fn render_histogram_bins(h: &EventHistogram) -> Vec<RgbImage> {
    (0..h.bins())
        .map(|b| {
            let mut img = RgbImage::from_pixel(2 * h.width() as u32, 2 * h.height() as u32, WHITE);
            for r in 0..h.height() {
                for c in 0..h.width() {
                    let (x, y) = (2 * c as u32, 2 * r as u32);
                    if h.get(2 * b, r, c) > 0.0 {
                        img.put_pixel(x, y, RED);
                    }
                    if h.get(2 * b + 1, r, c) > 0.0 {
                        img.put_pixel(x + 1, y + 1, BLUE);
                    }
                }
            }
            img
        })
        .collect()
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use eventsb::events::Domain;

    #[test]
    fn csv_errors_name_the_line() {
        assert!(parse_loss_csv("").unwrap_err().message.starts_with("line 1"));
        let head = LOSS_CSV_HEADER;
        assert!(parse_loss_csv(&format!("{head}\n")).unwrap_err().message.contains("no rows"));
        let bad = format!("{head}\n0,1,1,1,1,1,1,1\n1,2,1,x,1,1,1,1\n");
        assert!(parse_loss_csv(&bad).unwrap_err().message.starts_with("line 3"));
        let t = parse_loss_csv(&format!("{head}\n0,1,1,2,3,4,skipped,5\n")).unwrap();
        assert_eq!(t.series[4], vec![None]);
        assert_eq!(t.names.len(), 6);
    }

    #[test]
    fn colored_pixels_match_nonzero_cells() {
        let mut data = vec![0f32; 3 * 2 * 5 * 4];
        for (i, v) in data.iter_mut().enumerate() {
            if i % 3 == 0 || i % 7 == 0 {
                *v = (i % 4) as f32;
            }
        }
        let h = EventHistogram::from_data(3, 5, 4, Domain::Day, data).unwrap();
        let panels = render_histogram_bins(&h);
        assert_eq!(panels.len(), 3);
        for (b, img) in panels.iter().enumerate() {
            let count = |c: Rgb<u8>| img.pixels().filter(|&&p| p == c).count();
            let nz = |ch: usize| h.channel(ch).iter().filter(|&&v| v > 0.0).count();
            assert_eq!(count(RED), nz(2 * b));
            assert_eq!(count(BLUE), nz(2 * b + 1));
        }
    }
}
