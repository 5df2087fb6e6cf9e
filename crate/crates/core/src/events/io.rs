//! Little-endian binary formats.
//!
//! `EVH1`: magic | u32 B | u32 H | u32 W | u8 domain tag | 2·B·H·W f32
//! values in (channel, row, column) order.
//!
//! `EVS1`: magic | u32 W | u32 H | f64 t_start | f64 t_end | events, each
//! u16 x | u16 y | f64 t | i8 p.

use std::path::Path;

use super::{Domain, Event, EventHistogram, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const HISTOGRAM_MAGIC: &[u8; 4] = b"EVH1";
pub const STREAM_MAGIC: &[u8; 4] = b"EVS1";

const HISTOGRAM_HEADER: usize = 4 + 12 + 1;
const STREAM_HEADER: usize = 4 + 8 + 16;
const STREAM_RECORD: usize = 2 + 2 + 8 + 1;

pub fn encode_histogram(h: &EventHistogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HISTOGRAM_HEADER + 4 * h.data().len());
    out.extend_from_slice(HISTOGRAM_MAGIC);
    out.extend_from_slice(&(h.bins() as u32).to_le_bytes());
    out.extend_from_slice(&(h.height() as u32).to_le_bytes());
    out.extend_from_slice(&(h.width() as u32).to_le_bytes());
    out.push(h.domain().tag());
    for v in h.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Sequential little-endian reader that reports byte offsets in errors.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }
}

pub fn decode_histogram(buf: &[u8]) -> Result<EventHistogram> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(HISTOGRAM_MAGIC)?;
    let bins = c.u32("bin count")? as usize;
    let height = c.u32("height")? as usize;
    let width = c.u32("width")? as usize;
    if bins == 0 {
        return Err(Error::format(4, "bin count must be at least 1"));
    }
    let tag_at = c.pos as u64;
    let tag = c.take(1, "domain tag")?[0];
    let domain =
        Domain::from_tag(tag).ok_or_else(|| Error::format(tag_at, format!("unknown domain tag {tag}")))?;
    let n = 2usize
        .checked_mul(bins)
        .and_then(|v| v.checked_mul(height))
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(4, "histogram dimensions overflow"))?;
    let payload_at = c.pos;
    let payload = c.take(n * 4, "payload")?;
    if c.pos != buf.len() {
        return Err(Error::format(
            c.pos as u64,
            format!("{} trailing bytes after payload", buf.len() - c.pos),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(v >= 0.0) {
            return Err(Error::format(
                (payload_at + 4 * i) as u64,
                format!("negative or NaN count {v}"),
            ));
        }
        data.push(v);
    }
    EventHistogram::from_data(bins, height, width, domain, data)
}

pub fn write_histogram(path: impl AsRef<Path>, h: &EventHistogram) -> Result<()> {
    atomic_write(path.as_ref(), &encode_histogram(h))
}

pub fn read_histogram(path: impl AsRef<Path>) -> Result<EventHistogram> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_histogram(&buf)
}

pub fn encode_stream(s: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(STREAM_HEADER + STREAM_RECORD * s.len());
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&s.width().to_le_bytes());
    out.extend_from_slice(&s.height().to_le_bytes());
    let (t0, t1) = s.window();
    out.extend_from_slice(&t0.to_le_bytes());
    out.extend_from_slice(&t1.to_le_bytes());
    for e in s.events() {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.as_i8() as u8);
    }
    out
}

pub fn decode_stream(buf: &[u8]) -> Result<EventStream> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(STREAM_MAGIC)?;
    let width = c.u32("width")?;
    let height = c.u32("height")?;
    let t0 = c.f64("t_start")?;
    let t1 = c.f64("t_end")?;
    let body = buf.len() - c.pos;
    if body % STREAM_RECORD != 0 {
        let whole = body / STREAM_RECORD;
        return Err(Error::format(
            (c.pos + whole * STREAM_RECORD) as u64,
            format!("truncated event record ({} stray bytes)", body % STREAM_RECORD),
        ));
    }
    let mut events = Vec::with_capacity(body / STREAM_RECORD);
    while c.pos < buf.len() {
        let at = c.pos as u64;
        let rec = c.take(STREAM_RECORD, "event record")?;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = f64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = Polarity::from_i8(rec[12] as i8)
            .ok_or_else(|| Error::format(at + 12, format!("invalid polarity byte {}", rec[12] as i8)))?;
        events.push(Event::new(x, y, t, p));
    }
    EventStream::new(width, height, t0, t1, events).map_err(|e| match e {
        Error::OutOfBounds { index, .. } | Error::InvalidEvent { index, .. } => Error::format(
            (STREAM_HEADER + index * STREAM_RECORD) as u64,
            e.to_string(),
        ),
        Error::InvalidWindow { .. } => Error::format(12, e.to_string()),
        other => other,
    })
}

pub fn write_stream(path: impl AsRef<Path>, s: &EventStream) -> Result<()> {
    atomic_write(path.as_ref(), &encode_stream(s))
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stream(&buf)
}
