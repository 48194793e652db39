use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::stream::EventStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Event,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Event => 2,
        }
    }
}

/// Dense `[T, C, H, W]` stack of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    data: Vec<f32>,
    t: usize,
    h: usize,
    w: usize,
    modality: Modality,
}

/// ASCII `FRMT`, little-endian.
pub const FRAME_MAGIC: u32 = u32::from_le_bytes(*b"FRMT");
pub const FRAME_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

impl FrameTensor {
    pub fn zeros(modality: Modality, t: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; t * modality.channels() * h * w],
            t,
            h,
            w,
            modality,
        }
    }

    pub fn from_vec(modality: Modality, t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let expected = t * modality.channels() * h * w;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{modality:?} frames [{t}, {}, {h}, {w}] need {expected} values, got {}",
                modality.channels(),
                data.len()
            )));
        }
        if modality == Modality::Rgb && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("rgb values must lie in [0, 1]"));
        }
        if modality == Modality::Event && data.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("event counts must be non-negative"));
        }
        Ok(Self {
            data,
            t,
            h,
            w,
            modality,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `[T, C, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.channels(), self.h, self.w]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels() + c) * self.h + y) * self.w + x
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(t, c, y, x)]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.offset(t, c, y, x);
        self.data[i] = v;
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    /// Mirrors every frame left to right.
    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for t in 0..self.t {
            for c in 0..self.channels() {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(t, c, y, x, self.get(t, c, y, self.w - 1 - x));
                    }
                }
            }
        }
        out
    }

    /// Writes the 8-word little-endian header followed by row-major `f32` data.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = [
            FRAME_MAGIC,
            FRAME_VERSION,
            self.t as u32,
            self.channels() as u32,
            self.h as u32,
            self.w as u32,
            DTYPE_F32,
            0,
        ];
        let mut buf = Vec::with_capacity(32 + self.data.len() * 4);
        for word in header {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Format("frame file shorter than its header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        if word(0) != FRAME_MAGIC {
            return Err(Error::Format("bad frame magic".into()));
        }
        if word(1) != FRAME_VERSION {
            return Err(Error::Format(format!("unsupported frame version {}", word(1))));
        }
        if word(6) != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", word(6))));
        }
        let (t, c, h, w) = (
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let modality = match c {
            2 => Modality::Event,
            3 => Modality::Rgb,
            other => return Err(Error::Format(format!("{other} channels is neither rgb nor event"))),
        };
        let body = &bytes[32..];
        if body.len() != t * c * h * w * 4 {
            return Err(Error::Format(format!(
                "frame body has {} bytes, header implies {}",
                body.len(),
                t * c * h * w * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_vec(modality, t, h, w, data)
    }
}

/// Accumulates per-polarity event counts into `t_bins` frames over
/// `[t_start, t_end]`. Events outside the window are dropped; `t == t_end`
/// lands in the last bin.
pub fn stack_events(stream: &EventStream, t_bins: usize, t_start: u64, t_end: u64) -> Result<FrameTensor> {
    if t_bins == 0 {
        return Err(Error::invalid("t_bins must be at least 1"));
    }
    if t_end <= t_start {
        return Err(Error::invalid(format!("empty window [{t_start}, {t_end}]")));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let mut frames = FrameTensor::zeros(Modality::Event, t_bins, h, w);
    let span = u128::from(t_end - t_start);
    for e in stream.events() {
        if e.t < t_start || e.t > t_end {
            continue;
        }
        let bin = (u128::from(e.t - t_start) * t_bins as u128 / span) as usize;
        let bin = bin.min(t_bins - 1);
        let i = frames.offset(bin, e.p.channel(), e.y as usize, e.x as usize);
        frames.data[i] += 1.0;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::stream::{EventPoint, Polarity};

    fn ev(x: u32, y: u32, t: u64, p: Polarity) -> EventPoint {
        EventPoint { x, y, t, p }
    }

    #[test]
    fn single_event_placement() {
        let s = EventStream::new(vec![ev(0, 0, 0, Polarity::Positive)], 2, 2).unwrap();
        let f = stack_events(&s, 2, 0, 100).unwrap();
        assert_eq!(f.dims(), [2, 2, 2, 2]);
        assert_eq!(f.get(0, 0, 0, 0), 1.0);
        assert_eq!(f.total(), 1.0);
    }

    #[test]
    fn bin_boundaries_and_polarity_channels() {
        let s = EventStream::new(
            vec![ev(1, 0, 0, Polarity::Positive), ev(1, 1, 60, Polarity::Negative)],
            2,
            2,
        )
        .unwrap();
        let f = stack_events(&s, 2, 0, 100).unwrap();
        assert_eq!(f.get(0, 0, 0, 1), 1.0);
        assert_eq!(f.get(1, 1, 1, 1), 1.0);
        assert_eq!(f.total(), 2.0);
    }

    #[test]
    fn window_end_clamps_and_outside_drops() {
        let s = EventStream::new(
            vec![
                ev(0, 0, 5, Polarity::Positive),
                ev(0, 0, 10, Polarity::Positive),
                ev(0, 0, 110, Polarity::Positive),
                ev(0, 0, 111, Polarity::Positive),
            ],
            1,
            1,
        )
        .unwrap();
        let f = stack_events(&s, 4, 10, 110).unwrap();
        assert_eq!(f.get(0, 0, 0, 0), 1.0);
        assert_eq!(f.get(3, 0, 0, 0), 1.0);
        assert_eq!(f.total(), 2.0);
    }

    #[test]
    fn rejects_bad_window() {
        let s = EventStream::empty(1, 1);
        assert!(stack_events(&s, 0, 0, 10).is_err());
        assert!(stack_events(&s, 2, 10, 10).is_err());
    }

    #[test]
    fn frame_file_round_trip() {
        let f = FrameTensor::from_vec(Modality::Rgb, 1, 1, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 32 + 6 * 4);
        assert_eq!(&bytes[0..4], b"FRMT");
        let back = FrameTensor::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert!(FrameTensor::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn rgb_range_enforced() {
        assert!(FrameTensor::from_vec(Modality::Rgb, 1, 1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }

    #[test]
    fn horizontal_flip() {
        let f = FrameTensor::from_vec(Modality::Event, 1, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(f.flipped_horizontal().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
