//! Missing-value imputation and the per-channel node-matrix input layout.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::NetworkGeometry;
use crate::image::TargetMask;
use crate::simulator::{RssFrame, SampleRecord};

/// Forward-fill state for one RSS stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationState {
    links: usize,
    channels: usize,
    last_seen: Vec<Option<f64>>,
    fallback_dbm: f64,
}

impl ImputationState {
    pub fn new(links: usize, channels: usize, fallback_dbm: f64) -> Self {
        Self {
            links,
            channels,
            last_seen: vec![None; links * channels],
            fallback_dbm,
        }
    }

    pub fn last_seen(&self, link: usize, channel: usize) -> Option<f64> {
        self.last_seen[link * self.channels + channel]
    }

    /// Replaces each missing entry with the most recent value observed on
    /// the same link and channel (or the fallback before any observation).
    pub fn impute(&mut self, frame: &RssFrame) -> Result<RssFrame> {
        frame.check_shape(self.links, self.channels)?;
        let values = frame
            .values
            .iter()
            .zip(self.last_seen.iter_mut())
            .map(|(v, last)| match v {
                Some(x) => {
                    *last = Some(*x);
                    Some(*x)
                }
                None => Some(last.unwrap_or(self.fallback_dbm)),
            })
            .collect();
        Ok(RssFrame {
            values,
            ..frame.clone()
        })
    }
}

/// Imputes a whole stream with a fresh state.
pub fn impute_stream(frames: &[RssFrame], fallback_dbm: f64) -> Result<Vec<RssFrame>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut state = ImputationState::new(first.links, first.channels, fallback_dbm);
    frames.iter().map(|f| state.impute(f)).collect()
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population std of each channel over every link of every
    /// frame. A zero std is replaced by 1.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a RssFrame>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for frame in frames {
            let dense = frame.dense()?;
            if sum.is_empty() {
                sum = vec![0.0; frame.channels];
                sq = vec![0.0; frame.channels];
            }
            Error::check_dim("frame channels", sum.len(), frame.channels)?;
            for row in dense.chunks(frame.channels) {
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += frame.links;
        }
        if n == 0 {
            return Err(Error::InsufficientData("no frames to fit normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| guard_std((q / n as f64 - m * m).max(0.0).sqrt()))
            .collect();
        Ok(Self { mean, std })
    }
}

fn guard_std(s: f64) -> f64 {
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// `channels x nodes x nodes` input tensor; entry `[c, i, j]` is the RSS of
/// directed link `i -> j` on channel `c`, the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RssTensor {
    pub channels: usize,
    pub nodes: usize,
    pub values: Vec<f64>,
    pub frames: Range<usize>,
}

impl RssTensor {
    pub fn get(&self, channel: usize, tx: usize, rx: usize) -> f64 {
        self.values[(channel * self.nodes + tx) * self.nodes + rx]
    }
}

/// Arranges a complete frame as a node-adjacency tensor, optionally
/// standardized per channel.
pub fn to_tensor(frame: &RssFrame, geom: &NetworkGeometry, norm: Option<&NormStats>) -> Result<RssTensor> {
    frame.check_shape(geom.link_count(), geom.channels())?;
    let dense = frame.dense()?;
    let (n, ch) = (geom.node_count(), geom.channels());
    if let Some(norm) = norm {
        Error::check_dim("normalization channels", ch, norm.mean.len())?;
        Error::check_dim("normalization channels", ch, norm.std.len())?;
    }
    let mut values = vec![0.0; ch * n * n];
    for (l, link) in geom.links().iter().enumerate() {
        for c in 0..ch {
            let mut v = dense[l * ch + c];
            if let Some(norm) = norm {
                v = (v - norm.mean[c]) / guard_std(norm.std[c]);
            }
            values[(c * n + link.tx) * n + link.rx] = v;
        }
    }
    Ok(RssTensor {
        channels: ch,
        nodes: n,
        values,
        frames: frame.timestamp..frame.timestamp + 1,
    })
}

/// Inverse of [`to_tensor`] without normalization.
pub fn tensor_to_frame(tensor: &RssTensor, geom: &NetworkGeometry) -> Result<RssFrame> {
    Error::check_dim("tensor nodes", geom.node_count(), tensor.nodes)?;
    Error::check_dim("tensor channels", geom.channels(), tensor.channels)?;
    let ch = geom.channels();
    let mut dense = vec![0.0; geom.link_count() * ch];
    for (l, link) in geom.links().iter().enumerate() {
        for c in 0..ch {
            dense[l * ch + c] = tensor.get(c, link.tx, link.rx);
        }
    }
    RssFrame::from_dense(tensor.frames.start, geom.link_count(), ch, &dense)
}

/// A labeled recording after imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSample {
    pub tuber_id: String,
    pub env_id: String,
    pub rotation_deg: f64,
    pub frames: Vec<RssFrame>,
    pub mask: TargetMask,
}

impl ImputedSample {
    /// Imputes `record`; fails on unlabeled records.
    pub fn from_record(record: &SampleRecord, fallback_dbm: f64) -> Result<Self> {
        let mask = record.mask.clone().ok_or_else(|| {
            Error::MissingData(format!(
                "{}/{} at {} deg has no ground-truth mask",
                record.tuber_id, record.env_id, record.rotation_deg
            ))
        })?;
        Ok(Self {
            tuber_id: record.tuber_id.clone(),
            env_id: record.env_id.clone(),
            rotation_deg: record.rotation_deg,
            frames: impute_stream(&record.frames, fallback_dbm)?,
            mask,
        })
    }

    /// Copy keeping only the last `window` frames.
    pub fn tail(&self, window: usize) -> Self {
        let start = self.frames.len().saturating_sub(window);
        Self {
            frames: self.frames[start..].to_vec(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: usize, vals: &[Option<f64>]) -> RssFrame {
        RssFrame {
            timestamp: t,
            links: vals.len(),
            channels: 1,
            values: vals.to_vec(),
        }
    }

    #[test]
    fn complete_frame_is_unchanged() {
        let mut st = ImputationState::new(3, 1, -55.0);
        let f = frame(0, &[Some(-50.0), Some(-51.0), Some(-52.0)]);
        assert_eq!(st.impute(&f).unwrap(), f);
        assert_eq!(st.last_seen(1, 0), Some(-51.0));
    }

    #[test]
    fn missing_uses_most_recent_value() {
        let mut st = ImputationState::new(2, 1, -55.0);
        st.impute(&frame(0, &[Some(-57.2), Some(-40.0)])).unwrap();
        st.impute(&frame(1, &[None, Some(-41.0)])).unwrap();
        let out = st.impute(&frame(2, &[None, None])).unwrap();
        assert_eq!(out.values, vec![Some(-57.2), Some(-41.0)]);
    }

    #[test]
    fn cold_start_uses_fallback() {
        let mut st = ImputationState::new(3, 1, -55.0);
        let out = st.impute(&frame(0, &[None, None, None])).unwrap();
        assert!(out.values.iter().all(|v| *v == Some(-55.0)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut st = ImputationState::new(3, 1, -55.0);
        assert!(st.impute(&frame(0, &[None])).is_err());
    }

    #[test]
    fn three_node_tensor_has_zero_diagonal() {
        let g = NetworkGeometry::new(10.0, 3, 3, 2).unwrap();
        let dense: Vec<f64> = (0..12).map(|i| -50.0 - i as f64).collect();
        let f = RssFrame::from_dense(0, 6, 2, &dense).unwrap();
        let t = to_tensor(&f, &g, None).unwrap();
        assert_eq!(t.values.len(), 2 * 3 * 3);
        for c in 0..2 {
            for i in 0..3 {
                assert_eq!(t.get(c, i, i), 0.0);
            }
        }
        // link 0 is 0->1, channel 1
        assert_eq!(t.get(1, 0, 1), -51.0);
        assert_eq!(tensor_to_frame(&t, &g).unwrap(), f);
    }

    #[test]
    fn standardization_and_degenerate_std() {
        let g = NetworkGeometry::new(10.0, 3, 3, 1).unwrap();
        let f = RssFrame::from_dense(0, 6, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let norm = NormStats {
            mean: vec![2.0],
            std: vec![0.5],
        };
        let t = to_tensor(&f, &g, Some(&norm)).unwrap();
        assert_eq!(t.get(0, 0, 1), -2.0);
        assert_eq!(t.get(0, 2, 1), 8.0);
        let flat = NormStats {
            mean: vec![1.0],
            std: vec![0.0],
        };
        let t = to_tensor(&f, &g, Some(&flat)).unwrap();
        assert_eq!(t.get(0, 0, 2), 1.0);
    }

    #[test]
    fn missing_entry_is_a_contract_violation() {
        let g = NetworkGeometry::new(10.0, 3, 3, 1).unwrap();
        let mut f = RssFrame::from_dense(0, 6, 1, &[1.0; 6]).unwrap();
        f.values[2] = None;
        assert!(matches!(to_tensor(&f, &g, None), Err(Error::Contract(_))));
    }

    #[test]
    fn fit_normalization() {
        let a = RssFrame::from_dense(0, 2, 2, &[1.0, 10.0, 3.0, 10.0]).unwrap();
        let norm = NormStats::fit([&a]).unwrap();
        assert_eq!(norm.mean, vec![2.0, 10.0]);
        assert_eq!(norm.std, vec![1.0, 1.0]);
    }
}
