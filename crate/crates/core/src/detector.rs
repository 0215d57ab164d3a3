//! Environment-change detection from windowed per-link RSS spread.
//!
//! For a window of frames, each link's series is collapsed over channels,
//! its sample standard deviation is taken, and the mean of the `top_k`
//! largest values is the window score. A static recording fixes the
//! threshold envelope.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::simulator::RssFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPolicy {
    /// Average the channels of a link before taking its spread.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub window: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub channel_policy: ChannelPolicy,
}

impl DetectorConfig {
    /// Defaults: 10-frame window, top 10% of links, threshold 1.2x.
    pub fn for_links(links: usize) -> Self {
        Self {
            window: 10,
            top_k: (links / 10).max(1),
            alpha: 1.2,
            channel_policy: ChannelPolicy::Mean,
        }
    }

    pub fn validate(&self, links: usize) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!("window must be >= 2, got {}", self.window)));
        }
        if self.top_k < 1 || self.top_k > links {
            return Err(Error::InvalidArgument(format!(
                "top_k must be in [1, {links}], got {}",
                self.top_k
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn collapse(frame: &RssFrame, policy: ChannelPolicy) -> Result<Vec<f64>> {
    match policy {
        ChannelPolicy::Mean => frame.link_means(),
    }
}

fn sample_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn score_series(series: &VecDeque<Vec<f64>>, top_k: usize) -> f64 {
    let links = series[0].len();
    let mut stds: Vec<f64> = (0..links)
        .map(|l| sample_std(series.iter().map(move |s| s[l])))
        .collect();
    stds.sort_unstable_by(|a, b| b.total_cmp(a));
    stds[..top_k].iter().sum::<f64>() / top_k as f64
}

/// Mean of the `top_k` largest per-link standard deviations over exactly
/// `config.window` complete frames.
pub fn window_score(buffer: &[RssFrame], config: &DetectorConfig) -> Result<f64> {
    if buffer.len() != config.window {
        return Err(Error::InsufficientData(format!(
            "window needs {} frames, got {}",
            config.window,
            buffer.len()
        )));
    }
    config.validate(buffer[0].links)?;
    let series = buffer
        .iter()
        .map(|f| collapse(f, config.channel_policy))
        .collect::<Result<VecDeque<_>>>()?;
    for s in &series {
        Error::check_dim("frame links", series[0].len(), s.len())?;
    }
    Ok(score_series(&series, config.top_k))
}

/// Static noise envelope: the largest window score over every full window.
pub fn calibrate(static_stream: &[RssFrame], config: &DetectorConfig) -> Result<f64> {
    calibrate_streams([static_stream], config)
}

/// Envelope over several independent static recordings. Windows never
/// straddle two recordings.
pub fn calibrate_streams<'a>(
    streams: impl IntoIterator<Item = &'a [RssFrame]>,
    config: &DetectorConfig,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for stream in streams {
        if stream.len() < config.window {
            continue;
        }
        for w in stream.windows(config.window) {
            let s = window_score(w, config)?;
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
    }
    best.ok_or_else(|| {
        Error::InsufficientData(format!(
            "calibration needs a static stream of at least {} frames",
            config.window
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Warmup,
    Stable,
    Change,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Warmup => "WARMUP",
            Decision::Stable => "STABLE",
            Decision::Change => "CHANGE",
        })
    }
}

/// Streaming detector for one RSS stream.
#[derive(Debug, Clone)]
pub struct DetectorState {
    config: DetectorConfig,
    buffer: VecDeque<Vec<f64>>,
    sigma_static: Option<f64>,
    last_score: Option<f64>,
    cooldown: usize,
}

/// One row of the detector event log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorEvent {
    pub frame: usize,
    pub score: Option<f64>,
    pub threshold: f64,
    pub decision: Decision,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            buffer: VecDeque::with_capacity(config.window),
            sigma_static: None,
            last_score: None,
            cooldown: 0,
        }
    }

    pub fn calibrated(config: DetectorConfig, sigma_static: f64) -> Result<Self> {
        if !(sigma_static >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_static must be >= 0, got {sigma_static}")));
        }
        let mut st = Self::new(config);
        st.sigma_static = Some(sigma_static);
        Ok(st)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn sigma_static(&self) -> Option<f64> {
        self.sigma_static
    }

    pub fn set_sigma_static(&mut self, sigma: f64) {
        self.sigma_static = Some(sigma);
    }

    pub fn last_score(&self) -> Option<f64> {
        self.last_score
    }

    pub fn threshold(&self) -> Option<f64> {
        self.sigma_static.map(|s| self.config.alpha * s)
    }

    /// Pushes one imputed frame. After a `Change` the next `window` full
    /// windows report `Stable` so one shift yields one event.
    pub fn step(&mut self, frame: &RssFrame) -> Result<Decision> {
        let sigma = self.sigma_static.ok_or(Error::Uncalibrated)?;
        self.config.validate(frame.links)?;
        let collapsed = collapse(frame, self.config.channel_policy)?;
        if let Some(first) = self.buffer.front() {
            Error::check_dim("frame links", first.len(), collapsed.len())?;
        }
        if self.buffer.len() == self.config.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(collapsed);
        if self.buffer.len() < self.config.window {
            return Ok(Decision::Warmup);
        }
        let score = score_series(&self.buffer, self.config.top_k);
        self.last_score = Some(score);
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return Ok(Decision::Stable);
        }
        if score > self.config.alpha * sigma {
            self.cooldown = self.config.window;
            Ok(Decision::Change)
        } else {
            Ok(Decision::Stable)
        }
    }

    /// Runs a whole stream, returning one event per frame.
    pub fn run(&mut self, frames: &[RssFrame]) -> Result<Vec<DetectorEvent>> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let decision = self.step(f)?;
                Ok(DetectorEvent {
                    frame: i,
                    score: if decision == Decision::Warmup { None } else { self.last_score },
                    threshold: self.threshold().expect("calibrated"),
                    decision,
                })
            })
            .collect()
    }
}

/// Event log as CSV `frame,score,threshold,decision`.
pub fn format_event_log(events: &[DetectorEvent]) -> String {
    let mut out = String::from("frame,score,threshold,decision\n");
    for e in events {
        let score = e.score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.frame, score, e.threshold, e.decision));
    }
    out
}

pub fn write_event_log(path: &Path, events: &[DetectorEvent]) -> Result<()> {
    let out = format_event_log(events);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
