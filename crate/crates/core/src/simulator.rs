//! Synthetic targets and RSS streams under the linear shadowing model
//! `g = baseline - W r + bias + n`, with packet loss and motion bursts.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{self, Manifest};
use crate::error::{Error, Result};
use crate::geometry::{ellipse_weights, NetworkGeometry, Point, WeightMatrix};
use crate::image::TargetMask;
use crate::kv::{join, KvDoc};

/// Largest static multipath offset the simulator will produce, in dB.
pub const MAX_BIAS_DBM: f64 = 5.0;

/// Elliptical target (a tuber cross-section).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub semi_major_cm: f64,
    pub semi_minor_cm: f64,
    pub center: Point,
    pub rotation_deg: f64,
    /// Per-pixel value of r inside the target.
    pub attenuation: f64,
}

impl TargetSpec {
    /// Target after spinning the platform by `angle_deg` about `pivot`.
    pub fn rotated_about(&self, pivot: Point, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let (dx, dy) = (self.center.x - pivot.x, self.center.y - pivot.y);
        Self {
            center: Point::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy),
            rotation_deg: self.rotation_deg + angle_deg,
            ..*self
        }
    }

    fn contains(&self, p: Point) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_major_cm).powi(2) + (v / self.semi_minor_cm).powi(2) <= 1.0
    }
}

/// Binary footprint of `spec`: a pixel is set iff its centre lies inside the
/// rotated ellipse.
pub fn rasterize_mask(spec: &TargetSpec, geom: &NetworkGeometry) -> Result<TargetMask> {
    let side = geom.side_cm();
    let c = spec.center;
    if !(c.x >= 0.0 && c.x <= side && c.y >= 0.0 && c.y <= side) {
        return Err(Error::InvalidArgument(format!(
            "target centre ({}, {}) outside the {side} cm sensing area",
            c.x, c.y
        )));
    }
    if !(spec.semi_major_cm > 0.0 && spec.semi_minor_cm > 0.0) {
        return Err(Error::InvalidArgument("target semi-axes must be positive".into()));
    }
    let n = geom.grid_px();
    Ok(TargetMask::from_fn(n, |row, col| {
        spec.contains(geom.pixel_center(row * n + col))
    }))
}

/// Static multipath state of the surroundings plus its dynamic behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    pub env_id: String,
    pub links: usize,
    pub channels: usize,
    /// Row-major `links x channels` offsets in dB.
    pub link_bias_dbm: Vec<f64>,
    pub burst_rate: f64,
    pub burst_sigma_dbm: f64,
    pub drop_prob: f64,
}

impl EnvironmentProfile {
    /// Quiet environment: zero bias, no bursts, no loss.
    pub fn quiet(env_id: &str, links: usize, channels: usize) -> Self {
        Self {
            env_id: env_id.to_string(),
            links,
            channels,
            link_bias_dbm: vec![0.0; links * channels],
            burst_rate: 0.0,
            burst_sigma_dbm: 0.0,
            drop_prob: 0.0,
        }
    }

    /// Every bias drawn uniformly from `[-max_bias, max_bias]`.
    pub fn random(env_id: &str, links: usize, channels: usize, max_bias_dbm: f64, seed: u64) -> Result<Self> {
        check_bias(max_bias_dbm)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = Self::quiet(env_id, links, channels);
        if max_bias_dbm > 0.0 {
            for b in env.link_bias_dbm.iter_mut() {
                *b = rng.gen_range(-max_bias_dbm..=max_bias_dbm);
            }
        }
        Ok(env)
    }

    pub fn bias(&self, link: usize, channel: usize) -> f64 {
        self.link_bias_dbm[link * self.channels + channel]
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim("environment bias", self.links * self.channels, self.link_bias_dbm.len())?;
        if let Some(b) = self.link_bias_dbm.iter().find(|b| !(b.abs() <= MAX_BIAS_DBM)) {
            return Err(Error::InvalidArgument(format!("bias {b} exceeds +/-{MAX_BIAS_DBM} dB")));
        }
        for (name, p) in [("burst_rate", self.burst_rate), ("drop_prob", self.drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.burst_sigma_dbm >= 0.0) {
            return Err(Error::InvalidArgument("burst_sigma_dbm must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_bias(max_bias_dbm: f64) -> Result<()> {
    if !(0.0..=MAX_BIAS_DBM).contains(&max_bias_dbm) {
        return Err(Error::InvalidArgument(format!(
            "max_bias_dbm must be in [0, {MAX_BIAS_DBM}], got {max_bias_dbm}"
        )));
    }
    Ok(())
}

/// Layout change: `ceil(changed_fraction * links)` links get fresh biases on
/// every channel, drawn uniformly from `[-max_bias, max_bias]`.
pub fn switch_environment(
    from: &EnvironmentProfile,
    new_id: &str,
    seed: u64,
    changed_fraction: f64,
    max_bias_dbm: f64,
) -> Result<EnvironmentProfile> {
    if !(changed_fraction > 0.0 && changed_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "changed_fraction must be in (0,1], got {changed_fraction}"
        )));
    }
    check_bias(max_bias_dbm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = ((changed_fraction * from.links as f64).ceil() as usize).clamp(1, from.links);
    let mut chosen = sample(&mut rng, from.links, count).into_vec();
    chosen.sort_unstable();
    let mut next = from.clone();
    next.env_id = new_id.to_string();
    for l in chosen {
        for c in 0..from.channels {
            next.link_bias_dbm[l * from.channels + c] = if max_bias_dbm > 0.0 {
                rng.gen_range(-max_bias_dbm..=max_bias_dbm)
            } else {
                0.0
            };
        }
    }
    Ok(next)
}

/// One time slice of per-link, per-channel RSS. `None` marks a lost packet.
#[derive(Debug, Clone, PartialEq)]
pub struct RssFrame {
    pub timestamp: usize,
    pub links: usize,
    pub channels: usize,
    pub values: Vec<Option<f64>>,
}

impl RssFrame {
    pub fn missing(timestamp: usize, links: usize, channels: usize) -> Self {
        Self {
            timestamp,
            links,
            channels,
            values: vec![None; links * channels],
        }
    }

    pub fn from_dense(timestamp: usize, links: usize, channels: usize, values: &[f64]) -> Result<Self> {
        Error::check_dim("frame values", links * channels, values.len())?;
        Ok(Self {
            timestamp,
            links,
            channels,
            values: values.iter().map(|&v| Some(v)).collect(),
        })
    }

    pub fn get(&self, link: usize, channel: usize) -> Option<f64> {
        self.values[link * self.channels + channel]
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Values with no gaps; fails if any entry is missing.
    pub fn dense(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    Error::Contract(format!(
                        "frame {} has a missing entry at link {}, channel {}",
                        self.timestamp,
                        i / self.channels,
                        i % self.channels
                    ))
                })
            })
            .collect()
    }

    /// Per-link mean over channels (requires a complete frame).
    pub fn link_means(&self) -> Result<Vec<f64>> {
        let dense = self.dense()?;
        Ok(dense
            .chunks(self.channels)
            .map(|c| c.iter().sum::<f64>() / self.channels as f64)
            .collect())
    }

    pub fn check_shape(&self, links: usize, channels: usize) -> Result<()> {
        Error::check_dim("frame links", links, self.links)?;
        Error::check_dim("frame channels", channels, self.channels)?;
        Error::check_dim("frame values", links * channels, self.values.len())
    }
}

/// Everything recorded for one tuber in one environment at one platform angle.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub tuber_id: String,
    pub env_id: String,
    pub rotation_deg: f64,
    pub frames: Vec<RssFrame>,
    /// Ground truth; absent for unlabeled external recordings.
    pub mask: Option<TargetMask>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    pub baseline_dbm: f64,
    pub noise_sigma_dbm: f64,
    /// Forces motion-burst noise on this frame (transition window).
    pub burst: bool,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            baseline_dbm: -55.0,
            noise_sigma_dbm: 0.5,
            burst: false,
        }
    }
}

/// Draws one frame: `baseline - (W r)[l] + bias[l,c] + noise`, then drops
/// each entry independently with the environment's loss probability.
pub fn synthesize_frame(
    geom: &NetworkGeometry,
    weights: &WeightMatrix,
    r: &[f64],
    env: &EnvironmentProfile,
    params: &FrameParams,
    seed: u64,
    timestamp: usize,
) -> Result<RssFrame> {
    let (links, channels) = (geom.link_count(), geom.channels());
    Error::check_dim("weight rows", links, weights.rows())?;
    Error::check_dim("weight cols", geom.pixel_count(), weights.cols())?;
    Error::check_dim("environment links", links, env.links)?;
    Error::check_dim("environment channels", channels, env.channels)?;
    env.validate()?;
    if !(params.noise_sigma_dbm >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma_dbm must be >= 0".into()));
    }
    let shadow = weights.apply(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burst = params.burst || (env.burst_rate > 0.0 && rng.gen_bool(env.burst_rate));
    let noise = Normal::new(0.0, params.noise_sigma_dbm).expect("sigma checked");
    let burst_noise = Normal::new(0.0, env.burst_sigma_dbm).expect("sigma validated");
    let mut values = Vec::with_capacity(links * channels);
    for (l, s) in shadow.iter().enumerate() {
        for c in 0..channels {
            let mut v = params.baseline_dbm - s + env.bias(l, c);
            if params.noise_sigma_dbm > 0.0 {
                v += noise.sample(&mut rng);
            }
            if burst && env.burst_sigma_dbm > 0.0 {
                v += burst_noise.sample(&mut rng);
            }
            let dropped = env.drop_prob > 0.0 && rng.gen_bool(env.drop_prob);
            values.push(if dropped { None } else { Some(v) });
        }
    }
    Ok(RssFrame {
        timestamp,
        links,
        channels,
        values,
    })
}

/// Configuration of a synthetic measurement campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub side_cm: f64,
    pub nodes: usize,
    pub grid_px: usize,
    pub channels: usize,
    pub lambda_cm: f64,
    pub tubers: usize,
    pub dynamic_tubers: usize,
    pub rotations: usize,
    pub frames: usize,
    pub envs: Vec<String>,
    pub baseline_dbm: f64,
    pub noise_sigma_dbm: f64,
    pub drop_prob: f64,
    pub initial_bias_dbm: f64,
    pub changed_fraction: f64,
    pub max_bias_dbm: f64,
    pub burst_frames: usize,
    pub burst_sigma_dbm: f64,
    pub burst_rate: f64,
    pub attenuation: f64,
    pub placement_radius_cm: f64,
    pub reference_frames: usize,
    /// RSS values written to disk are rounded to this step (0 disables).
    pub rss_resolution_db: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            side_cm: crate::geometry::DEFAULT_SIDE_CM,
            nodes: crate::geometry::DEFAULT_NODES,
            grid_px: crate::geometry::DEFAULT_GRID_PX,
            channels: crate::geometry::DEFAULT_CHANNELS,
            lambda_cm: crate::geometry::DEFAULT_LAMBDA_CM,
            tubers: 26,
            dynamic_tubers: 5,
            rotations: 8,
            frames: 12,
            envs: ["E1", "E2", "E3", "E4"].map(String::from).to_vec(),
            baseline_dbm: -55.0,
            noise_sigma_dbm: 0.5,
            drop_prob: 0.02,
            initial_bias_dbm: 3.0,
            changed_fraction: 0.3,
            max_bias_dbm: MAX_BIAS_DBM,
            burst_frames: 20,
            burst_sigma_dbm: 2.0,
            burst_rate: 0.0,
            attenuation: 2.0,
            placement_radius_cm: 12.0,
            reference_frames: 12,
            rss_resolution_db: 0.01,
        }
    }
}

/// Keys accepted by [`SimConfig::apply_kv`].
pub const SIM_CONFIG_KEYS: &[&str] = &[
    "seed",
    "side_cm",
    "nodes",
    "grid_px",
    "channels",
    "lambda_cm",
    "tubers",
    "dynamic_tubers",
    "rotations",
    "frames",
    "envs",
    "baseline_dbm",
    "noise_sigma_dbm",
    "drop_prob",
    "initial_bias_dbm",
    "changed_fraction",
    "max_bias_dbm",
    "burst_frames",
    "burst_sigma_dbm",
    "burst_rate",
    "attenuation",
    "placement_radius_cm",
    "reference_frames",
    "rss_resolution_db",
];

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.tubers == 0 {
            return bad("tubers must be >= 1".into());
        }
        if self.dynamic_tubers > self.tubers {
            return bad(format!(
                "dynamic_tubers ({}) exceeds tubers ({})",
                self.dynamic_tubers, self.tubers
            ));
        }
        if self.rotations == 0 || self.frames == 0 {
            return bad("rotations and frames must be >= 1".into());
        }
        if self.envs.is_empty() {
            return bad("at least one environment is required".into());
        }
        for (i, e) in self.envs.iter().enumerate() {
            if e.is_empty() || e.contains(['/', ',', '\\']) || self.envs[..i].contains(e) {
                return bad(format!("invalid or duplicate environment id `{e}`"));
            }
        }
        if self.envs.len() > 1 && self.dynamic_tubers == 0 {
            return bad("changing environments need dynamic_tubers >= 1".into());
        }
        if self.envs.len() > 1 && !(self.changed_fraction > 0.0 && self.changed_fraction <= 1.0) {
            return bad(format!("changed_fraction must be in (0,1], got {}", self.changed_fraction));
        }
        check_bias(self.max_bias_dbm)?;
        check_bias(self.initial_bias_dbm)?;
        for (name, p) in [("drop_prob", self.drop_prob), ("burst_rate", self.burst_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0,1], got {p}"));
            }
        }
        for (name, v) in [
            ("noise_sigma_dbm", self.noise_sigma_dbm),
            ("burst_sigma_dbm", self.burst_sigma_dbm),
            ("rss_resolution_db", self.rss_resolution_db),
            ("placement_radius_cm", self.placement_radius_cm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.attenuation > 0.0) {
            return bad("attenuation must be positive".into());
        }
        if self.placement_radius_cm + 5.25 > self.side_cm / 2.0 {
            return bad("placement_radius_cm leaves targets outside the sensing area".into());
        }
        if !(self.lambda_cm > 0.0) {
            return bad("lambda_cm must be positive".into());
        }
        NetworkGeometry::new(self.side_cm, self.nodes, self.grid_px, self.channels)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<NetworkGeometry> {
        NetworkGeometry::new(self.side_cm, self.nodes, self.grid_px, self.channels)
    }

    pub fn tuber_ids(&self) -> Vec<String> {
        let width = self.tubers.to_string().len().max(2);
        (1..=self.tubers).map(|i| format!("t{i:0width$}")).collect()
    }

    pub fn rotation_angles(&self) -> Vec<f64> {
        (0..self.rotations)
            .map(|k| k as f64 * 360.0 / self.rotations as f64)
            .collect()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("seed", self.seed);
        doc.set("side_cm", self.side_cm);
        doc.set("nodes", self.nodes);
        doc.set("grid_px", self.grid_px);
        doc.set("channels", self.channels);
        doc.set("lambda_cm", self.lambda_cm);
        doc.set("tubers", self.tubers);
        doc.set("dynamic_tubers", self.dynamic_tubers);
        doc.set("rotations", self.rotations);
        doc.set("frames", self.frames);
        doc.set("envs", join(&self.envs));
        doc.set("baseline_dbm", self.baseline_dbm);
        doc.set("noise_sigma_dbm", self.noise_sigma_dbm);
        doc.set("drop_prob", self.drop_prob);
        doc.set("initial_bias_dbm", self.initial_bias_dbm);
        doc.set("changed_fraction", self.changed_fraction);
        doc.set("max_bias_dbm", self.max_bias_dbm);
        doc.set("burst_frames", self.burst_frames);
        doc.set("burst_sigma_dbm", self.burst_sigma_dbm);
        doc.set("burst_rate", self.burst_rate);
        doc.set("attenuation", self.attenuation);
        doc.set("placement_radius_cm", self.placement_radius_cm);
        doc.set("reference_frames", self.reference_frames);
        doc.set("rss_resolution_db", self.rss_resolution_db);
        doc
    }

    /// Overrides fields from `doc`. Keys outside [`SIM_CONFIG_KEYS`] are
    /// ignored here; callers that must reject them check first.
    pub fn apply_kv(&mut self, doc: &KvDoc) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if doc.get(stringify!($field)).is_some() {
                    self.$field = doc.parse_value(stringify!($field))?;
                }
            )*};
        }
        take!(
            seed, side_cm, nodes, grid_px, channels, lambda_cm, tubers, dynamic_tubers, rotations,
            frames, baseline_dbm, noise_sigma_dbm, drop_prob, initial_bias_dbm, changed_fraction,
            max_bias_dbm, burst_frames, burst_sigma_dbm, burst_rate, attenuation,
            placement_radius_cm, reference_frames, rss_resolution_db
        );
        if doc.get("envs").is_some() {
            self.envs = doc.parse_list("envs")?;
        }
        Ok(())
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(doc)?;
        Ok(cfg)
    }
}

/// Per-tuber properties drawn for a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct TuberInfo {
    pub tuber_id: String,
    pub length_cm: f64,
    pub width_cm: f64,
    pub depth_cm: f64,
    pub dynamic: bool,
    /// Placement at platform angle 0.
    pub target: TargetSpec,
}

impl TuberInfo {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("tuber_id", &self.tuber_id);
        doc.set("length_cm", self.length_cm);
        doc.set("width_cm", self.width_cm);
        doc.set("semi_major_cm", self.target.semi_major_cm);
        doc.set("semi_minor_cm", self.target.semi_minor_cm);
        doc.set("depth_cm", self.depth_cm);
        doc.set("attenuation", self.target.attenuation);
        doc.set("center_x_cm", self.target.center.x);
        doc.set("center_y_cm", self.target.center.y);
        doc.set("orientation_deg", self.target.rotation_deg);
        doc.set("dynamic", self.dynamic);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        Ok(Self {
            tuber_id: doc.require("tuber_id")?.to_string(),
            length_cm: doc.parse_value("length_cm")?,
            width_cm: doc.parse_value("width_cm")?,
            depth_cm: doc.parse_value("depth_cm")?,
            dynamic: doc.parse_value("dynamic")?,
            target: TargetSpec {
                semi_major_cm: doc.parse_value("semi_major_cm")?,
                semi_minor_cm: doc.parse_value("semi_minor_cm")?,
                center: Point::new(doc.parse_value("center_x_cm")?, doc.parse_value("center_y_cm")?),
                rotation_deg: doc.parse_value("orientation_deg")?,
                attenuation: doc.parse_value("attenuation")?,
            },
        })
    }
}

// rng stream tags
const STREAM_TUBERS: u64 = 1;
const STREAM_ENVS: u64 = 2;
const STREAM_RECORD: u64 = 3;
const STREAM_REFERENCE: u64 = 4;

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = 0u64;
    for &p in parts {
        stream = stream.wrapping_mul(0x100_0193).wrapping_add(p + 1);
    }
    rng.set_stream(stream);
    rng
}

const LENGTH_RANGE_CM: (f64, f64) = (10.5, 2.0);
const WIDTH_RANGE_CM: (f64, f64) = (7.0, 1.0);
const DEPTH_RANGE_CM: (f64, f64) = (15.5, 10.7);

/// Graded tuber population: sizes shrink linearly from the largest to the
/// smallest tuber; all sit at the same platform position with a random
/// orientation. One dynamic tuber is drawn from each size stratum.
pub fn tuber_population(config: &SimConfig) -> Vec<TuberInfo> {
    let mut rng = rng_for(config.seed, &[STREAM_TUBERS]);
    let n = config.tubers;
    let lerp = |(hi, lo): (f64, f64), t: f64| hi + (lo - hi) * t;
    let mut dynamic = vec![false; n];
    let strata = config.dynamic_tubers;
    for s in 0..strata {
        let (start, end) = (s * n / strata, (s + 1) * n / strata);
        dynamic[rng.gen_range(start..end)] = true;
    }
    let side = config.side_cm;
    let center = Point::new(side / 2.0, side / 2.0 + config.placement_radius_cm);
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let length_cm = lerp(LENGTH_RANGE_CM, t);
            let width_cm = lerp(WIDTH_RANGE_CM, t);
            TuberInfo {
                tuber_id: config.tuber_ids()[i].clone(),
                length_cm,
                width_cm,
                depth_cm: lerp(DEPTH_RANGE_CM, t),
                dynamic: dynamic[i],
                target: TargetSpec {
                    semi_major_cm: length_cm / 2.0,
                    semi_minor_cm: width_cm / 2.0,
                    center,
                    rotation_deg: rng.gen_range(0.0..180.0),
                    attenuation: config.attenuation,
                },
            }
        })
        .collect()
}

/// Environment profiles for the configured sequence; each one after the
/// first is a layout change of its predecessor.
pub fn environment_profiles(config: &SimConfig, geom: &NetworkGeometry) -> Result<Vec<EnvironmentProfile>> {
    let mut profiles: Vec<EnvironmentProfile> = Vec::with_capacity(config.envs.len());
    let seed_rng = |k: usize| rng_for(config.seed, &[STREAM_ENVS, k as u64]).next_u64();
    for (k, id) in config.envs.iter().enumerate() {
        let mut env = match profiles.last() {
            None => EnvironmentProfile::random(
                id,
                geom.link_count(),
                geom.channels(),
                config.initial_bias_dbm,
                seed_rng(k),
            )?,
            Some(prev) => switch_environment(prev, id, seed_rng(k), config.changed_fraction, config.max_bias_dbm)?,
        };
        env.burst_rate = config.burst_rate;
        env.burst_sigma_dbm = config.burst_sigma_dbm;
        env.drop_prob = config.drop_prob;
        env.validate()?;
        profiles.push(env);
    }
    Ok(profiles)
}

fn quantize(frame: &mut RssFrame, step: f64) {
    if step > 0.0 {
        for v in frame.values.iter_mut().flatten() {
            *v = (*v / step).round() * step;
            // normalise to the shortest decimal so files stay compact
            *v = format!("{:.6}", *v).parse().expect("formatted float");
        }
    }
}

struct Campaign {
    config: SimConfig,
    geom: NetworkGeometry,
    weights: WeightMatrix,
    envs: Vec<EnvironmentProfile>,
}

impl Campaign {
    fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry()?;
        let weights = ellipse_weights(&geom, config.lambda_cm)?;
        let envs = environment_profiles(config, &geom)?;
        Ok(Self {
            config: config.clone(),
            geom,
            weights,
            envs,
        })
    }

    fn record(
        &self,
        tuber_id: &str,
        target: Option<&TargetSpec>,
        env_index: usize,
        rotation_deg: f64,
        frames: usize,
        burst_frames: usize,
        mut rng: ChaCha8Rng,
    ) -> Result<SampleRecord> {
        let mask = match target {
            Some(t) => rasterize_mask(t, &self.geom)?,
            None => TargetMask::empty(self.geom.grid_px()),
        };
        let attenuation = target.map_or(0.0, |t| t.attenuation);
        let r = mask.scaled(attenuation);
        let env = &self.envs[env_index];
        let frames = (0..burst_frames + frames)
            .map(|t| {
                let params = FrameParams {
                    baseline_dbm: self.config.baseline_dbm,
                    noise_sigma_dbm: self.config.noise_sigma_dbm,
                    burst: t < burst_frames,
                };
                let mut frame = synthesize_frame(&self.geom, &self.weights, &r, env, &params, rng.next_u64(), t)?;
                quantize(&mut frame, self.config.rss_resolution_db);
                Ok(frame)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleRecord {
            tuber_id: tuber_id.to_string(),
            env_id: env.env_id.clone(),
            rotation_deg,
            frames,
            mask: Some(mask),
        })
    }
}

/// Summary of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub manifest: std::path::PathBuf,
    /// Tuber recordings written (the empty-scene references are not counted).
    pub records: usize,
    pub tubers: usize,
}

/// Writes a full synthetic campaign under `out_dir` (see the dataset module
/// for the layout). Every tuber is recorded in the first environment; dynamic
/// tubers additionally in every later one, with the transition burst leading
/// their first rotation. An empty-scene reference is recorded per environment.
pub fn generate_dataset(config: &SimConfig, out_dir: &Path) -> Result<DatasetSummary> {
    let campaign = Campaign::new(config)?;
    let tubers = tuber_population(config);
    let angles = config.rotation_angles();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let manifest = Manifest::from_config(config, &campaign.geom, &tubers);
    let manifest_path = manifest.write(out_dir)?;

    let pivot = campaign.geom.center();
    let mut records = 0;
    for (ti, tuber) in tubers.iter().enumerate() {
        dataset::write_tuber_meta(out_dir, tuber)?;
        for (ei, _) in campaign.envs.iter().enumerate() {
            if ei > 0 && !tuber.dynamic {
                continue;
            }
            for (ri, &angle) in angles.iter().enumerate() {
                let target = tuber.target.rotated_about(pivot, angle);
                let burst = if ei > 0 && ri == 0 { config.burst_frames } else { 0 };
                let rng = rng_for(config.seed, &[STREAM_RECORD, ti as u64, ei as u64, ri as u64]);
                let rec = campaign.record(&tuber.tuber_id, Some(&target), ei, angle, config.frames, burst, rng)?;
                dataset::write_sample(&dataset::sample_dir(out_dir, &rec.tuber_id, &rec.env_id, ri), &rec)?;
                records += 1;
            }
        }
    }
    if config.reference_frames > 0 {
        for (ei, env) in campaign.envs.iter().enumerate() {
            let rng = rng_for(config.seed, &[STREAM_REFERENCE, ei as u64]);
            let rec = campaign.record(dataset::REFERENCE_ID, None, ei, 0.0, config.reference_frames, 0, rng)?;
            dataset::write_sample(&dataset::sample_dir(out_dir, dataset::REFERENCE_ID, &env.env_id, 0), &rec)?;
        }
    }
    Ok(DatasetSummary {
        manifest: manifest_path,
        records,
        tubers: tubers.len(),
    })
}
