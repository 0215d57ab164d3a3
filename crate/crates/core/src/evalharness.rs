//! Continual-learning experiment: pre-train in the first environment, replay
//! the RSS stream across each environment transition, adapt on detected
//! change and score the neural model with and without adaptation and the
//! linear baseline on the held-out tubers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baseline::{mean_attenuation, ReferenceRss, TikhonovConfig, TikhonovSolver};
use crate::dataset::{plan_split, DatasetSource, DirectoryDataset, SplitPlan};
use crate::detector::{calibrate_streams, write_event_log, Decision, DetectorConfig, DetectorState};
use crate::error::{Error, Result};
use crate::geometry::{ellipse_weights, NetworkGeometry, WeightMatrix};
use crate::image::{write_pgm, ReconImage, TargetMask};
use crate::kv::KvDoc;
use crate::neural::{one_shot_finetune, reconstruct_frames, save_checkpoint, train, DriftModel, TrainConfig};
use crate::postprocess::{canny_region, evaluate, write_metric_rows, CannyConfig, MetricReport};
use crate::preprocess::{ImputationState, ImputedSample};
use crate::simulator::{RssFrame, SampleRecord};

/// Published leave-2-out means on the physical testbed.
pub const REFERENCE_LEAVE2_RPD: f64 = 0.07;
pub const REFERENCE_LEAVE2_IOU: f64 = 0.90;
pub const REFERENCE_LEAVE2_EDE_CM: f64 = 1.85;
/// Published mean EDE over all settings and its relative improvement.
pub const REFERENCE_MEAN_EDE_CM: f64 = 2.29;
pub const REFERENCE_IMPROVEMENT_PCT: f64 = 23.2;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const SAMPLES_CSV: &str = "samples.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    NeuralNoFinetune,
    NeuralFinetuned,
    Linear,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NeuralNoFinetune, Method::NeuralFinetuned, Method::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Method::NeuralNoFinetune => "neural-no-finetune",
            Method::NeuralFinetuned => "neural-finetuned",
            Method::Linear => "linear",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Environment change `from -> to`, written `E1->E2`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transition {
    pub from: String,
    pub to: String,
}

impl Transition {
    pub fn new(from: &str, to: &str) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }

    /// File-name friendly form, `E1-E2`.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.from, self.to)
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

impl FromStr for Transition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once("->") {
            Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => Ok(Self::new(a.trim(), b.trim())),
            _ => Err(format!("transition `{s}` is not of the form FROM->TO")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Number of held-out test tubers.
    pub k: usize,
    pub split_seed: u64,
    /// Applied in order; the first source environment is the pre-training one.
    pub env_sequence: Vec<Transition>,
    /// `None` takes the defaults for the dataset's link count.
    pub detector: Option<DetectorConfig>,
    pub train: TrainConfig,
    pub tikhonov: TikhonovConfig,
    pub canny: CannyConfig,
    pub triptychs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("ds"),
            output_dir: PathBuf::from("report"),
            k: 2,
            split_seed: 0,
            env_sequence: vec![Transition::new("E1", "E2")],
            detector: None,
            train: TrainConfig::default(),
            tikhonov: TikhonovConfig::default(),
            canny: CannyConfig::default(),
            triptychs: true,
        }
    }
}

pub const EXPERIMENT_KEYS: &[&str] = &[
    "dataset",
    "output_dir",
    "k",
    "split_seed",
    "transitions",
    "window",
    "top_k",
    "alpha",
    "epochs",
    "learning_rate",
    "momentum",
    "batch_size",
    "seed",
    "loss",
    "finetune_epochs",
    "finetune_lr",
    "reg_lambda",
    "reference_frames",
    "gaussian_sigma",
    "low_thresh",
    "high_thresh",
    "triptychs",
];

impl ExperimentConfig {
    /// Reads every key present in `doc`; unknown keys are rejected.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        if let Some(k) = doc.keys().find(|k| !EXPERIMENT_KEYS.contains(k)) {
            return Err(Error::InvalidArgument(format!("unknown experiment key `{k}`")));
        }
        let mut cfg = Self::default();
        if let Some(v) = doc.get("dataset") {
            cfg.dataset = v.into();
        }
        if let Some(v) = doc.get("output_dir") {
            cfg.output_dir = v.into();
        }
        cfg.k = doc.parse_or("k", cfg.k)?;
        cfg.split_seed = doc.parse_or("split_seed", cfg.split_seed)?;
        if doc.get("transitions").is_some() {
            cfg.env_sequence = doc.parse_list("transitions")?;
        }
        if ["window", "top_k", "alpha"].iter().any(|k| doc.get(k).is_some()) {
            let mut d = DetectorConfig::for_links(1);
            d.window = doc.parse_or("window", d.window)?;
            d.top_k = doc.parse_value("top_k").map_err(|_| {
                Error::InvalidArgument("detector overrides need an explicit top_k".into())
            })?;
            d.alpha = doc.parse_or("alpha", d.alpha)?;
            cfg.detector = Some(d);
        }
        cfg.train.apply_kv(doc)?;
        cfg.tikhonov.reg_lambda = doc.parse_or("reg_lambda", cfg.tikhonov.reg_lambda)?;
        cfg.tikhonov.reference_frames = doc.parse_or("reference_frames", cfg.tikhonov.reference_frames)?;
        cfg.canny.gaussian_sigma = doc.parse_or("gaussian_sigma", cfg.canny.gaussian_sigma)?;
        cfg.canny.low_thresh = doc.parse_or("low_thresh", cfg.canny.low_thresh)?;
        cfg.canny.high_thresh = doc.parse_or("high_thresh", cfg.canny.high_thresh)?;
        cfg.triptychs = doc.parse_or("triptychs", cfg.triptychs)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("dataset", self.dataset.display());
        doc.set("output_dir", self.output_dir.display());
        doc.set("k", self.k);
        doc.set("split_seed", self.split_seed);
        let ts: Vec<String> = self.env_sequence.iter().map(|t| t.to_string()).collect();
        doc.set("transitions", ts.join(","));
        if let Some(d) = &self.detector {
            doc.set("window", d.window);
            doc.set("top_k", d.top_k);
            doc.set("alpha", d.alpha);
        }
        for (k, v) in self.train.to_kv().entries() {
            doc.set(k, v);
        }
        doc.set("reg_lambda", self.tikhonov.reg_lambda);
        doc.set("reference_frames", self.tikhonov.reference_frames);
        doc.set("gaussian_sigma", self.canny.gaussian_sigma);
        doc.set("low_thresh", self.canny.low_thresh);
        doc.set("high_thresh", self.canny.high_thresh);
        doc.set("triptychs", self.triptychs);
        doc
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_sequence.is_empty() {
            return Err(Error::InvalidArgument("at least one transition is required".into()));
        }
        let mut unique = self.env_sequence.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != self.env_sequence.len() {
            return Err(Error::InvalidArgument("transitions must be distinct".into()));
        }
        self.train.validate()?;
        self.tikhonov.validate()?;
        self.canny.validate()
    }
}

/// Score of one test tuber (averaged over its rotations) for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub transition: Transition,
    pub method: Method,
    pub tuber_id: String,
    pub metrics: MetricReport,
}

/// Mean scores of one (transition, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub transition: Transition,
    pub method: Method,
    pub k: usize,
    pub samples: usize,
    pub rpd: f64,
    pub iou: f64,
    pub ede_cm: f64,
}

/// Per-transition, per-method means. Every group must contain each of
/// `test_ids` exactly once.
pub fn aggregate(rows: &[SampleRow], test_ids: &[String], k: usize) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(Transition, Method), Vec<&SampleRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.transition.clone(), r.method)).or_default().push(r);
    }
    let mut expected: Vec<&String> = test_ids.iter().collect();
    expected.sort();
    let mut out = Vec::with_capacity(groups.len());
    for ((transition, method), members) in groups {
        let mut ids: Vec<&String> = members.iter().map(|r| &r.tuber_id).collect();
        ids.sort();
        if ids != expected {
            return Err(Error::InsufficientData(format!(
                "{transition} {method}: rows cover {ids:?}, expected {expected:?}"
            )));
        }
        let n = members.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| members.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        out.push(AggregateRow {
            transition,
            method,
            k,
            samples: members.len(),
            rpd: mean(|m| m.rpd),
            iou: mean(|m| m.iou),
            ede_cm: mean(|m| m.ede_cm),
        });
    }
    Ok(out)
}

pub fn report_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("transition,method,k,rpd,iou,ede_cm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.transition, r.method, r.k, r.rpd, r.iou, r.ede_cm
        ));
    }
    out
}

/// Aligned text table followed by the published reference values.
pub fn report_text(rows: &[AggregateRow], split: &SplitPlan) -> String {
    let mut out = format!(
        "leave-{}-out | fine-tune tuber {} | test tubers {}\n\n",
        split.k,
        split.finetune_id,
        split.test_ids.join(",")
    );
    out.push_str(&format!(
        "{:<12} {:<20} {:>3} {:>8} {:>8} {:>10}\n",
        "transition", "method", "k", "RPD", "IoU", "EDE(cm)"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<20} {:>3} {:>8.4} {:>8.4} {:>10.4}\n",
            r.transition.to_string(),
            r.method.name(),
            r.k,
            r.rpd,
            r.iou,
            r.ede_cm
        ));
    }
    out.push_str(&reference_footer());
    out
}

/// Published figures from the physical testbed. Synthetic runs are not
/// expected to reproduce them.
pub fn reference_footer() -> String {
    format!(
        "\nreference (physical testbed, not reproduced by synthetic data):\n\
         \x20 leave-2-out mean RPD {REFERENCE_LEAVE2_RPD:.2}, IoU {REFERENCE_LEAVE2_IOU:.2}, EDE {REFERENCE_LEAVE2_EDE_CM:.2} cm\n\
         \x20 mean EDE {REFERENCE_MEAN_EDE_CM:.2} cm over all settings, {REFERENCE_IMPROVEMENT_PCT:.1}% better than the prior best\n"
    )
}

/// Detector outcome of one transition replay.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionOutcome {
    pub transition: Transition,
    /// Index into the replayed stream of the first `CHANGE`.
    pub change_frame: Option<usize>,
    pub sigma_static: f64,
    pub finetune_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub split: SplitPlan,
    pub pretrain_loss: Vec<f64>,
    pub transitions: Vec<TransitionOutcome>,
    pub samples: Vec<SampleRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn row(&self, transition: &Transition, method: Method) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|r| &r.transition == transition && r.method == method)
    }
}

fn impute_all(records: &[SampleRecord], fallback: f64) -> Result<Vec<ImputedSample>> {
    records.iter().map(|r| ImputedSample::from_record(r, fallback)).collect()
}

/// Imputes consecutive recordings as one continuous stream.
fn continuous_stream(records: &[&SampleRecord], links: usize, channels: usize, fallback: f64) -> Result<Vec<RssFrame>> {
    let mut state = ImputationState::new(links, channels, fallback);
    let mut out = Vec::new();
    for r in records {
        for f in &r.frames {
            out.push(state.impute(f)?);
        }
    }
    Ok(out)
}

struct Scorer<'a> {
    geom: &'a NetworkGeometry,
    canny: CannyConfig,
    window: usize,
}

struct Scored {
    metrics: MetricReport,
    /// First rotation's raw reconstruction and region, for the triptych.
    first: (TargetMask, ReconImage, TargetMask),
}

impl Scorer<'_> {
    /// Averages per-rotation metrics; each rotation is scored on the mean
    /// reconstruction of its final `window` frames. Rotations whose target
    /// covers no pixel centre are skipped since RPD is undefined there.
    fn score(&self, samples: &[ImputedSample], recon: impl Fn(&[RssFrame]) -> Result<ReconImage>) -> Result<Scored> {
        let mut sums = [0.0; 3];
        let mut first = None;
        let mut n = 0usize;
        for s in samples.iter().filter(|s| !s.mask.is_empty()) {
            n += 1;
            let tail = s.tail(self.window);
            let image = recon(&tail.frames)?;
            let region = canny_region(&image, &self.canny)?;
            let m = evaluate(&region, &s.mask, self.geom.pixel_size_cm())?;
            sums[0] += m.iou;
            sums[1] += m.rpd;
            sums[2] += m.ede_cm;
            if first.is_none() {
                first = Some((s.mask.clone(), image, region));
            }
        }
        let first = first.ok_or_else(|| {
            let id = samples.first().map_or("?", |s| s.tuber_id.as_str());
            Error::MissingData(format!("{id} has no rotation with a non-empty ground-truth mask"))
        })?;
        let n = n as f64;
        Ok(Scored {
            metrics: MetricReport {
                iou: sums[0] / n,
                rpd: sums[1] / n,
                ede_cm: sums[2] / n,
                pixel_size_cm: self.geom.pixel_size_cm(),
            },
            first,
        })
    }
}

fn neural_recon<'a>(
    model: &'a DriftModel,
    geom: &'a NetworkGeometry,
) -> impl Fn(&[RssFrame]) -> Result<ReconImage> + 'a {
    move |frames| ReconImage::mean(&reconstruct_frames(model, frames, geom)?)
}

fn linear_recon<'a>(
    solver: &'a TikhonovSolver,
    reference: &'a ReferenceRss,
) -> impl Fn(&[RssFrame]) -> Result<ReconImage> + 'a {
    move |frames| solver.solve(&mean_attenuation(frames, reference)?)
}

/// Ground truth, raw reconstruction and region side by side.
pub fn write_triptych(path: &Path, truth: &TargetMask, raw: &ReconImage, region: &TargetMask) -> Result<()> {
    let n = truth.side();
    Error::check_dim("raw side", n, raw.side())?;
    Error::check_dim("region side", n, region.side())?;
    const GAP: usize = 2;
    let width = 3 * n + 2 * GAP;
    let mut bytes = vec![128u8; width * n];
    let raw_gray = raw.to_gray();
    for r in 0..n {
        for c in 0..n {
            let row = r * width;
            bytes[row + c] = truth.pixels()[r * n + c] * 255;
            bytes[row + n + GAP + c] = raw_gray[r * n + c];
            bytes[row + 2 * (n + GAP) + c] = region.pixels()[r * n + c] * 255;
        }
    }
    write_pgm(path, width, n, &bytes)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Full protocol on a dataset directory; writes the report files into
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let ds = DirectoryDataset::open(&config.dataset)?;
    run_experiment_on(&ds, config)
}

/// [`run_experiment`] over any dataset source.
pub fn run_experiment_on(ds: &dyn DatasetSource, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let manifest = ds.manifest();
    let geom = &manifest.geometry;
    for t in &config.env_sequence {
        for env in [&t.from, &t.to] {
            if !manifest.envs().contains(env) {
                return Err(Error::MissingData(format!("environment {env} is not in the dataset")));
            }
        }
    }
    let detector = config.detector.unwrap_or_else(|| DetectorConfig::for_links(geom.link_count()));
    detector.validate(geom.link_count())?;
    let fallback = manifest.baseline_dbm();
    let split = plan_split(ds, config.k, config.split_seed)?;
    create_dir(&config.output_dir)?;

    // pre-training in the first source environment
    let source = &config.env_sequence[0].from;
    let mut train_set = Vec::new();
    for id in &split.train_ids {
        train_set.extend(impute_all(&ds.load_records(id, source)?, fallback)?);
    }
    let init = DriftModel::new(geom, config.train.seed)?;
    let pre = train(init, &train_set, geom, &config.train)?;
    drop(train_set);
    save_checkpoint(&pre.model, &config.output_dir.join(format!("model_{source}.ckpt")))?;
    let mut models: BTreeMap<String, DriftModel> = BTreeMap::new();
    models.insert(source.clone(), pre.model);

    let weights: WeightMatrix = ellipse_weights(geom, manifest.config.lambda_cm)?;
    let solver = TikhonovSolver::new(&weights, config.tikhonov.reg_lambda)?;
    let scorer = Scorer {
        geom,
        canny: config.canny,
        window: detector.window,
    };

    let mut outcomes = Vec::new();
    let mut samples = Vec::new();
    for t in &config.env_sequence {
        let before = models
            .get(&t.from)
            .cloned()
            .ok_or_else(|| Error::MissingData(format!("no model for {}; transitions must chain", t.from)))?;

        // calibrate on the fine-tune tuber's pre-change recordings
        let ft_before = ds.load_records(&split.finetune_id, &t.from)?;
        let ft_after = ds.load_records(&split.finetune_id, &t.to)?;
        let static_streams = impute_all(&ft_before, fallback)?;
        let sigma = calibrate_streams(static_streams.iter().map(|s| s.frames.as_slice()), &detector)?;
        let stream = continuous_stream(&[&ft_before[0], &ft_after[0]], geom.link_count(), geom.channels(), fallback)?;
        let mut state = DetectorState::calibrated(detector, sigma)?;
        let events = state.run(&stream)?;
        write_event_log(&config.output_dir.join(format!("events_{}.csv", t.slug())), &events)?;
        let change_frame = events.iter().find(|e| e.decision == Decision::Change).map(|e| e.frame);

        let (after, finetune_loss) = match change_frame {
            Some(_) => {
                let adapt: Vec<ImputedSample> = impute_all(&ft_after, fallback)?
                    .iter()
                    .map(|s| s.tail(detector.window))
                    .collect();
                let out = one_shot_finetune(before.clone(), &adapt, geom, &config.train)?;
                (out.model, out.loss_curve)
            }
            None => (before.clone(), Vec::new()),
        };
        save_checkpoint(&after, &config.output_dir.join(format!("model_{}.ckpt", t.slug())))?;

        let reference_rec = ds.reference(&t.from)?;
        let reference_frames = continuous_stream(&[&reference_rec], geom.link_count(), geom.channels(), fallback)?;
        let reference = ReferenceRss::from_frames(&reference_frames, config.tikhonov.reference_frames)?;

        for id in &split.test_ids {
            let test = impute_all(&ds.load_records(id, &t.to)?, fallback)?;
            for method in Method::ALL {
                let scored = match method {
                    Method::NeuralNoFinetune => scorer.score(&test, neural_recon(&before, geom))?,
                    Method::NeuralFinetuned => scorer.score(&test, neural_recon(&after, geom))?,
                    Method::Linear => scorer.score(&test, linear_recon(&solver, &reference))?,
                };
                if config.triptychs {
                    let (truth, raw, region) = &scored.first;
                    let name = format!("triptych_{}_{}_{}.pgm", t.slug(), method.name(), id);
                    write_triptych(&config.output_dir.join(name), truth, raw, region)?;
                }
                samples.push(SampleRow {
                    transition: t.clone(),
                    method,
                    tuber_id: id.clone(),
                    metrics: scored.metrics,
                });
            }
        }
        models.insert(t.to.clone(), after);
        outcomes.push(TransitionOutcome {
            transition: t.clone(),
            change_frame,
            sigma_static: sigma,
            finetune_loss,
        });
    }

    let agg = aggregate(&samples, &split.test_ids, split.k)?;
    let out = &config.output_dir;
    std::fs::write(out.join(REPORT_CSV), report_csv(&agg)).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join(REPORT_TXT), report_text(&agg, &split)).map_err(|e| Error::io(out, e))?;
    let rows: Vec<(String, MetricReport)> = samples
        .iter()
        .map(|r| (format!("{}/{}/{}", r.transition, r.method, r.tuber_id), r.metrics))
        .collect();
    write_metric_rows(&out.join(SAMPLES_CSV), &rows)?;
    Ok(ExperimentReport {
        split,
        pretrain_loss: pre.loss_curve,
        transitions: outcomes,
        samples,
        aggregate: agg,
    })
}
