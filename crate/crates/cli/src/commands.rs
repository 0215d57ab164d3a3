use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drift_core::baseline::{mean_attenuation, rti_reconstruct, ReferenceRss, TikhonovConfig};
use drift_core::dataset::{plan_split, read_rss_csv, DatasetSource, DirectoryDataset, Manifest, RSS_FILE, RSS_HEADER};
use drift_core::detector::{calibrate as calibrate_sigma, format_event_log, write_event_log, ChannelPolicy, DetectorConfig, DetectorState};
use drift_core::evalharness::{run_experiment, ExperimentConfig, EXPERIMENT_KEYS, REPORT_CSV, REPORT_TXT};
use drift_core::geometry::ellipse_weights;
use drift_core::image::ReconImage;
use drift_core::kv::KvDoc;
use drift_core::neural::{
    load_checkpoint, one_shot_finetune, reconstruct_frames, save_checkpoint, train as train_model, DriftModel,
    TrainConfig, TRAIN_CONFIG_KEYS,
};
use drift_core::postprocess::{canny_region, evaluate, CannyConfig};
use drift_core::preprocess::{impute_stream, ImputedSample};
use drift_core::simulator::{generate_dataset, RssFrame, SimConfig, SIM_CONFIG_KEYS};
use drift_core::Error;

use crate::settings::{merge, require_path, seed_fallback, Overrides};
use crate::{CalibrateArgs, DetectArgs, DetectorFlags, EvalArgs, FinetuneArgs, GenArgs, ReconstructArgs, TrainArgs};

fn keys<'a>(groups: &[&[&'a str]]) -> Vec<&'a str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn required(doc: &KvDoc, key: &str) -> Result<PathBuf> {
    require_path(doc, key).map_err(|_| invalid(format!("missing required setting `{key}`")))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("out", a.out.as_ref().map(|p| p.display()))
        .add("seed", a.seed)
        .add("tubers", a.tubers)
        .add("rotations", a.rotations)
        .add("frames", a.frames)
        .add("envs", a.envs);
    let allowed = keys(&[SIM_CONFIG_KEYS, &["out"]]);
    let mut doc = merge(a.common.config.as_deref(), &o.0, &allowed)?;
    seed_fallback(&mut doc, "seed")?;
    let out = required(&doc, "out")?;
    let config = SimConfig::from_kv(&doc)?;
    config.validate()?;
    let summary = generate_dataset(&config, &out)?;
    println!("{}", summary.manifest.display());
    Ok(())
}

/// Locates the dataset manifest of a recording: an explicit root, or the
/// directory three levels above the sample directory.
fn manifest_for(recording: &Path, dataset: Option<&Path>) -> Result<(PathBuf, Manifest)> {
    let (dir, file) = if recording.is_dir() {
        (recording.to_path_buf(), recording.join(RSS_FILE))
    } else {
        let dir = recording.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, recording.to_path_buf())
    };
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => dir
            .ancestors()
            .nth(3)
            .map(Path::to_path_buf)
            .ok_or_else(|| invalid(format!("cannot locate the dataset of {}; pass --dataset", recording.display())))?,
    };
    let manifest = Manifest::read(&root)
        .with_context(|| format!("reading the dataset manifest for {}; pass --dataset", recording.display()))?;
    Ok((file, manifest))
}

/// Imputed RSS stream of a recording.
fn read_stream(recording: &Path, dataset: Option<&Path>) -> Result<Vec<RssFrame>> {
    let (file, manifest) = manifest_for(recording, dataset)?;
    read_with(&file, &manifest)
}

fn read_with(file: &Path, manifest: &Manifest) -> Result<Vec<RssFrame>> {
    let g = &manifest.geometry;
    let frames = read_rss_csv(file, g.link_count(), g.channels())?;
    Ok(impute_stream(&frames, manifest.baseline_dbm())?)
}

const DETECTOR_KEYS: &[&str] = &["window", "top_k", "alpha"];

fn add_detector(o: &mut Overrides, d: &DetectorFlags) {
    o.add("window", d.window).add("top_k", d.top_k).add("alpha", d.alpha);
}

fn detector_config(doc: &KvDoc, links: usize) -> Result<DetectorConfig> {
    let mut d = DetectorConfig::for_links(links);
    d.window = doc.parse_or("window", d.window)?;
    d.top_k = doc.parse_or("top_k", d.top_k)?;
    d.alpha = doc.parse_or("alpha", d.alpha)?;
    d.validate(links)?;
    Ok(d)
}

fn calibration_doc(config: &DetectorConfig, links: usize, sigma: f64) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("window", config.window);
    doc.set("top_k", config.top_k);
    doc.set("alpha", config.alpha);
    doc.set("channel_policy", "mean");
    doc.set("links", links);
    doc.set("sigma_static", sigma);
    doc
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("in", a.input.as_ref().map(|p| p.display()))
        .add("dataset", a.dataset.as_ref().map(|p| p.display()))
        .add("out", a.out.as_ref().map(|p| p.display()));
    add_detector(&mut o, &a.detector);
    let doc = merge(a.common.config.as_deref(), &o.0, &keys(&[DETECTOR_KEYS, &["in", "dataset", "out"]]))?;
    let input = required(&doc, "in")?;
    let dataset = doc.get("dataset").map(PathBuf::from);
    let stream = read_stream(&input, dataset.as_deref())?;
    let links = stream.first().map(|f| f.links).unwrap_or(0);
    let config = detector_config(&doc, links)?;
    let sigma = calibrate_sigma(&stream, &config)?;
    let out = calibration_doc(&config, links, sigma);
    match doc.get("out") {
        Some(p) => out.write(Path::new(p))?,
        None => print!("{out}"),
    }
    Ok(())
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("in", a.input.as_ref().map(|p| p.display()))
        .add("calib", a.calib.as_ref().map(|p| p.display()))
        .add("dataset", a.dataset.as_ref().map(|p| p.display()))
        .add("out", a.out.as_ref().map(|p| p.display()));
    add_detector(&mut o, &a.detector);
    let doc = merge(
        a.common.config.as_deref(),
        &o.0,
        &keys(&[DETECTOR_KEYS, &["in", "calib", "dataset", "out"]]),
    )?;
    let input = required(&doc, "in")?;
    let calib = required(&doc, "calib")?;
    let dataset = doc.get("dataset").map(PathBuf::from);
    let (file, manifest) = manifest_for(&input, dataset.as_deref())?;
    let stream = read_with(&file, &manifest)?;
    let links = stream
        .first()
        .map(|f| f.links)
        .ok_or_else(|| Error::InsufficientData("empty stream".into()))?;

    // a static recording is read with the geometry of the monitored one
    let is_rss = calib.is_dir()
        || std::fs::read_to_string(&calib)
            .with_context(|| format!("reading {}", calib.display()))?
            .starts_with(RSS_HEADER);
    let state = if is_rss {
        let config = detector_config(&doc, links)?;
        let static_file = if calib.is_dir() { calib.join(RSS_FILE) } else { calib.clone() };
        let static_stream = read_with(&static_file, &manifest)?;
        DetectorState::calibrated(config, calibrate_sigma(&static_stream, &config)?)?
    } else {
        if DETECTOR_KEYS.iter().any(|k| doc.get(k).is_some()) {
            bail!(invalid("detector settings come from the calibration file"));
        }
        let c = KvDoc::read(&calib)?;
        let config = DetectorConfig {
            window: c.parse_value("window")?,
            top_k: c.parse_value("top_k")?,
            alpha: c.parse_value("alpha")?,
            channel_policy: ChannelPolicy::Mean,
        };
        let cal_links: usize = c.parse_value("links")?;
        if cal_links != links {
            return Err(Error::DimensionMismatch {
                what: "calibration links",
                expected: cal_links,
                got: links,
            }
            .into());
        }
        DetectorState::calibrated(config, c.parse_value("sigma_static")?)?
    };
    let mut state = state;
    let events = state.run(&stream)?;
    match doc.get("out") {
        Some(p) => write_event_log(Path::new(p), &events)?,
        None => std::io::stdout().write_all(format_event_log(&events).as_bytes())?,
    }
    Ok(())
}

fn train_settings(doc: &KvDoc) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    t.apply_kv(doc)?;
    t.validate()?;
    Ok(t)
}

const SPLIT_KEYS: &[&str] = &["k", "split_seed"];

fn split_for(ds: &DirectoryDataset, doc: &KvDoc) -> Result<drift_core::dataset::SplitPlan> {
    Ok(plan_split(ds, doc.parse_or("k", 2usize)?, doc.parse_or("split_seed", 0u64)?)?)
}

fn imputed(records: &[drift_core::simulator::SampleRecord], fallback: f64) -> Result<Vec<ImputedSample>> {
    Ok(records
        .iter()
        .map(|r| ImputedSample::from_record(r, fallback))
        .collect::<drift_core::Result<_>>()?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("dataset", a.dataset.as_ref().map(|p| p.display()))
        .add("out", a.out.as_ref().map(|p| p.display()))
        .add("env", a.env)
        .add("k", a.split.k)
        .add("split_seed", a.split.split_seed)
        .add("epochs", a.epochs)
        .add("learning_rate", a.learning_rate)
        .add("batch_size", a.batch_size)
        .add("seed", a.seed)
        .add("loss_csv", a.loss_csv.as_ref().map(|p| p.display()));
    let allowed = keys(&[TRAIN_CONFIG_KEYS, SPLIT_KEYS, &["dataset", "out", "env", "loss_csv"]]);
    let mut doc = merge(a.common.config.as_deref(), &o.0, &allowed)?;
    seed_fallback(&mut doc, "seed")?;
    let ds = DirectoryDataset::open(&required(&doc, "dataset")?)?;
    let out = required(&doc, "out")?;
    let config = train_settings(&doc)?;
    let m = ds.manifest();
    let env = doc.get("env").map(str::to_string).unwrap_or_else(|| m.envs()[0].clone());
    let split = split_for(&ds, &doc)?;
    let mut samples = Vec::new();
    for id in &split.train_ids {
        samples.extend(imputed(&ds.load_records(id, &env)?, m.baseline_dbm())?);
    }
    let init = DriftModel::new(&m.geometry, config.seed)?;
    let outcome = train_model(init, &samples, &m.geometry, &config)?;
    save_checkpoint(&outcome.model, &out)?;
    if let Some(p) = doc.get("loss_csv") {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in outcome.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        std::fs::write(p, csv).with_context(|| format!("writing {p}"))?;
    }
    let last = outcome.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("{} final_loss={last}", out.display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("model", a.model.as_ref().map(|p| p.display()))
        .add("dataset", a.dataset.as_ref().map(|p| p.display()))
        .add("env", a.env)
        .add("tuber", a.tuber)
        .add("out", a.out.as_ref().map(|p| p.display()))
        .add("window", a.window)
        .add("k", a.split.k)
        .add("split_seed", a.split.split_seed)
        .add("finetune_epochs", a.finetune_epochs)
        .add("finetune_lr", a.finetune_lr)
        .add("seed", a.seed);
    let allowed = keys(&[TRAIN_CONFIG_KEYS, SPLIT_KEYS, &["model", "dataset", "env", "tuber", "out", "window"]]);
    let mut doc = merge(a.common.config.as_deref(), &o.0, &allowed)?;
    seed_fallback(&mut doc, "seed")?;
    let model = load_checkpoint(&required(&doc, "model")?)?;
    let ds = DirectoryDataset::open(&required(&doc, "dataset")?)?;
    let out = required(&doc, "out")?;
    let env = doc
        .get("env")
        .ok_or_else(|| invalid("missing required setting `env`"))?
        .to_string();
    let config = train_settings(&doc)?;
    let m = ds.manifest();
    model.check_geometry(&m.geometry)?;
    let tuber = match doc.get("tuber") {
        Some(t) => t.to_string(),
        None => split_for(&ds, &doc)?.finetune_id,
    };
    let window: usize = doc.parse_or("window", DetectorConfig::for_links(m.geometry.link_count()).window)?;
    let samples: Vec<ImputedSample> = imputed(&ds.load_records(&tuber, &env)?, m.baseline_dbm())?
        .iter()
        .map(|s| s.tail(window))
        .collect();
    let outcome = one_shot_finetune(model, &samples, &m.geometry, &config)?;
    save_checkpoint(&outcome.model, &out)?;
    let last = outcome.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("{} tuber={tuber} final_loss={last}", out.display());
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("sample", a.sample.as_ref().map(|p| p.display()))
        .add("method", a.method)
        .add("model", a.model.as_ref().map(|p| p.display()))
        .add("out", a.out.as_ref().map(|p| p.display()))
        .add("region_out", a.region_out.as_ref().map(|p| p.display()))
        .add("window", a.window)
        .add("reg_lambda", a.reg_lambda)
        .add("reference_env", a.reference_env);
    let allowed = [
        "sample",
        "method",
        "model",
        "out",
        "region_out",
        "window",
        "reg_lambda",
        "reference_frames",
        "reference_env",
        "gaussian_sigma",
        "low_thresh",
        "high_thresh",
    ];
    let doc = merge(a.common.config.as_deref(), &o.0, &allowed)?;
    let sample_dir = required(&doc, "sample")?;
    let out = required(&doc, "out")?;
    let root = sample_dir
        .ancestors()
        .nth(3)
        .ok_or_else(|| invalid("sample must be <dataset>/<tuber>/<env>/<rotation>"))?;
    let ds = DirectoryDataset::open(root)?;
    let m = ds.manifest();
    let geom = &m.geometry;
    let record = drift_core::dataset::load_sample_with(&sample_dir, m)?;
    let frames = impute_stream(&record.frames, m.baseline_dbm())?;
    let window: usize = doc.parse_or("window", DetectorConfig::for_links(geom.link_count()).window)?;
    let tail = &frames[frames.len().saturating_sub(window)..];

    let image: ReconImage = match doc.get("method").unwrap_or("neural") {
        "neural" => {
            let model = load_checkpoint(&required(&doc, "model")?)?;
            model.check_geometry(geom)?;
            ReconImage::mean(&reconstruct_frames(&model, tail, geom)?)?
        }
        "linear" => {
            let tik = TikhonovConfig {
                reg_lambda: doc.parse_or("reg_lambda", TikhonovConfig::default().reg_lambda)?,
                reference_frames: doc.parse_or("reference_frames", TikhonovConfig::default().reference_frames)?,
            };
            let env = doc.get("reference_env").map(str::to_string).unwrap_or_else(|| m.envs()[0].clone());
            let reference_rec = ds.reference(&env)?;
            let reference_frames = impute_stream(&reference_rec.frames, m.baseline_dbm())?;
            let reference = ReferenceRss::from_frames(&reference_frames, tik.reference_frames)?;
            let dg = mean_attenuation(tail, &reference)?;
            let weights = ellipse_weights(geom, m.config.lambda_cm)?;
            rti_reconstruct(&weights, &dg, &tik)?
        }
        other => bail!(invalid(format!("unknown method `{other}`; use neural or linear"))),
    };
    image.write_pgm(&out)?;
    let canny = CannyConfig {
        gaussian_sigma: doc.parse_or("gaussian_sigma", CannyConfig::default().gaussian_sigma)?,
        low_thresh: doc.parse_or("low_thresh", CannyConfig::default().low_thresh)?,
        high_thresh: doc.parse_or("high_thresh", CannyConfig::default().high_thresh)?,
    };
    let region = canny_region(&image, &canny)?;
    if let Some(p) = doc.get("region_out") {
        region.write_pgm(Path::new(p))?;
    }
    match &record.mask {
        Some(mask) if !mask.is_empty() => {
            let r = evaluate(&region, mask, geom.pixel_size_cm())?;
            println!("{} iou={} rpd={} ede_cm={}", out.display(), r.iou, r.rpd, r.ede_cm);
        }
        _ => println!("{}", out.display()),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut o = Overrides::new(&a.common.set);
    o.add("dataset", a.dataset.as_ref().map(|p| p.display()))
        .add("output_dir", a.out.as_ref().map(|p| p.display()))
        .add("transitions", a.transitions)
        .add("k", a.split.k)
        .add("split_seed", a.split.split_seed)
        .add("epochs", a.epochs)
        .add("seed", a.seed);
    let mut doc = merge(a.common.config.as_deref(), &o.0, EXPERIMENT_KEYS)?;
    seed_fallback(&mut doc, "seed")?;
    let config = ExperimentConfig::from_kv(&doc)?;
    let report = run_experiment(&config)?;
    for t in &report.transitions {
        match t.change_frame {
            Some(f) => println!("{}: change detected at frame {f}", t.transition),
            None => println!("{}: no change detected", t.transition),
        }
    }
    print!("{}", std::fs::read_to_string(config.output_dir.join(REPORT_TXT))?);
    println!("{}", config.output_dir.join(REPORT_CSV).display());
    Ok(())
}
