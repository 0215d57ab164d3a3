//! On-disk dataset layout and leave-k-out splits.
//!
//! ```text
//! <root>/manifest.txt                         key=value config + geometry.* block
//! <root>/<tuber_id>/meta.txt                  axes, depth, attenuation, placement
//! <root>/<tuber_id>/<env_id>/<rotation>/rss.csv    frame,link,channel,rss_dbm
//! <root>/<tuber_id>/<env_id>/<rotation>/mask.pgm   binary P5, 0/255
//! <root>/reference/<env_id>/0/...             empty-scene recording
//! ```
//!
//! `<rotation>` is the platform-angle index; the angles themselves are listed
//! in the manifest. A missing `rss_dbm` field, or a missing row, is a lost
//! packet.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::NetworkGeometry;
use crate::image::TargetMask;
use crate::kv::{join, KvDoc};
use crate::simulator::{RssFrame, SampleRecord, SimConfig, TuberInfo, SIM_CONFIG_KEYS};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const META_FILE: &str = "meta.txt";
pub const RSS_FILE: &str = "rss.csv";
pub const MASK_FILE: &str = "mask.pgm";
pub const RSS_HEADER: &str = "frame,link,channel,rss_dbm";
pub const REFERENCE_ID: &str = "reference";
const FORMAT_TAG: &str = "drift-dataset-v1";
const GEOMETRY_PREFIX: &str = "geometry.";

pub fn sample_dir(root: &Path, tuber_id: &str, env_id: &str, rotation_index: usize) -> PathBuf {
    root.join(tuber_id).join(env_id).join(rotation_index.to_string())
}

/// Global description of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: SimConfig,
    pub geometry: NetworkGeometry,
    pub tubers: Vec<String>,
    pub dynamic: Vec<String>,
    pub rotations_deg: Vec<f64>,
}

impl Manifest {
    pub fn from_config(config: &SimConfig, geometry: &NetworkGeometry, tubers: &[TuberInfo]) -> Self {
        Self {
            config: config.clone(),
            geometry: geometry.clone(),
            tubers: tubers.iter().map(|t| t.tuber_id.clone()).collect(),
            dynamic: tubers.iter().filter(|t| t.dynamic).map(|t| t.tuber_id.clone()).collect(),
            rotations_deg: config.rotation_angles(),
        }
    }

    pub fn envs(&self) -> &[String] {
        &self.config.envs
    }

    /// Fallback RSS for cold-start imputation.
    pub fn baseline_dbm(&self) -> f64 {
        self.config.baseline_dbm
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("format", FORMAT_TAG);
        for (k, v) in self.config.to_kv().entries() {
            doc.set(k, v);
        }
        doc.set("tuber_ids", join(&self.tubers));
        doc.set("dynamic_ids", join(&self.dynamic));
        doc.set("rotations_deg", join(&self.rotations_deg));
        for (k, v) in self.geometry.to_kv().entries() {
            doc.set(&format!("{GEOMETRY_PREFIX}{k}"), v);
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let tag = doc.require("format")?;
        if tag != FORMAT_TAG {
            return Err(Error::InvalidArgument(format!("unsupported dataset format `{tag}`")));
        }
        let mut config_doc = KvDoc::new();
        let mut geom_doc = KvDoc::new();
        for (k, v) in doc.entries() {
            if let Some(rest) = k.strip_prefix(GEOMETRY_PREFIX) {
                geom_doc.set(rest, v);
            } else if SIM_CONFIG_KEYS.contains(&k.as_str()) {
                config_doc.set(k, v);
            }
        }
        Ok(Self {
            config: SimConfig::from_kv(&config_doc)?,
            geometry: NetworkGeometry::from_kv(&geom_doc)?,
            tubers: doc.parse_list("tuber_ids")?,
            dynamic: doc.parse_list("dynamic_ids")?,
            rotations_deg: doc.parse_list("rotations_deg")?,
        })
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_FILE);
        self.to_kv().write(&path)?;
        Ok(path)
    }

    pub fn read(root: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::read(&root.join(MANIFEST_FILE))?)
    }
}

pub fn write_tuber_meta(root: &Path, tuber: &TuberInfo) -> Result<()> {
    let dir = root.join(&tuber.tuber_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    tuber.to_kv().write(&dir.join(META_FILE))
}

pub fn read_tuber_meta(root: &Path, tuber_id: &str) -> Result<TuberInfo> {
    TuberInfo::from_kv(&KvDoc::read(&root.join(tuber_id).join(META_FILE))?)
}

/// Writes `rss.csv` (and `mask.pgm` when labeled) into `dir`.
pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rss_path = dir.join(RSS_FILE);
    let file = std::fs::File::create(&rss_path).map_err(|e| Error::io(&rss_path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::with_capacity(32);
    let io = |e| Error::io(&rss_path, e);
    writeln!(out, "{RSS_HEADER}").map_err(io)?;
    for (f, frame) in record.frames.iter().enumerate() {
        for l in 0..frame.links {
            for c in 0..frame.channels {
                line.clear();
                match frame.get(l, c) {
                    Some(v) => writeln!(line, "{f},{l},{c},{v}"),
                    None => writeln!(line, "{f},{l},{c},"),
                }
                .expect("write to String");
                out.write_all(line.as_bytes()).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)?;
    if let Some(mask) = &record.mask {
        mask.write_pgm(&dir.join(MASK_FILE))?;
    }
    Ok(())
}

/// Parses an `rss.csv` stream for a known `links x channels` shape.
pub fn read_rss_csv(path: &Path, links: usize, channels: usize) -> Result<Vec<RssFrame>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut frames: Vec<RssFrame> = Vec::new();
    let mut seen: Vec<Vec<bool>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != RSS_HEADER {
                return Err(Error::parse(path, 1, format!("expected header `{RSS_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| Error::parse(path, lineno, format!("missing field `{name}`")))
        };
        let index = |s: &str, name: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad {name} `{s}`")))
        };
        let f = index(field("frame")?, "frame")?;
        let l = index(field("link")?, "link")?;
        let c = index(field("channel")?, "channel")?;
        let raw = field("rss_dbm")?.trim();
        if parts.next().is_some() {
            return Err(Error::parse(path, lineno, "too many fields"));
        }
        if l >= links || c >= channels {
            return Err(Error::parse(
                path,
                lineno,
                format!("link {l} / channel {c} outside {links} x {channels}"),
            ));
        }
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad rss value `{raw}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, "non-finite rss value"));
            }
            Some(v)
        };
        while frames.len() <= f {
            frames.push(RssFrame::missing(frames.len(), links, channels));
            seen.push(vec![false; links * channels]);
        }
        let slot = l * channels + c;
        if std::mem::replace(&mut seen[f][slot], true) {
            return Err(Error::parse(path, lineno, format!("duplicate entry ({f},{l},{c})")));
        }
        frames[f].values[slot] = value;
    }
    Ok(frames)
}

/// Loads one sample directory, checking it against `manifest`.
pub fn load_sample_with(path: &Path, manifest: &Manifest) -> Result<SampleRecord> {
    let geom = &manifest.geometry;
    let rotation_index: usize = file_name(path)?
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{} is not a rotation directory", path.display())))?;
    let env_dir = path.parent().ok_or_else(|| bad_layout(path))?;
    let tuber_dir = env_dir.parent().ok_or_else(|| bad_layout(path))?;
    let tuber_id = file_name(tuber_dir)?;
    let env_id = file_name(env_dir)?;
    let rotation_deg = if tuber_id == REFERENCE_ID {
        0.0
    } else {
        *manifest.rotations_deg.get(rotation_index).ok_or(Error::OutOfRange {
            index: rotation_index,
            len: manifest.rotations_deg.len(),
        })?
    };
    let frames = read_rss_csv(&path.join(RSS_FILE), geom.link_count(), geom.channels())?;
    if frames.is_empty() {
        return Err(Error::parse(path.join(RSS_FILE), 1, "no frames"));
    }
    let mask_path = path.join(MASK_FILE);
    let mask = if mask_path.exists() {
        let mask = TargetMask::read_pgm(&mask_path)?;
        Error::check_dim("mask side", geom.grid_px(), mask.side())?;
        Some(mask)
    } else {
        None
    };
    Ok(SampleRecord {
        tuber_id,
        env_id,
        rotation_deg,
        frames,
        mask,
    })
}

/// Loads `<root>/<tuber>/<env>/<rotation>`, locating the manifest three
/// levels up.
pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    let root = path
        .parent()
        .and_then(Path::parent)
        .and_then(Path::parent)
        .ok_or_else(|| bad_layout(path))?;
    let manifest = Manifest::read(root)?;
    load_sample_with(path, &manifest)
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| bad_layout(path))
}

fn bad_layout(path: &Path) -> Error {
    Error::InvalidArgument(format!(
        "{} does not follow <root>/<tuber>/<env>/<rotation>",
        path.display()
    ))
}

/// Adapter point for measurement collections. Foreign data formats plug in by
/// implementing this trait and producing [`SampleRecord`]s.
pub trait DatasetSource {
    fn manifest(&self) -> &Manifest;

    /// All rotations of one tuber in one environment, in rotation order.
    fn load_records(&self, tuber_id: &str, env_id: &str) -> Result<Vec<SampleRecord>>;

    /// Empty-scene recording of an environment.
    fn reference(&self, env_id: &str) -> Result<SampleRecord>;
}

/// Dataset stored in the native directory layout.
#[derive(Debug, Clone)]
pub struct DirectoryDataset {
    root: PathBuf,
    manifest: Manifest,
}

impl DirectoryDataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::read(root)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load_dir(&self, tuber_id: &str, env_id: &str) -> Result<Vec<SampleRecord>> {
        let env_dir = self.root.join(tuber_id).join(env_id);
        if !env_dir.is_dir() {
            return Err(Error::MissingData(format!("no {env_id} data for {tuber_id}")));
        }
        let mut out = Vec::new();
        for ri in 0.. {
            let dir = env_dir.join(ri.to_string());
            if !dir.is_dir() {
                break;
            }
            out.push(load_sample_with(&dir, &self.manifest)?);
        }
        if out.is_empty() {
            return Err(Error::MissingData(format!("no rotations under {}", env_dir.display())));
        }
        Ok(out)
    }
}

impl DatasetSource for DirectoryDataset {
    fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn load_records(&self, tuber_id: &str, env_id: &str) -> Result<Vec<SampleRecord>> {
        self.load_dir(tuber_id, env_id)
    }

    fn reference(&self, env_id: &str) -> Result<SampleRecord> {
        let mut recs = self.load_dir(REFERENCE_ID, env_id)?;
        Ok(recs.swap_remove(0))
    }
}

/// Leave-k-out partition of the tuber population.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub k: usize,
    pub train_ids: Vec<String>,
    pub finetune_id: String,
    pub test_ids: Vec<String>,
}

/// Holds out `k` test tubers plus one fine-tuning tuber. Held-out tubers are
/// drawn from `dynamic` (the tubers recorded in changing environments) when
/// it is non-empty, otherwise from the whole population.
pub fn make_split(all_tubers: &[String], dynamic: &[String], k: usize, seed: u64) -> Result<SplitPlan> {
    let total = all_tubers.len();
    if k < 1 || k + 2 > total {
        return Err(Error::InvalidArgument(format!(
            "k must be in [1, {}], got {k}",
            total.saturating_sub(2)
        )));
    }
    let unique: HashSet<&String> = all_tubers.iter().collect();
    if unique.len() != total {
        return Err(Error::InvalidArgument("duplicate tuber ids".into()));
    }
    if let Some(d) = dynamic.iter().find(|d| !unique.contains(d)) {
        return Err(Error::InvalidArgument(format!("dynamic tuber {d} is not in the population")));
    }
    let pool: Vec<&String> = if dynamic.is_empty() {
        all_tubers.iter().collect()
    } else {
        dynamic.iter().collect()
    };
    if pool.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "need {} held-out tubers but only {} are eligible",
            k + 1,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&String> = pool.choose_multiple(&mut rng, k + 1).cloned().collect();
    let finetune_id = picked.remove(0).clone();
    let held: HashSet<&String> = picked.iter().cloned().collect();
    let test_ids: Vec<String> = all_tubers.iter().filter(|t| held.contains(t)).cloned().collect();
    let train_ids = all_tubers
        .iter()
        .filter(|t| !held.contains(t) && **t != finetune_id)
        .cloned()
        .collect();
    Ok(SplitPlan {
        k,
        train_ids,
        finetune_id,
        test_ids,
    })
}

/// Tubers whose ground truth covers at least one pixel centre in some
/// rotation of `env`. Smaller ones can be neither scored nor adapted to.
pub fn visible_tubers(ds: &dyn DatasetSource, ids: &[String], env: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for id in ids {
        if ds.load_records(id, env)?.iter().any(|r| r.mask.as_ref().is_some_and(|m| !m.is_empty())) {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// [`make_split`] over a dataset, holding out only visible dynamic tubers.
pub fn plan_split(ds: &dyn DatasetSource, k: usize, seed: u64) -> Result<SplitPlan> {
    let m = ds.manifest();
    let visible = match m.envs().first() {
        Some(env) if !m.dynamic.is_empty() => visible_tubers(ds, &m.dynamic, env)?,
        _ => Vec::new(),
    };
    if visible.is_empty() && !m.dynamic.is_empty() {
        return Err(Error::MissingData(
            "no dynamic tuber covers a pixel of the reconstruction grid".into(),
        ));
    }
    make_split(&m.tubers, &visible, k, seed)
}
