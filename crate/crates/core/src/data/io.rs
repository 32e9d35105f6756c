//! Per-video sequence files and the dataset manifest.
//!
//! Sequence file:
//!
//! ```text
//! # ergoseg-sequence 1
//! # id=video_01
//! # frames=3
//! # fps=30
//! # topology=<hash>
//! # smoothing=1
//! x0,y0,z0,...,x14,y14,z14,label,reba_raw,reba_smooth
//! ```
//!
//! The `smoothing` header and the two REBA columns are optional; when they
//! are missing, or the recorded smoothing differs from the manifest's, the
//! targets are recomputed on load.
//!
//! Manifest:
//!
//! ```text
//! ergoseg-manifest 1
//! smoothing 1
//! topology-file skeleton.txt
//! class upright load=0 coupling=0
//! class lifting load=2 shock=1
//! video videos/v00.csv train
//! video videos/v01.csv val
//! ```
//!
//! `topology-file` is optional (canonical skeleton otherwise). Class ids
//! follow declaration order. The split column is `train`, `val`, `test` or
//! `-`. `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, SkeletonSequence};
use crate::graph::SkeletonTopology;
use crate::model::COORDS;
use crate::reba::{self, RebaContext};

pub const MANIFEST_VERSION: u32 = 1;
const SEQUENCE_MAGIC: &str = "ergoseg-sequence 1";
const MANIFEST_MAGIC: &str = "ergoseg-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "-" => Split::Unassigned,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "-",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub context: RebaContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub smoothing: f64,
    pub topology_file: Option<PathBuf>,
    pub classes: Vec<ClassInfo>,
    pub videos: Vec<ManifestVideo>,
}

impl Manifest {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn contexts(&self) -> Vec<RebaContext> {
        self.classes.iter().map(|c| c.context).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let err = |line: usize, msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (n, first) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let version = first
            .strip_prefix(MANIFEST_MAGIC)
            .map(str::trim)
            .ok_or_else(|| err(n, format!("expected `{MANIFEST_MAGIC} <version>`")))?;
        if version != MANIFEST_VERSION.to_string() {
            return Err(err(n, format!("unsupported manifest version {version}")));
        }
        let mut manifest = Manifest {
            smoothing: reba::DEFAULT_SMOOTHING,
            topology_file: None,
            classes: Vec::new(),
            videos: Vec::new(),
        };
        for (n, line) in lines {
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match key {
                "smoothing" => {
                    let v = rest.first().and_then(|s| s.parse::<f64>().ok()).filter(|v| *v >= 0.0);
                    manifest.smoothing = v.ok_or_else(|| err(n, "smoothing needs a nonnegative number".into()))?;
                }
                "topology-file" => {
                    let p = rest.first().ok_or_else(|| err(n, "topology-file needs a path".into()))?;
                    manifest.topology_file = Some(PathBuf::from(p));
                }
                "class" => {
                    let (name, attrs) = rest.split_first().ok_or_else(|| err(n, "class needs a name".into()))?;
                    let context = parse_context(attrs).map_err(|m| err(n, m))?;
                    manifest.classes.push(ClassInfo {
                        name: (*name).to_string(),
                        context,
                    });
                }
                "video" => {
                    let (p, split) = match rest.as_slice() {
                        [p] => (p, Split::Unassigned),
                        [p, s] => (p, Split::parse(s).ok_or_else(|| err(n, format!("unknown split `{s}`")))?),
                        _ => return Err(err(n, "video needs a path and an optional split".into())),
                    };
                    manifest.videos.push(ManifestVideo {
                        path: PathBuf::from(p),
                        split,
                    });
                }
                other => return Err(err(n, format!("unknown directive `{other}`"))),
            }
        }
        if manifest.classes.is_empty() {
            return Err(err(0, "no classes declared".into()));
        }
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC} {MANIFEST_VERSION}\nsmoothing {}\n", self.smoothing);
        if let Some(p) = &self.topology_file {
            let _ = writeln!(s, "topology-file {}", p.display());
        }
        for c in &self.classes {
            let x = &c.context;
            let _ = writeln!(
                s,
                "class {} load={} shock={} coupling={} static={} repeated={} rapid={}",
                c.name,
                x.load,
                u8::from(x.shock),
                x.coupling,
                u8::from(x.static_posture),
                u8::from(x.repeated_small_range),
                u8::from(x.rapid_large_change)
            );
        }
        for v in &self.videos {
            let _ = writeln!(s, "video {} {}", v.path.display(), v.split.as_str());
        }
        s
    }
}

fn parse_context(attrs: &[&str]) -> Result<RebaContext, String> {
    let mut ctx = RebaContext::default();
    for a in attrs {
        let (k, v) = a.split_once('=').ok_or_else(|| format!("expected key=value, got `{a}`"))?;
        let v: u8 = v.parse().map_err(|_| format!("`{k}` needs a small integer"))?;
        let flag = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("`{k}` must be 0 or 1")),
        };
        match k {
            "load" => ctx.load = v,
            "coupling" => ctx.coupling = v,
            "shock" => ctx.shock = flag(v)?,
            "static" => ctx.static_posture = flag(v)?,
            "repeated" => ctx.repeated_small_range = flag(v)?,
            "rapid" => ctx.rapid_large_change = flag(v)?,
            _ => return Err(format!("unknown class attribute `{k}`")),
        }
    }
    if !ctx.is_valid() {
        return Err("class context out of range (load 0..=2, coupling 0..=3)".into());
    }
    Ok(ctx)
}

/// Writes a sequence file. `smoothing` is recorded when the REBA columns
/// are present.
pub fn write_sequence(
    path: &Path,
    seq: &SkeletonSequence,
    topology_hash: &str,
    smoothing: Option<f64>,
) -> Result<(), DataError> {
    let with_reba = smoothing.is_some() && seq.reba_raw.len() == seq.frames();
    let mut s = format!(
        "# {SEQUENCE_MAGIC}\n# id={}\n# frames={}\n# fps={}\n# topology={topology_hash}\n",
        seq.id,
        seq.frames(),
        seq.fps
    );
    if let (true, Some(sm)) = (with_reba, smoothing) {
        let _ = writeln!(s, "# smoothing={sm}");
    }
    for t in 0..seq.frames() {
        for v in seq.frame(t) {
            let _ = write!(s, "{v},");
        }
        let _ = write!(s, "{}", seq.labels[t]);
        if with_reba {
            let _ = write!(s, ",{},{}", seq.reba_raw[t], seq.reba_smooth[t]);
        }
        s.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, s).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parsed sequence plus the header fields needed for validation.
#[derive(Clone, Debug)]
pub struct SequenceFile {
    pub sequence: SkeletonSequence,
    pub topology_hash: String,
    /// Smoothing recorded with the REBA columns, when present.
    pub smoothing: Option<f64>,
}

/// Reads a sequence file for a skeleton with `joint_count` joints.
pub fn read_sequence(path: &Path, joint_count: usize) -> Result<SequenceFile, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fallback_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut id = None;
    let mut frames = None;
    let mut fps = 0.0;
    let mut topology_hash = String::new();
    let mut smoothing = None;
    let width = joint_count * COORDS;
    let mut seq = SkeletonSequence {
        id: String::new(),
        fps: 0.0,
        joint_count,
        joints: Vec::new(),
        labels: Vec::new(),
        reba_raw: Vec::new(),
        reba_smooth: Vec::new(),
    };
    let mut has_reba = None;
    let mut row = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        let video = || id.clone().unwrap_or_else(|| fallback_id.clone());
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.trim().split_once('=') {
                let bad = || DataError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("bad header value for `{k}`"),
                };
                match k.trim() {
                    "id" => id = Some(v.trim().to_string()),
                    "frames" => frames = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                    "fps" => fps = v.trim().parse::<f64>().map_err(|_| bad())?,
                    "topology" => topology_hash = v.trim().to_string(),
                    "smoothing" => smoothing = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
                    _ => {}
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let corrupt = |msg: String| DataError::Invalid {
            video: video(),
            msg: format!("row {row} (line {}): {msg}", i + 1),
        };
        let reba = match fields.len() {
            n if n == width + 1 => false,
            n if n == width + 3 => true,
            n => return Err(corrupt(format!("{n} fields, expected {} or {}", width + 1, width + 3))),
        };
        if *has_reba.get_or_insert(reba) != reba {
            return Err(corrupt("REBA columns present on some rows only".into()));
        }
        for f in &fields[..width] {
            let v: f64 = f.parse().map_err(|_| corrupt(format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(corrupt(format!("non-finite coordinate `{f}`")));
            }
            seq.joints.push(v);
        }
        let label = fields[width]
            .parse::<usize>()
            .map_err(|_| corrupt(format!("label `{}` is not a class id", fields[width])))?;
        seq.labels.push(label);
        if reba {
            let raw = fields[width + 1]
                .parse::<u8>()
                .ok()
                .filter(|s| (reba::MIN_SCORE..=reba::MAX_SCORE).contains(s))
                .ok_or_else(|| corrupt(format!("raw REBA `{}` outside 1..=15", fields[width + 1])))?;
            let smooth = fields[width + 2]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| corrupt(format!("smoothed REBA `{}` is not finite", fields[width + 2])))?;
            seq.reba_raw.push(raw);
            seq.reba_smooth.push(smooth);
        }
        row += 1;
    }
    seq.id = id.unwrap_or(fallback_id);
    seq.fps = fps;
    if let Some(f) = frames {
        if f != seq.frames() {
            return Err(DataError::Invalid {
                video: seq.id,
                msg: format!("header declares {f} frames, file has {}", row),
            });
        }
    }
    if has_reba != Some(true) {
        smoothing = None;
    }
    Ok(SequenceFile {
        sequence: seq,
        topology_hash,
        smoothing,
    })
}

/// Manifest, topology and validated sequences.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub topology: SkeletonTopology,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.manifest.class_count()
    }

    /// Indices of the sequences assigned to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&i| self.manifest.videos[i].split == split)
            .collect()
    }

    pub fn max_frames(&self) -> usize {
        self.sequences.iter().map(SkeletonSequence::frames).max().unwrap_or(0)
    }
}

/// Loads every video in a manifest, recomputing REBA targets where they are
/// missing or were smoothed with a different parameter. All problems are
/// collected before failing.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest = Manifest::parse(&text, manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let topology = match &manifest.topology_file {
        Some(p) => {
            let path = root.join(p);
            let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            SkeletonTopology::parse(&text).map_err(|e| DataError::Parse {
                path,
                line: 0,
                msg: e.to_string(),
            })?
        }
        None => SkeletonTopology::canonical(),
    };
    let hash = topology.hash();
    let contexts = manifest.contexts();
    let classes = manifest.class_count();
    let mut errors = Vec::new();
    let mut sequences = Vec::with_capacity(manifest.videos.len());
    for video in &manifest.videos {
        let loaded = read_sequence(&root.join(&video.path), topology.joint_count()).and_then(|file| {
            let mut seq = file.sequence;
            if !file.topology_hash.is_empty() && file.topology_hash != hash {
                return Err(DataError::TopologyMismatch {
                    video: seq.id,
                    expected: hash.clone(),
                    found: file.topology_hash,
                });
            }
            if let Some((row, &label)) = seq.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(DataError::LabelOutOfRange {
                    video: seq.id,
                    row,
                    label,
                    classes,
                });
            }
            if file.smoothing != Some(manifest.smoothing) {
                seq.compute_reba(&topology, &contexts, manifest.smoothing)?;
            }
            seq.validate(classes)?;
            Ok(seq)
        });
        match loaded {
            Ok(s) => sequences.push(s),
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => Ok(Dataset {
            root,
            manifest,
            topology,
            sequences,
        }),
        1 => Err(errors.remove(0)),
        _ => Err(DataError::Many(errors)),
    }
}
