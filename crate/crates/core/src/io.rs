//! Bundle directories, run configuration and atomic report files.
//!
//! A bundle directory holds `manifest.json` plus raw little-endian arrays:
//!
//! | file | type | shape |
//! |---|---|---|
//! | `tracks.f32` | f32 | T × N × 3 (frame-major) |
//! | `visibility.u8` | u8 (0/1) | T × N |
//! | `labels.u8` | u8 (0 background, 1 foreground) | N |
//! | `colors.f32` | f32, optional | N × 3 |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricsConfig;
use crate::optim::OptimConfig;
use crate::restage::LemmaConfig;
use crate::synth::{self, Artifact, MotionScript, SceneSpec};
use crate::visibility::Camera;

pub const BUNDLE_FORMAT: &str = "restage-bundle/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDescriptor {
    pub name: String,
    pub file: String,
    /// `f32le` or `u8`.
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl ArrayDescriptor {
    fn byte_len(&self) -> usize {
        let elem = if self.dtype == "f32le" { 4 } else { 1 };
        self.shape.iter().product::<usize>() * elem
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub frames: usize,
    pub tracks: usize,
    /// Segment boundary of a combined (rewound base + driving) sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<usize>,
    pub cameras: Vec<Camera>,
    pub arrays: Vec<ArrayDescriptor>,
}

fn descriptor(name: &str, file: &str, dtype: &str, shape: Vec<usize>) -> ArrayDescriptor {
    ArrayDescriptor {
        name: name.into(),
        file: file.into(),
        dtype: dtype.into(),
        shape,
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_bundle(bundle: &SequenceBundle, dir: &Path) -> Result<()> {
    write_bundle_with(bundle, dir, None)
}

/// Writes a bundle directory, recording the segment boundary of a combined sequence.
pub fn write_bundle_with(bundle: &SequenceBundle, dir: &Path, t1: Option<usize>) -> Result<()> {
    let (t, n) = (bundle.frame_count(), bundle.track_count());
    let mut arrays = vec![
        descriptor("tracks", "tracks.f32", "f32le", vec![t, n, 3]),
        descriptor("visibility", "visibility.u8", "u8", vec![t, n]),
        descriptor("labels", "labels.u8", "u8", vec![n]),
    ];
    let tracks: Vec<u8> = bundle
        .tracks()
        .iter()
        .flat_map(|p| p.iter().flat_map(|c| c.to_le_bytes()))
        .collect();
    write_atomic(&dir.join("tracks.f32"), &tracks)?;
    let vis: Vec<u8> = bundle.visibility().iter().map(|&v| v as u8).collect();
    write_atomic(&dir.join("visibility.u8"), &vis)?;
    let labels: Vec<u8> = bundle.foreground().iter().map(|&f| f as u8).collect();
    write_atomic(&dir.join("labels.u8"), &labels)?;
    if let Some(colors) = bundle.colors() {
        arrays.push(descriptor("colors", "colors.f32", "f32le", vec![n, 3]));
        let bytes: Vec<u8> = colors
            .iter()
            .flat_map(|c| c.iter().flat_map(|x| x.to_le_bytes()))
            .collect();
        write_atomic(&dir.join("colors.f32"), &bytes)?;
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        frames: t,
        tracks: n,
        t1,
        cameras: bundle.cameras().to_vec(),
        arrays,
    };
    // manifest last, so a complete manifest implies complete arrays
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&path)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::format(
            &path,
            format!("format `{}` is not `{BUNDLE_FORMAT}`", manifest.format),
        ));
    }
    if manifest.cameras.len() != manifest.frames {
        return Err(Error::format(
            &path,
            format!("{} cameras for {} frames", manifest.cameras.len(), manifest.frames),
        ));
    }
    Ok(manifest)
}

fn read_array(dir: &Path, manifest: &Manifest, name: &str, dtype: &str, shape: &[usize]) -> Result<Option<Vec<u8>>> {
    let Some(desc) = manifest.arrays.iter().find(|a| a.name == name) else {
        return Ok(None);
    };
    let mpath = dir.join(MANIFEST_FILE);
    if desc.dtype != dtype {
        return Err(Error::format(&mpath, format!("array `{name}` has dtype `{}`, expected `{dtype}`", desc.dtype)));
    }
    if desc.shape != shape {
        return Err(Error::format(
            &mpath,
            format!("array `{name}` has shape {:?}, expected {:?}", desc.shape, shape),
        ));
    }
    if desc.file.contains('/') || desc.file.contains('\\') || desc.file.starts_with('.') {
        return Err(Error::format(&mpath, format!("array file `{}` must be a plain file name", desc.file)));
    }
    let path = dir.join(&desc.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != desc.byte_len() {
        return Err(Error::format(
            &path,
            format!("expected {} bytes, found {}", desc.byte_len(), bytes.len()),
        ));
    }
    Ok(Some(bytes))
}

fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(k, c)| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format(path, format!("non-finite value at byte offset {}", 4 * k)))
            }
        })
        .collect()
}

fn decode_flags(bytes: &[u8], path: &Path) -> Result<Vec<bool>> {
    bytes
        .iter()
        .enumerate()
        .map(|(k, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(path, format!("byte {b} at offset {k} is not 0 or 1"))),
        })
        .collect()
}

fn triples(v: Vec<f32>) -> Vec<[f32; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Reads a bundle directory and its segment boundary, if any.
pub fn read_bundle_with(dir: &Path) -> Result<(SequenceBundle, Option<usize>)> {
    let m = read_manifest(dir)?;
    let (t, n) = (m.frames, m.tracks);
    let missing = |name: &str| Error::format(dir.join(MANIFEST_FILE), format!("manifest lists no `{name}` array"));
    let file = |name: &str| {
        m.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| dir.join(&a.file))
            .unwrap_or_default()
    };
    let tracks = read_array(dir, &m, "tracks", "f32le", &[t, n, 3])?.ok_or_else(|| missing("tracks"))?;
    let tracks = triples(decode_f32(&tracks, &file("tracks"))?);
    let vis = read_array(dir, &m, "visibility", "u8", &[t, n])?.ok_or_else(|| missing("visibility"))?;
    let visibility = decode_flags(&vis, &file("visibility"))?;
    let labels = read_array(dir, &m, "labels", "u8", &[n])?.ok_or_else(|| missing("labels"))?;
    let foreground = decode_flags(&labels, &file("labels"))?;
    let colors = match read_array(dir, &m, "colors", "f32le", &[n, 3])? {
        Some(bytes) => Some(triples(decode_f32(&bytes, &file("colors"))?)),
        None => None,
    };
    if let Some(t1) = m.t1 {
        if t1 == 0 || t1 > t {
            return Err(Error::format(dir.join(MANIFEST_FILE), format!("t1 = {t1} outside 1..={t}")));
        }
    }
    let bundle = SequenceBundle::new(m.cameras, tracks, visibility, foreground, colors)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((bundle, m.t1))
}

pub fn read_bundle(dir: &Path) -> Result<SequenceBundle> {
    read_bundle_with(dir).map(|(b, _)| b)
}

// ---------------------------------------------------------------------------
// Run configuration

/// Scene generated by the `synth` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    /// Motion of the driving sequence; the base motion when absent.
    pub driving: Option<MotionScript>,
    pub artifacts: Vec<Artifact>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scene: synth::occluded_arm_spec(0),
            driving: Some(synth::occluded_arm_driving()),
            artifacts: Vec::new(),
        }
    }
}

/// Every tunable of a run in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset the document starts from: `desk` or `full`.
    pub preset: String,
    /// Seed of every stochastic step; copied into the section seeds.
    pub seed: u64,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub metrics: MetricsConfig,
    pub lemma: LemmaConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk scale: 20 bases, a few hundred tracks, short sequences.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            seed: 0,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            metrics: MetricsConfig::default(),
            lemma: LemmaConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Full scale: 100 bases and 50 + 50 frames.
    pub fn full() -> Self {
        let mut c = RunConfig::desk();
        c.preset = "full".into();
        c.weights.num_bases = 100;
        c.synth.scene.frames = 50;
        c.synth.scene.num_points = 2000;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected desk or full)"))),
        }
    }

    /// Parses a TOML document layered over the preset it names (desk when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "desk".into(),
        };
        let base = toml::Table::try_from(RunConfig::preset(&preset)?)
            .map_err(|e| Error::Config(one_line(&e.to_string())))?;
        let merged = merge(base, doc);
        let mut config: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        config.apply_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    /// A preset name or the path of a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Ok(c) = RunConfig::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {spec}: {e}")))?;
        RunConfig::from_toml(&text)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optim.seed = seed;
        self.metrics.seed = seed;
        self.synth.scene.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        RunConfig::preset(&self.preset)?;
        self.weights.validate()?;
        self.optim.validate()?;
        self.metrics.validate()?;
        self.synth.scene.validate()
    }

    /// The fully resolved document, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let inner = std::mem::take(b);
                *b = merge(inner, o);
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ground truth of a generated base/driving pair, as written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub base: synth::GroundTruth,
    pub driving: synth::GroundTruth,
}

/// Standard output locations inside an `--out` directory.
pub struct OutDir(pub PathBuf);

impl OutDir {
    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write_resolved(&self, config: &RunConfig) -> Result<()> {
        write_atomic(&self.file("resolved-config.toml"), config.to_toml()?.as_bytes())
    }
}
