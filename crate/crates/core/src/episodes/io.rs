//! Dataset directory: `manifest.txt`, the rule file, and one raster file
//! per episode and view.
//!
//! Raster layout (little-endian): `b"CEMR"`, `b"f32\0"`, `u32` frame count,
//! channels, height, width, then `f32` pixels frame by frame, height-major
//! with channels innermost.

use std::fs;
use std::path::{Path, PathBuf};

use super::Episode;
use crate::embed::{Image, MultiViewFrame, ViewGeometry};
use crate::error::{Error, Result};
use crate::rules::{parse_rules, ContextVector, ScenarioSet};

pub const MANIFEST_FILE: &str = "manifest.txt";
const RULES_FILE: &str = "rules.txt";
const MANIFEST_VERSION: u32 = 1;
const RASTER_MAGIC: &[u8; 4] = b"CEMR";
const RASTER_DTYPE: &[u8; 4] = b"f32\0";
const RASTER_HEADER: usize = 8 + 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub label: usize,
    pub context: ContextVector,
    pub seed: u64,
    /// One raster per view, relative to the dataset directory.
    pub paths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub context_dim: usize,
    pub views: Vec<ViewGeometry>,
    pub frames: usize,
    pub rules_file: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("cemformer-dataset {}\n", self.version);
        s += &format!("classes {}\n", self.classes.join(","));
        s += &format!("context_dim {}\n", self.context_dim);
        s += &format!("frames {}\n", self.frames);
        s += &format!("rules {}\n", self.rules_file);
        for (m, g) in self.views.iter().enumerate() {
            s += &format!("view {m} {} {} {}\n", g.channels, g.height, g.width);
        }
        s += &format!("episodes {}\n", self.entries.len());
        for e in &self.entries {
            s += &format!(
                "episode {} {} {} {} {}\n",
                e.id,
                self.classes[e.label],
                e.context,
                e.seed,
                e.paths.join(" ")
            );
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(origin, format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()));
        let mut field = |key: &str| -> Result<(usize, Vec<&str>)> {
            let (n, parts) = lines.next().ok_or_else(|| bad(0, &format!("missing `{key}`")))?;
            if parts.first() != Some(&key) || parts.len() < 2 {
                return Err(bad(n, &format!("expected `{key}`")));
            }
            Ok((n, parts[1..].to_vec()))
        };
        fn num<T: std::str::FromStr>(s: &str, line: usize, origin: &Path) -> Result<T> {
            s.parse()
                .map_err(|_| Error::format(origin, format!("line {line}: bad number {s:?}")))
        }
        let (n, v) = field("cemformer-dataset")?;
        let version: u32 = num(v[0], n, origin)?;
        if version != MANIFEST_VERSION {
            return Err(bad(n, &format!("unsupported manifest version {version}")));
        }
        let (_, v) = field("classes")?;
        let classes: Vec<String> = v[0].split(',').map(str::to_string).collect();
        let (n, v) = field("context_dim")?;
        let context_dim = num(v[0], n, origin)?;
        let (n, v) = field("frames")?;
        let frames = num(v[0], n, origin)?;
        let (_, v) = field("rules")?;
        let rules_file = v[0].to_string();
        let mut views = Vec::new();
        let mut next_line = lines.next();
        while let Some((n, parts)) = &next_line {
            if parts.first() != Some(&"view") {
                break;
            }
            if parts.len() != 5 || num::<usize>(parts[1], *n, origin)? != views.len() {
                return Err(bad(*n, "expected `view <m> <channels> <height> <width>`"));
            }
            views.push(ViewGeometry::new(
                num(parts[2], *n, origin)?,
                num(parts[3], *n, origin)?,
                num(parts[4], *n, origin)?,
            ));
            next_line = lines.next();
        }
        let (n, parts) = next_line.ok_or_else(|| bad(0, "missing `episodes`"))?;
        if parts.first() != Some(&"episodes") || parts.len() != 2 {
            return Err(bad(n, "expected `episodes <count>`"));
        }
        let count: usize = num(parts[1], n, origin)?;
        let mut entries = Vec::with_capacity(count);
        for (n, parts) in lines.by_ref() {
            if parts.is_empty() {
                continue;
            }
            if parts[0] != "episode" || parts.len() != 5 + views.len() {
                return Err(bad(n, "malformed episode line"));
            }
            let label = classes
                .iter()
                .position(|c| c == parts[2])
                .ok_or_else(|| bad(n, &format!("unknown class {:?}", parts[2])))?;
            let context = ContextVector::from_bits_str(parts[3]).map_err(|e| bad(n, &e.to_string()))?;
            if context.dim() != context_dim {
                return Err(bad(n, "context has the wrong dimension"));
            }
            entries.push(ManifestEntry {
                id: num(parts[1], n, origin)?,
                label,
                context,
                seed: num(parts[4], n, origin)?,
                paths: parts[5..].iter().map(|s| s.to_string()).collect(),
            });
        }
        if entries.len() != count {
            return Err(bad(0, &format!("manifest declares {count} episodes but lists {}", entries.len())));
        }
        Ok(DatasetManifest {
            version,
            classes,
            context_dim,
            views,
            frames,
            rules_file,
            entries,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rules: ScenarioSet,
    pub episodes: Vec<Episode>,
}

fn raster_name(id: u64, view: usize) -> String {
    format!("ep_{id}_view{view}.bin")
}

fn encode_raster(images: &[&Image]) -> Vec<u8> {
    let g = images[0].geometry();
    let mut out = Vec::with_capacity(RASTER_HEADER + images.len() * images[0].pixels().len() * 4);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(RASTER_DTYPE);
    for v in [images.len(), g.channels, g.height, g.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        for p in img.pixels() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

fn decode_raster(bytes: &[u8], path: &Path, expect: ViewGeometry, frames: usize) -> Result<Vec<Image>> {
    if bytes.len() < RASTER_HEADER {
        return Err(Error::format(path, "truncated raster header"));
    }
    if &bytes[0..4] != RASTER_MAGIC {
        return Err(Error::format(path, "bad raster magic"));
    }
    if &bytes[4..8] != RASTER_DTYPE {
        return Err(Error::format(path, "unsupported raster dtype"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if n != frames || ViewGeometry::new(c, h, w) != expect {
        return Err(Error::format(
            path,
            format!("raster is {n} frames of {c}x{h}x{w}, manifest expects {frames} of {expect:?}"),
        ));
    }
    let per = c * h * w;
    let payload = &bytes[RASTER_HEADER..];
    if payload.len() != n * per * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), n * per * 4),
        ));
    }
    payload
        .chunks_exact(per * 4)
        .map(|chunk| {
            let px = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Image::new(c, h, w, px).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

/// Writes rasters first and the manifest last.
pub fn write_dataset(dir: &Path, episodes: &[Episode], rules: &ScenarioSet) -> Result<DatasetManifest> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    let views = first.frames[0].geometry();
    let frames = first.frames.len();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for ep in episodes {
        if ep.frames.len() != frames || ep.frames.iter().any(|f| f.geometry() != views) {
            return Err(Error::contract(format!("episode {} has a different shape", ep.id)));
        }
        let mut paths = Vec::with_capacity(views.len());
        for m in 0..views.len() {
            let name = raster_name(ep.id, m);
            let images: Vec<&Image> = ep.frames.iter().map(|f| &f.views()[m]).collect();
            let path = dir.join(&name);
            fs::write(&path, encode_raster(&images)).map_err(|e| Error::io(&path, e))?;
            paths.push(name);
        }
        entries.push(ManifestEntry {
            id: ep.id,
            label: ep.label,
            context: ep.context.clone(),
            seed: ep.seed,
            paths,
        });
    }
    let rules_path = dir.join(RULES_FILE);
    fs::write(&rules_path, rules.to_text()).map_err(|e| Error::io(&rules_path, e))?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        classes: rules.classes().to_vec(),
        context_dim: rules.dim(),
        views,
        frames,
        rules_file: RULES_FILE.to_string(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text, &path)?;
    let rules_path: PathBuf = dir.join(&manifest.rules_file);
    let rules_text = fs::read_to_string(&rules_path).map_err(|e| Error::io(&rules_path, e))?;
    let rules = parse_rules(&rules_text, &manifest.classes, manifest.context_dim)
        .map_err(|e| Error::format(&rules_path, e.to_string()))?;
    let mut episodes = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let mut per_view = Vec::with_capacity(manifest.views.len());
        for (p, &g) in e.paths.iter().zip(&manifest.views) {
            let path = dir.join(p);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            per_view.push(decode_raster(&bytes, &path, g, manifest.frames)?.into_iter());
        }
        let frames = (0..manifest.frames)
            .map(|_| MultiViewFrame::new(per_view.iter_mut().map(|it| it.next().expect("frame")).collect()))
            .collect::<Result<Vec<_>>>()?;
        episodes.push(Episode {
            id: e.id,
            seed: e.seed,
            label: e.label,
            context: e.context.clone(),
            frames,
        });
    }
    Ok(Dataset {
        manifest,
        rules,
        episodes,
    })
}
