//! On-disk dataset layout.
//!
//! ```text
//! manifest.txt        header line, then "<id> <train|val|test>" per sample
//! images/<id>.ppm     binary PPM
//! labels/<id>.txt     "class_id cx cy w h" per control, normalised
//! texts/<id>.txt      description blocks
//! ```

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::catalog::ClassCatalog;
use super::image::RgbImage;
use super::render::render_scene;
use super::scene::{sample_scene, Annotation, Scene};
use crate::error::{Error, Result};
use crate::parallel;
use crate::text::{generate_description, DescriptionDoc};

pub const MANIFEST: &str = "manifest.txt";
pub const TEST_RATIO: f64 = 0.3;
pub const VAL_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (valid: train, val, test)"))),
        }
    }
}

/// Sample counts; `val` is carved out of the training pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Test share of the total and validation share of the remaining pool,
    /// each rounded to the nearest integer.
    pub fn from_ratios(count: usize, test_ratio: f64, val_ratio: f64) -> Self {
        let test = ((count as f64 * test_ratio).round() as usize).min(count);
        let pool = count - test;
        let val = ((pool as f64 * val_ratio).round() as usize).min(pool);
        Self {
            train: pool - val,
            val,
            test,
        }
    }

    pub fn standard(count: usize) -> Self {
        Self::from_ratios(count, TEST_RATIO, VAL_RATIO)
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split of sample `index`: training pool first (validation at its end), then test.
    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    /// Absent when the dataset was loaded without `texts/`.
    pub doc: Option<DescriptionDoc>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub canvas: u32,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Per-sample seed: FNV-1a over the dataset seed and the index.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&dataset_seed.to_le_bytes());
    h.write(&(index as u64).to_le_bytes());
    h.finish()
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn scene_for(catalog: &ClassCatalog, canvas: u32, dataset_seed: u64, index: usize) -> Scene {
    let seed = sample_seed(dataset_seed, index);
    sample_scene(catalog, canvas, seed, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generates a dataset in memory; a pure function of its arguments.
pub fn generate_dataset(catalog: &ClassCatalog, canvas: u32, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    catalog.validate()?;
    if sizes.total() == 0 {
        return Err(Error::Usage("dataset needs at least one sample".into()));
    }
    let samples = parallel::install(|| {
        (0..sizes.total())
            .into_par_iter()
            .map(|i| {
                let scene = scene_for(catalog, canvas, seed, i);
                Ok(Sample {
                    id: sample_id(i),
                    split: sizes.split_of(i),
                    image: render_scene(&scene, catalog),
                    annotations: scene.annotations(),
                    doc: Some(generate_description(&scene, catalog)?),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(Dataset {
        catalog: catalog.clone(),
        canvas,
        seed,
        samples,
    })
}

pub fn format_labels(anns: &[Annotation]) -> String {
    let mut s = String::new();
    for a in anns {
        // `{}` prints the shortest representation that parses back exactly
        let _ = writeln!(s, "{} {} {} {} {}", a.class_id, a.cx, a.cy, a.w, a.h);
    }
    s
}

pub fn parse_labels(text: &str, n_classes: usize, path: &Path) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |m: String| Error::format(path, format!("line {}", i + 1), m);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let class_id: usize = f[0].parse().map_err(|_| err(format!("bad class id `{}`", f[0])))?;
            if class_id >= n_classes {
                return Err(err(format!("class id {class_id} outside catalog of {n_classes}")));
            }
            let mut v = [0.0; 4];
            for (k, s) in f[1..].iter().enumerate() {
                v[k] = s
                    .parse::<f64>()
                    .ok()
                    .filter(|x| (0.0..=1.0).contains(x))
                    .ok_or_else(|| err(format!("coordinate `{s}` is not a number in [0, 1]")))?;
            }
            Ok(Annotation {
                class_id,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            })
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `ds` under `dir` (created if needed).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "labels", "texts"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = format!(
        "# catalog={} canvas={} seed={} count={}\n",
        ds.catalog.name,
        ds.canvas,
        ds.seed,
        ds.samples.len()
    );
    for s in &ds.samples {
        let _ = writeln!(manifest, "{} {}", s.id, s.split.as_str());
    }
    parallel::install(|| {
        ds.samples.par_iter().try_for_each(|s| {
            write_file(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image.encode_ppm())?;
            write_file(&dir.join("labels").join(format!("{}.txt", s.id)), format_labels(&s.annotations).as_bytes())?;
            if let Some(doc) = &s.doc {
                write_file(&dir.join("texts").join(format!("{}.txt", s.id)), doc.serialize().as_bytes())?;
            }
            Ok::<_, Error>(())
        })
    })??;
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

struct ManifestHeader {
    catalog: String,
    canvas: u32,
    seed: u64,
}

fn parse_header(line: &str, path: &Path) -> Result<ManifestHeader> {
    let err = |m: &str| Error::format(path, "line 1", m.to_string());
    let body = line.strip_prefix("# ").ok_or_else(|| err("missing `# key=value` header"))?;
    let mut catalog = None;
    let mut canvas = None;
    let mut seed = None;
    for kv in body.split_whitespace() {
        match kv.split_once('=') {
            Some(("catalog", v)) => catalog = Some(v.to_string()),
            Some(("canvas", v)) => canvas = v.parse().ok(),
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("count", _)) => {}
            _ => return Err(err(&format!("unexpected header field `{kv}`"))),
        }
    }
    match (catalog, canvas, seed) {
        (Some(catalog), Some(canvas), Some(seed)) => Ok(ManifestHeader { catalog, canvas, seed }),
        _ => Err(err("header needs catalog, canvas and seed")),
    }
}

fn dir_path(dir: &Path, sub: &str, id: &str, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.{ext}"))
}

/// Loads a dataset written by [`write_dataset`]. Description files are
/// read when `texts/` exists; a partially missing `texts/` is an error.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    let header = parse_header(lines.next().unwrap_or(""), &mpath)?;
    let catalog = ClassCatalog::by_name(&header.catalog)
        .map_err(|_| Error::format(&mpath, "line 1", format!("unknown catalog `{}`", header.catalog)))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let loc = format!("line {}", i + 2);
        let (id, split) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(&mpath, &loc, "expected `<id> <split>`"))?;
        let split = Split::parse(split).map_err(|e| Error::format(&mpath, &loc, e.to_string()))?;
        if entries.iter().any(|(e, _): &(String, Split)| e == id) {
            return Err(Error::format(&mpath, &loc, format!("duplicate id `{id}`")));
        }
        entries.push((id.to_string(), split));
    }
    if entries.is_empty() {
        return Err(Error::format(&mpath, "line 2", "manifest lists no samples"));
    }
    let with_texts = dir.join("texts").is_dir();
    let samples = parallel::install(|| {
        entries
            .par_iter()
            .map(|(id, split)| {
                let image = RgbImage::read_ppm(&dir_path(dir, "images", id, "ppm"))?;
                if image.width != header.canvas || image.height != header.canvas {
                    return Err(Error::format(
                        dir_path(dir, "images", id, "ppm"),
                        "header",
                        format!("expected {0}x{0} image", header.canvas),
                    ));
                }
                let lp = dir_path(dir, "labels", id, "txt");
                let labels = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
                let doc = if with_texts {
                    Some(DescriptionDoc::read(&dir_path(dir, "texts", id, "txt"))?)
                } else {
                    None
                };
                Ok(Sample {
                    id: id.clone(),
                    split: *split,
                    image,
                    annotations: parse_labels(&labels, catalog.len(), &lp)?,
                    doc,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(Dataset {
        catalog,
        canvas: header.canvas,
        seed: header.seed,
        samples,
    })
}
