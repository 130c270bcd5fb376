//! Image–caption dataset on disk: generation, stratified splits, a JSONL manifest with
//! content checksums, and loading and batch sampling for training.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl
//! captions/{class}.txt
//! {split}/{class}/{index:05}.png
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captions::grammar::{generate_set, PromptTemplate};
use crate::captions::{CaptionConstraints, CaptionSet};
use crate::error::{Error, Result};
use crate::morphology::{default_stage_table, generate_stage, Canvas, StageClass, StageTable};
use crate::raster::{encode_png, read_image, render, Palette, RasterImage, Rgb, TimelineSpec};
use crate::rng::{derive_seed, rng_for, rng_from_seed, stream_seed};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: &str = "mycoclip-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const IMAGE_EXT: &str = "png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown split '{s}' (expected train, val or test)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("split fractions must be positive: {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` records of one class. Val and test are rounded
    /// shares; train takes the remainder.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let val = (n as f64 * self.val).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        let train = n.saturating_sub(val + test);
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Config(format!(
                "{n} images per class leave an empty split ({train}/{val}/{test})"
            )));
        }
        Ok((train, val, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub per_class: usize,
    pub canvas: Canvas,
    pub seed: u64,
    pub splits: SplitFractions,
    pub background: Rgb,
    pub timeline: TimelineSpec,
    pub palette: Palette,
    pub stages: StageTable,
    pub captions: CaptionConstraints,
    pub template: PromptTemplate,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            per_class: 2000,
            canvas: Canvas::default(),
            seed: 0,
            splits: SplitFractions::default(),
            background: [0, 0, 0],
            timeline: TimelineSpec::default(),
            palette: Palette::default(),
            stages: default_stage_table(),
            captions: CaptionConstraints::default(),
            template: PromptTemplate::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        self.splits.counts(self.per_class)?;
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        for class in StageClass::ALL {
            self.stages
                .get(&class)
                .ok_or_else(|| Error::Config(format!("missing stage parameters for {class}")))?
                .validate()?;
        }
        self.captions.validate()?;
        if self.captions.total == 0 {
            return Err(Error::Config("every class needs at least one caption".into()));
        }
        self.template.validate()
    }

    pub fn total_images(&self) -> usize {
        self.per_class * StageClass::COUNT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub class: StageClass,
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub time_s: f64,
    pub temperature_k: f64,
    /// Caption file of the record's class.
    pub caption_set: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTable {
    pub class: StageClass,
    pub path: String,
    pub provider: String,
    pub count: usize,
    pub deduplicated: bool,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        format: String,
        version: u32,
        config: Box<DatasetConfig>,
    },
    Captions(CaptionTable),
    Image(ImageRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub captions: Vec<CaptionTable>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let encode = |line: &ManifestLine| {
            serde_json::to_string(line).map_err(|e| Error::Data(format!("manifest encode: {e}")))
        };
        let mut out = encode(&ManifestLine::Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: Box::new(self.config.clone()),
        })?;
        out.push('\n');
        for c in &self.captions {
            out.push_str(&encode(&ManifestLine::Captions(c.clone()))?);
            out.push('\n');
        }
        for r in &self.images {
            out.push_str(&encode(&ManifestLine::Image(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut config = None;
        let mut captions = Vec::new();
        let mut images = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ManifestLine = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?;
            match parsed {
                ManifestLine::Header {
                    format,
                    version,
                    config: c,
                } => {
                    if format != MANIFEST_FORMAT || version != MANIFEST_VERSION {
                        return Err(Error::Data(format!("unsupported manifest {format} v{version}")));
                    }
                    config = Some(*c);
                }
                ManifestLine::Captions(c) => captions.push(c),
                ManifestLine::Image(r) => images.push(r),
            }
        }
        let config = config.ok_or_else(|| Error::Data("manifest has no header record".into()))?;
        let manifest = Self {
            config,
            captions,
            images,
        };
        manifest.check_consistency()?;
        Ok(manifest)
    }

    fn check_consistency(&self) -> Result<()> {
        for r in &self.images {
            let table = self
                .captions
                .iter()
                .find(|c| c.path == r.caption_set)
                .ok_or_else(|| Error::Data(format!("{}: unknown caption set {}", r.path, r.caption_set)))?;
            if table.class != r.class {
                return Err(Error::Data(format!(
                    "{}: {} image references {} captions",
                    r.path, r.class, table.class
                )));
            }
            if table.count == 0 {
                return Err(Error::Data(format!("{}: empty caption set", r.path)));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split, class: StageClass) -> usize {
        self.images
            .iter()
            .filter(|r| r.split == split && r.class == class)
            .count()
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.images.iter().filter(|r| r.split == split).count()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn image_rel_path(split: Split, class: StageClass, index: usize) -> String {
    format!("{split}/{class}/{index:05}.{IMAGE_EXT}")
}

fn caption_rel_path(class: StageClass) -> String {
    format!("captions/{class}.txt")
}

/// Seeded per-class shuffle of `0..n` into split labels.
fn assign_splits(config: &DatasetConfig, class: StageClass) -> Result<Vec<Split>> {
    let n = config.per_class;
    let (train, val, _) = config.splits.counts(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(stream_seed(config.seed, "split"), class.ordinal() as u64));
    let mut labels = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(labels)
}

/// Picks a time inside the class's temperature band, then draws the scene with the same
/// stream and renders it.
pub fn render_sample(config: &DatasetConfig, class: StageClass, seed: u64) -> Result<RasterImage> {
    let mut rng = rng_from_seed(seed);
    let tl = &config.timeline;
    let (lo, hi) = tl.band(class);
    let (t_lo, t_hi) = (tl.time_for_temperature(lo), tl.time_for_temperature(hi));
    let time_s = t_lo + rng.random::<f64>() * (t_hi - t_lo);
    let temperature_k = tl.temperature_at(time_s)?;
    let stage = tl.stage_for_temperature(temperature_k)?;
    if stage != class {
        return Err(Error::Data(format!(
            "sampled {temperature_k} K falls in the {stage} band, not {class}"
        )));
    }
    let graph = generate_stage(class, &config.stages, &mut rng, config.canvas, seed)?;
    let mut img = render(&graph, &config.palette, config.background)?;
    img.time_s = time_s;
    img.temperature_k = temperature_k;
    Ok(img)
}

pub fn image_seed(master: u64, class: StageClass, index: usize) -> u64 {
    derive_seed(stream_seed(master, class.name()), index as u64)
}

pub fn caption_seed(master: u64) -> u64 {
    stream_seed(master, "captions")
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn owned_dirs(out: &Path) -> Vec<PathBuf> {
    Split::ALL
        .iter()
        .map(|s| out.join(s.name()))
        .chain(std::iter::once(out.join("captions")))
        .collect()
}

fn clean_outputs(out: &Path, created_root: bool) {
    if created_root {
        let _ = fs::remove_dir_all(out);
        return;
    }
    for dir in owned_dirs(out) {
        let _ = fs::remove_dir_all(dir);
    }
    let _ = fs::remove_file(out.join(MANIFEST_FILE));
    let _ = fs::remove_file(out.join(MANIFEST_FILE).with_extension("tmp"));
}

/// Generates every image and the template caption sets, then writes the manifest last.
/// On failure everything this call wrote is removed again.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let created_root = !out.exists();
    let result = build_into(config, out);
    if result.is_err() {
        clean_outputs(out, created_root);
    }
    result
}

fn build_into(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    for dir in owned_dirs(out) {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    for split in Split::ALL {
        for class in StageClass::ALL {
            let dir = out.join(split.name()).join(class.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let caption_dir = out.join("captions");
    fs::create_dir_all(&caption_dir).map_err(|e| Error::io(&caption_dir, e))?;

    let mut plan = Vec::with_capacity(config.total_images());
    for class in StageClass::ALL {
        let labels = assign_splits(config, class)?;
        for (index, split) in labels.into_iter().enumerate() {
            plan.push((class, index, split));
        }
    }

    let images: Vec<ImageRecord> = plan
        .par_iter()
        .map(|&(class, index, split)| {
            let seed = image_seed(config.seed, class, index);
            let img = render_sample(config, class, seed)?;
            let rel = image_rel_path(split, class, index);
            let path = out.join(&rel);
            let bytes = encode_png(&img).map_err(|detail| Error::Image {
                path: path.clone(),
                detail,
            })?;
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ImageRecord {
                path: rel,
                class,
                index,
                split,
                seed,
                time_s: img.time_s,
                temperature_k: img.temperature_k,
                caption_set: caption_rel_path(class),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_>>()?;

    let sets = StageClass::ALL
        .iter()
        .map(|&class| generate_set(class, &config.template, &config.captions, caption_seed(config.seed)))
        .collect::<Result<Vec<_>>>()?;
    let captions = write_caption_sets(out, &sets)?;

    let manifest = DatasetManifest {
        config: config.clone(),
        captions,
        images,
    };
    atomic_write(&manifest_path, manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

fn write_caption_sets(out: &Path, sets: &[CaptionSet]) -> Result<Vec<CaptionTable>> {
    let mut tables = Vec::with_capacity(sets.len());
    for class in StageClass::ALL {
        let set = sets
            .iter()
            .find(|s| s.class == class)
            .ok_or_else(|| Error::Config(format!("no caption set for {class}")))?;
        if set.is_empty() {
            return Err(Error::Config(format!("caption set for {class} is empty")));
        }
        let rel = caption_rel_path(class);
        let path = out.join(&rel);
        let text = set.to_text();
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        tables.push(CaptionTable {
            class,
            path: rel,
            provider: set.provider.clone(),
            count: set.len(),
            deduplicated: set.deduplicated,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    Ok(tables)
}

/// Replaces the caption files of an existing dataset and rewrites its manifest.
pub fn replace_captions(manifest_path: &Path, sets: &[CaptionSet]) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut manifest = DatasetManifest::from_jsonl(&text)?;
    let root = manifest_root(manifest_path);
    fs::create_dir_all(root.join("captions")).map_err(|e| Error::io(root.join("captions"), e))?;
    manifest.captions = write_caption_sets(&root, sets)?;
    atomic_write(manifest_path, manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

/// A verified dataset: manifest records plus the class caption sets.
#[derive(Debug, Clone)]
pub struct DatasetView {
    root: PathBuf,
    manifest_sha256: String,
    manifest: DatasetManifest,
    caption_sets: BTreeMap<StageClass, CaptionSet>,
}

/// Reads a manifest and verifies every image and caption checksum.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetView> {
    let raw = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let text = String::from_utf8(raw.clone())
        .map_err(|_| Error::Data(format!("{}: manifest is not UTF-8", manifest_path.display())))?;
    let manifest = DatasetManifest::from_jsonl(&text)?;
    let root = manifest_root(manifest_path);
    let verify = |rel: &str, expected: &str| -> Result<()> {
        let path = root.join(rel);
        if file_sha256(&path)? != expected {
            return Err(Error::Integrity { path });
        }
        Ok(())
    };
    manifest
        .images
        .par_iter()
        .map(|r| verify(&r.path, &r.sha256))
        .collect::<Result<Vec<()>>>()?;
    let mut caption_sets = BTreeMap::new();
    for table in &manifest.captions {
        verify(&table.path, &table.sha256)?;
        let set = CaptionSet::read(&root.join(&table.path), table.class, &table.provider)?;
        caption_sets.insert(table.class, set);
    }
    Ok(DatasetView {
        root,
        manifest_sha256: sha256_hex(&raw),
        manifest,
        caption_sets,
    })
}

impl DatasetView {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn manifest_sha256(&self) -> &str {
        &self.manifest_sha256
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.manifest.images.iter().filter(|r| r.split == split).collect()
    }

    pub fn caption_set(&self, class: StageClass) -> Result<&CaptionSet> {
        self.caption_sets
            .get(&class)
            .ok_or_else(|| Error::Config(format!("dataset has no captions for {class}")))
    }

    pub fn caption_sets(&self) -> &BTreeMap<StageClass, CaptionSet> {
        &self.caption_sets
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<RasterImage> {
        let mut img = read_image(&self.root.join(&record.path), record.class)?;
        img.time_s = record.time_s;
        img.temperature_k = record.temperature_k;
        Ok(img)
    }

    /// Decodes every image of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(ImageRecord, RasterImage)>> {
        self.split(split)
            .into_par_iter()
            .map(|r| Ok((r.clone(), self.load_image(r)?)))
            .collect()
    }
}

/// One training example: an image paired with a caption drawn from its class set.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: ImageRecord,
    pub image: RasterImage,
    pub caption: String,
    pub class: StageClass,
}

/// Uniformly chosen caption of `class`.
pub fn draw_caption<'a, R: Rng + ?Sized>(view: &'a DatasetView, class: StageClass, rng: &mut R) -> Result<&'a str> {
    let set = view.caption_set(class)?;
    if set.is_empty() {
        return Err(Error::Config(format!("caption set for {class} is empty")));
    }
    Ok(&set.captions[rng.random_range(0..set.len())].text)
}

/// `batch_size` distinct records of `split`, each with a uniformly drawn caption.
pub fn sample_batch<R: Rng + ?Sized>(
    view: &DatasetView,
    split: Split,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let records = view.split(split);
    if records.is_empty() {
        return Err(Error::Size(format!("split {split} is empty")));
    }
    if batch_size > records.len() {
        return Err(Error::Size(format!(
            "batch of {batch_size} exceeds the {} records of split {split}",
            records.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, records.len(), batch_size).into_vec();
    chosen
        .into_iter()
        .map(|i| {
            let record = records[i].clone();
            let caption = draw_caption(view, record.class, rng)?.to_string();
            Ok(Sample {
                image: view.load_image(&record)?,
                class: record.class,
                caption,
                record,
            })
        })
        .collect()
}

/// A shuffled pass over `0..n` cut into consecutive batches. The final batch may be
/// shorter; one-element remainders are dropped since a single pair carries no contrast.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Size("batch size must be positive".into()));
    }
    if n == 0 {
        return Err(Error::Size("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() > 1 || n == 1)
        .map(<[usize]>::to_vec)
        .collect())
}
