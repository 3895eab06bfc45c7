//! Deterministic synthetic multi-label images.
//!
//! Each label owns one fixed texture patch. A sample draws its label set,
//! stamps the textures of the present labels at random non-overlapping
//! positions on a blank canvas and adds Gaussian pixel noise.
//!
//! On disk a dataset is a directory holding `manifest.json` and one
//! subdirectory per split, each with its own `manifest.json`,
//! `images/NNNNNN.dlt` and an `N×M` `labels.dlt`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dlt;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const VERSION: u32 = 1;
const PLACEMENT_TRIES: usize = 100;

/// Texture family of the label blobs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Oriented sinusoidal gratings; label `j` gets its own orientation and
    /// period and a random phase.
    #[default]
    Grating,
    /// Independent ±1 pixels.
    Binary,
}

/// If label `a` is present, label `b` is switched on with probability `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub a: usize,
    pub b: usize,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    #[serde(rename = "M")]
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(rename = "C_in")]
    pub in_channels: usize,
    /// Side length of every square label blob.
    pub blob: usize,
    #[serde(default)]
    pub texture: Texture,
    pub pattern_seed: u64,
    /// Marginal probability `π_j` of each label before co-occurrence boosts.
    pub label_prob: Vec<f64>,
    #[serde(default)]
    pub cooccurrence: Vec<Cooccurrence>,
    pub noise_std: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            labels: 8,
            height: 32,
            width: 32,
            in_channels: 1,
            blob: 8,
            texture: Texture::Grating,
            pattern_seed: 7,
            label_prob: vec![0.3; 8],
            cooccurrence: Vec::new(),
            noise_std: 0.4,
            train: 4000,
            test: 1000,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.labels == 0 || self.height == 0 || self.width == 0 || self.in_channels == 0 || self.blob == 0 {
            return bad("M, image size, C_in and blob size must all be ≥ 1".into());
        }
        if self.blob > self.height || self.blob > self.width {
            return Err(Error::Placement(format!(
                "a {b}×{b} blob does not fit in a {}×{} image; use a smaller blob",
                self.height,
                self.width,
                b = self.blob
            )));
        }
        if self.label_prob.len() != self.labels {
            return bad(format!(
                "label_prob has {} entries for M = {}",
                self.label_prob.len(),
                self.labels
            ));
        }
        if let Some(p) = self.label_prob.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return bad(format!("label probability {p} outside (0, 1]"));
        }
        for c in &self.cooccurrence {
            if c.a >= self.labels || c.b >= self.labels || !(0.0..=1.0).contains(&c.p) {
                return bad(format!("invalid co-occurrence boost {c:?}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be ≥ 0, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Fixed texture of label `j`, `C_in×blob×blob`, values in `[−1, 1]`.
    pub fn pattern(&self, j: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pattern_seed.wrapping_add(j as u64));
        let (b, c) = (self.blob, self.in_channels);
        match self.texture {
            Texture::Binary => Tensor::from_fn(vec![c, b, b], |_| if rng.random::<bool>() { 1.0 } else { -1.0 }),
            Texture::Grating => {
                let orientations = self.labels.div_ceil(2);
                let angle = std::f64::consts::PI * (j / 2) as f64 / orientations as f64;
                let period = if j.is_multiple_of(2) { 2.5 } else { 5.0 };
                let (kx, ky) = (angle.cos() * std::f64::consts::TAU / period, angle.sin() * std::f64::consts::TAU / period);
                let phases: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                Tensor::from_fn(vec![c, b, b], |k| {
                    let (ch, r, q) = (k / (b * b), (k / b) % b, k % b);
                    (kx * q as f64 + ky * r as f64 + phases[ch]).cos() as f32
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Where one label's blob was stamped; `row`/`col` is the top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub label: usize,
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Placement {
    pub fn center(&self) -> (f64, f64) {
        let h = (self.size as f64 - 1.0) / 2.0;
        (self.row as f64 + h, self.col as f64 + h)
    }

    fn overlaps(&self, other: &Placement) -> bool {
        self.row < other.row + other.size
            && other.row < self.row + self.size
            && self.col < other.col + other.size
            && other.col < self.col + self.size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `C_in×H×W`.
    pub image: Tensor<f32>,
    pub labels: Vec<bool>,
    /// One entry per present label, in label order.
    pub placements: Vec<Placement>,
}

impl LabeledSample {
    pub fn placement(&self, label: usize) -> Option<&Placement> {
        self.placements.iter().find(|p| p.label == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Independent generator for sample `index` of `split`.
fn sample_rng(spec: &GenSpec, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

fn draw_labels(spec: &GenSpec, rng: &mut impl Rng) -> Vec<bool> {
    let mut y: Vec<bool> = spec.label_prob.iter().map(|&p| rng.random::<f64>() < p).collect();
    for c in &spec.cooccurrence {
        let roll = rng.random::<f64>();
        if y[c.a] && !y[c.b] && roll < c.p {
            y[c.b] = true;
        }
    }
    y
}

fn place(spec: &GenSpec, labels: &[bool], rng: &mut impl Rng) -> Result<Vec<Placement>> {
    let present: Vec<usize> = (0..spec.labels).filter(|&j| labels[j]).collect();
    let rows = spec.height - spec.blob + 1;
    let cols = spec.width - spec.blob + 1;
    'layout: for _ in 0..PLACEMENT_TRIES {
        let mut placed: Vec<Placement> = Vec::with_capacity(present.len());
        for &label in &present {
            let spot = (0..PLACEMENT_TRIES).find_map(|_| {
                let cand = Placement {
                    label,
                    row: rng.random_range(0..rows),
                    col: rng.random_range(0..cols),
                    size: spec.blob,
                };
                (!placed.iter().any(|p| p.overlaps(&cand))).then_some(cand)
            });
            match spot {
                Some(p) => placed.push(p),
                None => continue 'layout,
            }
        }
        return Ok(placed);
    }
    Err(Error::Placement(format!(
        "could not place {} non-overlapping {b}×{b} blobs in a {}×{} image after {PLACEMENT_TRIES} attempts; \
         use smaller blobs",
        present.len(),
        spec.height,
        spec.width,
        b = spec.blob
    )))
}

/// Generates sample `index` of `split`; independent of every other sample.
pub fn generate_sample(spec: &GenSpec, patterns: &[Tensor<f32>], split: Split, index: usize) -> Result<LabeledSample> {
    let mut rng = sample_rng(spec, split, index);
    let labels = draw_labels(spec, &mut rng);
    let placements = place(spec, &labels, &mut rng)?;
    let (c, h, w) = (spec.in_channels, spec.height, spec.width);
    let mut pixels = vec![0.0f32; c * h * w];
    for p in &placements {
        let pat = patterns[p.label].data();
        for ch in 0..c {
            for r in 0..p.size {
                for q in 0..p.size {
                    pixels[(ch * h + p.row + r) * w + p.col + q] = pat[(ch * p.size + r) * p.size + q];
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
        for v in &mut pixels {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    Ok(LabeledSample {
        image: Tensor::new(vec![c, h, w], pixels)?,
        labels,
        placements,
    })
}

pub fn generate_split(spec: &GenSpec, split: Split) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let patterns: Vec<Tensor<f32>> = (0..spec.labels).map(|j| spec.pattern(j)).collect();
    let count = match split {
        Split::Train => spec.train,
        Split::Test => spec.test,
    };
    (0..count).map(|i| generate_sample(spec, &patterns, split, i)).collect()
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?,
        test: generate_split(spec, Split::Test)?,
    })
}

/// Replaces label `label`'s blob with fresh background noise. Returns
/// `None` if the label is absent.
pub fn mask_blob(sample: &LabeledSample, label: usize, noise_std: f64, seed: u64) -> Option<Tensor<f32>> {
    let p = sample.placement(label)?;
    let (c, h, w) = match sample.image.shape() {
        &[c, h, w] => (c, h, w),
        _ => return None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).ok()?;
    let mut image = sample.image.clone();
    let data = image.data_mut();
    for ch in 0..c {
        for r in p.row..p.row + p.size {
            for q in p.col..p.col + p.size {
                data[(ch * h + r) * w + q] = noise.sample(&mut rng) as f32;
            }
        }
    }
    Some(image)
}

/// `N×M` 0/1 matrix of the samples' labels.
pub fn label_matrix(samples: &[LabeledSample]) -> Result<Tensor<f32>> {
    let m = samples.first().map_or(0, |s| s.labels.len());
    let data: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![samples.len(), m], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: GenSpec,
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    /// Indices of the present labels.
    pub labels: Vec<usize>,
    pub placements: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub split: Split,
    #[serde(rename = "M")]
    pub labels: usize,
    pub samples: Vec<SampleEntry>,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn save_split(dir: &Path, split: Split, labels: usize, samples: &[LabeledSample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{i:06}.dlt");
        dlt::write(&dir.join(&file), &s.image)?;
        entries.push(SampleEntry {
            file,
            labels: (0..labels).filter(|&j| s.labels[j]).collect(),
            placements: s.placements.clone(),
        });
    }
    if !samples.is_empty() {
        dlt::write(&dir.join("labels.dlt"), &label_matrix(samples)?)?;
    }
    write_json(
        &dir.join(MANIFEST),
        &SplitManifest {
            version: VERSION,
            split,
            labels,
            samples: entries,
        },
    )
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = vec![Split::Train, Split::Test];
    for &split in &splits {
        save_split(&dir.join(split.name()), split, dataset.spec.labels, dataset.split(split))?;
    }
    write_json(
        &dir.join(MANIFEST),
        &DatasetManifest {
            version: VERSION,
            spec: dataset.spec.clone(),
            splits,
        },
    )
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Vec<LabeledSample>> {
    let path = dir.join(MANIFEST);
    let manifest: SplitManifest = read_json(&path)?;
    check_version(&path, manifest.version)?;
    let m = manifest.labels;
    if manifest.samples.is_empty() {
        return Ok(Vec::new());
    }
    let labels = dlt::read(&dir.join("labels.dlt"))?;
    if labels.shape() != [manifest.samples.len(), m] {
        return Err(Error::Validation(format!(
            "{}: labels matrix is {:?} but the manifest lists {} samples with M = {m}",
            dir.display(),
            labels.shape(),
            manifest.samples.len()
        )));
    }
    manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let row: Vec<bool> = labels.data()[i * m..(i + 1) * m].iter().map(|&v| v == 1.0).collect();
            let listed: Vec<usize> = (0..m).filter(|&j| row[j]).collect();
            if listed != entry.labels {
                return Err(Error::Validation(format!(
                    "{}: sample {i} lists labels {:?} but labels.dlt has {listed:?}",
                    dir.display(),
                    entry.labels
                )));
            }
            Ok(LabeledSample {
                image: dlt::read(&dir.join(&entry.file))?,
                labels: row,
                placements: entry.placements.clone(),
            })
        })
        .collect()
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let manifest: DatasetManifest = read_json(&path)?;
    check_version(&path, manifest.version)?;
    manifest.spec.validate()?;
    let mut ds = Dataset {
        spec: manifest.spec,
        train: Vec::new(),
        test: Vec::new(),
    };
    for split in manifest.splits {
        let samples = load_split(&dir.join(split.name()))?;
        if let Some(s) = samples.iter().find(|s| s.labels.len() != ds.spec.labels) {
            return Err(Error::Validation(format!(
                "{} split has {} labels per sample, generator has M = {}",
                split.name(),
                s.labels.len(),
                ds.spec.labels
            )));
        }
        match split {
            Split::Train => ds.train = samples,
            Split::Test => ds.test = samples,
        }
    }
    Ok(ds)
}
