//! Episodes: class-folder datasets, deterministic K-way N-shot Q-query
//! sampling, and synthetic color-separable tasks.
//!
//! Index convention inside an [`Episode`]: the `K·N` support images come
//! first, ordered class-major (class `c` occupies positions `c·N..(c+1)·N`),
//! followed by the `K·Q` query images, also class-major.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use image::imageops::FilterType;
use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An 8-bit RGB image, `H×W×3`.
pub type RgbImage = Array3<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: 15,
            image_size: (84, 84),
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        Self {
            ways,
            shots,
            queries,
            ..Self::default()
        }
    }

    pub fn with_image_size(mut self, h: usize, w: usize) -> Self {
        self.image_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries == 0 {
            return Err(Error::Config(format!(
                "episode needs K ≥ 2, N ≥ 1, Q ≥ 1 (got K={}, N={}, Q={})",
                self.ways, self.shots, self.queries
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.ways * self.shots
    }

    pub fn query_len(&self) -> usize {
        self.ways * self.queries
    }

    /// Episode size `T = K·(N+Q)`.
    pub fn total(&self) -> usize {
        self.ways * (self.shots + self.queries)
    }

    /// Class of each support position under the class-major convention.
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.support_len()).map(|j| j / self.shots).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.query_len()).map(|j| j / self.queries).collect()
    }

    /// True when `(K, N, Q)` agree; image size and seed are ignored.
    pub fn same_task_shape(&self, other: &EpisodeSpec) -> bool {
        (self.ways, self.shots, self.queries) == (other.ways, other.shots, other.queries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_images: Vec<RgbImage>,
    pub support_labels: Vec<usize>,
    pub query_images: Vec<RgbImage>,
    pub query_labels: Vec<usize>,
    /// `(dataset class, image index)` per position; empty for synthetic episodes.
    pub sources: Vec<(usize, usize)>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.support_images.len() + self.query_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> impl Iterator<Item = &RgbImage> {
        self.support_images.iter().chain(&self.query_images)
    }

    /// Labels for all `T` positions.
    pub fn labels(&self) -> Vec<usize> {
        self.support_labels
            .iter()
            .chain(&self.query_labels)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    ClassFolders,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone)]
struct ClassEntry {
    name: String,
    files: Vec<PathBuf>,
}

/// A read-only image dataset; images are decoded only when sampled.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    classes: Vec<ClassEntry>,
}

fn ingest(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ingest(dir, e.to_string()))? {
        out.push(entry.map_err(|e| ingest(dir, e.to_string()))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

impl Dataset {
    /// Scans `root`: one subdirectory per class, image files inside. Every
    /// file's header is probed so undecodable files fail here, not mid-run.
    pub fn load(root: impl AsRef<Path>, layout: Layout) -> Result<Self> {
        let root = root.as_ref();
        match layout {
            Layout::ClassFolders => {}
        }
        if !root.is_dir() {
            return Err(ingest(root, "not a directory"));
        }
        let mut classes = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            if files.is_empty() {
                return Err(ingest(&dir, "class folder contains no images"));
            }
            for f in &files {
                image::ImageReader::open(f)
                    .and_then(|r| r.with_guessed_format())
                    .map_err(|e| ingest(f, e.to_string()))?
                    .into_dimensions()
                    .map_err(|e| ingest(f, e.to_string()))?;
            }
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            classes.push(ClassEntry { name, files });
        }
        if classes.is_empty() {
            return Err(ingest(root, "no class folders found"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.files.len()).collect()
    }

    /// Decodes one image and resizes it bilinearly to `size` (H, W).
    pub fn read_image(&self, class: usize, index: usize, size: (usize, usize)) -> Result<RgbImage> {
        let path = &self.classes[class].files[index];
        let img = image::open(path).map_err(|e| ingest(path, e.to_string()))?;
        let rgb = img.to_rgb8();
        let (h, w) = size;
        let rgb = if rgb.dimensions() == (w as u32, h as u32) {
            rgb
        } else {
            image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
        };
        Array3::from_shape_vec((h, w, 3), rgb.into_raw()).map_err(|e| ingest(path, e.to_string()))
    }
}

/// Samples `K` classes uniformly without replacement, then `N+Q` distinct
/// images per class.
pub fn sample_episode<R: Rng>(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    if dataset.num_classes() < spec.ways {
        return Err(Error::Sampling(format!(
            "{}-way episode needs {} classes, dataset has {}",
            spec.ways,
            spec.ways,
            dataset.num_classes()
        )));
    }
    let per_class = spec.shots + spec.queries;
    let classes = sample(rng, dataset.num_classes(), spec.ways).into_vec();
    let mut picks = Vec::with_capacity(spec.ways);
    for &c in &classes {
        let available = dataset.classes[c].files.len();
        if available < per_class {
            return Err(Error::Sampling(format!(
                "class `{}` has {available} images, episode needs {per_class}",
                dataset.classes[c].name
            )));
        }
        picks.push(sample(rng, available, per_class).into_vec());
    }
    let mut ep = Episode {
        support_images: Vec::with_capacity(spec.support_len()),
        support_labels: Vec::with_capacity(spec.support_len()),
        query_images: Vec::with_capacity(spec.query_len()),
        query_labels: Vec::with_capacity(spec.query_len()),
        sources: Vec::with_capacity(spec.total()),
    };
    let mut query_sources = Vec::with_capacity(spec.query_len());
    for (label, (&c, idx)) in classes.iter().zip(&picks).enumerate() {
        for (k, &i) in idx.iter().enumerate() {
            let img = dataset.read_image(c, i, spec.image_size)?;
            if k < spec.shots {
                ep.support_images.push(img);
                ep.support_labels.push(label);
                ep.sources.push((c, i));
            } else {
                ep.query_images.push(img);
                ep.query_labels.push(label);
                query_sources.push((c, i));
            }
        }
    }
    ep.sources.extend(query_sources);
    Ok(ep)
}

/// Parameters of the synthetic color-separable task generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Minimum Euclidean distance between class colors in normalized RGB.
    pub palette_separation: f64,
    /// Standard deviation of additive per-pixel Gaussian noise (normalized RGB).
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            palette_separation: 0.3,
            noise: 0.1,
        }
    }
}

fn rgb_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws `k` colors in `[0,1]³` with pairwise distance at least `separation`.
pub fn sample_palette<R: Rng>(k: usize, separation: f64, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    const RESTARTS: usize = 64;
    const TRIES: usize = 2000;
    for _ in 0..RESTARTS {
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(k);
        for _ in 0..TRIES {
            let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            if colors.iter().all(|o| rgb_distance(o, &c) >= separation) {
                colors.push(c);
                if colors.len() == k {
                    return Ok(colors);
                }
            }
        }
    }
    // Cube corners are pairwise ≥ 1 apart.
    if k <= 8 && separation <= 1.0 {
        let mut corners: Vec<[f64; 3]> = (0..8u8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        for i in (1..corners.len()).rev() {
            corners.swap(i, rng.gen_range(0..=i));
        }
        corners.truncate(k);
        return Ok(corners);
    }
    Err(Error::Config(format!(
        "cannot place {k} colors at separation {separation} in the RGB cube"
    )))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn synth_image<R: Rng>(color: &[f64; 3], size: (usize, usize), params: &SynthParams, rng: &mut R) -> RgbImage {
    let (h, w) = size;
    let noise = (params.noise > 0.0).then(|| Normal::new(0.0, params.noise).expect("valid noise"));
    Array3::from_shape_fn((h, w, 3), |(_, _, k)| {
        let n = noise.as_ref().map(|d| d.sample(rng)).unwrap_or(0.0);
        to_byte(color[k] + n)
    })
}

/// A task whose classes differ by dominant color only.
pub fn synth_episode<R: Rng>(spec: &EpisodeSpec, params: &SynthParams, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    if !(params.palette_separation > 0.0 && params.palette_separation <= 1.0) || !(params.noise >= 0.0) {
        return Err(Error::Config(format!(
            "synthetic parameters out of range: {params:?}"
        )));
    }
    let palette = sample_palette(spec.ways, params.palette_separation, rng)?;
    let mut ep = Episode {
        support_images: Vec::with_capacity(spec.support_len()),
        support_labels: spec.support_labels(),
        query_images: Vec::with_capacity(spec.query_len()),
        query_labels: spec.query_labels(),
        sources: Vec::new(),
    };
    for c in 0..spec.ways {
        for _ in 0..spec.shots {
            ep.support_images.push(synth_image(&palette[c], spec.image_size, params, rng));
        }
    }
    for c in 0..spec.ways {
        for _ in 0..spec.queries {
            ep.query_images.push(synth_image(&palette[c], spec.image_size, params, rng));
        }
    }
    Ok(ep)
}

/// Where episodes come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SynthParams),
    Folder(Arc<Dataset>),
}

impl DataSource {
    pub fn episode<R: Rng>(&self, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
        match self {
            DataSource::Synthetic(p) => synth_episode(spec, p, rng),
            DataSource::Folder(d) => sample_episode(d, spec, rng),
        }
    }

    /// The `index`-th episode of stream `stream` under `seed`. Each index gets
    /// its own generator, so episodes can be produced in any order.
    pub fn nth_episode(&self, spec: &EpisodeSpec, seed: u64, stream: u64, index: u64) -> Result<Episode> {
        self.episode(spec, &mut episode_rng(seed, stream, index))
    }
}

/// Generator for the `index`-th draw of a named stream.
pub fn episode_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Background producer that hands episodes over a bounded channel, in index order.
pub struct Prefetcher {
    rx: Receiver<Result<Episode>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(source: DataSource, spec: EpisodeSpec, seed: u64, stream: u64, count: u64, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for i in 0..count {
                let ep = source.nth_episode(&spec, seed, stream, i);
                let failed = ep.is_err();
                if tx.send(ep).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> EpisodeSpec {
        EpisodeSpec::new(5, 1, 15).with_image_size(8, 8)
    }

    #[test]
    fn defaults() {
        let s = EpisodeSpec::default();
        assert_eq!((s.ways, s.shots, s.queries, s.total()), (5, 1, 15, 80));
        assert!(EpisodeSpec::new(1, 1, 1).validate().is_err());
        assert!(EpisodeSpec::new(2, 0, 1).validate().is_err());
    }

    #[test]
    fn class_major_labels() {
        let s = EpisodeSpec::new(3, 2, 1);
        assert_eq!(s.support_labels(), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(s.query_labels(), vec![0, 1, 2]);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = small();
        let p = SynthParams::default();
        let a = synth_episode(&spec, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_episode(&spec, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.support_images.len(), 5);
        assert_eq!(a.query_images.len(), 75);
        assert_eq!(a.labels().len(), 80);
        for c in 0..5 {
            assert_eq!(a.query_labels.iter().filter(|&&l| l == c).count(), 15);
        }
    }

    #[test]
    fn degenerate_palette_is_constant_color() {
        let spec = EpisodeSpec::new(4, 1, 2).with_image_size(6, 6);
        let p = SynthParams {
            palette_separation: 1.0,
            noise: 0.0,
        };
        let ep = synth_episode(&spec, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut colors = Vec::new();
        for img in ep.images() {
            let first = [img[[0, 0, 0]], img[[0, 0, 1]], img[[0, 0, 2]]];
            assert!(img.outer_iter().all(|row| row.outer_iter().all(|px| [px[0], px[1], px[2]] == first)));
            colors.push(first);
        }
        // same color within a class, distinct across classes
        for (i, a) in colors.iter().enumerate() {
            for (j, b) in colors.iter().enumerate() {
                assert_eq!(a == b, ep.labels()[i] == ep.labels()[j]);
            }
        }
    }

    #[test]
    fn palette_separation_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pal = sample_palette(5, 0.3, &mut rng).unwrap();
            for i in 0..5 {
                for j in i + 1..5 {
                    assert!(rgb_distance(&pal[i], &pal[j]) >= 0.3);
                }
            }
        }
        assert!(sample_palette(9, 1.0, &mut rng).is_err());
    }

    #[test]
    fn episode_rng_streams_are_independent() {
        let a: u64 = episode_rng(1, 2, 3).gen();
        let b: u64 = episode_rng(1, 2, 4).gen();
        let c: u64 = episode_rng(1, 3, 3).gen();
        assert_eq!(a, episode_rng(1, 2, 3).gen::<u64>());
        assert!(a != b && a != c);
    }

    #[test]
    fn prefetcher_matches_direct_generation() {
        let spec = EpisodeSpec::new(2, 1, 1).with_image_size(4, 4);
        let src = DataSource::Synthetic(SynthParams::default());
        let pre: Vec<Episode> = Prefetcher::spawn(src.clone(), spec, 5, 1, 4, 2)
            .map(|e| e.unwrap())
            .collect();
        assert_eq!(pre.len(), 4);
        for (i, ep) in pre.iter().enumerate() {
            assert_eq!(ep, &src.nth_episode(&spec, 5, 1, i as u64).unwrap());
        }
        let mut early = Prefetcher::spawn(src, spec, 5, 1, 100, 1);
        assert!(early.next().is_some());
        drop(early);
        let distinct: HashSet<Vec<u8>> = pre
            .iter()
            .map(|e| e.support_images[0].iter().copied().collect())
            .collect();
        assert_eq!(distinct.len(), 4);
    }
}
