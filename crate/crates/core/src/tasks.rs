//! Few-shot task generation.
//!
//! Regression tasks are sinusoids `A sin(w x + b)` observed at a handful of
//! points. Classification episodes draw `C` classes from one partition of a
//! [`DatasetSplit`] and split each class's examples into support and query
//! sets, relabelling the chosen classes `0..C`.
//!
//! Every sampler takes a task seed rather than a shared generator, so any
//! single task can be regenerated from its seed alone.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::inference::Targets;
use crate::ridge::one_hot_columns;
use crate::rng::seeded;

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_FREQUENCY: (f64, f64) = (0.8, 1.2);
pub const SINE_PHASE: (f64, f64) = (0.0, PI);
pub const SINE_DOMAIN: (f64, f64) = (-5.0, 5.0);

/// Query points per class in classification episodes.
pub const QUERIES_PER_CLASS: usize = 15;
/// Side length of Omniglot images after resizing.
pub const IMAGE_SIDE: usize = 28;
/// Nominal character counts of the train, validation and test partitions
/// before rotation.
pub const OMNIGLOT_SPLIT: [usize; 3] = [1100, 200, 423];
/// Characters in the full Omniglot background and evaluation sets.
pub const OMNIGLOT_CHARACTERS: usize = 1623;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("need {needed} classes, partition has {available}")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class {class} has {available} examples, episode needs {needed}")]
    NotEnoughExamples {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("shot count must be at least 1")]
    NoShots,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: no character directories found")]
    EmptyDataset { path: PathBuf },
    #[error("{path}: cache file is corrupt or from another version")]
    BadCache { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl SineParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outputs {
    Regression { support: Vec<f64>, query: Vec<f64> },
    Classification { support: Vec<usize>, query: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// One input row per support point.
    pub support_x: Tensor,
    pub query_x: Tensor,
    pub outputs: Outputs,
    /// 1 for regression.
    pub ways: usize,
    pub shots: usize,
    pub seed: u64,
    /// The generating function of a regression task.
    pub sine: Option<SineParams>,
}

impl Task {
    pub fn support_count(&self) -> usize {
        self.support_x.rows()
    }

    pub fn query_count(&self) -> usize {
        self.query_x.rows()
    }

    /// Base-learner targets: values as `1 × n` rows, labels one-hot.
    pub fn targets(&self) -> Targets {
        match &self.outputs {
            Outputs::Regression { support, query } => Targets::Regression {
                support: Tensor::row(support.clone()),
                query: Tensor::row(query.clone()),
            },
            Outputs::Classification { support, query } => Targets::Classification {
                support: one_hot_columns(support, self.ways).expect("labels below way count"),
                query: one_hot_columns(query, self.ways).expect("labels below way count"),
            },
        }
    }

    pub fn support_labels(&self) -> Option<&[usize]> {
        match &self.outputs {
            Outputs::Classification { support, .. } => Some(support),
            Outputs::Regression { .. } => None,
        }
    }

    pub fn query_labels(&self) -> Option<&[usize]> {
        match &self.outputs {
            Outputs::Classification { query, .. } => Some(query),
            Outputs::Regression { .. } => None,
        }
    }
}

/// Placement of regression query points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryLayout {
    /// Uniform draws over the domain.
    Random,
    /// Evenly spaced points spanning the domain, endpoints included.
    Grid,
}

pub fn sample_sine_task(seed: u64, shots: usize, queries: usize, layout: QueryLayout) -> Result<Task, TaskError> {
    if shots == 0 {
        return Err(TaskError::NoShots);
    }
    let mut rng = seeded(seed);
    let sine = SineParams {
        amplitude: rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1),
        frequency: rng.random_range(SINE_FREQUENCY.0..=SINE_FREQUENCY.1),
        phase: rng.random_range(SINE_PHASE.0..=SINE_PHASE.1),
    };
    let (lo, hi) = SINE_DOMAIN;
    let sx: Vec<f64> = (0..shots).map(|_| rng.random_range(lo..=hi)).collect();
    let qx: Vec<f64> = match layout {
        QueryLayout::Random => (0..queries).map(|_| rng.random_range(lo..=hi)).collect(),
        QueryLayout::Grid if queries == 1 => vec![0.5 * (lo + hi)],
        QueryLayout::Grid => (0..queries)
            .map(|i| lo + (hi - lo) * i as f64 / (queries - 1) as f64)
            .collect(),
    };
    let outputs = Outputs::Regression {
        support: sx.iter().map(|&x| sine.eval(x)).collect(),
        query: qx.iter().map(|&x| sine.eval(x)).collect(),
    };
    Ok(Task {
        support_x: Tensor::column(sx),
        query_x: Tensor::column(qx),
        outputs,
        ways: 1,
        shots,
        seed,
        sine: Some(sine),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleData {
    F64(Vec<f64>),
    /// Pixel intensities scaled to `[0, 1]` on read.
    U8(Vec<u8>),
}

/// All examples of one class, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSamples {
    pub name: String,
    pub dim: usize,
    pub data: SampleData,
}

impl ClassSamples {
    pub fn len(&self) -> usize {
        let total = match &self.data {
            SampleData::F64(v) => v.len(),
            SampleData::U8(v) => v.len(),
        };
        total / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_example(&self, i: usize, out: &mut Vec<f64>) {
        let r = i * self.dim..(i + 1) * self.dim;
        match &self.data {
            SampleData::F64(v) => out.extend_from_slice(&v[r]),
            SampleData::U8(v) => out.extend(v[r].iter().map(|&p| p as f64 / 255.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ClassSamples>,
    pub validation: Vec<ClassSamples>,
    pub test: Vec<ClassSamples>,
    pub input_dim: usize,
}

impl DatasetSplit {
    pub fn partition(&self, p: Partition) -> &[ClassSamples] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn class_counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// `ways` distinct classes with `shots + queries` distinct examples each.
/// Support rows come first, grouped by episode label.
pub fn sample_classification_episode(
    classes: &[ClassSamples],
    ways: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Task, TaskError> {
    if shots == 0 {
        return Err(TaskError::NoShots);
    }
    if classes.len() < ways {
        return Err(TaskError::NotEnoughClasses {
            needed: ways,
            available: classes.len(),
        });
    }
    let per_class = shots + queries;
    let mut rng = seeded(seed);
    let chosen = index::sample(&mut rng, classes.len(), ways).into_vec();
    let dim = classes[chosen[0]].dim;
    let (mut sx, mut qx) = (Vec::new(), Vec::new());
    let (mut sy, mut qy) = (Vec::new(), Vec::new());
    for (label, &c) in chosen.iter().enumerate() {
        let class = &classes[c];
        if class.len() < per_class {
            return Err(TaskError::NotEnoughExamples {
                class: class.name.clone(),
                needed: per_class,
                available: class.len(),
            });
        }
        let picks = index::sample(&mut rng, class.len(), per_class).into_vec();
        for &i in &picks[..shots] {
            class.push_example(i, &mut sx);
            sy.push(label);
        }
        for &i in &picks[shots..] {
            class.push_example(i, &mut qx);
            qy.push(label);
        }
    }
    Ok(Task {
        support_x: Tensor::matrix(sy.len(), dim, sx),
        query_x: Tensor::matrix(qy.len(), dim, qx),
        outputs: Outputs::Classification {
            support: sy,
            query: qy,
        },
        ways,
        shots,
        seed,
        sine: None,
    })
}

/// Examples per class in generated blob datasets.
pub const BLOB_EXAMPLES: usize = 40;

/// Unit-variance Gaussian clusters whose means are pairwise at least
/// `separation` apart. Classes are split 60/20/20 into partitions.
pub fn make_blob_dataset(classes: usize, dim: usize, separation: f64, seed: u64) -> DatasetSplit {
    let mut rng = seeded(seed);
    let means = blob_means(classes, dim, separation, &mut rng);
    let all: Vec<ClassSamples> = means
        .iter()
        .enumerate()
        .map(|(c, mean)| {
            let mut data = Vec::with_capacity(BLOB_EXAMPLES * dim);
            for _ in 0..BLOB_EXAMPLES {
                data.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            }
            ClassSamples {
                name: format!("blob{c}"),
                dim,
                data: SampleData::F64(data),
            }
        })
        .collect();
    let n_train = (classes * 3).div_ceil(5);
    let n_val = (classes - n_train) / 2;
    let mut rest = all;
    let test = rest.split_off(n_train + n_val);
    let validation = rest.split_off(n_train);
    DatasetSplit {
        train: rest,
        validation,
        test,
        input_dim: dim,
    }
}

/// Means drawn from `N(0, separation² I)`, redrawn until each sits at least
/// `separation` from all earlier ones. The spread grows if a draw keeps
/// failing, which only happens when many classes crowd a low dimension.
pub fn blob_means(classes: usize, dim: usize, separation: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut spread = separation;
    while means.len() < classes {
        let mut placed = false;
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
            let far = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= separation
            });
            if far {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            spread *= 1.5;
        }
    }
    means
}

/// Clockwise quarter turn of a square row-major image.
pub fn rotate90<T: Copy>(image: &[T], side: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(image.len());
    for r in 0..side {
        for c in 0..side {
            out.push(image[(side - 1 - c) * side + r]);
        }
    }
    out
}

const CACHE_MAGIC: &[u8; 8] = b"MVRFOMNI";
const CACHE_VERSION: u32 = 1;
const CACHE_FILE: &str = "metavrf-omniglot.cache";

/// Loads `root/<alphabet>/<character>/*.png`, splits characters with a
/// seeded shuffle and adds the 90°, 180° and 270° rotations of every
/// character as further classes of the same partition.
///
/// The first load writes a binary cache next to the data. Later loads with
/// the same seed read the cache instead.
pub fn load_omniglot(root: &Path, seed: u64) -> Result<DatasetSplit, TaskError> {
    let cache = root.join(CACHE_FILE);
    if cache.exists() {
        if let Ok(split) = read_cache(&cache, seed) {
            return Ok(split);
        }
    }
    let split = build_omniglot(root, seed)?;
    // A read-only data directory only costs the cache.
    let _ = write_cache(&cache, seed, &split);
    Ok(split)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, TaskError> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn load_character(dir: &Path) -> Result<Vec<u8>, TaskError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut pixels = Vec::with_capacity(files.len() * IMAGE_SIDE * IMAGE_SIDE);
    for f in files {
        let img = image::open(&f).map_err(|e| TaskError::Image {
            path: f.clone(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let small = image::imageops::resize(
            &gray,
            IMAGE_SIDE as u32,
            IMAGE_SIDE as u32,
            image::imageops::FilterType::Triangle,
        );
        pixels.extend_from_slice(small.as_raw());
    }
    Ok(pixels)
}

/// Partition sizes for `total` characters.
///
/// The nominal split sums to 1723, a hundred more than the dataset holds.
/// For the full dataset the validation and test sizes are kept and training
/// receives the remaining 1000 characters, which gives 4000 rotated training
/// classes. Other totals are split in proportion to the nominal sizes.
pub fn omniglot_partition_sizes(total: usize) -> [usize; 3] {
    let standard: usize = OMNIGLOT_SPLIT.iter().sum();
    if total == OMNIGLOT_CHARACTERS {
        let [_, val, test] = OMNIGLOT_SPLIT;
        return [total - val - test, val, test];
    }
    let train = (total * OMNIGLOT_SPLIT[0] + standard / 2) / standard;
    let val = ((total * OMNIGLOT_SPLIT[1] + standard / 2) / standard).min(total - train);
    [train, val, total - train - val]
}

fn build_omniglot(root: &Path, seed: u64) -> Result<DatasetSplit, TaskError> {
    let mut characters = Vec::new();
    for alphabet in sorted_dirs(root)? {
        characters.extend(sorted_dirs(&alphabet)?);
    }
    if characters.is_empty() {
        return Err(TaskError::EmptyDataset {
            path: root.to_path_buf(),
        });
    }
    characters.shuffle(&mut seeded(seed));
    let sizes = omniglot_partition_sizes(characters.len());
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let mut parts: [Vec<ClassSamples>; 3] = Default::default();
    let mut start = 0;
    for (p, &size) in sizes.iter().enumerate() {
        for dir in &characters[start..start + size] {
            let base = load_character(dir)?;
            let name = dir
                .strip_prefix(root)
                .unwrap_or(dir)
                .to_string_lossy()
                .into_owned();
            let mut current = base;
            for quarter in 0..4 {
                parts[p].push(ClassSamples {
                    name: format!("{name}@{}", quarter * 90),
                    dim: px,
                    data: SampleData::U8(current.clone()),
                });
                current = current.chunks(px).flat_map(|img| rotate90(img, IMAGE_SIDE)).collect();
            }
        }
        start += size;
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        input_dim: px,
    })
}

fn write_cache(path: &Path, seed: u64, split: &DatasetSplit) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(split.input_dim as u64).to_le_bytes())?;
    for part in [&split.train, &split.validation, &split.test] {
        w.write_all(&(part.len() as u64).to_le_bytes())?;
        for class in part {
            let SampleData::U8(bytes) = &class.data else {
                return Err(io::Error::other("only image datasets are cached"));
            };
            w.write_all(&(class.name.len() as u64).to_le_bytes())?;
            w.write_all(class.name.as_bytes())?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
        }
    }
    w.flush()
}

fn read_cache(path: &Path, seed: u64) -> Result<DatasetSplit, TaskError> {
    let bad = || TaskError::BadCache {
        path: path.to_path_buf(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad())?;
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| bad())?;
    if &magic != CACHE_MAGIC || u32::from_le_bytes(u32b) != CACHE_VERSION {
        return Err(bad());
    }
    let read_u64 = |r: &mut BufReader<File>| -> Result<u64, TaskError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad())?;
        Ok(u64::from_le_bytes(b))
    };
    if read_u64(&mut r)? != seed {
        return Err(bad());
    }
    let dim = read_u64(&mut r)? as usize;
    let mut parts: [Vec<ClassSamples>; 3] = Default::default();
    for part in parts.iter_mut() {
        let n = read_u64(&mut r)?;
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad())?;
            let len = read_u64(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes).map_err(|_| bad())?;
            part.push(ClassSamples {
                name: String::from_utf8(name).map_err(|_| bad())?,
                dim,
                data: SampleData::U8(bytes),
            });
        }
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        input_dim: dim,
    })
}
