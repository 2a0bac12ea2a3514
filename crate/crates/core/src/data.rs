//! Small deterministic datasets standing in for image benchmarks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::network::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Gaussian clusters with unit variance on a circle.
    Blobs,
    /// Two interleaved half circles.
    Moons,
    /// Noisy 8x8 renderings of the ten digits.
    MiniDigits,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "moons" => Ok(DatasetKind::Moons),
            "minidigits" => Ok(DatasetKind::MiniDigits),
            other => invalid(format!("unknown dataset '{other}'")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Moons => "moons",
            DatasetKind::MiniDigits => "minidigits",
        })
    }
}

/// Full recipe for a generated dataset.
///
/// Text form: `<name>[:key=value,...]` with keys `n` (points per class),
/// `seed`, `classes` and `dim` (blobs only), `sep` (blobs center spacing in
/// standard deviations) and `noise` (moons/minidigits).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_per_class: usize,
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n_per_class: usize, seed: u64) -> Self {
        let (classes, dim, noise) = match kind {
            DatasetKind::Blobs => (4, 2, 0.0),
            DatasetKind::Moons => (2, 2, 0.1),
            DatasetKind::MiniDigits => (10, 64, 0.1),
        };
        Self {
            kind,
            n_per_class,
            seed,
            classes,
            dim,
            separation: 6.0,
            noise,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n_per_class: usize) -> Self {
        self.n_per_class = n_per_class;
        self
    }

    pub fn input_shape(&self) -> Shape {
        match self.kind {
            DatasetKind::MiniDigits => Shape::Spatial {
                channels: 1,
                height: 8,
                width: 8,
            },
            _ => Shape::Flat(self.dim),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n_per_class < 2 {
            return invalid("n_per_class must be at least 2");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (inputs, labels) = match self.kind {
            DatasetKind::Blobs => blobs(self, &mut rng)?,
            DatasetKind::Moons => moons(self, &mut rng),
            DatasetKind::MiniDigits => digits(self, &mut rng),
        };
        Ok(Dataset {
            name: self.kind.to_string(),
            input_shape: self.input_shape(),
            inputs,
            labels,
            n_classes: self.classes,
            seed: self.seed,
        })
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = DatasetSpec::new(name.parse()?, 50, 0);
        for kv in rest.split(',').filter(|t| !t.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got '{kv}'")))?;
            let bad = || Error::InvalidArgument(format!("bad value for '{k}': '{v}'"));
            match k {
                "n" => spec.n_per_class = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                "dim" => spec.dim = v.parse().map_err(|_| bad())?,
                "sep" => spec.separation = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                _ => return invalid(format!("unknown dataset option '{k}'")),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:n={},seed={}", self.kind, self.n_per_class, self.seed)?;
        match self.kind {
            DatasetKind::Blobs => write!(
                f,
                ",classes={},dim={},sep={}",
                self.classes, self.dim, self.separation
            ),
            _ => write!(f, ",noise={}", self.noise),
        }
    }
}

/// Labeled points. Points are stored round-robin over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input_shape: Shape,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

/// Generates a named dataset with default options.
pub fn make_dataset(name: &str, n_per_class: usize, seed: u64) -> Result<Dataset> {
    DatasetSpec::new(name.parse()?, n_per_class, seed).generate()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Indices of the points of each class, in storage order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            input_shape: self.input_shape,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return invalid("inputs and labels differ in length");
        }
        let n = self.input_shape.len();
        if self.inputs.iter().any(|x| x.len() != n) {
            return invalid("input of wrong length");
        }
        if self.labels.iter().any(|&y| y >= self.n_classes) {
            return invalid("label out of range");
        }
        if self.class_indices().iter().any(Vec::is_empty) {
            return invalid("a class has no points");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let file = DatasetFile {
            format_version: 1,
            name: self.name.clone(),
            input_shape: self.input_shape.dims(),
            n_classes: self.n_classes,
            seed: self.seed,
            labels: self.labels.clone(),
            inputs: self.inputs.iter().map(|x| codec::encode_all(x)).collect(),
        };
        let mut s = serde_json::to_string(&file).expect("dataset serialization");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let inputs = file
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                codec::decode_all(x).map_err(|k| {
                    Error::InvalidArgument(format!("input {i} entry {k} is not a hex real"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            name: file.name,
            input_shape: Shape::from_dims(&file.input_shape)?,
            inputs,
            labels: file.labels,
            n_classes: file.n_classes,
            seed: file.seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    name: String,
    input_shape: Vec<usize>,
    n_classes: usize,
    seed: u64,
    labels: Vec<usize>,
    inputs: Vec<Vec<String>>,
}

type Points = (Vec<Vec<f64>>, Vec<usize>);

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Points> {
    if spec.classes < 2 {
        return invalid("blobs needs at least two classes");
    }
    if !(2..=8).contains(&spec.dim) {
        return invalid("blobs dimension must be between 2 and 8");
    }
    let k = spec.classes as f64;
    // Adjacent centers on the circle are `separation` apart.
    let radius = spec.separation / (2.0 * (std::f64::consts::PI / k).sin());
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k;
            let mut v = vec![0.0; spec.dim];
            v[0] = radius * angle.cos();
            v[1] = radius * angle.sin();
            v
        })
        .collect();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..spec.n_per_class {
        for (c, center) in centers.iter().enumerate() {
            inputs.push(center.iter().map(|m| m + gauss(rng)).collect());
            labels.push(c);
        }
    }
    Ok((inputs, labels))
}

fn moons(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Points {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..spec.n_per_class {
        for c in 0..2 {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let (x, y) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let mut p = vec![0.0; spec.dim.max(2)];
            p[0] = x + spec.noise * gauss(rng);
            p[1] = y + spec.noise * gauss(rng);
            inputs.push(p);
            labels.push(c);
        }
    }
    (inputs, labels)
}

/// 5x7 bitmaps, one string per row.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

fn digits(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Points {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..spec.n_per_class {
        for (c, glyph) in GLYPHS.iter().enumerate() {
            let dx = rng.random_range(0..=3usize);
            let dy = rng.random_range(0..=1usize);
            let mut img = vec![0.0; 64];
            for (r, row) in glyph.iter().enumerate() {
                for (col, ch) in row.bytes().enumerate() {
                    if ch == b'#' {
                        img[(r + dy) * 8 + col + dx] = 1.0;
                    }
                }
            }
            for px in &mut img {
                *px += spec.noise * gauss(rng);
            }
            inputs.push(img);
            labels.push(c);
        }
    }
    (inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        for name in ["blobs", "moons", "minidigits"] {
            let a = make_dataset(name, 5, 17).unwrap();
            let b = make_dataset(name, 5, 17).unwrap();
            assert_eq!(a.to_text(), b.to_text());
            a.validate().unwrap();
        }
    }

    #[test]
    fn minidigits_cover_all_classes() {
        let ds = make_dataset("minidigits", 2, 1).unwrap();
        assert_eq!(ds.n_classes, 10);
        assert!(ds.class_indices().iter().all(|c| c.len() == 2));
        assert_eq!(ds.inputs[0].len(), 64);
    }

    #[test]
    fn unknown_name_and_tiny_sizes_fail() {
        assert!(matches!(
            make_dataset("mnist", 5, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_dataset("blobs", 1, 0).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let s: DatasetSpec = "blobs:n=7,seed=3,classes=3,dim=4,sep=2.5".parse().unwrap();
        assert_eq!(s.n_per_class, 7);
        assert_eq!(s.dim, 4);
        let again: DatasetSpec = s.to_string().parse().unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = make_dataset("moons", 4, 2).unwrap();
        assert_eq!(Dataset::from_text(&ds.to_text()).unwrap(), ds);
    }
}
