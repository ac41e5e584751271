//! Labelled single-channel image datasets.
//!
//! Images are stored row-major with values in `[0, 1]`. A [`Dataset`] is
//! immutable once built; subsets are produced by [`restrict`].

mod manifest;
mod pgm;
mod resize;
mod synth;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use manifest::{load_dir, save_dir, MANIFEST_NAME};
pub use pgm::{read_pgm, write_pgm, PgmImage};
pub use resize::resize_bilinear;
pub use synth::{base_pattern, gen_synthetic, SynthConfig};

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
}

#[derive(Debug)]
pub enum DataError {
    InvalidConfig(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    MissingFile(PathBuf),
    MalformedPgm {
        path: PathBuf,
        reason: String,
    },
    Manifest {
        line: usize,
        reason: String,
    },
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    Inconsistent(String),
    UnknownClass(usize),
    EmptyClass {
        class: usize,
        name: String,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid dataset config: {msg}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::MissingFile(path) => write!(f, "missing file {}", path.display()),
            Self::MalformedPgm { path, reason } => {
                write!(f, "malformed PGM {}: {reason}", path.display())
            }
            Self::Manifest { line, reason } => write!(f, "manifest line {line}: {reason}"),
            Self::ShapeMismatch {
                index,
                expected,
                actual,
            } => write!(
                f,
                "image {index} is {}x{}, expected {}x{}",
                actual.0, actual.1, expected.0, expected.1
            ),
            Self::Inconsistent(msg) => write!(f, "inconsistent dataset: {msg}"),
            Self::UnknownClass(id) => write!(f, "unknown class id {id}"),
            Self::EmptyClass { class, name } => write!(f, "class {class} ({name}) has no samples"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::UnknownClass(bad));
        }
        for (index, img) in images.iter().enumerate() {
            if img.len() != height * width {
                return Err(DataError::Inconsistent(format!(
                    "image {index} has {} pixels, expected {}",
                    img.len(),
                    height * width
                )));
            }
        }
        Ok(Dataset {
            height,
            width,
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Sample indices of `class`, in dataset order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Classes with at least one sample, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_classes()];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.n_classes()).filter(|&c| seen[c]).collect()
    }
}

/// Keep only samples whose label is in `class_ids`. Labels keep their
/// original ids; every requested class must have at least one sample.
pub fn restrict(ds: &Dataset, class_ids: &[usize]) -> Result<Dataset, DataError> {
    if class_ids.is_empty() {
        return Err(DataError::InvalidConfig(
            "restrict needs at least one class".into(),
        ));
    }
    let mut keep = vec![false; ds.n_classes()];
    for &c in class_ids {
        if c >= ds.n_classes() {
            return Err(DataError::UnknownClass(c));
        }
        keep[c] = true;
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        if keep[l] {
            images.push(img.clone());
            labels.push(l);
        }
    }
    for &c in class_ids {
        if !labels.contains(&c) {
            return Err(DataError::EmptyClass {
                class: c,
                name: ds.class_names[c].clone(),
            });
        }
    }
    Dataset::new(
        ds.height,
        ds.width,
        images,
        labels,
        ds.class_names.clone(),
        ds.split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = (0..6).map(|i| vec![i as f64 / 10.0; 4]).collect();
        let names = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        Dataset::new(2, 2, images, vec![0, 1, 0, 1, 0, 1], names, Split::Train).unwrap()
    }

    #[test]
    fn restrict_to_all_classes_is_identity() {
        let ds = tiny();
        assert_eq!(restrict(&ds, &[0, 1]).unwrap(), ds);
    }

    #[test]
    fn restrict_keeps_original_ids() {
        let r = restrict(&tiny(), &[1]).unwrap();
        assert_eq!(r.labels(), &[1, 1, 1]);
        assert_eq!(r.n_classes(), 3);
    }

    #[test]
    fn restrict_to_empty_class_is_error() {
        assert!(matches!(
            restrict(&tiny(), &[2]),
            Err(DataError::EmptyClass { class: 2, .. })
        ));
        assert!(matches!(
            restrict(&tiny(), &[7]),
            Err(DataError::UnknownClass(7))
        ));
        assert!(restrict(&tiny(), &[]).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let names = vec!["a".to_string()];
        assert!(Dataset::new(
            2,
            2,
            vec![vec![0.0; 4]],
            vec![1],
            names.clone(),
            Split::Test
        )
        .is_err());
        assert!(Dataset::new(
            2,
            2,
            vec![vec![0.0; 3]],
            vec![0],
            names.clone(),
            Split::Test
        )
        .is_err());
        assert!(Dataset::new(2, 2, vec![vec![0.0; 4]], vec![], names, Split::Test).is_err());
    }
}
