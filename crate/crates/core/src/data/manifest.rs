//! Directory datasets: a header-less `class_name,relative_path` CSV next to
//! 8-bit PGM files.

use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{read_pgm, write_pgm};
use super::resize::resize_bilinear;
use super::{DataError, Dataset, Split};

pub const MANIFEST_NAME: &str = "manifest.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load every image listed in `manifest_path`. Classes are numbered by first
/// appearance. With `target` set, images are bilinearly resized to
/// `target × target`; without it every image must already share one size.
pub fn load_dir(
    manifest_path: &Path,
    split: Split,
    target: Option<usize>,
) -> Result<Dataset, DataError> {
    if !manifest_path.exists() {
        return Err(DataError::MissingFile(manifest_path.to_path_buf()));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(manifest_path)
        .map_err(|e| DataError::Manifest {
            line: 0,
            reason: e.to_string(),
        })?;

    let mut class_names: Vec<String> = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| DataError::Manifest {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(DataError::Manifest {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let (name, rel) = (&record[0], &record[1]);
        let label = match class_names.iter().position(|c| c == name) {
            Some(l) => l,
            None => {
                class_names.push(name.to_string());
                class_names.len() - 1
            }
        };
        let img = read_pgm(&root.join(rel))?;
        let unit = img.to_unit();
        let (pixels, h, w) = match target {
            Some(t) if (img.height, img.width) != (t, t) => {
                (resize_bilinear(&unit, img.height, img.width, t, t), t, t)
            }
            _ => (unit, img.height, img.width),
        };
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(DataError::ShapeMismatch {
                    index: images.len(),
                    expected: s,
                    actual: (h, w),
                })
            }
            _ => {}
        }
        images.push(pixels);
        labels.push(label);
    }
    let (h, w) = shape.ok_or_else(|| DataError::Manifest {
        line: 0,
        reason: "manifest lists no images".into(),
    })?;
    Dataset::new(h, w, images, labels, class_names, split)
}

/// Write `ds` as `dir/manifest.csv` plus one PGM per image under
/// `dir/<class_name>/`. Pixels are quantised with rounding to 8 bits.
pub fn save_dir(ds: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&manifest)
        .map_err(|e| DataError::Manifest {
            line: 0,
            reason: e.to_string(),
        })?;
    for (i, (img, &label)) in ds.images().iter().zip(ds.labels()).enumerate() {
        let name = &ds.class_names()[label];
        let class_dir = dir.join(name);
        fs::create_dir_all(&class_dir).map_err(io_err(&class_dir))?;
        let rel = format!("{name}/{i:06}.pgm");
        let pixels: Vec<u8> = img
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm(&dir.join(&rel), ds.width(), ds.height(), &pixels)?;
        writer
            .write_record([name.as_str(), rel.as_str()])
            .map_err(|e| DataError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
    }
    writer.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}
