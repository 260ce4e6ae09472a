//! CSV manifest (`id,image_path,labels,mask_path`) plus PGM files.
//!
//! Paths inside the manifest are resolved relative to the manifest's
//! directory. The declared class list lives next to it in `classes.txt`,
//! one class name per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::{pgm, DataError, Dataset, Image, ImageSample, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_pgm(path: &Path, row: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| DataError::Manifest {
        row,
        message: format!("{}: {e}", path.display()),
    })?;
    pgm::decode(&bytes).map_err(|e| match e {
        DataError::UnsupportedPgm(_) => e,
        other => DataError::Manifest {
            row,
            message: format!("{}: {other}", path.display()),
        },
    })
}

/// Loads a manifest against an explicit class list. Rows keep manifest order;
/// `row` numbers in errors count data rows from 1.
pub fn load_dataset(manifest_path: &Path, classes: &[String]) -> Result<Dataset> {
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(manifest_path).map_err(io_err(manifest_path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let expected = ["id", "image_path", "labels", "mask_path"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Manifest {
            row: 0,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(DataError::Manifest {
                row,
                message: "empty id".into(),
            });
        }
        let image = read_pgm(&base.join(field(1)), row)?;
        let labels = if classes.is_empty() {
            None
        } else {
            let mut bits = vec![false; classes.len()];
            for label in field(2).split('|').map(str::trim).filter(|s| !s.is_empty()) {
                let k = classes
                    .iter()
                    .position(|c| c == label)
                    .ok_or_else(|| DataError::UnknownLabel {
                        row,
                        label: label.to_string(),
                    })?;
                bits[k] = true;
            }
            Some(bits)
        };
        let mask = match field(3) {
            "" => None,
            p => {
                let m = read_pgm(&base.join(p), row)?;
                if (m.height(), m.width()) != (image.height(), image.width()) {
                    return Err(DataError::Manifest {
                        row,
                        message: "mask geometry differs from image".into(),
                    });
                }
                let bin = m.pixels().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
                Some(Image::new(m.height(), m.width(), bin))
            }
        };
        samples.push(ImageSample {
            id,
            image,
            labels,
            mask,
        });
    }
    Ok(Dataset {
        classes: classes.to_vec(),
        samples,
    })
}

/// Loads `manifest.csv` from `dir`, with classes from `classes.txt` when present.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let classes_path = dir.join(CLASSES_FILE);
    let classes = if classes_path.exists() {
        fs::read_to_string(&classes_path)
            .map_err(io_err(&classes_path))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    load_dataset(&dir.join(MANIFEST_FILE), &classes)
}

/// Writes images (and masks) as PGM plus the manifest and class list.
/// Returns every file written, in write order.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut written = Vec::new();
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(["id", "image_path", "labels", "mask_path"])?;
    for s in &ds.samples {
        let rel = format!("images/{}.pgm", s.id);
        let path = dir.join(&rel);
        fs::write(&path, pgm::encode(&s.image)).map_err(io_err(&path))?;
        written.push(path);
        let mask_rel = match &s.mask {
            Some(m) => {
                let rel = format!("images/{}_mask.pgm", s.id);
                let path = dir.join(&rel);
                fs::write(&path, pgm::encode(m)).map_err(io_err(&path))?;
                written.push(path);
                rel
            }
            None => String::new(),
        };
        let labels = s
            .labels
            .as_ref()
            .map(|bits| {
                bits.iter()
                    .zip(&ds.classes)
                    .filter(|(b, _)| **b)
                    .map(|(_, c)| c.as_str())
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .unwrap_or_default();
        wtr.write_record([s.id.as_str(), rel.as_str(), labels.as_str(), mask_rel.as_str()])?;
    }
    let bytes = wtr.into_inner().map_err(|e| DataError::Io {
        path: dir.join(MANIFEST_FILE),
        source: e.into_error(),
    })?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, bytes).map_err(io_err(&mpath))?;
    written.push(mpath);
    let cpath = dir.join(CLASSES_FILE);
    let mut classes = ds.classes.join("\n");
    if !classes.is_empty() {
        classes.push('\n');
    }
    fs::write(&cpath, classes).map_err(io_err(&cpath))?;
    written.push(cpath);
    Ok(written)
}
