use std::fs;
use std::path::{Path, PathBuf};

use super::{pgm, rle, GrayImage, Mask, Sample};
use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join(MASKS_DIR).join(format!("{id}_mask.pgm"))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    with_path(path, fs::read(path).map_err(Error::from))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    with_path(path, fs::write(path, bytes).map_err(Error::from))
}

/// Writes `images/<id>.pgm` and `masks/<id>_mask.pgm` under `root`.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for dir in [IMAGES_DIR, MASKS_DIR] {
        let d = root.join(dir);
        with_path(&d, fs::create_dir_all(&d).map_err(Error::from))?;
    }
    for s in samples {
        write(&root.join(IMAGES_DIR).join(format!("{}.pgm", s.id)), &pgm::encode(&s.image))?;
        write(&mask_path(root, &s.id), &pgm::encode_mask(&s.mask))?;
    }
    Ok(())
}

/// Every `images/*.pgm` under `root`, sorted by id.
pub fn read_images(root: &Path) -> Result<Vec<(String, GrayImage)>> {
    let dir = root.join(IMAGES_DIR);
    let entries = with_path(&dir, fs::read_dir(&dir).map_err(Error::from))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = with_path(&dir, entry.map_err(Error::from))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                paths.push((id.to_string(), path.clone()));
            }
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|(id, path)| Ok((id, with_path(&path, pgm::decode(&read(&path)?))?)))
        .collect()
}

/// Images paired with their masks; a missing mask is an error.
pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    read_images(root)?
        .into_iter()
        .map(|(id, image)| {
            let path = mask_path(root, &id);
            let mask = with_path(&path, pgm::decode_mask(&read(&path)?))?;
            Sample::new(id, image, mask)
        })
        .collect()
}

pub fn submission_csv(rows: &[(String, Mask)]) -> String {
    let mut out = String::from("img,pixels\n");
    for (id, mask) in rows {
        out.push_str(id);
        out.push(',');
        out.push_str(&rle::encode(mask));
        out.push('\n');
    }
    out
}

pub fn write_submission(path: &Path, rows: &[(String, Mask)]) -> Result<()> {
    write(path, submission_csv(rows).as_bytes())
}
