use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::pnm::{load_ppm, save_pgm, PnmError};
use super::{Image, Sample};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes `<root>/<label>/<index>.pgm` per sample and a `path,label`
/// manifest with paths relative to `root`.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<(), DatasetError> {
    fs::create_dir_all(root)?;
    let mut manifest = String::from("path,label\n");
    for s in samples {
        let rel = format!("{}/{}.pgm", s.label, s.index);
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        save_pgm(&path, &s.image).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
        manifest.push_str(&format!("{rel},{}\n", s.label));
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`] (or any directory with a
/// matching manifest). Images may be PGM or PPM.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>, DatasetError> {
    let manifest_path = root.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let bad = |line: usize, message: String| DatasetError::Manifest { path: manifest_path.clone(), line, message };
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if n == 0 && line == "path,label" || line.is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once(',').ok_or_else(|| bad(n + 1, "expected path,label".into()))?;
        let label: usize = label.trim().parse().map_err(|_| bad(n + 1, format!("bad label {label:?}")))?;
        let path = root.join(rel.trim());
        let image: Image = load_ppm(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
        let index = Path::new(rel.trim())
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(samples.len());
        samples.push(Sample { image, label, index });
    }
    Ok(samples)
}
