//! Directory listing and filename-stem pairing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use defusion_core::imaging::{load_image, ColorMode, SceneImage};
use defusion_core::Error;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files of `dir` keyed by stem. A missing directory is a
/// configuration error; two files sharing a stem are a data error.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Error> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("directory {} does not exist", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !path.is_file() || !is_image {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "stem `{stem}` is shared by {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Loads every image of `dir` in stem order.
pub fn load_dir(dir: &Path) -> Result<Vec<SceneImage>, Error> {
    list_images(dir)?
        .values()
        .map(|p| load_image(p, ColorMode::Rgb))
        .collect()
}

/// Files of two directories matched by stem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub only_a: Vec<PathBuf>,
    pub only_b: Vec<PathBuf>,
}

impl Pairing {
    pub fn new(a: BTreeMap<String, PathBuf>, mut b: BTreeMap<String, PathBuf>) -> Self {
        let mut p = Pairing::default();
        for (stem, pa) in a {
            match b.remove(&stem) {
                Some(pb) => p.pairs.push((stem, pa, pb)),
                None => p.only_a.push(pa),
            }
        }
        p.only_b = b.into_values().collect();
        p
    }

    pub fn of_dirs(a: &Path, b: &Path) -> Result<Self, Error> {
        Ok(Self::new(list_images(a)?, list_images(b)?))
    }

    pub fn unpaired(&self) -> impl Iterator<Item = &PathBuf> {
        self.only_a.iter().chain(&self.only_b)
    }

    pub fn is_complete(&self) -> bool {
        self.only_a.is_empty() && self.only_b.is_empty()
    }

    /// Fails listing every unpaired file when `strict`; otherwise warns.
    pub fn check(&self, strict: bool) -> Result<(), Error> {
        if self.is_complete() {
            return Ok(());
        }
        let listed: Vec<String> = self.unpaired().map(|p| p.display().to_string()).collect();
        if strict {
            return Err(Error::Data(format!("unpaired files: {}", listed.join(", "))));
        }
        for f in &listed {
            log::warn!("skipping unpaired file {f}");
        }
        Ok(())
    }
}
