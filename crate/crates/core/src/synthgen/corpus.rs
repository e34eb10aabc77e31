//! Corpora of phantoms and their on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate, PhantomSpec};
use crate::error::{invalid, Error, Result};
use crate::volume::{rvol, LabelMask, Volume};

/// One generated case.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub seed: u64,
    pub volume: Volume,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub seed: u64,
    /// RVOL header paths, relative to the manifest's directory.
    pub volume: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: PhantomSpec,
    pub seed_base: u64,
    pub cases: Vec<CorpusEntry>,
}

fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// `n` phantoms; case `i` uses seed `seed_base + i`.
pub fn generate_corpus(spec: &PhantomSpec, n: usize, seed_base: u64) -> Result<Vec<Case>> {
    if n == 0 {
        return Err(invalid!("corpus needs at least one case"));
    }
    (0..n)
        .map(|i| {
            let seed = seed_base.wrapping_add(i as u64);
            let (volume, mask) = generate(&spec.with_seed(seed))?;
            Ok(Case {
                id: case_id(i),
                seed,
                volume,
                mask,
            })
        })
        .collect()
}

/// Write every case as RVOL files plus `corpus.json` into `dir`; returns the manifest path.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    spec: &PhantomSpec,
    seed_base: u64,
    cases: &[Case],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let volume = format!("{}.json", c.id);
        let mask = format!("{}_mask.json", c.id);
        rvol::save_volume(&c.volume, dir.join(&volume))?;
        rvol::save_mask(&c.mask, c.volume.spacing(), dir.join(&mask))?;
        entries.push(CorpusEntry {
            id: c.id.clone(),
            seed: c.seed,
            volume,
            mask,
        });
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        seed_base,
        cases: entries,
    };
    let path = dir.join("corpus.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read a manifest and every case it lists. Missing files fail before anything is returned.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Case>)> {
    let path = manifest.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: CorpusManifest = serde_json::from_slice(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for e in &m.cases {
        for f in [&e.volume, &e.mask] {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(Error::Format(format!(
                    "case {} references missing file {}",
                    e.id,
                    p.display()
                )));
            }
        }
    }
    let cases = m
        .cases
        .iter()
        .map(|e| {
            let volume = rvol::load_volume(dir.join(&e.volume))?;
            let mask = rvol::load_mask(dir.join(&e.mask))?;
            if volume.extents() != mask.extents() {
                return Err(Error::Format(format!(
                    "case {}: volume and mask extents differ",
                    e.id
                )));
            }
            Ok(Case {
                id: e.id.clone(),
                seed: e.seed,
                volume,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, cases))
}
