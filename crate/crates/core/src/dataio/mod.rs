//! Benchmark generation, netpbm codecs and on-disk dataset indexing.
//!
//! Layout: `root/<domain>/<id>.ppm` with masks `<id>_od.pgm`, `<id>_oc.pgm`.

pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::{synth_benchmark, synth_domain, BenchmarkSpec, DomainSpec, GeometrySpec, Split};

use crate::error::{Error, Result};
use crate::image::Sample;

/// Samples sorted by `(domain, id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(mut samples: Vec<Sample>) -> Self {
        samples.sort_by(|a, b| (&a.domain, &a.id).cmp(&(&b.domain, &b.id)));
        Self { samples }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.samples.iter().map(|s| s.domain.as_str()).collect();
        out.dedup();
        out
    }

    pub fn groups(&self) -> BTreeMap<&str, Vec<&Sample>> {
        let mut out: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.domain.as_str()).or_default().push(s);
        }
        out
    }

    pub fn domain(&self, name: &str) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.domain == name).collect()
    }

    /// Samples of `name` whose id starts with the split prefix.
    pub fn split(&self, name: &str, split: Split) -> Vec<&Sample> {
        let prefix = format!("{}_", split.prefix());
        self.samples
            .iter()
            .filter(|s| s.domain == name && s.id.starts_with(&prefix))
            .collect()
    }
}

fn sample_paths(root: &Path, domain: &str, id: &str) -> [PathBuf; 3] {
    let dir = root.join(domain);
    [
        dir.join(format!("{id}.ppm")),
        dir.join(format!("{id}_od.pgm")),
        dir.join(format!("{id}_oc.pgm")),
    ]
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let dir = root.join(&sample.domain);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io_error(&dir, e))?;
    let [img, od, oc] = sample_paths(root, &sample.domain, &sample.id);
    write_ppm(&sample.image, &img)?;
    write_pgm(&sample.mask_od, &od)?;
    write_pgm(&sample.mask_oc, &oc)
}

pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    samples.iter().try_for_each(|s| write_sample(root, s))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io_error(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io_error(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads every domain directory under `root`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut found = false;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let Some(domain) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        found = true;
        for path in sorted_entries(&dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("non UTF-8 file name {}", path.display())))?
                .to_string();
            let [img, od, oc] = sample_paths(root, &domain, &id);
            for m in [&od, &oc] {
                if !m.is_file() {
                    return Err(Error::Dataset(format!("missing mask {} for {}", m.display(), img.display())));
                }
            }
            let image = read_ppm(&img)?;
            let mask_od = read_pgm(&od)?;
            let mask_oc = read_pgm(&oc)?;
            if (mask_od.height(), mask_od.width()) != (image.height(), image.width())
                || (mask_oc.height(), mask_oc.width()) != (image.height(), image.width())
            {
                return Err(Error::Dataset(format!("mask size differs from image {}", img.display())));
            }
            samples.push(Sample {
                image,
                mask_od,
                mask_oc,
                domain: domain.clone(),
                id,
            });
        }
    }
    if !found {
        return Err(Error::Dataset(format!("no domains found under {}", root.display())));
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_root_has_no_domains() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no domains found"));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            height: 16,
            width: 16,
            train_count: 2,
            test_count: 1,
            domains: BenchmarkSpec::default().domains[..2].to_vec(),
            ..Default::default()
        };
        let samples = synth_benchmark(&spec, 1).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.domains(), vec!["A", "B"]);
        assert_eq!(ds.split("A", Split::Train).len(), 2);
        assert_eq!(ds.split("B", Split::Test).len(), 1);
        for (a, b) in ds.samples().iter().zip(Dataset::new(samples).samples()) {
            assert_eq!(a.mask_od, b.mask_od);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn missing_mask_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            height: 16,
            width: 16,
            train_count: 1,
            test_count: 1,
            ..Default::default()
        };
        write_dataset(dir.path(), &synth_benchmark(&spec, 1).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("B").join("test_0000_oc.pgm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("test_0000_oc.pgm"));
    }
}
