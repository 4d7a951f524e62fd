//! Dataset manifests: one UTF-8 line per slice, tab-separated —
//! scan_id, modality, image path, label path or '-', row/col spacing (mm).
//! Paths are relative to the manifest's directory.

use crate::data::audit;
use crate::data::{IntensityImage, LabelMap, Modality, Slice};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub scan_id: String,
    pub modality: Modality,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub spacing_mm: (f32, f32),
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<SliceRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            let label = r
                .label_path
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.scan_id,
                r.modality.tag(),
                r.image_path.display(),
                label,
                r.spacing_mm.0,
                r.spacing_mm.1
            ));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tsv.tmp");
        fs::write(&tmp, out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        audit::record_read(path);
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 6 tab-separated fields, got {}",
                    path.display(),
                    ln + 1,
                    f.len()
                )));
            }
            let bad = |what: &str| {
                Error::Data(format!("{}:{}: bad {what}", path.display(), ln + 1))
            };
            let spacing = (
                f[4].parse::<f32>().map_err(|_| bad("row spacing"))?,
                f[5].parse::<f32>().map_err(|_| bad("col spacing"))?,
            );
            if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
                return Err(bad("spacing (must be positive)"));
            }
            records.push(SliceRecord {
                scan_id: f[0].to_string(),
                modality: Modality::parse(f[1]).ok_or_else(|| bad("modality"))?,
                image_path: PathBuf::from(f[2]),
                label_path: if f[3] == "-" { None } else { Some(PathBuf::from(f[3])) },
                spacing_mm: spacing,
            });
        }
        Ok(Manifest { records })
    }

    /// Content hash of the manifest file (hex), for run provenance.
    pub fn file_hash(path: &Path) -> Result<String> {
        let bytes = fs::read(path)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn scan_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.scan_id.as_str()).collect();
        ids.dedup();
        ids
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load every slice a manifest lists. `root` is the directory the manifest
/// paths are relative to (normally the manifest's own directory);
/// `n_classes` bounds label values.
pub fn load_slices(manifest: &Manifest, root: &Path, n_classes: usize) -> Result<Vec<Slice>> {
    let mut out = Vec::with_capacity(manifest.records.len());
    let mut slice_idx = std::collections::HashMap::<&str, usize>::new();
    for r in &manifest.records {
        let img = crate::data::pgm::read_pgm16(&root.join(&r.image_path))?;
        let idx = slice_idx.entry(r.scan_id.as_str()).or_insert(0);
        let image = IntensityImage {
            pixels: img.samples.iter().map(|&s| crate::data::pgm::dequantize(s)).collect(),
            h: img.h,
            w: img.w,
            modality: r.modality,
            spacing_mm: r.spacing_mm,
            scan_id: r.scan_id.clone(),
            slice_index: *idx,
        };
        *idx += 1;
        let label = match &r.label_path {
            None => None,
            Some(lp) => {
                let l = crate::data::pgm::read_pgm16(&root.join(lp))?;
                if (l.w, l.h) != (img.w, img.h) {
                    return Err(Error::Data(format!(
                        "label {} size {}x{} mismatches image {}x{}",
                        lp.display(),
                        l.w,
                        l.h,
                        img.w,
                        img.h
                    )));
                }
                let classes: Vec<u8> = l
                    .samples
                    .iter()
                    .map(|&s| {
                        if (s as usize) < n_classes {
                            Ok(s as u8)
                        } else {
                            Err(Error::Data(format!(
                                "label {} holds class {} but only {} classes exist",
                                lp.display(),
                                s,
                                n_classes
                            )))
                        }
                    })
                    .collect::<Result<_>>()?;
                Some(LabelMap {
                    classes,
                    h: l.h,
                    w: l.w,
                    n_classes,
                    spacing_mm: r.spacing_mm,
                })
            }
        };
        out.push(Slice { image, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let m = Manifest {
            records: vec![
                SliceRecord {
                    scan_id: "s0".into(),
                    modality: Modality::Source,
                    image_path: "source/s0/0.pgm".into(),
                    label_path: Some("source/s0/0_label.pgm".into()),
                    spacing_mm: (0.9, 1.1),
                },
                SliceRecord {
                    scan_id: "t0".into(),
                    modality: Modality::Target,
                    image_path: "target/t0/0.pgm".into(),
                    label_path: None,
                    spacing_mm: (1.0, 1.0),
                },
            ],
        };
        let p = d.path().join("m.tsv");
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(Manifest::file_hash(&p).unwrap().len(), 64);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("bad.tsv");
        std::fs::write(&p, "a\tSOURCE\tx.pgm\t-\t1.0\n").unwrap(); // 5 fields
        assert!(Manifest::read(&p).is_err());
        std::fs::write(&p, "a\tWEIRD\tx.pgm\t-\t1.0\t1.0\n").unwrap();
        assert!(Manifest::read(&p).is_err());
        std::fs::write(&p, "a\tSOURCE\tx.pgm\t-\t0\t1.0\n").unwrap();
        assert!(Manifest::read(&p).is_err()); // nonpositive spacing
    }

    #[test]
    fn load_rejects_out_of_range_classes() {
        let d = tempfile::tempdir().unwrap();
        crate::data::pgm::write_pgm16(&d.path().join("img.pgm"), 2, 2, &[0; 4], &[]).unwrap();
        crate::data::pgm::write_pgm16(&d.path().join("lab.pgm"), 2, 2, &[0, 1, 2, 0], &[])
            .unwrap();
        let m = Manifest {
            records: vec![SliceRecord {
                scan_id: "s".into(),
                modality: Modality::Source,
                image_path: "img.pgm".into(),
                label_path: Some("lab.pgm".into()),
                spacing_mm: (1.0, 1.0),
            }],
        };
        assert!(load_slices(&m, d.path(), 3).is_ok());
        assert!(load_slices(&m, d.path(), 2).is_err());
    }
}
