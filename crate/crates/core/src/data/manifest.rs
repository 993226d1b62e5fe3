//! JSON-lines dataset manifest:
//! `{"id", "image_path", "labels": [0/1; D], "boxes": [{"class","x","y","w","h"}]}`.
//! `image_path` is relative to the manifest's directory and names an HTSR
//! tensor `[3,H,W]` or a binary PGM (replicated to three channels).
//!
//! Refined manifests add `"refined": [{"class", "mask_path", "provenance"}]`,
//! where `mask_path` is a PGM whose nonzero pixels form the mask.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, BoxAnnotation, Provenance, RefinedAnnotation, Region};
use super::{LabelSet, Sample};
use crate::error::{Error, Result};
use crate::model::heads::{decode_pgm, write_pgm};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub labels: Vec<u8>,
    #[serde(default)]
    pub boxes: Vec<BoxAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refined: Vec<RefinedRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinedRecord {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub mask_path: String,
    pub provenance: Provenance,
}

pub fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(crate::numerics::tensor::HTSR_MAGIC) {
        let t = Tensor::read_htsr(&bytes[..])?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Format(format!("{}: expected [3,H,W] image", path.display())));
        }
        Ok(t)
    } else if bytes.starts_with(b"P5") {
        let g = decode_pgm(&bytes)?;
        let (h, w) = (g.shape()[0], g.shape()[1]);
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(g.data());
        }
        Tensor::new(&[3, h, w], data)
    } else {
        Err(Error::Format(format!("{}: unknown image format", path.display())))
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads and validates every sample listed in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let dir = manifest_dir(path);
    read_records(path)?
        .into_iter()
        .map(|r| {
            let image = load_image(&dir.join(&r.image_path))?;
            let refined = r
                .refined
                .iter()
                .map(|m| {
                    let g = decode_pgm(&fs::read(dir.join(&m.mask_path))?)?;
                    let (h, w) = (g.shape()[0], g.shape()[1]);
                    let region = Region::from_pixels(h, w, g.data().iter().map(|&v| v > 0.0).collect())?;
                    Ok(RefinedAnnotation {
                        class_id: m.class_id,
                        mask: BinaryMask {
                            class_id: m.class_id,
                            region,
                        },
                        provenance: m.provenance,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let s = Sample {
                id: r.id,
                image,
                labels: LabelSet::new(r.labels)?,
                boxes: r.boxes,
                refined,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

/// Writes images as HTSR files under `images/` (and refined masks as PGM under
/// `masks/`) next to the manifest.
pub fn save_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let dir = manifest_dir(path);
    fs::create_dir_all(dir.join("images"))?;
    if samples.iter().any(|s| !s.refined.is_empty()) {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.htsr", s.id);
        s.image.write_htsr(BufWriter::new(fs::File::create(dir.join(&rel))?))?;
        let mut refined = Vec::new();
        for r in &s.refined {
            let mask_path = format!("masks/{}-c{}.pgm", s.id, r.class_id);
            write_pgm(&dir.join(&mask_path), &r.mask.region.to_tensor())?;
            refined.push(RefinedRecord {
                class_id: r.class_id,
                mask_path,
                provenance: r.provenance,
            });
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            image_path: rel,
            labels: s.labels.values().to_vec(),
            boxes: s.boxes.clone(),
            refined,
        });
    }
    write_records(path, &records)
}
