use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::DatasetManifest;
use crate::error::Result;
use crate::imageio::{load_image, RgbImage};

pub const DEFAULT_MIN_SIDE: usize = 448;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Resolution,
    Duplicate,
    Undecodable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub id: String,
    pub reason: DropReason,
    /// For duplicates, the id of the kept representative; otherwise a message.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurationReport {
    pub kept: usize,
    pub dropped: Vec<DroppedRecord>,
}

/// SHA-256 over width and height (u32 little-endian) followed by the RGB bytes.
pub fn pixel_hash(img: &RgbImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.width() as u32).to_le_bytes());
    h.update((img.height() as u32).to_le_bytes());
    h.update(img.pixels());
    h.finalize().into()
}

enum Probe {
    Ok { min_side: usize, hash: [u8; 32] },
    Failed(String),
}

/// Drops images whose shorter side is below `min_side`, then collapses
/// pixel-identical images onto the first record in manifest order.
pub fn curate_manifest(manifest: &DatasetManifest, min_side: usize) -> Result<(DatasetManifest, CurationReport)> {
    let probes: Vec<Probe> = manifest
        .records
        .par_iter()
        .map(|r| match load_image(manifest.resolve(r)) {
            Ok(img) => Probe::Ok {
                min_side: img.width().min(img.height()),
                hash: pixel_hash(&img),
            },
            Err(e) => Probe::Failed(e.to_string()),
        })
        .collect();
    let mut first_with_hash: HashMap<[u8; 32], &str> = HashMap::new();
    let mut kept = Vec::new();
    let mut report = CurationReport::default();
    for (r, probe) in manifest.records.iter().zip(probes) {
        let drop = |reason, detail: String| DroppedRecord {
            id: r.id.clone(),
            reason,
            detail,
        };
        match probe {
            Probe::Failed(msg) => report.dropped.push(drop(DropReason::Undecodable, msg)),
            Probe::Ok { min_side: side, .. } if side < min_side => report.dropped.push(drop(
                DropReason::Resolution,
                format!("shorter side {side} < {min_side}"),
            )),
            Probe::Ok { hash, .. } => match first_with_hash.get(&hash) {
                Some(original) => report
                    .dropped
                    .push(drop(DropReason::Duplicate, (*original).to_string())),
                None => {
                    first_with_hash.insert(hash, &r.id);
                    kept.push(r.clone());
                }
            },
        }
    }
    report.kept = kept.len();
    Ok((DatasetManifest::new(kept, manifest.base.clone()), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{build_manifest, Label};
    use crate::imageio::{encode_png, save_png};

    fn write(root: &std::path::Path, rel: &str, img: &RgbImage) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        save_png(img, p).unwrap();
    }

    #[test]
    fn resolution_duplicates_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let big = RgbImage::from_fn(448, 450, |x, y| [(x % 256) as u8, (y % 256) as u8, 9]);
        let mut one_off = big.clone();
        one_off.set(10, 10, [0, 0, 0]);
        write(dir.path(), "real/a.png", &big);
        write(dir.path(), "real/b_small.png", &RgbImage::filled(447, 448, [5; 3]));
        write(dir.path(), "real/c_one_off.png", &one_off);
        let dup = dir.path().join("fake/d_dup.png");
        std::fs::create_dir_all(dup.parent().unwrap()).unwrap();
        let mut bytes = Vec::new();
        let enc = image::codecs::png::PngEncoder::new_with_quality(
            &mut bytes,
            image::codecs::png::CompressionType::Best,
            image::codecs::png::FilterType::Paeth,
        );
        image::RgbImage::from_raw(448, 450, big.pixels().to_vec())
            .unwrap()
            .write_with_encoder(enc)
            .unwrap();
        assert_ne!(bytes, encode_png(&big).unwrap());
        std::fs::write(&dup, bytes).unwrap();
        std::fs::write(dir.path().join("fake/e_bad.png"), b"not a png").unwrap();
        let m = build_manifest(dir.path()).unwrap();
        let (kept, report) = curate_manifest(&m, DEFAULT_MIN_SIDE).unwrap();
        let ids: Vec<_> = kept.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["fake/d_dup.png", "real/c_one_off.png"]);
        let reasons: Vec<_> = report.dropped.iter().map(|d| (d.id.as_str(), d.reason)).collect();
        assert_eq!(
            reasons,
            vec![
                ("fake/e_bad.png", DropReason::Undecodable),
                ("real/a.png", DropReason::Duplicate),
                ("real/b_small.png", DropReason::Resolution),
            ]
        );
        assert_eq!(report.dropped[1].detail, "fake/d_dup.png");
        assert_eq!(kept.count(Label::Fake), 1);
        let (again, report2) = curate_manifest(&kept, DEFAULT_MIN_SIDE).unwrap();
        assert_eq!(again, kept);
        assert!(report2.dropped.is_empty());
    }

    #[test]
    fn hash_covers_dimensions() {
        let a = RgbImage::filled(4, 6, [1; 3]);
        let b = RgbImage::filled(6, 4, [1; 3]);
        assert_ne!(pixel_hash(&a), pixel_hash(&b));
    }
}
