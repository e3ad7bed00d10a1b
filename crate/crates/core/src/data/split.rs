use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::manifest::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

const SPLIT_STREAM: u64 = 0x5350_4C49;

/// Largest-remainder apportionment of `n` items over `fractions`; ties in
/// the remainder go to the earlier split.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns train/val/test splits stratified by (label, source), shuffling
/// each stratum with a generator derived from `seed`. Record order is kept.
pub fn split_manifest(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut strata: BTreeMap<(Label, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        strata.entry((r.label, r.source.as_str())).or_default().push(i);
    }
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut out = manifest.clone();
    for (s, ((label, source), mut idx)) in strata.into_iter().enumerate() {
        if idx.len() < nonzero {
            log::warn!(
                "stratum ({label}, {source}) has {} records for {nonzero} requested splits",
                idx.len()
            );
        }
        let mut rng = stream_rng(seed, &[SPLIT_STREAM, s as u64]);
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), fractions);
        let mut it = idx.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(count) {
                out.records[i].split = split;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize, fake_ratio: f64, seed: u64) -> DatasetManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| ManifestRecord {
                path: format!("{i}.png"),
                id: format!("{i}.png"),
                label: if rng.random::<f64>() < fake_ratio { Label::Fake } else { Label::Real },
                source: ["a", "b", "c"][rng.random_range(0..3)].to_string(),
                split: Split::Train,
            })
            .collect();
        DatasetManifest::new(records, None)
    }

    fn counts(m: &DatasetManifest) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &m.records {
            c[r.split as usize] += 1;
        }
        c
    }

    #[test]
    fn hundred_records_single_stratum() {
        let mut m = corpus(100, 0.0, 1);
        for r in &mut m.records {
            r.source = "a".into();
        }
        let s = split_manifest(&m, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(counts(&s), [80, 10, 10]);
        assert_eq!(s, split_manifest(&m, [0.8, 0.1, 0.1], 3).unwrap());
        assert_ne!(s, split_manifest(&m, [0.8, 0.1, 0.1], 4).unwrap());
    }

    #[test]
    fn stratified_within_rounding() {
        let m = corpus(100, 0.5, 2);
        let s = split_manifest(&m, [0.8, 0.1, 0.1], 3).unwrap();
        let c = counts(&s);
        // Six strata, each off by at most one.
        assert!((c[0] as i64 - 80).abs() <= 6 && (c[1] as i64 - 10).abs() <= 6);
        assert_eq!(c.iter().sum::<usize>(), 100);
    }

    #[test]
    fn label_ratio_preserved() {
        for seed in 0..5 {
            let m = corpus(1000, 0.3, seed);
            let global = m.count(Label::Fake) as f64 / 1000.0;
            let s = split_manifest(&m, [0.7, 0.15, 0.15], seed).unwrap();
            for split in Split::ALL {
                let part = s.split(split);
                let ratio = part.count(Label::Fake) as f64 / part.len() as f64;
                assert!((ratio - global).abs() <= 0.05, "{split}: {ratio} vs {global}");
            }
        }
    }

    #[test]
    fn apportion_cases() {
        assert_eq!(apportion(10, [2.0 / 3.0, 0.0, 1.0 / 3.0]), [7, 0, 3]);
        assert_eq!(apportion(300, [2.0 / 3.0, 0.0, 1.0 / 3.0]), [200, 0, 100]);
        assert_eq!(apportion(1, [0.0, 0.0, 1.0]), [0, 0, 1]);
        assert!(split_manifest(&corpus(4, 0.5, 0), [0.5, 0.5, 0.5], 0).is_err());
    }
}
