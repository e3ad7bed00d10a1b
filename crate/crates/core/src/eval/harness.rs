use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_metrics, average_precision, ScoredExample};
use crate::data::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::model::{train_examples, Ablation, AideConfig, Checkpoint, EmbeddingTable, TrainExample, TrainOptions};
use crate::perturb::Perturbation;

pub const GRID_PATCH_N: [usize; 3] = [16, 32, 64];
pub const GRID_K_SELECT: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub n: usize,
    pub acc: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub perturbation: Perturbation,
    pub name: String,
    pub acc: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub patch_n: usize,
    pub k_select: usize,
    pub acc: Option<f64>,
    pub ap: Option<f64>,
    /// Why the configuration could not be trained or evaluated.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub overall_acc: f64,
    pub fake_acc: Option<f64>,
    pub real_acc: Option<f64>,
    pub ap: Option<f64>,
    pub per_source: BTreeMap<String, SourceMetrics>,
    /// Ids skipped because the embedding table lacks them.
    pub skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robustness: Vec<RobustnessCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
    pub config: AideConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// AP, or `None` when the set has no fakes.
fn optional_ap(scored: &[ScoredExample]) -> Result<Option<f64>> {
    match average_precision(scored) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores every record (optionally perturbed). Records whose id is missing
/// from the embedding table are returned separately instead of failing.
pub fn score_manifest(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    table: Option<&EmbeddingTable>,
    perturbation: Perturbation,
) -> Result<(Vec<ScoredExample>, Vec<String>)> {
    ckpt.check_table(table)?;
    perturbation.validate()?;
    let outcomes: Vec<Result<Option<ScoredExample>>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let img = perturbation.apply(&load_image(manifest.resolve(r))?)?;
            match ckpt.score(&img, &r.id, table) {
                Ok(p) => Ok(Some(ScoredExample {
                    id: r.id.clone(),
                    label: r.label,
                    probability: p,
                    source: r.source.clone(),
                })),
                Err(Error::UnknownId(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (r, o) in manifest.records.iter().zip(outcomes) {
        match o? {
            Some(s) => scored.push(s),
            None => skipped.push(r.id.clone()),
        }
    }
    Ok((scored, skipped))
}

pub fn report_from_scores(scored: &[ScoredExample], skipped: Vec<String>, config: &AideConfig) -> Result<EvalReport> {
    let acc = accuracy_metrics(scored, 0.5)?;
    let mut groups: BTreeMap<&str, Vec<ScoredExample>> = BTreeMap::new();
    for s in scored {
        groups.entry(s.source.as_str()).or_default().push(s.clone());
    }
    let mut per_source = BTreeMap::new();
    for (source, g) in groups {
        per_source.insert(
            source.to_string(),
            SourceMetrics {
                n: g.len(),
                acc: accuracy_metrics(&g, 0.5)?.overall,
                ap: optional_ap(&g)?,
            },
        );
    }
    Ok(EvalReport {
        n: scored.len(),
        overall_acc: acc.overall,
        fake_acc: acc.fake_acc,
        real_acc: acc.real_acc,
        ap: optional_ap(scored)?,
        per_source,
        skipped,
        robustness: Vec::new(),
        ablation: Vec::new(),
        config: config.clone(),
        timestamp: None,
    })
}

/// Unperturbed evaluation of every record in `manifest`.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, table: Option<&EmbeddingTable>) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    let (scored, skipped) = score_manifest(ckpt, manifest, table, Perturbation::None)?;
    if !skipped.is_empty() {
        log::warn!("{} records skipped: ids missing from the embedding table", skipped.len());
    }
    report_from_scores(&scored, skipped, &ckpt.config)
}

fn cell(ckpt: &Checkpoint, manifest: &DatasetManifest, table: Option<&EmbeddingTable>, p: Perturbation) -> Result<RobustnessCell> {
    let (scored, _) = score_manifest(ckpt, manifest, table, p)?;
    Ok(RobustnessCell {
        perturbation: p,
        name: p.to_string(),
        acc: accuracy_metrics(&scored, 0.5)?.overall,
        ap: optional_ap(&scored)?,
    })
}

/// Baseline followed by the eight JPEG/blur cells.
pub fn robustness_sweep(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    table: Option<&EmbeddingTable>,
) -> Result<Vec<RobustnessCell>> {
    if manifest.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    std::iter::once(Perturbation::None)
        .chain(Perturbation::sweep())
        .map(|p| cell(ckpt, manifest, table, p))
        .collect()
}

fn train_and_score(
    train: &[TrainExample],
    test: &DatasetManifest,
    cfg: &AideConfig,
    table: Option<&EmbeddingTable>,
) -> AblationRow {
    let result = train_examples(train, cfg, table, &TrainOptions::default()).and_then(|ckpt| {
        let (scored, _) = score_manifest(&ckpt, test, table, Perturbation::None)?;
        Ok((accuracy_metrics(&scored, 0.5)?.overall, optional_ap(&scored)?))
    });
    let (acc, ap, error) = match result {
        Ok((acc, ap)) => (Some(acc), ap, None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    AblationRow {
        variant: cfg.ablation,
        patch_n: cfg.patch_n,
        k_select: cfg.k_select,
        acc,
        ap,
        error,
    }
}

/// Trains each of the seven branch variants on the train split and scores
/// the test split. With `grid`, also trains the full model over every
/// (patch_n, k_select) pair in [`GRID_PATCH_N`] x [`GRID_K_SELECT`];
/// infeasible grid cells are reported with an error instead of a score.
pub fn ablation_suite(
    manifest: &DatasetManifest,
    cfg: &AideConfig,
    table: Option<&EmbeddingTable>,
    grid: bool,
) -> Result<Vec<AblationRow>> {
    let train = crate::model::load_train_examples(manifest)?;
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::arg("ablation suite needs a non-empty test split"));
    }
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let c = AideConfig {
            ablation: variant,
            ..cfg.clone()
        };
        let row = train_and_score(&train, &test, &c, table);
        if let Some(e) = &row.error {
            return Err(Error::Training(format!("variant {variant}: {e}")));
        }
        rows.push(row);
    }
    if grid {
        for n in GRID_PATCH_N {
            for k in GRID_K_SELECT {
                let c = AideConfig {
                    ablation: Ablation::Full,
                    patch_n: n,
                    k_select: k,
                    ..cfg.clone()
                };
                rows.push(train_and_score(&train, &test, &c, table));
            }
        }
    }
    Ok(rows)
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per overall/source/perturbation/ablation cell:
    /// `section,name,n,acc,ap`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("section,name,n,acc,ap\n");
        let _ = writeln!(out, "overall,all,{},{},{}", self.n, self.overall_acc, opt(self.ap));
        for (label, acc) in [(Label::Fake, self.fake_acc), (Label::Real, self.real_acc)] {
            let _ = writeln!(out, "class,{label},,{},", opt(acc));
        }
        for (s, m) in &self.per_source {
            let _ = writeln!(out, "source,{},{},{},{}", csv_field(s), m.n, m.acc, opt(m.ap));
        }
        for c in &self.robustness {
            let _ = writeln!(out, "robustness,{},{},{},{}", c.name, self.n, c.acc, opt(c.ap));
        }
        for r in &self.ablation {
            let _ = writeln!(
                out,
                "ablation,{}_n{}_k{},,{},{}",
                r.variant,
                r.patch_n,
                r.k_select,
                opt(r.acc),
                opt(r.ap)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
