//! A generated benchmark as a directory of feature sets.

use std::path::Path;

use super::features::{read_feature_set, write_feature_set, FeatureRecord, FeatureSet};
use super::records::{read_captions, write_captions};
use super::{read_json, write_json};
use crate::anchors::{CandidatePair, Sample};
use crate::benchgen::{BenchmarkBundle, DomainSplit, GenConfig};
use crate::error::{ArfError, Result};
use crate::evaluation::PromptTable;
use crate::numerics::{Matrix, Vector};

fn samples_to_set(samples: &[Sample], kind: &str, cols: usize) -> Result<FeatureSet> {
    let manifest = samples
        .iter()
        .map(|s| FeatureRecord {
            id: s.id,
            class_id: Some(s.class_id),
            domain_id: Some(s.domain_id),
            kind: kind.into(),
        })
        .collect();
    FeatureSet::new(
        manifest,
        Matrix::from_rows(cols, samples.iter().map(|s| s.feature.as_slice()))?,
    )
}

fn set_to_samples(set: FeatureSet) -> Result<Vec<Sample>> {
    let (manifest, matrix) = set.into_parts();
    manifest
        .into_iter()
        .zip(matrix.row_iter())
        .map(|(r, row)| {
            Ok(Sample {
                id: r.id,
                feature: Vector::new(row.to_vec())?,
                class_id: r.class_id.ok_or_else(|| {
                    ArfError::MissingField(format!("class_id of record {}", r.id))
                })?,
                domain_id: r.domain_id.unwrap_or(0),
            })
        })
        .collect()
}

fn write_pairs(
    dir: &Path,
    stem: &str,
    pairs: &[CandidatePair],
    dims: (usize, usize),
) -> Result<()> {
    let manifest = |kind: &str| -> Vec<FeatureRecord> {
        pairs
            .iter()
            .map(|p| FeatureRecord {
                id: p.id,
                class_id: None,
                domain_id: None,
                kind: kind.into(),
            })
            .collect()
    };
    let img = Matrix::from_rows(dims.0, pairs.iter().map(|p| p.image_feature.as_slice()))?;
    let txt = Matrix::from_rows(dims.1, pairs.iter().map(|p| p.text_feature.as_slice()))?;
    write_feature_set(
        &dir.join(format!("{stem}_image")),
        &FeatureSet::new(manifest("image"), img)?,
    )?;
    write_feature_set(
        &dir.join(format!("{stem}_text")),
        &FeatureSet::new(manifest("text"), txt)?,
    )
}

fn read_pairs(dir: &Path, stem: &str) -> Result<Vec<CandidatePair>> {
    let img = read_feature_set(&dir.join(format!("{stem}_image")))?;
    let txt = read_feature_set(&dir.join(format!("{stem}_text")))?;
    if img.len() != txt.len()
        || img
            .manifest()
            .iter()
            .zip(txt.manifest())
            .any(|(a, b)| a.id != b.id)
    {
        return Err(ArfError::Malformed(format!(
            "{stem}: image and text manifests disagree"
        )));
    }
    img.manifest()
        .iter()
        .zip(img.matrix().row_iter().zip(txt.matrix().row_iter()))
        .map(|(r, (i, t))| {
            Ok(CandidatePair {
                id: r.id,
                image_feature: Vector::new(i.to_vec())?,
                text_feature: Vector::new(t.to_vec())?,
            })
        })
        .collect()
}

fn write_prompts(dir: &Path, stem: &str, prompts: &PromptTable) -> Result<()> {
    let manifest = prompts
        .class_ids()
        .iter()
        .map(|&c| FeatureRecord {
            id: c.into(),
            class_id: Some(c),
            domain_id: None,
            kind: "prompt".into(),
        })
        .collect();
    write_feature_set(
        &dir.join(stem),
        &FeatureSet::new(manifest, prompts.features().clone())?,
    )
}

fn read_prompts(dir: &Path, stem: &str) -> Result<PromptTable> {
    let (manifest, matrix) = read_feature_set(&dir.join(stem))?.into_parts();
    let ids = manifest
        .iter()
        .map(|r| {
            r.class_id
                .ok_or_else(|| ArfError::MissingField(format!("class_id of prompt {}", r.id)))
        })
        .collect::<Result<_>>()?;
    PromptTable::new(ids, matrix)
}

/// Writes `gen.json`, one feature set per split and `captions.jsonl`.
pub fn write_bundle(dir: &Path, bundle: &BenchmarkBundle) -> Result<()> {
    let g = &bundle.gen;
    write_json(&dir.join("gen.json"), g)?;
    write_pairs(
        dir,
        "pretrain",
        &bundle.pretrain_pool,
        (g.d_img_raw, g.d_txt_raw),
    )?;
    write_pairs(
        dir,
        "candidates",
        &bundle.candidates,
        (g.d_img_raw, g.d_txt_raw),
    )?;
    write_feature_set(
        &dir.join("finetune"),
        &samples_to_set(&bundle.finetune, "finetune", g.d_img_raw)?,
    )?;
    write_feature_set(
        &dir.join("id_test"),
        &samples_to_set(&bundle.id_test, "id_test", g.d_img_raw)?,
    )?;
    for split in &bundle.ds_tests {
        write_feature_set(
            &dir.join(split.name()),
            &samples_to_set(&split.samples, "ds_test", g.d_img_raw)?,
        )?;
    }
    write_feature_set(
        &dir.join("zsl_test"),
        &samples_to_set(&bundle.zsl_test, "zsl_test", g.d_img_raw)?,
    )?;
    write_prompts(dir, "prompts_id", &bundle.prompts_id)?;
    write_prompts(dir, "prompts_zsl", &bundle.prompts_zsl)?;
    write_captions(&dir.join("captions.jsonl"), &bundle.captions)
}

pub fn read_bundle(dir: &Path) -> Result<BenchmarkBundle> {
    let gen: GenConfig = read_json(&dir.join("gen.json"))?;
    gen.validate()?;
    let ds_tests = (1..gen.n_domains as u32)
        .map(|domain| {
            let split = DomainSplit {
                domain,
                samples: Vec::new(),
            };
            Ok(DomainSplit {
                samples: set_to_samples(read_feature_set(&dir.join(split.name()))?)?,
                ..split
            })
        })
        .collect::<Result<_>>()?;
    let prompts_id = read_prompts(dir, "prompts_id")?;
    let prompts_zsl = read_prompts(dir, "prompts_zsl")?;
    Ok(BenchmarkBundle {
        id_classes: prompts_id.class_ids().to_vec(),
        zsl_classes: prompts_zsl.class_ids().to_vec(),
        pretrain_pool: read_pairs(dir, "pretrain")?,
        finetune: set_to_samples(read_feature_set(&dir.join("finetune"))?)?,
        captions: read_captions(&dir.join("captions.jsonl"))?,
        candidates: read_pairs(dir, "candidates")?,
        id_test: set_to_samples(read_feature_set(&dir.join("id_test"))?)?,
        ds_tests,
        zsl_test: set_to_samples(read_feature_set(&dir.join("zsl_test"))?)?,
        prompts_id,
        prompts_zsl,
        gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::generate_benchmark;

    #[test]
    fn bundle_round_trip_up_to_f32() {
        let b = generate_benchmark(&GenConfig::tiny(4, 5, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &b).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.gen, b.gen);
        assert_eq!(back.captions, b.captions);
        assert_eq!(back.id_classes, b.id_classes);
        assert_eq!(back.ds_tests.len(), b.ds_tests.len());
        assert_eq!(back.finetune.len(), b.finetune.len());
        for (x, y) in back.finetune.iter().zip(&b.finetune) {
            assert_eq!(
                (x.id, x.class_id, x.domain_id),
                (y.id, y.class_id, y.domain_id)
            );
            assert!(x
                .feature
                .iter()
                .zip(y.feature.iter())
                .all(|(a, b)| *a == *b as f32 as f64));
        }
        let ids: Vec<u64> = back.candidates.iter().map(|c| c.id).collect();
        assert_eq!(ids, b.candidates.iter().map(|c| c.id).collect::<Vec<_>>());
        // A second write of the loaded bundle is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        write_bundle(dir2.path(), &back).unwrap();
        for name in ["finetune.arfm", "prompts_zsl.arfm", "pretrain_text.jsonl"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap()
            );
        }
    }
}
