//! Captions, training logs, candidate indexes, metrics and ensemble curves.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_json, read_jsonl, write_json, write_jsonl};
use crate::anchors::{CandidateIndex, CaptionRecord, CaptionTable};
use crate::encoders::Modality;
use crate::error::{ArfError, Result};
use crate::evaluation::EnsembleCurve;
use crate::numerics::Matrix;
use crate::training::StepRecord;

pub fn write_captions(path: &Path, captions: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, captions)
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path)
}

/// A file of `{sample_id, caption_feature}` lines as a caption provider.
pub fn caption_table_from_file(path: &Path) -> Result<CaptionTable> {
    Ok(CaptionTable::from_records(&read_captions(path)?))
}

pub fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    write_jsonl(path, log)
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_jsonl(path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexDocument {
    format_version: u64,
    source_checkpoint_id: String,
    candidate_ids: Vec<u64>,
    image_embeddings: Matrix,
    text_embeddings: Matrix,
}

const INDEX_VERSION: u64 = 1;

pub fn write_index(path: &Path, index: &CandidateIndex) -> Result<()> {
    write_json(
        path,
        &IndexDocument {
            format_version: INDEX_VERSION,
            source_checkpoint_id: index.source_checkpoint_id().to_owned(),
            candidate_ids: index.candidate_ids().to_vec(),
            image_embeddings: index.embeddings(Modality::Image).clone(),
            text_embeddings: index.embeddings(Modality::Text).clone(),
        },
    )
}

pub fn read_index(path: &Path) -> Result<CandidateIndex> {
    let doc: IndexDocument = read_json(path)?;
    if doc.format_version != INDEX_VERSION {
        return Err(ArfError::VersionUnsupported(doc.format_version));
    }
    CandidateIndex::new(
        doc.candidate_ids,
        doc.image_embeddings,
        doc.text_embeddings,
        doc.source_checkpoint_id,
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with header `alpha,<splits...>,avg_ood,best_id_alpha`; split columns
/// follow the order the splits were evaluated in (`id`, `ds_*`, `zsl`).
pub fn curve_to_csv(curve: &EnsembleCurve) -> String {
    let names = curve.split_names();
    let mut out = String::from("alpha");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",avg_ood,best_id_alpha\n");
    for row in &curve.rows {
        let _ = write!(out, "{}", row.alpha);
        for n in &names {
            let _ = write!(out, ",{}", opt(row.metrics.accuracy(n)));
        }
        let _ = writeln!(
            out,
            ",{},{}",
            opt(row.metrics.avg_ood),
            opt(curve.best_id_alpha)
        );
    }
    out
}

pub fn write_curve(path: &Path, curve: &EnsembleCurve) -> Result<()> {
    atomic_write(path, curve_to_csv(curve).as_bytes())
}
