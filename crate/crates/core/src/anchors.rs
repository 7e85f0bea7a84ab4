//! Anchor supervision for finetuning: caption anchors for finetune images
//! and image–text pairs retrieved from a candidate pool, assembled per step.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode, Modality};
use crate::error::{ArfError, Result};
use crate::evaluation::PromptTable;
use crate::numerics::{dot, Matrix, Vector};
use crate::training::Checkpoint;

/// A labelled finetune or evaluation image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub feature: Vector,
    pub class_id: u32,
    pub domain_id: u32,
}

/// Generated caption feature for one finetune sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: u64,
    pub caption_feature: Vector,
}

/// One image–text pair of the candidate (or pretraining) pool.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair {
    pub id: u64,
    pub image_feature: Vector,
    pub text_feature: Vector,
}

/// Anything that can produce a caption feature for a sample.
pub trait CaptionProvider {
    /// `None` when no caption is available for `sample`.
    fn caption(&self, sample: &Sample) -> Option<Vector>;
}

/// Caption lookup by sample id, e.g. imported from a JSONL file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptionTable {
    by_id: BTreeMap<u64, Vector>,
}

impl CaptionTable {
    pub fn from_records(records: &[CaptionRecord]) -> Self {
        CaptionTable {
            by_id: records
                .iter()
                .map(|r| (r.sample_id, r.caption_feature.clone()))
                .collect(),
        }
    }

    pub fn get(&self, sample_id: u64) -> Option<&Vector> {
        self.by_id.get(&sample_id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl CaptionProvider for CaptionTable {
    fn caption(&self, sample: &Sample) -> Option<Vector> {
        self.get(sample.id).cloned()
    }
}

pub fn attach_captions<P: CaptionProvider + ?Sized>(
    samples: &[Sample],
    provider: &P,
) -> Result<Vec<CaptionRecord>> {
    samples
        .iter()
        .map(|s| {
            provider
                .caption(s)
                .map(|caption_feature| CaptionRecord {
                    sample_id: s.id,
                    caption_feature,
                })
                .ok_or(ArfError::MissingCaption(s.id))
        })
        .collect()
}

/// Query modality (first letter) and candidate side (second letter).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "v2t")]
    V2T,
    #[serde(rename = "v2v")]
    V2V,
    #[serde(rename = "t2t")]
    T2T,
    #[serde(rename = "t2v")]
    T2V,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 4] = [
        RetrievalMode::V2T,
        RetrievalMode::V2V,
        RetrievalMode::T2T,
        RetrievalMode::T2V,
    ];

    pub fn query_modality(self) -> Modality {
        match self {
            RetrievalMode::V2T | RetrievalMode::V2V => Modality::Image,
            RetrievalMode::T2T | RetrievalMode::T2V => Modality::Text,
        }
    }

    pub fn index_side(self) -> Modality {
        match self {
            RetrievalMode::V2T | RetrievalMode::T2T => Modality::Text,
            RetrievalMode::V2V | RetrievalMode::T2V => Modality::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::V2T => "v2t",
            RetrievalMode::V2V => "v2v",
            RetrievalMode::T2T => "t2t",
            RetrievalMode::T2V => "t2v",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        RetrievalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ArfError::UnknownMode(s.to_string()))
    }
}

/// Unit embeddings of the candidate pool under one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateIndex {
    candidate_ids: Vec<u64>,
    image_embeddings: Matrix,
    text_embeddings: Matrix,
    source_checkpoint_id: String,
}

impl CandidateIndex {
    pub fn new(
        candidate_ids: Vec<u64>,
        image_embeddings: Matrix,
        text_embeddings: Matrix,
        source_checkpoint_id: String,
    ) -> Result<Self> {
        let n = candidate_ids.len();
        if n == 0 {
            return Err(ArfError::EmptyCandidates);
        }
        if image_embeddings.rows() != n || text_embeddings.rows() != n {
            return Err(ArfError::RowCountMismatch {
                manifest: n,
                matrix: image_embeddings.rows().min(text_embeddings.rows()),
            });
        }
        if image_embeddings.cols() != text_embeddings.cols() {
            return Err(ArfError::dim(
                "index embedding dim",
                image_embeddings.cols(),
                text_embeddings.cols(),
            ));
        }
        for m in [&image_embeddings, &text_embeddings] {
            if m.row_iter()
                .any(|r| (crate::numerics::norm(r) - 1.0).abs() > 1e-9)
            {
                return Err(ArfError::Malformed("index rows must be unit norm".into()));
            }
        }
        Ok(CandidateIndex {
            candidate_ids,
            image_embeddings,
            text_embeddings,
            source_checkpoint_id,
        })
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    pub fn candidate_ids(&self) -> &[u64] {
        &self.candidate_ids
    }

    pub fn embeddings(&self, side: Modality) -> &Matrix {
        match side {
            Modality::Image => &self.image_embeddings,
            Modality::Text => &self.text_embeddings,
        }
    }

    pub fn source_checkpoint_id(&self) -> &str {
        &self.source_checkpoint_id
    }

    pub fn embed_dim(&self) -> usize {
        self.image_embeddings.cols()
    }
}

/// Encodes every candidate (both modalities) in input order.
pub fn build_candidate_index(
    checkpoint: &Checkpoint,
    candidates: &[CandidatePair],
) -> Result<CandidateIndex> {
    if candidates.is_empty() {
        return Err(ArfError::EmptyCandidates);
    }
    let params = &checkpoint.params;
    params.validate()?;
    let d = params.embed_dim();
    let mut images = Matrix::zeros(candidates.len(), d);
    let mut texts = Matrix::zeros(candidates.len(), d);
    for (i, c) in candidates.iter().enumerate() {
        images
            .row_mut(i)
            .copy_from_slice(&encode(params, Modality::Image, &c.image_feature)?);
        texts
            .row_mut(i)
            .copy_from_slice(&encode(params, Modality::Text, &c.text_feature)?);
    }
    CandidateIndex::new(
        candidates.iter().map(|c| c.id).collect(),
        images,
        texts,
        checkpoint.id().to_string(),
    )
}

/// One retrieved candidate for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAssignment {
    pub query_sample_id: u64,
    pub candidate_id: u64,
    pub score: f64,
    pub mode: RetrievalMode,
}

/// Retrieval queries for `samples`: the image feature for image-side modes,
/// the class prompt feature for text-side modes.
pub fn retrieval_queries(
    samples: &[Sample],
    prompts: &PromptTable,
    mode: RetrievalMode,
) -> Result<Vec<(u64, Vector)>> {
    samples
        .iter()
        .map(|s| {
            let q = match mode.query_modality() {
                Modality::Image => s.feature.clone(),
                Modality::Text => prompts.feature(s.class_id)?,
            };
            Ok((s.id, q))
        })
        .collect()
}

#[inline]
fn ranks_before(a: (f64, u64), b: (f64, u64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Exact top-`k` search by dot product. For each query, in input order,
/// returns `k` assignments in strictly descending score, equal scores
/// ordered by ascending candidate id.
pub fn retrieve(
    index: &CandidateIndex,
    queries: &[(u64, Vector)],
    checkpoint: &Checkpoint,
    mode: RetrievalMode,
    k: usize,
) -> Result<Vec<RetrievalAssignment>> {
    let n = index.len();
    if k < 1 || k > n {
        return Err(ArfError::KOutOfRange { k, n });
    }
    if index.source_checkpoint_id() != checkpoint.id() {
        return Err(ArfError::CheckpointMismatch {
            index: index.source_checkpoint_id().to_string(),
            query: checkpoint.id().to_string(),
        });
    }
    let side = index.embeddings(mode.index_side());
    let ids = index.candidate_ids();
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut top: Vec<(f64, u64)> = Vec::with_capacity(k + 1);
    for (query_id, raw) in queries {
        let q = encode(&checkpoint.params, mode.query_modality(), raw)?;
        top.clear();
        for (row, &cid) in side.row_iter().zip(ids) {
            let entry = (dot(&q, row), cid);
            if top.len() == k && !ranks_before(entry, top[k - 1]) {
                continue;
            }
            let pos = top.partition_point(|&t| ranks_before(t, entry));
            top.insert(pos, entry);
            top.truncate(k);
        }
        out.extend(
            top.iter()
                .map(|&(score, candidate_id)| RetrievalAssignment {
                    query_sample_id: *query_id,
                    candidate_id,
                    score,
                    mode,
                }),
        );
    }
    Ok(out)
}

/// Assignments grouped by query sample id, each group in rank order.
pub type AssignmentTable = BTreeMap<u64, Vec<RetrievalAssignment>>;

pub fn group_assignments(assignments: Vec<RetrievalAssignment>) -> AssignmentTable {
    let mut table = AssignmentTable::new();
    for a in assignments {
        table.entry(a.query_sample_id).or_default().push(a);
    }
    table
}

/// How anchor pairs enter the loss: two separate contrastive terms, or one
/// term over the concatenated list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLayout {
    #[default]
    Sep,
    Merge,
}

impl FromStr for AnchorLayout {
    type Err = ArfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sep" => Ok(AnchorLayout::Sep),
            "merge" => Ok(AnchorLayout::Merge),
            other => Err(ArfError::InvalidArgument(format!(
                "unknown anchor layout {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AnchorLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorLayout::Sep => "sep",
            AnchorLayout::Merge => "merge",
        })
    }
}

/// Raw image and text features of one anchor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPair {
    pub image: Vector,
    pub text: Vector,
}

/// Anchor supervision for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBatch {
    pub caption_pairs: Vec<AnchorPair>,
    pub retrieved_pairs: Vec<AnchorPair>,
    /// Distinct retrieved candidate ids in first-occurrence order.
    pub retrieved_ids: Vec<u64>,
    pub layout: AnchorLayout,
    /// Fewer than two distinct retrieved pairs: the retrieval term is skipped.
    pub skip_ret: bool,
}

/// Candidate pairs by id.
#[derive(Clone, Debug, Default)]
pub struct CandidateLookup<'a> {
    by_id: HashMap<u64, &'a CandidatePair>,
}

impl<'a> CandidateLookup<'a> {
    pub fn new(candidates: &'a [CandidatePair]) -> Self {
        CandidateLookup {
            by_id: candidates.iter().map(|c| (c.id, c)).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&'a CandidatePair> {
        self.by_id.get(&id).copied()
    }
}

/// Builds the anchors for one minibatch. `assignments` is `None` when the
/// retrieval term is disabled.
pub fn assemble_anchor_batch(
    batch: &[Sample],
    captions: &CaptionTable,
    assignments: Option<&AssignmentTable>,
    candidates: &CandidateLookup<'_>,
    layout: AnchorLayout,
) -> Result<AnchorBatch> {
    let mut caption_pairs = Vec::with_capacity(batch.len());
    for s in batch {
        let caption = captions.get(s.id).ok_or(ArfError::MissingCaption(s.id))?;
        caption_pairs.push(AnchorPair {
            image: s.feature.clone(),
            text: caption.clone(),
        });
    }

    let mut retrieved_ids: Vec<u64> = Vec::new();
    let mut retrieved_pairs = Vec::new();
    if let Some(table) = assignments {
        for s in batch {
            let assigned = table.get(&s.id).ok_or(ArfError::MissingAssignment(s.id))?;
            for a in assigned {
                if retrieved_ids.contains(&a.candidate_id) {
                    continue;
                }
                let c = candidates
                    .get(a.candidate_id)
                    .ok_or(ArfError::UnknownCandidate(a.candidate_id))?;
                retrieved_ids.push(a.candidate_id);
                retrieved_pairs.push(AnchorPair {
                    image: c.image_feature.clone(),
                    text: c.text_feature.clone(),
                });
            }
        }
    }

    let skip_ret = retrieved_ids.len() < 2;
    if layout == AnchorLayout::Merge {
        caption_pairs.append(&mut retrieved_pairs);
    }
    Ok(AnchorBatch {
        caption_pairs,
        retrieved_pairs,
        retrieved_ids,
        layout,
        skip_ret,
    })
}
