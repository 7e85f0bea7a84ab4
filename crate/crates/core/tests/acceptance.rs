//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use arf_core::anchors::{retrieve, CandidateIndex, RetrievalMode, Sample};
use arf_core::contrastive::{contrastive_loss, GradCheckDims, PairBatch};
use arf_core::encoders::{encode, init_params, Modality};
use arf_core::evaluation::{
    build_prompt_classifier, classify, ensemble_weights, predict_from_scores, PromptTable,
};
use arf_core::experiment::{mean_accuracy, run_seed, SeedOutcome, Variant};
use arf_core::io::checkpoint::{
    checkpoint_from_json, checkpoint_to_json, read_checkpoint, write_checkpoint,
};
use arf_core::io::config::RunConfig;
use arf_core::io::features::{
    feature_paths, read_feature_set, write_feature_set, FeatureRecord, FeatureSet,
};
use arf_core::numerics::{Matrix, RandomStream, Vector};
use arf_core::training::{composite_grad_check, Checkpoint, Provenance};
use arf_core::ArfError;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    fn timed(self, elapsed: Duration, limit: Duration) -> Self {
        Outcome {
            passed: self.passed && elapsed <= limit,
            detail: format!("{}; {:.2?} (limit {:?})", self.detail, elapsed, limit),
        }
    }
}

fn unit_rows(rng: &mut RandomStream, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let v = rng.gaussian_vec(cols, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (dst, x) in m.row_mut(i).iter_mut().zip(&v) {
            *dst = x / n;
        }
    }
    m
}

/// Cross-entropy of the diagonal under an explicit row softmax.
fn diagonal_cross_entropy(logits: &[Vec<f64>]) -> f64 {
    let b = logits.len();
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        total -= ((row[i] - m).exp() / z).ln();
    }
    total / b as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = RandomStream::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 1 + rng.below(8) as usize;
        let tau = 0.01 + rng.uniform();
        let batch = PairBatch::new(unit_rows(&mut rng, 1, d), unit_rows(&mut rng, 1, d)).unwrap();
        worst = worst.max(contrastive_loss(&batch, tau).unwrap().total.abs());
    }
    Outcome::new(
        worst <= 1e-12,
        format!("max |loss| {worst:.1e} over 100 pairs"),
    )
    .timed(start.elapsed(), Duration::from_secs(1))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = RandomStream::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let b = 1 + rng.below(16) as usize;
        let d = 1 + rng.below(8) as usize;
        let tau = 0.02 + rng.uniform();
        let f = unit_rows(&mut rng, b, d);
        let g = unit_rows(&mut rng, b, d);
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| (0..d).map(|k| f.get(i, k) * g.get(j, k)).sum::<f64>() / tau)
                    .collect()
            })
            .collect();
        let transposed: Vec<Vec<f64>> = (0..b)
            .map(|j| (0..b).map(|i| logits[i][j]).collect())
            .collect();
        let i2t = diagonal_cross_entropy(&logits);
        let t2i = diagonal_cross_entropy(&transposed);
        let got = contrastive_loss(&PairBatch::new(f, g).unwrap(), tau).unwrap();
        worst = worst
            .max((got.image_to_text - i2t).abs())
            .max((got.text_to_image - t2i).abs())
            .max((got.total - (i2t + t2i)).abs());
    }
    Outcome::new(
        worst <= 1e-10,
        format!("max deviation {worst:.1e} over 200 instances"),
    )
    .timed(start.elapsed(), Duration::from_secs(5))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::shipped();
    let dims = GradCheckDims {
        batch: 4,
        image_dim: cfg.gen.d_img_raw,
        text_dim: cfg.gen.d_txt_raw,
        hidden: cfg.model.hidden,
        embed_dim: cfg.model.embed_dim,
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut checked = 0;
    for seed in 0..20 {
        let report = composite_grad_check(seed, dims, 1e-5).unwrap();
        worst = worst.max(report.max_rel_err);
        checked += report.elements_checked;
        if !report.passed {
            failed.push(seed);
        }
    }
    Outcome::new(
        failed.is_empty(),
        format!(
            "max rel err {worst:.2e} over {checked} elements, 20 seeds, failing seeds {failed:?}"
        ),
    )
    .timed(start.elapsed(), Duration::from_secs(60))
}

/// Full sort by descending score, ascending id.
fn brute_force_top_k(q: &[f64], side: &Matrix, ids: &[u64], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = side
        .row_iter()
        .zip(ids)
        .map(|(row, &id)| {
            let mut s = 0.0;
            for (a, b) in q.iter().zip(row) {
                s += a * b;
            }
            (id, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = RandomStream::new(404);
    let (n, dim_img, dim_txt, embed) = (5000, 12, 10, 8);
    let params = init_params(7, (dim_img, dim_txt), 16, embed).unwrap();
    let checkpoint = Checkpoint::new(params, "retrieval".into(), Provenance::Pretrained).unwrap();
    // Rows repeat from small pools so that exact score ties are common.
    let pool_img = unit_rows(&mut rng, 1500, embed);
    let pool_txt = unit_rows(&mut rng, 1500, embed);
    let mut image = Matrix::zeros(n, embed);
    let mut text = Matrix::zeros(n, embed);
    for i in 0..n {
        image
            .row_mut(i)
            .copy_from_slice(pool_img.row(rng.below(1500) as usize));
        text.row_mut(i)
            .copy_from_slice(pool_txt.row(rng.below(1500) as usize));
    }
    let mut ids: Vec<u64> = (0..n as u64).map(|i| 3 * i + 11).collect();
    rng.shuffle(&mut ids);
    let index = CandidateIndex::new(ids.clone(), image, text, checkpoint.id().to_string()).unwrap();

    let mut mismatches = 0usize;
    let mut compared = 0usize;
    let mut tied = 0usize;
    for mode in RetrievalMode::ALL {
        let width = checkpoint.params.input_dim(mode.query_modality());
        let queries: Vec<(u64, Vector)> = (0..1000u64)
            .map(|i| (i, Vector::new(rng.gaussian_vec(width, 1.0)).unwrap()))
            .collect();
        let side = index.embeddings(mode.index_side());
        for k in [1, 5] {
            let got = retrieve(&index, &queries, &checkpoint, mode, k).unwrap();
            for ((qid, raw), hits) in queries.iter().zip(got.chunks(k)) {
                let q = encode(&checkpoint.params, mode.query_modality(), raw).unwrap();
                let expected = brute_force_top_k(&q, side, &ids, k);
                compared += 1;
                if expected.windows(2).any(|w| w[0].1 == w[1].1) {
                    tied += 1;
                }
                let same = hits.len() == k
                    && hits.iter().zip(&expected).all(|(h, e)| {
                        h.query_sample_id == *qid
                            && h.candidate_id == e.0
                            && h.score == e.1
                            && h.mode == mode
                    });
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome::new(
        mismatches == 0 && compared == 8000,
        format!("{mismatches} mismatches in {compared} ranked lists ({tied} with ties), 5000 candidates"),
    )
    .timed(start.elapsed(), Duration::from_secs(30))
}

fn criterion_5() -> Outcome {
    let mut worst_mid: f64 = 0.0;
    let mut endpoints_exact = true;
    for seed in 0..25 {
        let pre = Checkpoint::new(
            init_params(seed, (9, 7), 11, 5).unwrap(),
            "a".into(),
            Provenance::Pretrained,
        )
        .unwrap();
        let mut ft_params = init_params(seed + 1000, (9, 7), 11, 5).unwrap();
        ft_params.log_tau += 0.3;
        let ft = Checkpoint::new(ft_params, "b".into(), Provenance::Finetuned).unwrap();
        let (a, b) = (pre.params.to_flat(), ft.params.to_flat());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        endpoints_exact &= bits(&ensemble_weights(&pre, &ft, 0.0).unwrap().to_flat()) == bits(&a);
        endpoints_exact &= bits(&ensemble_weights(&pre, &ft, 1.0).unwrap().to_flat()) == bits(&b);
        let mid = ensemble_weights(&pre, &ft, 0.5).unwrap().to_flat();
        for ((m, x), y) in mid.iter().zip(&a).zip(&b) {
            worst_mid = worst_mid.max((m - (x + y) / 2.0).abs());
        }
    }
    Outcome::new(
        endpoints_exact && worst_mid <= 1e-15,
        format!("endpoints bit-exact: {endpoints_exact}; max midpoint deviation {worst_mid:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::run_pipeline(a.path(), 0);
    common::run_pipeline(b.path(), 0);
    let (sa, sb) = (common::snapshot(a.path()), common::snapshot(b.path()));
    let differing: Vec<_> = sa
        .iter()
        .filter(|(k, v)| sb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let required = [
        "pre.json",
        "ft.json",
        "pretrain_log.jsonl",
        "train_log.jsonl",
        "metrics.json",
        "curve.csv",
    ];
    let complete = required
        .iter()
        .all(|r| sa.contains_key(std::path::Path::new(r)));
    Outcome::new(
        differing.is_empty() && sa.len() == sb.len() && complete,
        format!("{} files compared, differing {:?}", sa.len(), differing),
    )
}

fn seed_outcomes() -> (Vec<SeedOutcome>, Duration, Duration) {
    let cfg = RunConfig::shipped();
    let start = Instant::now();
    let mut slowest = Duration::ZERO;
    let outcomes = (0..10)
        .map(|seed| {
            let t = Instant::now();
            let o = run_seed(&cfg, seed, &Variant::ALL).unwrap();
            slowest = slowest.max(t.elapsed());
            o
        })
        .collect();
    (outcomes, slowest, start.elapsed())
}

fn criterion_7(outcomes: &[SeedOutcome], slowest: Duration, total: Duration) -> Outcome {
    let base = mean_accuracy(outcomes, Some(Variant::Baseline));
    let arf = mean_accuracy(outcomes, Some(Variant::Arf));
    let zsl_gain = arf.zsl - base.zsl;
    let id_gap = (arf.id - base.id).abs();
    let passed = zsl_gain >= 5.0
        && id_gap <= 2.0
        && arf.ds >= base.ds
        && slowest <= Duration::from_secs(30)
        && total <= Duration::from_secs(600);
    Outcome::new(
        passed,
        format!(
            "(a) ZSL {:.2} vs {:.2} (+{:.2}, need ≥ 5); (b) ID {:.2} vs {:.2} (|Δ| {:.2}, need ≤ 2); \
             (c) DS {:.2} vs {:.2}; slowest seed {:.2?}, total {:.2?}",
            arf.zsl, base.zsl, zsl_gain, arf.id, base.id, id_gap, arf.ds, base.ds, slowest, total
        ),
    )
}

fn criterion_8(outcomes: &[SeedOutcome]) -> Outcome {
    let zsl = |o: &SeedOutcome, v: Variant| o.metrics(v).and_then(|m| m.accuracy("zsl")).unwrap();
    let wins = |v: Variant| {
        outcomes
            .iter()
            .filter(|o| zsl(o, v) > zsl(o, Variant::Baseline))
            .count()
    };
    let (cap, ret) = (wins(Variant::ClCap), wins(Variant::ClRet));
    Outcome::new(
        cap >= 8 && ret >= 8 && outcomes.len() == 10,
        format!("ZSL wins over cl: cl+cap {cap}/10, cl+ret {ret}/10 (need ≥ 8)"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = RandomStream::new(909);
    let mut changed = 0usize;
    let mut oracle_disagreements = 0usize;
    let mut predictions = 0usize;
    for set in 0..100u64 {
        let (di, dt) = (3 + rng.below(6) as usize, 3 + rng.below(6) as usize);
        let params = init_params(set, (di, dt), 6, 4).unwrap();
        let n_classes = 2 + rng.below(9) as usize;
        let mut class_ids: Vec<u32> = (0..40).collect();
        rng.shuffle(&mut class_ids);
        class_ids.truncate(n_classes);
        let prompts = PromptTable::new(
            class_ids.clone(),
            Matrix::from_vec(n_classes, dt, rng.gaussian_vec(n_classes * dt, 1.0)).unwrap(),
        )
        .unwrap();
        let images: Vec<Sample> = (0..30)
            .map(|i| Sample {
                id: i,
                feature: Vector::new(rng.gaussian_vec(di, 1.0)).unwrap(),
                class_id: 0,
                domain_id: 0,
            })
            .collect();
        let classifier = build_prompt_classifier(&params, &prompts).unwrap();
        let base = classify(&params, &images, &classifier, &class_ids).unwrap();

        let mut doubled = classifier.clone();
        doubled.as_mut_slice().iter_mut().for_each(|v| *v *= 4.0);
        if classify(&params, &images, &doubled, &class_ids).unwrap() != base {
            changed += 1;
        }
        let c = (rng.uniform() * 8.0 - 4.0).exp();
        for (img, &pred) in images.iter().zip(&base) {
            let e = encode(&params, Modality::Image, &img.feature).unwrap();
            let scores: Vec<f64> = classifier
                .row_iter()
                .map(|row| row.iter().zip(e.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..n_classes)
                .max_by(|&i, &j| {
                    scores[i]
                        .total_cmp(&scores[j])
                        .then(class_ids[j].cmp(&class_ids[i]))
                })
                .unwrap();
            if class_ids[best] != pred {
                oracle_disagreements += 1;
            }
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            if predict_from_scores(&scaled, &class_ids) != Some(pred) {
                changed += 1;
            }
            predictions += 1;
        }
    }
    Outcome::new(
        changed == 0 && oracle_disagreements == 0,
        format!("{changed} changed and {oracle_disagreements} oracle disagreements over {predictions} predictions in 100 sets"),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RandomStream::new(1010);
    let mut notes = Vec::new();

    let (rows, cols) = (37, 9);
    let values: Vec<f64> = rng.gaussian_vec(rows * cols, 3.0);
    let manifest: Vec<FeatureRecord> = (0..rows as u64)
        .map(|i| FeatureRecord {
            id: 1000 + i,
            class_id: (i % 3 != 0).then_some(i as u32 % 5),
            domain_id: (i % 2 == 0).then_some(i as u32 % 3),
            kind: "image".into(),
        })
        .collect();
    let set = FeatureSet::new(
        manifest.clone(),
        Matrix::from_vec(rows, cols, values.clone()).unwrap(),
    )
    .unwrap();
    let base = dir.path().join("set");
    write_feature_set(&base, &set).unwrap();
    let back = read_feature_set(&base).unwrap();
    let features_ok = back.manifest() == manifest.as_slice()
        && back
            .matrix()
            .as_slice()
            .iter()
            .zip(&values)
            .all(|(got, v)| got.to_bits() == (*v as f32 as f64).to_bits());
    notes.push(format!(
        "feature set round trip {}",
        if features_ok { "ok" } else { "BROKEN" }
    ));

    let (_, arfm) = feature_paths(&base);
    let pristine = std::fs::read(&arfm).unwrap();
    let mut bytes = pristine.clone();
    bytes[0] ^= 0x20;
    std::fs::write(&arfm, &bytes).unwrap();
    let bad_magic = matches!(read_feature_set(&base), Err(ArfError::BadMagic));
    let mut bytes = pristine.clone();
    bytes[8..12].copy_from_slice(&(rows as u32 - 1).to_le_bytes());
    std::fs::write(&arfm, &bytes).unwrap();
    let row_count = matches!(
        read_feature_set(&base),
        Err(ArfError::RowCountMismatch { .. })
    );
    notes.push(format!(
        "bad magic detected {bad_magic}, row count mismatch detected {row_count}"
    ));

    let mut params = init_params(5, (6, 4), 7, 3).unwrap();
    params.log_tau = -std::f64::consts::E;
    let ck = Checkpoint::new(params, "codec".into(), Provenance::Finetuned).unwrap();
    let path = dir.path().join("ck.json");
    write_checkpoint(&path, &ck).unwrap();
    let read = read_checkpoint(&path).unwrap();
    let bits = |c: &Checkpoint| {
        c.params
            .to_flat()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    let checkpoint_ok =
        bits(&read) == bits(&ck) && read.id() == ck.id() && read.provenance == ck.provenance;
    notes.push(format!(
        "checkpoint round trip {}",
        if checkpoint_ok { "bit-exact" } else { "BROKEN" }
    ));

    let text = checkpoint_to_json(&ck).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let w = &mut doc["params"]["text"]["w2"]["values"][3];
    *w = serde_json::json!(w.as_f64().unwrap() + 1e-9);
    let tampered = matches!(
        checkpoint_from_json(&doc.to_string()),
        Err(ArfError::HashMismatch { .. })
    );
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["params"].as_object_mut().unwrap().remove("log_tau");
    let missing = matches!(checkpoint_from_json(&doc.to_string()), Err(ArfError::MissingField(f)) if f.contains("log_tau"));
    notes.push(format!(
        "tampered weight detected {tampered}, missing log_tau detected {missing}"
    ));

    Outcome::new(
        features_ok && bad_magic && row_count && checkpoint_ok && tampered && missing,
        notes.join("; "),
    )
}

fn main() -> ExitCode {
    let mut all_passed = true;
    let mut report = |n: u32, title: &str, o: Outcome| {
        all_passed &= o.passed;
        println!(
            "criterion {n:>2} {} {title}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "single-pair loss is zero", criterion_1());
    report(2, "loss matches softmax cross-entropy", criterion_2());
    report(
        3,
        "composite gradients match finite differences",
        criterion_3(),
    );
    report(4, "retrieval matches brute force", criterion_4());
    report(5, "ensemble identities", criterion_5());
    report(6, "pipeline determinism", criterion_6());
    let (outcomes, slowest, total) = seed_outcomes();
    report(
        7,
        "anchor finetuning effect",
        criterion_7(&outcomes, slowest, total),
    );
    report(8, "ablation directionality", criterion_8(&outcomes));
    report(9, "argmax scale invariance", criterion_9());
    report(10, "codec integrity", criterion_10());
    if all_passed {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
