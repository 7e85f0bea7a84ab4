//! Checkpoint JSON codec. Floats are written as the shortest decimal that
//! parses back to the same `f64`; the `id` is the SHA-256 of the document
//! without it and is re-derived on read.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::atomic_write;
use crate::encoders::DualEncoderParams;
use crate::error::{ArfError, Result};
use crate::training::{Checkpoint, Provenance};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Serialize)]
struct HashBody<'a> {
    format_version: u64,
    provenance: Provenance,
    config_fingerprint: &'a str,
    params: &'a DualEncoderParams,
}

#[derive(Serialize)]
struct Document<'a> {
    format_version: u64,
    id: &'a str,
    provenance: Provenance,
    config_fingerprint: &'a str,
    params: &'a DualEncoderParams,
}

pub fn content_hash(
    params: &DualEncoderParams,
    config_fingerprint: &str,
    provenance: Provenance,
) -> String {
    let body = HashBody {
        format_version: CHECKPOINT_VERSION,
        provenance,
        config_fingerprint,
        params,
    };
    let json = serde_json::to_vec(&body).expect("parameters serialize");
    hex::encode(Sha256::digest(json))
}

pub fn checkpoint_to_json(ck: &Checkpoint) -> Result<String> {
    let doc = Document {
        format_version: CHECKPOINT_VERSION,
        id: ck.id(),
        provenance: ck.provenance,
        config_fingerprint: &ck.config_fingerprint,
        params: &ck.params,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    v.get(key).filter(|x| !x.is_null()).ok_or_else(|| {
        ArfError::MissingField(if path.is_empty() {
            key.to_string()
        } else {
            format!("{path}.{key}")
        })
    })
}

fn string_field(v: &Value, key: &str) -> Result<String> {
    field(v, key, "")?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| ArfError::Malformed(format!("`{key}` must be a string")))
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let doc: Value = serde_json::from_str(text)?;
    let version = field(&doc, "format_version", "")?
        .as_u64()
        .ok_or_else(|| ArfError::Malformed("`format_version` must be an integer".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(ArfError::VersionUnsupported(version));
    }
    let stored = string_field(&doc, "id")?;
    let fingerprint = string_field(&doc, "config_fingerprint")?;
    let provenance: Provenance = serde_json::from_value(field(&doc, "provenance", "")?.clone())?;
    let params = field(&doc, "params", "")?;
    for tower in ["image", "text"] {
        let t = field(params, tower, "params")?;
        for key in ["w1", "b1", "w2", "b2"] {
            field(t, key, &format!("params.{tower}"))?;
        }
    }
    field(params, "log_tau", "params")?;
    let params: DualEncoderParams = serde_json::from_value(params.clone())?;
    params.validate()?;
    let computed = content_hash(&params, &fingerprint, provenance);
    if computed != stored {
        return Err(ArfError::HashMismatch { stored, computed });
    }
    Checkpoint::new(params, fingerprint, provenance)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, checkpoint_to_json(ck)?.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_params;

    fn ck() -> Checkpoint {
        let mut p = init_params(3, (4, 3), 5, 2).unwrap();
        p.log_tau = 0.07f64.ln();
        Checkpoint::new(p, "fp".into(), Provenance::Pretrained).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ck();
        let back = checkpoint_from_json(&checkpoint_to_json(&c).unwrap()).unwrap();
        assert_eq!(back.id(), c.id());
        let (a, b) = (c.params.to_flat(), back.params.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn key_order_is_fixed() {
        let text = checkpoint_to_json(&ck()).unwrap();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("format_version") < pos("id"));
        assert!(pos("id") < pos("provenance"));
        assert!(pos("provenance") < pos("config_fingerprint"));
        assert!(pos("config_fingerprint") < pos("params"));
        assert!(pos("w1") < pos("b1") && pos("b1") < pos("w2"));
    }

    #[test]
    fn tampered_weight_is_detected() {
        let c = ck();
        let mut v: Value = serde_json::from_str(&checkpoint_to_json(&c).unwrap()).unwrap();
        let x = v["params"]["image"]["w1"]["values"][0].as_f64().unwrap();
        v["params"]["image"]["w1"]["values"][0] = serde_json::json!(x + 1e-3);
        assert!(matches!(
            checkpoint_from_json(&v.to_string()),
            Err(ArfError::HashMismatch { .. })
        ));
    }

    #[test]
    fn missing_fields_and_version() {
        let c = ck();
        let base: Value = serde_json::from_str(&checkpoint_to_json(&c).unwrap()).unwrap();
        let mut v = base.clone();
        v["params"].as_object_mut().unwrap().remove("log_tau");
        match checkpoint_from_json(&v.to_string()) {
            Err(ArfError::MissingField(f)) => assert_eq!(f, "params.log_tau"),
            other => panic!("{other:?}"),
        }
        let mut v = base.clone();
        v.as_object_mut().unwrap().remove("id");
        assert!(matches!(
            checkpoint_from_json(&v.to_string()),
            Err(ArfError::MissingField(_))
        ));
        let mut v = base;
        v["format_version"] = serde_json::json!(9);
        assert!(matches!(
            checkpoint_from_json(&v.to_string()),
            Err(ArfError::VersionUnsupported(9))
        ));
    }

    #[test]
    fn id_depends_on_provenance_and_fingerprint() {
        let c = ck();
        let other = Checkpoint::new(c.params.clone(), "fp".into(), Provenance::Finetuned).unwrap();
        let other2 =
            Checkpoint::new(c.params.clone(), "fq".into(), Provenance::Pretrained).unwrap();
        assert_ne!(c.id(), other.id());
        assert_ne!(c.id(), other2.id());
        assert_eq!(c.id().len(), 64);
    }
}
