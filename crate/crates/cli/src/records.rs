//! Line-delimited JSON result records.

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// PSNR values as JSON numbers, with `"inf"` for identical images.
mod decibels {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom(format!("cannot record PSNR {v}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value '{t}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
pub enum Record {
    Evaluation {
        id: String,
        task: String,
        #[serde(with = "decibels")]
        psnr_db: f64,
        ssim: f64,
    },
    Ablation {
        id: String,
        task: String,
        patch_size: usize,
        stride: usize,
        overlap: bool,
        window: String,
        trained: bool,
        steps: usize,
        #[serde(with = "decibels")]
        psnr_db: f64,
        ssim: f64,
        seam_energy: f64,
        seconds: f64,
    },
}

pub fn to_lines(records: &[Record]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_records(text: &str) -> Result<Vec<Record>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("record line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_psnr_round_trips() {
        let r = vec![
            Record::Evaluation {
                id: "a".into(),
                task: "denoise".into(),
                psnr_db: f64::INFINITY,
                ssim: 1.0,
            },
            Record::Evaluation {
                id: "b".into(),
                task: "denoise".into(),
                psnr_db: 31.5,
                ssim: 0.9,
            },
        ];
        let text = to_lines(&r).unwrap();
        assert!(text.lines().next().unwrap().contains("\"psnr_db\":\"inf\""));
        assert_eq!(parse_records(&text).unwrap(), r);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_records("{\"record\":\"evaluation\"}").is_err());
        assert!(parse_records("not json").is_err());
        assert!(parse_records(r#"{"record":"evaluation","id":"a","task":"t","psnr_db":"nan","ssim":1}"#).is_err());
        assert!(parse_records("\n\n").unwrap().is_empty());
    }
}
