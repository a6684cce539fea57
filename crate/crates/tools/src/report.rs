//! JSON CER reports.

use asr_core::cer::{cer, CerReport, EditCounts};
use asr_core::corpus::Vocabulary;
use asr_core::model::Model;
use asr_core::train::{decode, Utterance};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub cer: f64,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_len: usize,
    pub per_utt: Vec<UttScore>,
}

impl ReportJson {
    pub fn to_report(&self) -> CerReport {
        CerReport::from_counts(
            self.per_utt
                .iter()
                .map(|u| EditCounts {
                    insertions: u.insertions,
                    deletions: u.deletions,
                    substitutions: u.substitutions,
                    ref_len: u.ref_len,
                })
                .collect(),
        )
    }
}

/// Greedy-decodes every utterance and scores it against its label.
pub fn score(model: &Model, vocab: &Vocabulary, data: &[Utterance]) -> Result<ReportJson> {
    if data.is_empty() {
        return Err(asr_core::Error::EmptyDataset("test set").into());
    }
    let mut per_utt = Vec::with_capacity(data.len());
    for u in data {
        let label = u
            .label
            .as_ref()
            .ok_or_else(|| ToolError::Usage(format!("{} has no transcript", u.id)))?;
        let hyp = decode(model, &u.features)?;
        let c = cer(label, &hyp)?;
        per_utt.push(UttScore {
            id: u.id.clone(),
            reference: vocab.decode(label),
            hypothesis: vocab.decode(&hyp),
            cer: c.cer(),
            insertions: c.insertions,
            deletions: c.deletions,
            substitutions: c.substitutions,
            ref_len: c.ref_len,
        });
    }
    let mut out = ReportJson {
        cer: 0.0,
        insertions: 0,
        deletions: 0,
        substitutions: 0,
        ref_len: 0,
        per_utt,
    };
    let total = out.to_report().total;
    out.cer = total.cer();
    out.insertions = total.insertions;
    out.deletions = total.deletions;
    out.substitutions = total.substitutions;
    out.ref_len = total.ref_len;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use asr_core::features::{FeatureMatrix, FEATURE_DIM};
    use asr_core::model::ModelConfig;
    use asr_core::corpus::build_vocab;

    #[test]
    fn keys_and_totals() {
        let vocab = build_vocab(["AB"]).unwrap();
        let model = Model::new(ModelConfig::tiny(vocab.len()), 2).unwrap();
        let utt = |id: &str, label: Vec<usize>| Utterance {
            id: id.into(),
            features: FeatureMatrix::from_frames(vec![0.1; 6 * FEATURE_DIM]).unwrap(),
            duration_s: 0.1,
            label: Some(label),
        };
        let r = score(&model, &vocab, &[utt("a", vec![1, 2]), utt("b", vec![2])]).unwrap();
        assert_eq!(r.ref_len, 3);
        assert_eq!(r.insertions + r.deletions + r.substitutions, r.per_utt.iter().map(|u| u.insertions + u.deletions + u.substitutions).sum::<usize>());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["cer", "insertions", "deletions", "substitutions", "ref_len", "per_utt"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(score(&model, &vocab, &[]).is_err());
    }
}
