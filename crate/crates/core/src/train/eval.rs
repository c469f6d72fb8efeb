use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{stack, DiceCounts, MASK_THRESHOLD};
use crate::data::{RegionMask, SlicePair};
use crate::error::{Error, Result};
use crate::model::{predict_masks, Model};

/// Dice fractions in `[0,1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RegionScores {
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
    pub mean: f64,
}

impl RegionScores {
    pub fn new(wt: f64, tc: f64, et: f64) -> Self {
        RegionScores { wt, tc, et, mean: (wt + tc + et) / 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseScores {
    pub case_id: String,
    pub slices: usize,
    pub scores: RegionScores,
}

/// Per-case scores and their unweighted mean over cases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseScores>,
    pub mean: RegionScores,
    pub slices: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Scores ×100, one row per case then the aggregate.
    pub fn to_table(&self) -> String {
        let width = self.cases.iter().map(|c| c.case_id.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}", "case", "slices", "WT", "TC", "ET", "mean");
        let row = |s: &mut String, name: &str, n: usize, r: &RegionScores| {
            let _ = writeln!(s, "{name:<width$}  {n:>6}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}", 100.0 * r.wt, 100.0 * r.tc, 100.0 * r.et, 100.0 * r.mean);
        };
        for c in &self.cases {
            row(&mut s, &c.case_id, c.slices, &c.scores);
        }
        row(&mut s, "overall", self.slices, &self.mean);
        s
    }
}

/// Scores predicted masks against the ground truth of the same slices.
pub fn evaluate_masks(preds: &[RegionMask], truth: &[SlicePair]) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Data(format!("{} predictions for {} slices", preds.len(), truth.len())));
    }
    let mut per_case: BTreeMap<&str, (usize, [DiceCounts; 3])> = BTreeMap::new();
    for (p, t) in preds.iter().zip(truth) {
        let entry = per_case.entry(&t.case_id).or_default();
        entry.0 += 1;
        for (k, (pp, tp)) in p.planes().iter().zip(t.mask.planes()).enumerate() {
            entry.1[k] = entry.1[k].merge(DiceCounts::from_masks(pp, tp)?);
        }
    }
    let cases: Vec<CaseScores> = per_case
        .into_iter()
        .map(|(id, (slices, c))| CaseScores { case_id: id.to_string(), slices, scores: RegionScores::new(c[0].score(), c[1].score(), c[2].score()) })
        .collect();
    let n = cases.len() as f64;
    let avg = |f: fn(&RegionScores) -> f64| cases.iter().map(|c| f(&c.scores)).sum::<f64>() / n;
    let mean = RegionScores::new(avg(|r| r.wt), avg(|r| r.tc), avg(|r| r.et));
    Ok(EvalReport { cases, mean, slices: truth.len() })
}

pub fn predict_slices(model: &Model<f32>, set: &[SlicePair], batch_size: usize) -> Result<Vec<RegionMask>> {
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.chunks(batch_size.max(1)) {
        let refs: Vec<&SlicePair> = chunk.iter().collect();
        let (x, _) = stack(&refs)?;
        preds.extend(predict_masks(&model.logits(&x)?, MASK_THRESHOLD)?);
    }
    Ok(preds)
}

/// Thresholds the model at 0.5 and scores by case.
pub fn evaluate(model: &Model<f32>, set: &[SlicePair], batch_size: usize) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    evaluate_masks(&predict_slices(model, set, batch_size)?, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair(case: &str, wt: Vec<u8>) -> SlicePair {
        let n = wt.len();
        SlicePair {
            case_id: case.into(),
            slice: 0,
            image: Tensor::zeros(vec![3, 1, n]),
            mask: RegionMask { height: 1, width: n, wt, tc: vec![0; n], et: vec![0; n] },
        }
    }

    #[test]
    fn ground_truth_scores_one() {
        let set = vec![pair("a", vec![1, 0, 1]), pair("b", vec![0, 0, 1])];
        let preds: Vec<RegionMask> = set.iter().map(|p| p.mask.clone()).collect();
        let r = evaluate_masks(&preds, &set).unwrap();
        assert_eq!(r.mean, RegionScores::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn cases_weigh_equally() {
        // case a: two slices, pooled counts give 2·1/(1+3); case b perfect
        let set = vec![pair("a", vec![1, 1, 0]), pair("a", vec![0, 1, 0]), pair("b", vec![1, 0, 0])];
        let preds = vec![
            RegionMask { height: 1, width: 3, wt: vec![1, 0, 0], tc: vec![0; 3], et: vec![0; 3] },
            RegionMask::empty(1, 3),
            set[2].mask.clone(),
        ];
        let r = evaluate_masks(&preds, &set).unwrap();
        assert_eq!(r.cases[0].scores.wt, 0.5);
        assert_eq!(r.mean.wt, 0.75);
        assert_eq!(r.mean.mean, (0.75 + 1.0 + 1.0) / 3.0);
        assert!(r.to_table().contains("overall"));
    }

    #[test]
    fn empty_predictions_on_tumor_score_zero() {
        let set = vec![SlicePair {
            case_id: "a".into(),
            slice: 0,
            image: Tensor::zeros(vec![3, 1, 2]),
            mask: RegionMask { height: 1, width: 2, wt: vec![1, 1], tc: vec![1, 0], et: vec![1, 0] },
        }];
        let r = evaluate_masks(&[RegionMask::empty(1, 2)], &set).unwrap();
        assert_eq!(r.mean, RegionScores::new(0.0, 0.0, 0.0));
        assert!(evaluate_masks(&[], &[]).is_err());
    }
}
