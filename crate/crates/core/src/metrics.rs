//! Reconstruction and ranking metrics.

use crate::error::{Error, Result};
use crate::tensor::BehaviorTensor;

/// RMSE and MAE over every channel at the grid coordinates flagged in
/// `region`.
pub fn rmse_mae(pred: &BehaviorTensor, truth: &BehaviorTensor, region: &[bool]) -> Result<(f64, f64)> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
    }
    let n = truth.dims().grid().coords();
    if region.len() != n {
        return Err(Error::Shape(format!("region of {} coordinates for {n}", region.len())));
    }
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for (i, (&p, &t)) in pred.values().iter().zip(truth.values()).enumerate() {
        if region[i % n] {
            let d = p as f64 - t as f64;
            sq += d * d;
            abs += d.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Evaluation("empty evaluation region".into()));
    }
    Ok(((sq / count as f64).sqrt(), abs / count as f64))
}

/// Recall, NDCG and MRR at each cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct RankRecord {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mrr: Vec<f64>,
}

/// Items ordered by descending score, ties to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Binary-gain ranking metrics of `scores` against the `relevant` items.
pub fn rank_metrics(scores: &[f64], relevant: &[usize], cutoffs: &[usize]) -> Result<RankRecord> {
    if relevant.is_empty() {
        return Err(Error::Evaluation("empty relevant set".into()));
    }
    if let Some(&bad) = relevant.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Evaluation(format!("relevant item {bad} outside {} items", scores.len())));
    }
    let order = ranking(scores);
    let hit: Vec<bool> = order.iter().map(|i| relevant.contains(i)).collect();
    let mut rec = RankRecord {
        cutoffs: cutoffs.to_vec(),
        recall: Vec::new(),
        ndcg: Vec::new(),
        mrr: Vec::new(),
    };
    for &k in cutoffs {
        let top = &hit[..k.min(hit.len())];
        let hits = top.iter().filter(|&&h| h).count();
        rec.recall.push(hits as f64 / relevant.len() as f64);
        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
            .fold(0.0, |a, b| a + b);
        let ideal: f64 = (0..relevant.len().min(k)).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
        rec.ndcg.push(if ideal > 0.0 { dcg / ideal } else { 0.0 });
        rec.mrr.push(top.iter().position(|&h| h).map_or(0.0, |r| 1.0 / (r as f64 + 1.0)));
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn offset_and_hand_examples() {
        let d = Dims::new(1, 2, 1, 1).unwrap();
        let truth = BehaviorTensor::from_values(d, vec![0.5, 0.2]).unwrap();
        assert_eq!(rmse_mae(&truth, &truth, &[true, true]).unwrap(), (0.0, 0.0));
        let pred = BehaviorTensor::from_f64(d, &[0.8, 0.1]).unwrap();
        let (r, a) = rmse_mae(&pred, &truth, &[true, true]).unwrap();
        assert!((r - 0.05f64.sqrt()).abs() < 1e-6 && (a - 0.2).abs() < 1e-6);
        assert!(rmse_mae(&pred, &truth, &[false, false]).is_err());
    }

    #[test]
    fn third_place_hit() {
        let r = rank_metrics(&[0.9, 0.8, 0.7, 0.1], &[2], &[1, 3]).unwrap();
        assert_eq!(r.recall, vec![0.0, 1.0]);
        assert!((r.mrr[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.ndcg[1] - 0.5).abs() < 1e-12);
        assert!(rank_metrics(&[0.1], &[], &[1]).is_err());
    }
}
