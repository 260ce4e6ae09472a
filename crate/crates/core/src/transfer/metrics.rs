use super::{Result, TransferError};

/// Rank-based ROC AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TransferError::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TransferError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean AUC over classes of an (n × classes) score matrix. Classes whose
/// labels are all equal are skipped and returned in the second slot.
pub fn mean_auc(scores: &[f64], labels: &[bool], classes: usize) -> Result<(f64, Vec<usize>)> {
    if classes == 0 || scores.len() != labels.len() || scores.len() % classes != 0 {
        return Err(TransferError::Shape(format!(
            "{} scores, {} labels, {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() / classes;
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for c in 0..classes {
        let s: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let l: Vec<bool> = (0..n).map(|i| labels[i * classes + c]).collect();
        match auc(&s, &l) {
            Ok(a) => {
                sum += a;
                used += 1;
            }
            Err(TransferError::SingleClass) => skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(TransferError::SingleClass);
    }
    Ok((sum / used as f64, skipped))
}

/// Smoothing term of [`dice`]; makes empty-vs-empty score 1.
pub const DICE_SMOOTH: f64 = 1e-6;

/// `(2|A∩B| + s) / (|A| + |B| + s)`.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(TransferError::Shape(format!("mask sizes {} vs {}", pred.len(), truth.len())));
    }
    let a = pred.iter().filter(|&&p| p).count() as f64;
    let b = truth.iter().filter(|&&t| t).count() as f64;
    let both = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
    Ok((2.0 * both + DICE_SMOOTH) / (a + b + DICE_SMOOTH))
}
