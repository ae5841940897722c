//! Pixel-level segmentation metrics.

/// Mean absolute error between probabilities and binary targets.
pub fn mae(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    let total: f64 = probs.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    total / probs.len() as f64
}

/// Average precision: area under the precision–recall curve over pixel
/// scores. Pixels are sorted by score descending; equal scores form one
/// group and precision/recall are evaluated on group boundaries (step
/// interpolation, no trapezoids), which makes the result independent of the
/// input order. Returns `None` when there are no positive pixels.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let total_pos = labels.iter().filter(|l| **l > 0.5).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        // group of equal scores
        let mut j = i;
        let mut group_pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0.5 {
                group_pos += 1;
            }
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        if group_pos > 0 {
            let precision = tp as f64 / seen as f64;
            ap += group_pos as f64 * precision;
        }
        i = j;
    }
    Some(ap / total_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(mae(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]), 0.5);
        let got = mae(&[0.8, 0.2, 0.6, 0.4], &[1.0, 0.0, 1.0, 0.0]);
        assert!((got - 0.3).abs() < 1e-15); // (0.2+0.2+0.4+0.4)/4
    }

    #[test]
    fn ap_perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(average_precision(&scores, &labels), Some(1.0));
    }

    #[test]
    fn ap_all_equal_scores_is_positive_fraction() {
        let scores = [0.4; 8];
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ap_four_pixel_case() {
        // ranked: (0.9, +), (0.8, −), (0.4, +), (0.3, −) → (1/1 + 2/3)/2
        let scores = [0.9, 0.8, 0.4, 0.3];
        let labels = [1.0, 0.0, 1.0, 0.0];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 5e-5);
    }

    #[test]
    fn ap_without_positives_is_missing() {
        assert_eq!(average_precision(&[0.5, 0.2], &[0.0, 0.0]), None);
    }

    #[test]
    fn ap_is_order_independent() {
        let scores = [0.9, 0.8, 0.4, 0.3, 0.4, 0.4];
        let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let base = average_precision(&scores, &labels).unwrap();
        let perm = [3usize, 1, 5, 0, 4, 2];
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let l2: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(base, average_precision(&s2, &l2).unwrap());
    }
}
