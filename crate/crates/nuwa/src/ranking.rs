//! Minimal-prefix retention selection shared by head, neuron, and
//! embedding pruning.

/// Indices (ascending) of the minimal set of highest-scoring items whose
/// cumulative score fraction reaches `rho`. Ranking is score-descending
/// with ties broken toward the earlier index, matching the canonical
/// (layer, index) order of the score vectors fed in. A non-positive score
/// total keeps everything (there is no basis for ranking).
pub fn minimal_cumulative_keep(scores: &[f64], rho: f64) -> Vec<usize> {
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return (0..scores.len()).collect();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let target = rho * total;
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        if cum >= target {
            break;
        }
        kept.push(i);
        cum += scores[i];
    }
    kept.sort_unstable();
    kept
}
