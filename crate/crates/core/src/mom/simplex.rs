/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn simplex_project(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = y.iter().map(|v| (v - tau).max(0.0)).collect();
    // absorb rounding so the output sums to one
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}
