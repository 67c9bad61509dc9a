use nalgebra::{DMatrix, DVector};

/// The `k` token ids with embeddings closest (Euclidean) to `v`, nearest
/// first, ties to the lowest id. Ids below `min_id` are never returned.
pub fn nearest_tokens(embed: &DMatrix<f64>, v: &DVector<f64>, k: usize, min_id: u32) -> Vec<u32> {
    let mut dist: Vec<(f64, u32)> = (min_id as usize..embed.nrows())
        .map(|t| {
            let d: f64 = embed.row(t).iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, t as u32)
        })
        .collect();
    let k = k.min(dist.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_by(cmp);
    dist.into_iter().map(|(_, t)| t).collect()
}

/// Nearest-token projection of each row of `dummy`.
pub fn project_to_tokens(embed: &DMatrix<f64>, dummy: &DMatrix<f64>, min_id: u32) -> Vec<u32> {
    (0..dummy.nrows()).map(|l| nearest_tokens(embed, &dummy.row(l).transpose(), 1, min_id)[0]).collect()
}
