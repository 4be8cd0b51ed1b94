use std::collections::HashMap;

use super::{DetectorParams, Keypoint};

/// Greedy spatial spread: walk `candidates` (already sorted by descending
/// score) and keep each one at least `radius` pixels from every keypoint
/// kept so far.
pub fn select_with_radius(candidates: &[Keypoint], radius: f64) -> Vec<Keypoint> {
    let cell = radius.max(1.0);
    let r2 = radius * radius;
    let key = |k: &Keypoint| ((k.pixel.x / cell).floor() as i64, (k.pixel.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<Keypoint> = Vec::new();
    for cand in candidates {
        let (cx, cy) = key(cand);
        let blocked = (cx - 1..=cx + 1).any(|gx| {
            (cy - 1..=cy + 1).any(|gy| {
                grid.get(&(gx, gy))
                    .is_some_and(|ids| ids.iter().any(|&i| (kept[i].pixel - cand.pixel).norm_squared() < r2))
            })
        });
        if !blocked {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(*cand);
        }
    }
    kept
}

/// Picks keypoints with the suppression radius starting at `max_radius`
/// and halving (down to `min_radius`) until at least `target_count` are
/// kept. The last attempt is returned even when it falls short.
pub fn select_keypoints(candidates: &[Keypoint], params: &DetectorParams) -> Vec<Keypoint> {
    let mut radius = params.max_radius;
    loop {
        let kept = select_with_radius(candidates, radius);
        if kept.len() >= params.target_count || radius <= params.min_radius {
            return kept;
        }
        radius = (radius / 2.0).max(params.min_radius);
    }
}
