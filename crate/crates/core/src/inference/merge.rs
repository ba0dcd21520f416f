//! Merging of 4-connected patch detections.

use crate::data::{BoundingBox, PatchGrid};
use crate::error::Result;

/// A merged group of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    /// Bounding rectangle in grid pixel coordinates.
    pub bbox: BoundingBox,
    pub score: f64,
    pub patches: Vec<usize>,
}

/// Groups `(patch, score)` pairs into 4-connected components; each group
/// takes the bounding rectangle of its patches and their maximum score.
/// Groups are ordered by their smallest patch index.
pub fn merge_adjacent(patches: &[(usize, f64)], grid: &PatchGrid) -> Result<Vec<PatchGroup>> {
    let mut score = vec![None; grid.count()];
    for &(i, s) in patches {
        grid.patch_box(i)?;
        score[i] = Some(score[i].map_or(s, |o: f64| o.max(s)));
    }
    let mut seen = vec![false; grid.count()];
    let mut groups = Vec::new();
    for start in 0..grid.count() {
        if seen[start] || score[start].is_none() {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / grid.cols, i % grid.cols);
            let mut neighbours = Vec::with_capacity(4);
            if r > 0 {
                neighbours.push(i - grid.cols);
            }
            if r + 1 < grid.rows {
                neighbours.push(i + grid.cols);
            }
            if c > 0 {
                neighbours.push(i - 1);
            }
            if c + 1 < grid.cols {
                neighbours.push(i + 1);
            }
            for j in neighbours {
                if !seen[j] && score[j].is_some() {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        let mut bbox = grid.patch_box(members[0])?;
        let mut best = f64::NEG_INFINITY;
        for &m in &members {
            bbox = bbox.union(&grid.patch_box(m)?);
            best = best.max(score[m].expect("member has score"));
        }
        groups.push(PatchGroup {
            bbox,
            score: best,
            patches: members,
        });
    }
    Ok(groups)
}
