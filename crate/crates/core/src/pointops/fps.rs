use crate::error::{Error, Result};

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest point sampling starting from the point nearest the centroid.
///
/// Ties go to the lowest index, so the result is a pure function of the
/// input.
pub fn fps(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::InsufficientPoints { requested: k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    let mut start = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d < best {
            best = d;
            start = i;
        }
    }
    fps_from(points, k, start)
}

/// Farthest point sampling from an explicit first index.
pub fn fps_from(points: &[[f64; 3]], k: usize, start: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::InsufficientPoints { requested: k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut chosen = Vec::with_capacity(k);
    let mut cur = start;
    for _ in 0..k {
        chosen.push(cur);
        min_d[cur] = -1.0;
        let mut next = usize::MAX;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(p, &points[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > far {
                far = min_d[i];
                next = i;
            }
        }
        if next == usize::MAX {
            break;
        }
        cur = next;
    }
    Ok(chosen)
}

/// Counts selections that break the greedy max-min rule, by exhaustive scan:
/// pick `j` must attain the largest distance-to-prefix among all points not
/// yet chosen.
pub fn max_min_violations(points: &[[f64; 3]], picks: &[usize]) -> usize {
    let mut bad = 0;
    for j in 1..picks.len() {
        let prefix = &picks[..j];
        let d_to = |i: usize| prefix.iter().map(|&s| dist2(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
        let got = d_to(picks[j]);
        let best = (0..points.len()).filter(|i| !prefix.contains(i)).map(d_to).fold(f64::NEG_INFINITY, f64::max);
        if got < best {
            bad += 1;
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Vec<[f64; 3]> {
        (0..=10).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn collinear_from_zero() {
        let idx = fps_from(&line(), 3, 0).unwrap();
        assert_eq!(idx, vec![0, 10, 5]);
    }

    #[test]
    fn centroid_start() {
        assert_eq!(fps(&line(), 3).unwrap(), vec![5, 0, 10]);
    }

    #[test]
    fn full_permutation() {
        let mut idx = fps(&line(), 11).unwrap();
        idx.sort();
        assert_eq!(idx, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(fps(&line(), 12), Err(Error::InsufficientPoints { requested: 12, available: 11 })));
    }

    #[test]
    fn checker_catches_bad_order() {
        assert_eq!(max_min_violations(&line(), &[0, 10, 5]), 0);
        assert_eq!(max_min_violations(&line(), &[0, 5, 10]), 1);
    }
}
