//! Marching-squares isocontours of 2D fields.

use std::collections::HashMap;

use deformnet_core::{Error, Result, ScalarField};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polyline {
    /// World-space vertices. Closed loops repeat the first vertex at the end.
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

/// Grid edge identifier: lower cell index plus the axis it runs along.
type EdgeKey = (usize, usize, u8);

/// Extracts the `iso` level set. Samples live at cell centres; corners at
/// or above `iso` count as outside. Saddle cells are split according to the
/// sign of the cell average.
pub fn contour2d(psi: &ScalarField, iso: f64) -> Result<Vec<Polyline>> {
    if psi.dims() != 2 {
        return Err(Error::DimsMismatch {
            expected: 2,
            got: psi.dims(),
        });
    }
    let (nx, ny) = (psi.res()[0], psi.res()[1]);
    let v = |i: usize, j: usize| psi.get(&[i, j]) - iso;
    let mut points: HashMap<EdgeKey, [f64; 2]> = HashMap::new();
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();

    let mut crossing = |key: EdgeKey| -> EdgeKey {
        points.entry(key).or_insert_with(|| {
            let (i, j, axis) = key;
            let (a, b) = if axis == 0 { (v(i, j), v(i + 1, j)) } else { (v(i, j), v(i, j + 1)) };
            let t = if a == b { 0.5 } else { a / (a - b) };
            let p0 = psi.cell_center(&[i, j]);
            let h = psi.spacing();
            if axis == 0 {
                [p0[0] + t * h, p0[1]]
            } else {
                [p0[0], p0[1] + t * h]
            }
        });
        key
    };

    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            // Corners counter-clockwise from (i, j).
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let mut case = 0u8;
            for (k, x) in c.iter().enumerate() {
                if *x < 0.0 {
                    case |= 1 << k;
                }
            }
            if case == 0 || case == 15 {
                continue;
            }
            // Edges: 0 bottom, 1 right, 2 top, 3 left.
            let edge = [(i, j, 0u8), (i + 1, j, 1u8), (i, j + 1, 0u8), (i, j, 1u8)];
            let pairs: &[(usize, usize)] = match case {
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                5 | 10 => {
                    let inside_centre = (c.iter().sum::<f64>() / 4.0) < 0.0;
                    // Case 5: corners 0 and 2 inside. A negative centre joins them.
                    if (case == 5) == inside_centre {
                        &[(3, 2), (0, 1)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                _ => unreachable!(),
            };
            for &(a, b) in pairs {
                let ka = crossing(edge[a]);
                let kb = crossing(edge[b]);
                segments.push((ka, kb));
            }
        }
    }
    Ok(link(&segments, &points))
}

fn link(segments: &[(EdgeKey, EdgeKey)], points: &HashMap<EdgeKey, [f64; 2]>) -> Vec<Polyline> {
    let mut adj: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        adj.entry(*a).or_default().push(s);
        adj.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let other = |s: usize, k: EdgeKey| if segments[s].0 == k { segments[s].1 } else { segments[s].0 };
    let next_unused = |k: EdgeKey, used: &[bool]| adj[&k].iter().copied().find(|&s| !used[s]);
    let mut out = Vec::new();
    // Open chains first, starting from endpoints of degree one, then loops.
    // Keys are visited in segment order so the output is deterministic.
    let mut starts: Vec<EdgeKey> = Vec::new();
    for (a, b) in segments {
        for k in [a, b] {
            if adj[k].len() == 1 && !starts.contains(k) {
                starts.push(*k);
            }
        }
    }
    let candidates = starts.into_iter().chain(segments.iter().map(|s| s.0));
    for start in candidates {
        let Some(first) = next_unused(start, &used) else { continue };
        let mut keys = vec![start];
        let mut seg = first;
        let mut cur = start;
        loop {
            used[seg] = true;
            cur = other(seg, cur);
            keys.push(cur);
            if cur == start {
                break;
            }
            match next_unused(cur, &used) {
                Some(s) => seg = s,
                None => break,
            }
        }
        let closed = keys.len() > 2 && keys.first() == keys.last();
        out.push(Polyline {
            points: keys.iter().map(|k| points[k]).collect(),
            closed,
        });
    }
    out
}
