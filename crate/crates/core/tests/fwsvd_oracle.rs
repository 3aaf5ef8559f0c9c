//! Weighted rank-1 fit of a 4×3 matrix against a brute-force search over
//! the unit sphere of right factors.

use basis_select::linalg::{matmul, Matrix};
use basis_select::pipeline::weighted_low_rank;

/// For a fixed unit right factor `b`, the best row coefficients are
/// `wᵢ·b` whatever the weights, so the weighted error is
/// `Σ Iᵢ (‖wᵢ‖² − (wᵢ·b)²)`.
fn objective_for_direction(w: &[[f64; 3]; 4], imp: &[f64; 4], b: [f64; 3]) -> f64 {
    w.iter()
        .zip(imp)
        .map(|(row, i)| {
            let dot: f64 = row.iter().zip(&b).map(|(x, y)| x * y).sum();
            let norm2: f64 = row.iter().map(|x| x * x).sum();
            i * (norm2 - dot * dot)
        })
        .sum()
}

fn sphere(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

fn brute_force(w: &[[f64; 3]; 4], imp: &[f64; 4]) -> f64 {
    let steps = 400;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..=steps {
        for c in 0..(2 * steps) {
            let (t, p) = (std::f64::consts::PI * a as f64 / steps as f64, std::f64::consts::PI * c as f64 / steps as f64);
            let v = objective_for_direction(w, imp, sphere(t, p));
            if v < best.0 {
                best = (v, t, p);
            }
        }
    }
    // Local refinement around the best grid point.
    let (mut v, mut t, mut p) = best;
    let mut h = std::f64::consts::PI / steps as f64;
    while h > 1e-12 {
        let mut improved = false;
        for (dt, dp) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
            let cand = objective_for_direction(w, imp, sphere(t + dt, p + dp));
            if cand < v {
                (v, t, p) = (cand, t + dt, p + dp);
                improved = true;
            }
        }
        if !improved {
            h /= 2.0;
        }
    }
    v
}

fn weighted_error(w: &Matrix, approx: &Matrix, imp: &[f64]) -> f64 {
    (0..w.rows())
        .map(|i| imp[i] * w.row(i).iter().zip(approx.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

#[test]
fn rank_one_weighted_fit_matches_sphere_search() {
    let rows = [[1.0, 2.0, 0.5], [-0.3, 0.8, 1.9], [2.2, -1.0, 0.4], [0.0, 0.7, -1.3]];
    for imp in [[1.0, 1.0, 1.0, 1.0], [10.0, 0.1, 1.0, 3.0], [0.01, 5.0, 0.5, 0.0]] {
        let w = Matrix::from_rows(&rows.iter().map(|r| &r[..]).collect::<Vec<_>>()).unwrap();
        let pair = weighted_low_rank(&w, &imp, 1, vec![0.0; 4]).unwrap();
        let approx = matmul(&pair.second.weight, &pair.first.weight).unwrap();
        // A zero importance is floored to the smallest positive one.
        let floored: Vec<f64> = imp.iter().map(|&x| if x > 0.0 { x } else { 0.01 }).collect();
        let got = weighted_error(&w, &approx, &floored);
        let fl: [f64; 4] = floored.clone().try_into().unwrap();
        let want = brute_force(&rows, &fl);
        assert!((got - want).abs() <= 1e-9 * (1.0 + want), "importance {imp:?}: {got} vs {want}");
    }
}

#[test]
fn full_rank_fit_is_exact() {
    let rows: [&[f64]; 4] = [&[1.0, 2.0, 0.5], &[-0.3, 0.8, 1.9], &[2.2, -1.0, 0.4], &[0.0, 0.7, -1.3]];
    let w = Matrix::from_rows(&rows).unwrap();
    let pair = weighted_low_rank(&w, &[3.0, 1.0, 0.5, 2.0], 3, vec![0.0; 4]).unwrap();
    let approx = matmul(&pair.second.weight, &pair.first.weight).unwrap();
    assert!(w.sub(&approx).unwrap().max_abs() < 1e-12);
}
