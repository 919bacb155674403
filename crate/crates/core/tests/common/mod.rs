//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rustfft::num_complex::Complex64;

/// `X(u,v) = Σ_p Σ_q w(p,q)·exp(−2πi(up + vq)/n)` evaluated term by term.
pub fn direct_dft(w: &Array2<f64>) -> Array2<Complex64> {
    let n = w.nrows();
    assert_eq!(w.ncols(), n);
    let twiddle: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
        .collect();
    Array2::from_shape_fn((n, n), |(u, v)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..n {
            let base = (u * p) % n;
            let mut idx = base;
            for q in 0..n {
                acc += twiddle[idx] * w[(p, q)];
                idx += v;
                if idx >= n {
                    idx -= n;
                }
            }
        }
        acc
    })
}

/// 3×3 Sobel magnitude as an explicit kernel correlation with replicate borders.
pub fn direct_sobel(px: &Array2<f64>) -> Array2<f64> {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for (i, (rx, ry)) in KX.iter().zip(&KY).enumerate() {
            for j in 0..3 {
                let yy = (y as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                gx += rx[j] * px[(yy, xx)];
                gy += ry[j] * px[(yy, xx)];
            }
        }
        (gx * gx + gy * gy).sqrt()
    })
}

/// `1 − 6Σd²/(N(N²−1))` for tie-free data.
pub fn spearman_shortcut(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = (k + 1) as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Number of window start positions `j·step` with `j·step + n ≤ len`.
pub fn count_positions(len: usize, n: usize, step: usize) -> usize {
    (0..).map(|j| j * step).take_while(|&s| s + n <= len).count()
}

/// Accuracy of the nearest class mean (Euclidean) classifier.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let classes = train.iter().map(|t| t.1).max().unwrap_or(0) + 1;
    let dim = train[0].0.len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, c) in train {
        counts[*c] += 1;
        for (a, b) in centroids[*c].iter_mut().zip(x) {
            *a += b;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|(x, c)| {
            let dist = |k: usize| centroids[k].iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..classes).filter(|&k| counts[k] > 0).min_by(|&a, &b| dist(a).total_cmp(&dist(b))) == Some(*c)
        })
        .count();
    correct as f64 / test.len() as f64
}
