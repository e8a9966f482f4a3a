//! Independent reference computations shared by the integration and
//! acceptance suites. Nothing here calls into the code path it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type V3 = [f64; 3];

pub fn to_xyz(lat: f64, lon: f64) -> V3 {
    let (p, l) = (lat.to_radians(), lon.to_radians());
    [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
}

pub fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Monte-Carlo area (steradians) of the nearest-vertex cell of `points[target]`.
///
/// Draws `samples` uniform points in a spherical cap of angular radius
/// `cap_radius` around the target and counts those whose nearest vertex is the
/// target; the cell must lie inside the cap.
pub fn mc_cell_area(points: &[V3], target: usize, cap_radius: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = points[target];
    let candidates: Vec<usize> = (0..points.len())
        .filter(|&i| dot3(points[i], c) > (3.0 * cap_radius).min(std::f64::consts::PI).cos())
        .collect();
    // Orthonormal frame around the cap center.
    let helper = if c[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let mut e1 = [
        helper[1] * c[2] - helper[2] * c[1],
        helper[2] * c[0] - helper[0] * c[2],
        helper[0] * c[1] - helper[1] * c[0],
    ];
    let n = dot3(e1, e1).sqrt();
    e1 = [e1[0] / n, e1[1] / n, e1[2] / n];
    let e2 = [
        c[1] * e1[2] - c[2] * e1[1],
        c[2] * e1[0] - c[0] * e1[2],
        c[0] * e1[1] - c[1] * e1[0],
    ];
    let zmin = cap_radius.cos();
    let mut hits = 0usize;
    for _ in 0..samples {
        let z: f64 = rng.random_range(zmin..1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let (a, b) = (r * phi.cos(), r * phi.sin());
        let p = [
            z * c[0] + a * e1[0] + b * e2[0],
            z * c[1] + a * e1[1] + b * e2[1],
            z * c[2] + a * e1[2] + b * e2[2],
        ];
        let nearest = candidates
            .iter()
            .copied()
            .max_by(|&i, &j| dot3(points[i], p).total_cmp(&dot3(points[j], p)))
            .unwrap();
        if nearest == target {
            hits += 1;
        }
    }
    std::f64::consts::TAU * (1.0 - zmin) * hits as f64 / samples as f64
}

/// Index of the great-circle-nearest cell center by exhaustive search; ties go
/// to the lower row-major index.
pub fn brute_nearest_cell(p: V3, lat: &[f64], lon: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (i, &la) in lat.iter().enumerate() {
        for (j, &lo) in lon.iter().enumerate() {
            let lo = if lo >= 180.0 { lo - 360.0 } else { lo };
            let d = dot3(p, to_xyz(la, lo));
            let idx = i * lon.len() + j;
            if d > best.0 {
                best = (d, idx);
            }
        }
    }
    best.1
}

/// Direct box predicate on one vertex, with longitudes wrapped eastward.
pub fn in_box(lat: f64, lon: f64, b: (f64, f64, f64, f64)) -> bool {
    let (lat_min, lat_max, lon_min, lon_max) = b;
    if lat < lat_min || lat > lat_max {
        return false;
    }
    let east = |x: f64| (x - lon_min).rem_euclid(360.0);
    let width = if lon_max - lon_min >= 360.0 { 360.0 } else { east(lon_max) };
    east(lon) < width
}

/// Explicit per-calendar-month climatology removal, two passes.
pub fn climatology_removed(series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = series.len();
    let nv = series[0].len();
    let mut means = vec![vec![0.0; nv]; 12];
    let mut counts = [0usize; 12];
    for (t, row) in series.iter().enumerate() {
        counts[t % 12] += 1;
        for v in 0..nv {
            means[t % 12][v] += row[v];
        }
    }
    for m in 0..12 {
        for v in 0..nv {
            means[m][v] /= counts[m] as f64;
        }
    }
    (0..n)
        .map(|t| (0..nv).map(|v| series[t][v] - means[t % 12][v]).collect())
        .collect()
}

/// Centered same-calendar-month window mean removal by explicit enumeration.
/// The window spans `w / 2` years before and `(w - 1) / 2` after, truncated.
pub fn rolling_removed(series: &[f64], window_years: usize) -> Vec<f64> {
    let n = series.len();
    (0..n)
        .map(|t| {
            let (m, y) = (t % 12, t / 12);
            let years = (n - m).div_ceil(12);
            let lo = y.saturating_sub(window_years / 2);
            let hi = (y + (window_years - 1) / 2).min(years - 1);
            let vals: Vec<f64> = (lo..=hi).map(|yy| series[yy * 12 + m]).collect();
            series[t] - vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ordinary least-squares slope of `y` on `x` with intercept.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Haversine distance in km on a 6371 km sphere.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * a.sqrt().min(1.0).asin()
}

/// Minimal RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF records.
pub fn parse_csv(text: &str) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut row = Vec::new();
    let mut field = String::new();
    let mut chars = text.chars().peekable();
    let mut quoted = false;
    let mut any = false;
    while let Some(c) = chars.next() {
        any = true;
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    quoted = false;
                }
            } else {
                field.push(c);
            }
            continue;
        }
        match c {
            '"' => quoted = true,
            ',' => row.push(std::mem::take(&mut field)),
            '\r' if chars.peek() == Some(&'\n') => {}
            '\n' => {
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
                any = false;
            }
            _ => field.push(c),
        }
    }
    if any {
        row.push(field);
        rows.push(row);
    }
    rows
}

/// Correlation between the pipeline output and its input for white noise that
/// is independent across years, from the explicit `years × years` operator of
/// one calendar month: mean removal, degree-`degree` least-squares fit
/// removal (classical Gram-Schmidt on monomials), then centered window mean
/// removal. `r = tr(M) / sqrt(N · ‖M‖_F²)`.
pub fn white_noise_pipeline_correlation(years: usize, degree: usize, window: Option<usize>) -> f64 {
    let n = years;
    let id = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    // orthonormal basis of the polynomial space
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for d in 0..=degree {
        let mut v: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64).powi(d as i32)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.iter().map(|x| x / norm).collect());
    }
    let hat = |i: usize, j: usize| basis.iter().map(|b| b[i] * b[j]).sum::<f64>();
    // mean removal is inside the polynomial space, so (I - H)(I - J) = I - H
    let p: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| id(i, j) - hat(i, j)).collect()).collect();
    let m: Vec<Vec<f64>> = match window {
        None => p,
        Some(w) => {
            let (before, after) = (w / 2, (w - 1) / 2);
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(before);
                    let hi = (i + after).min(n - 1);
                    let k = (hi - lo + 1) as f64;
                    (0..n)
                        .map(|j| p[i][j] - (lo..=hi).map(|l| p[l][j]).sum::<f64>() / k)
                        .collect()
                })
                .collect()
        }
    };
    let trace: f64 = (0..n).map(|i| m[i][i]).sum();
    let fro: f64 = m.iter().flatten().map(|x| x * x).sum();
    trace / (n as f64 * fro).sqrt()
}
