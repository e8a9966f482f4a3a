mod oracles;

use mcbw_core::grid::{
    build_grid, coarsen, region_mask, resample_latlon, GridHierarchy, LatLon, LatLonBox, LatLonField,
    RegionCatalog, RegionSpec, ResampleMethod,
};
use proptest::prelude::*;

fn axis(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

#[test]
fn level4_weight_extremes_match_monte_carlo_cells() {
    let g = build_grid(4).unwrap();
    let w = g.area_weights();
    let (imin, imax) = (0..w.len()).fold((0, 0), |(lo, hi), i| {
        (if w[i] < w[lo] { i } else { lo }, if w[i] > w[hi] { i } else { hi })
    });
    let pts = g.unit_xyz();
    let cap = |v: usize| {
        g.neighbors(v)
            .iter()
            .map(|&u| oracles::dot3(pts[u], pts[v]).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max)
    };
    let a_min = oracles::mc_cell_area(pts, imin, cap(imin), 500_000, 11);
    let a_max = oracles::mc_cell_area(pts, imax, cap(imax), 500_000, 12);
    let ratio_mc = a_max / a_min;
    let ratio = w[imax] / w[imin];
    assert!(((ratio - ratio_mc) / ratio_mc).abs() < 0.02, "exact {ratio} vs mc {ratio_mc}");
    let four_pi = 4.0 * std::f64::consts::PI;
    assert!(((w[imin] * four_pi - a_min) / a_min).abs() < 0.02);
    assert!(((w[imax] * four_pi - a_max) / a_max).abs() < 0.02);
}

#[test]
fn constant_field_is_preserved_by_both_methods() {
    let g = build_grid(3).unwrap();
    let (lat, lon) = (axis(-89.5, 1.0, 180), axis(0.5, 1.0, 360));
    let f = LatLonField { values: vec![5.0; lat.len() * lon.len()], lat, lon };
    for m in [ResampleMethod::Nearest, ResampleMethod::InverseDistance] {
        for v in resample_latlon(&f, &g, m).unwrap() {
            assert!((v - 5.0).abs() < 1e-12, "{m:?}: {v}");
        }
    }
}

#[test]
fn nearest_resample_of_latitude_tracks_vertex_latitude() {
    let g = build_grid(4).unwrap();
    let (lat, lon) = (axis(-89.5, 1.0, 180), axis(-179.5, 1.0, 360));
    let values = lat.iter().flat_map(|&la| lon.iter().map(move |_| la)).collect();
    let f = LatLonField { lat, lon, values };
    let out = resample_latlon(&f, &g, ResampleMethod::Nearest).unwrap();
    for (v, ll) in out.iter().zip(g.vertices()) {
        assert!((v - ll.lat).abs() <= 1.0, "vertex lat {} got {v}", ll.lat);
    }
}

#[test]
fn single_cell_spreads_to_exactly_its_voronoi_vertices() {
    let g = build_grid(3).unwrap();
    let (lat, lon) = (axis(-85.0, 10.0, 18), axis(5.0, 10.0, 36));
    let hot = 7 * lon.len() + 20;
    let mut values = vec![0.0; lat.len() * lon.len()];
    values[hot] = 1.0;
    let f = LatLonField { lat: lat.clone(), lon: lon.clone(), values };
    let out = resample_latlon(&f, &g, ResampleMethod::Nearest).unwrap();
    let mut hits = 0;
    for (v, p) in out.iter().zip(g.unit_xyz()) {
        let expect = oracles::brute_nearest_cell(*p, &lat, &lon) == hot;
        assert_eq!(*v != 0.0, expect);
        hits += expect as usize;
    }
    assert!(hits > 0);
}

#[test]
fn inverse_distance_hits_cell_centers_exactly() {
    // A grid vertex that coincides with a cell center takes that cell's value.
    let g = build_grid(2).unwrap();
    let lat = vec![-90.0, 0.0, 90.0];
    let lon = axis(-180.0, 90.0, 4);
    let values: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let f = LatLonField { lat, lon, values };
    let out = resample_latlon(&f, &g, ResampleMethod::InverseDistance).unwrap();
    // vertex 0 is the north pole; row 2 is lat 90 and its first lon is -180
    assert_eq!(out[0], 8.0);
}

#[test]
fn whole_globe_box_selects_everything() {
    let g = build_grid(3).unwrap();
    let whole = RegionSpec::LatlonBox { bounds: LatLonBox::new(-90.0, 90.0, -180.0, 180.0) };
    assert!(region_mask(&g, &whole).unwrap().iter().all(|&m| m));
}

#[test]
fn northern_hemisphere_polygon_covers_half_the_area() {
    let g = build_grid(5).unwrap();
    let ring = [-180.0, -90.0, 0.0, 90.0].iter().map(|&lon| LatLon { lat: 0.0, lon }).collect();
    let mask = region_mask(&g, &RegionSpec::Polygon { vertices: ring }).unwrap();
    let frac: f64 = mask.iter().zip(g.area_weights()).filter(|(m, _)| **m).map(|(_, w)| w).sum();
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    assert!(mask[0], "north pole inside");
    assert!(!mask[11], "south pole outside");
}

#[test]
fn small_polygon_matches_box_interior() {
    let g = build_grid(4).unwrap();
    let ring = vec![
        LatLon { lat: -20.0, lon: -100.0 },
        LatLon { lat: -20.0, lon: -80.0 },
        LatLon { lat: -5.0, lon: -80.0 },
        LatLon { lat: -5.0, lon: -100.0 },
    ];
    let mask = region_mask(&g, &RegionSpec::Polygon { vertices: ring }).unwrap();
    for (m, v) in mask.iter().zip(g.vertices()) {
        // well inside / well outside the quadrilateral
        if v.lat > -19.0 && v.lat < -6.0 && v.lon > -99.0 && v.lon < -81.0 {
            assert!(m);
        }
        if v.lat < -25.0 || v.lat > 0.0 || v.lon < -105.0 || v.lon > -75.0 {
            assert!(!m);
        }
    }
}

#[test]
fn named_regions_equal_brute_force_box_test() {
    let g = build_grid(5).unwrap();
    let cat = RegionCatalog::default();
    for name in ["NEP", "SEP", "SEA"] {
        let b = cat.get(name).unwrap();
        let mask = region_mask(&g, &RegionSpec::named(name)).unwrap();
        for (m, v) in mask.iter().zip(g.vertices()) {
            assert_eq!(*m, oracles::in_box(v.lat, v.lon, (b.lat_min, b.lat_max, b.lon_min, b.lon_max)));
        }
        assert!(mask.iter().any(|&m| m), "{name} empty at level 5");
    }
    let sep = cat.get("SEP").unwrap();
    assert_eq!((sep.lat_min, sep.lat_max, sep.lon_min, sep.lon_max), (-30.0, 0.0, -110.0, -70.0));
}

#[test]
fn coarsen_of_single_inherited_vertex_is_child_weighted_mean() {
    let (g0, g1) = (build_grid(0).unwrap(), build_grid(1).unwrap());
    let target = 3;
    let mut field = vec![0.0; g1.len()];
    field[target] = 2.5;
    let out = coarsen(&field, &g1, &g0).unwrap();
    let children: Vec<usize> = (0..g1.len()).filter(|&v| g1.parent_map()[v] == target).collect();
    let w = g1.area_weights();
    let num: f64 = children.iter().map(|&c| w[c] * field[c]).sum();
    let den: f64 = children.iter().map(|&c| w[c]).sum();
    assert!((out[target] - num / den).abs() < 1e-15);
    for (i, v) in out.iter().enumerate() {
        if i != target {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn coarsen_twice_equals_hierarchy_chain() {
    let h = GridHierarchy::new(2).unwrap();
    let field: Vec<f64> = (0..h.native().len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let step = coarsen(&field, h.level(2).unwrap(), h.level(1).unwrap()).unwrap();
    let twice = coarsen(&step, h.level(1).unwrap(), h.level(0).unwrap()).unwrap();
    assert_eq!(h.coarsen_to(&field, 0).unwrap(), twice);
}

#[test]
fn nearest_resample_then_coarsen_keeps_constants() {
    let h = GridHierarchy::new(3).unwrap();
    let (lat, lon) = (axis(-87.5, 5.0, 36), axis(2.5, 5.0, 72));
    let f = LatLonField { values: vec![-3.25; lat.len() * lon.len()], lat, lon };
    let v = resample_latlon(&f, h.native(), ResampleMethod::Nearest).unwrap();
    for x in h.coarsen_to(&v, 0).unwrap() {
        assert!((x + 3.25).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_and_lon_complement_partition_sphere(a in -180.0f64..180.0, width in 0.5f64..359.5, level in 0usize..4) {
        let g = build_grid(level).unwrap();
        let b = a + width;
        let first = RegionSpec::LatlonBox { bounds: LatLonBox::new(-90.0, 90.0, a, b) };
        let rest = RegionSpec::LatlonBox { bounds: LatLonBox::new(-90.0, 90.0, b, a) };
        let m1 = region_mask(&g, &first).unwrap();
        let m2 = region_mask(&g, &rest).unwrap();
        for (x, y) in m1.iter().zip(&m2) {
            prop_assert!(x ^ y);
        }
    }

    #[test]
    fn coarsen_preserves_constants(c in -1e3f64..1e3, level in 1usize..4) {
        let h = GridHierarchy::new(level).unwrap();
        let out = h.coarsen_to(&vec![c; h.native().len()], level - 1).unwrap();
        for x in out {
            prop_assert!((x - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }
}
