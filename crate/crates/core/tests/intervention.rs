use std::collections::BTreeMap;

use mcbw_core::dataset::{input_index, AnomalyDataset, Provenance, N_INPUTS, N_OUTPUTS};
use mcbw_core::emulator::{Activation, LagSuite, MlpModel, Standardization};
use mcbw_core::grid::{build_grid, region_mask, LatLonBox, RegionCatalog, RegionSpec};
use mcbw_core::intervention::{
    aggregate_response, apply_perturbation, run_scenario, Aggregation, InterventionScenario, PerturbMode,
    Perturbation,
};
use mcbw_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(region: RegionSpec, perturbations: &[(&str, PerturbMode, f64)]) -> InterventionScenario {
    InterventionScenario {
        region,
        duration_years: 1,
        perturbations: perturbations
            .iter()
            .map(|&(id, mode, value)| (id.to_string(), Perturbation { mode, value }))
            .collect::<BTreeMap<_, _>>(),
        reference_time: 0,
        lag_set: None,
        aggregation: Aggregation::Sum,
        climatological_baseline: false,
        taper_km: None,
    }
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
}

/// One affine layer `y = A x + b` with identity standardization.
fn linear_model(nv: usize, lag: usize, level: usize, seed: u64) -> MlpModel {
    let mut m = MlpModel::new(
        &[N_INPUTS * nv, N_OUTPUTS * nv],
        Activation::Identity,
        false,
        Standardization::identity(N_INPUTS),
        Standardization::identity(N_OUTPUTS),
        seed,
    )
    .unwrap();
    m.lag = lag;
    m.grid_level = level;
    let p = random_vec(m.n_params(), seed + 100);
    m.set_params(&p);
    m
}

fn gelu_model(nv: usize, lag: usize, level: usize, seed: u64) -> MlpModel {
    let mut m = MlpModel::new(
        &[N_INPUTS * nv, 16, N_OUTPUTS * nv],
        Activation::Gelu,
        true,
        Standardization { mean: vec![0.1; N_INPUTS], std: vec![2.0; N_INPUTS] },
        Standardization { mean: vec![-0.3; N_OUTPUTS], std: vec![3.0; N_OUTPUTS] },
        seed,
    )
    .unwrap();
    m.lag = lag;
    m.grid_level = level;
    m
}

fn weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

#[test]
fn identity_scenario_gives_bitwise_zero_diff() {
    let g = build_grid(1).unwrap();
    let nv = g.len();
    let suite = LagSuite::new((1..=3).map(|l| gelu_model(nv, l, 1, l as u64)).collect()).unwrap();
    let s = scenario(
        RegionSpec::named("SEP"),
        &[
            ("sw_cre_toa", PerturbMode::Add, 0.0),
            ("lw_cre_toa", PerturbMode::Scale, 1.0),
            ("net_clearsky_toa", PerturbMode::Add, -0.0),
        ],
    );
    let mask = region_mask(&g, &s.region).unwrap();
    let x = random_vec(N_INPUTS * nv, 3);
    assert_eq!(apply_perturbation(&x, &s, &mask).unwrap(), x);
    let b = aggregate_response(&suite, &s, &x, &weights(&mask)).unwrap();
    assert_eq!(b.lags, vec![1, 2, 3]);
    assert!(b.diff.iter().all(|d| d.to_bits() == 0), "diff must be +0.0 everywhere");
    assert_eq!(b.before, b.after);
}

#[test]
fn add_over_sep_touches_only_masked_vertices_of_one_channel() {
    let g = build_grid(3).unwrap();
    let nv = g.len();
    let s = scenario(RegionSpec::named("SEP"), &[("sw_cre_toa", PerturbMode::Add, -10.0)]);
    let mask = region_mask(&g, &s.region).unwrap();
    assert!(mask.iter().filter(|&&m| m).count() > 5);
    let x = random_vec(N_INPUTS * nv, 11);
    let y = apply_perturbation(&x, &s, &mask).unwrap();
    let c = input_index("sw_cre_toa").unwrap();
    for ch in 0..N_INPUTS {
        for v in 0..nv {
            let i = ch * nv + v;
            if ch == c && mask[v] {
                assert_eq!(y[i], x[i] + -10.0);
                assert!((y[i] - x[i] + 10.0).abs() < 1e-12);
            } else {
                assert_eq!(y[i].to_bits(), x[i].to_bits());
            }
        }
    }
}

#[test]
fn scale_on_two_channels_matches_loop_oracle() {
    let g = build_grid(2).unwrap();
    let nv = g.len();
    let s = scenario(
        RegionSpec::LatlonBox { bounds: LatLonBox::new(-40.0, 40.0, 160.0, 300.0) },
        &[("sw_cre_toa", PerturbMode::Scale, 2.0), ("net_clearsky_surf", PerturbMode::Scale, 2.0)],
    );
    let mask = region_mask(&g, &s.region).unwrap();
    let x = random_vec(N_INPUTS * nv, 12);
    let y = apply_perturbation(&x, &s, &mask).unwrap();
    let scaled = [input_index("sw_cre_toa").unwrap(), input_index("net_clearsky_surf").unwrap()];
    // oracle: explicit walk over lat/lon membership rather than the mask
    let verts = g.vertices();
    for ch in 0..N_INPUTS {
        for (v, p) in verts.iter().enumerate() {
            let lon = p.lon.rem_euclid(360.0);
            let inside = p.lat >= -40.0 && p.lat <= 40.0 && lon >= 160.0 && lon < 300.0;
            let want = if scaled.contains(&ch) && inside { 2.0 * x[ch * nv + v] } else { x[ch * nv + v] };
            assert_eq!(y[ch * nv + v], want, "channel {ch} vertex {v}");
        }
    }
}

#[test]
fn linear_suite_diff_is_operator_times_delta() {
    let g = build_grid(1).unwrap();
    let nv = g.len();
    let model = linear_model(nv, 1, 1, 5);
    let suite = LagSuite::new(vec![model.clone()]).unwrap();
    let s = scenario(
        RegionSpec::LatlonBox { bounds: LatLonBox::new(-90.0, 90.0, 0.0, 360.0) },
        &[("sw_cre_toa", PerturbMode::Add, -3.5), ("lw_cre_toa", PerturbMode::Add, 1.25)],
    );
    let mask = region_mask(&g, &s.region).unwrap();
    assert!(mask.iter().all(|&m| m));
    let x = random_vec(N_INPUTS * nv, 6);
    let b = aggregate_response(&suite, &s, &x, &weights(&mask)).unwrap();
    let mut delta = vec![0.0; N_INPUTS * nv];
    for v in 0..nv {
        delta[input_index("sw_cre_toa").unwrap() * nv + v] = -3.5;
        delta[input_index("lw_cre_toa").unwrap() * nv + v] = 1.25;
    }
    let a = &model.layers[0].weight;
    for o in 0..N_OUTPUTS * nv {
        let want: f64 = (0..N_INPUTS * nv).map(|i| a[[o, i]] * delta[i]).sum();
        assert!((b.diff[o] - want).abs() < 1e-6, "output {o}: {} vs {want}", b.diff[o]);
    }
}

#[test]
fn superposition_over_disjoint_perturbations() {
    let g = build_grid(2).unwrap();
    let nv = g.len();
    let suite = LagSuite::new((1..=3).map(|l| linear_model(nv, l, 2, 20 + l as u64)).collect()).unwrap();
    let x = random_vec(N_INPUTS * nv, 7);
    let cat = RegionCatalog::default();

    // disjoint channels, same region
    let a = scenario(RegionSpec::named("SEP"), &[("sw_cre_toa", PerturbMode::Add, -10.0)]);
    let b = scenario(RegionSpec::named("SEP"), &[("net_clearsky_toa", PerturbMode::Add, 4.0)]);
    let ab = scenario(
        RegionSpec::named("SEP"),
        &[("sw_cre_toa", PerturbMode::Add, -10.0), ("net_clearsky_toa", PerturbMode::Add, 4.0)],
    );
    let w = a.forcing_weights(&g, &cat).unwrap();
    let da = aggregate_response(&suite, &a, &x, &w).unwrap().diff;
    let db = aggregate_response(&suite, &b, &x, &w).unwrap().diff;
    let dab = aggregate_response(&suite, &ab, &x, &w).unwrap().diff;
    for i in 0..dab.len() {
        assert!((dab[i] - da[i] - db[i]).abs() < 1e-6);
    }

    // disjoint regions, same channel
    let sep = scenario(RegionSpec::named("SEP"), &[("sw_cre_toa", PerturbMode::Add, -10.0)]);
    let sea = scenario(RegionSpec::named("SEA"), &[("sw_cre_toa", PerturbMode::Add, -10.0)]);
    let w_sep = sep.forcing_weights(&g, &cat).unwrap();
    let w_sea = sea.forcing_weights(&g, &cat).unwrap();
    assert!(w_sep.iter().zip(&w_sea).all(|(p, q)| p * q == 0.0));
    let w_union: Vec<f64> = w_sep.iter().zip(&w_sea).map(|(p, q)| p + q).collect();
    let d1 = aggregate_response(&suite, &sep, &x, &w_sep).unwrap().diff;
    let d2 = aggregate_response(&suite, &sea, &x, &w_sea).unwrap().diff;
    let d12 = aggregate_response(&suite, &sep, &x, &w_union).unwrap().diff;
    for i in 0..d12.len() {
        assert!((d12[i] - d1[i] - d2[i]).abs() < 1e-6);
    }
}

#[test]
fn sum_is_exactly_twice_mean_for_duplicated_models() {
    let g = build_grid(2).unwrap();
    let nv = g.len();
    let base = gelu_model(nv, 1, 2, 9);
    let mut twin = base.clone();
    twin.lag = 2;
    let suite = LagSuite::new(vec![base, twin]).unwrap();
    let mut s = scenario(RegionSpec::named("NEP"), &[("sw_cre_toa", PerturbMode::Add, -15.0)]);
    s.lag_set = Some(vec![2, 1]);
    let w = s.forcing_weights(&g, &RegionCatalog::default()).unwrap();
    let x = random_vec(N_INPUTS * nv, 8);
    let sum = aggregate_response(&suite, &s, &x, &w).unwrap();
    s.aggregation = Aggregation::Mean;
    let mean = aggregate_response(&suite, &s, &x, &w).unwrap();
    assert_eq!(sum.lags, vec![1, 2]);
    assert!(sum.diff.iter().any(|d| *d != 0.0));
    for (a, b) in sum.diff.iter().zip(&mean.diff) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn lag_selection_follows_duration_and_rejects_missing_lags() {
    let nv = build_grid(0).unwrap().len();
    let suite = LagSuite::new([1, 12, 13, 24].iter().map(|&l| linear_model(nv, l, 0, l as u64)).collect()).unwrap();
    let mut s = scenario(RegionSpec::named("SEP"), &[("sw_cre_toa", PerturbMode::Add, -1.0)]);
    assert_eq!(s.resolve_lags(&suite).unwrap(), vec![1, 12]);
    s.duration_years = 2;
    assert_eq!(s.resolve_lags(&suite).unwrap(), vec![1, 12, 13, 24]);
    s.lag_set = Some(vec![13, 5]);
    assert!(matches!(s.resolve_lags(&suite), Err(Error::NotFound(_))));
}

#[test]
fn run_uses_reference_month_or_zero_baseline() {
    let level = 1;
    let g = build_grid(level).unwrap();
    let nv = g.len();
    let mut ds = AnomalyDataset::zeros(level, 4, Provenance::Anomaly);
    for (c, ch) in ds.data.iter_mut().enumerate() {
        for (i, v) in ch.iter_mut().enumerate() {
            *v = ((i * 7 + c) % 17) as f32 * 0.25 - 2.0;
        }
    }
    let suite = LagSuite::new(vec![linear_model(nv, 1, level, 3)]).unwrap();
    let mut s = scenario(RegionSpec::named("SEP"), &[("sw_cre_toa", PerturbMode::Add, -10.0)]);
    s.reference_time = 2;
    let cat = RegionCatalog::default();
    let run = run_scenario(&ds, &suite, &g, &cat, &s).unwrap();
    assert_eq!(run.baseline, ds.input_frame(2));
    s.climatological_baseline = true;
    let run0 = run_scenario(&ds, &suite, &g, &cat, &s).unwrap();
    assert!(run0.baseline.iter().all(|v| *v == 0.0));
    s.climatological_baseline = false;
    s.reference_time = 4;
    assert!(matches!(run_scenario(&ds, &suite, &g, &cat, &s), Err(Error::InvalidField { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbed_input_differs_only_inside_mask(
        lat0 in -80.0f64..60.0, dlat in 5.0f64..30.0, lon0 in -180.0f64..180.0, dlon in 5.0f64..120.0,
        value in -20.0f64..20.0, scale in prop::bool::ANY, seed in 0u64..1000,
    ) {
        let g = build_grid(2).unwrap();
        let nv = g.len();
        let mode = if scale { PerturbMode::Scale } else { PerturbMode::Add };
        let s = scenario(
            RegionSpec::LatlonBox { bounds: LatLonBox::new(lat0, lat0 + dlat, lon0, lon0 + dlon) },
            &[("sw_cre_toa", mode, value), ("lw_cre_toa", mode, value)],
        );
        let mask = region_mask(&g, &s.region).unwrap();
        let x = random_vec(N_INPUTS * nv, seed);
        let y = apply_perturbation(&x, &s, &mask).unwrap();
        for ch in 0..N_INPUTS {
            for v in 0..nv {
                if !mask[v] {
                    prop_assert_eq!(y[ch * nv + v].to_bits(), x[ch * nv + v].to_bits());
                }
            }
        }
    }
}
