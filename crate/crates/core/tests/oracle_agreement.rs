use std::collections::BTreeMap;

use asep::couplings::{run_second_class, stationary_second_class};
use asep::engine::{run_general, run_reduced, GeneralModel, Harris, RateFn, RateModel};
use asep::lattice::sample_config;
use asep::observables::{
    estimate_two_point, second_class_histogram, variance_identity_check, MonteCarlo,
};
use asep::oracle::{exact_distribution, exact_second_class, InitialLaw};
use asep::stats::{fan_out, Histogram, Merge};
use asep::{Configuration, DensityProfile, Rates, RngStream, Topology};

#[derive(Default)]
struct MaskCounts(BTreeMap<u64, u64>);

impl Merge for MaskCounts {
    fn merge(&mut self, o: Self) {
        for (k, v) in o.0 {
            *self.0.entry(k).or_default() += v;
        }
    }
}

fn poisson(mean: f64, n: usize) -> Vec<f64> {
    let mut v = vec![(-mean).exp()];
    for k in 1..n {
        let prev = v[k - 1];
        v.push(prev * mean / k as f64);
    }
    v
}

#[test]
fn ring_marginals_match_uniformization() {
    let topo = Topology::ring(5).unwrap();
    let c0 = Configuration::from_bits(topo, "11010").unwrap();
    let rates = Rates::with_p(0.8).unwrap();
    let exact = exact_distribution(
        &InitialLaw::Point(c0.clone()),
        &RateModel::NearestNeighbor(rates),
        topo,
        1.0,
        1e-12,
    )
    .unwrap();
    let harris = Harris::nearest(rates);
    let counts = fan_out(200_000, 4, MaskCounts::default, |r, acc| {
        let t = harris.run(&c0, 1.0, &RngStream::replica(31, 1, r))?;
        *acc.0.entry(t.final_config.mask()).or_default() += 1;
        Ok(())
    })
    .unwrap();
    let tv = exact.total_variation(&counts.0);
    assert!(tv < 0.01, "total variation {tv}");
}

#[test]
fn general_model_matches_uniformization() {
    let topo = Topology::ring(6).unwrap();
    let c0 = Configuration::from_bits(topo, "111000").unwrap();
    let model = GeneralModel::new(
        vec![
            RateFn::local(|n| if n.get(-1) { 0.9 } else { 0.4 }),
            RateFn::Constant(0.2),
        ],
        vec![RateFn::Constant(0.1), RateFn::Constant(0.0)],
    )
    .unwrap();
    let exact = exact_distribution(
        &InitialLaw::Point(c0.clone()),
        &RateModel::General(model.clone()),
        topo,
        1.5,
        1e-12,
    )
    .unwrap();
    let counts = fan_out(200_000, 4, MaskCounts::default, |r, acc| {
        let t = run_general(&c0, &model, 1.5, &RngStream::replica(32, 1, r))?;
        *acc.0.entry(t.final_config.mask()).or_default() += 1;
        Ok(())
    })
    .unwrap();
    let tv = exact.total_variation(&counts.0);
    assert!(tv < 0.012, "total variation {tv}");
}

#[test]
fn closed_window_second_class_matches_pair_chain() {
    let window = Topology::segment(-6, 6).unwrap();
    let (rho, t) = (0.5, 0.5);
    let rates = Rates::tasep();
    let exact = exact_second_class(window, rho, rates, t, 1e-13).unwrap();
    assert!(exact.identity_gap() < 1e-10);
    let n = 200_000u64;
    let h = fan_out(n, 4, Histogram::new, |r, h| {
        let rng = RngStream::replica(33, 1, r);
        let run = run_second_class(stationary_second_class(window, rho, &rng)?, rates, t, &rng)?;
        h.push(run.q_site());
        Ok(())
    })
    .unwrap();
    for (k, &j) in exact.sites.iter().enumerate() {
        let e = h.proportion(j);
        let se = (exact.q_law[k] * (1.0 - exact.q_law[k]) / n as f64).sqrt();
        assert!(
            (e.estimate - exact.q_law[k]).abs() <= 4.0 * se + 1e-12,
            "j = {j}: {} vs {}",
            e.estimate,
            exact.q_law[k]
        );
    }
}

#[test]
fn empty_environment_psi_is_skellam() {
    let rates = Rates::with_p(0.75).unwrap();
    let t = 3.0;
    let up = poisson(rates.p() * t, 80);
    let down = poisson(rates.q() * t, 80);
    let mut psi = 0.0;
    for (a, pa) in up.iter().enumerate() {
        for (b, pb) in down.iter().enumerate() {
            psi += pa * pb * (a as f64 - b as f64 - rates.theta() * t).abs();
        }
    }
    let mc = MonteCarlo::new(40_000, 34).workers(4);
    let h = second_class_histogram(0.0, rates, t, &mc).unwrap();
    let e = h.mean_of(|q| (q as f64 - rates.theta() * t).abs());
    assert!(e.agrees(psi, 3.0), "{} vs {psi}", e.estimate);
}

#[test]
fn covariance_sums_to_the_static_variance() {
    let (rho, rates) = (0.4, Rates::with_p(0.8).unwrap());
    let mc = MonteCarlo::new(100_000, 35).workers(4);
    let tp = estimate_two_point(rho, rates, 1.0, (-14, 14), &mc).unwrap();
    let sum: f64 = tp.iter().map(|x| x.covariance.estimate).sum();
    let err: f64 = tp.iter().map(|x| x.covariance.stderr).sum();
    assert!((sum - rho * (1.0 - rho)).abs() <= 3.0 * err, "{sum}");
    let q_mass: f64 = tp.iter().map(|x| x.second_class.estimate).sum::<f64>() / (rho * (1.0 - rho));
    assert!((q_mass - 1.0).abs() < 1e-6);
    for x in &tp {
        assert!(x.difference().agrees(0.0, 4.0), "lag {}", x.j);
    }
}

#[test]
fn variance_identity_far_from_the_origin() {
    let (rho, rates, t, z) = (0.5, Rates::tasep(), 4.0, 20);
    let mc = MonteCarlo::new(20_000, 36).workers(4);
    let c = variance_identity_check(rho, rates, t, z, &mc).unwrap();
    assert!(c.difference().agrees(0.0, 3.0));
    // far away the second class side is ρ(1-ρ)(z - EQ) with EQ = 0
    assert!(c.second_class.agrees(rho * (1.0 - rho) * z as f64, 3.0));
}

#[test]
fn particle_hole_reflection_of_the_variance_side() {
    let (rho, rates, t, z) = (0.3, Rates::tasep(), 4.0, 2);
    let mc = MonteCarlo::new(40_000, 37).workers(4);
    let a = second_class_histogram(rho, rates, t, &mc)
        .unwrap()
        .mean_of(|q| (q - z).abs() as f64);
    let b = second_class_histogram(1.0 - rho, rates, t, &mc)
        .unwrap()
        .mean_of(|q| (-q - z).abs() as f64);
    assert!(
        a.minus(b).agrees(0.0, 3.0),
        "{} vs {}",
        a.estimate,
        b.estimate
    );
}

#[test]
fn locality_error_shrinks_with_window() {
    let topo = Topology::segment(-128, 127).unwrap();
    let rates = Rates::with_p(0.7).unwrap();
    let model = RateModel::NearestNeighbor(rates);
    let profile = DensityProfile::constant(topo, 0.5).unwrap();
    let harris = Harris::nearest(rates);
    let n = 4000u64;
    let mut errors = Vec::new();
    for m in [2i64, 4, 8, 16] {
        let bad = fan_out(
            n,
            4,
            || 0u64,
            |r, acc| {
                let rng = RngStream::replica(38, 1, r);
                let c = sample_config(topo, &profile, &rng)?;
                let full = harris.run(&c, 2.0, &rng)?;
                let red = run_reduced(&c, (-m, m), &model, 2.0, &rng)?;
                *acc += (full.final_config.occupied(0)? != red.final_config.occupied(0)?) as u64;
                Ok(())
            },
        )
        .unwrap();
        errors.push(bad as f64 / n as f64);
    }
    for w in errors.windows(2) {
        assert!(
            w[1] <= w[0] + 3.0 * (w[0].max(1.0 / n as f64) / n as f64).sqrt(),
            "{errors:?}"
        );
    }
    assert!(errors[3] < 0.005, "{errors:?}");
}
