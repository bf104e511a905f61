use asep::couplings::{
    concavity_initial, run_basic_coupling, run_concavity_coupling, run_second_class, LabelProcess,
    LayeredState, SecondClassProcess,
};
use asep::engine::{run, run_reduced, RateModel};
use asep::expctl::{parse_csv, parse_json, to_csv, to_json, ResultRow, Verdict};
use asep::lattice::{char_speed, flux, mean_current, sample_config};
use asep::observables::{current_by_count, CurrentLedger};
use asep::oracle::{
    exact_distribution, simulate_reflected_walk, EnvironmentSchedule, InitialLaw, RightRegion,
};
use asep::stats::{fan_out, Moments};
use asep::{Configuration, DensityProfile, Rates, RngStream, Topology};
use proptest::prelude::*;

fn rates() -> impl Strategy<Value = Rates> {
    (0.55f64..=1.0).prop_map(|p| Rates::with_p(p).unwrap())
}

fn config_on(topo: Topology) -> impl Strategy<Value = Configuration> {
    proptest::collection::vec(any::<bool>(), topo.len()).prop_map(move |bits| {
        let mut c = Configuration::empty(topo);
        for (i, b) in bits.into_iter().enumerate() {
            c.set_index(i, b);
        }
        c
    })
}

/// Two configurations with `upper >= lower`.
fn ordered_pair(topo: Topology) -> impl Strategy<Value = (Configuration, Configuration)> {
    (config_on(topo), config_on(topo)).prop_map(|(a, b)| {
        let mut upper = a.clone();
        let mut lower = a;
        for i in 0..upper.len() {
            if b.get(i) {
                upper.set_index(i, true);
            } else {
                lower.set_index(i, false);
            }
        }
        (upper, lower)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn events_conserve_particles_and_exclusion(c in config_on(Topology::ring(70).unwrap()), r in rates(), seed in any::<u64>(), t in 0.0f64..4.0) {
        let n = c.count();
        let mut replay = c.clone();
        let traj = run(&c, r, t, &RngStream::new(seed, 0)).unwrap();
        let topo = c.topology();
        for e in &traj.events {
            let (f, to) = (topo.index_of(e.from).unwrap(), topo.index_of(e.to).unwrap());
            if e.effected {
                prop_assert!(replay.get(f) && !replay.get(to));
                replay.set_index(f, false);
                replay.set_index(to, true);
            }
            prop_assert_eq!(replay.count(), n);
        }
        prop_assert_eq!(&replay, &traj.final_config);
        prop_assert!(traj.events.windows(2).all(|w| w[0].time <= w[1].time));
        let again = run(&c, r, t, &RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(traj.events, again.events);
    }

    #[test]
    fn basic_coupling_keeps_order_and_currents_add((up, low) in ordered_pair(Topology::segment(-40, 39).unwrap()), r in rates(), seed in any::<u64>(), x in -10i64..10) {
        let joint = run_basic_coupling(LayeredState::new(vec![up.clone(), low.clone()]).unwrap(), r, 3.0, &RngStream::new(seed, 1)).unwrap();
        let (u, l) = (&joint.state.layers()[0], &joint.state.layers()[1]);
        prop_assert!(l.le(u));
        let diff = |a: &Configuration, b: &Configuration| {
            let mut d = Configuration::empty(a.topology());
            for i in a.indices() {
                if !b.get(i) { d.set_index(i, true); }
            }
            d
        };
        let j_up = current_by_count(&up, u, x);
        let j_low = current_by_count(&low, l, x);
        let j_diff = current_by_count(&diff(&up, &low), &diff(u, l), x);
        prop_assert_eq!(j_up, j_low + j_diff);
        // the layers are exactly the single-layer runs on the same clocks
        prop_assert_eq!(u, &run(&up, r, 3.0, &RngStream::new(seed, 1)).unwrap().final_config);
    }

    #[test]
    fn single_discrepancy_moves_current_by_at_most_one(c in config_on(Topology::segment(-32, 31).unwrap()), site in -32i64..32, r in rates(), seed in any::<u64>(), x in -8i64..8) {
        let mut other = c.clone();
        other.set(site, !c.occupied(site).unwrap()).unwrap();
        let rng = RngStream::new(seed, 2);
        let a = run(&c, r, 2.0, &rng).unwrap();
        let b = run(&other, r, 2.0, &rng).unwrap();
        let ja = current_by_count(&c, &a.final_config, x);
        let jb = current_by_count(&other, &b.final_config, x);
        prop_assert!((ja - jb).abs() <= 1);
        prop_assert_eq!(CurrentLedger::new(&c, &a.final_config).unwrap().current(x), ja);
    }

    #[test]
    fn second_class_particle_is_the_discrepancy(rho in 0.05f64..0.95, r in rates(), seed in any::<u64>()) {
        let topo = Topology::segment(-64, 63).unwrap();
        let rng = RngStream::new(seed, 3);
        let profile = DensityProfile::constant(topo, rho).unwrap().with_site(0, 1.0).unwrap();
        let upper = sample_config(topo, &profile, &rng).unwrap();
        let run2 = run_second_class(SecondClassProcess::new(upper.clone(), 0).unwrap(), r, 2.5, &rng).unwrap();
        let mut lower0 = upper.clone();
        lower0.set(0, false).unwrap();
        let up = run(&upper, r, 2.5, &rng).unwrap().final_config;
        let low = run(&lower0, r, 2.5, &rng).unwrap().final_config;
        prop_assert_eq!(run2.process.upper(), &up);
        prop_assert_eq!(up.excess_over(&low), vec![run2.process.q_index()]);
    }

    #[test]
    fn label_process_agrees_with_counting(rho in 0.2f64..0.9, frac in 0.1f64..0.9, r in rates(), seed in any::<u64>()) {
        let topo = Topology::segment(-64, 63).unwrap();
        let rng = RngStream::new(seed, 4);
        let p = LabelProcess::stationary(topo, rho, rho * frac, &rng).unwrap();
        let (u0, e0) = (p.pair().upper().clone(), p.eta().clone());
        let (p, _) = asep::couplings::run_label_process(p, r, 2.0, &rng).unwrap();
        prop_assert_eq!(p.label(), p.label_by_count(&u0, &e0, topo.index_of(0).unwrap()));
    }

    #[test]
    fn concavity_labels_never_cross(rho in 0.2f64..0.9, frac in 0.0f64..1.0, r in rates(), seed in any::<u64>()) {
        let topo = Topology::segment(-64, 63).unwrap();
        let rng = RngStream::new(seed, 5);
        let (zeta, xi) = concavity_initial(topo, rho, rho * frac, &rng).unwrap();
        let mut ok = true;
        let run = run_concavity_coupling(&zeta, &xi, 0, 0, r, 3.0, &rng, |_, a, b| ok &= a <= b).unwrap();
        prop_assert!(ok);
        prop_assert!(run.q_zeta <= run.q_xi);
        prop_assert!(run.xi.le(&run.zeta));
    }

    #[test]
    fn uniformization_returns_probability_vectors(c in config_on(Topology::ring(7).unwrap()), r in rates(), t in 0.0f64..6.0) {
        let d = exact_distribution(&InitialLaw::Point(c), &RateModel::NearestNeighbor(r), Topology::ring(7).unwrap(), t, 1e-11).unwrap();
        prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        prop_assert!((d.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn walks_stay_ordered_in_any_environment(env_seed in any::<u64>(), seed in any::<u64>(), p in 0.55f64..1.0, up in 0.0f64..1.0, down in 0.0f64..1.0) {
        let r = Rates::with_p(p).unwrap();
        let s = EnvironmentSchedule::adversarial(env_seed, -30, 30, 5.0, 10).unwrap();
        let w = simulate_reflected_walk(&s, r, RightRegion { up, down }, 5.0, 0, &RngStream::new(seed, 6)).unwrap();
        prop_assert!(w.y <= w.z && w.y <= 0);
    }

    #[test]
    fn schedule_state_is_flip_parity(start in any::<bool>(), mut times in proptest::collection::vec(0.0f64..10.0, 0..12), t in 0.0f64..10.0) {
        times.sort_by(f64::total_cmp);
        times.dedup();
        let s = EnvironmentSchedule::open().with_initial(3, start).with_flips(3, &times).unwrap();
        let flips = times.iter().filter(|&&f| f <= t).count();
        prop_assert_eq!(s.is_open(3, t), start ^ (flips % 2 == 1));
    }

    #[test]
    fn flux_symmetries(rho in 0.0f64..=1.0, r in rates(), t in 0.0f64..50.0) {
        prop_assert!((flux(rho, r).unwrap() - flux(1.0 - rho, r).unwrap()).abs() < 1e-15);
        prop_assert!((char_speed(rho, r).unwrap() + char_speed(1.0 - rho, r).unwrap()).abs() < 1e-15);
        prop_assert_eq!(mean_current(rho, r, 0, t).unwrap(), t * flux(rho, r).unwrap());
    }

    #[test]
    fn monotone_initial_coupling(lo in 0.0f64..=1.0, gap in 0.0f64..=1.0, seed in any::<u64>()) {
        let hi = lo + (1.0 - lo) * gap;
        let topo = Topology::segment(-100, 100).unwrap();
        let rng = RngStream::new(seed, 7);
        let a = sample_config(topo, &DensityProfile::constant(topo, lo).unwrap(), &rng).unwrap();
        let b = sample_config(topo, &DensityProfile::constant(topo, hi).unwrap(), &rng).unwrap();
        prop_assert!(a.le(&b));
    }

    #[test]
    fn reduced_runs_stay_inside_their_window(c in config_on(Topology::segment(-64, 63).unwrap()), r in rates(), seed in any::<u64>(), m in 1i64..40) {
        let rng = RngStream::new(seed, 8);
        let red = run_reduced(&c, (-m, m), &RateModel::NearestNeighbor(r), 1.5, &rng).unwrap();
        let inside = c.count_sites(-m + 1, m - 1);
        prop_assert_eq!(red.final_config.count(), inside);
        prop_assert_eq!(red.final_config.count_sites(-m + 1, m - 1), inside);
        prop_assert!(red.events.iter().all(|e| e.from.min(e.to) > -m && e.from.max(e.to) < m));
    }

    #[test]
    fn fan_out_ignores_worker_count(replicas in 1u64..2000, workers in 1usize..6, seed in any::<u64>()) {
        let kernel = |r: u64, m: &mut Moments| {
            m.push((RngStream::replica(seed, 9, r).master_seed() ^ r) as i64 % 1000);
            Ok(())
        };
        let a = fan_out(replicas, 1, Moments::new, kernel).unwrap();
        let b = fan_out(replicas, workers, Moments::new, kernel).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn row_strategy() -> impl Strategy<Value = ResultRow> {
    let opt = |s: std::ops::Range<f64>| proptest::option::of(s);
    (
        (
            opt(0.0..1.0),
            opt(0.0..1.0),
            0.5f64..=1.0,
            opt(0.0..1e3),
            proptest::option::of(-100i64..100),
            proptest::option::of(1u32..5),
        ),
        (
            any::<u64>(),
            any::<u64>(),
            -1e6f64..1e6,
            0.0f64..1e3,
            opt(-1e6..1e6),
        ),
        prop_oneof![
            Just(Verdict::Pass),
            Just(Verdict::Fail),
            Just(Verdict::NotApplicable)
        ],
    )
        .prop_map(
            |(
                (rho, lambda, p, t, z, m),
                (replicas, seed, estimate, stderr, reference),
                verdict,
            )| ResultRow {
                experiment: "mean-current".into(),
                rho,
                lambda,
                p,
                q: 1.0 - p,
                t,
                z,
                m,
                replicas,
                seed,
                estimate,
                stderr,
                ci_lo: estimate - 3.0 * stderr,
                ci_hi: estimate + 3.0 * stderr,
                reference,
                verdict,
            },
        )
}

proptest! {
    #[test]
    fn rows_round_trip(rows in proptest::collection::vec(row_strategy(), 0..8)) {
        prop_assert_eq!(&parse_csv(&to_csv(&rows).unwrap()).unwrap(), &rows);
        prop_assert_eq!(&parse_json(&to_json(&rows).unwrap()).unwrap(), &rows);
    }
}
