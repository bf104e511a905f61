use asep::expctl::{
    emit, parse_csv, run_experiment, run_replicas, ExperimentSpec, Format, ResultRow, Verdict,
};
use asep::rng::unit;
use asep::stats::{Merge, Moments};
use rand::RngCore;

fn spec(text: &str) -> ExperimentSpec {
    let mut s = ExperimentSpec::parse(text).unwrap();
    s.workers = 4;
    s
}

fn all_pass(rows: &[ResultRow]) -> bool {
    rows.iter().all(|r| r.verdict == Verdict::Pass)
}

#[test]
fn equilibrium_current_past_the_origin() {
    let rows = run_experiment(&spec(
        "experiment=mean-current\nrho=0.5\np=1\nt=4\nreplicas=10000\nseed=101",
    ))
    .unwrap();
    assert_eq!(rows[0].reference, Some(1.0));
    assert!((rows[0].estimate - 1.0).abs() <= 3.0 * rows[0].stderr);
}

#[test]
fn mean_q_vanishes_at_half_density() {
    let rows = run_experiment(&spec(
        "experiment=mean-q\nrho=0.5\np=1\nt=10\nreplicas=10000\nseed=102",
    ))
    .unwrap();
    assert_eq!(rows[0].reference, Some(0.0));
    assert!(all_pass(&rows));
}

#[derive(Default)]
struct Raw {
    values: Vec<i64>,
    moments: Moments,
}

impl Merge for Raw {
    fn merge(&mut self, o: Self) {
        self.values.extend(o.values);
        self.moments.merge(o.moments);
    }
}

#[test]
fn merged_stderr_equals_pooled_formula() {
    let raw = run_replicas(1500, 7, 0x99, 3, Raw::default, |_, rng, acc| {
        let x = (unit(rng.lane(asep::rng::Lane::Main).next_u64()) * 1000.0) as i64 - 500;
        acc.values.push(x);
        acc.moments.push(x);
        Ok(())
    })
    .unwrap();
    let n = raw.values.len() as f64;
    let mean = raw.values.iter().sum::<i64>() as f64 / n;
    let var = raw
        .values
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let e = raw.moments.mean_estimate();
    assert!((e.estimate - mean).abs() < 1e-9);
    assert!((e.stderr - (var / n).sqrt()).abs() < 1e-9);
}

#[test]
fn outputs_are_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment=identity-variance\nrho=0.3\nt=2\nz=1\nreplicas=2000\nseed=103\n";
    let mut bytes = Vec::new();
    for (k, workers) in [1usize, 8, 8].into_iter().enumerate() {
        let mut s = spec(text);
        s.workers = workers;
        let path = dir.path().join(format!("{k}.csv"));
        emit(&run_experiment(&s).unwrap(), Format::Csv, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[1], bytes[2]);
    let rows = parse_csv(std::str::from_utf8(&bytes[0]).unwrap()).unwrap();
    assert_eq!(rows[0].z, Some(1));
}

#[test]
fn unwritable_output_is_an_error() {
    let rows = run_experiment(&spec(
        "experiment=mean-q\nrho=0.5\nt=1\nreplicas=100\nseed=1",
    ))
    .unwrap();
    let err = emit(
        &rows,
        Format::Json,
        std::path::Path::new("/nonexistent-dir/rows.json"),
    );
    assert!(matches!(err, Err(asep::Error::Io(_))));
}

#[test]
fn small_suite_passes() {
    let specs = [
        "experiment=identity-covariance\nrho=0.5\nt=0.5\nlags=-2..2\nreplicas=20000\nseed=104",
        "experiment=identity-derivative\nrho=0.3\ndelta=0.05\nt=1\nreplicas=20000\nseed=105",
        "experiment=label-tail\nrho=0.5\nlambda=0.25\np=0.6\nt=1\nk=1,2,3\nreplicas=20000\nseed=106",
        "experiment=rw-environment\np=0.6\nt=2\nk=1,2,3\nschedules=1\nreplicas=20000\nseed=107",
        "experiment=coupling-marginal\nrho=0.6\nlambda=0.3\nt=1\nreplicas=5000\nseed=108",
        "experiment=oracle-compare\np=0.7\nt=0.5\nsites=4\nparticles=2\nreplicas=100000\nseed=109",
    ];
    for text in specs {
        let rows = run_experiment(&spec(text)).unwrap();
        assert!(!rows.is_empty());
        assert!(all_pass(&rows), "{text}\n{rows:#?}");
    }
}

#[test]
fn doubling_the_window_changes_nothing() {
    let rows = run_experiment(&spec(
        "experiment=window-doubling\nrho=0.3\np=1\nt=2\nlags=-1..1\nreplicas=3000\nseed=110",
    ))
    .unwrap();
    // covariance and second class side per lag, two variance members, two means
    assert_eq!(rows.len(), 3 * 2 + 2 + 2);
    assert!(rows
        .iter()
        .all(|r| r.estimate == 0.0 && r.verdict == Verdict::Pass));
}

#[test]
fn scaling_rows_include_fit_and_band() {
    let rows = run_experiment(&spec(
        "experiment=scaling-psi\nrho=0.5\nt=2,4,8\nreplicas=2000\nseed=111",
    ))
    .unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[..3]
        .iter()
        .all(|r| r.verdict == Verdict::NotApplicable && r.t.is_some()));
    assert_eq!(rows[3].reference, Some(2.0 / 3.0));
    assert_eq!(rows[4].reference, Some(2.0));
}
