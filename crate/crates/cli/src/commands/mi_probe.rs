//! `mi-probe`: verification suite for the MI machinery. Runs the discrete
//! oracle identities and the neural estimator against closed-form Gaussian
//! and discretized-table targets, and emits a pass/fail CSV.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mimic_core::info::{
    discrete_mi_oracle, DiscreteJoint, EstimatorMode, MiEstimator, MineConfig,
};
use ndarray::{arr2, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rundir;
use crate::table::{fmt, CsvWriter};

#[derive(Debug, Args)]
pub struct MiProbeArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Critic training steps per estimator case.
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    /// Held-out evaluation sample count.
    #[arg(long, default_value_t = 50_000)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub case: String,
    pub expected: f64,
    pub estimate: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn row(case: &str, expected: f64, estimate: f64, tolerance: f64) -> ProbeRow {
    ProbeRow {
        case: case.to_string(),
        expected,
        estimate,
        tolerance,
        pass: (estimate - expected).abs() <= tolerance,
    }
}

/// Closed-form MI of a bivariate Gaussian with correlation rho, in nats.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Draw aligned samples of a correlated standard-Gaussian pair.
pub fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = mimic_core::rng::seeded(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut u = Array2::<f64>::zeros((n, 1));
    let mut v = Array2::<f64>::zeros((n, 1));
    let tail = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let x: f64 = normal.sample(&mut rng);
        let z: f64 = normal.sample(&mut rng);
        u[[i, 0]] = x;
        v[[i, 0]] = rho * x + tail * z;
    }
    (u, v)
}

/// Draw aligned samples from a 2x2 joint table, encoded as 0/1 scalars.
pub fn table_pairs(
    joint: &DiscreteJoint,
    n: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = mimic_core::rng::seeded(seed);
    let t = joint.table();
    let mut u = Array2::<f64>::zeros((n, 1));
    let mut v = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let r: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        'outer: for x in 0..t.nrows() {
            for y in 0..t.ncols() {
                acc += t[[x, y]];
                if r < acc {
                    u[[i, 0]] = x as f64;
                    v[[i, 0]] = y as f64;
                    break 'outer;
                }
            }
        }
    }
    (u, v)
}

/// Train a fresh estimator on aligned pairs and return the held-out estimate.
pub fn mine_on_pairs(
    train: (&Array2<f64>, &Array2<f64>),
    eval: (&Array2<f64>, &Array2<f64>),
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = MineConfig {
        seed,
        ..MineConfig::default()
    };
    let mut est = MiEstimator::new(train.0.ncols(), train.1.ncols(), cfg);
    let mut rng = mimic_core::rng::derive(seed, 77);
    est.fit(train.0, train.1, steps, 256, &mut rng)?;
    Ok(est.evaluate(eval.0, eval.1)?)
}

/// Run the whole verification suite.
pub fn run_probe(steps: usize, eval_n: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();

    // discrete oracle identities
    let indep = DiscreteJoint::new(arr2(&[[0.25, 0.25], [0.25, 0.25]]))?;
    rows.push(row(
        "discrete_independence",
        0.0,
        discrete_mi_oracle(&indep),
        1e-9,
    ));
    let diag = DiscreteJoint::new(arr2(&[[0.5, 0.0], [0.0, 0.5]]))?;
    rows.push(row(
        "discrete_diagonal",
        std::f64::consts::LN_2,
        discrete_mi_oracle(&diag),
        1e-9,
    ));
    let table = DiscreteJoint::new(arr2(&[[0.4, 0.1], [0.1, 0.4]]))?;
    rows.push(row(
        "discrete_transpose_gap",
        0.0,
        discrete_mi_oracle(&table) - discrete_mi_oracle(&table.transposed()),
        1e-12,
    ));
    rows.push(row(
        "discrete_table_oracle",
        0.19274475702175742,
        discrete_mi_oracle(&table),
        1e-12,
    ));

    // neural estimator vs closed forms
    let train_n = 16_384;
    for (i, rho) in [0.0, 0.5, 0.9].into_iter().enumerate() {
        let (u, v) = gaussian_pairs(train_n, rho, seed.wrapping_add(i as u64 * 31 + 1));
        let (ue, ve) = gaussian_pairs(eval_n, rho, seed.wrapping_add(i as u64 * 31 + 2));
        let estimate = mine_on_pairs((&u, &v), (&ue, &ve), steps, seed + i as u64)?;
        rows.push(row(
            &format!("gauss_rho_{rho:.1}"),
            gaussian_mi(rho),
            estimate,
            0.1,
        ));
    }
    let (u, v) = table_pairs(&table, train_n, seed.wrapping_add(101));
    let (ue, ve) = table_pairs(&table, eval_n, seed.wrapping_add(102));
    let estimate = mine_on_pairs((&u, &v), (&ue, &ve), steps, seed + 9)?;
    rows.push(row(
        "discrete_table_mine",
        discrete_mi_oracle(&table),
        estimate,
        0.1,
    ));

    Ok(rows)
}

/// Sanity check used by tests: an eval-mode estimator never exceeds the
/// discrete oracle by more than sampling slack on table data.
pub fn dv_lower_bound_check(steps: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let table = DiscreteJoint::new(arr2(&[[0.4, 0.1], [0.1, 0.4]]))?;
    let (u, v) = table_pairs(&table, n, seed);
    let cfg = MineConfig {
        seed,
        ..MineConfig::default()
    };
    let mut est = MiEstimator::new(1, 1, cfg);
    let mut rng = mimic_core::rng::derive(seed, 3);
    est.fit(&u, &v, steps, 256, &mut rng)?;
    // fresh, large evaluation sample
    let (ue, ve) = table_pairs(&table, n, seed.wrapping_add(1));
    let shift = n / 2;
    let mut vm = ve.clone();
    for i in 0..n {
        vm.row_mut(i).assign(&ve.row((i + shift) % n));
    }
    let dv = est.mine_estimate((&ue, &ve), (&ue, &vm), EstimatorMode::Eval)?;
    Ok((dv, discrete_mi_oracle(&table)))
}

pub fn run(args: &MiProbeArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "mi-probe")?;
    let rows = run_probe(args.steps, args.eval_n, args.seed)?;
    let mut csv = CsvWriter::new(&["case", "expected", "estimate", "tolerance", "pass"]);
    let mut all_pass = true;
    println!(
        "{:<24} {:>12} {:>12} {:>10} {:>6}",
        "case", "expected", "estimate", "tolerance", "pass"
    );
    for r in &rows {
        all_pass &= r.pass;
        println!(
            "{:<24} {:>12.6} {:>12.6} {:>10.0e} {:>6}",
            r.case,
            r.expected,
            r.estimate,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
        csv.row(&[
            r.case.clone(),
            fmt(r.expected),
            fmt(r.estimate),
            format!("{:e}", r.tolerance),
            r.pass.to_string(),
        ]);
    }
    csv.write(&out.join("mi_probe.csv"))?;
    println!("mi-probe: report -> {}", out.join("mi_probe.csv").display());
    if !all_pass {
        bail!("mi-probe: one or more checks failed");
    }
    Ok(())
}
