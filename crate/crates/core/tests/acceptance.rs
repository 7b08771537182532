//! Acceptance report: one PASS/FAIL line per criterion at pinned tolerances.
//!
//! Runs without the libtest harness so every line reaches the output. A
//! FAIL line is a measured outcome, not a harness error; the process exits
//! nonzero only if a check cannot be evaluated at all.

use std::time::{Duration, Instant};

use midqr::fit::{
    admissible_range, closed_form_with, gradient, hessian, numerical_fit, InterpolatedMidCdf,
    LeastSquares,
};
use midqr::inference::jacobian_beta_wrt_pi;
use midqr::kernel_cdf::{
    conditional_cdf, conditional_mid_probabilities, Bandwidths, ConditionalMidCdfMatrix,
    CovariateKind, CovariateSpec,
};
use midqr::mid_distributions::{mid_cdf, mid_quantile, population_mid_quantile, tabulate, Pmf};
use midqr::model::{
    first_step, fit_model, BandwidthChoice, FitConfig, PredictionScale, VarianceChoice,
};
use midqr::sim::{
    generate, run_study, true_mid_quantile, MetricsTable, MidQrEstimator, ScenarioId, ScenarioSpec,
};
use midqr::transform::Transformation;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

// Pinned tolerances.
const C1_TOL: f64 = 1e-12;
const C1_RUNTIME: Duration = Duration::from_secs(1);
const C2_RUNTIME: Duration = Duration::from_secs(10);
const C3_BIAS: f64 = 0.06;
const C3_RMSE_REL: f64 = 0.35;
const C3_RMSE_REF: [f64; 3] = [0.246, 0.271, 0.251];
const C4_REF: [f64; 3] = [0.482, 0.635, 0.856];
const C4_REL: f64 = 0.5;
const C5_3A: (f64, f64) = (92.5, 97.5);
const C5_1A: (f64, f64) = (92.5, 99.0);
const C6_REF: f64 = 0.073e-3;
const C6_FACTOR: f64 = 2.0;
const C7_TOL: f64 = 1e-6;
const C8_GRAD_REL: f64 = 1e-6;
const C8_HESS_REL: f64 = 1e-5;
const C8_EXACT_REL: f64 = 1e-12;
const C10_TOL: f64 = 0.03;
const C11_TOL: f64 = 1e-10;

const TABLE1_HBAR: [f64; 7] = [8.494, 9.494, 10.494, 11.494, 12.494, 13.494, 14.494];
const TABLE2_HBAR: [f64; 7] = [14.737, 18.234, 21.731, 25.228, 28.725, 32.222, 35.719];
const TABLE3_HBAR: [f64; 7] = [
    243.938, 247.933, 251.596, 254.593, 257.921, 261.251, 265.580,
];
const DECILES: [f64; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
const COVERAGE_LEVELS: [f64; 3] = [0.3, 0.5, 0.7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, out: Result<Outcome, String>, errors: &mut usize) {
    match out {
        Ok(o) => println!(
            "criterion {id:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ),
        Err(e) => {
            *errors += 1;
            println!("criterion {id:>2} FAIL {name}: could not be evaluated: {e}");
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Random mid-probability row of a pmf with strictly positive masses on
/// `k` points whose end masses are at most `edge`.
fn random_mid_row(rng: &mut ChaCha8Rng, k: usize, edge: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    if k > 2 {
        for j in [0, k - 1] {
            if w[j] > edge {
                let excess = w[j] - edge;
                w[j] = edge;
                let spread = excess / (k - 2) as f64;
                for v in &mut w[1..k - 1] {
                    *v += spread;
                }
            }
        }
    }
    let mut cum = 0.0;
    w.iter()
        .map(|m| {
            let g = cum + 0.5 * m;
            cum += m;
            g
        })
        .collect()
}

fn random_grid(rng: &mut ChaCha8Rng, k: usize, start: f64) -> Vec<f64> {
    let mut z = start;
    (0..k)
        .map(|_| {
            let v = z;
            z += rng.random_range(0.5..2.0);
            v
        })
        .collect()
}

fn criterion_1() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=60);
        let span = rng.random_range(1..=12);
        let raw: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..=span) as f64 * 0.5)
            .collect();
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let sample = tabulate(&raw).map_err(|e| e.to_string())?;
        let a = mid_quantile(&mid_cdf(&sample), p).map_err(|e| e.to_string())?;
        let b =
            population_mid_quantile(&Pmf::from_sample(&sample), p).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    let elapsed = start.elapsed();
    Ok(Outcome {
        pass: worst <= C1_TOL && elapsed < C1_RUNTIME,
        detail: format!(
            "max |sample - population| = {worst:e} over 1000 pairs in {}",
            secs(elapsed)
        ),
    })
}

/// Average true mid-quantiles over a covariate sample given by counts per
/// support point.
fn hbar_from_counts(
    id: ScenarioId,
    support: &[f64],
    counts: &[usize],
    p: f64,
) -> Result<f64, String> {
    let n: usize = counts.iter().sum();
    let mut total = 0.0;
    for (w, c) in support.iter().zip(counts) {
        total += *c as f64 * true_mid_quantile(id, &[*w], p).map_err(|e| e.to_string())?;
    }
    Ok(total / n as f64)
}

fn criterion_2() -> Result<Outcome, String> {
    let start = Instant::now();
    // Models 1a and 2a have mid-quantiles affine in w, so their averages
    // depend on the n = 1000 covariate draw only through its mean. A
    // balanced draw over {0,...,5} with one row moved from 0 to 1 has
    // sum 2497, the mean implied by the reported p = 0.5 entry of model 1a.
    let support: Vec<f64> = (0..6).map(f64::from).collect();
    let mut counts = vec![167, 167, 167, 167, 166, 166];
    counts[0] -= 1;
    counts[1] += 1;
    let mut err_1a: f64 = 0.0;
    let mut err_2a: f64 = 0.0;
    let mut match_1a = true;
    let mut match_2a = true;
    for (l, &p) in DECILES.iter().enumerate() {
        let h1 = hbar_from_counts(ScenarioId::S1a, &support, &counts, p)?;
        let h2 = hbar_from_counts(ScenarioId::S2a, &support, &counts, p)?;
        err_1a = err_1a.max((h1 - TABLE1_HBAR[l]).abs());
        err_2a = err_2a.max((h2 - TABLE2_HBAR[l]).abs());
        match_1a &= same_to_3dp(h1, TABLE1_HBAR[l]);
        match_2a &= same_to_3dp(h2, TABLE2_HBAR[l]);
    }
    // Model 3a is nonlinear in w: search every composition of 1000 draws
    // over {1, 2, 3} for one that reproduces the reported column.
    let s3 = [1.0, 2.0, 3.0];
    let per_w: Vec<Vec<f64>> = s3
        .iter()
        .map(|w| {
            DECILES
                .iter()
                .map(|&p| true_mid_quantile(ScenarioId::S3a, &[*w], p).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut best = (f64::INFINITY, [0usize; 3]);
    let mut match_3a = false;
    for n1 in 0..=1000usize {
        for n2 in 0..=(1000 - n1) {
            let n3 = 1000 - n1 - n2;
            let mut worst: f64 = 0.0;
            let mut all = true;
            for l in 0..DECILES.len() {
                let h =
                    (n1 as f64 * per_w[0][l] + n2 as f64 * per_w[1][l] + n3 as f64 * per_w[2][l])
                        / 1000.0;
                worst = worst.max((h - TABLE3_HBAR[l]).abs());
                all &= same_to_3dp(h, TABLE3_HBAR[l]);
            }
            match_3a |= all;
            if worst < best.0 {
                best = (worst, [n1, n2, n3]);
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome {
        pass: match_1a && match_2a && match_3a && elapsed < C2_RUNTIME,
        detail: format!(
            "3-decimal match 1a {match_1a} (max err {err_1a:.1e}), 2a {match_2a} (max err {err_2a:.1e}); \
             3a {match_3a}, closest covariate composition {:?} is off by up to {:.3}; {}",
            best.1,
            best.0,
            secs(elapsed)
        ),
    })
}

/// Whether `value` rounds to the three-decimal `reported` entry. Exact
/// decimal ties (a trailing 5 in the fourth place) round either way, and
/// binary representation error of the tie is allowed for.
fn same_to_3dp(value: f64, reported: f64) -> bool {
    (value - reported).abs() <= 5e-4 + 1e-9
}

fn study(id: ScenarioId, n: usize, r: usize) -> Result<(MetricsTable, Duration), String> {
    let start = Instant::now();
    let spec = ScenarioSpec::new(id, n, SEED).map_err(|e| e.to_string())?;
    let table = run_study(
        &spec,
        r,
        &DECILES,
        &COVERAGE_LEVELS,
        &MidQrEstimator::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok((table, start.elapsed()))
}

fn row(t: &MetricsTable, p: f64) -> Result<&midqr::sim::MetricsRow, String> {
    t.row(p).ok_or_else(|| format!("level {p} missing"))
}

fn criterion_3(t: &MetricsTable, elapsed: Duration) -> Result<Outcome, String> {
    let mut pass = elapsed < Duration::from_secs(600);
    let mut cells = Vec::new();
    for (l, &p) in COVERAGE_LEVELS.iter().enumerate() {
        let r = row(t, p)?;
        let ok = r.bias.abs() <= C3_BIAS && (r.rmse / C3_RMSE_REF[l] - 1.0).abs() <= C3_RMSE_REL;
        pass &= ok;
        cells.push(format!(
            "p={p}: bias {:.3} rmse {:.3} (ref {:.3})",
            r.bias, r.rmse, C3_RMSE_REF[l]
        ));
    }
    Ok(Outcome {
        pass,
        detail: format!("1a n=500 R=200: {}; {}", cells.join(", "), secs(elapsed)),
    })
}

fn criterion_4(t: &MetricsTable) -> Result<Outcome, String> {
    let mut pass = true;
    let mut cells = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (l, &p) in COVERAGE_LEVELS.iter().enumerate() {
        let b = row(t, p)?.bias;
        pass &= b > 0.0 && (b / C4_REF[l] - 1.0).abs() <= C4_REL && b > prev;
        prev = b;
        cells.push(format!("p={p}: {b:.3} (ref {:.3})", C4_REF[l]));
    }
    Ok(Outcome {
        pass,
        detail: format!("3a n=500 R=200 bias {}", cells.join(", ")),
    })
}

fn criterion_5(t3: &MetricsTable, t1: &MetricsTable) -> Result<Outcome, String> {
    let c3 = row(t3, 0.5)?.coverage.ok_or("no coverage for 3a")?;
    let c1 = row(t1, 0.5)?.coverage.ok_or("no coverage for 1a")?;
    let ok3 = (C5_3A.0..=C5_3A.1).contains(&c3);
    let ok1 = (C5_1A.0..=C5_1A.1).contains(&c1);
    Ok(Outcome {
        pass: ok3 && ok1,
        detail: format!(
            "R=500 n=500 p=0.5 coverage: 3a {c3:.1}% ({}), 1a {c1:.1}% ({})",
            if ok3 { "in range" } else { "out of range" },
            if ok1 { "in range" } else { "out of range" }
        ),
    })
}

fn criterion_6(t: &MetricsTable) -> Result<Outcome, String> {
    let v = row(t, 0.5)?.slope_variance;
    let ratio = v / C6_REF;
    Ok(Outcome {
        pass: (1.0 / C6_FACTOR..=C6_FACTOR).contains(&ratio),
        detail: format!(
            "3a n=500 R=200 p=0.5 slope variance {v:.3e} = {ratio:.2} x reference {C6_REF:.3e}"
        ),
    })
}

/// Saturated instance: dummy-coded groups sharing one mid-probability row,
/// where the closed form attains a zero objective.
struct Instance {
    x: DMatrix<f64>,
    mid: ConditionalMidCdfMatrix,
    h: Transformation,
}

fn saturated_instance(rng: &mut ChaCha8Rng) -> Result<Instance, String> {
    let groups = rng.random_range(1..=4);
    let link = rng.random_range(0..3);
    let (h, k) = match link {
        0 => (Transformation::Identity, rng.random_range(2..=8)),
        1 => (Transformation::log(), rng.random_range(2..=8)),
        _ => (Transformation::Logit, 2),
    };
    let grid = match link {
        0 => {
            let start = rng.random_range(-5.0..5.0);
            random_grid(rng, k, start)
        }
        1 => {
            let start = rng.random_range(0.5..3.0);
            random_grid(rng, k, start)
        }
        _ => vec![0.0, 1.0],
    };
    let rows: Vec<Vec<f64>> = (0..groups).map(|_| random_mid_row(rng, k, 0.25)).collect();
    let mut pi = Vec::new();
    let mut design = Vec::new();
    for (g, row) in rows.iter().enumerate() {
        for _ in 0..rng.random_range(1..=6) {
            pi.extend_from_slice(row);
            let mut x = vec![0.0; groups];
            x[0] = 1.0;
            if g > 0 {
                x[g] = 1.0;
            }
            design.push(x);
        }
    }
    let n = design.len();
    let x = DMatrix::from_fn(n, groups, |i, j| design[i][j]);
    let varpi = vec![0.0; pi.len()];
    let mid = ConditionalMidCdfMatrix::from_rows(grid, pi, varpi).map_err(|e| e.to_string())?;
    Ok(Instance { x, mid, h })
}

fn criterion_7() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = saturated_instance(&mut rng)?;
        let range = admissible_range(&inst.mid);
        if range.is_empty() {
            return Err("generated an empty admissible range".into());
        }
        let pick =
            |rng: &mut ChaCha8Rng| range.lo + (range.hi - range.lo) * rng.random_range(0.02..0.98);
        let p = pick(&mut rng);
        let ls = LeastSquares::new(&inst.x).map_err(|e| e.to_string())?;
        let cf = closed_form_with(&ls, &inst.mid, p, &inst.h).map_err(|e| e.to_string())?;
        // Start from the closed form at another level, not at the answer.
        let start =
            closed_form_with(&ls, &inst.mid, pick(&mut rng), &inst.h).map_err(|e| e.to_string())?;
        let nf = numerical_fit(&inst.x, &inst.mid, p, &inst.h, Some(&start.beta))
            .map_err(|e| e.to_string())?;
        let d = (&nf.beta - &cf.beta).amax();
        worst = worst.max(d);
    }
    Ok(Outcome {
        pass: worst <= C7_TOL,
        detail: format!("max inf-norm |numerical - closed form| = {worst:.2e} over 100 instances"),
    })
}

/// Non-saturated instance with a private mid-probability row per
/// observation and a continuous covariate.
fn derivative_instance(rng: &mut ChaCha8Rng) -> Result<Instance, String> {
    let n = rng.random_range(8..=30);
    let k = rng.random_range(3..=8);
    let h = if rng.random_bool(0.5) {
        Transformation::Identity
    } else {
        Transformation::log()
    };
    let grid = random_grid(rng, k, 1.0);
    let mut pi = Vec::new();
    for _ in 0..n {
        pi.extend(random_mid_row(rng, k, 0.25));
    }
    let x = DMatrix::from_fn(n, 2, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let varpi = vec![0.0; pi.len()];
    let mid = ConditionalMidCdfMatrix::from_rows(grid, pi, varpi).map_err(|e| e.to_string())?;
    Ok(Instance { x, mid, h })
}

/// Random coefficients whose fitted values stay inside the grid and away
/// from every knot, where the objective is twice differentiable.
fn smooth_point(rng: &mut ChaCha8Rng, inst: &Instance) -> Option<DVector<f64>> {
    let grid = inst.mid.grid();
    let (z1, zk) = (grid[0], grid[grid.len() - 1]);
    for _ in 0..10_000 {
        let centre = rng.random_range(z1..zk);
        let slope = rng.random_range(-0.3..0.3) * (zk - z1);
        let (Some(a), Some(b)) = (inst.h.h(centre), inst.h.h(centre + slope)) else {
            continue;
        };
        let beta = DVector::from_vec(vec![a, b - a]);
        let eta = &inst.x * &beta;
        let ok = eta.iter().all(|e| {
            let y = inst.h.hinv(*e);
            y > z1 + 1e-3 && y < zk - 1e-3 && grid.iter().all(|z| (y - z).abs() > 1e-3)
        });
        if ok {
            return Some(beta);
        }
    }
    None
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn criterion_8() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut g_worst, mut h_worst, mut exact_worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut identity_instances = 0;
    for _ in 0..20 {
        let inst = derivative_instance(&mut rng)?;
        let p = rng.random_range(0.2..0.8);
        let (x, mid, h) = (&inst.x, &inst.mid, &inst.h);
        for _ in 0..20 {
            let beta = smooth_point(&mut rng, &inst).ok_or("no smooth point found")?;
            let g = gradient(&beta, x, mid, p, h);
            let hs = hessian(&beta, x, mid, p, h);
            for j in 0..beta.len() {
                let s = 1e-6 * beta[j].abs().max(1.0);
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += s;
                dn[j] -= s;
                let fd = (midqr::fit::objective(&up, x, mid, p, h)
                    - midqr::fit::objective(&dn, x, mid, p, h))
                    / (2.0 * s);
                g_worst = g_worst.max(rel_err(g[j], fd));
                let dg = (gradient(&up, x, mid, p, h) - gradient(&dn, x, mid, p, h)) / (2.0 * s);
                for i in 0..beta.len() {
                    h_worst = h_worst.max(rel_err(hs[(i, j)], dg[i]));
                }
            }
            if *h == Transformation::Identity {
                let eta = x * &beta;
                let b = DVector::from_iterator(
                    x.nrows(),
                    (0..x.nrows())
                        .map(|i| InterpolatedMidCdf::from_matrix(mid, i).slope_at(eta[i])),
                );
                let xb = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * b[i]);
                let expected = xb.transpose() * &xb * (2.0 / x.nrows() as f64);
                let scale = expected.amax();
                exact_worst = exact_worst.max((&hs - &expected).amax() / scale);
            }
        }
        if inst.h == Transformation::Identity {
            identity_instances += 1;
        }
    }
    Ok(Outcome {
        pass: g_worst <= C8_GRAD_REL && h_worst <= C8_HESS_REL && exact_worst <= C8_EXACT_REL && identity_instances > 0,
        detail: format!(
            "gradient rel err {g_worst:.2e}, Hessian rel err {h_worst:.2e}, identity (2/n)X'B^2X rel err {exact_worst:.2e} on {identity_instances} instances; 400 points"
        ),
    })
}

fn criterion_9() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut fitted = 0;
    let mut nnz_ok = true;
    let mut max_ratio: f64 = 0.0;
    let mut max_change: f64 = 0.0;
    let kinds = [
        CovariateKind::Unordered,
        CovariateKind::Ordered,
        CovariateKind::Continuous,
    ];
    for t in 0..60 {
        let n = rng.random_range(30..=120);
        let kind = kinds[t % 3];
        let w: Vec<f64> = (0..n)
            .map(|_| match kind {
                CovariateKind::Continuous => rng.random_range(0.0..4.0),
                _ => rng.random_range(0..4) as f64,
            })
            .collect();
        let y: Vec<f64> = w
            .iter()
            .map(|wi| (wi.floor() + rng.random_range(0..6) as f64).floor())
            .collect();
        let cov = DMatrix::from_column_slice(n, 1, &w);
        let spec = CovariateSpec::new(vec![kind], &cov).map_err(|e| e.to_string())?;
        let step = match first_step(&y, &cov, &spec, &BandwidthChoice::RuleOfThumb) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { w[i] });
        let ls = LeastSquares::new(&x).map_err(|e| e.to_string())?;
        let h = Transformation::Identity;
        for p in COVERAGE_LEVELS {
            let Ok(fit) = closed_form_with(&ls, &step.mid, p, &h) else {
                continue;
            };
            let jac =
                jacobian_beta_wrt_pi(&ls, &step.mid, p, &h, &fit).map_err(|e| e.to_string())?;
            let q = x.ncols();
            fitted += 1;
            nnz_ok &= jac.nnz() <= 2 * n * q;
            max_ratio = max_ratio.max(jac.nnz() as f64 / (2 * n * q) as f64);

            // Move every entry outside each row's bracket by under a
            // quarter of its smallest neighbouring gap.
            let k = step.mid.k();
            let mut pi = step.mid.pi().to_vec();
            for i in 0..n {
                let row = step.mid.row(i);
                let seg = fit.brackets[i].segment;
                for j in 0..k {
                    if j == seg || j == seg + 1 {
                        continue;
                    }
                    let left = if j == 0 { row[0] } else { row[j] - row[j - 1] };
                    let right = if j + 1 == k {
                        1.0 - row[j]
                    } else {
                        row[j + 1] - row[j]
                    };
                    pi[i * k + j] = row[j] + 0.25 * rng.random_range(-1.0..1.0) * left.min(right);
                }
            }
            let perturbed = ConditionalMidCdfMatrix::from_rows(
                step.mid.grid().to_vec(),
                pi,
                step.mid.varpi().to_vec(),
            )
            .map_err(|e| e.to_string())?;
            let refit = closed_form_with(&ls, &perturbed, p, &h).map_err(|e| e.to_string())?;
            max_change = max_change.max((&refit.beta - &fit.beta).amax());
        }
    }
    Ok(Outcome {
        pass: fitted > 0 && nnz_ok && max_change == 0.0,
        detail: format!(
            "{fitted} fits; max nnz / 2nq = {max_ratio:.3}; max |change in beta| after perturbing non-bracket entries = {max_change:e}"
        ),
    })
}

fn criterion_10() -> Result<Outcome, String> {
    let data =
        generate(&ScenarioSpec::new(ScenarioId::S4a, 1000, SEED).map_err(|e| e.to_string())?);
    let spec = CovariateSpec::new(vec![CovariateKind::Unordered], &data.covariates)
        .map_err(|e| e.to_string())?;
    let config = FitConfig {
        transformation: Transformation::Logit,
        variance: VarianceChoice::None,
        allow_numerical: true,
        ..FitConfig::default()
    };
    let model = fit_model(
        &data.y,
        &data.covariates,
        &spec,
        &data.design(),
        &[0.5],
        &config,
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for w in 0..=5 {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, w as f64]);
        let fitted = model
            .predict(&x, 0.5, PredictionScale::Response)
            .map_err(|e| e.to_string())?[0];
        let mu = true_mid_quantile(ScenarioId::S4a, &[w as f64], 0.5).map_err(|e| e.to_string())?;
        worst = worst.max((fitted - mu).abs());
        cells.push(format!("{:+.3}", fitted - mu));
    }
    Ok(Outcome {
        pass: worst <= C10_TOL,
        detail: format!(
            "4a n=1000 {} fit, errors at w=0..5 [{}], max {worst:.4}",
            model.levels[0].method.as_str(),
            cells.join(", ")
        ),
    })
}

fn criterion_11() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut const_exact = true;
    let mut limit_worst: f64 = 0.0;
    for t in 0..20 {
        let n = rng.random_range(10..=80);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let marginal = mid_cdf(&tabulate(&y).map_err(|e| e.to_string())?);

        // Constant covariate: every kernel weight is equal.
        let cov = DMatrix::from_element(n, 1, 2.0);
        for (kind, lambda) in [
            (CovariateKind::Ordered, 0.4),
            (CovariateKind::Continuous, 0.7),
        ] {
            let spec = CovariateSpec::new(vec![kind], &cov).map_err(|e| e.to_string())?;
            let cdf = conditional_cdf(&y, &cov, &Bandwidths::new(vec![lambda]), &spec)
                .map_err(|e| e.to_string())?;
            let mid = conditional_mid_probabilities(&cdf);
            const_exact &= (0..n).all(|i| mid.row(i) == marginal.midprobs());
        }

        // Uniform-smoothing limit of a discrete covariate.
        let c = 2 + t % 4;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0..c) as f64).collect();
        let cov = DMatrix::from_column_slice(n, 1, &w);
        for kind in [CovariateKind::Unordered, CovariateKind::Ordered] {
            let spec = CovariateSpec::new(vec![kind], &cov).map_err(|e| e.to_string())?;
            let lambda = spec.max_discrete_bandwidth(0);
            let cdf = conditional_cdf(&y, &cov, &Bandwidths::new(vec![lambda]), &spec)
                .map_err(|e| e.to_string())?;
            let mid = conditional_mid_probabilities(&cdf);
            for i in 0..n {
                for (a, b) in mid.row(i).iter().zip(marginal.midprobs()) {
                    limit_worst = limit_worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(Outcome {
        pass: const_exact && limit_worst <= C11_TOL,
        detail: format!(
            "constant covariate equals marginal exactly: {const_exact}; max deviation at the uniform-smoothing limit {limit_worst:.2e}"
        ),
    })
}

fn main() {
    // `cargo test --test acceptance -- 3 7` runs only the listed criteria;
    // a non-numeric libtest filter that does not name this target skips it.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if !args.is_empty()
        && selected.is_empty()
        && !args.iter().any(|a| "acceptance".contains(a.as_str()))
    {
        return;
    }
    let want = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut errors = 0;
    if want(1) {
        report(1, "marginal oracle equivalence", criterion_1(), &mut errors);
    }
    if want(2) {
        report(
            2,
            "average true mid-quantile columns",
            criterion_2(),
            &mut errors,
        );
    }
    if want(3) {
        let out = study(ScenarioId::S1a, 500, 200).and_then(|(t, d)| criterion_3(&t, d));
        report(3, "desk-scale 1a bias and RMSE", out, &mut errors);
    }
    let s3 = if want(4) || want(6) {
        Some(study(ScenarioId::S3a, 500, 200))
    } else {
        None
    };
    if want(4) {
        let out = s3.clone().unwrap().and_then(|(t, _)| criterion_4(&t));
        report(4, "desk-scale 3a bias pattern", out, &mut errors);
    }
    if want(5) {
        let out = study(ScenarioId::S3a, 500, 500)
            .and_then(|(t3, _)| study(ScenarioId::S1a, 500, 500).map(|(t1, _)| (t3, t1)))
            .and_then(|(t3, t1)| criterion_5(&t3, &t1));
        report(5, "slope coverage", out, &mut errors);
    }
    if want(6) {
        let out = s3.unwrap().and_then(|(t, _)| criterion_6(&t));
        report(6, "slope variance magnitude", out, &mut errors);
    }
    let rest: [(usize, &str, fn() -> Result<Outcome, String>); 5] = [
        (7, "closed form equals optimizer", criterion_7),
        (8, "derivative suite", criterion_8),
        (9, "structural sparsity", criterion_9),
        (10, "binary mid-median reduction", criterion_10),
        (11, "kernel reductions", criterion_11),
    ];
    for (id, name, check) in rest {
        if want(id) {
            report(id, name, check(), &mut errors);
        }
    }
    if errors > 0 {
        std::process::exit(1);
    }
}
