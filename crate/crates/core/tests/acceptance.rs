//! Acceptance suite: one check per headline criterion, each printed as a
//! PASS/FAIL line with the measured values. Runs without the libtest
//! harness so the lines always show; exits nonzero if any check fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use marketscope::catalog::ResourceCatalog;
use marketscope::crawl::{run_campaign, CrawlParams, MissingnessPattern};
use marketscope::dataset::{availability_table, check_labels, diagonalize, enrich, reservation_audit, WdiTable};
use marketscope::glmm::{
    calibrate_threshold, cross_validate_auc, fit, GlmmData, GlmmOptions, Design,
};
use marketscope::market::{generate_market, MarketConfig};
use marketscope::mfa::{profile_groups, profile_table, score_correlations, Column, GroupKind, GroupSpec, MfaModel, Table};
use marketscope::pipeline::{crawl, ground_truth, load_wdi, reconstruct, run_experiment, simulate, ExperimentConfig, RunContext, EXPECTED};
use marketscope::reconstruct::{nearest_donors, simulate_listing};
use marketscope::report::scale_factor;
use marketscope::stats::{logistic, rank_sum, roc_auc, signed_rank};
use marketscope::util::rng_stream;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Criteria listed in `ACCEPTANCE_ONLY` (comma separated), or all.
fn selected(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

/// Run a check and fold its wall time against the budget into the verdict.
/// Unselected checks are skipped and count as passing.
fn check(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    if !selected(id) {
        println!("[SKIP] {id:>2} {name}");
        return true;
    }
    let t = Instant::now();
    let o = f();
    let elapsed = t.elapsed();
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    let timing = if in_time {
        format!("{elapsed:.2?}")
    } else {
        format!("{elapsed:.2?} over budget {budget:?}")
    };
    println!("[{}] {id:>2} {name}: {} ({timing})", if pass { "PASS" } else { "FAIL" }, o.detail);
    pass
}

fn c1_scale_factor() -> Outcome {
    let t = Instant::now();
    let f = scale_factor(0.1758, 0.49).expect("valid arguments");
    let fast = t.elapsed() < Duration::from_millis(1);
    outcome((11.10..=11.20).contains(&f) && fast, format!("factor {f:.4}"))
}

fn c2_diagonalization(trace: &marketscope::market::MarketTrace) -> Outcome {
    let mut ds = run_campaign(trace, &CrawlParams::default()).expect("campaign");
    MissingnessPattern::paper_like(trace.n_days, 1).apply(&mut ds);
    let t = Instant::now();
    let table = availability_table(&ds);
    let fast = t.elapsed() < Duration::from_secs(1);
    let (_, row) = table[0];
    let got = [
        100.0 * row.days_fraction(),
        100.0 * row.profiles_fraction(),
        100.0 * row.sales_fraction(),
    ];
    let want = [94.4, 93.5, 58.2];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.1);
    outcome(
        ok && fast,
        format!("n=1 row days {:.2}% profiles {:.2}% sales {:.2}% (targets 94.4/93.5/58.2 within 0.1)", got[0], got[1], got[2]),
    )
}

/// Cyclic Jacobi eigensolver; descending eigenvalues with column vectors.
fn jacobi(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (vals, vecs)
}

/// Dense construction of the weighted analysis from raw columns:
/// log1p-standardized numeric blocks, indicator blocks scaled by level
/// frequency, each block divided by its own leading eigenvalue.
fn brute_force(groups: &[(bool, Vec<Vec<f64>>)], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let nf = n as f64;
    let cov = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        cols.iter()
            .map(|a| cols.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (nf - 1.0)).collect())
            .collect()
    };
    let mut weighted: Vec<Vec<f64>> = Vec::new();
    for (cat, cols) in groups {
        let mut block: Vec<Vec<f64>> = Vec::new();
        for col in cols {
            if *cat {
                let levels: BTreeSet<i64> = col.iter().map(|&x| x as i64).collect();
                for l in levels {
                    let y: Vec<f64> = col.iter().map(|&x| f64::from(u8::from(x as i64 == l))).collect();
                    let p = y.iter().sum::<f64>() / nf;
                    block.push(y.iter().map(|v| (v - p) / p.sqrt()).collect());
                }
            } else {
                let t: Vec<f64> = col.iter().map(|x| x.ln_1p()).collect();
                let m = t.iter().sum::<f64>() / nf;
                let s = (t.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
                block.push(t.iter().map(|x| (x - m) / s).collect());
            }
        }
        let (gv, _) = jacobi(&cov(&block));
        let w = (1.0 / gv[0]).sqrt();
        weighted.extend(block.into_iter().map(|c| c.into_iter().map(|x| x * w).collect::<Vec<_>>()));
    }
    let (vals, mut vecs) = jacobi(&cov(&weighted));
    let keep = vals.iter().take_while(|&&v| v > 1e-10 * vals[0]).count();
    vecs.truncate(keep);
    for v in vecs.iter_mut() {
        let best = (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        if v[best] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let scores = (0..n)
        .map(|i| vecs.iter().map(|v| weighted.iter().zip(v).map(|(col, l)| col[i] * l).sum()).collect())
        .collect();
    (vals[..keep].to_vec(), scores)
}

fn c3_mfa_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for case in 0..20u64 {
        let mut rng = rng_stream(300 + case, 0);
        let n = rng.gen_range(6..=10);
        let n_groups = rng.gen_range(2..=3);
        let with_cat = rng.gen_bool(0.5);
        let budget = 6 - usize::from(with_cat);
        let numeric_groups = n_groups - usize::from(with_cat);
        let mut sizes = vec![1; numeric_groups];
        for _ in numeric_groups..budget {
            if rng.gen_bool(0.5) {
                let g = rng.gen_range(0..numeric_groups);
                sizes[g] += 1;
            }
        }
        let mut table = Table::new();
        let mut specs = Vec::new();
        let mut raw = Vec::new();
        for (g, &k) in sizes.iter().enumerate() {
            let mut names = Vec::new();
            let mut cols = Vec::new();
            for j in 0..k {
                let name = format!("g{g}v{j}");
                let col: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0_f64).round()).collect();
                table = table.with(&name, Column::Numeric(col.clone()));
                names.push(name);
                cols.push(col);
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            specs.push(GroupSpec::new(&format!("G{g}"), GroupKind::Numeric, &refs));
            raw.push((false, cols));
        }
        if with_cat {
            let codes: Vec<f64> = (0..n).map(|i| if i < 3 { i as f64 } else { f64::from(rng.gen_range(0..3u8)) }).collect();
            table = table.with("cat", Column::Categorical(codes.iter().map(|c| format!("L{c}")).collect()));
            specs.push(GroupSpec::new("C", GroupKind::Categorical, &["cat"]));
            raw.push((true, vec![codes]));
        }
        let model = MfaModel::fit(&table, &specs).expect("mfa fit");
        let scores = model.project(&table).expect("projection");
        let (vals, oracle_scores) = brute_force(&raw, n);
        if model.n_dims() != vals.len() {
            mismatched += 1;
            continue;
        }
        for (a, b) in model.eigenvalues.iter().zip(&vals) {
            worst = worst.max((a - b).abs() / vals[0]);
        }
        let scale = oracle_scores.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        for (i, row) in oracle_scores.iter().enumerate() {
            for (d, o) in row.iter().enumerate() {
                worst = worst.max((scores[(i, d)] - o).abs() / scale);
            }
        }
    }
    outcome(
        mismatched == 0 && worst < 1e-10,
        format!("20 tables, worst relative deviation {worst:.2e}, rank mismatches {mismatched}"),
    )
}

fn c4_mfa_scale(trace: &marketscope::market::MarketTrace) -> Outcome {
    let profiles: Vec<_> = trace.appearances.values().flatten().map(|a| a.profile.clone()).take(20_000).collect();
    let (mut enriched, _) = enrich(&profiles, &ResourceCatalog::synthetic(), &WdiTable::builtin());
    enriched.truncate(12_149);
    if enriched.len() < 12_149 {
        return outcome(false, format!("only {} profiles available", enriched.len()));
    }
    let table = profile_table(&enriched).expect("table");
    let model = MfaModel::fit(&table, &profile_groups()).expect("fit");
    let scores = model.project(&table).expect("projection");
    let r = score_correlations(&scores);
    let mut worst: f64 = 0.0;
    for i in 0..r.nrows() {
        for j in 0..i {
            worst = worst.max(r[(i, j)].abs());
        }
    }
    let total: f64 = model.variance_table().iter().map(|v| 100.0 * v.fraction).sum();
    outcome(
        worst < 1e-6 && (total - 100.0).abs() < 1e-9,
        format!("{} rows, {} dims, max |r| {worst:.2e}, variance sum {total:.12}%", scores.nrows(), scores.ncols()),
    )
}

/// Variance shares (%) of the 19 MFA dimensions at paper scale.
const DIM_SHARES: [f64; 19] = [
    18.41, 11.02, 9.57, 9.37, 9.08, 8.83, 8.28, 7.37, 7.31, 2.58, 2.37, 1.47, 1.23, 1.10, 0.63, 0.48, 0.37, 0.35, 0.18,
];
const TOTAL_INERTIA: f64 = 10.3;
/// Fitted dimensions (1-based) in model order and their coefficients.
const FIT_DIMS: [usize; 16] = [8, 2, 13, 9, 4, 6, 5, 12, 11, 1, 10, 18, 3, 14, 17, 7];
const FIT_BETA: [f64; 16] = [
    0.62, -0.41, 1.02, 0.32, 0.19, 0.38, -0.17, -0.52, 0.44, 0.06, 0.28, -0.76, -0.35, -0.30, 0.38, 0.09,
];
const FIT_C: f64 = -2.51;
const FIT_SIGMA: f64 = 0.25;

fn paper_regime_data(seed: u64, n: usize, clusters: u32) -> GlmmData {
    let mut rng = rng_stream(seed, 0);
    let effects: Vec<f64> = (0..clusters).map(|_| FIT_SIGMA * rng.sample::<f64, _>(StandardNormal)).collect();
    let sd: Vec<f64> = DIM_SHARES.iter().map(|s| (TOTAL_INERTIA * s / 100.0).sqrt()).collect();
    let mut scores = DMatrix::zeros(n, FIT_DIMS.len());
    let mut sold = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    for i in 0..n {
        let j = (i as u32) % clusters;
        let mut eta = FIT_C + effects[j as usize];
        for (k, (&d, &b)) in FIT_DIMS.iter().zip(&FIT_BETA).enumerate() {
            let x = sd[d - 1] * rng.sample::<f64, _>(StandardNormal);
            scores[(i, k)] = x;
            eta += b * x;
        }
        sold.push(rng.gen::<f64>() < logistic(eta));
        cluster.push(j);
    }
    GlmmData::new(scores, sold, cluster).expect("valid data")
}

/// Plain logistic regression by Newton iterations.
fn irls(data: &GlmmData, dims: &[usize]) -> Vec<f64> {
    let n = data.len();
    let q = dims.len() + 1;
    let x = DMatrix::from_fn(n, q, |i, k| if k == 0 { 1.0 } else { data.scores[(i, dims[k - 1])] });
    let y = nalgebra::DVector::from_iterator(n, data.sold.iter().map(|&s| f64::from(u8::from(s))));
    let mut b = nalgebra::DVector::zeros(q);
    for _ in 0..100 {
        let p = (&x * &b).map(logistic);
        let w = p.map(|v| v * (1.0 - v));
        let xtw = DMatrix::from_fn(q, n, |k, i| x[(i, k)] * w[i]);
        let step = (&xtw * &x).lu().solve(&(x.transpose() * (&y - &p))).expect("nonsingular");
        b += &step;
        if step.norm() < 1e-14 {
            break;
        }
    }
    b.iter().copied().collect()
}

fn c5_glmm_recovery() -> Outcome {
    let dims: Vec<usize> = (0..FIT_DIMS.len()).collect();
    let truth: Vec<f64> = std::iter::once(FIT_C).chain(FIT_BETA).collect();
    let opts = GlmmOptions::default();
    // per parameter: replications whose estimate lies within 3 SE of truth
    let mut covered = vec![0usize; truth.len() + 1];
    let mut failed = 0;
    for r in 0..100 {
        let data = paper_regime_data(5000 + r, 11_357, 101);
        let Ok(f) = fit(&data, &dims, &opts) else {
            failed += 1;
            continue;
        };
        for (k, (c, t)) in f.coefficients.iter().zip(&truth).enumerate() {
            if (c.estimate - t).abs() <= 3.0 * c.se {
                covered[k] += 1;
            }
        }
        if f.sigma_se.is_some_and(|se| (f.sigma - FIT_SIGMA).abs() <= 3.0 * se) {
            covered[truth.len()] += 1;
        }
    }
    let min_cover = covered.iter().copied().min().unwrap_or(0);

    let small = paper_regime_data(77, 3000, 30);
    let reduced = fit(&small, &[0, 1, 2], &GlmmOptions { fix_sigma_zero: true, ..GlmmOptions::default() }).expect("fit");
    let oracle = irls(&small, &[0, 1, 2]);
    let logit_dev = reduced
        .coefficients
        .iter()
        .zip(&oracle)
        .map(|(c, o)| (c.estimate - o).abs())
        .fold(0.0, f64::max);

    let design = Design::new(&small, &[0, 1, 2], false).expect("design");
    let mut rng = rng_stream(78, 0);
    let mut grad_dev: f64 = 0.0;
    for _ in 0..10 {
        let theta: Vec<f64> = (0..design.n_params())
            .map(|k| if k + 1 == design.n_params() { rng.gen_range(0.1..1.0) } else { rng.gen_range(-1.0..1.0) })
            .collect();
        let (_, g) = design.loglik_grad(&theta);
        for k in 0..theta.len() {
            let h = 1e-5;
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[k] += h;
            tm[k] -= h;
            let fd = (design.loglik(&tp) - design.loglik(&tm)) / (2.0 * h);
            grad_dev = grad_dev.max((g[k] - fd).abs() / fd.abs().max(1.0));
        }
    }
    outcome(
        failed == 0 && min_cover >= 95 && logit_dev < 1e-6 && grad_dev < 1e-5,
        format!(
            "worst parameter within 3 SE in {min_cover}/100 (failed fits {failed}); sigma=0 vs logistic {logit_dev:.1e}; gradient vs FD {grad_dev:.1e}"
        ),
    )
}

fn c6_threshold() -> Outcome {
    let data = paper_regime_data(600, 60_000, 40);
    let train: Vec<usize> = (0..data.len()).filter(|i| i % 3 != 0).collect();
    let held: Vec<usize> = (0..data.len()).filter(|i| i % 3 == 0).collect();
    let (train, held) = (data.subset(&train), data.subset(&held));
    let dims: Vec<usize> = (0..FIT_DIMS.len()).collect();
    let f = fit(&train, &dims, &GlmmOptions::default()).expect("fit");
    let probs = f.probabilities(&held.scores, Some(&held.cluster)).expect("probabilities");
    let mut ok = true;
    let mut parts = Vec::new();
    for target in [0.95, 0.80] {
        let cal = calibrate_threshold(&f, &train, target).expect("calibration");
        let neg: Vec<f64> = probs.iter().zip(&held.sold).filter(|(_, s)| !**s).map(|(p, _)| *p).collect();
        let pos: Vec<f64> = probs.iter().zip(&held.sold).filter(|(_, s)| **s).map(|(p, _)| *p).collect();
        let tnr = neg.iter().filter(|&&p| p < cal.cutoff).count() as f64 / neg.len() as f64;
        let sens = pos.iter().filter(|&&p| p >= cal.cutoff).count() as f64 / pos.len() as f64;
        ok &= (tnr - target).abs() <= 0.01;
        parts.push(format!("target {target:.2}: held-out TNR {tnr:.4}, sensitivity {sens:.3}"));
    }
    outcome(ok, parts.join("; "))
}

fn c7_auc() -> Outcome {
    let scores: Vec<f64> = (0..200).map(f64::from).collect();
    let labels: Vec<bool> = (0..200).map(|i| i >= 150).collect();
    let separable = roc_auc(&scores, &labels).expect("auc").auc;

    let mut rng = rng_stream(700, 0);
    let n = 600;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sold: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    let cluster: Vec<u32> = (0..n as u32).map(|i| i % 10).collect();
    let data = GlmmData::new(x, sold, cluster).expect("data");
    let cv = cross_validate_auc(&data, &[0, 1], &GlmmOptions::default(), 1000, 2.0 / 3.0, 701).expect("cv");
    outcome(
        separable == 1.0 && (cv.median - 0.5).abs() <= 0.02,
        format!("separable AUC {separable}; independent labels median AUC {:.4} over {} replications", cv.median, cv.used),
    )
}

fn c8_donor_weights() -> Outcome {
    let known: BTreeSet<u32> = [7, 8, 9, 11, 12, 13].into_iter().collect();
    let donors = nearest_donors(10, &known);
    let sizes = vec![50; donors.len()];
    let draws = simulate_listing(10_000, &donors, &sizes, &mut rng_stream(800, 0)).expect("draws");
    let mut counts = [0usize; 3];
    for d in &draws {
        counts[donors[d.donor].distance as usize - 1] += 1;
    }
    let want = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
    let n = draws.len() as f64;
    let z = 2.5758;
    let ok = counts.iter().zip(want).all(|(&c, p)| (c as f64 / n - p).abs() <= z * (p * (1.0 - p) / n).sqrt());
    let shares: Vec<String> = counts.iter().map(|&c| format!("{:.4}", c as f64 / n)).collect();
    outcome(ok, format!("shares at distance 1/2/3: {} (targets 0.5455/0.2727/0.1818)", shares.join("/")))
}

fn c9_ground_truth() -> Outcome {
    let mut covered = 0;
    let mut close = 0;
    let mut bracketed = 0;
    let mut slowest = Duration::ZERO;
    let mut errors = Vec::new();
    for m in 0..100u64 {
        let t = Instant::now();
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9000 + m;
        cfg.analysis.cv_replications = 0;
        cfg.reconstruct.stats_replications = 1000;
        cfg.reconstruct.detailed_replications = 0;
        let cfg = cfg.resolved();
        let run = || -> Result<_, marketscope::pipeline::PipelineError> {
            let (trace, catalog) = simulate(&cfg)?;
            let (raw, truth) = crawl(&cfg, &trace)?;
            let wdi = load_wdi(&cfg)?;
            let prepared = marketscope::pipeline::prep(&cfg, &raw, &catalog)?;
            let mfa = marketscope::pipeline::mfa(&prepared)?;
            let fitted = marketscope::pipeline::fit(&cfg, &prepared, &mfa)?;
            let recon = reconstruct(&cfg, &prepared, &mfa, &fitted)?;
            Ok((ground_truth(&trace, &truth, &wdi), recon))
        };
        match run() {
            Ok((truth, recon)) => {
                let sold = truth.sold as f64;
                let e = &recon.batches[EXPECTED].summary.total_sold;
                covered += usize::from(e.contains(sold));
                close += usize::from((e.mean - sold).abs() <= 0.15 * sold);
                let c = &recon.batches["conservative"].summary.total_sold;
                let g = &recon.batches["generous"].summary.total_sold;
                bracketed += usize::from(c.lower <= sold && sold <= g.upper);
            }
            Err(e) => errors.push(format!("market {m}: {e}")),
        }
        slowest = slowest.max(t.elapsed());
    }
    outcome(
        covered >= 85 && close >= 80 && errors.is_empty() && slowest < Duration::from_secs(600),
        format!(
            "95% CI covers truth in {covered}/100, point within 15% in {close}/100, cutoff band brackets truth in {bracketed}/100, slowest market {slowest:.1?}{}",
            if errors.is_empty() { String::new() } else { format!(", errors: {}", errors.join("; ")) }
        ),
    )
}

fn c10_labels() -> Outcome {
    let mut false_sold = 0;
    let mut worst_fraction: f64 = 0.0;
    for seed in 0..10u64 {
        let config = MarketConfig {
            seed: 1000 + seed,
            ..MarketConfig::default()
        };
        let trace = generate_market(&config).expect("market");
        let mut ds = run_campaign(&trace, &CrawlParams { seed: 2000 + seed, ..CrawlParams::default() }).expect("campaign");
        MissingnessPattern::paper_like(trace.n_days, seed).apply(&mut ds);
        for n in 1..=6 {
            let set = diagonalize(&ds, n).expect("diagonalize");
            let c = check_labels(&set, &trace);
            false_sold += c.false_sold;
        }
        worst_fraction = worst_fraction.max(reservation_audit(&ds).expect("audit").fraction);
    }
    outcome(
        false_sold == 0 && worst_fraction <= 0.0208,
        format!("false sold labels {false_sold}; worst reappearance fraction {:.3}%", 100.0 * worst_fraction),
    )
}

fn c11_stats() -> Outcome {
    let rs = rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).expect("rank sum").p_value;
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let y: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
    let sr = signed_rank(&x, &y).expect("signed rank").p_value;
    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).expect("auc").auc;
    outcome(
        rs == 0.1 && sr == 0.03125 && auc == 0.75,
        format!("rank-sum p {rs}, signed-rank p {sr}, AUC {auc}"),
    )
}

fn bundle_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).expect("report dir").map(|e| e.expect("entry").path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).expect("readable");
            (PathBuf::from(p.file_name().expect("file name")), bytes)
        })
        .collect()
}

fn c12_determinism() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden.toml");
    let cfg = ExperimentConfig::load(&golden).expect("golden config");
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut bundles = Vec::new();
    for run in ["first", "second"] {
        let ctx = RunContext::new(cfg.clone(), &tmp.path().join(run));
        let dir = run_experiment(&ctx).expect("golden run");
        bundles.push(bundle_bytes(&dir));
    }
    let bytes: usize = bundles[0].iter().map(|(_, b)| b.len()).sum();
    outcome(
        !bundles[0].is_empty() && bundles[0] == bundles[1],
        format!("{} files, {bytes} bytes, identical: {}", bundles[0].len(), bundles[0] == bundles[1]),
    )
}

fn main() -> ExitCode {
    let trace = generate_market(&MarketConfig::default()).expect("market");
    let secs = Duration::from_secs;
    let results = [
        check(1, "scale factor closed form", secs(1), c1_scale_factor),
        check(2, "diagonalization table", secs(30), || c2_diagonalization(&trace)),
        check(3, "MFA oracle equivalence", secs(5), c3_mfa_oracle),
        check(4, "MFA invariants at scale", secs(30), || c4_mfa_scale(&trace)),
        check(5, "GLMM parameter recovery", secs(300), c5_glmm_recovery),
        check(6, "threshold calibration", secs(10), c6_threshold),
        check(7, "AUC harness", secs(120), c7_auc),
        check(8, "donor weights", secs(5), c8_donor_weights),
        check(9, "ground-truth recovery", secs(100 * 600), c9_ground_truth),
        check(10, "labeling soundness", secs(30), c10_labels),
        check(11, "statistics exactness", secs(1), c11_stats),
        check(12, "determinism", secs(1200), c12_determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed or skipped", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
