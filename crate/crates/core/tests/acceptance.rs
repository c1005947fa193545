//! Acceptance checks. Each test prints one `PASS`/`FAIL` line before
//! asserting, so the test output doubles as a report.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flmarket::aggregation::{
    bias_bound, bias_opt, brute_force_min_bias, brute_force_min_variance, inverse_variance_weights, var_bound, var_opt,
    Aggregator,
};
use flmarket::allin::all_in;
use flmarket::experiments::{run_sweep, MechanismPair, ModelStore, SweepKind, SweepSpec};
use flmarket::ldp::{laplace_perturb, per_coordinate_variance, ClipBound, GradientVector};
use flmarket::market::{owner_utility, Bid, BidProfile, MarketConfig, Scenario, Utility, ValuationFunction};
use flmarket::murba::{
    evaluate, find_misreports, lagrangian_and_gradient, sample_instances, train_mbr, EvalReport, MbrConfig, MbrModel,
    TrainConfig, TrainState,
};
use flmarket::nn::{DenseNetwork, OutputActivation};
use flmarket::sim::{
    evaluate_accuracy, gradient_descent_oracle, run_fl, separable_dataset, synthetic_blobs, Mechanism, SimConfig,
};
use flmarket::Execution;

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let status = if pass { "PASS" } else { "FAIL" };
    // Straight to the handle so the line shows without --nocapture.
    let line = format!("[criterion {id:02}] {status} {name}: {}\n", detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[test]
fn criterion_01_varopt_minimizes_variance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let clip = ClipBound::default();
    let mut worst_rel = 0.0f64;
    let mut worst_gap = f64::NEG_INFINITY;
    for k in 0..200 {
        let n = 2 + k % 2;
        let eps: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.1, 5.0)).collect();
        let got = var_bound(&var_opt(&eps).unwrap(), &eps, clip).to_f64();
        let closed = 8.0 / eps.iter().map(|e| e * e).sum::<f64>();
        worst_rel = worst_rel.max((got - closed).abs() / closed);
        let (_, grid) = brute_force_min_variance(&eps, clip, 0.01).unwrap();
        worst_gap = worst_gap.max(got - grid.to_f64());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_rel <= 1e-12 && worst_gap <= 1e-3 && secs < 60.0;
    report(
        1,
        "VarOpt variance equals 8L^2/sum eps^2 and beats the 0.01 grid",
        pass,
        format!("max rel err {worst_rel:.2e}, max excess over grid {worst_gap:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_biasopt_minimizes_bias() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let clip = ClipBound::default();
    let l = clip.get();
    let mut exact = true;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut with_zeros = 0;
    for _ in 0..200 {
        let mut eps: Vec<f64> = (0..4)
            .map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { uniform(&mut rng, 0.1, 5.0) })
            .collect();
        if eps.iter().all(|&e| e == 0.0) {
            eps[rng.random_range(0..4)] = uniform(&mut rng, 0.1, 5.0);
        }
        with_zeros += eps.contains(&0.0) as usize;
        let winners = eps.iter().filter(|&&e| e > 0.0).count() as f64;
        let got = bias_bound(&bias_opt(&eps).unwrap(), clip);
        let closed = 2.0 * (1.0 - winners / 4.0) * l;
        exact &= got == closed;
        let (_, grid) = brute_force_min_bias(&eps, clip, 0.05).unwrap();
        worst_gap = worst_gap.max(got - grid);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact && worst_gap <= 0.1 * l && with_zeros > 0 && secs < 120.0;
    report(
        2,
        "BiasOpt bias equals 2(1-|W|/n)L and the 0.05 grid finds nothing smaller",
        pass,
        format!("exact={exact}, max excess over grid {worst_gap:.2e}, {with_zeros} vectors with zeros, {secs:.1}s"),
    );
    assert!(pass);
}

/// Uniform point on the simplex (normalized exponentials).
fn simplex_sample(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn criterion_03_inverse_variance_weights_are_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut beaten = 0;
    let mut worst_rel = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=5);
        let v: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.05, 10.0)).collect();
        let objective = |l: &[f64]| l.iter().zip(&v).map(|(a, b)| a * a * b).sum::<f64>();
        let closed = 1.0 / v.iter().map(|x| 1.0 / x).sum::<f64>();
        let w = inverse_variance_weights(&v).unwrap();
        worst_rel = worst_rel.max((objective(&w) - closed).abs() / closed);
        for _ in 0..10_000 {
            if objective(&simplex_sample(&mut rng, n)) < closed * (1.0 - 1e-12) {
                beaten += 1;
            }
        }
    }
    let pass = beaten == 0 && worst_rel <= 1e-12;
    report(
        3,
        "1/sum(1/v) lower-bounds 10^4 random weightings and inverse-variance weights attain it",
        pass,
        format!("{beaten} random weightings below the bound, max rel err {worst_rel:.2e}"),
    );
    assert!(pass);
}

fn step_profile(rng: &mut impl Rng, n: usize, sensitivity: f64) -> BidProfile {
    let bids = (0..n)
        .map(|_| {
            let budget = uniform(rng, 0.5, sensitivity);
            // value of the whole budget under a random continuous family
            let alpha = uniform(rng, 0.5, 1.5);
            let v = match rng.random_range(0..4) {
                0 => 2.0 * alpha * budget,
                1 => alpha * budget * budget,
                2 => 2.0 * alpha * budget.sqrt(),
                _ => alpha * budget.exp_m1(),
            };
            Bid::new(ValuationFunction::step(v, 0.0).unwrap(), budget).unwrap()
        })
        .collect();
    BidProfile::new(bids).unwrap()
}

fn utility_value(u: Utility) -> f64 {
    u.finite().unwrap_or(f64::NEG_INFINITY)
}

#[test]
fn criterion_04_allin_is_truthful_and_individually_rational() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let value_factors = [0.25, 0.5, 0.8, 0.95, 1.05, 1.25, 2.0, 4.0];
    let budget_factors = [0.25, 0.5, 0.8, 0.95, 1.0];
    let (mut truth_viol, mut ir_viol, mut budget_viol, mut misreports) = (0, 0, 0, 0usize);
    for k in 0..1000 {
        let scenario = if k % 2 == 0 { Scenario::Low } else { Scenario::High };
        let profile = step_profile(&mut rng, 10, scenario.sensitivity());
        let budget = uniform(&mut rng, 1.0, 40.0);
        let out = all_in(&profile, budget).unwrap();
        if out.total_payment() > budget + 1e-9 {
            budget_viol += 1;
        }
        for (i, bid) in profile.bids().iter().enumerate() {
            let truthful = utility_value(owner_utility(bid, out.epsilons[i], out.payments[i]).unwrap());
            if truthful < -1e-9 {
                ir_viol += 1;
            }
            for &fv in &value_factors {
                for &fb in &budget_factors {
                    let v = bid.valuation.scale() * fv;
                    let lie = Bid::new(ValuationFunction::step(v, 0.0).unwrap(), bid.privacy_budget * fb).unwrap();
                    let alt = all_in(&profile.with_bid(i, lie), budget).unwrap();
                    let u = utility_value(owner_utility(bid, alt.epsilons[i], alt.payments[i]).unwrap());
                    misreports += 1;
                    if u > truthful + 1e-9 {
                        truth_viol += 1;
                    }
                }
            }
        }
    }
    let big = step_profile(&mut rng, 100_000, 5.0);
    let start = Instant::now();
    let out = all_in(&big, 5_000.0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let big_ok = out.total_payment() <= 5_000.0 + 1e-6;
    let pass = truth_viol == 0 && ir_viol == 0 && budget_viol == 0 && secs < 1.0 && big_ok;
    report(
        4,
        "All-in truthfulness, IR and budget feasibility; n=10^5 timing",
        pass,
        format!(
            "{truth_viol} profitable lies of {misreports}, {ir_viol} IR violations, {budget_viol} budget violations, n=10^5 in {secs:.3}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_laplace_noise_moments() {
    let clip = ClipBound::default();
    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut lines = Vec::new();
    let mut pass = true;
    for eps in [0.5, 1.0, 2.0] {
        let noisy = laplace_perturb(&GradientVector::zeros(draws), eps, clip, &mut rng).unwrap();
        let mean = noisy.iter().sum::<f64>() / draws as f64;
        let var = noisy.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let expected = per_coordinate_variance(eps, clip).unwrap();
        let oracle = 2.0 * (2.0 * clip.get() / eps).powi(2);
        let se = (expected / draws as f64).sqrt();
        let ok = expected == oracle && (var - expected).abs() <= 0.05 * expected && mean.abs() <= 3.0 * se;
        pass &= ok;
        lines.push(format!("eps={eps}: var {var:.4} vs {expected:.4}, mean {mean:.2e} (3se {:.2e})", 3.0 * se));
    }
    report(5, "Laplace variance within 5% and mean within 3 standard errors", pass, lines.join("; "));
    assert!(pass);
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn criterion_06_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut nets_ok = true;
    for k in 0..50 {
        let inputs = rng.random_range(1..6);
        let depth = rng.random_range(0..3);
        let mut sizes = vec![inputs];
        sizes.extend((0..depth).map(|_| rng.random_range(1..7)));
        let (outputs, act) = match k % 3 {
            0 => (rng.random_range(1..5), OutputActivation::None),
            1 => {
                let g = rng.random_range(1..4);
                (g * rng.random_range(1..4), OutputActivation::SoftmaxRows { group: g })
            }
            _ => (rng.random_range(1..5), OutputActivation::SoftmaxVector),
        };
        sizes.push(outputs);
        let net = DenseNetwork::glorot(&sizes, act, &mut rng).unwrap();
        let x: Vec<f64> = (0..inputs).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let up: Vec<f64> = (0..outputs).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let loss = |n: &DenseNetwork, x: &[f64]| n.predict(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();

        let (_, tape) = net.forward(&x).unwrap();
        let (grads, x_grad) = net.backward(tape, &up).unwrap();
        let analytic = grads.flatten();
        let params = net.params_flat();
        for j in 0..params.len() {
            let (mut a, mut b) = (net.clone(), net.clone());
            let mut p = params.clone();
            p[j] += h;
            a.set_params_flat(&p).unwrap();
            p[j] -= 2.0 * h;
            b.set_params_flat(&p).unwrap();
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            worst = worst.max((fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-3));
            nets_ok &= rel_close(fd, analytic[j], 1e-4);
        }
        for j in 0..inputs {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            nets_ok &= rel_close(fd, x_grad[j], 1e-4);
        }
    }

    // Full Lagrangian on a tiny market with fixed misreports.
    let cfg = TrainConfig {
        model: MbrConfig {
            n: 2,
            m: 2,
            hidden: vec![4],
            money_scale: 10.0,
            privacy_scale: 5.0,
        },
        market: MarketConfig::for_scenario(2, 5.0, Scenario::Low, 0),
        budget_range: (2.0, 10.0),
        ..TrainConfig::default()
    };
    let batch = sample_instances(&cfg.market, cfg.budget_range, 4, &mut rng).unwrap();
    let model = MbrModel::new(cfg.model.clone(), &mut rng).unwrap();
    let mut state = TrainState::new(&cfg);
    state.phi_rgv = vec![2.0, 0.5];
    state.phi_irv = vec![1.0, 3.0];
    let clip = ClipBound::default();
    let exec = Execution::Sequential;
    let mis = find_misreports(&model, &batch, 10, 0.1, exec).unwrap();
    let eval = lagrangian_and_gradient(&model, &batch, &mis, &state, clip, exec).unwrap();
    let value = |alloc: &[f64], pay: &[f64]| {
        let (mut a, mut p) = (model.allocation().clone(), model.payment().clone());
        a.set_params_flat(alloc).unwrap();
        p.set_params_flat(pay).unwrap();
        let m = MbrModel::from_networks(cfg.model.clone(), a, p).unwrap();
        lagrangian_and_gradient(&m, &batch, &mis, &state, clip, exec).unwrap().value
    };
    let (a0, p0) = (model.allocation().params_flat(), model.payment().params_flat());
    let mut lag_ok = true;
    let mut lag_worst = 0.0f64;
    let hl = 1e-6;
    for (net, analytic) in [(0, eval.allocation_grad.flatten()), (1, eval.payment_grad.flatten())] {
        let base = if net == 0 { &a0 } else { &p0 };
        for j in 0..base.len() {
            let (mut up, mut dn) = (base.clone(), base.clone());
            up[j] += hl;
            dn[j] -= hl;
            let fd = if net == 0 {
                (value(&up, &p0) - value(&dn, &p0)) / (2.0 * hl)
            } else {
                (value(&a0, &up) - value(&a0, &dn)) / (2.0 * hl)
            };
            lag_worst = lag_worst.max((fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-3));
            lag_ok &= rel_close(fd, analytic[j], 1e-3);
        }
    }
    let pass = nets_ok && lag_ok;
    report(
        6,
        "network and Lagrangian gradients agree with central differences",
        pass,
        format!("50 networks max rel err {worst:.2e}; Lagrangian max rel err {lag_worst:.2e}"),
    );
    assert!(pass);
}

struct DeskModel {
    model: MbrModel,
    report: EvalReport,
    structural_violations: usize,
    minutes: f64,
}

/// The desk-scale model is trained once and shared.
fn desk_model() -> &'static DeskModel {
    static MODEL: OnceLock<DeskModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let cfg = TrainConfig::desk();
        let sample = cfg.training_sample().unwrap();
        let out = train_mbr(&cfg, &sample).unwrap();
        let minutes = start.elapsed().as_secs_f64() / 60.0;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7);
        let held_out = sample_instances(&cfg.market, cfg.budget_range, 1000, &mut rng).unwrap();
        let clip = ClipBound::new(cfg.clip).unwrap();
        let report = evaluate(&out.model, &held_out, 25, 0.1, clip, Execution::Parallel).unwrap();
        let mut structural_violations = 0;
        for inst in &held_out {
            let input = inst.input(cfg.model.m).unwrap();
            let o = out.model.forward(&input).unwrap();
            let total: f64 = o.payments.iter().sum();
            structural_violations += ((total - inst.budget).abs() > 1e-9) as usize;
            for (e, bid) in o.epsilons(&input).iter().zip(inst.profile.bids()) {
                structural_violations += (*e > bid.privacy_budget + 1e-9) as usize;
            }
        }
        DeskModel {
            model: out.model,
            report,
            structural_violations,
            minutes,
        }
    })
}

#[test]
fn criterion_07_desk_scale_murba_is_approximately_truthful() {
    let desk = desk_model();
    let s = desk.report.summary;
    let pass = s.regret_mean <= 0.1
        && s.regret_max <= 0.5
        && s.ir_mean <= 0.05
        && desk.structural_violations == 0
        && desk.minutes < 30.0;
    report(
        7,
        "desk-scale MBR regret and IR on 1000 held-out profiles",
        pass,
        format!(
            "regret mean {:.4} max {:.4}, IR mean {:.4} max {:.4}, {} structural violations, trained in {:.1} min",
            s.regret_mean, s.regret_max, s.ir_mean, s.ir_max, desk.structural_violations, desk.minutes
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_error_bound_falls_with_budget() {
    let spec = SweepSpec {
        kind: SweepKind::ErrBound,
        grid: vec![2.0, 5.0, 10.0, 20.0, 40.0],
        seeds: 20,
        n: 10,
        pairs: vec![MechanismPair {
            mechanism: Mechanism::AllIn,
            aggregator: Aggregator::VarOpt,
        }],
        ..SweepSpec::default()
    };
    let res = run_sweep(&spec, &ModelStore::default()).unwrap();
    let stats: Vec<(f64, f64)> = res
        .aggregates
        .iter()
        .map(|a| (a.mean.err_bound.unwrap(), a.std.err_bound.unwrap()))
        .collect();
    let mut pass = true;
    for w in stats.windows(2) {
        let ((m0, s0), (m1, s1)) = (w[0], w[1]);
        // An infinite mean at the smaller budget cannot be beaten.
        let ok = m0.is_infinite() || (m1.is_finite() && m1 <= m0 + ((s0 * s0 + s1 * s1) / 2.0).sqrt());
        pass &= ok;
    }
    let detail = spec
        .grid
        .iter()
        .zip(&stats)
        .map(|(b, (m, s))| format!("B={b}: {m:.3}+-{s:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(8, "All-in+VarOpt mean error bound non-increasing in budget", pass, detail);
    assert!(pass);
}

#[test]
fn criterion_09_accuracy_trends() {
    let spec = SweepSpec {
        kind: SweepKind::Accuracy,
        grid: vec![2.0, 40.0],
        seeds: 20,
        n: 10,
        ..SweepSpec::default()
    };
    let res = run_sweep(&spec, &ModelStore::default()).unwrap();
    let low = res.aggregates[0].mean.accuracy.unwrap();
    let high = res.aggregates[1].mean.accuracy.unwrap();

    let desk = desk_model();
    let budget = 10.0;
    let mut diffs = Vec::new();
    for seed in 0..20u64 {
        let data = synthetic_blobs(5, 100, seed).unwrap();
        let run = |aggregator| {
            let cfg = SimConfig {
                mechanism: Mechanism::Murba,
                aggregator,
                market: MarketConfig::for_scenario(5, budget, Scenario::Low, seed),
                seed,
                ..SimConfig::default()
            };
            run_fl(&cfg, &data, Some(&desk.model)).unwrap().final_accuracy()
        };
        diffs.push(run(Aggregator::VarOpt) - run(Aggregator::BiasOpt));
    }
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let pass = high > low && mean_diff >= 0.0;
    report(
        9,
        "accuracy rises with budget and MURBA+VarOpt >= MURBA+BiasOpt",
        pass,
        format!(
            "All-in+VarOpt B=2 {low:.4} vs B=40 {high:.4}; MURBA VarOpt-BiasOpt paired mean {mean_diff:+.4} at B={budget}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_noiseless_ablation_matches_gradient_descent() {
    let rounds = 50;
    let lr = SimConfig::default().learning_rate;
    let data = separable_dataset(10, 50, 8, 0.1, 10).unwrap();
    let cfg = SimConfig {
        rounds,
        learning_rate: lr,
        noiseless: true,
        market: MarketConfig::for_scenario(10, 10.0, Scenario::Low, 10),
        ..SimConfig::default()
    };
    let acc = run_fl(&cfg, &data, None).unwrap().final_accuracy();
    let oracle = evaluate_accuracy(&gradient_descent_oracle(&data, rounds, lr).unwrap(), &data).unwrap();
    let pass = acc >= 0.95 && (acc - oracle).abs() <= 0.02;
    report(
        10,
        "noiseless ablation on separable data",
        pass,
        format!("ablation {acc:.4}, gradient-descent oracle {oracle:.4} after {rounds} rounds"),
    );
    assert!(pass);
}
