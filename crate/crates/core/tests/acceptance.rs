//! End-to-end acceptance checks on the shipped scenario and on randomized
//! oracle comparisons. Every test writes one `PASS`/`FAIL` line to stdout.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeform::barrier::lie_derivatives;
use tubeform::certify::{
    baseline_limit, baseline_radius, certify, effective_disturbance, follower_radius, leader_radius,
    rpi_check, Certificate, LyapunovPair, RpiDisturbance,
};
use tubeform::linalg::{eig_extremes, Mat, Vector};
use tubeform::ocp::{kkt_residuals, solve_qp, QpProblem, QpStatus};
use tubeform::scenario::{ScenarioConfig, World};
use tubeform::sim::metrics::{metrics, Metrics};
use tubeform::sim::{simulate, SimConfig, SimOutcome, OCCUPANCY_TOL};

/// Writes past the test harness capture so the verdict is always visible.
fn verdict(id: usize, name: &str, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {word}: {name} ({detail})");
    let _ = out.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn load_world() -> World {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/two_obstacles.toml");
    let text = std::fs::read_to_string(&path).expect("shipped scenario");
    ScenarioConfig::from_toml_str(&text).unwrap().world().unwrap()
}

struct Shipped {
    world: World,
    cert: Certificate,
}

fn shipped() -> &'static Shipped {
    static CELL: OnceLock<Shipped> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = load_world();
        let cert = certify(&world).expect("shipped scenario certifies");
        Shipped { world, cert }
    })
}

struct Run {
    outcome: SimOutcome,
    metrics: Metrics,
    seconds: f64,
}

fn run(baseline: bool) -> Run {
    let s = shipped();
    let mut config = SimConfig::from_settings(&s.world.config.sim);
    config.baseline_margins = baseline;
    let started = Instant::now();
    let outcome = simulate(&s.world, &s.cert, config).expect("simulation completes");
    let seconds = started.elapsed().as_secs_f64();
    let metrics = metrics(&outcome.trace).unwrap();
    Run { outcome, metrics, seconds }
}

fn feedforward_run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| run(false))
}

fn baseline_run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| run(true))
}

fn scalar_pair(lmin_p: f64, lmax_p: f64, lmin_q: f64) -> LyapunovPair {
    LyapunovPair {
        k: Mat::zeros(1, 1),
        acl: Mat::from_element(1, 1, -1.0),
        p: Mat::from_element(1, 1, lmax_p),
        q: Mat::from_element(1, 1, lmin_q),
        lambda_min_p: lmin_p,
        lambda_max_p: lmax_p,
        lambda_min_q: lmin_q,
    }
}

#[test]
fn c01_certification_math() {
    let started = Instant::now();
    let world = load_world();
    let cert = certify(&world).unwrap();
    let mut worst = 0.0f64;
    let pairs = std::iter::once(&cert.leader.lyap).chain(cert.followers.iter().map(|f| &f.lyap));
    let mut agents = 0;
    for pair in pairs {
        worst = worst.max(pair.residual() / pair.q.norm());
        agents += 1;
    }
    let unit = scalar_pair(1.0, 1.0, 2.0);
    let (rho0, r0) = leader_radius(&unit, 0.5, 0.5).unwrap();
    let (r, r_ball) = follower_radius(&unit, 0.1);
    let substitution = [
        (rho0, 1.0),
        (r0, 1.0),
        (effective_disturbance(0.1, 2.0, 0.05), 0.2),
        (r, 0.1),
        (r_ball, 0.1),
    ]
    .iter()
    .map(|(got, want)| (got - want).abs())
    .fold(0.0, f64::max);
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        1,
        "certification math",
        agents == 6 && worst < 1e-9 && substitution < 1e-12 && seconds < 1.0,
        &format!(
            "{agents} pairs, worst residual/|Q|_F {worst:.2e}, substitution error {substitution:.1e}, {seconds:.3} s"
        ),
    );
}

#[test]
fn c02_rpi_containment() {
    let s = shipped();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for (k, f) in s.cert.followers.iter().enumerate() {
        let seed = 1000 + k as u64;
        let adversarial = rpi_check(&f.lyap, f.r, f.w_eff, 50, 20.0, 1e-3, RpiDisturbance::Adversarial, seed).unwrap();
        let random =
            rpi_check(&f.lyap, f.r, f.w_eff, 50, 20.0, 1e-3, RpiDisturbance::Random { hold: 50 }, seed).unwrap();
        worst = worst.max(adversarial).max(random);
    }
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        2,
        "RPI containment",
        worst <= 1.0 + 1e-6 && seconds < 30.0,
        &format!(
            "{} followers x 100 boundary starts, max V/r^2 = {worst:.9}, {seconds:.1} s",
            s.cert.followers.len()
        ),
    );
}

/// Derivatives at 0 of a degree-six polynomial; these central stencils are
/// exact for it up to rounding.
fn stencil_derivative(f: impl Fn(f64) -> f64, order: usize, step: f64) -> f64 {
    const W1: [f64; 9] = [
        1.0 / 280.0, -4.0 / 105.0, 1.0 / 5.0, -4.0 / 5.0, 0.0, 4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0,
    ];
    const W2: [f64; 9] = [
        -1.0 / 560.0, 8.0 / 315.0, -1.0 / 5.0, 8.0 / 5.0, -205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0,
        -1.0 / 560.0,
    ];
    const W3: [f64; 9] = [
        -7.0 / 240.0, 3.0 / 10.0, -169.0 / 120.0, 61.0 / 30.0, 0.0, -61.0 / 30.0, 169.0 / 120.0, -3.0 / 10.0,
        7.0 / 240.0,
    ];
    let w = match order {
        0 => return f(0.0),
        1 => &W1,
        2 => &W2,
        3 => &W3,
        _ => unreachable!("orders up to three"),
    };
    let sum: f64 = w.iter().enumerate().map(|(k, c)| c * f((k as f64 - 4.0) * step)).sum();
    sum / step.powi(order as i32)
}

/// Barrier value along the exact flow of the relative chain under a constant
/// top derivative.
fn barrier_along_flow(e: &Vector, top: &Vector, radius: f64, n: usize, d: usize, t: f64) -> f64 {
    let mut p = vec![0.0; d];
    let mut coef = 1.0;
    for k in 0..=n {
        if k > 0 {
            coef *= t / k as f64;
        }
        for a in 0..d {
            let v = if k < n { e[k * d + a] } else { top[a] };
            p[a] += coef * v;
        }
    }
    p.iter().map(|x| x * x).sum::<f64>() - radius * radius
}

#[test]
fn c03_lie_derivatives() {
    let (n, d) = (3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    // Obstacle radius and pairwise safety distance of the shipped scenario.
    for radius in [0.45, 0.3] {
        for _ in 0..50 {
            let mut e = Vector::from_iterator(n * d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)));
            if e.rows(0, d).norm() < 0.1 {
                e[0] += 0.5;
            }
            let drift = Vector::from_iterator(d, (0..d).map(|_| rng.gen_range(-3.0..3.0)));
            let v = Vector::from_iterator(d, (0..d).map(|_| rng.gen_range(-3.0..3.0)));
            let lie = lie_derivatives(&e, &drift, radius, d).unwrap();
            let top = &drift + &v;
            let h = |t: f64| barrier_along_flow(&e, &top, radius, n, d, t);
            for m in 0..=n {
                let analytic = if m < n { lie.orders[m] } else { lie.top(&v) };
                let fd = stencil_derivative(h, m, 0.05);
                let rel = (analytic - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    verdict(
        3,
        "Lie derivatives vs finite differences",
        worst < 1e-6,
        &format!("50 states per barrier kind, orders 0..{n}, worst relative error {worst:.2e}"),
    );
}

/// Random strictly convex QP with a known feasible point.
fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.gen_range(1..=10);
    let m_in = rng.gen_range(0..=18);
    let m_eq = rng.gen_range(0..=2.min(n - 1));
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let mut qp = QpProblem::unconstrained(h, g);
    let x_f = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    for _ in 0..m_in {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let slack = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) };
        qp.push_ineq(&a, a.dot(&x_f) - slack);
    }
    for _ in 0..m_eq {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        qp.push_eq(&a, a.dot(&x_f));
    }
    qp
}

/// Accelerated projected gradient ascent on the Lagrange dual. Returns the
/// best dual value, a lower bound on the primal optimum.
fn dual_oracle(qp: &QpProblem, target: f64) -> f64 {
    let n = qp.dim();
    let (m_in, m_eq) = (qp.a_in.nrows(), qp.a_eq.nrows());
    let h_inv = qp.h.clone().try_inverse().unwrap();
    if m_in + m_eq == 0 {
        return -0.5 * qp.g.dot(&(&h_inv * &qp.g)) + qp.c0;
    }
    let mut a = DMatrix::zeros(m_in + m_eq, n);
    a.rows_mut(0, m_in).copy_from(&qp.a_in);
    a.rows_mut(m_in, m_eq).copy_from(&qp.a_eq);
    let mut b = DVector::zeros(m_in + m_eq);
    b.rows_mut(0, m_in).copy_from(&qp.b_in);
    b.rows_mut(m_in, m_eq).copy_from(&qp.b_eq);
    let (_, lip) = eig_extremes(&(&a * &h_inv * a.transpose())).unwrap();
    let step = 1.0 / lip.max(1e-12);
    let dual = |lam: &DVector<f64>| {
        let r = a.transpose() * lam - &qp.g;
        -0.5 * r.dot(&(&h_inv * &r)) + b.dot(lam) + qp.c0
    };
    let grad = |lam: &DVector<f64>| &b - &a * (&h_inv * (a.transpose() * lam - &qp.g));
    let project = |mut lam: DVector<f64>| {
        for k in 0..m_in {
            lam[k] = lam[k].max(0.0);
        }
        lam
    };
    let mut lam = DVector::zeros(m_in + m_eq);
    let mut y = lam.clone();
    let mut t = 1.0f64;
    let mut best = dual(&lam);
    for _ in 0..400_000 {
        let next = project(&y + grad(&y) * step);
        let value = dual(&next);
        if value < dual(&lam) {
            // Adaptive restart.
            y = lam.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &lam) * ((t - 1.0) / t_next);
        lam = next;
        t = t_next;
        best = best.max(value);
        if (target - best).abs() < 1e-9 {
            break;
        }
    }
    best
}

#[test]
fn c04_qp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_gap = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut optimal = 0;
    for _ in 0..200 {
        let qp = random_qp(&mut rng);
        let sol = solve_qp(&qp, 1e-10, 500).unwrap();
        if sol.status != QpStatus::Optimal {
            continue;
        }
        optimal += 1;
        worst_kkt = worst_kkt.max(kkt_residuals(&qp, &sol).max());
        let oracle = dual_oracle(&qp, sol.objective);
        worst_gap = worst_gap.max((sol.objective - oracle).abs());
    }
    verdict(
        4,
        "QP solver vs projected-gradient oracle",
        optimal == 200 && worst_gap < 1e-6 && worst_kkt < 1e-8,
        &format!("{optimal}/200 optimal, worst objective gap {worst_gap:.2e}, worst KKT residual {worst_kkt:.2e}"),
    );
}

#[test]
fn c05_scenario_safety() {
    let r = feedforward_run();
    let obs = r.metrics.min_obstacle_clearance.unwrap_or(f64::NEG_INFINITY);
    let pair = r.metrics.min_pairwise_clearance.unwrap_or(f64::NEG_INFINITY);
    verdict(
        5,
        "shipped scenario safety",
        obs > 0.0 && pair > 0.0 && r.metrics.duration >= 30.0 - 1e-9 && r.seconds < 120.0,
        &format!(
            "{} fine rows over {:.1} s, min obstacle clearance {obs:.4}, min pairwise clearance {pair:.4}, {:.1} s wall",
            r.metrics.rows, r.metrics.duration, r.seconds
        ),
    );
}

#[test]
fn c06_tube_occupancy() {
    let r = feedforward_run();
    let worst = r.metrics.max_occupancy.iter().copied().fold(0.0, f64::max);
    verdict(
        6,
        "tube occupancy",
        worst <= 1.0 + OCCUPANCY_TOL && r.metrics.max_occupancy.len() == 6,
        &format!("max V/r^2 over leader and followers {worst:.3e}"),
    );
}

#[test]
fn c07_global_bound() {
    let r = feedforward_run();
    let bound = shipped().cert.global.bound;
    let err = r.metrics.final_mean_stacked_error;
    verdict(
        7,
        "global error bound",
        err <= bound,
        &format!("final 5 s mean stacked error {err:.4} vs bound {bound:.4}"),
    );
}

#[test]
fn c08_ablation_ordering() {
    let ff = feedforward_run();
    let bl = baseline_run();
    let feasible = shipped().cert.followers.iter().all(|f| f.baseline_r.is_some());
    let (e_ff, e_bl) = (ff.metrics.final_mean_stacked_error, bl.metrics.final_mean_stacked_error);
    let clear = |m: &Metrics| (m.min_obstacle_clearance.unwrap(), m.min_pairwise_clearance.unwrap());
    let (o_ff, p_ff) = clear(&ff.metrics);
    let (o_bl, p_bl) = clear(&bl.metrics);
    verdict(
        8,
        "baseline vs feedforward ordering",
        feasible && e_bl >= e_ff && o_bl >= o_ff && p_bl >= p_ff && bl.outcome.stats.first_violation.is_none(),
        &format!(
            "error {e_bl:.4} >= {e_ff:.4}, obstacle clearance {o_bl:.4} >= {o_ff:.4}, pairwise clearance {p_bl:.4} >= {p_ff:.4}"
        ),
    );
}

#[test]
fn c09_radius_divergence() {
    let s = shipped();
    let mut worst_ratio = f64::INFINITY;
    let mut monotone = true;
    for f in &s.cert.followers {
        let limit = baseline_limit(&f.lyap);
        let (r, _) = follower_radius(&f.lyap, f.w_eff);
        let mut prev = 0.0;
        for k in 0..=999 {
            let lf = limit * k as f64 / 1000.0;
            let b = baseline_radius(&f.lyap, f.w_eff, lf).unwrap();
            monotone &= b > prev;
            prev = b;
        }
        let ratio = baseline_radius(&f.lyap, f.w_eff, 0.999 * limit).unwrap() / r;
        worst_ratio = worst_ratio.min(ratio);
    }
    verdict(
        9,
        "baseline radius divergence",
        monotone && worst_ratio > 1e3,
        &format!(
            "baseline_r / r at 0.999 of the limit: {worst_ratio:.1} (lambda_max(P) = {:.3})",
            s.cert.followers[0].lyap.lambda_max_p
        ),
    );
}

#[test]
fn c10_determinism() {
    let first = feedforward_run().outcome.trace.to_csv_string().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let again = pool.install(|| run(false)).outcome.trace.to_csv_string().unwrap();
    verdict(
        10,
        "determinism",
        first.as_bytes() == again.as_bytes(),
        &format!("{} bytes, second run on a single thread", first.len()),
    );
}
