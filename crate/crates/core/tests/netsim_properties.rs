use nettwin_core::netsim::{
    feasible, run_episode, sample_arrivals, AdmissionAction, AdmissionState, GreedyPolicy, ResourceVector, ServiceRequest,
    SimConfig, SliceKind, SliceProfile, Simulator,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the KS statistic at significance 0.01.
fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

fn profile(rate: f64, mean_service: f64) -> SliceProfile {
    SliceProfile {
        kind: SliceKind::MassiveCommunication,
        demand: ResourceVector::new(1, 1, 1),
        arrival_rate: rate,
        mean_service_time: mean_service,
        timeout: 3.0,
        revenue: 1.0,
    }
}

#[test]
fn poisson_count_is_within_clt_bound() {
    let reqs = sample_arrivals(&profile(2.0, 5.0), 10_000.0, &mut ChaCha8Rng::seed_from_u64(7));
    let n = reqs.len() as f64;
    assert!((n - 20_000.0).abs() <= 3.0 * 20_000f64.sqrt(), "count {n}");
    assert!(reqs.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    assert!(reqs.iter().all(|r| (r.deadline - r.arrival_time - 3.0).abs() < 1e-9 && r.service_time > 0.0));
}

#[test]
fn service_mean_is_within_clt_bound() {
    let reqs = sample_arrivals(&profile(1.0, 5.0), 20_000.0, &mut ChaCha8Rng::seed_from_u64(8));
    let mean = reqs[..10_000].iter().map(|r| r.service_time).sum::<f64>() / 10_000.0;
    assert!((4.8..=5.2).contains(&mean), "mean {mean}");
}

#[test]
fn inter_arrival_and_service_times_pass_ks() {
    let rate = 2.0;
    let mean = 5.0;
    let reqs = sample_arrivals(&profile(rate, mean), 6_000.0, &mut ChaCha8Rng::seed_from_u64(9));
    assert!(reqs.len() > 10_000);
    let reqs = &reqs[..10_001];
    let gaps: Vec<f64> = reqs.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).collect();
    let services: Vec<f64> = reqs[..10_000].iter().map(|r| r.service_time).collect();
    let d_gap = ks_statistic(gaps, |x| 1.0 - (-rate * x).exp());
    let d_svc = ks_statistic(services, |x| 1.0 - (-x / mean).exp());
    let crit = ks_critical_001(10_000);
    assert!(d_gap < crit, "inter-arrival D = {d_gap}");
    assert!(d_svc < crit, "service D = {d_svc}");
    // A wrong rate must be rejected, or the test has no power.
    let wrong: Vec<f64> = reqs.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).collect();
    assert!(ks_statistic(wrong, |x| 1.0 - (-1.8 * x).exp()) > crit);
}

fn random_request(rng: &mut ChaCha8Rng, id: u64, max_demand: u32, clock: f64) -> ServiceRequest {
    let kind = SliceKind::ALL[rng.random_range(0..4)];
    let arrival_time = clock - rng.random_range(0.0..1.0);
    ServiceRequest {
        request_id: id,
        tenant_id: kind.index() as u32,
        kind,
        demand: ResourceVector::new(
            rng.random_range(0..=max_demand),
            rng.random_range(0..=max_demand),
            rng.random_range(0..=max_demand),
        ),
        arrival_time,
        service_time: 1.0,
        deadline: clock + 1.0,
    }
}

/// Exhaustive reference for the greedy rule, written without the
/// library's scoring helpers.
fn brute_force_greedy(state: &AdmissionState, revenues: &[f64; 4]) -> AdmissionAction {
    let cap = state.capacity.components();
    let mut candidates: Vec<(f64, f64, u64, usize)> = Vec::new();
    for (i, r) in state.pending.iter().enumerate() {
        let d = r.demand.components();
        let fits = (0..3).all(|k| d[k] <= state.available.components()[k]);
        if !fits || state.active.len() >= state.max_concurrent_ues {
            continue;
        }
        let norm: f64 = (0..3).filter(|&k| cap[k] > 0).map(|k| d[k] as f64 / cap[k] as f64).sum();
        let rev = revenues[r.kind.index()];
        let score = if norm > 0.0 { rev / norm } else if rev > 0.0 { f64::INFINITY } else { 0.0 };
        candidates.push((score, r.arrival_time, r.request_id, i));
    }
    let mut best: Option<(f64, f64, u64, usize)> = None;
    for c in candidates {
        best = match best {
            None => Some(c),
            Some(b) => {
                let wins = c.0 > b.0 || (c.0 == b.0 && (c.1 < b.1 || (c.1 == b.1 && c.2 < b.2)));
                Some(if wins { c } else { b })
            }
        };
    }
    best.map_or(AdmissionAction::Defer, |c| AdmissionAction::Admit(c.3))
}

fn config_with_revenues(revenues: [f64; 4]) -> SimConfig {
    let mut cfg = SimConfig::default();
    for (p, r) in cfg.profiles.iter_mut().zip(revenues) {
        p.revenue = r;
    }
    cfg
}

fn random_small_state(rng: &mut ChaCha8Rng) -> AdmissionState {
    let capacity = ResourceVector::new(rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let available = ResourceVector::new(
        rng.random_range(0..=capacity.radio),
        rng.random_range(0..=capacity.compute),
        rng.random_range(0..=capacity.storage),
    );
    let mut state = AdmissionState::idle(capacity, rng.random_range(1..=3));
    state.available = available;
    state.clock = 10.0;
    let n = rng.random_range(0..=3);
    state.pending = (0..n)
        .map(|i| {
            let id = rng.random_range(0..5) * 10 + i;
            random_request(rng, id, 4, 10.0)
        })
        .collect();
    // Occasionally duplicate arrival times to exercise the id tie-break.
    if n >= 2 && rng.random_bool(0.3) {
        let t = state.pending[0].arrival_time;
        state.pending[1].arrival_time = t;
    }
    state.pending.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    let active = rng.random_range(0..=state.max_concurrent_ues);
    state.active = (0..active)
        .map(|i| nettwin_core::netsim::ActiveSession {
            request_id: 100 + i as u64,
            kind: SliceKind::MassiveCommunication,
            demand: ResourceVector::ZERO,
            departure_time: 20.0,
        })
        .collect();
    state
}

#[test]
fn greedy_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let revenues = [
            rng.random_range(0..4) as f64,
            rng.random_range(0..4) as f64,
            rng.random_range(0..4) as f64,
            rng.random_range(0..4) as f64,
        ];
        let greedy = GreedyPolicy::new(&config_with_revenues(revenues));
        let state = random_small_state(&mut rng);
        assert_eq!(greedy.choose(&state), brute_force_greedy(&state, &revenues), "state {state:?}");
    }
}

#[test]
fn greedy_choice_is_invariant_to_revenue_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..2_000 {
        let revenues = [1.0, 2.0, 3.0, 5.0].map(|r: f64| r * rng.random_range(0.5..2.0));
        let c = rng.random_range(0.01..100.0);
        let state = random_small_state(&mut rng);
        let base = GreedyPolicy::new(&config_with_revenues(revenues)).choose(&state);
        let scaled = GreedyPolicy::new(&config_with_revenues(revenues.map(|r| r * c))).choose(&state);
        assert_eq!(base, scaled);
    }
}

#[test]
fn greedy_picks_higher_density_by_brute_force() {
    // Two feasible requests with revenue densities 3.0 and 5.0.
    let cfg = config_with_revenues([3.0, 5.0, 1.0, 1.0]);
    let mut state = AdmissionState::idle(ResourceVector::new(1, 1, 1), 4);
    let mut a = random_request(&mut ChaCha8Rng::seed_from_u64(0), 0, 0, 1.0);
    a.kind = SliceKind::ImmersiveCommunication;
    a.demand = ResourceVector::new(1, 0, 0);
    a.arrival_time = 0.1;
    let mut b = a.clone();
    b.request_id = 1;
    b.kind = SliceKind::Hrllc;
    b.arrival_time = 0.2;
    state.pending = vec![a, b];
    state.clock = 1.0;
    let greedy = GreedyPolicy::new(&cfg);
    assert_eq!(greedy.score(&state, &state.pending[0]), 3.0);
    assert_eq!(greedy.score(&state, &state.pending[1]), 5.0);
    assert_eq!(greedy.choose(&state), AdmissionAction::Admit(1));
}

/// Uniform choice among Defer and every feasible admit.
fn random_feasible_action(state: &AdmissionState, rng: &mut ChaCha8Rng) -> AdmissionAction {
    let mut options = vec![AdmissionAction::Defer];
    options.extend(state.pending.iter().enumerate().filter(|(_, r)| feasible(state, r)).map(|(i, _)| AdmissionAction::Admit(i)));
    options[rng.random_range(0..options.len())]
}

fn contended_config(rng: &mut ChaCha8Rng) -> SimConfig {
    let mut cfg = SimConfig::default().with_arrival_scale(rng.random_range(0.5..3.0));
    cfg.capacity = ResourceVector::new(rng.random_range(8..40), rng.random_range(8..40), rng.random_range(8..40));
    cfg.max_concurrent_ues = rng.random_range(1..12);
    cfg.horizon = 60.0;
    cfg
}

#[test]
fn invariants_hold_under_random_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut steps = 0usize;
    while steps < 20_000 {
        let cfg = contended_config(&mut rng);
        let mut sim = Simulator::new(&cfg, &mut rng).unwrap();
        let mut total = 0.0;
        while !sim.is_done() {
            let state = sim.state().clone();
            state.check_invariants().unwrap();
            let action = random_feasible_action(&state, &mut rng);
            let out = sim.step(action).unwrap();
            if action == AdmissionAction::Defer {
                assert_eq!(out.reward, 0.0);
            }
            total += out.reward;
            steps += 1;
        }
        assert_eq!(total, sim.cumulative_reward());
        for life in sim.lifecycles() {
            let r = &life.request;
            match (life.admitted_at, life.expired_at) {
                (Some(t), None) => assert!(t >= r.arrival_time && t < r.deadline),
                (None, Some(t)) => assert_eq!(t, r.deadline),
                (None, None) => assert!(r.deadline > cfg.horizon),
                (Some(_), Some(_)) => panic!("request {} both admitted and expired", r.request_id),
            }
        }
    }
}

#[test]
fn uncontended_stream_admits_everything() {
    let mut cfg = SimConfig::default();
    for (i, p) in cfg.profiles.iter_mut().enumerate() {
        if i != 2 {
            p.arrival_rate = 0.0;
        }
    }
    cfg.capacity = ResourceVector::new(10_000, 10_000, 10_000);
    cfg.max_concurrent_ues = 10_000;
    let mut greedy = GreedyPolicy::new(&cfg);
    let t = run_episode(&cfg, &mut greedy, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(t.arrivals > 100);
    assert_eq!(t.admitted, t.arrivals);
    assert_eq!(t.expired, 0);
}

#[test]
fn episodes_and_traces_are_deterministic() {
    let cfg = SimConfig::default();
    let run = |seed| {
        let mut greedy = GreedyPolicy::new(&cfg);
        let t = run_episode(&cfg, &mut greedy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let trace = nettwin_core::netsim::generate_signaling_trace(&cfg, &mut greedy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (format!("{t:?}"), trace.to_text())
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).0, run(6).0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_matches_definition(
        d in prop::array::uniform3(0u32..6),
        a in prop::array::uniform3(0u32..6),
        active in 0usize..4,
        cap in 1usize..4,
    ) {
        let mut state = AdmissionState::idle(ResourceVector::new(8, 8, 8), cap);
        state.available = ResourceVector::new(a[0], a[1], a[2]);
        state.active = (0..active).map(|i| nettwin_core::netsim::ActiveSession {
            request_id: i as u64, kind: SliceKind::Hrllc, demand: ResourceVector::ZERO, departure_time: 1.0,
        }).collect();
        let mut r = random_request(&mut ChaCha8Rng::seed_from_u64(0), 9, 0, 0.5);
        r.demand = ResourceVector::new(d[0], d[1], d[2]);
        let want = d[0] <= a[0] && d[1] <= a[1] && d[2] <= a[2] && active < cap;
        prop_assert_eq!(feasible(&state, &r), want);
    }
}
