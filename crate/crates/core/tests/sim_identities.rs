use crystal_core::clocks::{ClockSource, Stream};
use crystal_core::model::{BetaParams, BoundaryCondition, HeightState};
use crystal_core::sim::{
    simulate, simulate_aux, simulate_coupled, simulate_coupled_observed, uniform_grid, ProcessSpec,
};

fn b123() -> BetaParams {
    BetaParams::new(1.0, 2.0, 3.0).unwrap()
}

fn spec_from(h: Vec<i64>, bc: BoundaryCondition) -> ProcessSpec {
    ProcessSpec::with_initial(HeightState::new(h).unwrap(), bc, b123()).unwrap()
}

#[test]
fn zero_horizon_keeps_initial_state() {
    let spec = spec_from(vec![2, 0, 1], BoundaryCondition::Zero);
    let tr = simulate(&spec, 0.0, &ClockSource::new(1), &[0.0]).unwrap();
    assert_eq!(tr.states[0], vec![2, 0, 1]);
    assert_eq!(tr.jumps[0], vec![0, 0, 0]);
    let aux = simulate_aux(2, b123(), 0.0, &ClockSource::new(1), &[0.0]).unwrap();
    let s = &aux.samples[0];
    assert!(s.state.xr.iter().chain(&s.state.zr).chain(&s.state.xr1).all(|v| *v == 0));
    assert_eq!((s.integral_u, s.integral_v), (0.0, 0.0));
}

#[test]
fn negative_horizon_rejected() {
    let spec = spec_from(vec![0, 0], BoundaryCondition::Zero);
    assert!(simulate(&spec, -1.0, &ClockSource::new(1), &[]).is_err());
}

#[test]
fn single_column_grows_at_beta0() {
    let spec = ProcessSpec::new(1, BoundaryCondition::Zero, b123()).unwrap();
    let reps = 10_000u64;
    let xs: Vec<f64> = (0..reps)
        .map(|r| simulate(&spec, 10.0, &ClockSource::new(3).replica(r), &[10.0]).unwrap().states[0][0] as f64)
        .collect();
    let mean = xs.iter().sum::<f64>() / reps as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!((mean - 10.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn heights_never_decrease_and_move_by_one() {
    let spec = ProcessSpec::new(4, BoundaryCondition::Periodic, b123()).unwrap();
    let mut prev = vec![0i64; 4];
    simulate_coupled_observed(&[spec], 50.0, &ClockSource::new(8), &[], |ev, procs| {
        let h = procs[0].heights();
        for (j, (a, b)) in prev.iter().zip(h).enumerate() {
            let step = b - a;
            assert!(step == 0 || (step == 1 && j + 1 == ev.site), "{prev:?} -> {h:?}");
        }
        prev = h.to_vec();
    })
    .unwrap();
}

#[test]
fn shift_and_domination_hold_pathwise() {
    for (r, bc) in [(0u64, BoundaryCondition::Zero), (1, BoundaryCondition::Periodic)] {
        let specs = [
            spec_from(vec![0, 0, 0, 0], bc),
            spec_from(vec![5, 5, 5, 5], bc),
            spec_from(vec![1, 0, 3, 2], bc),
        ];
        simulate_coupled_observed(&specs, 100.0, &ClockSource::new(21).replica(r), &[], |_, p| {
            let (x0, x5, xd) = (p[0].heights(), p[1].heights(), p[2].heights());
            assert!(x5.iter().zip(x0).all(|(a, b)| a - b == 5));
            assert!(xd.iter().zip(x0).all(|(a, b)| a >= b));
        })
        .unwrap();
    }
}

#[test]
fn coupling_rejects_mismatched_betas() {
    let a = ProcessSpec::new(2, BoundaryCondition::Zero, b123()).unwrap();
    let b = ProcessSpec::new(2, BoundaryCondition::Zero, BetaParams::new(1.0, 2.0, 4.0).unwrap()).unwrap();
    assert!(simulate_coupled(&[a, b], 1.0, &ClockSource::new(1), &[]).is_err());
}

#[test]
fn restriction_identity_on_coupled_prefix() {
    let n = 4;
    let j = 2;
    let times = uniform_grid(5.0, 26);
    let mut qualifying = 0;
    for r in 0..400u64 {
        let specs = [
            ProcessSpec::new(n, BoundaryCondition::Zero, b123()).unwrap(),
            ProcessSpec::new(j, BoundaryCondition::Zero, b123()).unwrap(),
        ];
        let mut ok = true;
        let trs = simulate_coupled_observed(&specs, 5.0, &ClockSource::new(13).replica(r), &times, |_, p| {
            let h = p[0].heights();
            ok &= h[j - 1] >= h[j];
        })
        .unwrap();
        if ok {
            qualifying += 1;
            for (big, small) in trs[0].states.iter().zip(&trs[1].states) {
                assert_eq!(&big[..j], &small[..], "replica {r}");
            }
        }
    }
    assert!(qualifying > 20, "only {qualifying} qualifying replicas");
}

#[test]
fn first_column_grows_with_s0_when_not_below_neighbor() {
    let spec = ProcessSpec::new(3, BoundaryCondition::Zero, b123()).unwrap();
    let t = 4.0;
    let mut qualifying = 0;
    for r in 0..500u64 {
        let mut ok = true;
        let trs = simulate_coupled_observed(
            std::slice::from_ref(&spec),
            t,
            &ClockSource::new(31).replica(r),
            &[0.0, t],
            |_, p| {
                let h = p[0].heights();
                ok &= h[0] >= h[1];
            },
        )
        .unwrap();
        if ok {
            qualifying += 1;
            let tr = &trs[0];
            assert_eq!(tr.increment(1, 0.0, t).unwrap() as u64, tr.stream_events(1, Stream::S0, 0.0, t).unwrap());
        }
    }
    assert!(qualifying > 20, "only {qualifying} qualifying replicas");
}

#[test]
fn column_next_to_higher_neighbor_grows_with_s0_and_s1() {
    let spec = spec_from(vec![4, 0, 0], BoundaryCondition::Zero);
    let t = 3.0;
    let mut qualifying = 0;
    for r in 0..500u64 {
        let mut ok = true;
        let trs = simulate_coupled_observed(
            std::slice::from_ref(&spec),
            t,
            &ClockSource::new(41).replica(r),
            &[0.0, t],
            |_, p| {
                let h = p[0].heights();
                ok &= h[0] > h[1];
            },
        )
        .unwrap();
        if ok {
            qualifying += 1;
            let tr = &trs[0];
            let floor = tr.stream_events(2, Stream::S0, 0.0, t).unwrap() + tr.stream_events(2, Stream::S1, 0.0, t).unwrap();
            assert!(tr.increment(2, 0.0, t).unwrap() as u64 >= floor);
        }
    }
    assert!(qualifying > 20, "only {qualifying} qualifying replicas");
}

#[test]
fn increment_requires_sampled_times() {
    let spec = ProcessSpec::new(2, BoundaryCondition::Zero, b123()).unwrap();
    let tr = simulate(&spec, 2.0, &ClockSource::new(1), &[0.0, 2.0]).unwrap();
    assert_eq!(tr.increment(1, 2.0, 2.0).unwrap(), 0);
    assert!(tr.increment(1, 0.5, 2.0).is_err());
}

#[test]
fn trajectories_reproduce_exactly() {
    let spec = ProcessSpec::new(3, BoundaryCondition::Periodic, b123()).unwrap();
    let times = uniform_grid(30.0, 31);
    let a = simulate(&spec, 30.0, &ClockSource::new(77), &times).unwrap();
    let b = simulate(&spec, 30.0, &ClockSource::new(77), &times).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca).unwrap().starts_with("time,site_1,site_2,site_3\n"));
}
