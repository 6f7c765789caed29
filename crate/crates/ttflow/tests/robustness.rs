mod common;

use common::*;
use std::sync::atomic::{AtomicUsize, Ordering};
use ttflow::integrators::*;
use ttflow::problems::*;
use ttflow::tensor_core::*;
use ttflow::tt_format::*;
use ttflow::Error;

/// Counts every entry of G requested through the sampled evaluators.
struct Counting<'a> {
    inner: &'a dyn EntrywiseRhs,
    entries: AtomicUsize,
}

impl<'a> Counting<'a> {
    fn new(inner: &'a dyn EntrywiseRhs) -> Self {
        Self { inner, entries: AtomicUsize::new(0) }
    }

    fn take(&self) -> usize {
        self.entries.swap(0, Ordering::SeqCst)
    }
}

impl EntrywiseRhs for Counting<'_> {
    fn dims(&self) -> &[usize] {
        self.inner.dims()
    }

    fn eval_dense(&self, _u: &DenseTensor, _t: f64) -> DenseTensor {
        panic!("sampled integrators must not evaluate G densely")
    }

    fn eval_block(&self, y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], t: f64) -> Block {
        self.entries.fetch_add(left.len() * y.dims()[mode] * right.len(), Ordering::SeqCst);
        self.inner.eval_block(y, left, mode, right, t)
    }

    fn eval_entries(&self, y: &TensorTrain, entries: &[Vec<usize>], t: f64) -> Vec<f64> {
        self.entries.fetch_add(entries.len(), Ordering::SeqCst);
        self.inner.eval_entries(y, entries, t)
    }
}

#[test]
fn cross_step_samples_only_the_fiber_blocks() {
    let p = AllenCahn3d::new(8).unwrap();
    let counter = Counting::new(&p);
    let y = random_tt(&[8, 8, 8], &[1, 3, 3, 1], 40);
    let cfg = StepperConfig { scheme: Scheme::Euler, dt: 1e-3, ..Default::default() };
    let z = tt_cross_step(&y, &counter, 0.0, &cfg).unwrap();
    assert_eq!(counter.take(), 8 * 3 + 3 * 8 * 3 + 3 * 8);
    let rk4 = StepperConfig { scheme: Scheme::Rk4, ..cfg };
    tt_cross_step(&z, &counter, 0.0, &rk4).unwrap();
    assert_eq!(counter.take(), 4 * 120);
}

#[test]
fn projection_steps_stay_within_the_sampled_budget() {
    let dims = [8, 8, 8, 8];
    let p = Adr4d::new(8).unwrap();
    let counter = Counting::new(&p);
    let y = random_tt(&dims, &[1, 3, 3, 3, 1], 41);
    let r = 3;
    let per_sweep = dims.len() * 8 * r * r + (dims.len() - 1) * r * r;
    let cfg = StepperConfig { scheme: Scheme::Euler, dt: 1e-4, substep_scheme: Scheme::Euler, ..Default::default() };
    ips_step(&y, &counter, 0.0, &cfg).unwrap();
    let used = counter.take();
    assert!(used > 0 && used <= per_sweep, "{used} entries for a budget of {per_sweep}");
    assert!(used * 10 < 8usize.pow(4));
}

/// Rank (1,2,3,1) train plus a rank-one perturbation of relative size `eps`.
fn with_weak_direction(eps: f64, seed: u64) -> (TensorTrain, TensorTrain) {
    let dims = [6, 7, 6];
    let y = random_tt(&dims, &[1, 2, 3, 1], seed);
    let w = random_tt(&dims, &[1, 1, 1, 1], seed + 1);
    let s = eps * y.frobenius_norm() / w.frobenius_norm();
    (linear_combination(&[(1.0, &y), (s, &w)]).unwrap(), y)
}

fn decaying_flow(dims: &[usize]) -> LinearModeFlow {
    let generators = dims.iter().map(|&n| Matrix::from_fn(n, n, |i, j| if i == j { -0.1 * (1 + i) as f64 } else { 0.0 })).collect();
    LinearModeFlow { dims: dims.to_vec(), generators }
}

#[test]
fn tiny_singular_direction_never_produces_nan() {
    let (y, _) = with_weak_direction(1e-13, 42);
    assert_eq!(y.ranks(), vec![1, 3, 4, 1]);
    let flow = decaying_flow(&y.dims());
    for method in [Method::TtCross, Method::Ips, Method::Ops] {
        let cfg = StepperConfig { scheme: Scheme::Rk4, dt: 1e-2, ..Default::default() };
        match Stepper::new(method, cfg, RankPolicy::fixed(), &flow, None).unwrap().step(&y, 0.0) {
            Ok((z, info)) => {
                assert!(z.is_finite(), "{method:?} produced non-finite cores");
                // Orthogonal projection has no interface matrices; NaN marks "not applicable".
                let applicable = method != Method::Ops;
                assert!(info.cond_m.iter().chain(&info.cond_n).all(|c| c.is_nan() != applicable), "{method:?} {info:?}");
            }
            Err(e) => assert!(
                matches!(e, Error::IllConditioned { .. } | Error::SingularInterface { .. } | Error::Deim { .. }),
                "{method:?}: unexpected error {e}"
            ),
        }
    }
}

#[test]
fn adaptive_runs_drop_a_tiny_singular_direction() {
    let (y, clean) = with_weak_direction(1e-13, 43);
    let flow = decaying_flow(&y.dims());
    let exact = dense(&flow.exact(&clean, 0.05));
    for method in [Method::TtCross, Method::Ips] {
        let cfg = StepperConfig { scheme: Scheme::Rk4, dt: 1e-2, t_end: 0.05, ..Default::default() };
        let policy = RankPolicy { eps_u: 0.9, ..RankPolicy::with_eps_l(1e-7) };
        let mut s = Stepper::new(method, cfg, policy, &flow, None).unwrap();
        let rec = integrate(&mut s, y.clone(), &IntegrateOptions::default());
        assert!(rec.error.is_none(), "{method:?}: {:?}", rec.error);
        assert_eq!(rec.final_state.ranks(), vec![1, 2, 3, 1]);
        assert!(rel_diff(&dense(&rec.final_state), &exact) < 1e-8);
    }
}

#[test]
fn blow_up_is_reported_not_hidden() {
    let dims = vec![4, 4];
    let growth = LinearModeFlow { dims: dims.clone(), generators: vec![Matrix::identity(4).scaled(50.0), Matrix::zeros(4, 4)] };
    let y = random_tt(&dims, &[1, 2, 1], 44);
    let u0 = dense(&y);
    let err = dense_reference(&growth, &u0, 1e-2, 1.0, &[1.0]).unwrap_err();
    assert!(matches!(err, Error::BlowUp { .. }), "{err}");
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad_dt = StepperConfig { dt: 0.0, ..Default::default() };
    assert!(bad_dt.validate().is_err());
    let bad_band = RankPolicy { eps_l: 1e-6, eps_u: 1e-7, ..RankPolicy::default() };
    assert!(bad_band.validate().is_err());
    let flow = ZeroRhs { dims: vec![4, 4] };
    assert!(Stepper::new(Method::StSvd, StepperConfig::default(), RankPolicy::fixed(), &flow, None).is_err());
}
