//! Rodas4 (Hairer & Wanner): stiffly accurate Rosenbrock method of order 4 with
//! an embedded order-3 estimate and continuous output of order 3.

use nalgebra::DVector;

use super::{abs_tol, error_norm, Dynamics, IntegratorSettings};
use crate::error::SolverError;
use crate::model::PumpSchedule;

const GAMMA: f64 = 0.25;

const A21: f64 = 1.544;
const A31: f64 = 0.946_678_528_081_582_6;
const A32: f64 = 0.255_701_169_898_328_4;
const A41: f64 = 3.314_825_187_068_521;
const A42: f64 = 2.896_124_015_972_201;
const A43: f64 = 0.998_641_913_997_781_7;
const A51: f64 = 1.221_224_509_226_641;
const A52: f64 = 6.019_134_481_288_629;
const A53: f64 = 12.537_083_329_320_87;
const A54: f64 = -0.687_886_036_105_895_0;

const C21: f64 = -5.6688;
const C31: f64 = -2.430_093_356_833_875;
const C32: f64 = -0.206_359_915_709_191_5;
const C41: f64 = -0.107_352_905_815_137_5;
const C42: f64 = -9.594_562_251_023_355;
const C43: f64 = -20.470_286_148_096_16;
const C51: f64 = 7.496_443_313_967_647;
const C52: f64 = -10.246_804_314_643_52;
const C53: f64 = -33.999_903_528_199_05;
const C54: f64 = 11.708_908_932_061_60;
const C61: f64 = 8.083_246_795_921_522;
const C62: f64 = -7.981_132_988_064_893;
const C63: f64 = -31.521_594_328_743_71;
const C64: f64 = 16.319_305_431_231_36;
const C65: f64 = -6.058_818_238_834_054;

const D21: f64 = 10.126_235_083_445_86;
const D22: f64 = -7.487_995_877_610_167;
const D23: f64 = -34.800_918_615_557_47;
const D24: f64 = -7.992_771_707_568_823;
const D25: f64 = 1.025_137_723_295_662;
const D31: f64 = -0.676_280_339_280_125_3;
const D32: f64 = 6.087_714_651_680_015;
const D33: f64 = 16.430_843_208_924_78;
const D34: f64 = 24.767_225_114_183_86;
const D35: f64 = -6.594_389_125_716_872;

/// One accepted step with its interpolant.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    pub y0: DVector<f64>,
    pub y1: DVector<f64>,
    d2: DVector<f64>,
    d3: DVector<f64>,
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let s = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let s1 = 1.0 - s;
        let mut out = &self.y0 * s1;
        let inner = &self.d2 + &self.d3 * s;
        out += (&self.y1 + inner * s1) * s;
        out
    }

    /// Single component, cheaper than a full eval.
    pub fn eval_component(&self, k: usize, t: f64) -> f64 {
        let s = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let s1 = 1.0 - s;
        self.y0[k] * s1 + s * (self.y1[k] + s1 * (self.d2[k] + s * self.d3[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: f64,
    pub y: DVector<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub stopped: bool,
}

struct StepResult {
    y1: DVector<f64>,
    err: DVector<f64>,
    d2: DVector<f64>,
    d3: DVector<f64>,
}

fn attempt<D: Dynamics>(sys: &D, p: f64, y: &DVector<f64>, h: f64) -> Result<StepResult, SolverError> {
    let lu = sys.factor(p, y, 1.0 / (h * GAMMA))?;
    let f = |x: &DVector<f64>| sys.rhs(p, x);
    let ih = 1.0 / h;
    let k1 = lu.solve(&f(y));
    let k2 = lu.solve(&(f(&(y + &k1 * A21)) + &k1 * (C21 * ih)));
    let k3 = lu.solve(&(f(&(y + &k1 * A31 + &k2 * A32)) + (&k1 * C31 + &k2 * C32) * ih));
    let k4 = lu.solve(
        &(f(&(y + &k1 * A41 + &k2 * A42 + &k3 * A43)) + (&k1 * C41 + &k2 * C42 + &k3 * C43) * ih),
    );
    let y5 = y + &k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54;
    let k5 = lu.solve(&(f(&y5) + (&k1 * C51 + &k2 * C52 + &k3 * C53 + &k4 * C54) * ih));
    let y6 = &y5 + &k5;
    let k6 = lu.solve(
        &(f(&y6) + (&k1 * C61 + &k2 * C62 + &k3 * C63 + &k4 * C64 + &k5 * C65) * ih),
    );
    let y1 = &y6 + &k6;
    let d2 = &k1 * D21 + &k2 * D22 + &k3 * D23 + &k4 * D24 + &k5 * D25;
    let d3 = &k1 * D31 + &k2 * D32 + &k3 * D33 + &k4 * D34 + &k5 * D35;
    Ok(StepResult { y1, err: k6, d2, d3 })
}

fn initial_step<D: Dynamics>(sys: &D, p: f64, y: &DVector<f64>, atol: &DVector<f64>, rtol: f64) -> f64 {
    let f0 = sys.rhs(p, y);
    let m = sys.n_modes();
    let d0 = error_norm(m, y, y, y, atol, rtol);
    let d1 = error_norm(m, &f0, y, y, atol, rtol);
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.clamp(1e-10, 1.0)
}

/// Integrate y over [0, t_end] under a piecewise-constant pump. The observer
/// sees every accepted step and may stop the run early.
pub fn integrate<D: Dynamics, O: FnMut(&DenseStep) -> Control>(
    sys: &D,
    y0: &DVector<f64>,
    schedule: &PumpSchedule,
    t_end: f64,
    settings: &IntegratorSettings,
    mut observer: O,
) -> Result<Trajectory, SolverError> {
    if y0.len() != sys.dim() {
        return Err(SolverError::Shape(format!("state has {} entries, system needs {}", y0.len(), sys.dim())));
    }
    if !sys.in_box(y0) {
        return Err(SolverError::Validity { t: 0.0, what: "initial state outside the physical box".into() });
    }
    let m = sys.n_modes();
    let atol = abs_tol(m, sys.dim(), settings);
    let rtol = settings.rel_tol;
    let mut y = y0.clone();
    let mut t = 0.0;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut h_prev: Option<f64> = None;
    for (si, seg) in schedule.segments.iter().enumerate() {
        let seg_end = schedule.segments.get(si + 1).map_or(t_end, |s| s.start.min(t_end));
        if seg.start >= t_end {
            break;
        }
        let p = seg.pump;
        // restart the step size at each pump switch
        let mut h = initial_step(sys, p, &y, &atol, rtol);
        if let Some(hp) = h_prev {
            h = h.min(hp);
        }
        let mut last_reject = false;
        while t < seg_end {
            h = h.min(settings.max_step);
            let remaining = seg_end - t;
            let stretch = h >= remaining || h * 1.01 >= remaining;
            let hh = if stretch { remaining } else { h };
            if hh < 1e-14 * t.abs().max(1.0) {
                return Err(SolverError::StepUnderflow { t, h: hh, state: y.as_slice().to_vec() });
            }
            let res = attempt(sys, p, &y, hh);
            let (ok, e, step) = match res {
                Ok(s) => {
                    let finite = s.y1.iter().all(|v| v.is_finite());
                    let e = if finite { error_norm(m, &s.err, &y, &s.y1, &atol, rtol) } else { f64::INFINITY };
                    (finite && e <= 1.0 && sys.in_box(&s.y1), e, Some(s))
                }
                Err(SolverError::Singular(_)) => (false, f64::INFINITY, None),
                Err(e) => return Err(e),
            };
            if ok {
                let s = step.unwrap();
                let t1 = if stretch { seg_end } else { t + hh };
                let ds = DenseStep { t0: t, h: t1 - t, y0: y, y1: s.y1.clone(), d2: s.d2, d3: s.d3 };
                accepted += 1;
                let ctl = observer(&ds);
                y = s.y1;
                t = t1;
                if ctl == Control::Stop {
                    return Ok(Trajectory { t, y, accepted, rejected, stopped: true });
                }
                let mut fac = if e > 0.0 { (0.9 * e.powf(-0.25)).clamp(0.2, 6.0) } else { 6.0 };
                if last_reject {
                    fac = fac.min(1.0);
                }
                h = hh * fac;
                last_reject = false;
            } else {
                rejected += 1;
                let fac = if e.is_finite() && e > 1.0 { (0.9 * e.powf(-0.25)).max(0.1) } else { 0.1 };
                h = hh * fac;
                last_reject = true;
            }
        }
        h_prev = Some(h);
    }
    Ok(Trajectory { t, y, accepted, rejected, stopped: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SolverError;
    use crate::solver::Factored;
    use nalgebra::DMatrix;

    /// Small test problems with a dense Jacobian.
    struct Dense<F: Fn(&DVector<f64>) -> DVector<f64> + Sync, J: Fn(&DVector<f64>) -> DMatrix<f64> + Sync> {
        f: F,
        j: J,
        dim: usize,
    }

    impl<F, J> Dynamics for Dense<F, J>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Sync,
    {
        fn n_modes(&self) -> usize {
            self.dim
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn rhs(&self, _p: f64, y: &DVector<f64>) -> DVector<f64> {
            (self.f)(y)
        }
        fn factor(&self, _p: f64, y: &DVector<f64>, fac: f64) -> Result<Factored, SolverError> {
            let mut a = -(self.j)(y);
            for k in 0..self.dim {
                a[(k, k)] += fac;
            }
            Ok(Factored::Dense(a.lu()))
        }
        fn in_box(&self, _y: &DVector<f64>) -> bool {
            true
        }
        fn hierarchical(&self) -> bool {
            false
        }
    }

    fn duffing() -> Dense<impl Fn(&DVector<f64>) -> DVector<f64> + Sync, impl Fn(&DVector<f64>) -> DMatrix<f64> + Sync> {
        Dense {
            f: |y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0] - 0.5 * y[0].powi(3)]),
            j: |y: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0 - 1.5 * y[0] * y[0], 0.0]),
            dim: 2,
        }
    }

    fn fixed_steps<D: Dynamics>(sys: &D, y0: DVector<f64>, t: f64, n: usize) -> (DVector<f64>, f64) {
        let h = t / n as f64;
        let mut y = y0;
        let mut max_err: f64 = 0.0;
        for _ in 0..n {
            let s = attempt(sys, 0.0, &y, h).unwrap();
            max_err = max_err.max(s.err.amax());
            y = s.y1;
        }
        (y, max_err)
    }

    #[test]
    fn global_error_is_fourth_order() {
        let sys = duffing();
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let (reference, _) = fixed_steps(&sys, y0.clone(), 2.0, 4096);
        let errs: Vec<f64> = [20, 40, 80]
            .iter()
            .map(|&n| (fixed_steps(&sys, y0.clone(), 2.0, n).0 - &reference).amax())
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 4.0).abs() < 0.35, "order {order}");
        }
    }

    #[test]
    fn dense_output_hits_endpoints_and_is_third_order() {
        let sys = Dense {
            f: |y: &DVector<f64>| -y.clone(),
            j: |_y: &DVector<f64>| -DMatrix::identity(1, 1),
            dim: 1,
        };
        let mut errs = Vec::new();
        for h in [0.2, 0.1, 0.05] {
            let y = DVector::from_vec(vec![1.0]);
            let s = attempt(&sys, 0.0, &y, h).unwrap();
            let ds = DenseStep { t0: 0.0, h, y0: y.clone(), y1: s.y1.clone(), d2: s.d2, d3: s.d3 };
            assert_eq!(ds.eval(0.0)[0], 1.0);
            assert_eq!(ds.eval(h)[0], s.y1[0]);
            errs.push((ds.eval(0.4 * h)[0] - (-0.4 * h as f64).exp()).abs());
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 3.5);
        }
    }

    #[test]
    fn adaptive_linear_decay_matches_closed_form() {
        let lam = 3.7;
        let sys = Dense {
            f: move |y: &DVector<f64>| -y * lam,
            j: move |_y: &DVector<f64>| DMatrix::from_element(1, 1, -lam),
            dim: 1,
        };
        let st = IntegratorSettings { rel_tol: 1e-10, abs_tol_n: 1e-20, ..Default::default() };
        let mut worst: f64 = 0.0;
        let tr = integrate(&sys, &DVector::from_vec(vec![2.0]), &PumpSchedule::constant(0.0), 5.0, &st, |ds| {
            let tm = ds.t0 + 0.5 * ds.h;
            let exact = 2.0 * (-lam * tm).exp();
            worst = worst.max((ds.eval(tm)[0] - exact).abs() / exact);
            Control::Continue
        })
        .unwrap();
        assert!((tr.t - 5.0).abs() < 1e-12);
        assert!((tr.y[0] / (2.0 * (-lam * 5.0f64).exp()) - 1.0).abs() < 1e-7);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn stops_on_request_and_steps_through_segments() {
        let sys = Dense {
            f: |y: &DVector<f64>| DVector::from_vec(vec![1.0 + 0.0 * y[0]]),
            j: |_y: &DVector<f64>| DMatrix::zeros(1, 1),
            dim: 1,
        };
        let sched = PumpSchedule::new(vec![
            crate::model::Segment { start: 0.0, pump: 0.0 },
            crate::model::Segment { start: 1.5, pump: 0.0 },
        ])
        .unwrap();
        let mut ends = Vec::new();
        let tr = integrate(&sys, &DVector::zeros(1), &sched, 3.0, &IntegratorSettings::default(), |ds| {
            ends.push(ds.t1());
            Control::Continue
        })
        .unwrap();
        assert!(ends.contains(&1.5));
        assert!((tr.y[0] - 3.0).abs() < 1e-12);
        let tr = integrate(&sys, &DVector::zeros(1), &sched, 3.0, &IntegratorSettings::default(), |_| Control::Stop).unwrap();
        assert!(tr.stopped && tr.accepted == 1);
    }
}
