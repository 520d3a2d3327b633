mod common;

use nalgebra::DVector;

use dyecav::experiments::{equilibration_time, log_grid, QuenchSettings};
use dyecav::hierarchy::build_hierarchy;
use dyecav::model::{PumpSchedule, Scene, SceneParams};
use dyecav::solver::{continuation_sweep, find_steady, integrate, Control, Dynamics, IntegratorSettings, Model};

fn small_scene() -> Scene {
    Scene::build(&common::small_params()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn closed_system_conserves_excitations() {
    let scene = small_scene().with_rates(0.0, 0.0);
    let model = Model::new(&scene, None);
    let (m, b) = (scene.n_modes(), scene.n_bins());
    let mut y0 = DVector::zeros(model.dim());
    for i in 0..m {
        y0[i] = 1e8 * (i + 1) as f64;
    }
    for j in 0..b {
        y0[m + j] = 0.2 + 0.6 * ((j as f64) * 0.618).fract();
    }
    let total = |y: &DVector<f64>| (0..m).map(|i| y[i]).sum::<f64>() + (0..b).map(|j| scene.grid.n[j] * y[m + j]).sum::<f64>();
    let st = IntegratorSettings { rel_tol: 1e-12, ..Default::default() };
    let mut worst = 0.0f64;
    let e0 = total(&y0);
    integrate(&model, &y0, &PumpSchedule::constant(0.0), 100.0, &st, |ds| {
        worst = worst.max(rel(total(&ds.eval(ds.t1())), e0));
        Control::Continue
    })
    .unwrap();
    assert!(worst <= 1e-9, "drift {worst:e}");
}

#[test]
fn ascending_and_descending_sweeps_agree() {
    let scene = small_scene();
    let model = Model::new(&scene, None);
    let st = IntegratorSettings::default();
    let up = log_grid(1e-3, 1.0, 30);
    let down: Vec<f64> = up.iter().rev().copied().collect();
    let a = continuation_sweep(&model, &up, &st);
    let d = continuation_sweep(&model, &down, &st);
    for (k, r) in a.iter().enumerate() {
        let x = r.as_ref().unwrap();
        let y = d[up.len() - 1 - k].as_ref().unwrap();
        assert_eq!(x.p, y.p);
        for i in 0..scene.n_modes() {
            assert!(rel(x.n()[i], y.n()[i]) <= 1e-8, "P = {} mode {i}: {} vs {}", x.p, x.n()[i], y.n()[i]);
        }
    }
}

#[test]
fn hierarchy_error_shrinks_with_depth() {
    let scene = Scene::build(&SceneParams::rhodamine(0.52)).unwrap();
    let st = IntegratorSettings::default();
    let full = Model::new(&scene, None);
    let reference = continuation_sweep(&full, &[0.1], &st).remove(0).unwrap();
    let mut last = f64::INFINITY;
    for depth in 0..=3 {
        let basis = build_hierarchy(&scene, depth).unwrap();
        let model = Model::new(&scene, Some(&basis));
        let guess = model.flatten(&reference.state).unwrap();
        let ss = find_steady(&model, 0.1, &guess, &st).unwrap();
        let err = (0..scene.n_modes()).map(|i| rel(ss.n()[i], reference.n()[i])).fold(0.0, f64::max);
        assert!(err <= last * (1.0 + 1e-9), "depth {depth}: {err:e} after {last:e}");
        last = err;
    }
    assert!(last < 1e-9);
}

#[test]
fn depth_two_tracks_the_full_field_quench() {
    let scene = small_scene();
    let st = IntegratorSettings::default();
    let full = Model::new(&scene, None);
    let basis = build_hierarchy(&scene, 2).unwrap();
    let hier = Model::new(&scene, Some(&basis));
    let start = continuation_sweep(&full, &[1e-3], &st).remove(0).unwrap();
    let sample = |model: &Model, y0: &DVector<f64>| {
        let times: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        let mut out = Vec::new();
        let mut next = 0;
        integrate(model, y0, &PumpSchedule::constant(0.25), 100.0, &st, |ds| {
            while next < times.len() && times[next] <= ds.t1() {
                out.push((0..scene.n_modes()).map(|i| ds.eval_component(i, times[next])).collect::<Vec<_>>());
                next += 1;
            }
            Control::Continue
        })
        .unwrap();
        out
    };
    let a = sample(&full, &start.y);
    let b = sample(&hier, &hier.flatten(&start.state).unwrap());
    let worst = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst:e}");
}

fn small_quench(q: &QuenchSettings, st: &IntegratorSettings) -> dyecav::experiments::QuenchRecord {
    let scene = small_scene();
    let model = Model::new(&scene, None);
    let seed = continuation_sweep(&model, &[1e-2], st).remove(0).unwrap();
    equilibration_time(&model, 1e-2, 3e-2, &seed.y, q, st).unwrap()
}

#[test]
fn looser_threshold_never_takes_longer() {
    let st = IntegratorSettings::default();
    let times: Vec<f64> = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&d| small_quench(&QuenchSettings { d, ..Default::default() }, &st).t_eq)
        .collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
}

#[test]
fn equilibration_time_is_converged_in_rel_tol() {
    let q = QuenchSettings::default();
    let a = small_quench(&q, &IntegratorSettings::default());
    let b = small_quench(&q, &IntegratorSettings { rel_tol: 5e-11, ..Default::default() });
    assert!(a.converged && b.converged);
    assert!(rel(a.t_eq, b.t_eq) < 1e-3, "{} vs {}", a.t_eq, b.t_eq);
}

#[test]
fn mirrored_modes_share_quench_records() {
    let scene = small_scene();
    let rec = small_quench(&QuenchSettings::default(), &IntegratorSettings::default());
    for (i, m) in scene.modes.modes.iter().enumerate() {
        let k = scene.modes.position(m.swapped()).unwrap();
        let (a, b) = (&rec.modes[i], &rec.modes[k]);
        assert!(rel(a.n_peak, b.n_peak) <= 1e-8 && rel(a.n_end, b.n_end) <= 1e-8, "{m}");
        assert!(rel(a.t_settle, b.t_settle) <= 1e-6, "{m}: {} vs {}", a.t_settle, b.t_settle);
    }
}
