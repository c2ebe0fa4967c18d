//! Single-step cell gradients against central differences, with loss
//! `½‖h‖² + ½‖c‖²` so that the upstream gradients are `h` and `c`.

use fusion_lstm::cells::{cell_step_backward, CellKind, CellParams, CellState};
use fusion_lstm::gradcheck::{numeric_gradient, relative_error};
use fusion_lstm::numerics::{RngStream, Vector};
use fusion_lstm::params::Parameters;

// Larger than the whole-model step: the loss here is O(10), so round-off
// at 1e-6 alone would approach the tolerance on micro-scale gradients.
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn loss(params: &CellParams, xs: &[Vec<f64>], prev: &CellState) -> f64 {
    let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (s, _) = params.step(&inputs, prev).unwrap();
    0.5 * (s.h.iter().map(|v| v * v).sum::<f64>() + s.c.iter().map(|v| v * v).sum::<f64>())
}

fn random_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.5 * rng.gaussian()).collect()
}

fn check(kind: CellKind, seed: u64) {
    let (input, hidden) = (3, 4);
    let mut rng = RngStream::new(seed);
    let mut params = CellParams::zeros(kind, input, hidden);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = 0.5 * rng.gaussian();
        }
    }
    let xs: Vec<Vec<f64>> = (0..kind.stream_count()).map(|_| random_vec(&mut rng, input)).collect();
    let prev = CellState {
        h: Vector(random_vec(&mut rng, hidden)),
        c: Vector(random_vec(&mut rng, hidden)),
    };

    let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (state, cache) = params.step(&inputs, &prev).unwrap();
    let grads = cell_step_backward(&params, &cache, &state.h, &state.c).unwrap();

    let mut worst = 0.0f64;
    let analytic = grads.params.flatten();
    let numeric = numeric_gradient(&mut params.clone(), STEP, |p| loss(p, &xs, &prev));
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(relative_error(*a, *n));
    }

    let fd = |f: &dyn Fn(f64) -> f64| (f(STEP) - f(-STEP)) / (2.0 * STEP);
    for (s, x) in xs.iter().enumerate() {
        for k in 0..x.len() {
            let n = fd(&|d| {
                let mut xs2 = xs.clone();
                xs2[s][k] += d;
                loss(&params, &xs2, &prev)
            });
            worst = worst.max(relative_error(grads.inputs[s][k], n));
        }
    }
    for k in 0..hidden {
        let nh = fd(&|d| {
            let mut p = prev.clone();
            p.h.0[k] += d;
            loss(&params, &xs, &p)
        });
        let nc = fd(&|d| {
            let mut p = prev.clone();
            p.c.0[k] += d;
            loss(&params, &xs, &p)
        });
        worst = worst.max(relative_error(grads.prev.h[k], nh));
        worst = worst.max(relative_error(grads.prev.c[k], nc));
    }
    assert!(worst < TOL, "{kind} seed {seed}: max relative error {worst:e}");
}

#[test]
fn conventional_cell_gradients() {
    for seed in 0..3 {
        check(CellKind::Conventional, seed);
    }
}

#[test]
fn glf_cell_gradients() {
    for seed in 0..3 {
        check(CellKind::Glf, seed);
    }
}

#[test]
fn slf_cell_gradients() {
    for seed in 0..3 {
        check(CellKind::Slf, seed);
    }
}
