use ctsel::autodiff::{Tape, Tensor, Var};
use ctsel::rng;
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Two-layer tanh/sigmoid network loss against fixed targets.
fn two_layer_loss(w1: &Tensor, b1: &Tensor, w2: &Tensor, x: &Tensor, y: &Tensor) -> f64 {
    let tape = Tape::new();
    let (w1, b1, w2) = (tape.weight(w1.clone()), tape.weight(b1.clone()), tape.weight(w2.clone()));
    let h = tape.constant(x.clone()).matmul(w1).unwrap().add(b1).unwrap().tanh().unwrap();
    let out = h.matmul(w2).unwrap().sigmoid().unwrap();
    out.sub(tape.constant(y.clone())).unwrap().square().unwrap().mean().unwrap().item()
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let x = random(&[6, 4], 1);
    let y = random(&[6, 2], 2);
    let w1 = random(&[4, 5], 3);
    let b1 = random(&[1, 5], 4);
    let w2 = random(&[5, 2], 5);

    let tape = Tape::new();
    let (v1, vb, v2) = (tape.weight(w1.clone()), tape.weight(b1.clone()), tape.weight(w2.clone()));
    let h = tape.constant(x.clone()).matmul(v1).unwrap().add(vb).unwrap().tanh().unwrap();
    let out = h.matmul(v2).unwrap().sigmoid().unwrap();
    let loss = out.sub(tape.constant(y.clone())).unwrap().square().unwrap().mean().unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = [grads.wrt(v1), grads.wrt(vb), grads.wrt(v2)];

    let h = 1e-5;
    let mut pick = rng::stream(9, &[]);
    for _ in 0..20 {
        let which = pick.random_range(0..3);
        let mut params = [w1.clone(), b1.clone(), w2.clone()];
        let idx = pick.random_range(0..params[which].len());
        let base = params[which].data()[idx];
        params[which].data_mut()[idx] = base + h;
        let up = two_layer_loss(&params[0], &params[1], &params[2], &x, &y);
        params[which].data_mut()[idx] = base - h;
        let down = two_layer_loss(&params[0], &params[1], &params[2], &x, &y);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[which].data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "param {which}[{idx}]: analytic {a} numeric {numeric}");
    }
}

proptest! {
    #[test]
    fn gradient_is_linear_in_loss(seed in 0u64..1000, c in -3.0f64..3.0) {
        let w0 = random(&[3, 2], seed);
        let x = random(&[4, 3], seed + 1);
        let grad = |scale: f64| {
            let tape = Tape::new();
            let w = tape.weight(w0.clone());
            let l = tape.constant(x.clone()).matmul(w).unwrap().tanh().unwrap().sum().unwrap();
            let l = l.scale(scale).unwrap();
            tape.backward(l).unwrap().wrt(w)
        };
        let g1 = grad(1.0);
        let gc = grad(c);
        for (a, b) in g1.data().iter().zip(gc.data()) {
            prop_assert!((a * c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let tape = Tape::new();
            let w = tape.weight(random(&[3, 3], seed));
            let x = tape.constant(random(&[5, 3], seed + 7));
            let y = x.matmul(w).unwrap().dropout(0.3, &mut rng::stream(seed, &[1])).unwrap();
            let l = y.square().unwrap().mean().unwrap();
            (l.item(), tape.backward(l).unwrap().wrt(w))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn sum_of_gradients_equals_gradient_of_sum(seed in 0u64..1000) {
        let w0 = random(&[2, 3], seed);
        let both = grad_of(&w0, |w| sq_sum(w).add(exp_mean(w)).unwrap());
        let mut sep = grad_of(&w0, sq_sum);
        sep.add_assign(&grad_of(&w0, exp_mean));
        for (a, b) in both.data().iter().zip(sep.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

fn sq_sum(w: Var<'_>) -> Var<'_> {
    w.square().unwrap().sum().unwrap()
}

fn exp_mean(w: Var<'_>) -> Var<'_> {
    w.exp().unwrap().mean().unwrap()
}

fn grad_of(w0: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> Tensor {
    let tape = Tape::new();
    let w = tape.weight(w0.clone());
    let l = f(w);
    tape.backward(l).unwrap().wrt(w)
}
