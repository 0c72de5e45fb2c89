//! Dense tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, NoGradGuard, Tape, Var, GATHER_ZERO};
pub use tensor::{Scalar, Tensor};

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(1, |n|)` over paired analytic and numeric gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.value(tape.softmax(a)).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 2]);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.value(tape.matmul(va, vb).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn trailing_and_scalar_broadcast() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let row = tape.constant(t(&[2], &[10.0, 20.0]));
        let s = tape.scalar(1.0);
        assert_eq!(
            tape.value(tape.add(a, row).unwrap()).data(),
            &[11.0, 22.0, 13.0, 24.0]
        );
        assert_eq!(
            tape.value(tape.sub(s, a).unwrap()).data(),
            &[0.0, -1.0, -2.0, -3.0]
        );
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(tape.mul(x, x).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(
            tape.backward(x),
            Err(crate::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn no_grad_blocks_gradient_and_keeps_values() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[0.5, -1.5]), true);
        let free = tape.value(tape.exp(w));
        let guarded = {
            let _outer = tape.no_grad();
            let _inner = tape.no_grad();
            tape.exp(w)
        };
        assert!(tape.grad_enabled());
        assert_eq!(tape.value(guarded), free);
        assert!(!tape.is_tracked(guarded));
        let loss = tape.sum(guarded);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn nested_no_grad_is_one_scope() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[1]), true);
        let outer = tape.no_grad();
        {
            let _inner = tape.no_grad();
        }
        let y = tape.exp(w);
        assert!(!tape.is_tracked(y));
        drop(outer);
        assert!(tape.is_tracked(tape.exp(w)));
    }

    /// Builds a scalar from one unary/binary primitive and checks it against
    /// central differences.
    fn check_primitive(name: &str, build: impl Fn(&Tape<f64>, Var, Var) -> Var, shapes: (&[usize], &[usize])) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31);
        let xa = random(&mut rng, shapes.0);
        let xb = random(&mut rng, shapes.1).data().iter().map(|v| v + 2.5 * v.signum()).collect::<Vec<_>>();
        let xb = Tensor::new(shapes.1.to_vec(), xb).unwrap();
        let weights = random(&mut rng, &[64]);
        let eval = |a: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let va = tape.leaf(Tensor::new(shapes.0.to_vec(), a.to_vec()).unwrap(), true);
            let vb = tape.leaf(Tensor::new(shapes.1.to_vec(), b.to_vec()).unwrap(), true);
            let y = build(&tape, va, vb);
            let n = tape.value(y).len();
            let w = tape.constant(Tensor::new(tape.shape(y), weights.data()[..n].to_vec()).unwrap());
            let loss = tape.sum(tape.mul(y, w).unwrap());
            let g = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                g.get_or_zeros(va).to_f64_vec(),
                g.get_or_zeros(vb).to_f64_vec(),
            )
        };
        let (_, ga, gb) = eval(xa.data(), xb.data());
        let na = finite_difference(xa.data(), 1e-5, |p| eval(p, xb.data()).0);
        let nb = finite_difference(xb.data(), 1e-5, |p| eval(xa.data(), p).0);
        let err = max_relative_error(&ga, &na).max(max_relative_error(&gb, &nb));
        assert!(err <= 1e-4, "{name}: max relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let m = &[3, 4][..];
        let r = &[4][..];
        check_primitive("add", |t, a, b| t.add(a, b).unwrap(), (m, r));
        check_primitive("sub", |t, a, b| t.sub(a, b).unwrap(), (m, m));
        check_primitive("mul", |t, a, b| t.mul(a, b).unwrap(), (m, r));
        check_primitive("div", |t, a, b| t.div(a, b).unwrap(), (m, m));
        check_primitive("max", |t, a, b| t.maximum(a, b).unwrap(), (m, m));
        check_primitive("min", |t, a, b| t.minimum(a, b).unwrap(), (m, m));
        check_primitive("matmul", |t, a, b| t.matmul(a, b).unwrap(), (m, &[4, 2]));
        check_primitive("sigmoid", |t, a, _| t.sigmoid(a), (m, r));
        check_primitive("relu", |t, a, _| t.relu(a), (m, r));
        check_primitive("exp", |t, a, _| t.exp(a), (m, r));
        check_primitive("log", |t, _, b| t.log(t.abs(b)), (m, r));
        check_primitive("log_sigmoid", |t, a, _| t.log_sigmoid(t.scale(a, 8.0)), (m, r));
        check_primitive("abs", |t, a, _| t.abs(a), (m, r));
        check_primitive("power", |t, _, b| t.power(t.abs(b), 1.7), (m, r));
        check_primitive("softmax", |t, a, _| t.softmax(a), (m, r));
        check_primitive("layernorm", |t, a, _| t.layer_norm(a, 1e-5), (m, r));
        check_primitive("transpose", |t, a, _| t.transpose(a).unwrap(), (m, r));
        check_primitive("reshape", |t, a, _| t.reshape(a, &[2, 6]).unwrap(), (m, r));
        check_primitive("slice", |t, a, _| t.slice_last(a, 1, 2).unwrap(), (m, r));
        check_primitive(
            "concat",
            |t, a, b| {
                let b2 = t.reshape(b, &[1, 4]).unwrap();
                let s = t.slice_last(a, 0, 1).unwrap();
                let s = t.reshape(s, &[1, 3]).unwrap();
                t.concat_last(&[b2, s, b2]).unwrap()
            },
            (m, r),
        );
        check_primitive("sum", |t, a, _| t.sum(a), (m, r));
        check_primitive("mean", |t, a, _| t.mean(a), (m, r));
        check_primitive("sum_last", |t, a, _| t.sum_last(a), (m, r));
        check_primitive("affine", |t, a, _| t.affine(a, -3.0, 0.5), (m, r));
        check_primitive(
            "gather",
            |t, a, _| {
                let idx = Rc::new(vec![0, 5, GATHER_ZERO, 5, 11, 2]);
                t.gather(a, idx, &[2, 3]).unwrap()
            },
            (m, r),
        );
    }

    #[test]
    fn two_layer_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[5, 3]);
        let params = [random(&mut rng, &[3, 8]), random(&mut rng, &[8]), random(&mut rng, &[8, 2])];
        let flat: Vec<f64> = params.iter().flat_map(|p| p.data().to_vec()).collect();
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = params
                .iter()
                .map(|p| {
                    let n = p.len();
                    let v = tape.leaf(Tensor::new(p.shape().to_vec(), flat[off..off + n].to_vec()).unwrap(), true);
                    off += n;
                    v
                })
                .collect();
            let xi = tape.constant(x.clone());
            let h = tape.relu(tape.add(tape.matmul(xi, vars[0]).unwrap(), vars[1]).unwrap());
            let out = tape.matmul(h, vars[2]).unwrap();
            let loss = tape.mean(tape.power(out, 2.0));
            let g = tape.backward(loss).unwrap();
            let grads = vars.iter().flat_map(|&v| g.get_or_zeros(v).to_f64_vec()).collect();
            (tape.value(loss).item(), grads)
        };
        let (_, analytic) = eval(&flat);
        let numeric = finite_difference(&flat, 1e-5, |p| eval(p).0);
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn identical_inputs_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let tape = Tape::<f32>::new();
            let w = tape.leaf(random(&mut rng, &[4, 4]).cast(), true);
            let y = tape.softmax(tape.matmul(w, w).unwrap());
            let loss = tape.sum(tape.layer_norm(y, 1e-5));
            let loss = tape.add(loss, tape.sum(tape.power(w, 2.0))).unwrap();
            (tape.value(loss), tape.backward(loss).unwrap().get(w).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_ops_match_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[3, 5]);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let sm = tape.value(tape.softmax(v));
        let ln = tape.value(tape.layer_norm(v, 1e-5));
        for r in 0..3 {
            let row = x.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                assert!((sm.row(r)[j] - row[j].exp() / z).abs() < 1e-15);
                assert!((ln.row(r)[j] - (row[j] - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
            }
        }
        let sig = tape.value(tape.sigmoid(v));
        let lsg = tape.value(tape.log_sigmoid(v));
        for (k, &xv) in x.data().iter().enumerate() {
            let s = 1.0 / (1.0 + (-xv).exp());
            assert!((sig.data()[k] - s).abs() < 1e-15);
            assert!((lsg.data()[k] - s.ln()).abs() < 1e-14);
        }
    }
}
