//! Small differentiable-computation toolkit: matrices, a reverse-mode tape,
//! Adam, seeded random streams, gradient checking, and checkpoints.

pub mod checkpoint;
mod gradcheck;
mod matrix;
mod param;
mod rng;
mod tape;

pub use gradcheck::{compare_gradients, finite_diff_check};
pub use matrix::Matrix;
pub use param::{init_matrix, AdamConfig, Init, ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tape::{pinball, sigmoid, Tape, Var};
pub(crate) use tape::softmax_row_in_place;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
}

/// `x·W + bias` for `x [b×n]`, `W [n×m]`, `bias [1×m]`.
pub fn linear_forward(x: &Matrix, w: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "linear_forward",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if bias.shape() != (1, w.cols()) {
        return Err(Error::Shape {
            op: "linear_forward bias",
            left: w.shape(),
            right: bias.shape(),
        });
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(bias.clone()));
    let out = tape.affine(xv, wv, bv);
    Ok(tape.value(out).clone())
}

pub fn activate(x: &Matrix, kind: Activation) -> Matrix {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = match kind {
        Activation::Sigmoid => tape.sigmoid(v),
        Activation::Tanh => tape.tanh(v),
        Activation::Relu => tape.relu(v),
        Activation::SoftmaxRows => tape.softmax_rows(v),
    };
    tape.value(out).clone()
}

/// Inverted dropout; identity at inference.
pub fn dropout(x: &Matrix, p: f64, training: bool, rng: &mut RngStream) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} must be in [0, 1)")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = tape.dropout(v, p, training, rng);
    Ok(tape.value(out).clone())
}

/// Dense layer `x·W + b` with Xavier-initialized weights and zero bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut RngStream) -> Self {
        let w = store.add_init(format!("{name}.w"), fan_in, fan_out, init, rng);
        let b = store.add_init(format!("{name}.b"), 1, fan_out, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        m
    }

    #[test]
    fn linear_forward_examples() {
        let w = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let out = linear_forward(&Matrix::identity(2), &w, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out, w);

        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let out = linear_forward(&Matrix::zeros(2, 3), &w, &Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(out, Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]));

        let out = linear_forward(
            &Matrix::row_vector(&[1.0, 2.0]),
            &Matrix::column_vector(&[1.0, 1.0]),
            &Matrix::row_vector(&[0.5]),
        )
        .unwrap();
        assert_eq!(out.get(0, 0), 3.5);
    }

    #[test]
    fn linear_forward_shape_error_names_shapes() {
        let err = linear_forward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &Matrix::zeros(1, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activate(&Matrix::row_vector(&[0.0]), Activation::Sigmoid).get(0, 0), 0.5);
        let r = activate(&Matrix::row_vector(&[-1.0, 2.0]), Activation::Relu);
        assert_eq!(r.data(), &[0.0, 2.0]);
        let s = activate(&Matrix::zeros(1, 4), Activation::SoftmaxRows);
        assert_eq!(s.data(), &[0.25; 4]);
        // Stable at extreme inputs.
        let s = activate(&Matrix::row_vector(&[-800.0, 800.0]), Activation::Sigmoid);
        assert!(s.is_finite() && s.get(0, 0) == 0.0 && s.get(0, 1) == 1.0);
        let s = activate(&Matrix::row_vector(&[1000.0, 0.0]), Activation::SoftmaxRows);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_rows_are_simplices() {
        let mut rng = RngStream::new(11);
        for _ in 0..50 {
            let x = random_matrix(3, 7, &mut rng).map(|v| v * 10.0);
            let s = activate(&x, Activation::SoftmaxRows);
            for r in 0..3 {
                assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(s.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngStream::new(5);
        let x = random_matrix(4, 4, &mut rng);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = RngStream::new(2024).derive("dropout");
        let x = Matrix::filled(1, 100_000, 1.0);
        let y = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn gradcheck_exact_quadratic() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        let x = store.add("x", random_matrix(2, 3, &mut rng));
        let err = finite_diff_check(&mut store, 1e-5, |s, t| {
            let v = t.param(s, x);
            Ok(t.half_sum_sq(v))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    fn linear_sigmoid_mse(seed: u64) -> (ParamStore, impl FnMut(&ParamStore, &mut Tape) -> Result<Var>) {
        let mut rng = RngStream::new(seed);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "l", 4, 3, Init::XavierUniform, &mut rng);
        for id in [layer.b] {
            store.get_mut(id).value = random_matrix(1, 3, &mut rng).map(|v| 0.1 * v);
        }
        let x = random_matrix(5, 4, &mut rng);
        let y = random_matrix(5, 3, &mut rng);
        let f = move |s: &ParamStore, t: &mut Tape| {
            let xv = t.leaf(x.clone());
            let h = layer.forward(t, s, xv);
            let p = t.sigmoid(h);
            Ok(t.mse_loss(p, y.clone()))
        };
        (store, f)
    }

    #[test]
    fn gradcheck_linear_sigmoid_mse() {
        for seed in 0..20 {
            let (mut store, f) = linear_sigmoid_mse(seed);
            let err = finite_diff_check(&mut store, 1e-5, f).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradcheck_catches_corrupted_gradient() {
        let (mut store, mut f) = linear_sigmoid_mse(3);
        store.zero_grad();
        let mut tape = Tape::new();
        let out = f(&store, &mut tape).unwrap();
        tape.backward(out, &mut store);
        let corrupted: Vec<Matrix> = store.grads().iter().map(|g| g.map(|v| 2.0 * v)).collect();
        let err = compare_gradients(&mut store, &corrupted, 1e-5, |s| {
            let mut t = Tape::new();
            let out = f(s, &mut t)?;
            Ok(t.scalar(out))
        })
        .unwrap();
        assert!(err > 0.3, "{err}");
    }
}
