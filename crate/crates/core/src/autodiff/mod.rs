//! Reverse-mode automatic differentiation over dense arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{OpSpec, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t64(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_operation() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn tanh_at_zero_and_softplus_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[1], &[0.0]));
        assert_eq!(tape.value(tape.tanh(x)).data(), &[0.0]);
        let sp = tape.value(tape.softplus(x)).data()[0];
        assert!((sp - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let loss = tape.sum(tape.square(w));
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_mean() {
        let tape = Tape::new();
        let w = tape.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.mean(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reused_tensor_accumulates_product_rule() {
        // sum(a*a) has gradient 2a: twice the single-use sum(a*b) gradient b.
        let tape = Tape::new();
        let a = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(tape.mul(a, a).unwrap());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let y = tape.square(w);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn replay_without_zeroing_doubles_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(t64(&[3], &[0.5, -1.5, 2.0]));
        let loss = tape.sum(tape.square(tape.sin(w)));
        tape.backward(loss).unwrap();
        let once = tape.grad(w).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let point = t64(&[4], &[0.3, -0.7, 1.2, 0.1]);

        let g_of = |which: u8| -> Tensor<f64> {
            let tape = Tape::new();
            let w = tape.leaf(point.clone());
            let l1 = tape.sum(tape.square(w));
            let l2 = tape.mean(tape.sigmoid(w));
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap()
        };

        let (g1, g2, gsum) = (g_of(1), g_of(2), g_of(0));
        for i in 0..4 {
            let lin = g1.data()[i] + g2.data()[i];
            assert!((gsum.data()[i] - lin).abs() <= 1e-12);
        }
    }

    #[test]
    fn constants_reachable_from_loss_receive_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let c = tape.leaf(t64(&[2], &[3.0, 4.0]));
        let loss = tape.sum(tape.mul(w, c).unwrap());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let point = Tensor::from_vec(vec![8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let err = grad_check(
            |tape, x| Ok(tape.sum(tape.square(x))),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let point = Tensor::from_vec(vec![8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let err = grad_check(|tape, x| Ok(tape.sum(tape.sigmoid(x))), &point, 1e-5).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let point = t64(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let err = grad_check(
            |tape, x| {
                let c = tape.leaf(Tensor::scalar(5.0));
                let zeroed = tape.mul_scalar(tape.sum(x), 0.0);
                tape.add(c, zeroed)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Evaluates an op as a scalar function with constant co-inputs so every
    /// registered operation goes through the same finite-difference harness.
    fn check_registered_op(op: &OpSpec<f64>, rng: &mut ChaCha8Rng) -> f64 {
        // Positive-offset samples keep log/div/relu/huber away from kinks.
        let sample = |rng: &mut ChaCha8Rng, n: usize, positive: bool| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let mag = rng.gen_range(0.2..1.8);
                    if positive || rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        };
        let positive_only = matches!(op, OpSpec::Log | OpSpec::Div);
        let point_shape: Vec<usize> = match op {
            OpSpec::MatMul => vec![3, 4],
            OpSpec::Broadcast(_) => vec![4],
            OpSpec::Reshape(_) => vec![2, 6],
            OpSpec::SumAxis(_) | OpSpec::Concat(_) => vec![2, 3],
            OpSpec::Slice { .. } | OpSpec::CumsumExclusive => vec![2, 5],
            _ => vec![6],
        };
        let n: usize = point_shape.iter().product();
        let point = Tensor::from_vec(point_shape.clone(), sample(rng, n, positive_only)).unwrap();
        let co = sample(rng, 24, positive_only);

        let op = op.clone();
        let err = grad_check(
            move |tape: &Tape<f64>, x: Var| {
                let y = match &op {
                    OpSpec::MatMul => {
                        let b = tape.leaf(Tensor::from_vec(vec![4, 2], co[..8].to_vec()).unwrap());
                        tape.forward_op(&op, &[x, b])?
                    }
                    OpSpec::Add | OpSpec::Sub | OpSpec::Mul | OpSpec::Div => {
                        let b = tape.leaf(Tensor::from_vec(vec![6], co[..6].to_vec()).unwrap());
                        tape.forward_op(&op, &[x, b])?
                    }
                    OpSpec::Concat(_) => {
                        let b =
                            tape.leaf(Tensor::from_vec(vec![2, 3], co[..6].to_vec()).unwrap());
                        tape.forward_op(&op, &[x, b])?
                    }
                    _ => tape.forward_op(&op, &[x])?,
                };
                // Squash to a scalar through a nonlinearity so gradients are
                // shape-position sensitive, not just a uniform sum.
                let weights = tape.leaf(Tensor::from_vec(
                    vec![tape.shape_of(y).iter().product()],
                    (0..tape.shape_of(y).iter().product::<usize>())
                        .map(|i| 0.3 + 0.1 * i as f64)
                        .collect(),
                )?);
                let flat = tape.reshape(y, &[tape.shape_of(y).iter().product::<usize>()])?;
                Ok(tape.sum(tape.mul(flat, weights)?))
            },
            &point,
            1e-5,
        )
        .unwrap();
        err
    }

    #[test]
    fn every_registered_op_passes_grad_check() {
        let registry: Vec<OpSpec<f64>> = vec![
            OpSpec::MatMul,
            OpSpec::Add,
            OpSpec::Sub,
            OpSpec::Mul,
            OpSpec::Div,
            OpSpec::Broadcast(vec![3, 4]),
            OpSpec::Reshape(vec![3, 4]),
            OpSpec::Sum,
            OpSpec::Mean,
            OpSpec::SumAxis(0),
            OpSpec::SumAxis(1),
            OpSpec::Relu,
            OpSpec::Tanh,
            OpSpec::Sigmoid,
            OpSpec::Softplus,
            OpSpec::Exp,
            OpSpec::Log,
            OpSpec::Sin,
            OpSpec::Cos,
            OpSpec::Square,
            OpSpec::Neg,
            OpSpec::AddScalar(0.7),
            OpSpec::MulScalar(-1.3),
            OpSpec::ClampMin(0.05),
            OpSpec::Huber,
            OpSpec::Concat(0),
            OpSpec::Concat(1),
            OpSpec::Slice {
                axis: 1,
                start: 1,
                len: 3,
            },
            OpSpec::Slice {
                axis: 0,
                start: 0,
                len: 1,
            },
            OpSpec::CumsumExclusive,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for op in &registry {
            for trial in 0..10 {
                let err = check_registered_op(op, &mut rng);
                assert!(
                    err <= 1e-4,
                    "op {} trial {trial}: relative error {err}",
                    op.name()
                );
            }
        }
    }

    #[test]
    fn broadcast_trailing_alignment() {
        let tape = Tape::new();
        let bias = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.broadcast(bias, &[2, 3]).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let col = tape.leaf(t64(&[2, 1], &[5.0, 6.0]));
        let c = tape.broadcast(col, &[2, 3]).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 5.0, 5.0, 6.0, 6.0, 6.0]);

        // Contraction is not broadcasting.
        assert!(tape.broadcast(b, &[3]).is_err());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = tape.slice(x, 1, 0, 1).unwrap();
        let right = tape.slice(x, 1, 1, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn cumsum_exclusive_rows() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]));
        let y = tape.cumsum_exclusive(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 3.0, 0.0, 10.0, 30.0]);
    }

    proptest::proptest! {
        #[test]
        fn prop_sum_axis_matches_full_sum(rows in 1usize..5, cols in 1usize..5, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![rows, cols], data).unwrap());
            let by_axis = tape.sum(tape.sum_axis(x, 0).unwrap());
            let direct = tape.sum(x);
            let a = tape.item(by_axis).unwrap();
            let b = tape.item(direct).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn prop_broadcast_backward_sums_counts(rows in 1usize..6, cols in 1usize..6) {
            let tape = Tape::<f64>::new();
            let v = tape.leaf(Tensor::full(&[cols], 1.0));
            let b = tape.broadcast(v, &[rows, cols]).unwrap();
            let loss = tape.sum(b);
            tape.backward(loss).unwrap();
            let g = tape.grad(v).unwrap();
            proptest::prop_assert!(g.data().iter().all(|&x| x == rows as f64));
        }
    }
}
