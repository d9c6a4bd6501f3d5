//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly what the segmentation networks need: conv2d,
//! transposed conv (kernel == stride), max pooling, leaky ReLU, channel
//! concatenation, channel softmax, the training losses, and a few scalar
//! combinators. Forward values are 64-bit; checkpoints quantize to 32-bit.

mod adam;
mod conv;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests {
    use super::testutil::{finite_diff_grad, max_rel_err, wiggle};
    use super::*;
    use crate::error::Error;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    fn grad_param(t: Tensor) -> Tensor {
        t.mark_parameter()
    }

    // ── conv2d ──────────────────────────────────────────────────────

    #[test]
    fn conv2d_one_by_one_kernel_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t4(1, 1, 1, 1, vec![2.0]));
        let b = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let data = wiggle(2 * 5 * 4, 0.3);
        let x = tape.constant(t4(1, 2, 5, 4, data.clone()));
        // Two filters, each passing through one input channel's center.
        let mut wdata = vec![0.0; 2 * 2 * 9];
        wdata[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
        wdata[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
        let w = tape.constant(t4(2, 2, 3, 3, wdata));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let got = tape.value(y).data();
        for (a, b) in got.iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_shape_contract() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 64, 64]));
        let w = tape.constant(Tensor::zeros(vec![64, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![64]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 64, 64]);
    }

    #[test]
    fn conv2d_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(Error::Shape(_))));
        let w2 = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w2, b, 0, 1), Err(Error::Config(_))));
        let wide = tape.constant(Tensor::zeros(vec![1, 2, 7, 7]));
        assert!(matches!(tape.conv2d(x, wide, b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let (n, cin, h, w, cout, k) = (2, 2, 4, 5, 3, 3);
        let x0 = wiggle(n * cin * h * w, 0.1);
        let w0 = wiggle(cout * cin * k * k, 0.5);
        let b0 = wiggle(cout, 0.9);

        let eval = |x: &[f64], wd: &[f64], bd: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(n, cin, h, w, x.to_vec()));
            let wv = tape.constant(t4(cout, cin, k, k, wd.to_vec()));
            let bv = tape.constant(Tensor::new(vec![cout], bd.to_vec()).unwrap());
            let y = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
            // Weighted sum makes the scalar sensitive to every output.
            let seed: Vec<f64> = wiggle(tape.value(y).len(), 2.2);
            tape.value(y)
                .data()
                .iter()
                .zip(&seed)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(n, cin, h, w, x0.clone())));
        let wv = tape.leaf(grad_param(t4(cout, cin, k, k, w0.clone())));
        let bv = tape.leaf(grad_param(Tensor::new(vec![cout], b0.clone()).unwrap()));
        let y = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
        let seed = Tensor::new(
            tape.value(y).shape().to_vec(),
            wiggle(tape.value(y).len(), 2.2),
        )
        .unwrap();
        tape.backward_seeded(y, &seed).unwrap();

        let fd_x = finite_diff_grad(|x| eval(x, &w0, &b0), &x0, 1e-5);
        let fd_w = finite_diff_grad(|wd| eval(&x0, wd, &b0), &w0, 1e-5);
        let fd_b = finite_diff_grad(|bd| eval(&x0, &w0, bd), &b0, 1e-5);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(tape.grad(wv).unwrap(), &fd_w) < 1e-6);
        assert!(max_rel_err(tape.grad(bv).unwrap(), &fd_b) < 1e-6);
    }

    // ── conv_transpose2d ────────────────────────────────────────────

    #[test]
    fn conv_transpose_scatters_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 1, 1, vec![3.5]));
        let w = tape.constant(t4(1, 1, 2, 2, vec![1.0; 4]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[3.5; 4]);
    }

    #[test]
    fn conv_transpose_shape_contract() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1024, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1024, 512, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![512]));
        let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 512, 8, 8]);
    }

    #[test]
    fn conv_transpose_zero_input_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 2, 2]));
        let w = tape.constant(t4(3, 2, 2, 2, wiggle(3 * 2 * 4, 0.4)));
        let b = tape.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
        let (_, _, oh, ow) = tape.value(y).dims4().unwrap();
        for n in 0..2 {
            for (c, expect) in [0.25, -1.5].iter().enumerate() {
                for p in 0..oh * ow {
                    assert_eq!(tape.value(y).data()[(n * 2 + c) * oh * ow + p], *expect);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_rejects_kernel_stride_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(
            tape.conv_transpose2d(x, w, b, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let (n, cin, h, w, cout, k) = (2, 3, 2, 3, 2, 2);
        let x0 = wiggle(n * cin * h * w, 0.2);
        let w0 = wiggle(cin * cout * k * k, 0.6);
        let b0 = wiggle(cout, 1.0);

        let eval = |x: &[f64], wd: &[f64], bd: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(n, cin, h, w, x.to_vec()));
            let wv = tape.constant(t4(cin, cout, k, k, wd.to_vec()));
            let bv = tape.constant(Tensor::new(vec![cout], bd.to_vec()).unwrap());
            let y = tape.conv_transpose2d(xv, wv, bv, k).unwrap();
            let seed: Vec<f64> = wiggle(tape.value(y).len(), 3.3);
            tape.value(y)
                .data()
                .iter()
                .zip(&seed)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(n, cin, h, w, x0.clone())));
        let wv = tape.leaf(grad_param(t4(cin, cout, k, k, w0.clone())));
        let bv = tape.leaf(grad_param(Tensor::new(vec![cout], b0.clone()).unwrap()));
        let y = tape.conv_transpose2d(xv, wv, bv, k).unwrap();
        let seed = Tensor::new(
            tape.value(y).shape().to_vec(),
            wiggle(tape.value(y).len(), 3.3),
        )
        .unwrap();
        tape.backward_seeded(y, &seed).unwrap();

        let fd_x = finite_diff_grad(|x| eval(x, &w0, &b0), &x0, 1e-5);
        let fd_w = finite_diff_grad(|wd| eval(&x0, wd, &b0), &w0, 1e-5);
        let fd_b = finite_diff_grad(|bd| eval(&x0, &w0, bd), &b0, 1e-5);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(tape.grad(wv).unwrap(), &fd_w) < 1e-6);
        assert!(max_rel_err(tape.grad(bv).unwrap(), &fd_b) < 1e-6);
    }

    /// conv_transpose2d is the adjoint of conv2d with the same kernel:
    /// <conv(x), y> == <x, conv_transpose(y)> at zero bias.
    #[test]
    fn conv_and_transpose_are_adjoint() {
        let (cin, cout, k) = (3, 2, 2);
        let (h, w) = (4, 6);
        // conv with stride = k, pad 0 maps (h, w) -> (h/k, w/k).
        let x = t4(1, cin, h, w, wiggle(cin * h * w, 0.11));
        let y = t4(1, cout, h / k, w / k, wiggle(cout * (h / k) * (w / k), 0.77));
        // The conv weight [Cout, Cin, k, k] doubles as the transpose
        // weight [Cin', Cout', k, k] with Cin' = Cout and Cout' = Cin:
        // the very same buffer realizes the adjoint.
        let wconv = wiggle(cout * cin * k * k, 0.5);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(t4(cout, cin, k, k, wconv.clone()));
        let zb = tape.constant(Tensor::zeros(vec![cout]));
        let lx = tape.conv2d(xv, wv, zb, k, 0).unwrap();
        let lhs: f64 = tape
            .value(lx)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();

        let mut tape2 = Tape::new();
        let yv = tape2.constant(y);
        let wv2 = tape2.constant(t4(cout, cin, k, k, wconv));
        let zb2 = tape2.constant(Tensor::zeros(vec![cin]));
        let lty = tape2.conv_transpose2d(yv, wv2, zb2, k).unwrap();
        let rhs: f64 = tape2
            .value(lty)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();

        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }

    // ── maxpool2d ───────────────────────────────────────────────────

    #[test]
    fn maxpool_takes_window_max() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_gradient_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(grad_param(t4(1, 1, 4, 4, vec![7.0; 16])));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0; 4]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        // Exactly one unit of gradient per window, at its top-left corner.
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        for (i, &v) in g.iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            let expect = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "at ({r}, {c})");
        }
    }

    #[test]
    fn maxpool_shape_contract_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 64, 64, 64]));
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 32, 32]);
        let odd = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2d(odd, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        // Distinct values keep the argmax stable under perturbation.
        let x0: Vec<f64> = (0..2 * 4 * 4).map(|i| (i * 37 % 32) as f64 * 0.1).collect();
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(1, 2, 4, 4, x.to_vec()));
            let y = tape.maxpool2d(xv, 2).unwrap();
            let seed: Vec<f64> = wiggle(tape.value(y).len(), 0.9);
            tape.value(y)
                .data()
                .iter()
                .zip(&seed)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(1, 2, 4, 4, x0.clone())));
        let y = tape.maxpool2d(xv, 2).unwrap();
        let seed = Tensor::new(
            tape.value(y).shape().to_vec(),
            wiggle(tape.value(y).len(), 0.9),
        )
        .unwrap();
        tape.backward_seeded(y, &seed).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-6);
    }

    // ── leaky_relu ──────────────────────────────────────────────────

    #[test]
    fn leaky_relu_pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 1, 3, vec![5.0, -2.0, 0.0]));
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -0.02, 0.0]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        assert!(matches!(tape.leaky_relu(x, 1.0), Err(Error::Config(_))));
        assert!(matches!(tape.leaky_relu(x, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn leaky_relu_gradient_matches_finite_differences() {
        // Keep values away from the kink at zero.
        let x0: Vec<f64> = wiggle(12, 0.25).iter().map(|v| v + 0.3 * v.signum()).collect();
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(1, 3, 2, 2, x.to_vec()));
            let y = tape.leaky_relu(xv, 0.01).unwrap();
            let s = tape.sum_all(y).unwrap();
            tape.value(s).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(1, 3, 2, 2, x0.clone())));
        let y = tape.leaky_relu(xv, 0.01).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-7);
    }

    // ── concat_channels ─────────────────────────────────────────────

    #[test]
    fn concat_layout_contract() {
        let mut tape = Tape::new();
        let a = tape.constant(t4(2, 2, 2, 2, wiggle(16, 0.0)));
        let b = tape.constant(t4(2, 3, 2, 2, wiggle(24, 5.0)));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 2, 2]);
        let bd = tape.value(b).data().to_vec();
        let yd = tape.value(y).data();
        for n in 0..2 {
            for k in 0..3 {
                for p in 0..4 {
                    assert_eq!(yd[(n * 5 + 2 + k) * 4 + p], bd[(n * 3 + k) * 4 + p]);
                }
            }
        }
    }

    #[test]
    fn concat_with_empty_member_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 3, 2, 2, wiggle(12, 0.8)));
        let empty = tape.constant(Tensor::zeros(vec![1, 0, 2, 2]));
        let y = tape.concat_channels(x, empty).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 2, 2]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(matches!(tape.concat_channels(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(grad_param(t4(1, 1, 2, 2, vec![1.0; 4])));
        let b = tape.leaf(grad_param(t4(1, 2, 2, 2, vec![2.0; 8])));
        let y = tape.concat_channels(a, b).unwrap();
        let seed_data: Vec<f64> = (1..=12).map(|v| v as f64).collect();
        let seed = Tensor::new(vec![1, 3, 2, 2], seed_data).unwrap();
        tape.backward_seeded(y, &seed).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            tape.grad(b).unwrap(),
            &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    // ── softmax + losses ────────────────────────────────────────────

    #[test]
    fn softmax_channels_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(2, 3, 2, 2, wiggle(24, 0.4)));
        let y = tape.softmax_channels(x).unwrap();
        let d = tape.value(y).data();
        for n in 0..2 {
            for p in 0..4 {
                let sum: f64 = (0..3).map(|c| d[(n * 3 + c) * 4 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    let v = d[(n * 3 + c) * 4 + p];
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 3, 2, 2, vec![0.7; 12]));
        let loss = tape.softmax_cross_entropy(x, &[0, 1, 2, 0], 3).unwrap();
        let got = tape.value(loss).as_scalar().unwrap();
        assert!((got - 3.0f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn softmax_cross_entropy_saturated_is_near_zero() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 12];
        for p in 0..4 {
            logits[p] = 1000.0; // class 0 at every pixel
        }
        let x = tape.constant(t4(1, 3, 2, 2, logits));
        let loss = tape.softmax_cross_entropy(x, &[0, 0, 0, 0], 3).unwrap();
        assert!(tape.value(loss).as_scalar().unwrap() < 1e-9);
    }

    #[test]
    fn softmax_cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[3], 3),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let x0 = wiggle(2 * 3 * 2 * 2, 0.55);
        let targets = [0u8, 2, 1, 1, 2, 0, 1, 2];
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(2, 3, 2, 2, x.to_vec()));
            let l = tape.softmax_cross_entropy(xv, &targets, 3).unwrap();
            tape.value(l).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(2, 3, 2, 2, x0.clone())));
        let l = tape.softmax_cross_entropy(xv, &targets, 3).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-5);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn nll_on_probs_gradient_matches_finite_differences() {
        // Positive simplex-ish values; the op does not renormalize.
        let x0: Vec<f64> = wiggle(1 * 3 * 2 * 2, 0.15).iter().map(|v| 0.4 + 0.2 * v).collect();
        let targets = [0u8, 1, 2, 0];
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(1, 3, 2, 2, x.to_vec()));
            let l = tape.nll_on_probs(xv, &targets).unwrap();
            tape.value(l).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(1, 3, 2, 2, x0.clone())));
        let l = tape.nll_on_probs(xv, &targets).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn nll_on_zero_probability_is_numeric_error() {
        let mut tape = Tape::new();
        let mut probs = vec![0.5; 12];
        probs[0] = 0.0; // class 0, pixel 0
        let xv = tape.constant(t4(1, 3, 2, 2, probs));
        assert!(matches!(
            tape.nll_on_probs(xv, &[0, 0, 0, 0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn soft_dice_gradient_matches_finite_differences() {
        let x0: Vec<f64> = wiggle(1 * 3 * 2 * 2, 0.35).iter().map(|v| 0.4 + 0.2 * v).collect();
        let targets = [0u8, 1, 2, 1];
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t4(1, 3, 2, 2, x.to_vec()));
            let l = tape.soft_dice_on_probs(xv, &targets, 1.0).unwrap();
            tape.value(l).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(t4(1, 3, 2, 2, x0.clone())));
        let l = tape.soft_dice_on_probs(xv, &targets, 1.0).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let x0 = wiggle(8, 0.45);
        let target = Tensor::new(vec![2, 4], wiggle(8, 1.45)).unwrap();
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![2, 4], x.to_vec()).unwrap());
            let l = tape.mse_against(xv, &target).unwrap();
            tape.value(l).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(grad_param(Tensor::new(vec![2, 4], x0.clone()).unwrap()));
        let l = tape.mse_against(xv, &target).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(tape.grad(xv).unwrap(), &fd) < 1e-7);
    }

    // ── combinators and the sweep itself ────────────────────────────

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(grad_param(t4(1, 2, 2, 2, wiggle(8, 0.0))));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn conv_bias_gradient_counts_output_positions() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(2, 1, 4, 4, wiggle(32, 0.2)));
        let w = tape.constant(t4(3, 1, 3, 3, wiggle(27, 0.6)));
        let b = tape.leaf(grad_param(Tensor::zeros(vec![3])));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        // Each bias feeds every spatial position of its channel in every
        // batch element: 2 * 4 * 4 = 32.
        assert_eq!(tape.grad(b).unwrap(), &[32.0, 32.0, 32.0]);
    }

    #[test]
    fn mean_stack_averages_and_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(grad_param(t4(1, 2, 1, 1, vec![0.6, 0.4])));
        let b = tape.leaf(grad_param(t4(1, 2, 1, 1, vec![0.2, 0.8])));
        let y = tape.mean_stack(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.4, 0.6000000000000001]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5, 0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn add_weighted_combines_losses() {
        let mut tape = Tape::new();
        let a = tape.leaf(grad_param(Tensor::scalar(2.0)));
        let b = tape.leaf(grad_param(Tensor::scalar(3.0)));
        let y = tape.add_weighted(a, 1.0, b, 0.1).unwrap();
        assert!((tape.value(y).as_scalar().unwrap() - 2.3).abs() < 1e-12);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.1]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(grad_param(t4(1, 1, 2, 2, vec![0.0; 4])));
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));

        let mut other = Tape::new();
        let y = other.leaf(grad_param(Tensor::scalar(1.0)));
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn inactive_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(1, 1, 2, 2, wiggle(4, 0.0)));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(t4(1, 2, 4, 4, wiggle(32, 0.9)));
            let w = tape.constant(t4(2, 2, 3, 3, wiggle(36, 0.3)));
            let b = tape.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            let z = tape.leaky_relu(y, 0.01).unwrap();
            let p = tape.maxpool2d(z, 2).unwrap();
            tape.value(p).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn forward_ops_keep_finite_inputs_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(t4(2, 2, 4, 4, wiggle(64, 0.12)));
        let w = tape.constant(t4(4, 2, 3, 3, wiggle(72, 0.21)));
        let b = tape.constant(Tensor::new(vec![4], wiggle(4, 0.7)).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let z = tape.leaky_relu(y, 0.01).unwrap();
        let p = tape.maxpool2d(z, 2).unwrap();
        let sm = tape.softmax_channels(p).unwrap();
        assert!(tape.value(y).is_finite());
        assert!(tape.value(sm).is_finite());
    }
}
