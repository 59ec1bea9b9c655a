//! Golden-value and property tests for the tensor ops.

use proptest::prelude::*;

use super::{grad_check, Tape, Tensor};
use crate::error::Error;

fn tape_with<const N: usize>(data: [f64; N], shape: &[usize]) -> (Tape, Tensor) {
    let tape = Tape::new();
    let t = tape.leaf(data.to_vec(), shape, true).unwrap();
    (tape, t)
}

// ---- conv2d ----

#[test]
fn conv2d_hand_evaluated() {
    let (tape, x) = tape_with([1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 3, 3]);
    let w = tape.constant(vec![1., 0., 0., 1.], &[1, 1, 2, 2]).unwrap();
    let b = tape.constant(vec![0.], &[1]).unwrap();
    let out = tape.conv2d(&x, &w, &b, 1, 0, 1).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(tape.value(&out), vec![6., 8., 12., 14.]);
}

#[test]
fn conv2d_identity_kernel_is_exact() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..20).map(|i| (i as f64) * 0.37 - 3.1).collect();
    let x = tape.leaf(data.clone(), &[1, 4, 5], false).unwrap();
    let w = tape.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    let out = tape.conv2d(&x, &w, &b, 1, 0, 1).unwrap();
    assert_eq!(tape.value(&out), data);
}

#[test]
fn conv2d_dilation_taps_spread_positions() {
    let (tape, x) = tape_with([1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 3, 3]);
    let w = tape.constant(vec![1., 0., 0., 1.], &[1, 1, 2, 2]).unwrap();
    let b = tape.constant(vec![0.], &[1]).unwrap();
    let out = tape.conv2d(&x, &w, &b, 1, 0, 2).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    // taps (0,0) and (2,2): 1 + 9
    assert_eq!(tape.value(&out), vec![10.0]);
}

#[test]
fn conv2d_channel_mismatch_is_an_error() {
    let (tape, x) = tape_with([0.0; 9], &[1, 3, 3]);
    let w = tape.constant(vec![0.0; 8], &[1, 2, 2, 2]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    assert!(matches!(tape.conv2d(&x, &w, &b, 1, 0, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_kernel_larger_than_padded_input_is_an_error() {
    let (tape, x) = tape_with([0.0; 4], &[1, 2, 2]);
    let w = tape.constant(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    assert!(tape.conv2d(&x, &w, &b, 1, 0, 1).is_err());
    // dilation stretches a 2x2 kernel past a 3x3 input
    let (tape, x) = tape_with([0.0; 9], &[1, 3, 3]);
    let w = tape.constant(vec![0.0; 4], &[1, 1, 2, 2]).unwrap();
    let b = tape.constant(vec![0.0], &[1]).unwrap();
    assert!(tape.conv2d(&x, &w, &b, 1, 0, 3).is_err());
}

#[test]
fn conv2d_output_size_formula() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.0; 2 * 9 * 11], &[2, 9, 11]).unwrap();
    let w = tape.constant(vec![0.0; 3 * 2 * 3 * 3], &[3, 2, 3, 3]).unwrap();
    let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
    let out = tape.conv2d(&x, &w, &b, 2, 1, 2).unwrap();
    // H' = floor((9 + 2 - 2*2 - 1)/2) + 1 = 4, W' = floor((11 + 2 - 5)/2) + 1 = 5
    assert_eq!(out.shape(), &[3, 4, 5]);
}

// ---- maxpool2d ----

#[test]
fn maxpool_takes_window_max() {
    let (tape, x) = tape_with([1., 2., 3., 4.], &[1, 2, 2]);
    let out = tape.maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(tape.value(&out), vec![4.0]);
}

#[test]
fn maxpool_constant_map_stays_constant() {
    let (tape, x) = tape_with([0.7; 16], &[1, 4, 4]);
    let out = tape.maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(tape.value(&out), vec![0.7; 4]);
}

#[test]
fn maxpool_tie_routes_to_first_row_major() {
    let (tape, x) = tape_with([1., 3., 3., 2.], &[1, 2, 2]);
    let out = tape.maxpool2d(&x, 2, 2).unwrap();
    tape.backward(&tape.sum(&out)).unwrap();
    assert_eq!(tape.grad(&x).unwrap(), vec![0., 1., 0., 0.]);
}

#[test]
fn maxpool_window_too_large_is_an_error() {
    let (tape, x) = tape_with([0.0; 4], &[1, 2, 2]);
    assert!(matches!(tape.maxpool2d(&x, 3, 1), Err(Error::Shape(_))));
}

// ---- activations ----

#[test]
fn relu_clamps_negatives() {
    let (tape, x) = tape_with([-1.0, 0.0, 2.5], &[3]);
    assert_eq!(tape.value(&tape.relu(&x)), vec![0.0, 0.0, 2.5]);
}

#[test]
fn sigmoid_symmetry_and_golden_point() {
    let (tape, x) = tape_with([0.0, 3f64.ln()], &[2]);
    let s = tape.value(&tape.sigmoid(&x));
    assert_eq!(s[0], 0.5);
    assert!((s[1] - 0.75).abs() < 1e-15);
}

#[test]
fn sigmoid_stays_strictly_inside_unit_interval() {
    let (tape, x) = tape_with([-800.0, -40.0, 0.0, 40.0, 800.0], &[5]);
    for v in tape.value(&tape.sigmoid(&x)) {
        assert!(v > 0.0 && v < 1.0, "sigmoid output {v} left (0,1)");
    }
}

// ---- fully_connected ----

#[test]
fn fc_hand_evaluated() {
    let (tape, x) = tape_with([1.0, 1.0], &[2]);
    let w = tape.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = tape.constant(vec![0.5], &[1]).unwrap();
    let out = tape.fully_connected(&x, &w, &b).unwrap();
    assert_eq!(tape.value(&out), vec![3.5]);
}

#[test]
fn fc_identity_weights_pass_input_through() {
    let (tape, x) = tape_with([0.3, -1.2, 7.0], &[3]);
    let w = tape
        .constant(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3])
        .unwrap();
    let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
    let out = tape.fully_connected(&x, &w, &b).unwrap();
    assert_eq!(tape.value(&out), vec![0.3, -1.2, 7.0]);
}

#[test]
fn fc_zero_input_returns_bias() {
    let (tape, x) = tape_with([0.0, 0.0], &[2]);
    let w = tape.constant(vec![4.0, -2.0, 1.0, 9.0], &[2, 2]).unwrap();
    let b = tape.constant(vec![0.25, -0.75], &[2]).unwrap();
    let out = tape.fully_connected(&x, &w, &b).unwrap();
    assert_eq!(tape.value(&out), vec![0.25, -0.75]);
}

#[test]
fn fc_dimension_mismatch_is_an_error() {
    let (tape, x) = tape_with([0.0; 3], &[3]);
    let w = tape.constant(vec![0.0; 4], &[2, 2]).unwrap();
    let b = tape.constant(vec![0.0; 2], &[2]).unwrap();
    assert!(matches!(tape.fully_connected(&x, &w, &b), Err(Error::Shape(_))));
}

// ---- global_avg_pool ----

#[test]
fn gap_is_the_spatial_mean() {
    let (tape, x) = tape_with([1., 2., 3., 4.], &[1, 2, 2]);
    assert_eq!(tape.value(&tape.global_avg_pool(&x).unwrap()), vec![2.5]);
}

#[test]
fn gap_of_constant_channel_is_the_constant() {
    let (tape, x) = tape_with([0.125; 12], &[3, 2, 2]);
    assert_eq!(
        tape.value(&tape.global_avg_pool(&x).unwrap()),
        vec![0.125; 3]
    );
}

// ---- concat_channels ----

#[test]
fn concat_shapes_and_layout() {
    let tape = Tape::new();
    let a_data: Vec<f64> = (0..32).map(|i| i as f64).collect();
    let b_data: Vec<f64> = (0..48).map(|i| 100.0 + i as f64).collect();
    let a = tape.leaf(a_data.clone(), &[2, 4, 4], true).unwrap();
    let b = tape.leaf(b_data.clone(), &[3, 4, 4], true).unwrap();
    let out = tape.concat_channels(&a, &b).unwrap();
    assert_eq!(out.shape(), &[5, 4, 4]);
    let v = tape.value(&out);
    assert_eq!(&v[..16], &a_data[..16], "channel 0 comes from a");
    assert_eq!(&v[32..48], &b_data[..16], "channel Ka comes from b");
}

#[test]
fn concat_backward_splits_unit_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(vec![0.0; 32], &[2, 4, 4], true).unwrap();
    let b = tape.leaf(vec![0.0; 48], &[3, 4, 4], true).unwrap();
    let out = tape.concat_channels(&a, &b).unwrap();
    tape.backward(&tape.sum(&out)).unwrap();
    assert_eq!(tape.grad(&a).unwrap(), vec![1.0; 32]);
    assert_eq!(tape.grad(&b).unwrap(), vec![1.0; 48]);
}

#[test]
fn concat_spatial_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 8], &[2, 2, 2]).unwrap();
    let b = tape.constant(vec![0.0; 18], &[2, 3, 3]).unwrap();
    assert!(matches!(tape.concat_channels(&a, &b), Err(Error::Shape(_))));
}

#[test]
fn concat_then_slice_is_identity() {
    let tape = Tape::new();
    let a_data = vec![1.0, 2.0, 3.0, 4.0];
    let b_data = vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0];
    let a = tape.constant(a_data.clone(), &[1, 2, 2]).unwrap();
    let b = tape.constant(b_data.clone(), &[2, 2, 2]).unwrap();
    let cat = tape.concat_channels(&a, &b).unwrap();
    let back_a = tape.slice_channels(&cat, 0, 1).unwrap();
    let back_b = tape.slice_channels(&cat, 1, 2).unwrap();
    assert_eq!(tape.value(&back_a), a_data);
    assert_eq!(tape.value(&back_b), b_data);
}

// ---- elementwise_add ----

#[test]
fn add_golden_and_identity() {
    let (tape, x) = tape_with([1.0, 2.0], &[2]);
    let y = tape.constant(vec![3.0, 4.0], &[2]).unwrap();
    assert_eq!(tape.value(&tape.add(&x, &y).unwrap()), vec![4.0, 6.0]);
    let zero = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
    assert_eq!(tape.value(&tape.add(&x, &zero).unwrap()), vec![1.0, 2.0]);
}

#[test]
fn add_shape_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 2], &[2]).unwrap();
    let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
    assert!(matches!(tape.add(&a, &b), Err(Error::Shape(_))));
}

// ---- flatten / reshape ----

#[test]
fn flatten_layout_formula() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..8).map(|i| i as f64 * 10.0).collect();
    let x = tape.constant(data, &[2, 2, 2]).unwrap();
    let flat = tape.flatten(&x);
    assert_eq!(flat.shape(), &[8]);
    // element (c,h,w) = (1,0,1) lands at 1*4 + 0*2 + 1 = 5
    assert_eq!(tape.value(&flat)[5], 50.0);
}

#[test]
fn flatten_then_reshape_is_identity() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
    let x = tape.constant(data.clone(), &[2, 3, 4]).unwrap();
    let flat = tape.flatten(&x);
    let back = tape.reshape(&flat, &[2, 3, 4]).unwrap();
    assert_eq!(tape.value(&back), data);
}

// ---- bce_loss ----

#[test]
fn bce_golden_values() {
    let tape = Tape::new();
    let p = tape.leaf(vec![0.5], &[1], true).unwrap();
    let loss = tape.bce_loss(&p, &[1.0]).unwrap();
    assert!((tape.scalar_value(&loss) - std::f64::consts::LN_2).abs() < 1e-15);
    tape.backward(&loss).unwrap();
    // dL/dp = -y/p = -2 for a single label
    assert!((tape.grad(&p).unwrap()[0] + 2.0).abs() < 1e-12);
}

#[test]
fn bce_clamps_boundary_probabilities() {
    let tape = Tape::new();
    let p = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
    let loss = tape.bce_loss(&p, &[1.0, 0.0]).unwrap();
    let v = tape.scalar_value(&loss);
    assert!(v.is_finite());
    assert!(v.abs() < 1e-10, "confident correct predictions cost ~0, got {v}");
}

// ---- affine_grid / grid_sample ----

#[test]
fn grid_identity_covers_corners() {
    let tape = Tape::new();
    let p = tape.constant(vec![1.0, 1.0, 0.0, 0.0], &[4]).unwrap();
    let g = tape.affine_grid(&p, 2, 2).unwrap();
    // channel 0: x, channel 1: y, row-major points
    assert_eq!(
        tape.value(&g),
        vec![-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0]
    );
}

#[test]
fn grid_scale_half_shrinks_coordinates() {
    let tape = Tape::new();
    let p = tape.constant(vec![0.5, 0.5, 0.0, 0.0], &[4]).unwrap();
    let g = tape.affine_grid(&p, 2, 2).unwrap();
    assert_eq!(
        tape.value(&g),
        vec![-0.5, 0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5]
    );
}

#[test]
fn grid_translation_shifts_one_axis() {
    let tape = Tape::new();
    let id = tape.constant(vec![1.0, 1.0, 0.0, 0.0], &[4]).unwrap();
    let sh = tape.constant(vec![1.0, 1.0, 0.3, 0.0], &[4]).unwrap();
    let g0 = tape.value(&tape.affine_grid(&id, 3, 3).unwrap());
    let g1 = tape.value(&tape.affine_grid(&sh, 3, 3).unwrap());
    for i in 0..9 {
        assert!((g1[i] - g0[i] - 0.3).abs() < 1e-15, "x shifted by 0.3");
        assert_eq!(g1[9 + i], g0[9 + i], "y untouched");
    }
}

#[test]
fn grid_sample_exact_pixel_and_center() {
    let tape = Tape::new();
    let x = tape.constant(vec![1., 2., 3., 4.], &[1, 2, 2]).unwrap();
    let g = tape
        .constant(vec![-1.0, 0.0, -1.0, 0.0], &[2, 1, 2])
        .unwrap();
    let out = tape.value(&tape.grid_sample(&x, &g).unwrap());
    assert_eq!(out[0], 1.0, "corner point hits pixel (0,0) exactly");
    assert_eq!(out[1], 2.5, "center point averages the four neighbors");
}

#[test]
fn grid_sample_clamps_out_of_range_points() {
    let tape = Tape::new();
    let x = tape.constant(vec![1., 2., 3., 4.], &[1, 2, 2]).unwrap();
    let g = tape
        .constant(vec![-5.0, 5.0, -5.0, 5.0], &[2, 1, 2])
        .unwrap();
    let out = tape.value(&tape.grid_sample(&x, &g).unwrap());
    assert_eq!(out, vec![1.0, 4.0]);
}

#[test]
fn identity_grid_at_native_resolution_reproduces_input() {
    // Exercises sizes where align-corners coordinates are not exactly
    // representable; the snap keeps the round trip exact.
    for n in [2usize, 3, 5, 7, 11, 16] {
        let tape = Tape::new();
        let data: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.7311).cos()).collect();
        let x = tape.constant(data.clone(), &[1, n, n]).unwrap();
        let p = tape.constant(vec![1.0, 1.0, 0.0, 0.0], &[4]).unwrap();
        let g = tape.affine_grid(&p, n, n).unwrap();
        let out = tape.value(&tape.grid_sample(&x, &g).unwrap());
        assert_eq!(out, data, "identity resample at {n}x{n}");
    }
}

// ---- backward through a small composite ----

#[test]
fn conv_gap_gradients_match_finite_differences() {
    let x: Vec<f64> = (0..9).map(|i| ((i * 7 + 3) as f64 * 0.317).sin()).collect();
    let err = grad_check(
        |tape, t| {
            let w = tape
                .constant(vec![0.4, -0.2, 0.1, 0.7], &[1, 1, 2, 2])
                .unwrap();
            let b = tape.constant(vec![0.05], &[1]).unwrap();
            let c = tape.conv2d(t, &w, &b, 1, 0, 1).unwrap();
            let g = tape.global_avg_pool(&c).unwrap();
            tape.sum(&g)
        },
        &x,
        &[1, 3, 3],
        1e-5,
    );
    assert!(err < 1e-5, "conv+GAP gradient error {err}");
}

// ---- properties ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gap_commutes_with_sums(parts in prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, 12), 1..10)) {
        let tape = Tape::new();
        let tensors: Vec<Tensor> = parts
            .iter()
            .map(|p| tape.constant(p.clone(), &[3, 2, 2]).unwrap())
            .collect();
        let mut total = tensors[0].clone();
        for t in &tensors[1..] {
            total = tape.add(&total, t).unwrap();
        }
        let gap_of_sum = tape.value(&tape.global_avg_pool(&total).unwrap());
        let mut sum_of_gap = vec![0.0; 3];
        for t in &tensors {
            for (acc, v) in sum_of_gap.iter_mut().zip(tape.value(&tape.global_avg_pool(t).unwrap())) {
                *acc += v;
            }
        }
        for (a, b) in gap_of_sum.iter().zip(&sum_of_gap) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn add_commutes(a in prop::collection::vec(-10.0f64..10.0, 8),
                    b in prop::collection::vec(-10.0f64..10.0, 8)) {
        let tape = Tape::new();
        let ta = tape.constant(a, &[8]).unwrap();
        let tb = tape.constant(b, &[8]).unwrap();
        let ab = tape.value(&tape.add(&ta, &tb).unwrap());
        let ba = tape.value(&tape.add(&tb, &ta).unwrap());
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn flatten_reshape_round_trip(data in prop::collection::vec(-5.0f64..5.0, 24)) {
        let tape = Tape::new();
        let x = tape.constant(data.clone(), &[2, 3, 4]).unwrap();
        let back = tape.reshape(&tape.flatten(&x), &[2, 3, 4]).unwrap();
        prop_assert_eq!(tape.value(&back), data);
    }

    #[test]
    fn shared_input_sums_both_paths(v in prop::collection::vec(0.1f64..2.0, 4)) {
        // y = sum(x*x) + sum(x): dy/dx = 2x + 1, checked against the oracle
        let err = grad_check(
            |tape, t| {
                let sq = tape.mul(t, t).unwrap();
                let s1 = tape.sum(&sq);
                let s2 = tape.sum(t);
                tape.add(&s1, &s2).unwrap()
            },
            &v,
            &[4],
            1e-5,
        );
        prop_assert!(err < 1e-7);
    }
}
