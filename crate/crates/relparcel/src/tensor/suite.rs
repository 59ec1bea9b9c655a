//! Seeded gradient-check battery covering every differentiable op.
//!
//! Each case projects the op output onto a fixed random direction so the
//! upstream gradient is distinct per element, then compares the tape
//! gradient with central differences. Inputs for kinked ops (relu, max
//! pooling, bilinear sampling) are drawn away from their non-smooth sets
//! so the finite differences stay valid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor};
use crate::rng::substream;

/// Finite-difference step for the op battery.
pub const SUITE_STEP: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for relu probes.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect()
}

/// Grid coordinates whose mapped pixel positions stay clear of cell
/// boundaries, redrawn until safe.
fn safe_grid(rng: &mut ChaCha8Rng, gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    loop {
        let g = uniform(rng, 2 * gh * gw, -0.95, 0.95);
        let ok = g.iter().enumerate().all(|(i, &c)| {
            let size = if i < gh * gw { w } else { h };
            let p = (c + 1.0) * 0.5 * (size - 1) as f64;
            (p - p.round()).abs() > 1e-3
        });
        if ok {
            return g;
        }
    }
}

/// Window values separated enough that probes cannot flip an argmax.
fn pool_safe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = uniform(rng, n, -1.0, 1.0);
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|p| p[1] - p[0] > 1e-3) {
            return v;
        }
    }
}

/// One named gradient check; `error` is the worst relative deviation.
pub struct SuiteResult {
    pub name: &'static str,
    pub error: f64,
}

/// Run the whole battery with inputs derived from `seed`.
pub fn op_gradient_suite(seed: u64) -> Vec<SuiteResult> {
    let mut results = Vec::new();
    let mut check = |name: &'static str, err: f64| results.push(SuiteResult { name, error: err });
    let rng = &mut substream(seed, "grad-suite");

    // Projection weights reused by the closures below.
    let project = |tape: &Tape, out: &Tensor, dir: &[f64]| -> Tensor {
        let d = tape.constant(dir.to_vec(), out.shape()).unwrap();
        let prod = tape.mul(out, &d).unwrap();
        tape.sum(&prod)
    };

    // conv2d: 3 channels in, 2 out, asymmetric kernel, stride 2, padding 1.
    {
        let (ci, co, h, w, kh, kw) = (3, 2, 4, 5, 3, 2);
        let x = uniform(rng, ci * h * w, -1.0, 1.0);
        let wt = uniform(rng, co * ci * kh * kw, -1.0, 1.0);
        let b = uniform(rng, co, -0.5, 0.5);
        let oh = (h + 2 - (kh - 1) - 1) / 2 + 1;
        let ow = (w + 2 - (kw - 1) - 1) / 2 + 1;
        let dir = uniform(rng, co * oh * ow, -1.0, 1.0);
        let conv = |tape: &Tape, xs: &Tensor, ws: &Tensor, bs: &Tensor| {
            tape.conv2d(xs, ws, bs, 2, 1, 1).unwrap()
        };
        let (xc, wc, bc, dc) = (x.clone(), wt.clone(), b.clone(), dir.clone());
        check(
            "conv2d/input",
            grad_check(
                |tape, t| {
                    let ws = tape.constant(wc.clone(), &[co, ci, kh, kw]).unwrap();
                    let bs = tape.constant(bc.clone(), &[co]).unwrap();
                    project(tape, &conv(tape, t, &ws, &bs), &dc)
                },
                &xc,
                &[ci, h, w],
                SUITE_STEP,
            ),
        );
        let (xc, bc, dc) = (x.clone(), b.clone(), dir.clone());
        check(
            "conv2d/weights",
            grad_check(
                |tape, t| {
                    let xs = tape.constant(xc.clone(), &[ci, h, w]).unwrap();
                    let bs = tape.constant(bc.clone(), &[co]).unwrap();
                    project(tape, &conv(tape, &xs, t, &bs), &dc)
                },
                &wt,
                &[co, ci, kh, kw],
                SUITE_STEP,
            ),
        );
        let (xc, wc, dc) = (x.clone(), wt.clone(), dir.clone());
        check(
            "conv2d/bias",
            grad_check(
                |tape, t| {
                    let xs = tape.constant(xc.clone(), &[ci, h, w]).unwrap();
                    let ws = tape.constant(wc.clone(), &[co, ci, kh, kw]).unwrap();
                    project(tape, &conv(tape, &xs, &ws, t), &dc)
                },
                &b,
                &[co],
                SUITE_STEP,
            ),
        );
    }

    // conv2d with dilation 2.
    {
        let (ci, co, h, w, k) = (2, 2, 5, 5, 2);
        let x = uniform(rng, ci * h * w, -1.0, 1.0);
        let wt = uniform(rng, co * ci * k * k, -1.0, 1.0);
        let b = uniform(rng, co, -0.5, 0.5);
        let o = h + 2 - 2 * (k - 1) - 1 + 1;
        let dir = uniform(rng, co * o * o, -1.0, 1.0);
        check(
            "conv2d/dilated",
            grad_check(
                |tape, t| {
                    let ws = tape.constant(wt.clone(), &[co, ci, k, k]).unwrap();
                    let bs = tape.constant(b.clone(), &[co]).unwrap();
                    let out = tape.conv2d(t, &ws, &bs, 1, 1, 2).unwrap();
                    project(tape, &out, &dir)
                },
                &x,
                &[ci, h, w],
                SUITE_STEP,
            ),
        );
    }

    // maxpool2d
    {
        let (c, h, w) = (2, 4, 4);
        let x = pool_safe(rng, c * h * w);
        let dir = uniform(rng, c * 2 * 2, -1.0, 1.0);
        check(
            "maxpool2d/input",
            grad_check(
                |tape, t| {
                    let out = tape.maxpool2d(t, 2, 2).unwrap();
                    project(tape, &out, &dir)
                },
                &x,
                &[c, h, w],
                SUITE_STEP,
            ),
        );
    }

    // activations
    {
        let x = away_from_zero(rng, 12);
        let dir = uniform(rng, 12, -1.0, 1.0);
        check(
            "relu/input",
            grad_check(
                |tape, t| project(tape, &tape.relu(t), &dir),
                &x,
                &[12],
                SUITE_STEP,
            ),
        );
        let x = uniform(rng, 12, -3.0, 3.0);
        check(
            "sigmoid/input",
            grad_check(
                |tape, t| project(tape, &tape.sigmoid(t), &dir),
                &x,
                &[12],
                SUITE_STEP,
            ),
        );
    }

    // fully_connected
    {
        let (m, n) = (3, 5);
        let x = uniform(rng, n, -1.0, 1.0);
        let w = uniform(rng, m * n, -1.0, 1.0);
        let b = uniform(rng, m, -1.0, 1.0);
        let dir = uniform(rng, m, -1.0, 1.0);
        let (wc, bc, dc) = (w.clone(), b.clone(), dir.clone());
        check(
            "fully_connected/x",
            grad_check(
                |tape, t| {
                    let ws = tape.constant(wc.clone(), &[m, n]).unwrap();
                    let bs = tape.constant(bc.clone(), &[m]).unwrap();
                    project(tape, &tape.fully_connected(t, &ws, &bs).unwrap(), &dc)
                },
                &x,
                &[n],
                SUITE_STEP,
            ),
        );
        let (xc, bc, dc) = (x.clone(), b.clone(), dir.clone());
        check(
            "fully_connected/w",
            grad_check(
                |tape, t| {
                    let xs = tape.constant(xc.clone(), &[n]).unwrap();
                    let bs = tape.constant(bc.clone(), &[m]).unwrap();
                    project(tape, &tape.fully_connected(&xs, t, &bs).unwrap(), &dc)
                },
                &w,
                &[m, n],
                SUITE_STEP,
            ),
        );
        let (xc, wc, dc) = (x.clone(), w.clone(), dir.clone());
        check(
            "fully_connected/b",
            grad_check(
                |tape, t| {
                    let xs = tape.constant(xc.clone(), &[n]).unwrap();
                    let ws = tape.constant(wc.clone(), &[m, n]).unwrap();
                    project(tape, &tape.fully_connected(&xs, &ws, t).unwrap(), &dc)
                },
                &b,
                &[m],
                SUITE_STEP,
            ),
        );
    }

    // global_avg_pool
    {
        let (c, h, w) = (3, 4, 5);
        let x = uniform(rng, c * h * w, -1.0, 1.0);
        let dir = uniform(rng, c, -1.0, 1.0);
        check(
            "global_avg_pool/input",
            grad_check(
                |tape, t| project(tape, &tape.global_avg_pool(t).unwrap(), &dir),
                &x,
                &[c, h, w],
                SUITE_STEP,
            ),
        );
    }

    // concat_channels (both sides)
    {
        let (ca, cb, h, w) = (2, 3, 3, 3);
        let a = uniform(rng, ca * h * w, -1.0, 1.0);
        let b = uniform(rng, cb * h * w, -1.0, 1.0);
        let dir = uniform(rng, (ca + cb) * h * w, -1.0, 1.0);
        let (bc, dc) = (b.clone(), dir.clone());
        check(
            "concat_channels/lhs",
            grad_check(
                |tape, t| {
                    let bs = tape.constant(bc.clone(), &[cb, h, w]).unwrap();
                    project(tape, &tape.concat_channels(t, &bs).unwrap(), &dc)
                },
                &a,
                &[ca, h, w],
                SUITE_STEP,
            ),
        );
        let (ac, dc) = (a.clone(), dir.clone());
        check(
            "concat_channels/rhs",
            grad_check(
                |tape, t| {
                    let at = tape.constant(ac.clone(), &[ca, h, w]).unwrap();
                    project(tape, &tape.concat_channels(&at, t).unwrap(), &dc)
                },
                &b,
                &[cb, h, w],
                SUITE_STEP,
            ),
        );
    }

    // elementwise add / mul
    {
        let n = 10;
        let a = uniform(rng, n, -1.0, 1.0);
        let b = uniform(rng, n, -1.0, 1.0);
        let dir = uniform(rng, n, -1.0, 1.0);
        let (bc, dc) = (b.clone(), dir.clone());
        check(
            "elementwise_add/lhs",
            grad_check(
                |tape, t| {
                    let bs = tape.constant(bc.clone(), &[n]).unwrap();
                    project(tape, &tape.add(t, &bs).unwrap(), &dc)
                },
                &a,
                &[n],
                SUITE_STEP,
            ),
        );
        let (ac, dc) = (a.clone(), dir.clone());
        check(
            "elementwise_mul/rhs",
            grad_check(
                |tape, t| {
                    let at = tape.constant(ac.clone(), &[n]).unwrap();
                    project(tape, &tape.mul(&at, t).unwrap(), &dc)
                },
                &b,
                &[n],
                SUITE_STEP,
            ),
        );
    }

    // flatten + reshape + slice + sum + scale, composed
    {
        let (c, h, w) = (2, 3, 3);
        let x = uniform(rng, c * h * w, -1.0, 1.0);
        let dir = uniform(rng, h * w, -1.0, 1.0);
        check(
            "flatten_slice_reshape",
            grad_check(
                |tape, t| {
                    let sl = tape.slice_channels(t, 1, 1).unwrap();
                    let fl = tape.flatten(&sl);
                    let rs = tape.reshape(&fl, &[1, h, w]).unwrap();
                    let sc = tape.scale(&rs, 1.5);
                    project(tape, &sc, &dir)
                },
                &x,
                &[c, h, w],
                SUITE_STEP,
            ),
        );
    }

    // concat1d
    {
        let a = uniform(rng, 3, -1.0, 1.0);
        let b = uniform(rng, 4, -1.0, 1.0);
        let dir = uniform(rng, 7, -1.0, 1.0);
        check(
            "concat1d/lhs",
            grad_check(
                |tape, t| {
                    let bs = tape.constant(b.clone(), &[4]).unwrap();
                    project(tape, &tape.concat1d(&[t, &bs]).unwrap(), &dir)
                },
                &a,
                &[3],
                SUITE_STEP,
            ),
        );
    }

    // bce_loss
    {
        let l = 6;
        let p = uniform(rng, l, 0.1, 0.9);
        let y: Vec<f64> = (0..l).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        check(
            "bce_loss/probs",
            grad_check(
                |tape, t| tape.bce_loss(t, &y).unwrap(),
                &p,
                &[l],
                SUITE_STEP,
            ),
        );
    }

    // affine_grid
    {
        let params = vec![
            rng.gen_range(0.4..1.2),
            rng.gen_range(0.4..1.2),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        let (h, w) = (4, 5);
        let dir = uniform(rng, 2 * h * w, -1.0, 1.0);
        check(
            "affine_grid/params",
            grad_check(
                |tape, t| project(tape, &tape.affine_grid(t, h, w).unwrap(), &dir),
                &params,
                &[4],
                SUITE_STEP,
            ),
        );
    }

    // grid_sample, both inputs
    {
        let (c, h, w, gh, gw) = (2, 4, 4, 3, 3);
        let x = uniform(rng, c * h * w, -1.0, 1.0);
        let g = safe_grid(rng, gh, gw, h, w);
        let dir = uniform(rng, c * gh * gw, -1.0, 1.0);
        let (gc, dc) = (g.clone(), dir.clone());
        check(
            "grid_sample/input",
            grad_check(
                |tape, t| {
                    let gs = tape.constant(gc.clone(), &[2, gh, gw]).unwrap();
                    project(tape, &tape.grid_sample(t, &gs).unwrap(), &dc)
                },
                &x,
                &[c, h, w],
                SUITE_STEP,
            ),
        );
        let (xc, dc) = (x.clone(), dir.clone());
        check(
            "grid_sample/grid",
            grad_check(
                |tape, t| {
                    let xs = tape.constant(xc.clone(), &[c, h, w]).unwrap();
                    project(tape, &tape.grid_sample(&xs, t).unwrap(), &dc)
                },
                &g,
                &[2, gh, gw],
                SUITE_STEP,
            ),
        );
    }

    results
}
