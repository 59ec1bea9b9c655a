//! Attentional region extraction.
//!
//! Each label owns a localization layer that reads its flattened feature
//! parcel and predicts a scale+translation transform. The transform maps
//! the regular source grid (normalized to [-1, 1], align-corners) into an
//! attentional grid; bilinear resampling over that grid re-coordinates the
//! region onto the parcel's own spatial layout.

use crate::error::Result;
use crate::param::Param;
use crate::parcels::FeatureParcel;
use crate::tensor::{Tape, Tensor};

/// Scale+translation transform, the 2x3 matrix
/// `[[s_x, 0, t_x], [0, s_y, t_y]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformMatrix {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl TransformMatrix {
    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), 4, "transform expects (s_x, s_y, t_x, t_y)");
        TransformMatrix { sx: p[0], sy: p[1], tx: p[2], ty: p[3] }
    }

    pub fn params(&self) -> [f64; 4] {
        [self.sx, self.sy, self.tx, self.ty]
    }

    pub fn rows(&self) -> [[f64; 3]; 2] {
        [[self.sx, 0.0, self.tx], [0.0, self.sy, self.ty]]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.sx * x + self.tx, self.sy * y + self.ty)
    }
}

/// The identity transform every localizer starts from.
pub fn init_identity() -> TransformMatrix {
    TransformMatrix { sx: 1.0, sy: 1.0, tx: 0.0, ty: 0.0 }
}

/// Bottom-left and top-right corners of the attentional region: the
/// transform applied to (-1,-1) and (1,1).
pub fn region_corners(m: &TransformMatrix) -> ((f64, f64), (f64, f64)) {
    (m.apply(-1.0, -1.0), m.apply(1.0, 1.0))
}

/// Grid of normalized sampling coordinates, `[2, H, W]` with x in
/// channel 0 and y in channel 1.
#[derive(Clone, Debug)]
pub struct SamplingGrid {
    pub coords: Tensor,
}

impl SamplingGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[2]
    }

    /// Coordinate pair at grid cell `(i, j)`.
    pub fn point(&self, tape: &Tape, i: usize, j: usize) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        assert!(i < h && j < w);
        let v = tape.value(&self.coords);
        (v[i * w + j], v[h * w + i * w + j])
    }
}

/// Per-label localization layer. Zero weights plus an identity bias make
/// the initial transform the identity, so training starts from a full
/// view of every parcel.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub weight: Param,
    pub bias: Param,
}

impl Localizer {
    pub fn identity_init(label: usize, input_len: usize) -> Self {
        Localizer {
            weight: Param::zeros(format!("attention.loc{label}.weight"), &[4, input_len]),
            bias: Param::from_data(
                format!("attention.loc{label}.bias"),
                &[4],
                vec![1.0, 1.0, 0.0, 0.0],
            ),
        }
    }
}

/// Predict `(s_x, s_y, t_x, t_y)` from a flattened feature parcel.
pub fn localize(
    tape: &Tape,
    parcel: &FeatureParcel,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let flat = tape.flatten(&parcel.maps);
    tape.fully_connected(&flat, weight, bias)
}

/// Sampling grid for a transform given as a `[4]` tensor, differentiable
/// with respect to the transform parameters.
pub fn generate_grid(tape: &Tape, params: &Tensor, h: usize, w: usize) -> Result<SamplingGrid> {
    Ok(SamplingGrid { coords: tape.affine_grid(params, h, w)? })
}

/// Sampling grid for a fixed transform.
pub fn generate_grid_from(
    tape: &Tape,
    m: &TransformMatrix,
    h: usize,
    w: usize,
) -> Result<SamplingGrid> {
    let params = tape.constant(m.params().to_vec(), &[4])?;
    generate_grid(tape, &params, h, w)
}

/// Resample `[K, H, W]` maps over a grid by bilinear interpolation.
/// Out-of-range grid points clamp to the border.
pub fn bilinear_sample(tape: &Tape, maps: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    tape.grid_sample(maps, &grid.coords)
}

/// A feature parcel resampled over its label's attentional grid; same
/// spatial layout as the source parcel.
#[derive(Clone, Debug)]
pub struct AttentionalParcel {
    pub label_index: usize,
    pub maps: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    #[test]
    fn identity_matrix_entries() {
        let m = init_identity();
        assert_eq!(m.rows(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn identity_corners_span_the_unit_square() {
        let (bl, tr) = region_corners(&init_identity());
        assert_eq!(bl, (-1.0, -1.0));
        assert_eq!(tr, (1.0, 1.0));
    }

    #[test]
    fn corner_golden_case() {
        let m = TransformMatrix { sx: 0.5, sy: 0.5, tx: 0.25, ty: -0.5 };
        let (bl, tr) = region_corners(&m);
        assert!((bl.0 + 0.25).abs() < 1e-15 && (bl.1 + 1.0).abs() < 1e-15);
        assert!((tr.0 - 0.75).abs() < 1e-15 && (tr.1 - 0.0).abs() < 1e-15);
    }

    #[test]
    fn pure_translation_shifts_the_unit_square() {
        let m = TransformMatrix { sx: 1.0, sy: 1.0, tx: 0.2, ty: 0.2 };
        let (bl, tr) = region_corners(&m);
        assert_eq!(bl, (-0.8, -0.8));
        assert_eq!(tr, (1.2, 1.2));
    }

    #[test]
    fn corners_match_extreme_grid_points() {
        let tape = Tape::new();
        let m = TransformMatrix { sx: 0.7, sy: 1.3, tx: -0.1, ty: 0.4 };
        let grid = generate_grid_from(&tape, &m, 5, 5).unwrap();
        let (bl, tr) = region_corners(&m);
        assert_eq!(grid.point(&tape, 0, 0), bl);
        assert_eq!(grid.point(&tape, 4, 4), tr);
    }

    #[test]
    fn identity_grid_equals_source_coordinates() {
        let tape = Tape::new();
        let grid = generate_grid_from(&tape, &init_identity(), 3, 3).unwrap();
        assert_eq!(grid.point(&tape, 0, 0), (-1.0, -1.0));
        assert_eq!(grid.point(&tape, 1, 1), (0.0, 0.0));
        assert_eq!(grid.point(&tape, 2, 0), (-1.0, 1.0));
    }

    #[test]
    fn zero_weight_identity_bias_localizer_returns_identity() {
        let tape = Tape::new();
        let parcel = FeatureParcel {
            label_index: 0,
            maps: tape
                .constant((0..2 * 9).map(|i| i as f64).collect(), &[2, 3, 3])
                .unwrap(),
        };
        let loc = Localizer::identity_init(0, 2 * 9);
        let w = loc.weight.bind(&tape, false).unwrap();
        let b = loc.bias.bind(&tape, false).unwrap();
        let out = localize(&tape, &parcel, &w, &b).unwrap();
        assert_eq!(out.shape(), &[4]);
        assert_eq!(tape.value(&out), vec![1.0, 1.0, 0.0, 0.0]);
        let m = TransformMatrix::from_params(&tape.value(&out));
        assert_eq!(m, init_identity());
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let rng = &mut crate::rng::substream(5, "attention-test");
        for _ in 0..10 {
            let (k, side) = (3, 7);
            let tape = Tape::new();
            let data: Vec<f64> = (0..k * side * side).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let maps = tape.constant(data.clone(), &[k, side, side]).unwrap();
            let grid = generate_grid_from(&tape, &init_identity(), side, side).unwrap();
            let out = bilinear_sample(&tape, &maps, &grid).unwrap();
            let diff = tape
                .value(&out)
                .iter()
                .zip(&data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-12, "round trip deviation {diff}");
        }
    }

    #[test]
    fn scale_half_grid_lies_strictly_inside_identity_grid() {
        let tape = Tape::new();
        let half = TransformMatrix { sx: 0.5, sy: 0.5, tx: 0.0, ty: 0.0 };
        let g_half = generate_grid_from(&tape, &half, 4, 4).unwrap();
        let v = tape.value(&g_half.coords);
        assert!(v.iter().all(|&c| c.abs() < 1.0));
    }

    /// Sample points must sit clear of pixel-cell boundaries, where the
    /// interpolation kinks would invalidate finite differences.
    fn grid_is_safe(params: &[f64], side: usize) -> bool {
        let axis = |s: f64, t: f64| {
            (0..side).all(|i| {
                let src = -1.0 + 2.0 * i as f64 / (side - 1) as f64;
                let c = (s * src + t).clamp(-1.0, 1.0);
                let p = (c + 1.0) * 0.5 * (side - 1) as f64;
                (p - p.round()).abs() > 1e-3
            })
        };
        axis(params[0], params[2]) && axis(params[1], params[3])
    }

    #[test]
    fn localize_grid_sample_composite_gradient() {
        // gradient through localizer weights -> grid -> sampling,
        // redrawing the localizer until the grid avoids interpolation kinks
        let rng = &mut crate::rng::substream(12, "attention-grad");
        let (k, side) = (2, 4);
        let n_in = k * side * side;
        let maps_data: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.83, 1.17, 0.05, -0.07];

        let w0 = loop {
            let w: Vec<f64> = (0..4 * n_in).map(|_| rng.gen_range(-0.02..0.02)).collect();
            let params: Vec<f64> = (0..4)
                .map(|r| {
                    bias[r]
                        + w[r * n_in..(r + 1) * n_in]
                            .iter()
                            .zip(&maps_data)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            if grid_is_safe(&params, side) {
                break w;
            }
        };

        let f = |tape: &Tape, wt: &Tensor| {
            let maps = tape.constant(maps_data.clone(), &[k, side, side]).unwrap();
            let parcel = FeatureParcel { label_index: 0, maps: maps.clone() };
            let b = tape.constant(bias.clone(), &[4]).unwrap();
            let params = localize(tape, &parcel, wt, &b).unwrap();
            let grid = generate_grid(tape, &params, side, side).unwrap();
            let out = bilinear_sample(tape, &maps, &grid).unwrap();
            let d = tape.constant(dir.clone(), out.shape()).unwrap();
            let p = tape.mul(&out, &d).unwrap();
            tape.sum(&p)
        };
        let err = grad_check(f, &w0, &[4, n_in], 1e-5);
        assert!(err < 1e-4, "composite attention gradient error {err}");
    }
}
