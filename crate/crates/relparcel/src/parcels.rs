//! Label-wise feature parcels.
//!
//! A single 1x1 convolution with `K*L` filters maps the backbone features
//! into `L` contiguous channel groups of `K` maps each; group `l` is the
//! feature parcel of label `l`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Tape, Tensor};

/// Per-label slice of the parcel convolution output.
#[derive(Clone, Debug)]
pub struct FeatureParcel {
    pub label_index: usize,
    /// `[K, H_f, W_f]` maps.
    pub maps: Tensor,
}

/// Output channel that map `k` of parcel `l` occupies.
pub fn parcel_channel(label: usize, k: usize, parcel_channels: usize) -> usize {
    label * parcel_channels + k
}

/// The 1x1 parcel convolution parameters.
#[derive(Clone, Debug)]
pub struct ParcelLayer {
    pub weight: Param,
    pub bias: Param,
    pub num_labels: usize,
    pub parcel_channels: usize,
}

impl ParcelLayer {
    pub fn new(
        feature_channels: usize,
        num_labels: usize,
        parcel_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kl = num_labels * parcel_channels;
        ParcelLayer {
            weight: Param::glorot_conv("parcels.weight", kl, feature_channels, 1, 1, rng),
            bias: Param::zeros("parcels.bias", &[kl]),
            num_labels,
            parcel_channels,
        }
    }
}

/// Run the parcel convolution and split its output into `L` parcels of
/// `K` channels each.
pub fn parcel_forward(
    tape: &Tape,
    features: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    num_labels: usize,
    parcel_channels: usize,
) -> Result<Vec<FeatureParcel>> {
    let kl = num_labels * parcel_channels;
    if weight.shape().first() != Some(&kl) {
        return Err(Error::shape(format!(
            "parcel weights provide {:?} filters, expected K*L = {kl}",
            weight.shape().first()
        )));
    }
    let full = tape.conv2d(features, weight, bias, 1, 0, 1)?;
    (0..num_labels)
        .map(|l| {
            let maps = tape.slice_channels(&full, l * parcel_channels, parcel_channels)?;
            Ok(FeatureParcel { label_index: l, maps })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn shapes_and_partition() {
        let (l, k, c_f, side) = (3, 2, 4, 5);
        let tape = Tape::new();
        let layer = ParcelLayer::new(c_f, l, k, &mut substream(1, "t"));
        let feats = tape
            .leaf(
                (0..c_f * side * side).map(|i| (i as f64 * 0.1).sin()).collect(),
                &[c_f, side, side],
                false,
            )
            .unwrap();
        let w = layer.weight.bind(&tape, false).unwrap();
        let b = layer.bias.bind(&tape, false).unwrap();
        let parcels = parcel_forward(&tape, &feats, &w, &b, l, k).unwrap();
        assert_eq!(parcels.len(), 3);
        for (i, p) in parcels.iter().enumerate() {
            assert_eq!(p.label_index, i);
            assert_eq!(p.maps.shape(), &[k, side, side]);
        }

        // concatenating the parcels reconstructs the full conv output
        let full = tape.conv2d(&feats, &w, &b, 1, 0, 1).unwrap();
        let mut cat = parcels[0].maps.clone();
        for p in &parcels[1..] {
            cat = tape.concat_channels(&cat, &p.maps).unwrap();
        }
        assert_eq!(tape.value(&cat), tape.value(&full));
    }

    #[test]
    fn one_hot_filters_select_an_input_channel() {
        let (l, k, c_f, side) = (2, 2, 3, 4);
        let tape = Tape::new();
        let feats_data: Vec<f64> = (0..c_f * side * side).map(|i| i as f64).collect();
        let feats = tape.constant(feats_data.clone(), &[c_f, side, side]).unwrap();
        // every filter selects input channel 1
        let mut wdata = vec![0.0; l * k * c_f];
        for f in 0..l * k {
            wdata[f * c_f + 1] = 1.0;
        }
        let w = tape.constant(wdata, &[l * k, c_f, 1, 1]).unwrap();
        let b = tape.constant(vec![0.0; l * k], &[l * k]).unwrap();
        let parcels = parcel_forward(&tape, &feats, &w, &b, l, k).unwrap();
        let channel1 = &feats_data[side * side..2 * side * side];
        for p in &parcels {
            let v = tape.value(&p.maps);
            for chunk in v.chunks(side * side) {
                assert_eq!(chunk, channel1);
            }
        }
    }

    #[test]
    fn channel_layout_formula() {
        assert_eq!(parcel_channel(1, 0, 2), 2);
        assert_eq!(parcel_channel(0, 1, 4), 1);
        assert_eq!(parcel_channel(2, 3, 4), 11);
    }

    #[test]
    fn weight_count_mismatch_is_an_error() {
        let tape = Tape::new();
        let feats = tape.constant(vec![0.0; 4 * 9], &[4, 3, 3]).unwrap();
        let w = tape.constant(vec![0.0; 5 * 4], &[5, 4, 1, 1]).unwrap();
        let b = tape.constant(vec![0.0; 5], &[5]).unwrap();
        assert!(matches!(
            parcel_forward(&tape, &feats, &w, &b, 3, 2),
            Err(Error::Shape(_))
        ));
    }
}
