//! End-to-end model: backbone, parcel layer, per-label localizers, and a
//! classifier stage.
//!
//! The classifier is either the pairwise relation module (conv or mlp
//! units) or, as a baseline, an independent pooled head per label.
//!
//! Parameters follow one canonical order everywhere (optimizer state,
//! gradient extraction, checkpoints): backbone blocks, parcel layer,
//! localizers by label, then classifier parameters. `param_refs` defines
//! that order and `BoundModel` consumes its leaves the same way.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionalParcel, Localizer, TransformMatrix};
use crate::backbone::{build_backbone, Backbone, BackboneConfig, BoundBackbone};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::parcels::{parcel_forward, FeatureParcel, ParcelLayer};
use crate::relation::{
    self, BoundHead, BoundUnit, PairwiseUnit, RelationHead, RelationMatrix, UnitKind,
};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

/// Classifier stage selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationMode {
    /// Pairwise relation units as 1x1 convolutions.
    Conv,
    /// Pairwise relation units as pooled dense layers.
    Mlp,
    /// No relation reasoning: one pooled head per label.
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub num_labels: usize,
    /// K, channels per feature parcel.
    pub parcel_channels: usize,
    /// D, channels of the pairwise relation features.
    pub relation_channels: usize,
    /// Hidden width of the shared relation head.
    pub head_hidden: usize,
    pub relation: RelationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_labels: 6,
            parcel_channels: 4,
            relation_channels: 8,
            head_hidden: 16,
            relation: RelationMode::Conv,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::config("the model needs at least two labels"));
        }
        if self.parcel_channels == 0 || self.relation_channels == 0 || self.head_hidden == 0 {
            return Err(Error::config("model channel widths must be positive"));
        }
        Ok(())
    }
}

/// Independent pooled head of one label for the no-relation baseline.
#[derive(Clone, Debug)]
pub struct LabelHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl LabelHead {
    fn new(label: usize, parcel_channels: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        LabelHead {
            w1: Param::glorot_fc(format!("head{label}.w1"), hidden, parcel_channels, rng),
            b1: Param::zeros(format!("head{label}.b1"), &[hidden]),
            w2: Param::glorot_fc(format!("head{label}.w2"), 1, hidden, rng),
            b2: Param::zeros(format!("head{label}.b2"), &[1]),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Relation { units: Vec<PairwiseUnit>, head: RelationHead },
    PerLabel { heads: Vec<LabelHead> },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub backbone: Backbone,
    pub parcel_layer: ParcelLayer,
    pub localizers: Vec<Localizer>,
    pub classifier: Classifier,
}

impl Model {
    /// Build a model with fresh parameters, bit-reproducible per seed.
    pub fn new(
        config: &ModelConfig,
        backbone_config: &BackboneConfig,
        in_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = build_backbone(backbone_config, in_channels, seed)?;
        let side = backbone_config.feature_side()?;
        let c_f = backbone_config.feature_channels();
        let (l_count, k) = (config.num_labels, config.parcel_channels);

        let parcel_layer =
            ParcelLayer::new(c_f, l_count, k, &mut substream(seed, "init/parcels"));
        let localizers = (0..l_count)
            .map(|l| Localizer::identity_init(l, k * side * side))
            .collect();
        let classifier = match config.relation {
            RelationMode::Conv | RelationMode::Mlp => {
                let kind = if config.relation == RelationMode::Conv {
                    UnitKind::Conv
                } else {
                    UnitKind::Mlp
                };
                let units = relation::build_units(
                    l_count,
                    kind,
                    k,
                    config.relation_channels,
                    &mut substream(seed, "init/relation-units"),
                );
                let head = RelationHead::new(
                    config.relation_channels,
                    config.head_hidden,
                    &mut substream(seed, "init/relation-head"),
                );
                Classifier::Relation { units, head }
            }
            RelationMode::None => {
                let rng = &mut substream(seed, "init/label-heads");
                let heads = (0..l_count)
                    .map(|l| LabelHead::new(l, k, config.head_hidden, rng))
                    .collect();
                Classifier::PerLabel { heads }
            }
        };
        Ok(Model {
            config: config.clone(),
            in_channels,
            backbone,
            parcel_layer,
            localizers,
            classifier,
        })
    }

    pub fn feature_side(&self) -> usize {
        self.backbone.config.feature_side().expect("validated at build")
    }

    /// Canonical parameter order.
    pub fn param_refs(&self) -> Vec<&Param> {
        let mut params = self.backbone.params();
        params.push(&self.parcel_layer.weight);
        params.push(&self.parcel_layer.bias);
        for loc in &self.localizers {
            params.push(&loc.weight);
            params.push(&loc.bias);
        }
        match &self.classifier {
            Classifier::Relation { units, head } => {
                for u in units {
                    params.push(&u.weight);
                    params.push(&u.bias);
                }
                params.extend([&head.w1, &head.b1, &head.w2, &head.b2]);
            }
            Classifier::PerLabel { heads } => {
                for h in heads {
                    params.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
                }
            }
        }
        params
    }

    /// Mutable view in the same canonical order.
    pub fn param_refs_mut(&mut self) -> Vec<&mut Param> {
        let mut params = self.backbone.params_mut();
        params.push(&mut self.parcel_layer.weight);
        params.push(&mut self.parcel_layer.bias);
        for loc in &mut self.localizers {
            params.push(&mut loc.weight);
            params.push(&mut loc.bias);
        }
        match &mut self.classifier {
            Classifier::Relation { units, head } => {
                for u in units {
                    params.push(&mut u.weight);
                    params.push(&mut u.bias);
                }
                params.extend([&mut head.w1, &mut head.b1, &mut head.w2, &mut head.b2]);
            }
            Classifier::PerLabel { heads } => {
                for h in heads {
                    params.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
                }
            }
        }
        params
    }

    pub fn num_params(&self) -> usize {
        self.param_refs().iter().map(|p| p.numel()).sum()
    }

    /// Bind every parameter onto `tape` in canonical order.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundModel> {
        let leaves = self
            .param_refs()
            .iter()
            .map(|p| p.bind(tape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { leaves })
    }

    /// Forward pass on a throwaway tape, returning only the probabilities.
    pub fn predict_probs(&self, image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let img = tape.constant(image.to_vec(), &[self.in_channels, h, w])?;
        let bound = self.bind(&tape, false)?;
        let pass = bound.forward(&tape, self, &img)?;
        Ok(tape.value(&pass.probs))
    }

    /// Relation matrix of one image on a throwaway tape.
    pub fn relation_matrix_for(&self, image: &[f64], h: usize, w: usize) -> Result<RelationMatrix> {
        let tape = Tape::new();
        let img = tape.constant(image.to_vec(), &[self.in_channels, h, w])?;
        let bound = self.bind(&tape, false)?;
        let pass = bound.forward(&tape, self, &img)?;
        let (units, head) = bound.relation_parts(self, &tape)?;
        relation::relation_matrix(&tape, &pass.attn, &units, &head)
    }
}

/// Gradient-check the whole composed network (backbone through relation
/// inference into the loss) against central differences: once with
/// respect to the input image, then with respect to every parameter.
/// Returns the worst relative error.
///
/// Uses a 16x16 input, three labels, two-channel parcels, and a dilated
/// final block. Localizer biases are jittered off the identity until no
/// sample point sits within 1e-3 of a pixel-cell boundary, where the
/// interpolation kink would invalidate the finite differences.
pub fn full_network_grad_check(seed: u64) -> Result<f64> {
    use crate::tensor::grad_check;
    use rand::Rng;

    let model_cfg = ModelConfig {
        num_labels: 3,
        parcel_channels: 2,
        relation_channels: 4,
        head_hidden: 8,
        relation: RelationMode::Conv,
    };
    let bb_cfg = BackboneConfig {
        input_size: 16,
        block_channels: vec![4, 6],
        pool_after_block: vec![true, false],
        dilation_last_block: 2,
        drop_last_pool: false,
    };
    let mut model = Model::new(&model_cfg, &bb_cfg, 1, seed)?;
    let side = model.feature_side();

    let rng = &mut substream(seed, "grad-check/full");
    let image: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target = [1.0, 0.0, 1.0];

    // give the localizers small random weights and off-identity biases,
    // redrawn until the induced grids clear the interpolation kinks
    // safe: every sample coordinate strictly inside the unit square
    // (clamping at the border is itself a kink) and clear of pixel cells
    let grid_safe = |model: &Model| -> Result<bool> {
        let tape = Tape::new();
        let img = tape.constant(image.clone(), &[1, 16, 16])?;
        let bound = model.bind(&tape, false)?;
        let pass = bound.forward(&tape, model, &img)?;
        for l in 0..model_cfg.num_labels {
            let m = pass.transform(&tape, l);
            for i in 0..side {
                let src = -1.0 + 2.0 * i as f64 / (side - 1) as f64;
                for (s, t) in [(m.sx, m.tx), (m.sy, m.ty)] {
                    let c = s * src + t;
                    if c.abs() > 0.995 {
                        return Ok(false);
                    }
                    let p = (c + 1.0) * 0.5 * (side - 1) as f64;
                    if (p - p.round()).abs() < 1e-3 {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    };
    loop {
        for loc in &mut model.localizers {
            for w in &mut loc.weight.data {
                *w = rng.gen_range(-0.005..0.005);
            }
            loc.bias.data = vec![
                rng.gen_range(0.78..0.95),
                rng.gen_range(0.78..0.95),
                rng.gen_range(0.01..0.04),
                rng.gen_range(-0.04..-0.01),
            ];
        }
        if grid_safe(&model)? {
            break;
        }
    }

    let loss_through = |tape: &Tape, bound: &BoundModel, img: &Tensor| -> Tensor {
        let pass = bound.forward(tape, &model, img).expect("forward");
        tape.bce_loss(&pass.probs, &target).expect("loss")
    };

    let h = 1e-5;
    let mut worst = grad_check(
        |tape, x| {
            let bound = model.bind(tape, false).expect("bind");
            loss_through(tape, &bound, x)
        },
        &image,
        &[1, 16, 16],
        h,
    );

    let n_params = model.param_refs().len();
    for idx in 0..n_params {
        let (data, shape) = {
            let p = model.param_refs()[idx];
            (p.data.clone(), p.shape.clone())
        };
        let err = grad_check(
            |tape, x| {
                let mut bound = model.bind(tape, false).expect("bind");
                bound.replace_leaf(idx, x.clone());
                let img = tape.constant(image.clone(), &[1, 16, 16]).expect("img");
                loss_through(tape, &bound, &img)
            },
            &data,
            &shape,
            h,
        );
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Everything produced by one forward pass.
pub struct ForwardPass {
    pub features: Tensor,
    pub parcels: Vec<FeatureParcel>,
    /// `[4]` transform parameters per label.
    pub transforms: Vec<Tensor>,
    pub attn: Vec<AttentionalParcel>,
    /// `[L]` probabilities.
    pub probs: Tensor,
}

impl ForwardPass {
    /// Transform of one label as plain numbers.
    pub fn transform(&self, tape: &Tape, label: usize) -> TransformMatrix {
        TransformMatrix::from_params(&tape.value(&self.transforms[label]))
    }
}

/// Model parameters bound onto one tape, in canonical order.
pub struct BoundModel {
    pub leaves: Vec<Tensor>,
}

/// Hands out leaves in the order `param_refs` produced them.
struct LeafCursor<'a> {
    leaves: &'a [Tensor],
    next: usize,
}

impl<'a> LeafCursor<'a> {
    fn take(&mut self) -> &'a Tensor {
        let t = &self.leaves[self.next];
        self.next += 1;
        t
    }
}

impl BoundModel {
    /// Replace the leaf at `index` (canonical order), e.g. to route a
    /// gradient probe through one parameter.
    pub fn replace_leaf(&mut self, index: usize, t: Tensor) {
        assert_eq!(
            self.leaves[index].shape(),
            t.shape(),
            "replacement leaf must keep the parameter shape"
        );
        self.leaves[index] = t;
    }

    pub fn forward(&self, tape: &Tape, model: &Model, image: &Tensor) -> Result<ForwardPass> {
        let mut cursor = LeafCursor { leaves: &self.leaves, next: 0 };
        let (l_count, k) = (model.config.num_labels, model.config.parcel_channels);

        // backbone
        let n_bb = model.backbone.blocks.len() * 2;
        let bb_leaves: Vec<Tensor> = (0..n_bb).map(|_| cursor.take().clone()).collect();
        let bound_bb = BoundBackbone::new(&model.backbone, &bb_leaves);
        let features = bound_bb.forward(tape, image)?;

        // parcels
        let pw = cursor.take();
        let pb = cursor.take();
        let parcels = parcel_forward(tape, &features, pw, pb, l_count, k)?;

        // attention
        let side = model.feature_side();
        let mut transforms = Vec::with_capacity(l_count);
        let mut attn = Vec::with_capacity(l_count);
        for parcel in &parcels {
            let lw = cursor.take();
            let lb = cursor.take();
            let params = attention::localize(tape, parcel, lw, lb)?;
            let grid = attention::generate_grid(tape, &params, side, side)?;
            let maps = attention::bilinear_sample(tape, &parcel.maps, &grid)?;
            transforms.push(params);
            attn.push(AttentionalParcel { label_index: parcel.label_index, maps });
        }

        // classifier
        let probs = match &model.classifier {
            Classifier::Relation { units, head: _ } => {
                let bound_units: Vec<BoundUnit> = units
                    .iter()
                    .map(|u| BoundUnit::new(u, cursor.take().clone(), cursor.take().clone()))
                    .collect();
                let bound_head = BoundHead {
                    w1: cursor.take().clone(),
                    b1: cursor.take().clone(),
                    w2: cursor.take().clone(),
                    b2: cursor.take().clone(),
                };
                relation::forward_all(tape, &attn, &bound_units, &bound_head)?
            }
            Classifier::PerLabel { heads } => {
                let mut probs = Vec::with_capacity(l_count);
                for (a, _) in attn.iter().zip(heads) {
                    let pooled = tape.global_avg_pool(&a.maps)?;
                    let w1 = cursor.take();
                    let b1 = cursor.take();
                    let w2 = cursor.take();
                    let b2 = cursor.take();
                    let hdn = tape.fully_connected(&pooled, w1, b1)?;
                    let hdn = tape.relu(&hdn);
                    let score = tape.fully_connected(&hdn, w2, b2)?;
                    probs.push(tape.sigmoid(&score));
                }
                let refs: Vec<&Tensor> = probs.iter().collect();
                tape.concat1d(&refs)?
            }
        };
        debug_assert_eq!(cursor.next, self.leaves.len(), "all leaves consumed");

        Ok(ForwardPass { features, parcels, transforms, attn, probs })
    }

    /// Bound relation units and head, for pairwise scoring passes.
    pub fn relation_parts(
        &self,
        model: &Model,
        _tape: &Tape,
    ) -> Result<(Vec<BoundUnit>, BoundHead)> {
        let Classifier::Relation { units, .. } = &model.classifier else {
            return Err(Error::contract(
                "the per-label baseline has no relation units",
            ));
        };
        let offset = model.backbone.blocks.len() * 2 + 2 + model.localizers.len() * 2;
        let bound_units: Vec<BoundUnit> = units
            .iter()
            .enumerate()
            .map(|(i, u)| {
                BoundUnit::new(
                    u,
                    self.leaves[offset + 2 * i].clone(),
                    self.leaves[offset + 2 * i + 1].clone(),
                )
            })
            .collect();
        let h = offset + 2 * units.len();
        let bound_head = BoundHead {
            w1: self.leaves[h].clone(),
            b1: self.leaves[h + 1].clone(),
            w2: self.leaves[h + 2].clone(),
            b2: self.leaves[h + 3].clone(),
        };
        Ok((bound_units, bound_head))
    }
}
