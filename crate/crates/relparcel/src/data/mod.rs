//! Seeded procedural multi-label image generator.
//!
//! A recipe names the labels, gives each a primitive renderer (shape,
//! intensity band, size band) and a base probability, and declares
//! co-occurrence rules: implications (`a` forces `b`) and exclusions
//! (`a` and `b` never co-occur). Sampling draws per-label coins, closes
//! the set under implications, then resolves exclusions by dropping the
//! lower-priority label (later in the list) together with everything that
//! implies it. Empty label sets are redrawn.
//!
//! Rendering paints 1 to 3 instances of each positive label's primitive
//! over a noisy background, deterministically per image stream.

pub mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MultiHot;
use crate::rng::substream_indexed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Bar,
    Cross,
    Ring,
    Stripe,
}

/// One label's renderer and sampling probability.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelSpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Painted intensity range.
    pub intensity: (f64, f64),
    /// Primitive size range in pixels (radius or half-extent).
    pub size: (f64, f64),
    pub base_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneRecipe {
    pub labels: Vec<LabelSpec>,
    /// `(a, b)`: a positive `a` forces `b` positive.
    pub implications: Vec<(usize, usize)>,
    /// `(a, b)`: never both positive; the later-listed label yields.
    pub exclusions: Vec<(usize, usize)>,
    pub image_size: usize,
    pub background: f64,
    pub noise: f64,
}

impl SceneRecipe {
    /// Six labels, two implications, one exclusion. The implied labels
    /// (ring, stripe) render with low contrast so their presence is easier
    /// to infer from their implying partners than from pixels alone, and
    /// bar/cross are kept visually adjacent but mutually exclusive.
    pub fn default_recipe() -> Self {
        let labels = vec![
            LabelSpec {
                name: "disk".into(),
                shape: ShapeKind::Disk,
                intensity: (0.85, 1.0),
                size: (3.0, 5.5),
                base_prob: 0.45,
            },
            LabelSpec {
                name: "square".into(),
                shape: ShapeKind::Square,
                intensity: (0.68, 0.82),
                size: (2.5, 4.5),
                base_prob: 0.45,
            },
            LabelSpec {
                name: "bar".into(),
                shape: ShapeKind::Bar,
                intensity: (0.52, 0.65),
                size: (4.5, 7.0),
                base_prob: 0.40,
            },
            LabelSpec {
                name: "cross".into(),
                shape: ShapeKind::Cross,
                intensity: (0.40, 0.50),
                size: (3.5, 5.5),
                base_prob: 0.40,
            },
            LabelSpec {
                name: "ring".into(),
                shape: ShapeKind::Ring,
                intensity: (0.30, 0.38),
                size: (4.0, 6.5),
                base_prob: 0.15,
            },
            LabelSpec {
                name: "stripe".into(),
                shape: ShapeKind::Stripe,
                intensity: (0.26, 0.34),
                size: (4.5, 7.0),
                base_prob: 0.15,
            },
        ];
        SceneRecipe {
            labels,
            implications: vec![(0, 4), (1, 5)], // disk -> ring, square -> stripe
            exclusions: vec![(2, 3)],           // bar and cross never co-occur
            image_size: 32,
            background: 0.12,
            noise: 0.05,
        }
    }

    /// Rescale the primitive size bands for a different image side.
    pub fn scaled_to(mut self, image_size: usize) -> Self {
        let factor = image_size as f64 / self.image_size as f64;
        for spec in &mut self.labels {
            spec.size = (
                (spec.size.0 * factor).max(1.0),
                (spec.size.1 * factor).max(1.2),
            );
        }
        self.image_size = image_size;
        self
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels.len();
        if l < 2 {
            return Err(Error::config("a recipe needs at least two labels"));
        }
        if self.image_size < 8 {
            return Err(Error::config("images below 8x8 cannot hold the primitives"));
        }
        for spec in &self.labels {
            if !(0.0..=1.0).contains(&spec.base_prob) {
                return Err(Error::config(format!(
                    "base probability of {} outside [0, 1]",
                    spec.name
                )));
            }
            if spec.size.0 <= 0.0 || spec.size.1 < spec.size.0 {
                return Err(Error::config(format!("bad size band for {}", spec.name)));
            }
            if spec.intensity.1 < spec.intensity.0 {
                return Err(Error::config(format!("bad intensity band for {}", spec.name)));
            }
            let margin = spec.size.1.ceil() as usize + 1;
            if 2 * margin >= self.image_size {
                return Err(Error::config(format!(
                    "{} primitives up to {} px cannot fit a {}-px image",
                    spec.name, spec.size.1, self.image_size
                )));
            }
        }
        for &(a, b) in self.implications.iter().chain(&self.exclusions) {
            if a >= l || b >= l || a == b {
                return Err(Error::config(format!("rule ({a}, {b}) names bad labels")));
            }
        }
        // an exclusion between a label and anything its closure implies is
        // unsatisfiable
        for a in 0..l {
            let mut with_a = vec![false; l];
            with_a[a] = true;
            close_under_implications(&mut with_a, &self.implications);
            for &(x, y) in &self.exclusions {
                if with_a[x] && with_a[y] {
                    return Err(Error::config(format!(
                        "label {a} implies both sides of the exclusion ({x}, {y})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn close_under_implications(set: &mut [bool], implications: &[(usize, usize)]) {
    loop {
        let mut changed = false;
        for &(a, b) in implications {
            if set[a] && !set[b] {
                set[b] = true;
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

/// Labels whose implication closure contains `target`.
fn ancestors_of(target: usize, l: usize, implications: &[(usize, usize)]) -> Vec<usize> {
    (0..l)
        .filter(|&x| {
            if x == target {
                return false;
            }
            let mut set = vec![false; l];
            set[x] = true;
            close_under_implications(&mut set, implications);
            set[target]
        })
        .collect()
}

/// Close the raw draw under implications, then resolve exclusions: the
/// later-listed label yields, along with everything that implies it.
fn resolve_label_set(mut set: Vec<bool>, recipe: &SceneRecipe) -> Vec<bool> {
    let l = recipe.num_labels();
    loop {
        close_under_implications(&mut set, &recipe.implications);
        let violated = recipe
            .exclusions
            .iter()
            .find(|&&(a, b)| set[a] && set[b])
            .copied();
        match violated {
            None => return set,
            Some((a, b)) => {
                let victim = a.max(b);
                set[victim] = false;
                for anc in ancestors_of(victim, l, &recipe.implications) {
                    set[anc] = false;
                }
            }
        }
    }
}

/// Draw a label set: per-label coins, implication closure, exclusion
/// resolution, redrawn while empty.
pub fn sample_label_set(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Result<MultiHot> {
    for _ in 0..1000 {
        let draw: Vec<bool> = recipe.labels.iter().map(|s| rng.gen_bool(s.base_prob)).collect();
        let set = resolve_label_set(draw, recipe);
        if set.iter().any(|&s| s) {
            return Ok(MultiHot::from_bools(&set));
        }
    }
    Err(Error::contract(
        "label sampling produced 1000 empty draws; raise the base probabilities",
    ))
}

/// One generated example. Pixels are `[C, H, W]` values in [0, 1];
/// channels are fixed at one.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Vec<f64>,
    pub size: usize,
    pub labels: MultiHot,
}

impl LabeledImage {
    pub fn channels(&self) -> usize {
        1
    }
}

/// Painted-pixel counts per label, used to check that every positive
/// label actually appears.
pub struct RenderStats {
    pub painted: Vec<usize>,
}

pub fn render(labels: &MultiHot, recipe: &SceneRecipe, rng: &mut ChaCha8Rng, id: String) -> LabeledImage {
    render_with_stats(labels, recipe, rng, id).0
}

pub fn render_with_stats(
    labels: &MultiHot,
    recipe: &SceneRecipe,
    rng: &mut ChaCha8Rng,
    id: String,
) -> (LabeledImage, RenderStats) {
    let n = recipe.image_size;
    let mut pixels: Vec<f64> = (0..n * n)
        .map(|_| recipe.background + rng.gen_range(-recipe.noise..=recipe.noise))
        .collect();
    let mut painted = vec![0usize; recipe.num_labels()];
    for (l, spec) in recipe.labels.iter().enumerate() {
        if !labels.get(l) {
            continue;
        }
        let instances = rng.gen_range(1..=3);
        for _ in 0..instances {
            let size = rng.gen_range(spec.size.0..=spec.size.1);
            let margin = size.ceil() as usize + 1;
            let cx = rng.gen_range(margin as f64..(n - margin) as f64);
            let cy = rng.gen_range(margin as f64..(n - margin) as f64);
            let value = rng.gen_range(spec.intensity.0..=spec.intensity.1);
            painted[l] += paint(&mut pixels, n, spec.shape, cx, cy, size, value);
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    (
        LabeledImage { id, pixels, size: n, labels: labels.clone() },
        RenderStats { painted },
    )
}

/// Paint one primitive, returning how many pixels it covered.
fn paint(pixels: &mut [f64], n: usize, shape: ShapeKind, cx: f64, cy: f64, size: f64, value: f64) -> usize {
    let mut count = 0;
    let r = size;
    let lo_y = (cy - r - 1.0).floor().max(0.0) as usize;
    let hi_y = ((cy + r + 1.0).ceil() as usize).min(n - 1);
    let lo_x = (cx - r - 1.0).floor().max(0.0) as usize;
    let hi_x = ((cx + r + 1.0).ceil() as usize).min(n - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match shape {
                ShapeKind::Disk => dx * dx + dy * dy <= r * r,
                ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
                ShapeKind::Bar => dx.abs() <= r && dy.abs() <= (r * 0.3).max(1.0),
                ShapeKind::Cross => {
                    let arm = (r * 0.35).max(1.0);
                    (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
                }
                ShapeKind::Ring => {
                    let d2 = dx * dx + dy * dy;
                    let inner = (r - 1.6).max(0.5);
                    d2 <= r * r && d2 >= inner * inner
                }
                ShapeKind::Stripe => dy.abs() <= r && dx.abs() <= (r * 0.3).max(1.0),
            };
            if inside {
                pixels[y * n + x] = value;
                count += 1;
            }
        }
    }
    count
}

/// Generate `n` examples; per-image substreams make the output
/// independent of scheduling.
pub fn generate_dataset(recipe: &SceneRecipe, n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    recipe.validate()?;
    if n == 0 {
        return Err(Error::contract("cannot generate an empty dataset"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let labels =
                sample_label_set(recipe, &mut substream_indexed(seed, "data/labels", i as u64))?;
            let mut rng = substream_indexed(seed, "data/render", i as u64);
            Ok(render(&labels, recipe, &mut rng, format!("img{i:05}")))
        })
        .collect()
}

/// Exact label marginals of the generator: every draw outcome is pushed
/// through the same rule resolution as sampling, weighted by its draw
/// probability, conditioned on a nonempty result.
pub fn analytic_marginals(recipe: &SceneRecipe) -> Vec<f64> {
    let l = recipe.num_labels();
    assert!(l <= 20, "marginal enumeration is exponential in L");
    let mut sums = vec![0.0f64; l];
    let mut total = 0.0f64;
    for mask in 0u32..(1 << l) {
        let draw: Vec<bool> = (0..l).map(|i| mask >> i & 1 == 1).collect();
        let prob: f64 = draw
            .iter()
            .zip(&recipe.labels)
            .map(|(&d, s)| if d { s.base_prob } else { 1.0 - s.base_prob })
            .product();
        if prob == 0.0 {
            continue;
        }
        let set = resolve_label_set(draw, recipe);
        if set.iter().any(|&s| s) {
            total += prob;
            for (sum, &present) in sums.iter_mut().zip(&set) {
                if present {
                    *sum += prob;
                }
            }
        }
    }
    sums.iter().map(|s| s / total).collect()
}
