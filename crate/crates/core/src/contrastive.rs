//! Perceptual features and the contrastive regularizers built on them.
//!
//! For each extractor tap `i` the regularizer forms the ratio
//!
//! ```text
//!            ‖V_i(positive) − V_i(anchor)‖
//! ─────────────────────────────────────────────────────
//!  Σ_q w_q ‖V_i(negative_q) − V_i(anchor)‖ + e ‖V_i(hazy) − V_i(anchor)‖
//! ```
//!
//! and sums the ratios with layer weights `ξ_i`. The canonical form uses
//! `w_q = 1, e = 1`; the curricular form uses difficulty weights `w_q` and
//! `e = z`, the number of non-easy negatives. Every `‖·‖` is a mean
//! absolute difference.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conv::{ConvSpec, Padding};
use crate::error::{config, invalid, Error, Result};
use crate::tensor::Tensor;

/// Guard added to every per-layer denominator.
pub const DENOMINATOR_EPS: f64 = 1e-12;

/// Tap points of the pretrained perceptual network: 1st, 3rd, 5th, 9th and 13th convolutions.
pub const PERCEPTUAL_TAPS: [usize; 5] = [1, 3, 5, 9, 13];

const PYRAMID_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// The image itself as a single feature layer.
    Identity,
    /// Five frozen, seeded stride-2 conv + ReLU stages.
    FixedRandomPyramid { seed: u64 },
    /// A sequential conv/ReLU/max-pool network loaded from a weights file.
    PretrainedPerceptual {
        weights: PathBuf,
        #[serde(default = "default_taps")]
        tap_indices: Vec<usize>,
    },
}

fn default_taps() -> Vec<usize> {
    PERCEPTUAL_TAPS.to_vec()
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::FixedRandomPyramid { seed: 0 }
    }
}

impl ExtractorSpec {
    /// Parses a kind name as used on the command line.
    pub fn from_kind(kind: &str, seed: u64) -> Result<Self> {
        match kind {
            "identity" => Ok(ExtractorSpec::Identity),
            "fixed_random_pyramid" | "fixed-random-pyramid" => Ok(ExtractorSpec::FixedRandomPyramid { seed }),
            other => Err(config(format!("unknown extractor kind {other:?}"))),
        }
    }
}

/// Layer weights `ξ_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerWeights(Vec<f64>);

impl Default for LayerWeights {
    fn default() -> Self {
        LayerWeights(vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0])
    }
}

impl LayerWeights {
    pub fn new(xi: Vec<f64>) -> Result<Self> {
        if xi.is_empty() || xi.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(config(format!("layer weights {xi:?} must be nonempty and positive")));
        }
        Ok(LayerWeights(xi))
    }

    pub fn uniform(n: usize) -> Self {
        LayerWeights(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One activation tensor per tap point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualLayer {
    Conv { weight: Tensor, bias: Tensor },
    MaxPool,
}

/// Contents of a pretrained perceptual weights file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualWeights {
    pub layers: Vec<PerceptualLayer>,
}

#[derive(Clone, Debug)]
enum Stage {
    Conv { weight: Tensor, bias: Tensor, spec: ConvSpec, tap: bool },
    MaxPool,
}

/// A frozen feature extractor.
#[derive(Clone, Debug)]
pub struct Extractor {
    stages: Vec<Stage>,
    normalize: bool,
    taps: usize,
}

impl Extractor {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        match spec {
            ExtractorSpec::Identity => Ok(Extractor { stages: Vec::new(), normalize: false, taps: 1 }),
            ExtractorSpec::FixedRandomPyramid { seed } => Ok(Self::pyramid(*seed)),
            ExtractorSpec::PretrainedPerceptual { weights, tap_indices } => {
                Self::perceptual(&load_weights(weights)?, tap_indices)
            }
        }
    }

    fn pyramid(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = PYRAMID_WIDTHS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let weight = Tensor::from_fn([cout, cin, 3, 3], |_| rng.gen_range(-bound..bound));
                cin = cout;
                Stage::Conv {
                    weight,
                    bias: Tensor::zeros([1, cout, 1, 1]),
                    spec: ConvSpec { stride: 2, pad: 1, padding: Padding::Zero },
                    tap: true,
                }
            })
            .collect();
        Extractor { stages, normalize: false, taps: PYRAMID_WIDTHS.len() }
    }

    pub fn perceptual(weights: &PerceptualWeights, tap_indices: &[usize]) -> Result<Self> {
        if tap_indices.is_empty() || tap_indices.windows(2).any(|w| w[0] >= w[1]) || tap_indices[0] == 0 {
            return Err(config(format!("tap indices {tap_indices:?} must be increasing and 1-based")));
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        let mut ordinal = 0;
        for layer in &weights.layers {
            match layer {
                PerceptualLayer::MaxPool => stages.push(Stage::MaxPool),
                PerceptualLayer::Conv { weight, bias } => {
                    let [cout, wc, k, kw] = weight.shape();
                    if wc != cin || k != kw || k % 2 == 0 || bias.shape() != [1, cout, 1, 1] {
                        return Err(config(format!(
                            "perceptual conv {} has weight {:?} / bias {:?} after {cin} channels",
                            ordinal + 1,
                            weight.shape(),
                            bias.shape()
                        )));
                    }
                    ordinal += 1;
                    cin = cout;
                    stages.push(Stage::Conv {
                        weight: weight.clone(),
                        bias: bias.clone(),
                        spec: ConvSpec::same(k, Padding::Zero),
                        tap: tap_indices.contains(&ordinal),
                    });
                }
            }
            if ordinal >= *tap_indices.last().expect("nonempty") {
                break;
            }
        }
        if ordinal < *tap_indices.last().expect("nonempty") {
            return Err(config(format!("weights have {ordinal} convolutions, taps need {tap_indices:?}")));
        }
        Ok(Extractor { stages, normalize: true, taps: tap_indices.len() })
    }

    /// Number of feature layers produced.
    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Features of `x` inside a graph. Extractor weights enter as constants,
    /// so gradients reach `x` but never the extractor.
    pub fn features_var<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        if self.stages.is_empty() {
            return vec![x];
        }
        let mut h = x;
        if self.normalize {
            let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 / IMAGENET_STD[o] } else { 0.0 });
            let b = Tensor::from_fn([1, 3, 1, 1], |[_, c, _, _]| -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
            h = h.conv2d(g.constant(w), g.constant(b), ConvSpec::same(1, Padding::Zero));
        }
        let mut out = Vec::with_capacity(self.taps);
        for stage in &self.stages {
            match stage {
                Stage::MaxPool => h = h.max_pool2(),
                Stage::Conv { weight, bias, spec, tap } => {
                    h = h.conv2d(g.constant(weight.clone()), g.constant(bias.clone()), *spec).relu();
                    if *tap {
                        out.push(h);
                    }
                }
            }
        }
        out
    }

    /// Features of a batch of images, outside any training graph.
    pub fn extract(&self, images: &Tensor) -> FeatureStack {
        let g = Graph::new();
        let x = g.constant(images.clone());
        FeatureStack { layers: self.features_var(x).into_iter().map(|v| (*v.value()).clone()).collect() }
    }
}

fn load_weights(path: &Path) -> Result<PerceptualWeights> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| config(format!("perceptual weights {}: {e}", path.display())))
}

pub fn extract_features(img: &Tensor, spec: &ExtractorSpec) -> Result<FeatureStack> {
    Ok(Extractor::from_spec(spec)?.extract(img))
}

/// Mean absolute difference between two same-shaped layers.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("l1_distance shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Features of the fixed images a single anchor is contrasted with.
#[derive(Clone, Debug)]
pub struct ContrastTargets {
    pub positive: FeatureStack,
    pub hazy: FeatureStack,
    pub negatives: Vec<FeatureStack>,
}

impl ContrastTargets {
    /// Runs the extractor once over `[positive, hazy, negatives...]`.
    pub fn compute(extractor: &Extractor, positive: &Tensor, hazy: &Tensor, negatives: &[&Tensor]) -> Result<Self> {
        let mut all = vec![positive, hazy];
        all.extend_from_slice(negatives);
        if all.iter().any(|t| t.shape() != positive.shape()) || positive.batch() != 1 {
            return Err(invalid("positive, hazy and negatives must be single images of one size"));
        }
        let stacked = Tensor::stack_batch(&all)?;
        let feats = extractor.extract(&stacked);
        let pick = |i: usize| FeatureStack { layers: feats.layers.iter().map(|l| l.slice_batch(i, 1)).collect() };
        Ok(ContrastTargets {
            positive: pick(0),
            hazy: pick(1),
            negatives: (0..negatives.len()).map(|q| pick(q + 2)).collect(),
        })
    }
}

/// Weighted contrastive ratio sum for one anchor.
///
/// `neg_weights[q]` scales the distance to negative `q`; `easy_weight`
/// scales the distance to the hazy input.
pub fn contrast_var<'g>(
    anchor: &[Var<'g>],
    targets: &ContrastTargets,
    neg_weights: &[f64],
    easy_weight: f64,
    xi: &LayerWeights,
) -> Result<Var<'g>> {
    let n = xi.len();
    if anchor.len() != n || targets.positive.len() != n {
        return Err(config(format!(
            "extractor yields {} layers but {} layer weights are configured",
            anchor.len(),
            n
        )));
    }
    if neg_weights.len() != targets.negatives.len() {
        return Err(invalid("one weight per negative is required"));
    }
    let g = anchor[0].graph();
    let dist = |a: Var<'g>, t: &Tensor| a.sub(g.constant(t.clone())).mean_abs();
    let mut total: Option<Var<'g>> = None;
    for (i, &a) in anchor.iter().enumerate() {
        let numerator = dist(a, &targets.positive.layers[i]);
        let mut denominator: Option<Var<'g>> = None;
        for (neg, &w) in targets.negatives.iter().zip(neg_weights) {
            let term = dist(a, &neg.layers[i]).scale(w);
            denominator = Some(match denominator {
                Some(d) => d.add(term),
                None => term,
            });
        }
        let easy = dist(a, &targets.hazy.layers[i]).scale(easy_weight);
        let denominator = match denominator {
            Some(d) => d.add(easy),
            None => easy,
        };
        let den_value = denominator.value().item();
        if den_value.is_nan() || den_value < DENOMINATOR_EPS {
            return Err(Error::DegenerateContrast { layer: i, denominator: den_value });
        }
        let ratio = numerator.div(denominator.affine(1.0, DENOMINATOR_EPS)).scale(xi.as_slice()[i]);
        total = Some(match total {
            Some(t) => t.add(ratio),
            None => ratio,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn check_images(anchor: &Tensor, positive: &Tensor, hazy: &Tensor, negatives: &[&Tensor]) -> Result<()> {
    let shape = anchor.shape();
    if positive.shape() != shape || hazy.shape() != shape || negatives.iter().any(|n| n.shape() != shape) {
        return Err(invalid("anchor, positive, hazy and negatives must share one shape"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ratio_value(
    anchor: &Tensor,
    positive: &Tensor,
    hazy: &Tensor,
    negatives: &[&Tensor],
    neg_weights: &[f64],
    easy_weight: f64,
    xi: &LayerWeights,
    extractor: &Extractor,
) -> Result<f64> {
    check_images(anchor, positive, hazy, negatives)?;
    let targets = ContrastTargets::compute(extractor, positive, hazy, negatives)?;
    let g = Graph::new();
    let feats = extractor.features_var(g.constant(anchor.clone()));
    Ok(contrast_var(&feats, &targets, neg_weights, easy_weight, xi)?.value().item())
}

/// Canonical contrastive regularization: unit weights on every negative and on the hazy input.
pub fn canonical_cr(
    anchor: &Tensor,
    positive: &Tensor,
    hazy: &Tensor,
    negatives: &[&Tensor],
    xi: &LayerWeights,
    extractor: &Extractor,
) -> Result<f64> {
    let ones = vec![1.0; negatives.len()];
    ratio_value(anchor, positive, hazy, negatives, &ones, 1.0, xi, extractor)
}

fn check_weighted(negatives: &[(&Tensor, f64)], z: usize) -> Result<()> {
    if z == 0 || negatives.len() != z {
        return Err(invalid(format!("expected z = {z} ≥ 1 weighted negatives, got {}", negatives.len())));
    }
    if let Some((_, w)) = negatives.iter().find(|(_, w)| !(*w > 0.0 && w.is_finite())) {
        return Err(invalid(format!("negative weight {w} must be positive")));
    }
    Ok(())
}

/// Curricular contrastive regularization: difficulty weights on the
/// negatives and weight `z` on the hazy input.
pub fn curricular_cr(
    anchor: &Tensor,
    positive: &Tensor,
    hazy: &Tensor,
    negatives: &[(&Tensor, f64)],
    z: usize,
    xi: &LayerWeights,
    extractor: &Extractor,
) -> Result<f64> {
    check_weighted(negatives, z)?;
    let (images, weights): (Vec<&Tensor>, Vec<f64>) = negatives.iter().copied().unzip();
    ratio_value(anchor, positive, hazy, &images, &weights, z as f64, xi, extractor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fidelity: f64,
    /// Zero when `lambda` is zero (the extractor is not run).
    pub rstar: f64,
}

pub struct LossVars<'g> {
    pub total: Var<'g>,
    pub fidelity: Var<'g>,
    pub rstar: Option<Var<'g>>,
}

impl LossVars<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.value().item(),
            fidelity: self.fidelity.value().item(),
            rstar: self.rstar.map_or(0.0, |r| r.value().item()),
        }
    }
}

/// Weighted negatives and hazy-term weight for one anchor.
pub struct Contrast<'a> {
    pub targets: &'a ContrastTargets,
    pub neg_weights: &'a [f64],
    pub easy_weight: f64,
}

/// `mean |positive − anchor| + lambda · R`, with `R` skipped entirely when
/// `lambda` is zero.
pub fn total_loss_var<'g>(
    anchor: Var<'g>,
    positive: &Tensor,
    contrast: Option<Contrast<'_>>,
    xi: &LayerWeights,
    lambda: f64,
    extractor: &Extractor,
) -> Result<LossVars<'g>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(config(format!("lambda {lambda} must be a nonnegative number")));
    }
    if anchor.shape() != positive.shape() {
        return Err(invalid("anchor and positive differ in shape"));
    }
    let g = anchor.graph();
    let fidelity = anchor.sub(g.constant(positive.clone())).mean_abs();
    if lambda == 0.0 {
        return Ok(LossVars { total: fidelity, fidelity, rstar: None });
    }
    let contrast = contrast.ok_or_else(|| config("lambda > 0 needs contrastive targets"))?;
    let feats = extractor.features_var(anchor);
    let rstar = contrast_var(&feats, contrast.targets, contrast.neg_weights, contrast.easy_weight, xi)?;
    let total = fidelity.add(rstar.scale(lambda));
    Ok(LossVars { total, fidelity, rstar: Some(rstar) })
}

/// Fidelity plus `lambda` times the curricular regularizer.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    anchor: &Tensor,
    positive: &Tensor,
    hazy: &Tensor,
    weighted_negatives: &[(&Tensor, f64)],
    z: usize,
    xi: &LayerWeights,
    lambda: f64,
    extractor: &Extractor,
) -> Result<LossBreakdown> {
    check_weighted(weighted_negatives, z)?;
    let (images, weights): (Vec<&Tensor>, Vec<f64>) = weighted_negatives.iter().copied().unzip();
    check_images(anchor, positive, hazy, &images)?;
    let targets = if lambda > 0.0 { Some(ContrastTargets::compute(extractor, positive, hazy, &images)?) } else { None };
    let g = Graph::new();
    let a = g.constant(anchor.clone());
    let contrast = targets.as_ref().map(|targets| Contrast { targets, neg_weights: &weights, easy_weight: z as f64 });
    Ok(total_loss_var(a, positive, contrast, xi, lambda, extractor)?.breakdown())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_image(v: f64) -> Tensor {
        Tensor::full([1, 3, 8, 8], v)
    }

    fn identity() -> Extractor {
        Extractor::from_spec(&ExtractorSpec::Identity).unwrap()
    }

    #[test]
    fn identity_extractor_returns_input() {
        let img = Tensor::from_fn([1, 3, 8, 8], |[_, c, y, x]| (c + y + x) as f64 / 20.0);
        let f = identity().extract(&img);
        assert_eq!(f.layers, vec![img]);
    }

    #[test]
    fn pyramid_is_deterministic_with_five_layers() {
        let spec = ExtractorSpec::FixedRandomPyramid { seed: 3 };
        let img = Tensor::from_fn([1, 3, 32, 32], |[_, c, y, x]| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0);
        let a = extract_features(&img, &spec).unwrap();
        let b = extract_features(&img, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let widths: Vec<usize> = a.layers.iter().map(|l| l.channels()).collect();
        assert_eq!(widths, PYRAMID_WIDTHS);
        assert_eq!(a.layers[0].height(), 16);
        assert_eq!(a.layers[4].height(), 1);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!(ExtractorSpec::from_kind("vgg-ish", 0), Err(Error::Config(_))));
        let parsed: std::result::Result<ExtractorSpec, _> = serde_json::from_str(r#"{"kind": "vgg"}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn l1_distance_examples() {
        let a = scalar_image(0.3);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_distance(&scalar_image(1.0), &scalar_image(0.0)).unwrap(), 1.0);
        assert!(l1_distance(&a, &Tensor::zeros([1, 3, 8, 9])).is_err());
    }

    #[test]
    fn canonical_hand_example() {
        let xi = LayerWeights::uniform(1);
        let r = canonical_cr(&scalar_image(0.0), &scalar_image(2.0), &scalar_image(3.0), &[&scalar_image(1.0)], &xi, &identity())
            .unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn curricular_hand_example() {
        let xi = LayerWeights::uniform(1);
        let neg = scalar_image(1.0);
        let r = curricular_cr(&scalar_image(0.0), &scalar_image(2.0), &scalar_image(3.0), &[(&neg, 1.25)], 1, &xi, &identity())
            .unwrap();
        assert!((r - 2.0 / 4.25).abs() < 1e-12);
    }

    #[test]
    fn zero_when_anchor_is_positive() {
        let ext = Extractor::from_spec(&ExtractorSpec::FixedRandomPyramid { seed: 1 }).unwrap();
        let a = Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((c + 2 * y + x) % 5) as f64 / 5.0);
        let neg = a.map(|v| 1.0 - v);
        let hazy = a.map(|v| 0.5 * v + 0.4);
        let r = canonical_cr(&a, &a, &hazy, &[&neg], &LayerWeights::default(), &ext).unwrap();
        assert_eq!(r, 0.0);
        let r = curricular_cr(&a, &a, &hazy, &[(&neg, 0.75)], 1, &LayerWeights::default(), &ext).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn degenerate_denominator() {
        let a = scalar_image(0.5);
        let err = canonical_cr(&a, &scalar_image(0.7), &a, &[&a], &LayerWeights::uniform(1), &identity()).unwrap_err();
        assert!(matches!(err, Error::DegenerateContrast { layer: 0, .. }));
    }

    #[test]
    fn farther_hazy_lowers_ratio() {
        let xi = LayerWeights::uniform(1);
        let mut last = f64::INFINITY;
        for hazy in [0.5, 1.0, 2.0, 4.0] {
            let r = canonical_cr(&scalar_image(0.0), &scalar_image(2.0), &scalar_image(hazy), &[&scalar_image(1.0)], &xi, &identity())
                .unwrap();
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn layer_count_mismatch_is_config_error() {
        let r = canonical_cr(&scalar_image(0.0), &scalar_image(1.0), &scalar_image(0.5), &[], &LayerWeights::default(), &identity());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn curricular_rejects_bad_inputs() {
        let xi = LayerWeights::uniform(1);
        let neg = scalar_image(1.0);
        let ext = identity();
        assert!(curricular_cr(&scalar_image(0.0), &scalar_image(2.0), &scalar_image(3.0), &[(&neg, 1.0)], 2, &xi, &ext).is_err());
        assert!(curricular_cr(&scalar_image(0.0), &scalar_image(2.0), &scalar_image(3.0), &[(&neg, 0.0)], 1, &xi, &ext).is_err());
    }

    #[test]
    fn total_loss_composes() {
        let xi = LayerWeights::uniform(1);
        let neg = scalar_image(1.0);
        let ext = identity();
        let (a, p, h) = (scalar_image(0.0), scalar_image(2.0), scalar_image(3.0));
        let pure = total_loss(&a, &p, &h, &[(&neg, 1.25)], 1, &xi, 0.0, &ext).unwrap();
        assert_eq!(pure.total, 2.0);
        assert_eq!(pure.rstar, 0.0);
        let full = total_loss(&a, &p, &h, &[(&neg, 1.25)], 1, &xi, 0.2, &ext).unwrap();
        assert!((full.total - (2.0 + 0.2 * 2.0 / 4.25)).abs() < 1e-12);
        assert!(total_loss(&a, &p, &h, &[(&neg, 1.25)], 1, &xi, -1.0, &ext).is_err());
    }

    #[test]
    fn perceptual_network_from_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = |cin: usize, cout: usize| PerceptualLayer::Conv {
            weight: Tensor::from_fn([cout, cin, 3, 3], |_| rng.gen_range(-0.3..0.3)),
            bias: Tensor::from_fn([1, cout, 1, 1], |_| rng.gen_range(-0.1..0.1)),
        };
        let weights = PerceptualWeights {
            layers: vec![conv(3, 4), conv(4, 4), PerceptualLayer::MaxPool, conv(4, 8), conv(8, 8)],
        };
        let ext = Extractor::perceptual(&weights, &[1, 3]).unwrap();
        let img = Tensor::from_fn([1, 3, 8, 8], |[_, c, y, x]| ((c + y * x) % 4) as f64 / 4.0);
        let f = ext.extract(&img);
        assert_eq!(f.layers[0].shape(), [1, 4, 8, 8]);
        assert_eq!(f.layers[1].shape(), [1, 8, 4, 4]);
        assert!(Extractor::perceptual(&weights, &[1, 9]).is_err());
        assert!(Extractor::perceptual(&weights, &[3, 1]).is_err());
        let bad = PerceptualWeights { layers: vec![conv(4, 4)] };
        assert!(Extractor::perceptual(&bad, &[1]).is_err());
    }

    #[test]
    fn extractor_weights_get_no_gradient() {
        let ext = Extractor::from_spec(&ExtractorSpec::FixedRandomPyramid { seed: 5 }).unwrap();
        let g = Graph::new();
        let anchor = g.param(Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((c + y + 3 * x) % 7) as f64 / 7.0));
        let feats = ext.features_var(anchor);
        let mut loss = feats[0].mean_abs();
        for f in &feats[1..] {
            loss = loss.add(f.mean_abs());
        }
        let before = g.len();
        let grads = g.backward(loss);
        assert!(grads.wrt(anchor).is_some());
        // Every other leaf in the graph is an extractor constant.
        assert_eq!(g.len(), before);
        for stage in &ext.stages {
            if let Stage::Conv { weight, .. } = stage {
                let probe = g.constant(weight.clone());
                assert!(!probe.requires_grad());
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ratios_nonnegative_and_weight_monotone(
                vals in prop::collection::vec(-2.0f64..2.0, 4),
                w in 0.1f64..2.0,
                bump in 0.01f64..1.0,
            ) {
                let [a, p, h, n] = [vals[0], vals[1], vals[2], vals[3]];
                prop_assume!((h - a).abs() > 1e-3 && (n - a).abs() > 1e-3 && (p - a).abs() > 1e-3);
                let xi = LayerWeights::uniform(1);
                let ext = identity();
                let neg = scalar_image(n);
                let (a, p, h) = (scalar_image(a), scalar_image(p), scalar_image(h));
                let r1 = curricular_cr(&a, &p, &h, &[(&neg, w)], 1, &xi, &ext).unwrap();
                let r2 = curricular_cr(&a, &p, &h, &[(&neg, w + bump)], 1, &xi, &ext).unwrap();
                prop_assert!(r1 > 0.0);
                prop_assert!(r2 < r1);
            }
        }
    }
}
