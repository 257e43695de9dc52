//! The dehazing network.
//!
//! Each feature-attention block runs `conv → ReLU → conv`, channel
//! attention, and then a spatial attention stage with a local residual:
//!
//! ```text
//! block(M) = M + attend(CA(conv(relu(conv(M)))))
//! ```
//!
//! `attend` is either the physics-aware dual-branch unit (PDU), which
//! recombines features the way the scattering model recombines radiance
//! and airlight, or the classical pixel-attention gate kept for ablations.
//! Blocks are stacked into residual groups whose outputs are fused by a
//! channel attention over their concatenation, followed by a
//! reconstruction convolution and a global residual on the input image.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::conv::{ConvSpec, Padding};
use crate::error::{config, invalid, Error, Result};
use crate::hazephysics::{ImageTensor, MIN_SIDE};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Physics-aware dual-branch unit.
    Pdu,
    /// Single-channel sigmoid gate; the unmodified feature-attention block.
    PixelAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub kernel: usize,
    pub attention: AttentionKind,
}

impl Default for NetworkConfig {
    /// Desk-scale backbone: one group of two blocks at 16 channels.
    fn default() -> Self {
        NetworkConfig { groups: 1, blocks_per_group: 2, channels: 16, kernel: 3, attention: AttentionKind::Pdu }
    }
}

impl NetworkConfig {
    pub fn full_scale() -> Self {
        NetworkConfig { groups: 3, blocks_per_group: 19, channels: 64, kernel: 3, attention: AttentionKind::Pdu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.blocks_per_group == 0 {
            return Err(config("groups and blocks_per_group must be at least 1"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(8) {
            return Err(config(format!("channel count {} must be a positive multiple of 8", self.channels)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn spatial(&self) -> ConvSpec {
        ConvSpec::same(self.kernel, Padding::Reflect)
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore(BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore(self.0.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect())
    }

    /// Enters every array into `graph`, as differentiable leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .0
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Checks that names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &BTreeMap<String, Shape>) -> Result<()> {
        for (name, shape) in layout {
            match self.0.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.0.keys().find(|k| !layout.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters entered into a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradient for every bound parameter; zero where the loss did not reach it.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        ParamStore(
            self.vars
                .iter()
                .map(|(k, v)| {
                    let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(v.shape()));
                    (k.clone(), g)
                })
                .collect(),
        )
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter shapes of a convolution layer.
fn conv_layout(layout: &mut BTreeMap<String, Shape>, name: String, cin: usize, cout: usize, k: usize) {
    layout.insert(format!("{name}.weight"), [cout, cin, k, k]);
    layout.insert(format!("{name}.bias"), [1, cout, 1, 1]);
}

fn conv<'g>(p: &Bound<'g>, name: &str, x: Var<'g>, spec: ConvSpec) -> Var<'g> {
    x.conv2d(p.var(&format!("{name}.weight")), p.var(&format!("{name}.bias")), spec)
}

fn pointwise() -> ConvSpec {
    ConvSpec::same(1, Padding::Zero)
}

/// Uniform `±1/sqrt(fan_in)` initialization for every array in `layout`.
fn init_store(layout: &BTreeMap<String, Shape>, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        let fan_in = if name.ends_with(".bias") {
            let weight = layout[&name.replace(".bias", ".weight")];
            weight[1] * weight[2] * weight[3]
        } else {
            shape[1] * shape[2] * shape[3]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(name.clone(), Tensor::from_fn(*shape, |_| rng.gen_range(-bound..bound)));
    }
    store
}

fn pdu_layout(layout: &mut BTreeMap<String, Shape>, prefix: &str, n: usize, k: usize) {
    conv_layout(layout, join(prefix, "airlight.down"), n, n / 8, 1);
    conv_layout(layout, join(prefix, "airlight.up"), n / 8, n, 1);
    conv_layout(layout, join(prefix, "transmission.conv"), n, n, k);
    conv_layout(layout, join(prefix, "transmission.down"), n, n / 8, 1);
    conv_layout(layout, join(prefix, "transmission.up"), n / 8, n, k);
}

fn block_layout(layout: &mut BTreeMap<String, Shape>, prefix: &str, n: usize, k: usize, attention: AttentionKind) {
    conv_layout(layout, join(prefix, "conv1"), n, n, k);
    conv_layout(layout, join(prefix, "conv2"), n, n, k);
    conv_layout(layout, join(prefix, "ca.down"), n, n / 8, 1);
    conv_layout(layout, join(prefix, "ca.up"), n / 8, n, 1);
    match attention {
        AttentionKind::Pdu => pdu_layout(layout, &join(prefix, "pdu"), n, k),
        AttentionKind::PixelAttention => {
            conv_layout(layout, join(prefix, "pa.down"), n, n / 8, 1);
            conv_layout(layout, join(prefix, "pa.up"), n / 8, 1, 1);
        }
    }
}

/// Every parameter name and shape of the full network.
pub fn network_layout(cfg: &NetworkConfig) -> BTreeMap<String, Shape> {
    let (n, k) = (cfg.channels, cfg.kernel);
    let mut layout = BTreeMap::new();
    conv_layout(&mut layout, "head".into(), 3, n, k);
    for g in 0..cfg.groups {
        for b in 0..cfg.blocks_per_group {
            block_layout(&mut layout, &format!("groups.{g}.blocks.{b}"), n, k, cfg.attention);
        }
        conv_layout(&mut layout, format!("groups.{g}.tail"), n, n, k);
    }
    let fused = n * cfg.groups;
    conv_layout(&mut layout, "fusion.down".into(), fused, n / 8, 1);
    conv_layout(&mut layout, "fusion.up".into(), n / 8, fused, 1);
    conv_layout(&mut layout, "post".into(), n, n, k);
    conv_layout(&mut layout, "recon".into(), n, 3, k);
    layout
}

/// `σ(up(ReLU(down(GAP(x)))))` as a pooled `[N, C, 1, 1]` tensor.
fn squeeze_excite<'g>(p: &Bound<'g>, prefix: &str, x: Var<'g>) -> Var<'g> {
    let pooled = x.spatial_mean();
    let hidden = conv(p, &join(prefix, "down"), pooled, pointwise()).relu();
    conv(p, &join(prefix, "up"), hidden, pointwise()).sigmoid()
}

/// Airlight-like features: pooled, squeezed, and replicated over space.
pub(crate) fn airlight_var<'g>(p: &Bound<'g>, prefix: &str, m: Var<'g>) -> Var<'g> {
    let [_, _, h, w] = m.shape();
    squeeze_excite(p, &join(prefix, "airlight"), m).replicate(h, w)
}

/// Transmission-like features: a spatially varying sigmoid map.
pub(crate) fn transmission_var<'g>(p: &Bound<'g>, prefix: &str, m: Var<'g>, k: usize) -> Var<'g> {
    let spatial = ConvSpec::same(k, Padding::Reflect);
    let x = conv(p, &join(prefix, "transmission.conv"), m, spatial);
    let x = conv(p, &join(prefix, "transmission.down"), x, pointwise()).relu();
    conv(p, &join(prefix, "transmission.up"), x, spatial).sigmoid()
}

/// `M ⊙ t + A ⊙ (1 − t)`.
pub(crate) fn combine_var<'g>(m: Var<'g>, t: Var<'g>, a: Var<'g>) -> Var<'g> {
    m.mul(t).add(a.mul(t.affine(-1.0, 1.0)))
}

fn pdu_var<'g>(p: &Bound<'g>, prefix: &str, m: Var<'g>, k: usize) -> Var<'g> {
    let t = transmission_var(p, prefix, m, k);
    let a = airlight_var(p, prefix, m);
    combine_var(m, t, a)
}

fn block_var<'g>(p: &Bound<'g>, prefix: &str, m: Var<'g>, k: usize, attention: AttentionKind) -> Var<'g> {
    let spatial = ConvSpec::same(k, Padding::Reflect);
    let x = conv(p, &join(prefix, "conv1"), m, spatial).relu();
    let x = conv(p, &join(prefix, "conv2"), x, spatial);
    let x = x.channel_scale(squeeze_excite(p, &join(prefix, "ca"), x));
    let x = match attention {
        AttentionKind::Pdu => pdu_var(p, &join(prefix, "pdu"), x, k),
        AttentionKind::PixelAttention => {
            let hidden = conv(p, &join(prefix, "pa.down"), x, pointwise()).relu();
            let gate = conv(p, &join(prefix, "pa.up"), hidden, pointwise()).sigmoid();
            x.pixel_scale(gate)
        }
    };
    m.add(x)
}

/// The full network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
}

impl Network {
    /// Seeded initialization; the reconstruction layer starts at zero so the
    /// untrained network is the identity map on valid images.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = network_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_store(&layout, &mut rng);
        for name in ["recon.weight", "recon.bias"] {
            params.get_mut(name).expect("recon in layout").data_mut().fill(0.0);
        }
        Ok(Network { config, params })
    }

    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_layout(&network_layout(&config))?;
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batched forward pass on `[B, 3, H, W]` images in `[0, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, input: Var<'g>) -> Var<'g> {
        let cfg = &self.config;
        let spatial = cfg.spatial();
        let shallow = conv(p, "head", input, spatial);
        let mut x = shallow;
        let mut group_outputs = Vec::with_capacity(cfg.groups);
        for g in 0..cfg.groups {
            let group_in = x;
            for b in 0..cfg.blocks_per_group {
                x = block_var(p, &format!("groups.{g}.blocks.{b}"), x, cfg.kernel, cfg.attention);
            }
            x = conv(p, &format!("groups.{g}.tail"), x, spatial).add(group_in);
            group_outputs.push(x);
        }
        let stacked = Var::concat_channels(&group_outputs);
        let weights = squeeze_excite(p, "fusion", stacked);
        let n = cfg.channels;
        let mut fused = group_outputs[0].channel_scale(weights.slice_channels(0, n));
        for (g, out) in group_outputs.iter().enumerate().skip(1) {
            fused = fused.add(out.channel_scale(weights.slice_channels(g * n, n)));
        }
        let x = conv(p, "post", fused, spatial);
        let residual = conv(p, "recon", x, spatial);
        input.add(residual).clamp01()
    }

    /// Full-image inference.
    pub fn infer(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let x = graph.constant(img.tensor().clone());
        let out = self.forward(&p, x).value();
        ImageTensor::clamped((*out).clone())
    }
}

/// Runs the network on one image of at least 8×8 pixels.
pub fn network_forward(img: &ImageTensor, network: &Network) -> Result<ImageTensor> {
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(invalid(format!("network input must be at least {MIN_SIDE}x{MIN_SIDE}")));
    }
    network.infer(img)
}

/// Finite `[1, C, H, W]` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.batch() != 1 {
            return Err(invalid(format!("feature map must have batch 1, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(invalid("feature map has non-finite values"));
        }
        Ok(FeatureMap(data))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        FeatureMap(Tensor::full([1, channels, height, width], value))
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Standalone parameters of one PDU acting on `channels` features.
#[derive(Clone, Debug, PartialEq)]
pub struct PduParams {
    channels: usize,
    kernel: usize,
    params: ParamStore,
}

impl PduParams {
    fn layout(channels: usize, kernel: usize) -> Result<BTreeMap<String, Shape>> {
        if channels == 0 || !channels.is_multiple_of(8) {
            return Err(config(format!("PDU channel count {channels} must be a positive multiple of 8")));
        }
        let mut layout = BTreeMap::new();
        pdu_layout(&mut layout, "", channels, kernel);
        Ok(layout)
    }

    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        let layout = Self::layout(channels, 3)?;
        let params = init_store(&layout, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(PduParams { channels, kernel: 3, params })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        let layout = Self::layout(channels, 3)?;
        let params = ParamStore(layout.iter().map(|(k, s)| (k.clone(), Tensor::zeros(*s))).collect());
        Ok(PduParams { channels, kernel: 3, params })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check(&self, m: &FeatureMap) -> Result<()> {
        if m.channels() != self.channels {
            return Err(config(format!(
                "PDU configured for {} channels, got {}",
                self.channels,
                m.channels()
            )));
        }
        Ok(())
    }
}

/// Per-channel spatial mean.
pub fn gap(m: &FeatureMap) -> Vec<f64> {
    let t = m.tensor();
    let area = t.height() * t.width();
    t.data().chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect()
}

fn eval_unary(m: &FeatureMap, f: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>) -> Result<FeatureMap> {
    let graph = Graph::new();
    let x = graph.constant(m.tensor().clone());
    let out = f(&graph, x).value();
    FeatureMap::new((*out).clone())
}

pub fn airlight_branch(m: &FeatureMap, p: &PduParams) -> Result<FeatureMap> {
    p.check(m)?;
    eval_unary(m, |g, x| {
        let bound = p.params.bind(g, false);
        airlight_var(&bound, "", x)
    })
}

pub fn transmission_branch(m: &FeatureMap, p: &PduParams) -> Result<FeatureMap> {
    p.check(m)?;
    eval_unary(m, |g, x| {
        let bound = p.params.bind(g, false);
        transmission_var(&bound, "", x, p.kernel)
    })
}

pub fn pdu_combine(m: &FeatureMap, t: &FeatureMap, a: &FeatureMap) -> Result<FeatureMap> {
    if m.tensor().shape() != t.tensor().shape() || m.tensor().shape() != a.tensor().shape() {
        return Err(invalid(format!(
            "pdu_combine shapes differ: {:?}, {:?}, {:?}",
            m.tensor().shape(),
            t.tensor().shape(),
            a.tensor().shape()
        )));
    }
    let graph = Graph::new();
    let (mv, tv, av) = (
        graph.constant(m.tensor().clone()),
        graph.constant(t.tensor().clone()),
        graph.constant(a.tensor().clone()),
    );
    FeatureMap::new((*combine_var(mv, tv, av).value()).clone())
}

/// Standalone parameters of one feature-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    channels: usize,
    kernel: usize,
    attention: AttentionKind,
    params: ParamStore,
}

impl BlockParams {
    pub fn init(channels: usize, attention: AttentionKind, seed: u64) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(8) {
            return Err(config(format!("block channel count {channels} must be a positive multiple of 8")));
        }
        let mut layout = BTreeMap::new();
        block_layout(&mut layout, "", channels, 3, attention);
        let params = init_store(&layout, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(BlockParams { channels, kernel: 3, attention, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Block output inside an existing graph.
    pub fn forward<'g>(&self, p: &Bound<'g>, m: Var<'g>) -> Var<'g> {
        block_var(p, "", m, self.kernel, self.attention)
    }
}

pub fn fa_block_forward(m: &FeatureMap, params: &BlockParams) -> Result<FeatureMap> {
    if m.channels() != params.channels {
        return Err(config(format!("block configured for {} channels, got {}", params.channels, m.channels())));
    }
    let t = m.tensor();
    if t.height() < 2 || t.width() < 2 {
        return Err(invalid("block input must be at least 2x2 for reflection padding"));
    }
    eval_unary(m, |g, x| {
        let bound = params.params.bind(g, false);
        params.forward(&bound, x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(channels: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Tensor::from_fn([1, channels, h, w], |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn gap_examples() {
        let m = FeatureMap::filled(3, 4, 4, 0.25);
        assert_eq!(gap(&m), vec![0.25; 3]);
        let checker = FeatureMap::new(Tensor::from_fn([1, 1, 4, 6], |[_, _, y, x]| ((y + x) % 2) as f64)).unwrap();
        assert_eq!(gap(&checker), vec![0.5]);
        let m = random_map(5, 7, 3, 1);
        let pooled = gap(&m);
        for c in 0..5 {
            let mut s = 0.0;
            for y in 0..7 {
                for x in 0..3 {
                    s += m.tensor().at([0, c, y, x]);
                }
            }
            assert!((pooled[c] - s / 21.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_half() {
        let p = PduParams::zeros(16).unwrap();
        let m = random_map(16, 6, 5, 2);
        let a = airlight_branch(&m, &p).unwrap();
        let t = transmission_branch(&m, &p).unwrap();
        assert!(a.tensor().data().iter().all(|&v| v == 0.5));
        assert!(t.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let p = PduParams::init(16, 1).unwrap();
        let m = random_map(8, 4, 4, 3);
        assert!(matches!(airlight_branch(&m, &p), Err(Error::Config(_))));
        assert!(matches!(transmission_branch(&m, &p), Err(Error::Config(_))));
        assert!(PduParams::init(12, 1).is_err());
    }

    #[test]
    fn airlight_is_spatially_constant() {
        let p = PduParams::init(16, 4).unwrap();
        let m = random_map(16, 9, 7, 5);
        let a = airlight_branch(&m, &p).unwrap();
        let t = a.tensor();
        for c in 0..16 {
            let first = t.at([0, c, 0, 0]);
            assert!(first > 0.0 && first < 1.0);
            for y in 0..9 {
                for x in 0..7 {
                    assert_eq!(t.at([0, c, y, x]), first);
                }
            }
        }
    }

    fn dense(w: &Tensor, b: &Tensor, x: &[f64], sum_taps: bool) -> Vec<f64> {
        let [cout, cin, k, _] = w.shape();
        (0..cout)
            .map(|o| {
                let mut acc = b.at([0, o, 0, 0]);
                for i in 0..cin {
                    let tap = if sum_taps {
                        (0..k * k).map(|t| w.at([o, i, t / k, t % k])).sum::<f64>()
                    } else {
                        w.at([o, i, 0, 0])
                    };
                    acc += tap * x[i];
                }
                acc
            })
            .collect()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn one_pixel_airlight_matches_dense_algebra() {
        let p = PduParams::init(16, 6).unwrap();
        let m = random_map(16, 1, 1, 7);
        let got = airlight_branch(&m, &p).unwrap();
        let s = p.params();
        let x = m.tensor().data().to_vec();
        let h: Vec<f64> = dense(s.get("airlight.down.weight").unwrap(), s.get("airlight.down.bias").unwrap(), &x, false)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let out = dense(s.get("airlight.up.weight").unwrap(), s.get("airlight.up.bias").unwrap(), &h, false);
        for (g, e) in got.tensor().data().iter().zip(out) {
            assert!((g - sigmoid(e)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_pixel_transmission_matches_dense_algebra() {
        // On a single pixel, reflection padding replicates it under every tap.
        let p = PduParams::init(16, 8).unwrap();
        let m = random_map(16, 1, 1, 9);
        let got = transmission_branch(&m, &p).unwrap();
        let s = p.params();
        let x = m.tensor().data().to_vec();
        let y = dense(s.get("transmission.conv.weight").unwrap(), s.get("transmission.conv.bias").unwrap(), &x, true);
        let h: Vec<f64> = dense(s.get("transmission.down.weight").unwrap(), s.get("transmission.down.bias").unwrap(), &y, false)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let out = dense(s.get("transmission.up.weight").unwrap(), s.get("transmission.up.bias").unwrap(), &h, true);
        for (g, e) in got.tensor().data().iter().zip(out) {
            assert!((g - sigmoid(e)).abs() < 1e-12);
        }
    }

    #[test]
    fn transmission_is_local() {
        let p = PduParams::init(16, 10).unwrap();
        let m = random_map(16, 8, 8, 11);
        let mut bumped = m.tensor().clone();
        bumped.set([0, 3, 4, 4], bumped.at([0, 3, 4, 4]) + 0.5);
        let bumped = FeatureMap::new(bumped).unwrap();
        let a = transmission_branch(&m, &p).unwrap();
        let b = transmission_branch(&bumped, &p).unwrap();
        assert_ne!(a, b);
        // Pixels outside the receptive field of two 3x3 convolutions are untouched.
        assert_eq!(a.tensor().at([0, 0, 0, 0]), b.tensor().at([0, 0, 0, 0]));
        assert!(a.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn combine_examples() {
        let m = random_map(8, 4, 4, 12);
        let ones = FeatureMap::filled(8, 4, 4, 1.0);
        let zeros = FeatureMap::filled(8, 4, 4, 0.0);
        let a = random_map(8, 4, 4, 13);
        assert_eq!(pdu_combine(&m, &ones, &a).unwrap(), m);
        assert_eq!(pdu_combine(&m, &zeros, &a).unwrap(), a);
        let j = pdu_combine(&FeatureMap::filled(1, 8, 8, 0.8), &FeatureMap::filled(1, 8, 8, 0.5), &FeatureMap::filled(1, 8, 8, 0.2))
            .unwrap();
        assert!(j.tensor().data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(pdu_combine(&m, &FeatureMap::filled(8, 4, 5, 1.0), &a).is_err());
    }

    #[test]
    fn block_preserves_shape() {
        for attention in [AttentionKind::Pdu, AttentionKind::PixelAttention] {
            let p = BlockParams::init(16, attention, 14).unwrap();
            for side in [8, 17, 32] {
                let m = random_map(16, side, side, 15);
                let out = fa_block_forward(&m, &p).unwrap();
                assert_eq!(out.tensor().shape(), m.tensor().shape());
                assert!(out.tensor().all_finite());
            }
        }
    }

    #[test]
    fn block_with_zeroed_final_convs_is_finite() {
        let mut p = BlockParams::init(16, AttentionKind::Pdu, 16).unwrap();
        for name in ["ca.up.weight", "ca.up.bias", "pdu.transmission.up.weight", "pdu.airlight.up.weight"] {
            p.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let m = random_map(16, 8, 8, 17);
        let out = fa_block_forward(&m, &p).unwrap();
        assert!(out.tensor().all_finite());
        assert_eq!(out.tensor().shape(), m.tensor().shape());
    }

    #[test]
    fn network_is_identity_at_init() {
        let net = Network::init(NetworkConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageTensor::from_fn(12, 10, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let out = network_forward(&img, &net).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn network_is_deterministic_and_shape_preserving() {
        let cfg = NetworkConfig { groups: 2, blocks_per_group: 1, ..NetworkConfig::default() };
        let mut a = Network::init(cfg.clone(), 5).unwrap();
        let b = Network::init(cfg, 5).unwrap();
        assert_eq!(a, b);
        // Give the reconstruction layer weight so the output depends on everything.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in a.params_mut().get_mut("recon.weight").unwrap().data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let img = ImageTensor::from_fn(9, 13, |c, y, x| ((c + y * x) % 7) as f64 / 7.0).unwrap();
        let o1 = network_forward(&img, &a).unwrap();
        let o2 = network_forward(&img, &a).unwrap();
        assert_eq!(o1.dims(), img.dims());
        assert_eq!(o1, o2);
        assert!(o1.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn layout_round_trip_and_mismatch() {
        let net = Network::init(NetworkConfig::default(), 1).unwrap();
        assert!(Network::from_params(net.config().clone(), net.params().clone()).is_ok());
        let other = NetworkConfig { channels: 24, ..NetworkConfig::default() };
        assert!(matches!(Network::from_params(other, net.params().clone()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig { channels: 12, ..NetworkConfig::default() }.validate().is_err());
        assert!(NetworkConfig { groups: 0, ..NetworkConfig::default() }.validate().is_err());
        assert!(NetworkConfig::full_scale().validate().is_ok());
    }
}
