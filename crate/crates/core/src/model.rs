//! The full video classifier: backbone taps, spatial attention per block and
//! region, channel attention per frame, frame attention per video, and a
//! linear head over the seven emotion classes.

use serde::{Deserialize, Serialize};

use crate::attention::{self, HopAggregation};
use crate::autograd::{Graph, Var};
use crate::backbone::{self, BackboneConfig, BlockVars};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Face,
    Eyes,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Face, Region::Eyes, Region::Mouth];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Hops `h` of spatial attention.
    pub hops: usize,
    /// Hidden size `U` of spatial attention.
    pub spatial_hidden: usize,
    /// Hidden size `r` of channel attention.
    pub channel_hidden: usize,
    /// Hidden size `r̂` of frame attention.
    pub frame_hidden: usize,
    pub hop_aggregation: HopAggregation,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            hops: 2,
            spatial_hidden: 32,
            channel_hidden: 64,
            frame_hidden: 64,
            hop_aggregation: HopAggregation::Mean,
        }
    }
}

/// Switches for the ablation ladder. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Features from every residual block rather than the last one only.
    pub all_blocks: bool,
    pub spatial_attention: bool,
    /// Face, eyes and mouth; otherwise the face group alone.
    pub multi_region: bool,
    pub channel_attention: bool,
    pub frame_attention: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            all_blocks: true,
            spatial_attention: true,
            multi_region: true,
            channel_attention: true,
            frame_attention: true,
        }
    }
}

impl Components {
    /// The plain baseline: last block only, spatial mean, face group
    /// only, unweighted frame average.
    pub fn baseline() -> Self {
        Self {
            all_blocks: false,
            spatial_attention: false,
            multi_region: false,
            channel_attention: false,
            frame_attention: false,
        }
    }

    /// Cumulative ablation ladder: the baseline, then one component added
    /// per rung, ending at the full model.
    pub fn ladder() -> Vec<(&'static str, Components)> {
        let mut c = Self::baseline();
        let mut out = vec![("baseline", c)];
        c.all_blocks = true;
        out.push(("+ features from all blocks", c));
        c.spatial_attention = true;
        out.push(("+ spatial attention", c));
        c.multi_region = true;
        out.push(("+ multiple regions", c));
        c.channel_attention = true;
        out.push(("+ channel attention", c));
        c.frame_attention = true;
        out.push(("+ frame attention", c));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub components: Components,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            components: Components::default(),
            num_classes: NUM_CLASSES,
        }
    }
}

impl ModelConfig {
    /// Two-block, 8×8 model used for gradient checks and desk experiments.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let a = &self.attention;
        if a.hops == 0 || a.spatial_hidden == 0 || a.channel_hidden == 0 || a.frame_hidden == 0 {
            return Err(Error::Config(
                "attention hops and hidden sizes must be at least 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Blocks whose taps feed the region vectors.
    pub fn used_blocks(&self) -> Vec<usize> {
        let n = self.backbone.num_blocks;
        if self.components.all_blocks {
            (0..n).collect()
        } else {
            vec![n - 1]
        }
    }

    pub fn used_regions(&self) -> usize {
        if self.components.multi_region {
            3
        } else {
            1
        }
    }

    /// Length `l` of each region vector.
    pub fn feature_len(&self) -> usize {
        let depths = self.backbone.region_depths();
        let per_hop = if self.components.spatial_attention
            && self.attention.hop_aggregation == HopAggregation::Concat
        {
            self.attention.hops
        } else {
            1
        };
        self.used_blocks()
            .iter()
            .map(|&b| depths[b] * per_hop)
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He(usize),
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    Lecun(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    conv1_weight: usize,
    conv1_scale: usize,
    conv1_shift: usize,
    conv2_weight: usize,
    conv2_scale: usize,
    conv2_shift: usize,
    shortcut_weight: Option<usize>,
}

/// Positions of every parameter in the flat parameter list.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    blocks: Vec<BlockSlots>,
    spatial: Vec<Option<(usize, usize)>>,
    channel: Option<(usize, usize)>,
    frame: Option<(usize, usize)>,
    head: (usize, usize),
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut specs: Vec<ParamSpec> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let bb = &config.backbone;
        let mut blocks = Vec::with_capacity(bb.num_blocks);
        for (name, shape) in bb.param_shapes() {
            let fan_in = shape[1..].iter().product::<usize>();
            let init = if name.ends_with(".weight") {
                Init::He(fan_in)
            } else if name.ends_with(".scale") {
                Init::Ones
            } else {
                Init::Zeros
            };
            push(name, shape, init);
        }
        let mut slot = 0;
        for b in 0..bb.num_blocks {
            let shortcut = bb.has_projection(b);
            blocks.push(BlockSlots {
                conv1_weight: slot,
                conv1_scale: slot + 1,
                conv1_shift: slot + 2,
                conv2_weight: slot + 3,
                conv2_scale: slot + 4,
                conv2_shift: slot + 5,
                shortcut_weight: shortcut.then_some(slot + 6),
            });
            slot += if shortcut { 7 } else { 6 };
        }

        let a = &config.attention;
        let depths = bb.region_depths();
        let used = config.used_blocks();
        let spatial = (0..bb.num_blocks)
            .map(|b| {
                (config.components.spatial_attention && used.contains(&b)).then(|| {
                    let d = depths[b];
                    let ws1 = push(
                        format!("spatial{b}.ws1"),
                        vec![a.spatial_hidden, d],
                        Init::Lecun(d),
                    );
                    let ws2 = push(
                        format!("spatial{b}.ws2"),
                        vec![a.hops, a.spatial_hidden],
                        Init::Lecun(a.spatial_hidden),
                    );
                    (ws1, ws2)
                })
            })
            .collect();

        let l = config.feature_len();
        let channel =
            (config.components.multi_region && config.components.channel_attention).then(|| {
                let w = push(
                    "channel.w_mat".into(),
                    vec![l, a.channel_hidden],
                    Init::He(l),
                );
                let v = push(
                    "channel.w_vec".into(),
                    vec![a.channel_hidden, 1],
                    Init::Lecun(a.channel_hidden),
                );
                (w, v)
            });
        let frame = config.components.frame_attention.then(|| {
            let w = push("frame.w_mat".into(), vec![l, a.frame_hidden], Init::He(l));
            let v = push(
                "frame.w_vec".into(),
                vec![a.frame_hidden, 1],
                Init::Lecun(a.frame_hidden),
            );
            (w, v)
        });
        let head_w = push(
            "head.weight".into(),
            vec![l, config.num_classes],
            Init::Lecun(l),
        );
        let head_b = push("head.bias".into(), vec![config.num_classes], Init::Zeros);
        Ok(Self {
            blocks,
            spatial,
            channel,
            frame,
            head: (head_w, head_b),
            specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.specs.iter().map(|s| s.shape.as_slice())
    }

    fn block_vars(&self, vars: &[Var]) -> Vec<BlockVars> {
        self.blocks
            .iter()
            .map(|s| BlockVars {
                conv1_weight: vars[s.conv1_weight],
                conv1_scale: vars[s.conv1_scale],
                conv1_shift: vars[s.conv1_shift],
                conv2_weight: vars[s.conv2_weight],
                conv2_scale: vars[s.conv2_scale],
                conv2_shift: vars[s.conv2_shift],
                shortcut_weight: s.shortcut_weight.map(|i| vars[i]),
            })
            .collect()
    }
}

/// All learnable tensors, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded He / LeCun normal initialisation; scales one, shifts and
    /// biases zero.
    pub fn init(layout: &ParamLayout, rng: &mut Rng) -> Self {
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::He(fan_in) => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.normal() * std).collect()
                    }
                    Init::Lecun(fan_in) => {
                        let std = (1.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.normal() * std).collect()
                    }
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            })
            .collect();
        Self {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Builds from named tensors, checking them against `layout`.
    pub fn from_named(layout: &ParamLayout, named: Vec<(String, Tensor)>) -> Result<Self> {
        if named.len() != layout.specs.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), spec) in named.into_iter().zip(&layout.specs) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter '{name}' {:?} does not match expected '{}' {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Graph outputs of one video forward pass.
#[derive(Clone, Debug)]
pub struct VideoForward {
    /// `1 × num_classes`.
    pub logits: Var,
    /// Mean spatial penalty over every (block, region, frame) instance.
    pub penalty: Option<Var>,
    /// Channel-attention gates per frame (face, eyes, mouth), input order.
    pub region_gates: Vec<Option<[Var; 3]>>,
    /// Frame-attention gates, input order.
    pub frame_gates: Vec<Var>,
}

struct FrameFeatures {
    feature: Var,
    penalties: Vec<Var>,
    gates: Option<[Var; 3]>,
}

fn frame_features(
    g: &mut Graph,
    config: &ModelConfig,
    layout: &ParamLayout,
    vars: &[Var],
    blocks: &[BlockVars],
    frame: &Tensor,
) -> Result<FrameFeatures> {
    let x = g.constant(frame.clone());
    let taps = backbone::forward_frame(g, x, blocks, &config.backbone)?;
    let regions = config.used_regions();
    let mut penalties = Vec::new();
    let mut per_region: Vec<Vec<Var>> = vec![Vec::new(); regions];
    for b in config.used_blocks() {
        let tap = &taps[b];
        for (r, parts) in per_region.iter_mut().enumerate() {
            let v = match layout.spatial[b] {
                Some((ws1, ws2)) => {
                    let out = attention::spatial_attention(
                        g,
                        tap.regions[r],
                        vars[ws1],
                        vars[ws2],
                        config.attention.hop_aggregation,
                    )?;
                    penalties.push(out.penalty);
                    out.vector
                }
                None => attention::spatial_mean(g, tap.regions[r])?,
            };
            parts.push(v);
        }
    }
    let mut vectors = Vec::with_capacity(regions);
    for parts in &per_region {
        vectors.push(g.concat(parts)?);
    }
    if regions == 1 {
        return Ok(FrameFeatures {
            feature: vectors[0],
            penalties,
            gates: None,
        });
    }
    let fused = [vectors[0], vectors[1], vectors[2]];
    match layout.channel {
        Some((w, v)) => {
            let out = attention::channel_attention(g, fused, vars[w], vars[v])?;
            Ok(FrameFeatures {
                feature: out.output,
                penalties,
                gates: Some([out.gates[0], out.gates[1], out.gates[2]]),
            })
        }
        None => Ok(FrameFeatures {
            feature: attention::plain_mean(g, &fused)?,
            penalties,
            gates: None,
        }),
    }
}

/// Frame indices in canonical order. Reductions over frames follow this
/// order so that the result does not depend on how frames were listed.
pub fn canonical_frame_order(frames: &[Tensor]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| frames[a].total_cmp(&frames[b]));
    order
}

fn sum_scalars(g: &mut Graph, items: &[Var]) -> Result<Var> {
    let row = g.concat(items)?;
    Ok(g.sum(row))
}

/// Builds the forward graph for one video. `dropout` is `(p, rng)` in
/// training mode and `None` for inference.
pub fn forward_video(
    g: &mut Graph,
    config: &ModelConfig,
    layout: &ParamLayout,
    vars: &[Var],
    frames: &[Tensor],
    dropout: Option<(f64, &mut Rng)>,
) -> Result<VideoForward> {
    if frames.is_empty() {
        return Err(Error::Input("video has no frames".into()));
    }
    let blocks = layout.block_vars(vars);
    let per_frame = frames
        .iter()
        .map(|f| frame_features(g, config, layout, vars, &blocks, f))
        .collect::<Result<Vec<_>>>()?;
    let order = canonical_frame_order(frames);
    let ordered: Vec<Var> = order.iter().map(|&i| per_frame[i].feature).collect();

    let mut frame_gates = Vec::new();
    let video = match layout.frame {
        Some((w, v)) => {
            let out = attention::frame_attention(g, &ordered, vars[w], vars[v])?;
            let mut gates = vec![out.gates[0]; frames.len()];
            for (k, &i) in order.iter().enumerate() {
                gates[i] = out.gates[k];
            }
            frame_gates = gates;
            out.output
        }
        None => attention::plain_mean(g, &ordered)?,
    };

    let hidden = match dropout {
        Some((p, rng)) => g.dropout(video, p, rng, true)?,
        None => video,
    };
    let (hw, hb) = layout.head;
    let z = g.matmul(hidden, vars[hw])?;
    let logits = g.add_row(z, vars[hb])?;

    let penalty = if per_frame[0].penalties.is_empty() {
        None
    } else {
        let mut totals = Vec::with_capacity(frames.len());
        for &i in &order {
            totals.push(sum_scalars(g, &per_frame[i].penalties)?);
        }
        let count = per_frame[0].penalties.len() * frames.len();
        let total = sum_scalars(g, &totals)?;
        Some(g.scale(total, 1.0 / count as f64))
    };

    Ok(VideoForward {
        logits,
        penalty,
        region_gates: per_frame.iter().map(|f| f.gates).collect(),
        frame_gates,
    })
}

/// Inference-mode output for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub penalty: f64,
    /// Channel-attention gates (face, eyes, mouth) per frame.
    pub region_weights: Vec<[f64; 3]>,
    /// Frame-attention gates per frame.
    pub frame_weights: Vec<f64>,
}

impl Classification {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Maximum softmax probability.
    pub fn confidence(&self) -> f64 {
        self.probabilities().into_iter().fold(0.0, f64::max)
    }
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        let params = ModelParams::init(&layout, &mut Rng::new(seed));
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn with_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let layout = ParamLayout::new(&config)?;
        let named = params
            .names
            .into_iter()
            .zip(params.tensors)
            .collect::<Vec<_>>();
        let params = ModelParams::from_named(&layout, named)?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Inference-mode forward pass (no dropout, no augmentation).
    pub fn classify_video(&self, frames: &[Tensor]) -> Result<Classification> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let out = forward_video(&mut g, &self.config, &self.layout, &vars, frames, None)?;
        let scalar = |g: &Graph, v: Var| g.value(v).data()[0];
        Ok(Classification {
            logits: g.value(out.logits).data().to_vec(),
            penalty: out.penalty.map_or(0.0, |p| scalar(&g, p)),
            region_weights: out
                .region_gates
                .iter()
                .map(|r| r.map_or([0.0; 3], |a| a.map(|v| scalar(&g, v))))
                .collect(),
            frame_weights: out.frame_gates.iter().map(|&v| scalar(&g, v)).collect(),
        })
    }
}
