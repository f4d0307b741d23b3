//! Architecture descriptions and the grouped structural adaptation.
//!
//! A [`ModelSpec`] lists hidden layers; the logit layer (`class_count`
//! outputs) is always appended implicitly. After [`adapt`], weighted layers
//! from index `shared_depth` onward are split into `num_groups` structural
//! groups, and the logit layer routes each class only to its group.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    None,
    /// Group normalization with `groups` normalization groups. Inside the
    /// decoupled region the structural groups are used instead.
    Group { groups: usize },
    /// Per-channel batch normalization; batch statistics while training,
    /// running statistics at evaluation.
    Batch,
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::None
    }
}

fn default_conv_norm() -> NormKind {
    NormKind::Group { groups: 4 }
}

fn default_true() -> bool {
    true
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    /// Stride-1 convolution with zero padding preserving spatial size.
    Conv {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_conv_norm")]
        norm: NormKind,
        #[serde(default = "default_true")]
        relu: bool,
    },
    Dense {
        units: usize,
        #[serde(default)]
        norm: NormKind,
        #[serde(default = "default_true")]
        relu: bool,
    },
    /// 2×2 max pooling, stride 2. Acts on space only, so it is group-agnostic.
    MaxPool,
}

impl LayerDesc {
    pub fn is_weighted(&self) -> bool {
        !matches!(self, LayerDesc::MaxPool)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]` for image inputs or `[features]`.
    pub input_shape: Vec<usize>,
    /// Hidden layers. The logit layer is appended implicitly.
    pub layers: Vec<LayerDesc>,
    pub class_count: usize,
    /// Number of leading weighted layers (logit layer included in the count)
    /// kept densely connected. `None` means the model spec has not been adapted.
    #[serde(default)]
    pub shared_depth: Option<usize>,
    #[serde(default = "one")]
    pub num_groups: usize,
}

fn one() -> usize {
    1
}

/// Splits `n` items into `g` contiguous ranges of `n / g`, remainder to the last.
pub fn split_channels(n: usize, g: usize) -> Vec<Range<usize>> {
    let base = n / g;
    (0..g)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == g { n } else { start + base };
            start..end
        })
        .collect()
}

/// Contiguous class chunks: the first `c % g` groups receive one extra class.
pub fn class_ranges(c: usize, g: usize) -> Vec<Range<usize>> {
    let base = c / g;
    let extra = c % g;
    let mut out = Vec::with_capacity(g);
    let mut start = 0;
    for i in 0..g {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Server-issued class→group map plus per-client group presence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    class_to_group: Vec<usize>,
    num_groups: usize,
    /// `presence[client][group]`; empty until [`GroupAssignment::with_presence`].
    presence: Vec<Vec<bool>>,
}

impl GroupAssignment {
    pub fn class_count(&self) -> usize {
        self.class_to_group.len()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.class_to_group[class]
    }

    pub fn class_to_group(&self) -> &[usize] {
        &self.class_to_group
    }

    /// Logits(g): the classes routed to group `g`.
    pub fn classes_of(&self, group: usize) -> Vec<usize> {
        (0..self.class_to_group.len())
            .filter(|&c| self.class_to_group[c] == group)
            .collect()
    }

    /// Records which groups each client holds data for: group `g` is present
    /// on a client when the client has at least one class of Logits(g).
    pub fn with_presence(mut self, client_classes: &[Vec<usize>]) -> Result<Self> {
        let mut presence = Vec::with_capacity(client_classes.len());
        for (n, classes) in client_classes.iter().enumerate() {
            let mut mask = vec![false; self.num_groups];
            for &c in classes {
                if c >= self.class_to_group.len() {
                    return Err(Error::GroupMap(format!(
                        "client {n} reports class {c} outside [0, {})",
                        self.class_to_group.len()
                    )));
                }
                mask[self.class_to_group[c]] = true;
            }
            presence.push(mask);
        }
        self.presence = presence;
        Ok(self)
    }

    /// Marks every group present on `clients` clients.
    pub fn with_full_presence(mut self, clients: usize) -> Self {
        self.presence = vec![vec![true; self.num_groups]; clients];
        self
    }

    pub fn with_presence_masks(mut self, masks: Vec<Vec<bool>>) -> Result<Self> {
        if masks.iter().any(|m| m.len() != self.num_groups) {
            return Err(Error::GroupMap(format!(
                "presence masks must have {} entries",
                self.num_groups
            )));
        }
        self.presence = masks;
        Ok(self)
    }

    pub fn presence(&self) -> &[Vec<bool>] {
        &self.presence
    }

    pub fn is_present(&self, client: usize, group: usize) -> bool {
        self.presence
            .get(client)
            .map(|m| m[group])
            .unwrap_or(false)
    }
}

/// Contiguous-chunk class→group mapping.
pub fn assign_classes(class_count: usize, num_groups: usize) -> Result<GroupAssignment> {
    if num_groups == 0 || num_groups > class_count {
        return Err(Error::Spec(format!(
            "need 1 <= G <= C, got G={num_groups}, C={class_count}"
        )));
    }
    let mut class_to_group = vec![0; class_count];
    for (g, r) in class_ranges(class_count, num_groups).into_iter().enumerate() {
        for c in r {
            class_to_group[c] = g;
        }
    }
    Ok(GroupAssignment {
        class_to_group,
        num_groups,
        presence: Vec::new(),
    })
}

/// One primitive op of the instantiated network, with resolved shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpPlan {
    Conv {
        weighted_index: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        decoupled: bool,
    },
    Dense {
        weighted_index: usize,
        in_features: usize,
        out_features: usize,
        in_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        decoupled: bool,
    },
    GroupNorm {
        channels: usize,
        norm_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        decoupled: bool,
    },
    BatchNorm {
        channels: usize,
        out_groups: Vec<Range<usize>>,
        decoupled: bool,
    },
    Relu,
    MaxPool,
    Flatten,
}

impl ModelSpec {
    /// An unadapted spec: every layer densely connected, standard logit layer.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerDesc>, class_count: usize) -> Self {
        Self {
            input_shape,
            layers,
            class_count,
            shared_depth: None,
            num_groups: 1,
        }
    }

    /// Weighted layers including the implicit logit layer.
    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count() + 1
    }

    /// Effective shared depth: all weighted layers when unadapted.
    pub fn effective_shared_depth(&self) -> usize {
        self.shared_depth
            .unwrap_or_else(|| self.weighted_layer_count())
    }

    pub fn is_adapted(&self) -> bool {
        self.shared_depth.is_some()
    }

    /// Adapted with nothing decoupled; the logit layer stays dense.
    pub fn is_degenerate(&self) -> bool {
        self.shared_depth == Some(self.weighted_layer_count())
    }

    pub fn logits_decoupled(&self) -> bool {
        self.effective_shared_depth() < self.weighted_layer_count()
    }

    pub fn is_decoupled(&self, weighted_index: usize) -> bool {
        weighted_index >= self.effective_shared_depth()
    }

    /// Class→group map implied by the model spec (`G = 1` when not decoupled).
    pub fn assignment(&self) -> Result<GroupAssignment> {
        let g = if self.logits_decoupled() { self.num_groups } else { 1 };
        assign_classes(self.class_count, g)
    }

    /// Number of hidden weighted layers, i.e. layers that have neurons to analyse.
    pub fn hidden_weighted_count(&self) -> usize {
        self.weighted_layer_count() - 1
    }

    /// Resolves the model spec into primitive ops, validating shapes and groups.
    pub fn plan(&self) -> Result<Vec<OpPlan>> {
        if self.class_count < 1 {
            return Err(Error::Spec("class_count must be positive".into()));
        }
        if self.num_groups == 0 {
            return Err(Error::Spec("num_groups must be positive".into()));
        }
        let total = self.weighted_layer_count();
        let shared = self.effective_shared_depth();
        if shared > total {
            return Err(Error::Spec(format!(
                "shared_depth {shared} exceeds {total} weighted layers"
            )));
        }
        let g = self.num_groups;

        // Activation geometry: (channels, spatial dims) or flat features.
        let mut chans;
        let mut hw: Option<(usize, usize)>;
        match self.input_shape.as_slice() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => {
                chans = *c;
                hw = Some((*h, *w));
            }
            [f] if *f > 0 => {
                chans = *f;
                hw = None;
            }
            other => {
                return Err(Error::Spec(format!(
                    "input_shape must be [C, H, W] or [F] with positive entries, got {other:?}"
                )))
            }
        }
        // Structural groups of the current activation, if it lies in the decoupled region.
        let mut act_groups: Option<Vec<Range<usize>>> = None;
        let mut ops = Vec::new();
        let mut widx = 0;

        let descs = self.layers.iter().copied().chain(std::iter::once(LayerDesc::Dense {
            units: self.class_count,
            norm: NormKind::None,
            relu: false,
        }));
        for (pos, desc) in descs.enumerate() {
            let is_logit = pos == self.layers.len();
            match desc {
                LayerDesc::MaxPool => {
                    let Some((h, w)) = hw else {
                        return Err(Error::Spec(format!("layer {pos}: max-pool on flat features")));
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::Spec(format!(
                            "layer {pos}: max-pool needs spatial size >= 2, got {h}x{w}"
                        )));
                    }
                    hw = Some((h / 2, w / 2));
                    ops.push(OpPlan::MaxPool);
                }
                LayerDesc::Conv {
                    channels,
                    kernel,
                    norm,
                    relu,
                } => {
                    if hw.is_none() {
                        return Err(Error::Spec(format!("layer {pos}: conv after flat features")));
                    }
                    if channels == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Spec(format!(
                            "layer {pos}: conv needs positive channels and an odd kernel"
                        )));
                    }
                    let decoupled = widx >= shared;
                    let (in_groups, out_groups) = if decoupled {
                        // The first decoupled layer reads every shared channel in each group.
                        let ig = match &act_groups {
                            Some(gs) => gs.clone(),
                            None => vec![0..chans; g],
                        };
                        if channels < g {
                            return Err(Error::Spec(format!(
                                "layer {pos}: {channels} channels cannot host {g} groups"
                            )));
                        }
                        (ig, split_channels(channels, g))
                    } else {
                        (vec![0..chans], vec![0..channels])
                    };
                    ops.push(OpPlan::Conv {
                        weighted_index: widx,
                        in_channels: chans,
                        out_channels: channels,
                        kernel,
                        in_groups,
                        out_groups: out_groups.clone(),
                        decoupled,
                    });
                    self.push_norm(&mut ops, pos, norm, channels, &out_groups, decoupled)?;
                    if relu {
                        ops.push(OpPlan::Relu);
                    }
                    chans = channels;
                    act_groups = decoupled.then_some(out_groups);
                    widx += 1;
                }
                LayerDesc::Dense { units, norm, relu } => {
                    if units == 0 {
                        return Err(Error::Spec(format!("layer {pos}: dense needs positive units")));
                    }
                    let mut spatial = 1;
                    if let Some((h, w)) = hw.take() {
                        spatial = h * w;
                        ops.push(OpPlan::Flatten);
                    }
                    let in_features = chans * spatial;
                    let decoupled = widx >= shared;
                    let (in_groups, out_groups) = if decoupled {
                        let channel_groups = match &act_groups {
                            Some(gs) => gs.clone(),
                            None => vec![0..chans; g],
                        };
                        let ig = channel_groups
                            .iter()
                            .map(|r| r.start * spatial..r.end * spatial)
                            .collect();
                        let og = if is_logit {
                            if units < g {
                                return Err(Error::Spec(format!(
                                    "{g} groups exceed {units} classes"
                                )));
                            }
                            class_ranges(units, g)
                        } else {
                            if units < g {
                                return Err(Error::Spec(format!(
                                    "layer {pos}: {units} units cannot host {g} groups"
                                )));
                            }
                            split_channels(units, g)
                        };
                        (ig, og)
                    } else {
                        (vec![0..in_features], vec![0..units])
                    };
                    ops.push(OpPlan::Dense {
                        weighted_index: widx,
                        in_features,
                        out_features: units,
                        in_groups,
                        out_groups: out_groups.clone(),
                        decoupled,
                    });
                    self.push_norm(&mut ops, pos, norm, units, &out_groups, decoupled)?;
                    if relu {
                        ops.push(OpPlan::Relu);
                    }
                    chans = units;
                    act_groups = decoupled.then_some(out_groups);
                    widx += 1;
                }
            }
        }
        Ok(ops)
    }

    fn push_norm(
        &self,
        ops: &mut Vec<OpPlan>,
        pos: usize,
        norm: NormKind,
        channels: usize,
        out_groups: &[Range<usize>],
        decoupled: bool,
    ) -> Result<()> {
        match norm {
            NormKind::None => {}
            NormKind::Group { groups } => {
                let norm_groups = if decoupled {
                    out_groups.to_vec()
                } else {
                    if groups == 0 || channels % groups != 0 {
                        return Err(Error::Spec(format!(
                            "layer {pos}: {channels} channels not divisible into {groups} norm groups"
                        )));
                    }
                    split_channels(channels, groups)
                };
                ops.push(OpPlan::GroupNorm {
                    channels,
                    norm_groups,
                    out_groups: out_groups.to_vec(),
                    decoupled,
                });
            }
            NormKind::Batch => ops.push(OpPlan::BatchNorm {
                channels,
                out_groups: out_groups.to_vec(),
                decoupled,
            }),
        }
        Ok(())
    }

    /// Structural group ranges of weighted layer `weighted_index`, or `None`
    /// when the layer is shared.
    pub fn layer_groups(&self, weighted_index: usize) -> Result<Option<Vec<Range<usize>>>> {
        for op in self.plan()? {
            match op {
                OpPlan::Conv {
                    weighted_index: w,
                    out_groups,
                    decoupled,
                    ..
                }
                | OpPlan::Dense {
                    weighted_index: w,
                    out_groups,
                    decoupled,
                    ..
                } if w == weighted_index => return Ok(decoupled.then_some(out_groups)),
                _ => {}
            }
        }
        Err(Error::Spec(format!("no weighted layer {weighted_index}")))
    }

    /// Closed-form trainable parameter count (running BN statistics excluded).
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .plan()?
            .iter()
            .map(|op| match op {
                OpPlan::Conv {
                    kernel,
                    in_groups,
                    out_groups,
                    out_channels,
                    ..
                } => {
                    in_groups
                        .iter()
                        .zip(out_groups)
                        .map(|(i, o)| i.len() * o.len() * kernel * kernel)
                        .sum::<usize>()
                        + out_channels
                }
                OpPlan::Dense {
                    in_groups,
                    out_groups,
                    out_features,
                    ..
                } => {
                    in_groups
                        .iter()
                        .zip(out_groups)
                        .map(|(i, o)| i.len() * o.len())
                        .sum::<usize>()
                        + out_features
                }
                OpPlan::GroupNorm { channels, .. } | OpPlan::BatchNorm { channels, .. } => {
                    2 * channels
                }
                _ => 0,
            })
            .sum())
    }

    /// Output channel / unit count of every hidden weighted layer.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerDesc::Conv { channels, .. } => Some(*channels),
                LayerDesc::Dense { units, .. } => Some(*units),
                LayerDesc::MaxPool => None,
            })
            .collect()
    }
}

/// Grouped structural adaptation: weighted layers `[shared_depth, L)` are
/// split into `num_groups` groups and the logit layer is decoupled.
pub fn adapt(base: &ModelSpec, shared_depth: usize, num_groups: usize) -> Result<ModelSpec> {
    let total = base.weighted_layer_count();
    if shared_depth > total {
        return Err(Error::Spec(format!(
            "shared_depth {shared_depth} exceeds {total} weighted layers"
        )));
    }
    if num_groups == 0 {
        return Err(Error::Spec("num_groups must be positive".into()));
    }
    if shared_depth < total && num_groups > base.class_count {
        return Err(Error::Spec(format!(
            "{num_groups} groups exceed {} classes",
            base.class_count
        )));
    }
    let adapted = ModelSpec {
        shared_depth: Some(shared_depth),
        num_groups,
        ..base.clone()
    };
    // plan() checks every decoupled layer can host the groups.
    adapted.plan()?;
    Ok(adapted)
}

/// Shared depth keeping four weighted layers shared when the network allows,
/// always leaving at least the logit layer decoupled.
pub fn default_shared_depth(spec: &ModelSpec) -> usize {
    4.min(spec.weighted_layer_count().saturating_sub(1))
}
