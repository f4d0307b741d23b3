//! Standalone layer construction and single-layer forward passes.

use std::ops::Range;

use super::model::{forward_op, Layer, LayerKind, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_partition(layer: &str, ranges: &[Range<usize>], total: usize) -> Result<()> {
    let mut next = 0;
    for r in ranges {
        if r.start != next || r.end <= r.start {
            return Err(Error::Groups {
                layer: layer.into(),
                detail: format!("ranges {ranges:?} are not contiguous, ordered and non-empty"),
            });
        }
        next = r.end;
    }
    if next != total {
        return Err(Error::Groups {
            layer: layer.into(),
            detail: format!("ranges {ranges:?} cover {next} of {total} channels"),
        });
    }
    Ok(())
}

impl LayerParams {
    /// Shared dense layer from a `[out, in]` weight.
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, inp] = *weight.shape() else {
            return Err(Error::Tensor(format!("dense weight must be [out, in], got {:?}", weight.shape())));
        };
        Self::grouped(LayerKind::Dense, 1, inp, out, vec![0..inp], vec![0..out], weight, bias, false)
    }

    /// Shared convolution from an `[out, in, k, k]` weight.
    pub fn conv(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, inp, k, k2] = *weight.shape() else {
            return Err(Error::Tensor(format!("conv weight must be [out, in, k, k], got {:?}", weight.shape())));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::Tensor(format!("conv kernel must be square and odd, got {k}x{k2}")));
        }
        Self::grouped(LayerKind::Conv, k, inp, out, vec![0..inp], vec![0..out], weight, bias, false)
    }

    /// Group convolution. `weight` holds the group blocks back to back.
    pub fn group_conv(
        kernel: usize,
        in_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        weight: Vec<f64>,
        bias: Tensor,
    ) -> Result<Self> {
        let inp = in_groups.last().map_or(0, |r| r.end);
        let out = out_groups.last().map_or(0, |r| r.end);
        Self::grouped(
            LayerKind::GroupConv,
            kernel,
            inp,
            out,
            in_groups,
            out_groups,
            Tensor::from_vec(weight),
            bias,
            true,
        )
    }

    /// Grouped dense layer. `weight` holds the group blocks back to back.
    pub fn grouped_dense(
        in_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        weight: Vec<f64>,
        bias: Tensor,
    ) -> Result<Self> {
        let inp = in_groups.last().map_or(0, |r| r.end);
        let out = out_groups.last().map_or(0, |r| r.end);
        Self::grouped(
            LayerKind::GroupedDense,
            1,
            inp,
            out,
            in_groups,
            out_groups,
            Tensor::from_vec(weight),
            bias,
            true,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn grouped(
        kind: LayerKind,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        in_groups: Vec<Range<usize>>,
        out_groups: Vec<Range<usize>>,
        weight: Tensor,
        bias: Tensor,
        decoupled: bool,
    ) -> Result<Self> {
        let name = kind.as_str();
        // Input ranges either partition the inputs or all span them.
        if !in_groups.iter().all(|r| *r == (0..in_channels)) || in_groups.is_empty() {
            check_partition(name, &in_groups, in_channels)?;
        }
        check_partition(name, &out_groups, out_channels)?;
        if in_groups.len() != out_groups.len() {
            return Err(Error::Groups {
                layer: name.into(),
                detail: format!("{} input groups vs {} output groups", in_groups.len(), out_groups.len()),
            });
        }
        let kk = kernel * kernel;
        let expected: usize = in_groups.iter().zip(&out_groups).map(|(i, o)| i.len() * o.len() * kk).sum();
        if weight.len() != expected {
            return Err(Error::Shape {
                layer: name.into(),
                expected: vec![expected],
                actual: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [out_channels] {
            return Err(Error::Shape {
                layer: name.into(),
                expected: vec![out_channels],
                actual: bias.shape().to_vec(),
            });
        }
        let mut p = LayerParams {
            layer_index: 0,
            weighted_index: Some(0),
            kind,
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
            in_groups,
            out_groups,
            norm_groups: Vec::new(),
            decoupled,
            running: None,
        };
        let shape = p.weight_shape();
        p.weight = p.weight.clone().reshape(shape)?;
        Ok(p)
    }

    /// Group norm over `channels` split evenly into `groups` normalization
    /// groups, scale 1 and shift 0.
    pub fn group_norm(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Groups {
                layer: "group_norm".into(),
                detail: format!("{channels} channels not divisible into {groups} groups"),
            });
        }
        let size = channels / groups;
        let ranges = (0..groups).map(|g| g * size..(g + 1) * size).collect();
        Self::group_norm_with(ranges, Tensor::filled(&[channels], 1.0), Tensor::zeros(&[channels]))
    }

    pub fn group_norm_with(norm_groups: Vec<Range<usize>>, scale: Tensor, shift: Tensor) -> Result<Self> {
        let channels = scale.len();
        check_partition("group_norm", &norm_groups, channels)?;
        if shift.len() != channels {
            return Err(Error::Shape {
                layer: "group_norm".into(),
                expected: vec![channels],
                actual: shift.shape().to_vec(),
            });
        }
        Ok(LayerParams {
            layer_index: 0,
            weighted_index: None,
            kind: LayerKind::GroupNorm,
            weight: scale,
            bias: shift,
            kernel: 1,
            in_channels: channels,
            out_channels: channels,
            in_groups: vec![0..channels],
            out_groups: vec![0..channels],
            norm_groups,
            decoupled: false,
            running: None,
        })
    }
}

fn run_single(params: &LayerParams, input: &Tensor) -> Result<Tensor> {
    let layer = Layer::Param(params.clone());
    Ok(forward_op(params.layer_index, &layer, input, Mode::Eval)?.0)
}

/// Grouped (or shared) convolution of a `[B, C, H, W]` input.
pub fn group_conv_forward(params: &LayerParams, input: &Tensor) -> Result<Tensor> {
    if !params.kind.is_conv() {
        return Err(Error::Tensor(format!("expected a conv layer, got {}", params.kind.as_str())));
    }
    if input.rank() != 4 || input.shape()[1] != params.in_channels {
        return Err(Error::Groups {
            layer: params.kind.as_str().into(),
            detail: format!(
                "input {:?} does not carry the {} channels the groups {:?} expect",
                input.shape(),
                params.in_channels,
                params.in_groups
            ),
        });
    }
    run_single(params, input)
}

/// Group normalization of a `[B, C, ...]` input.
pub fn group_norm_forward(params: &LayerParams, input: &Tensor) -> Result<Tensor> {
    if params.kind != LayerKind::GroupNorm {
        return Err(Error::Tensor(format!("expected group_norm, got {}", params.kind.as_str())));
    }
    if input.rank() < 2 || input.shape()[1] != params.out_channels {
        return Err(Error::Groups {
            layer: "group_norm".into(),
            detail: format!("input {:?} does not have {} channels", input.shape(), params.out_channels),
        });
    }
    run_single(params, input)
}

/// Dense (or grouped dense) layer on a `[B, F]` input.
pub fn dense_forward(params: &LayerParams, input: &Tensor) -> Result<Tensor> {
    if !matches!(params.kind, LayerKind::Dense | LayerKind::GroupedDense) {
        return Err(Error::Tensor(format!("expected a dense layer, got {}", params.kind.as_str())));
    }
    run_single(params, input)
}
