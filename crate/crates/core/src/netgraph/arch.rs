use serde::{Deserialize, Serialize};

use super::GraphError;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const DEFAULT_DNCNN_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        has_bias: bool,
    },
    ReLU,
    BatchNorm {
        channels: usize,
        eps: f32,
        momentum: f32,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, has_bias: bool) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            has_bias,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Role of a parameter tensor inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are tracked, not learned.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: usize,
    pub kind: ParamKind,
}

/// Declarative network description shared by every model that may be
/// interpolated with another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch_id: String,
    pub layers: Vec<LayerSpec>,
    /// Network predicts the residual; output = input - prediction.
    pub residual_output: bool,
}

impl ArchSpec {
    /// Three-layer analysis net: conv9 -> ReLU -> conv5 -> ReLU -> conv9,
    /// widths 64/32, single-channel in and out.
    pub fn srcnn3() -> Self {
        Self {
            arch_id: "srcnn3".into(),
            layers: vec![
                LayerSpec::conv(1, 64, 9, true),
                LayerSpec::ReLU,
                LayerSpec::conv(64, 32, 5, true),
                LayerSpec::ReLU,
                LayerSpec::conv(32, 1, 9, true),
            ],
            residual_output: false,
        }
    }

    /// DnCNN-style residual denoiser with `depth` 3x3 convolutions.
    ///
    /// The middle convolutions drop their bias when followed by batch norm.
    pub fn dncnn(depth: usize, width: usize, with_bn: bool) -> Result<Self, GraphError> {
        if depth < 2 {
            return Err(GraphError::InvalidArch(format!(
                "dncnn needs depth >= 2, got {depth}"
            )));
        }
        if width == 0 {
            return Err(GraphError::InvalidArch("dncnn width must be positive".into()));
        }
        let mut layers = vec![LayerSpec::conv(1, width, 3, true), LayerSpec::ReLU];
        for _ in 0..depth - 2 {
            layers.push(LayerSpec::conv(width, width, 3, !with_bn));
            if with_bn {
                layers.push(LayerSpec::batch_norm(width));
            }
            layers.push(LayerSpec::ReLU);
        }
        layers.push(LayerSpec::conv(width, 1, 3, true));
        let mut arch_id = format!("dncnn{depth}");
        if with_bn {
            arch_id.push_str("-bn");
        }
        if width != DEFAULT_DNCNN_WIDTH {
            arch_id.push_str(&format!("-w{width}"));
        }
        Ok(Self {
            arch_id,
            layers,
            residual_output: true,
        })
    }

    /// Resolves a canonical id: `srcnn3`, or `dncnn{D}[-bn][-w{W}]`.
    pub fn from_id(id: &str) -> Result<Self, GraphError> {
        if id == "srcnn3" {
            return Ok(Self::srcnn3());
        }
        let bad = || GraphError::UnknownArch(id.to_string());
        let rest = id.strip_prefix("dncnn").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let depth: usize = parts.next().and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        let mut with_bn = false;
        let mut width = DEFAULT_DNCNN_WIDTH;
        for part in parts {
            if part == "bn" {
                with_bn = true;
            } else if let Some(w) = part.strip_prefix('w') {
                width = w.parse().map_err(|_| bad())?;
            } else {
                return Err(bad());
            }
        }
        Self::dncnn(depth, width, with_bn)
    }

    pub fn in_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Conv { in_ch, .. } => Some(*in_ch),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { out_ch, .. } => Some(*out_ch),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Checks that channel counts chain and kernels are odd.
    pub fn validate(&self) -> Result<(), GraphError> {
        let invalid = |msg: String| Err(GraphError::InvalidArch(msg));
        if self.layers.is_empty() {
            return invalid("no layers".into());
        }
        let mut channels: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    if in_ch == 0 || out_ch == 0 {
                        return invalid(format!("layer {i}: zero channels"));
                    }
                    if kernel % 2 == 0 {
                        return invalid(format!("layer {i}: kernel {kernel} is not odd"));
                    }
                    if let Some(c) = channels {
                        if c != in_ch {
                            return invalid(format!(
                                "layer {i}: expects {in_ch} input channels, previous layer gives {c}"
                            ));
                        }
                    }
                    channels = Some(out_ch);
                }
                LayerSpec::BatchNorm { channels: bc, eps, .. } => {
                    match channels {
                        Some(c) if c == bc => {}
                        _ => {
                            return invalid(format!(
                                "layer {i}: batch norm over {bc} channels does not match its input"
                            ))
                        }
                    }
                    if eps.is_nan() || eps <= 0.0 {
                        return invalid(format!("layer {i}: eps must be positive"));
                    }
                }
                LayerSpec::ReLU => {
                    if channels.is_none() {
                        return invalid(format!("layer {i}: activation before any convolution"));
                    }
                }
            }
        }
        if self.residual_output && self.in_channels() != self.out_channels() {
            return invalid("residual output needs equal input and output channels".into());
        }
        Ok(())
    }

    /// Parameter names, shapes and roles in canonical order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    has_bias,
                } => {
                    out.push(ParamInfo {
                        name: format!("conv{i}.weight"),
                        shape: vec![out_ch, in_ch, kernel, kernel],
                        layer: i,
                        kind: ParamKind::ConvWeight,
                    });
                    if has_bias {
                        out.push(ParamInfo {
                            name: format!("conv{i}.bias"),
                            shape: vec![out_ch],
                            layer: i,
                            kind: ParamKind::ConvBias,
                        });
                    }
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    for (suffix, kind) in [
                        ("gamma", ParamKind::BnGamma),
                        ("beta", ParamKind::BnBeta),
                        ("running_mean", ParamKind::BnRunningMean),
                        ("running_var", ParamKind::BnRunningVar),
                    ] {
                        out.push(ParamInfo {
                            name: format!("bn{i}.{suffix}"),
                            shape: vec![channels],
                            layer: i,
                            kind,
                        });
                    }
                }
                LayerSpec::ReLU => {}
            }
        }
        out
    }

    /// Names (`conv{i}`) of the convolution layers, in order.
    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| format!("conv{i}"))
            .collect()
    }
}
