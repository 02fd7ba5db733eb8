//! Declarative architecture specs: layer sequences with mutable widths,
//! coupling groups, the shape dry-run, and the all-convolutional transform.
//!
//! An [`ArchSpec`] is what the expansion engine mutates and what configs
//! serialize. It never holds parameters; parameter shapes are derived from it
//! by the shape pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinds a layer can take. `width`, `kernel`, `stride`, `padding` and
/// `couple_group` on [`LayerSpec`] apply where meaningful for the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "flatten")]
    Flatten,
    /// Affine convolution of full spatial extent mapping onto the classes,
    /// with no activation. Its kernel is derived from the incoming shape.
    #[serde(rename = "classifier-conv")]
    ClassifierConv,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ClassifierConv => "classifier-conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output feature count for conv/linear. Mutable by expansion. Unused for
    /// pass-through kinds and derived (= num_classes) for the classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// (kh, kw) for conv/maxpool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// Layers sharing a group id must keep equal widths at all times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple_group: Option<u32>,
}

fn default_stride() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(width: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            width: Some(width),
            kernel: Some(kernel),
            stride,
            padding,
            couple_group: None,
        }
    }

    pub fn linear(width: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            width: Some(width),
            kernel: None,
            stride: 1,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn batchnorm() -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            width: None,
            kernel: None,
            stride: 1,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            width: None,
            kernel: None,
            stride: 1,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn maxpool(kernel: (usize, usize), stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            width: None,
            kernel: Some(kernel),
            stride,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn flatten() -> Self {
        Self {
            kind: LayerKind::Flatten,
            width: None,
            kernel: None,
            stride: 1,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn classifier_conv() -> Self {
        Self {
            kind: LayerKind::ClassifierConv,
            width: None,
            kernel: None,
            stride: 1,
            padding: 0,
            couple_group: None,
        }
    }

    pub fn with_group(mut self, group: u32) -> Self {
        self.couple_group = Some(group);
        self
    }
}

/// Per-sample shape flowing between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataShape {
    /// Channels, height, width.
    Map(usize, usize, usize),
    /// Flat feature vector.
    Flat(usize),
}

impl DataShape {
    pub fn numel(&self) -> usize {
        match self {
            DataShape::Map(c, h, w) => c * h * w,
            DataShape::Flat(d) => *d,
        }
    }
}

/// Parameter shapes a layer owns, derived by the shape pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamShape {
    None,
    /// weight [F, C, kh, kw], bias [F]
    Conv { weight: [usize; 4] },
    /// weight [out, in], bias [out]
    Linear { weight: [usize; 2] },
    /// gamma/beta/running stats, all [C]
    BatchNorm { channels: usize },
}

/// Result of the shape dry-run: per-layer input/output shapes and parameter
/// shapes.
#[derive(Debug, Clone)]
pub struct ShapePlan {
    pub inputs: Vec<DataShape>,
    pub outputs: Vec<DataShape>,
    pub params: Vec<ParamShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample input shape [C, H, W].
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Constant added to the variance in batch normalization.
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
    pub layers: Vec<LayerSpec>,
}

fn default_bn_epsilon() -> f64 {
    1e-3
}

impl ArchSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let arch: ArchSpec =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("arch json: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch serializes")
    }

    fn layer_err(&self, index: usize, msg: impl Into<String>) -> Error {
        Error::Layer {
            index,
            kind: self.layers[index].kind.name().to_string(),
            msg: msg.into(),
        }
    }

    /// Dry-run shape pass: checks that adjacent layers compose, that exactly
    /// one terminal classifier produces `num_classes` logits, and that coupled
    /// layers have equal widths. Returns every intermediate and parameter
    /// shape.
    pub fn shape_plan(&self) -> Result<ShapePlan> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut params = Vec::with_capacity(self.layers.len());
        let mut cur = DataShape::Map(
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        );

        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let terminal = i + 1 == self.layers.len();
            cur = match layer.kind {
                LayerKind::Conv | LayerKind::ClassifierConv => {
                    let DataShape::Map(c, h, w) = cur else {
                        return Err(self.layer_err(i, "needs a [C,H,W] input, got a flat vector"));
                    };
                    let (f, kh, kw, stride, padding) = if layer.kind == LayerKind::Conv {
                        let f = layer
                            .width
                            .ok_or_else(|| self.layer_err(i, "conv needs a width"))?;
                        let (kh, kw) = layer
                            .kernel
                            .ok_or_else(|| self.layer_err(i, "conv needs a kernel"))?;
                        (f, kh, kw, layer.stride, layer.padding)
                    } else {
                        // Classifier kernel spans the full incoming extent.
                        (self.num_classes, h, w, 1, 0)
                    };
                    if f == 0 {
                        return Err(self.layer_err(i, "width must be >= 1"));
                    }
                    let oh = crate::tensor::conv_out_extent(h, kh, stride, padding)
                        .ok_or_else(|| {
                            self.layer_err(
                                i,
                                format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
                            )
                        })?;
                    let ow = crate::tensor::conv_out_extent(w, kw, stride, padding)
                        .ok_or_else(|| {
                            self.layer_err(
                                i,
                                format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
                            )
                        })?;
                    params.push(ParamShape::Conv {
                        weight: [f, c, kh, kw],
                    });
                    if layer.kind == LayerKind::ClassifierConv {
                        if !terminal {
                            return Err(self.layer_err(i, "classifier-conv must be terminal"));
                        }
                        DataShape::Flat(self.num_classes)
                    } else {
                        DataShape::Map(f, oh, ow)
                    }
                }
                LayerKind::Linear => {
                    let DataShape::Flat(d) = cur else {
                        return Err(self.layer_err(i, "needs a flat input; add a flatten layer"));
                    };
                    let f = layer
                        .width
                        .ok_or_else(|| self.layer_err(i, "linear needs a width"))?;
                    if f == 0 {
                        return Err(self.layer_err(i, "width must be >= 1"));
                    }
                    params.push(ParamShape::Linear { weight: [f, d] });
                    DataShape::Flat(f)
                }
                LayerKind::BatchNorm => {
                    let channels = match cur {
                        DataShape::Map(c, _, _) => c,
                        DataShape::Flat(d) => d,
                    };
                    params.push(ParamShape::BatchNorm { channels });
                    cur
                }
                LayerKind::Relu => {
                    params.push(ParamShape::None);
                    cur
                }
                LayerKind::MaxPool => {
                    let DataShape::Map(c, h, w) = cur else {
                        return Err(self.layer_err(i, "needs a [C,H,W] input"));
                    };
                    let (kh, kw) = layer
                        .kernel
                        .ok_or_else(|| self.layer_err(i, "maxpool needs a kernel"))?;
                    let oh = crate::tensor::conv_out_extent(h, kh, layer.stride, 0)
                        .ok_or_else(|| {
                            self.layer_err(i, format!("pool {kh}x{kw} does not fit input {h}x{w}"))
                        })?;
                    let ow = crate::tensor::conv_out_extent(w, kw, layer.stride, 0)
                        .ok_or_else(|| {
                            self.layer_err(i, format!("pool {kh}x{kw} does not fit input {h}x{w}"))
                        })?;
                    params.push(ParamShape::None);
                    DataShape::Map(c, oh, ow)
                }
                LayerKind::Flatten => {
                    let DataShape::Map(c, h, w) = cur else {
                        return Err(self.layer_err(i, "input is already flat"));
                    };
                    params.push(ParamShape::None);
                    DataShape::Flat(c * h * w)
                }
            };
            outputs.push(cur.clone());
        }

        // Exactly one terminal classifier producing num_classes logits.
        let last = self.layers.len() - 1;
        let is_classifier = matches!(
            self.layers[last].kind,
            LayerKind::Linear | LayerKind::ClassifierConv
        );
        if !is_classifier {
            return Err(self.layer_err(last, "last layer must be linear or classifier-conv"));
        }
        if outputs[last] != DataShape::Flat(self.num_classes) {
            return Err(self.layer_err(
                last,
                format!(
                    "classifier must produce {} logits, got {:?}",
                    self.num_classes, outputs[last]
                ),
            ));
        }

        // Coupled groups must agree on width.
        let mut groups: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(g) = layer.couple_group {
                let w = layer
                    .width
                    .ok_or_else(|| self.layer_err(i, "coupled layer needs a width"))?;
                match groups.get(&g) {
                    None => {
                        groups.insert(g, w);
                    }
                    Some(&prev) if prev != w => {
                        return Err(self.layer_err(
                            i,
                            format!("couple group {g} has widths {prev} and {w}"),
                        ));
                    }
                    _ => {}
                }
            }
        }

        Ok(ShapePlan {
            inputs,
            outputs,
            params,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_plan().map(|_| ())
    }

    /// Indices of layers whose width the expansion algorithm may grow:
    /// learnable layers except the terminal classifier.
    pub fn expandable_layers(&self) -> Vec<usize> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| {
                matches!(l.kind, LayerKind::Conv | LayerKind::Linear) && *i != last
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Learnable layers carrying a weight tensor (conv/linear/classifier).
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(
                    l.kind,
                    LayerKind::Conv | LayerKind::Linear | LayerKind::ClassifierConv
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Current widths of the expandable layers, in layer order.
    pub fn widths(&self) -> Vec<usize> {
        self.expandable_layers()
            .iter()
            .map(|&i| self.layers[i].width.expect("expandable layers have widths"))
            .collect()
    }

    /// Copy with every expandable width set to 1 (the expansion start state).
    pub fn with_unit_widths(&self) -> ArchSpec {
        let mut arch = self.clone();
        for i in arch.expandable_layers() {
            arch.layers[i].width = Some(1);
        }
        arch
    }

    /// Total learnable parameter count (weights, biases, BN scale/shift).
    pub fn param_count(&self) -> Result<usize> {
        let plan = self.shape_plan()?;
        Ok(plan
            .params
            .iter()
            .map(|p| match p {
                ParamShape::None => 0,
                ParamShape::Conv { weight } => weight.iter().product::<usize>() + weight[0],
                ParamShape::Linear { weight } => weight[0] * weight[1] + weight[0],
                ParamShape::BatchNorm { channels } => 2 * channels,
            })
            .sum())
    }

    /// Replace every pooling layer with a convolution of the same kernel and
    /// stride (followed by batchnorm and relu), and collapse the
    /// fully-connected head into a single affine classifier convolution.
    /// Replacement convolutions start at the width of the preceding
    /// convolution but remain independently mutable afterwards.
    pub fn all_conv_transform(&self) -> Result<ArchSpec> {
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut last_conv_width = self.input_shape[0];
        let mut head_start = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Flatten | LayerKind::Linear => {
                    head_start = Some(i);
                    break;
                }
                LayerKind::ClassifierConv => {
                    head_start = Some(i);
                    break;
                }
                LayerKind::Conv => {
                    last_conv_width = layer.width.expect("validated");
                    layers.push(layer.clone());
                }
                LayerKind::MaxPool => {
                    let kernel = layer.kernel.expect("validated");
                    layers.push(LayerSpec::conv(last_conv_width, kernel, layer.stride, 0));
                    layers.push(LayerSpec::batchnorm());
                    layers.push(LayerSpec::relu());
                }
                _ => layers.push(layer.clone()),
            }
        }
        if let Some(start) = head_start {
            for (j, layer) in self.layers[start..].iter().enumerate() {
                if !matches!(
                    layer.kind,
                    LayerKind::Flatten
                        | LayerKind::Linear
                        | LayerKind::BatchNorm
                        | LayerKind::Relu
                        | LayerKind::ClassifierConv
                ) {
                    return Err(self.layer_err(
                        start + j,
                        "head segment may only contain flatten/linear/batchnorm/relu",
                    ));
                }
            }
        }
        layers.push(LayerSpec::classifier_conv());
        let arch = ArchSpec {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            bn_epsilon: self.bn_epsilon,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// The three-convolution reference architecture with two fully-connected
/// layers, for 32x32x3 inputs.
pub fn gfcnn(num_classes: usize) -> ArchSpec {
    ArchSpec {
        input_shape: [3, 32, 32],
        num_classes,
        bn_epsilon: 1e-3,
        layers: vec![
            LayerSpec::conv(128, (8, 8), 1, 4),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((4, 4), 2),
            LayerSpec::conv(198, (8, 8), 1, 3),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((4, 4), 2),
            LayerSpec::conv(198, (5, 5), 1, 3),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((2, 2), 2),
            LayerSpec::flatten(),
            LayerSpec::linear(512),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::linear(num_classes),
        ],
    }
}

/// Scaled-down GFCNN-style network for desk-scale experiments on small
/// single-channel images.
pub fn gfcnn_narrow(input: [usize; 3], num_classes: usize) -> ArchSpec {
    ArchSpec {
        input_shape: input,
        num_classes,
        bn_epsilon: 1e-3,
        layers: vec![
            LayerSpec::conv(8, (5, 5), 1, 2),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((2, 2), 2),
            LayerSpec::conv(12, (3, 3), 1, 1),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::maxpool((2, 2), 2),
            LayerSpec::conv(12, (3, 3), 1, 1),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::linear(32),
            LayerSpec::batchnorm(),
            LayerSpec::relu(),
            LayerSpec::linear(num_classes),
        ],
    }
}
