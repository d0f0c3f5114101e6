//! Aggregation nodes and domain-specific aggregation modules.
//!
//! A module is a chain of nodes running alongside the backbone. Node 0 fuses
//! taps 0 and 1; node k fuses node k-1's output with tap k+1. Each node
//! concatenates its two inputs along channels and applies a 1x1 convolution
//! followed by a nonlinearity. The last node's output is average pooled and
//! fed to a linear classifier.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TapPoint;
use crate::error::{DsamError, Result};
use crate::feature_map::FeatureMap;
use crate::init::{fan_in_uniform, ParamRng};
use crate::ops::{self, Downsample, LayerOp, Nonlinearity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationNodeSpec {
    pub in_channels_prev: usize,
    pub in_channels_tap: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub downsample: Downsample,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl AggregationNodeSpec {
    pub fn new(in_channels_prev: usize, in_channels_tap: usize, out_channels: usize) -> Self {
        AggregationNodeSpec {
            in_channels_prev,
            in_channels_tap,
            out_channels,
            downsample: Downsample::None,
            dropout_rate: 0.0,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    pub fn with_downsample(mut self, downsample: Downsample) -> Self {
        self.downsample = downsample;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_nonlinearity(mut self, nonlinearity: Nonlinearity) -> Self {
        self.nonlinearity = nonlinearity;
        self
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample.factor()
    }

    /// Input channels of the 1x1 convolution after downsampling and concatenation.
    pub fn fused_channels(&self) -> usize {
        self.downsample.output_channels(self.in_channels_prev) + self.in_channels_tap
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels_prev == 0 || self.in_channels_tap == 0 || self.out_channels == 0 {
            return Err(DsamError::InvalidSpec(format!(
                "node channel counts must be positive: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(DsamError::InvalidSpec(format!(
                "dropout rate {} outside [0, 1]",
                self.dropout_rate
            )));
        }
        self.downsample.validate()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fused_channels() + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct AggregationNode {
    spec: AggregationNodeSpec,
    weight: Var,
    bias: Var,
}

impl AggregationNode {
    pub fn new(
        spec: AggregationNodeSpec,
        rng: &mut ParamRng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.fused_channels();
        let weight = fan_in_uniform(rng, (spec.out_channels, fan_in, 1, 1), fan_in, dtype, device)?;
        let bias = fan_in_uniform(rng, spec.out_channels, fan_in, dtype, device)?;
        Ok(AggregationNode { spec, weight, bias })
    }

    /// Builds a node from explicit parameters; `weight` is `(out, fused_in)` or
    /// `(out, fused_in, 1, 1)`.
    pub fn from_tensors(spec: AggregationNodeSpec, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        spec.validate()?;
        let fused = spec.fused_channels();
        let weight = weight.reshape((spec.out_channels, fused, 1, 1))?;
        if bias.dims() != [spec.out_channels] {
            return Err(DsamError::ShapeMismatch {
                context: "aggregation node bias".into(),
                dim: "out_channels",
                expected: spec.out_channels,
                actual: bias.elem_count(),
            });
        }
        Ok(AggregationNode {
            spec,
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(bias)?,
        })
    }

    pub fn spec(&self) -> &AggregationNodeSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        vec![
            ("weight".to_string(), self.weight.clone()),
            ("bias".to_string(), self.bias.clone()),
        ]
    }

    /// The node's computation graph, in execution order.
    pub fn ops(&self) -> Vec<LayerOp> {
        let mut out = Vec::new();
        if self.spec.downsample != Downsample::None {
            out.push(LayerOp::Downsample(self.spec.downsample));
        }
        if self.spec.dropout_rate > 0.0 {
            out.push(LayerOp::Dropout {
                rate: self.spec.dropout_rate,
            });
        }
        out.push(LayerOp::Concat);
        out.push(LayerOp::Conv {
            kernel: 1,
            stride: 1,
            in_channels: self.spec.fused_channels(),
            out_channels: self.spec.out_channels,
        });
        out.push(LayerOp::Activation(self.spec.nonlinearity));
        out
    }

    /// Fuses `prev` with `tap`. Dropout on the `prev` path is active only when
    /// a generator is supplied.
    pub fn forward(
        &self,
        prev: &FeatureMap,
        tap: &FeatureMap,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<FeatureMap> {
        let spec = &self.spec;
        let mismatch = |dim, expected, actual| DsamError::ShapeMismatch {
            context: "aggregation node".into(),
            dim,
            expected,
            actual,
        };
        if prev.batch() != tap.batch() {
            return Err(mismatch("batch", tap.batch(), prev.batch()));
        }
        if prev.channels() != spec.in_channels_prev {
            return Err(mismatch("prev channels", spec.in_channels_prev, prev.channels()));
        }
        if tap.channels() != spec.in_channels_tap {
            return Err(mismatch("tap channels", spec.in_channels_tap, tap.channels()));
        }
        if let Downsample::MaxPoolFlatten { input, .. } = spec.downsample {
            if prev.spatial() != input {
                return Err(mismatch("prev height", input.0, prev.spatial().0));
            }
        }

        let expected_spatial = spec.downsample.output_spatial(prev.spatial());
        if expected_spatial != tap.spatial() {
            return Err(DsamError::Downsample {
                strategy: format!("{:?}", spec.downsample),
                from: prev.spatial(),
                target: tap.spatial(),
                produced: expected_spatial,
            });
        }
        let mut x = spec.downsample.apply(prev.tensor())?;
        if let Some(rng) = dropout {
            x = ops::dropout(&x, spec.dropout_rate, rng)?;
        }
        let fused = Tensor::cat(&[&x, tap.tensor()], 1)?;
        let out = ops::conv2d_bias(&fused, self.weight.as_tensor(), self.bias.as_tensor(), 0, 1)?;
        FeatureMap::new(spec.nonlinearity.apply(&out)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierHead {
    #[default]
    GlobalPoolLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationModuleSpec {
    pub nodes: Vec<AggregationNodeSpec>,
    pub num_classes: usize,
    #[serde(default)]
    pub classifier: ClassifierHead,
}

/// Knobs for deriving a module spec from a backbone's tap list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleOptions {
    /// Per-node output channels; defaults to the channels of the tap each node bridges to.
    #[serde(default)]
    pub node_out_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl AggregationModuleSpec {
    /// Derives a spec bridging consecutive taps. `bridges[k]` is the backbone's
    /// own reduction between tap k and tap k+1.
    pub fn from_taps(
        taps: &[TapPoint],
        bridges: &[Downsample],
        num_classes: usize,
        options: &ModuleOptions,
    ) -> Result<Self> {
        if taps.len() < 2 {
            return Err(DsamError::InvalidSpec(format!(
                "an aggregation module needs at least 2 taps, got {}",
                taps.len()
            )));
        }
        if bridges.len() != taps.len() - 1 {
            return Err(DsamError::InvalidSpec(format!(
                "expected {} bridges, got {}",
                taps.len() - 1,
                bridges.len()
            )));
        }
        if let Some(outs) = &options.node_out_channels {
            if outs.len() != taps.len() - 1 {
                return Err(DsamError::InvalidSpec(format!(
                    "node_out_channels has {} entries, module has {} nodes",
                    outs.len(),
                    taps.len() - 1
                )));
            }
        }
        let mut nodes = Vec::with_capacity(taps.len() - 1);
        let mut prev_channels = taps[0].channels;
        for k in 0..taps.len() - 1 {
            let out = options
                .node_out_channels
                .as_ref()
                .map(|o| o[k])
                .unwrap_or(taps[k + 1].channels);
            let node = AggregationNodeSpec::new(prev_channels, taps[k + 1].channels, out)
                .with_downsample(bridges[k])
                .with_dropout(options.dropout_rate)
                .with_nonlinearity(options.nonlinearity);
            nodes.push(node);
            prev_channels = out;
        }
        let spec = AggregationModuleSpec {
            nodes,
            num_classes,
            classifier: ClassifierHead::GlobalPoolLinear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_taps(&self) -> usize {
        self.nodes.len() + 1
    }

    /// Channel counts the module expects from each tap, shallowest first.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_taps());
        if let Some(first) = self.nodes.first() {
            out.push(first.in_channels_prev);
        }
        out.extend(self.nodes.iter().map(|n| n.in_channels_tap));
        out
    }

    /// Length of the pooled pre-classifier feature vector.
    pub fn feature_dim(&self) -> usize {
        self.nodes.last().map(|n| n.out_channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(DsamError::InvalidSpec("module has no nodes".into()));
        }
        if self.num_classes == 0 {
            return Err(DsamError::InvalidSpec("num_classes must be positive".into()));
        }
        for (k, node) in self.nodes.iter().enumerate() {
            node.validate().map_err(|e| DsamError::Node {
                index: k,
                source: Box::new(e),
            })?;
            if k > 0 && node.in_channels_prev != self.nodes[k - 1].out_channels {
                return Err(DsamError::InvalidSpec(format!(
                    "node {k} expects {} input channels but node {} emits {}",
                    node.in_channels_prev,
                    k - 1,
                    self.nodes[k - 1].out_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AggregationModule {
    spec: AggregationModuleSpec,
    nodes: Vec<AggregationNode>,
    classifier_weight: Var,
    classifier_bias: Var,
}

impl AggregationModule {
    pub fn new(
        spec: AggregationModuleSpec,
        rng: &mut ParamRng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        spec.validate()?;
        let nodes = spec
            .nodes
            .iter()
            .map(|n| AggregationNode::new(n.clone(), rng, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let d = spec.feature_dim();
        let classifier_weight = fan_in_uniform(rng, (spec.num_classes, d), d, dtype, device)?;
        let classifier_bias = fan_in_uniform(rng, spec.num_classes, d, dtype, device)?;
        Ok(AggregationModule {
            spec,
            nodes,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn from_parts(
        spec: AggregationModuleSpec,
        nodes: Vec<AggregationNode>,
        classifier_weight: &Tensor,
        classifier_bias: &Tensor,
    ) -> Result<Self> {
        spec.validate()?;
        if nodes.len() != spec.nodes.len() {
            return Err(DsamError::InvalidSpec(format!(
                "{} nodes supplied for a spec with {}",
                nodes.len(),
                spec.nodes.len()
            )));
        }
        let expected = (spec.num_classes, spec.feature_dim());
        if classifier_weight.dims2()? != expected {
            return Err(DsamError::ShapeMismatch {
                context: "classifier weight".into(),
                dim: "features",
                expected: expected.1,
                actual: classifier_weight.dims().last().copied().unwrap_or(0),
            });
        }
        Ok(AggregationModule {
            spec,
            nodes,
            classifier_weight: Var::from_tensor(classifier_weight)?,
            classifier_bias: Var::from_tensor(classifier_bias)?,
        })
    }

    pub fn spec(&self) -> &AggregationModuleSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[AggregationNode] {
        &self.nodes
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            for (name, var) in node.named_params() {
                out.push((format!("nodes.{k}.{name}"), var));
            }
        }
        out.push(("classifier.weight".into(), self.classifier_weight.clone()));
        out.push(("classifier.bias".into(), self.classifier_bias.clone()));
        out
    }

    /// Pooled pre-classifier features `(N, D)` and logits `(N, num_classes)`.
    pub fn forward_features(
        &self,
        taps: &[FeatureMap],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        if taps.len() != self.spec.num_taps() {
            return Err(DsamError::TapCount {
                expected: self.spec.num_taps(),
                actual: taps.len(),
            });
        }
        let mut current = taps[0].clone();
        for (k, node) in self.nodes.iter().enumerate() {
            current = node
                .forward(&current, &taps[k + 1], dropout.as_deref_mut())
                .map_err(|e| DsamError::Node {
                    index: k,
                    source: Box::new(e),
                })?;
        }
        let pooled = current.global_avg_pool()?;
        let logits = ops::linear(
            &pooled,
            self.classifier_weight.as_tensor(),
            self.classifier_bias.as_tensor(),
        )?;
        Ok((pooled, logits))
    }

    pub fn forward(&self, taps: &[FeatureMap], dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Ok(self.forward_features(taps, dropout)?.1)
    }
}
