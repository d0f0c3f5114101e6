//! The multi-branch model: one shared backbone plus one aggregation module
//! per source domain, and the pooled-source baseline trained the same way.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationModule, AggregationModuleSpec, ModuleOptions};
use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, Linear};
use crate::error::{DsamError, Result};
use crate::init::{derive_seed, param_rng};
use crate::ops::Nonlinearity;

/// Domain membership of a sample. Source indices are 0-based positions in
/// the source enumeration fixed when the experiment starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainId {
    Source(usize),
    Target(usize),
}

impl DomainId {
    pub fn source_index(&self) -> Option<usize> {
        match *self {
            DomainId::Source(i) => Some(i),
            DomainId::Target(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    #[default]
    Dsam,
    DeepAll,
}

/// Aggregation module settings as they appear in experiment configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    #[serde(default)]
    pub node_out_channels: Option<Vec<usize>>,
    /// Dropout on the previous-node input of every node. Defaults per backbone.
    #[serde(default)]
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl ModuleConfig {
    pub fn options_for(&self, backbone: &dyn Backbone) -> ModuleOptions {
        ModuleOptions {
            node_out_channels: self.node_out_channels.clone(),
            dropout_rate: self
                .dropout_rate
                .unwrap_or_else(|| backbone.default_aggregation_dropout()),
            nonlinearity: self.nonlinearity,
        }
    }

    pub fn spec_for(&self, backbone: &dyn Backbone, num_classes: usize) -> Result<AggregationModuleSpec> {
        AggregationModuleSpec::from_taps(
            backbone.taps(),
            &backbone.bridges(),
            num_classes,
            &self.options_for(backbone),
        )
    }
}

/// Features after per-sample l2 normalization.
#[derive(Clone, Debug)]
pub struct ExtractedFeatures {
    /// `(N, D)`, unit norm per row.
    pub vectors: Tensor,
    /// Rows whose activation norm was below the guard epsilon.
    pub zero_rows: Vec<usize>,
}

pub const NORM_EPSILON: f64 = 1e-12;

pub fn l2_normalize(xs: &Tensor) -> Result<ExtractedFeatures> {
    let norms = xs.sqr()?.sum_keepdim(1)?.sqrt()?;
    let zero_rows = norms
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .enumerate()
        .filter(|(_, &n)| n < NORM_EPSILON)
        .map(|(i, _)| i)
        .collect();
    let vectors = xs.broadcast_div(&norms.maximum(NORM_EPSILON)?)?;
    Ok(ExtractedFeatures { vectors, zero_rows })
}

fn prefixed(prefix: &str, params: Vec<(String, Var)>) -> Vec<(String, Var)> {
    params
        .into_iter()
        .map(|(n, v)| (format!("{prefix}.{n}"), v))
        .collect()
}

#[derive(Debug)]
pub struct DSamModel {
    backbone: Box<dyn Backbone>,
    modules: Vec<AggregationModule>,
    backbone_calls: AtomicUsize,
    module_calls: Vec<AtomicUsize>,
}

impl DSamModel {
    /// Attaches `num_sources` freshly initialized modules to `backbone`. The
    /// modules are drawn one after another from a single generator seeded by
    /// `init_seed`; the backbone's parameters are not touched.
    pub fn assemble(
        backbone: Box<dyn Backbone>,
        num_sources: usize,
        module_spec: AggregationModuleSpec,
        init_seed: u64,
    ) -> Result<Self> {
        Self::check_compatible(backbone.as_ref(), num_sources, &module_spec)?;
        let dtype = backbone.named_params()[0].1.dtype();
        let device = backbone.named_params()[0].1.device().clone();
        let mut rng = param_rng(init_seed);
        let modules = (0..num_sources)
            .map(|_| AggregationModule::new(module_spec.clone(), &mut rng, dtype, &device))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(backbone, modules)
    }

    pub fn from_parts(backbone: Box<dyn Backbone>, modules: Vec<AggregationModule>) -> Result<Self> {
        let first = modules.first().ok_or(DsamError::TooFewSources(0))?;
        for m in &modules {
            Self::check_compatible(backbone.as_ref(), modules.len(), m.spec())?;
            if m.spec().num_classes != first.spec().num_classes {
                return Err(DsamError::InvalidSpec(
                    "all aggregation modules must share num_classes".into(),
                ));
            }
        }
        let module_calls = modules.iter().map(|_| AtomicUsize::new(0)).collect();
        Ok(DSamModel {
            backbone,
            modules,
            backbone_calls: AtomicUsize::new(0),
            module_calls,
        })
    }

    fn check_compatible(backbone: &dyn Backbone, num_sources: usize, spec: &AggregationModuleSpec) -> Result<()> {
        if num_sources < 2 {
            return Err(DsamError::TooFewSources(num_sources));
        }
        spec.validate()?;
        let actual: Vec<usize> = backbone.taps().iter().map(|t| t.channels).collect();
        let expected = spec.tap_channels();
        if actual != expected {
            return Err(DsamError::IncompatibleTaps { expected, actual });
        }
        Ok(())
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn modules(&self) -> &[AggregationModule] {
        &self.modules
    }

    pub fn num_sources(&self) -> usize {
        self.modules.len()
    }

    pub fn num_classes(&self) -> usize {
        self.modules[0].spec().num_classes
    }

    pub fn module_spec(&self) -> &AggregationModuleSpec {
        self.modules[0].spec()
    }

    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn module_calls(&self, index: usize) -> usize {
        self.module_calls[index].load(Ordering::Relaxed)
    }

    pub fn reset_call_counts(&self) {
        self.backbone_calls.store(0, Ordering::Relaxed);
        for c in &self.module_calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn run_backbone(&self, images: &Tensor, train: Option<&mut ChaCha8Rng>) -> Result<BackboneOutput> {
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        self.backbone.forward(images, train)
    }

    /// Pooled features and logits of module `index` on precomputed taps.
    pub fn run_module(
        &self,
        index: usize,
        taps: &BackboneOutput,
        train: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        let module = self
            .modules
            .get(index)
            .ok_or_else(|| DsamError::UnknownDomain(format!("source index {index}")))?;
        self.module_calls[index].fetch_add(1, Ordering::Relaxed);
        module.forward_features(&taps.taps, train)
    }

    fn source_index(&self, domain: DomainId) -> Result<usize> {
        match domain {
            DomainId::Source(i) if i < self.modules.len() => Ok(i),
            other => Err(DsamError::UnknownDomain(format!("{other:?}"))),
        }
    }

    /// Logits of the module that owns `domain`; no other module runs.
    pub fn forward_routed(
        &self,
        images: &Tensor,
        domain: DomainId,
        mut train: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let index = self.source_index(domain)?;
        let out = self.run_backbone(images, train.as_deref_mut())?;
        Ok(self.run_module(index, &out, train)?.1)
    }

    /// Logits of every module, sharing a single backbone evaluation.
    pub fn forward_all(&self, images: &Tensor, mut train: Option<&mut ChaCha8Rng>) -> Result<Vec<Tensor>> {
        let out = self.run_backbone(images, train.as_deref_mut())?;
        (0..self.modules.len())
            .map(|i| Ok(self.run_module(i, &out, train.as_deref_mut())?.1))
            .collect()
    }

    /// Final pooled backbone activation, l2-normalized per sample.
    pub fn extract_backbone_features(&self, images: &Tensor) -> Result<ExtractedFeatures> {
        let out = self.run_backbone(images, None)?;
        l2_normalize(&out.pooled)
    }

    /// Each module's pooled pre-classifier activation, l2-normalized per sample.
    pub fn extract_module_features(&self, images: &Tensor) -> Result<Vec<ExtractedFeatures>> {
        let out = self.run_backbone(images, None)?;
        (0..self.modules.len())
            .map(|i| l2_normalize(&self.run_module(i, &out, None)?.0))
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = prefixed("backbone", self.backbone.named_params());
        for (i, m) in self.modules.iter().enumerate() {
            out.extend(prefixed(&format!("modules.{i}"), m.named_params()));
        }
        out
    }

    pub fn module_params(&self, index: usize) -> Vec<(String, Var)> {
        self.modules[index].named_params()
    }
}

/// Backbone plus a single linear classifier on the pooled features, trained
/// on all sources pooled together.
#[derive(Debug)]
pub struct DeepAllModel {
    backbone: Box<dyn Backbone>,
    classifier: Linear,
    num_classes: usize,
}

impl DeepAllModel {
    pub fn new(backbone: Box<dyn Backbone>, num_classes: usize, init_seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(DsamError::InvalidSpec("num_classes must be positive".into()));
        }
        let (dtype, device) = {
            let p = &backbone.named_params()[0].1;
            (p.dtype(), p.device().clone())
        };
        let mut rng = param_rng(init_seed);
        let d = backbone.feature_dim();
        let classifier = Linear {
            weight: crate::init::fan_in_uniform(&mut rng, (num_classes, d), d, dtype, &device)?,
            bias: crate::init::fan_in_uniform(&mut rng, num_classes, d, dtype, &device)?,
        };
        Ok(DeepAllModel {
            backbone,
            classifier,
            num_classes,
        })
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, images: &Tensor, train: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let out = self.backbone.forward(images, train)?;
        self.classifier.forward(&out.pooled)
    }

    pub fn extract_backbone_features(&self, images: &Tensor) -> Result<ExtractedFeatures> {
        l2_normalize(&self.backbone.forward(images, None)?.pooled)
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = prefixed("backbone", self.backbone.named_params());
        let mut head = Vec::new();
        self.classifier.push_params("classifier", &mut head);
        out.extend(head);
        out
    }
}

#[derive(Debug)]
pub enum Network {
    DSam(DSamModel),
    DeepAll(DeepAllModel),
}

impl Network {
    /// Builds either architecture from configs. The backbone and the heads use
    /// independent seed streams derived from `seed`.
    pub fn build(
        kind: NetworkKind,
        backbone: &BackboneConfig,
        module: &ModuleConfig,
        num_sources: usize,
        num_classes: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bb = backbone.build(derive_seed(seed, 11), dtype, device)?;
        let head_seed = derive_seed(seed, 12);
        Ok(match kind {
            NetworkKind::Dsam => {
                let spec = module.spec_for(bb.as_ref(), num_classes)?;
                Network::DSam(DSamModel::assemble(bb, num_sources, spec, head_seed)?)
            }
            NetworkKind::DeepAll => {
                if num_sources < 2 {
                    return Err(DsamError::TooFewSources(num_sources));
                }
                Network::DeepAll(DeepAllModel::new(bb, num_classes, head_seed)?)
            }
        })
    }

    pub fn kind(&self) -> NetworkKind {
        match self {
            Network::DSam(_) => NetworkKind::Dsam,
            Network::DeepAll(_) => NetworkKind::DeepAll,
        }
    }

    pub fn backbone(&self) -> &dyn Backbone {
        match self {
            Network::DSam(m) => m.backbone(),
            Network::DeepAll(m) => m.backbone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Network::DSam(m) => m.num_classes(),
            Network::DeepAll(m) => m.num_classes(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        match self {
            Network::DSam(m) => m.named_params(),
            Network::DeepAll(m) => m.named_params(),
        }
    }

    pub fn named_buffers(&self) -> Vec<(String, Var)> {
        prefixed("backbone", self.backbone().named_buffers())
    }

    pub fn as_dsam(&self) -> Option<&DSamModel> {
        match self {
            Network::DSam(m) => Some(m),
            Network::DeepAll(_) => None,
        }
    }

    pub fn dtype(&self) -> DType {
        self.named_params()[0].1.dtype()
    }

    pub fn device(&self) -> Device {
        self.named_params()[0].1.device().clone()
    }
}
