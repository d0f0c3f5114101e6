//! Checkpoints: every parameter and buffer in a safetensors file, plus a JSON
//! metadata header with enough to rebuild the network without the original
//! config.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationModuleSpec;
use crate::backbone::{assign, BackboneConfig, TapPoint};
use crate::error::{DsamError, Result};
use crate::model::{ModuleConfig, Network, NetworkKind};

pub const FORMAT: &str = "dsam-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "dsam";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub schema_version: u32,
    pub kind: NetworkKind,
    /// Backbone architecture; pretrained weight paths are dropped since the
    /// checkpoint carries the trained weights itself.
    pub backbone: BackboneConfig,
    pub taps: Vec<TapPoint>,
    pub module: ModuleConfig,
    pub module_spec: Option<AggregationModuleSpec>,
    pub num_sources: usize,
    pub num_classes: usize,
    pub dtype: String,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub classes: Vec<String>,
    pub config_hash: Option<String>,
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
}

impl CheckpointMeta {
    /// Metadata for `net`; run-specific fields start empty.
    pub fn describe(
        net: &Network,
        module: &ModuleConfig,
        sources: Vec<String>,
        classes: Vec<String>,
    ) -> Self {
        let backbone = net.backbone();
        CheckpointMeta {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            kind: net.kind(),
            backbone: backbone.config().without_weights(),
            taps: backbone.taps().to_vec(),
            module: module.clone(),
            module_spec: net.as_dsam().map(|m| m.module_spec().clone()),
            num_sources: sources.len(),
            num_classes: net.num_classes(),
            dtype: net.dtype().as_str().to_string(),
            sources,
            target: None,
            classes,
            config_hash: None,
            epoch: None,
            val_accuracy: None,
        }
    }
}

/// Deep copies of every parameter and buffer, keyed by name.
pub fn capture_state(net: &Network) -> Result<Vec<(String, Tensor)>> {
    net.named_params()
        .into_iter()
        .chain(net.named_buffers())
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?.detach())))
        .collect()
}

pub fn restore_state(net: &Network, state: &[(String, Tensor)]) -> Result<()> {
    let map: HashMap<&str, &Tensor> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, var) in net.named_params().into_iter().chain(net.named_buffers()) {
        let t = map
            .get(name.as_str())
            .ok_or_else(|| DsamError::Checkpoint(format!("state lacks `{name}`")))?;
        assign(&var, t, &name)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DsamError::io(dir, e))?;
    }
    let state = capture_state(net)?;
    let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    safetensors::serialize_to_file(state.iter().map(|(n, t)| (n.as_str(), t)), Some(header), path)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| DsamError::io(path, e))?;
    let (_, st_meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let raw = st_meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| DsamError::Checkpoint(format!("{} has no checkpoint header", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.format != FORMAT {
        return Err(DsamError::Checkpoint(format!("unknown format `{}`", meta.format)));
    }
    if meta.schema_version != SCHEMA_VERSION {
        return Err(DsamError::Checkpoint(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    Ok(meta)
}

/// Rebuilds the network described by the header and fills in every tensor.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Network, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let dtype = DType::from_str(&meta.dtype)
        .map_err(|_| DsamError::Checkpoint(format!("unknown dtype `{}`", meta.dtype)))?;
    let net = Network::build(
        meta.kind,
        &meta.backbone,
        &meta.module,
        meta.num_sources,
        meta.num_classes,
        0,
        dtype,
        device,
    )?;
    if net.backbone().taps() != meta.taps.as_slice() {
        return Err(DsamError::Checkpoint("tap layout differs from the rebuilt backbone".into()));
    }
    if let (Some(m), Some(spec)) = (net.as_dsam(), &meta.module_spec) {
        if m.module_spec() != spec {
            return Err(DsamError::Checkpoint("module spec differs from the rebuilt modules".into()));
        }
    }
    let tensors = candle_core::safetensors::load(path, device)?;
    let state: Vec<(String, Tensor)> = tensors.into_iter().collect();
    restore_state(&net, &state)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::checksum;

    fn toy_net(kind: NetworkKind, seed: u64) -> Network {
        let bb = BackboneConfig::toy(vec![4, 8], 16);
        Network::build(kind, &bb, &ModuleConfig::default(), 3, 5, seed, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [NetworkKind::Dsam, NetworkKind::DeepAll] {
            let net = toy_net(kind, 7);
            let mut meta = CheckpointMeta::describe(
                &net,
                &ModuleConfig::default(),
                vec!["a".into(), "b".into(), "c".into()],
                (0..5).map(|c| format!("c{c}")).collect(),
            );
            meta.epoch = Some(3);
            let path = dir.path().join(format!("{kind:?}.safetensors"));
            save_checkpoint(&path, &net, &meta).unwrap();
            let (loaded, back) = load_checkpoint(&path, &Device::Cpu).unwrap();
            assert_eq!(back, meta);
            assert_eq!(loaded.kind(), kind);
            assert_eq!(checksum(&loaded.named_params()).unwrap(), checksum(&net.named_params()).unwrap());
        }
    }

    #[test]
    fn capture_is_a_snapshot() {
        let net = toy_net(NetworkKind::Dsam, 1);
        let before = checksum(&net.named_params()).unwrap();
        let state = capture_state(&net).unwrap();
        let other = capture_state(&toy_net(NetworkKind::Dsam, 2)).unwrap();
        restore_state(&net, &other).unwrap();
        assert_ne!(checksum(&net.named_params()).unwrap(), before);
        restore_state(&net, &state).unwrap();
        assert_eq!(checksum(&net.named_params()).unwrap(), before);
    }

    #[test]
    fn foreign_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        let t = Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        candle_core::safetensors::save(&HashMap::from([("x".to_string(), t)]), &path).unwrap();
        assert!(matches!(read_meta(&path), Err(DsamError::Checkpoint(_))));
    }
}
