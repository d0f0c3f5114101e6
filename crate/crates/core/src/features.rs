//! Feature dumps: per-sample records (id, domain, label, feature blocks) in a
//! columnar little-endian binary file with a JSON sidecar describing the
//! layout.
//!
//! Column order in the `.bin` file is `id` (u64), `domain` (u32), `label`
//! (u32), then every f32 block row-major. Offsets in the sidecar are bytes
//! from the start of the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{DsamError, Result};
use crate::evaluation::{FeatureSet, FeatureSource, EVAL_BATCH};
use crate::model::{ExtractedFeatures, Network};

pub const FORMAT: &str = "dsam-features";
pub const SCHEMA_VERSION: u32 = 1;
pub const THETA: &str = "theta";

pub fn lambda_block(i: usize) -> String {
    format!("lambda_{i}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    U64,
    U32,
    F32,
}

impl ColumnType {
    fn width(self) -> usize {
        match self {
            ColumnType::U64 => 8,
            ColumnType::U32 | ColumnType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub dtype: ColumnType,
    /// Values per row.
    pub dim: usize,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub format: String,
    pub schema_version: u32,
    pub rows: usize,
    pub data_file: String,
    pub columns: Vec<Column>,
    /// Names for the values of the `domain` column.
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    /// Rows whose raw activation was numerically zero in some block.
    pub zero_rows: Vec<usize>,
    pub config_hash: Option<String>,
}

/// In-memory feature table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    pub domains: Vec<u32>,
    pub labels: Vec<u32>,
    /// Name, width and row-major values of each block.
    pub blocks: Vec<(String, usize, Vec<f32>)>,
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
    pub zero_rows: Vec<usize>,
    pub config_hash: Option<String>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn block(&self, name: &str) -> Result<(usize, &[f32])> {
        self.blocks
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, d, v)| (*d, v.as_slice()))
            .ok_or_else(|| DsamError::FeatureDump(format!("no feature block `{name}`")))
    }

    /// Number of `lambda_i` blocks.
    pub fn num_modules(&self) -> usize {
        (0..).take_while(|&i| self.block(&lambda_block(i)).is_ok()).count()
    }

    fn block_names(&self, source: FeatureSource) -> Result<Vec<String>> {
        let lambdas: Vec<String> = (0..self.num_modules()).map(lambda_block).collect();
        if source != FeatureSource::Theta && lambdas.is_empty() {
            return Err(DsamError::FeatureDump(
                "dump has no aggregation-module features (baseline network?)".into(),
            ));
        }
        Ok(match source {
            FeatureSource::Theta => vec![THETA.to_string()],
            FeatureSource::Lambda => lambdas,
            FeatureSource::ThetaLambda => std::iter::once(THETA.to_string()).chain(lambdas).collect(),
        })
    }

    /// Probe input for the rows whose domain column equals one of `domains`.
    /// Blocks are concatenated per row in the order theta, lambda_0, ...
    pub fn feature_set(&self, source: FeatureSource, domains: &[u32]) -> Result<FeatureSet> {
        let names = self.block_names(source)?;
        let blocks = names.iter().map(|n| self.block(n)).collect::<Result<Vec<_>>>()?;
        let dim = blocks.iter().map(|(d, _)| d).sum();
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if !domains.contains(&self.domains[i]) {
                continue;
            }
            for (d, values) in &blocks {
                vectors.extend_from_slice(&values[i * d..(i + 1) * d]);
            }
            labels.push(self.labels[i] as usize);
        }
        if labels.is_empty() {
            return Err(DsamError::EmptyDataset(format!("no feature rows for domains {domains:?}")));
        }
        FeatureSet::new(dim, vectors, labels)
    }

    pub fn domain_code(&self, name: &str) -> Result<u32> {
        self.domain_names
            .iter()
            .position(|d| d == name)
            .map(|p| p as u32)
            .ok_or_else(|| DsamError::UnknownDomain(format!("`{name}` is not in the feature dump")))
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.domains.len() != n || self.labels.len() != n {
            return Err(DsamError::FeatureDump("id/domain/label columns differ in length".into()));
        }
        for (name, d, v) in &self.blocks {
            if *d == 0 || v.len() != n * d {
                return Err(DsamError::FeatureDump(format!(
                    "block `{name}` holds {} values, expected {n} x {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the sidecar path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| DsamError::io(dir, e))?;
        let n = self.len();
        let mut bytes = Vec::new();
        let mut columns = Vec::new();
        let mut push_col = |name: &str, dtype: ColumnType, dim: usize, data: Vec<u8>, bytes: &mut Vec<u8>| {
            columns.push(Column {
                name: name.to_string(),
                dtype,
                dim,
                offset: bytes.len(),
                bytes: data.len(),
            });
            bytes.extend(data);
        };
        push_col("id", ColumnType::U64, 1, self.ids.iter().flat_map(|v| v.to_le_bytes()).collect(), &mut bytes);
        push_col("domain", ColumnType::U32, 1, self.domains.iter().flat_map(|v| v.to_le_bytes()).collect(), &mut bytes);
        push_col("label", ColumnType::U32, 1, self.labels.iter().flat_map(|v| v.to_le_bytes()).collect(), &mut bytes);
        for (name, d, v) in &self.blocks {
            push_col(name, ColumnType::F32, *d, v.iter().flat_map(|x| x.to_le_bytes()).collect(), &mut bytes);
        }
        let data_file = format!("{stem}.bin");
        let bin = dir.join(&data_file);
        fs::write(&bin, &bytes).map_err(|e| DsamError::io(&bin, e))?;
        let schema = FeatureSchema {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            rows: n,
            data_file,
            columns,
            domains: self.domain_names.clone(),
            classes: self.class_names.clone(),
            zero_rows: self.zero_rows.clone(),
            config_hash: self.config_hash.clone(),
        };
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&schema)?).map_err(|e| DsamError::io(&json, e))?;
        Ok(json)
    }

    /// Reads a dump given its sidecar path.
    pub fn read(sidecar: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar).map_err(|e| DsamError::io(sidecar, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        if schema.format != FORMAT || schema.schema_version != SCHEMA_VERSION {
            return Err(DsamError::FeatureDump(format!(
                "unsupported dump format {} v{}",
                schema.format, schema.schema_version
            )));
        }
        let bin = sidecar.with_file_name(&schema.data_file);
        let bytes = fs::read(&bin).map_err(|e| DsamError::io(&bin, e))?;
        let n = schema.rows;
        let slice = |c: &Column| -> Result<&[u8]> {
            if c.bytes != n * c.dim * c.dtype.width() || c.offset + c.bytes > bytes.len() {
                return Err(DsamError::FeatureDump(format!("column `{}` is out of bounds", c.name)));
            }
            Ok(&bytes[c.offset..c.offset + c.bytes])
        };
        let find = |name: &str, dtype: ColumnType| -> Result<&Column> {
            schema
                .columns
                .iter()
                .find(|c| c.name == name && c.dtype == dtype)
                .ok_or_else(|| DsamError::FeatureDump(format!("missing column `{name}`")))
        };
        let ids = slice(find("id", ColumnType::U64)?)?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let u32s = |c: &Column| -> Result<Vec<u32>> {
            Ok(slice(c)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect())
        };
        let domains = u32s(find("domain", ColumnType::U32)?)?;
        let labels = u32s(find("label", ColumnType::U32)?)?;
        let mut blocks = Vec::new();
        for c in schema.columns.iter().filter(|c| c.dtype == ColumnType::F32) {
            let values = slice(c)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            blocks.push((c.name.clone(), c.dim, values));
        }
        let table = FeatureTable {
            ids,
            domains,
            labels,
            blocks,
            domain_names: schema.domains,
            class_names: schema.classes,
            zero_rows: schema.zero_rows,
            config_hash: schema.config_hash,
        };
        table.validate()?;
        Ok(table)
    }
}

fn append(block: &mut Vec<f32>, zero_rows: &mut Vec<usize>, feats: &ExtractedFeatures, base: usize) -> Result<()> {
    block.extend(feats.vectors.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    zero_rows.extend(feats.zero_rows.iter().map(|r| base + r));
    Ok(())
}

/// Backbone features for every sample in `indices`, plus each module's
/// features when `net` is a D-SAM model. All vectors are unit norm.
pub fn extract_features(net: &Network, dataset: &ImageDataset, indices: &[usize]) -> Result<FeatureTable> {
    if indices.is_empty() {
        return Err(DsamError::EmptyDataset("no samples to extract features from".into()));
    }
    let input_size = net.backbone().input_size();
    let (dtype, device) = (net.dtype(), net.device());
    let modules = net.as_dsam().map(|m| m.num_sources()).unwrap_or(0);
    let mut theta = Vec::new();
    let mut lambdas = vec![Vec::new(); modules];
    let mut zero_rows = Vec::new();
    for (k, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let base = k * EVAL_BATCH;
        let (images, _) = dataset.load_batch(chunk, input_size, None, dtype, &device)?;
        match net {
            Network::DSam(m) => {
                append(&mut theta, &mut zero_rows, &m.extract_backbone_features(&images)?, base)?;
                for (i, f) in m.extract_module_features(&images)?.iter().enumerate() {
                    append(&mut lambdas[i], &mut zero_rows, f, base)?;
                }
            }
            Network::DeepAll(m) => append(&mut theta, &mut zero_rows, &m.extract_backbone_features(&images)?, base)?,
        }
    }
    zero_rows.sort_unstable();
    zero_rows.dedup();
    let n = indices.len();
    let mut blocks = vec![(THETA.to_string(), theta.len() / n, theta)];
    for (i, l) in lambdas.into_iter().enumerate() {
        blocks.push((lambda_block(i), l.len() / n, l));
    }
    Ok(FeatureTable {
        ids: indices.iter().map(|&i| dataset.samples[i].id).collect(),
        domains: indices.iter().map(|&i| dataset.samples[i].domain as u32).collect(),
        labels: indices.iter().map(|&i| dataset.samples[i].label as u32).collect(),
        blocks,
        domain_names: dataset.domains.clone(),
        class_names: dataset.classes.clone(),
        zero_rows,
        config_hash: None,
    })
}
