use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{DsamError, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Per-domain, per-class sample lists over a shared class vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainIndex {
    /// Sorted union of class names across domains.
    pub classes: Vec<String>,
    /// domain -> class -> sample paths, all sorted.
    pub domains: BTreeMap<String, BTreeMap<String, Vec<PathBuf>>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub domain: String,
    pub class: String,
    pub label: usize,
    pub path: PathBuf,
}

impl DomainIndex {
    pub fn from_domains(domains: BTreeMap<String, BTreeMap<String, Vec<PathBuf>>>) -> Result<Self> {
        let classes: BTreeSet<String> = domains.values().flat_map(|c| c.keys().cloned()).collect();
        let index = DomainIndex {
            classes: classes.into_iter().collect(),
            domains,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.keys().cloned().collect()
    }

    /// Sample count per domain.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.domains
            .iter()
            .map(|(d, classes)| (d.clone(), classes.values().map(Vec::len).sum()))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts().values().sum()
    }

    pub fn label_of(&self, class: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }

    /// All samples in deterministic (domain, class, path) order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        let mut out = Vec::with_capacity(self.total());
        for (domain, classes) in &self.domains {
            for (class, paths) in classes {
                let label = self.label_of(class).expect("class in vocabulary");
                for path in paths {
                    out.push(IndexEntry {
                        domain: domain.clone(),
                        class: class.clone(),
                        label,
                        path: path.clone(),
                    });
                }
            }
        }
        out
    }

    /// Classes absent from each domain; empty map when every domain is complete.
    pub fn missing_classes(&self) -> BTreeMap<String, Vec<String>> {
        self.domains
            .iter()
            .filter_map(|(d, classes)| {
                let missing: Vec<String> = self
                    .classes
                    .iter()
                    .filter(|c| !classes.contains_key(*c))
                    .cloned()
                    .collect();
                (!missing.is_empty()).then(|| (d.clone(), missing))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(DsamError::EmptyDataset("index has no domains".into()));
        }
        let mut seen = BTreeSet::new();
        for (domain, classes) in &self.domains {
            for (class, paths) in classes {
                if self.label_of(class).is_none() {
                    return Err(DsamError::InvalidSpec(format!(
                        "class `{class}` of domain `{domain}` missing from vocabulary"
                    )));
                }
                for p in paths {
                    if !seen.insert(p) {
                        return Err(DsamError::InvalidSpec(format!("duplicate path {}", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| DsamError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DsamError::io(path, e))?;
        let index: DomainIndex = serde_json::from_str(&text)?;
        index.validate()?;
        Ok(index)
    }
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub index: DomainIndex,
    pub unreadable: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DsamError::io(dir, e))? {
        let entry = entry.map_err(|e| DsamError::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Indexes a `root/<domain>/<class>/<image>` tree. Files whose headers cannot
/// be decoded are collected in the report instead of aborting the scan.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(DsamError::EmptyDataset(format!("{} is not a directory", root.display())));
    }
    let domain_dirs = sorted_subdirs(root)?;
    if domain_dirs.is_empty() {
        return Err(DsamError::EmptyDataset(format!("{} has no domain directories", root.display())));
    }
    let mut domains = BTreeMap::new();
    let mut unreadable = Vec::new();
    for domain_dir in domain_dirs {
        let domain = domain_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut classes = BTreeMap::new();
        for class_dir in sorted_subdirs(&domain_dir)? {
            let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut paths = Vec::new();
            for entry in WalkDir::new(&class_dir).sort_by_file_name() {
                let entry = match entry {
                    Ok(e) => e,
                    Err(e) => {
                        unreadable.push((class_dir.clone(), e.to_string()));
                        continue;
                    }
                };
                let path = entry.path();
                if !entry.file_type().is_file() || !is_image(path) {
                    continue;
                }
                match image::ImageReader::open(path).and_then(|r| r.with_guessed_format()) {
                    Ok(reader) => match reader.into_dimensions() {
                        Ok(_) => paths.push(path.to_path_buf()),
                        Err(e) => unreadable.push((path.to_path_buf(), e.to_string())),
                    },
                    Err(e) => unreadable.push((path.to_path_buf(), e.to_string())),
                }
            }
            if !paths.is_empty() {
                classes.insert(class, paths);
            }
        }
        if classes.is_empty() {
            return Err(DsamError::EmptyDataset(format!(
                "domain `{domain}` has no readable images ({} unreadable files so far)",
                unreadable.len()
            )));
        }
        domains.insert(domain, classes);
    }
    let index = DomainIndex::from_domains(domains)?;
    let warnings = index
        .missing_classes()
        .into_iter()
        .map(|(d, missing)| format!("domain `{d}` lacks classes {missing:?}"))
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ScanReport {
        index,
        unreadable,
        warnings,
    })
}

/// Source/target partition for one held-out domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSplit {
    /// Source domains in the order that defines `DomainId::Source(i)`.
    pub sources: Vec<String>,
    pub target: String,
}

pub fn select_target(index: &DomainIndex, target: &str) -> Result<TargetSplit> {
    if !index.domains.contains_key(target) {
        return Err(DsamError::UnknownDomain(format!(
            "`{target}`; available domains: {}",
            index.domain_names().join(", ")
        )));
    }
    Ok(TargetSplit {
        sources: index.domain_names().into_iter().filter(|d| d != target).collect(),
        target: target.to_string(),
    })
}
