//! JSON configuration files.

use std::path::{Path, PathBuf};

use nonn_core::arch::StudentTemplate;
use nonn_core::graph::Rule;
use nonn_core::partition::Budgets;
use nonn_core::simulator::DeviceProfile;
use serde::{Deserialize, Serialize};

use crate::formats::{read_json, FormatError};

/// End-to-end partitioning run. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub trace_path: PathBuf,
    #[serde(default = "default_rule")]
    pub rule: Rule,
    /// Absent means `1e-6 ×` the trace's largest activity.
    #[serde(default)]
    pub eps_act: Option<f64>,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    pub k: usize,
    #[serde(default)]
    pub budgets: Budgets,
    /// Student template JSON; absent means the built-in 32×32 template.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_rule() -> Rule {
    Rule::Ah
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.trace_path = base.join(&cfg.trace_path);
        cfg.template_path = cfg.template_path.map(|p| base.join(p));
        cfg.output_dir = cfg.output_dir.map(|p| base.join(p));
        Ok(cfg)
    }

    /// Checks that referenced inputs exist.
    pub fn check_files(&self) -> Result<(), FormatError> {
        let mut paths = vec![&self.trace_path];
        paths.extend(self.template_path.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(FormatError::Invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn template(&self) -> Result<StudentTemplate, FormatError> {
        match &self.template_path {
            Some(p) => read_json(p),
            None => Ok(StudentTemplate::cifar10()),
        }
    }
}

/// Device profiles for the latency model. `profiles[0]` is the coordinator;
/// the last profile is reused for any further node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesConfig {
    pub profiles: Vec<DeviceProfile>,
    #[serde(default)]
    pub overlap: f64,
    #[serde(default = "one")]
    pub images: u64,
    /// Classes of the coordinator's head.
    pub n_classes: usize,
}

fn one() -> u64 {
    1
}

impl ProfilesConfig {
    pub fn expanded(&self, n_nodes: usize) -> Vec<DeviceProfile> {
        (0..n_nodes).map(|i| self.profiles[i.min(self.profiles.len() - 1)].clone()).collect()
    }
}
