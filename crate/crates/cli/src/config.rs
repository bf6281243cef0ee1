//! Optional TOML config file. Each subcommand reads its own table, keyed by
//! the long flag names (`out-checkpoint`, `lambda`, ...). Flags given on the
//! command line win over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "gen-data")]
    pub gen_data: GenDataConfig,
    pub train: TrainFileConfig,
    pub fuse: FuseConfig,
    pub eval: EvalConfig,
    pub selfcheck: SelfcheckConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDataConfig {
    pub src: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub groups: Option<Vec<usize>>,
    pub threshold: Option<u8>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainFileConfig {
    pub manifest: Option<PathBuf>,
    pub out_checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub crop: Option<usize>,
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub checkpoint_every: Option<usize>,
    pub max_steps: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FuseConfig {
    pub checkpoint: Option<PathBuf>,
    pub dump_attention: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalConfig {
    pub fused_dir: Option<PathBuf>,
    pub src_a_dir: Option<PathBuf>,
    pub src_b_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SelfcheckConfig {
    pub seed: Option<u64>,
    pub instances: Option<usize>,
}

pub fn load(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
