use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use normalign::data::DatasetSpec;
use normalign::trainer::TrainConfig;

use crate::Failure;

/// Document accepted by `train --config`. Every key is optional; unknown keys are errors.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Generate this dataset in memory when no `data` directory is given.
    pub dataset: Option<DatasetSpec>,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Strict JSON parsing; errors name the file and the failing field path.
pub fn parse_json_file<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        Failure::input(format!("{}: at `{at}`: {inner}", path.display()))
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("defaults serialize")
}

/// Long-help epilogues showing every default a subcommand can pick up.
pub fn defaults_help() -> Vec<(&'static str, String)> {
    let dataset = format!("Dataset spec defaults:\n{}", pretty(&DatasetSpec::default()));
    let train = format!(
        "Config defaults (`dataset`, `data` and `out` are unset by default):\n{}",
        pretty(&CliConfig::default())
    );
    vec![
        ("gen-data", dataset.clone()),
        ("train", train),
        ("preset", format!("Presets: table2-left, table2-right. Set NORM_ALIGN_THREADS to run seeds in parallel (default 1).\n\n{dataset}")),
    ]
}
