//! One JSON file drives a whole pipeline: the scene spec for
//! `dataset-gen`, the training recipe for `train` and `generate`, and
//! default paths. Precedence is flat: flag > file > built-in default.
//! Every command echoes the section it resolved into its run directory,
//! so a finished run records exactly what produced it.

use crate::{fail, Fail, EXIT_CONFIG, EXIT_DATA};
use dmf::synth::SceneSpec;
use dmf::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    /// Default corpus manifest, overridden by `--corpus`.
    pub corpus: Option<PathBuf>,
    /// Default output location, overridden by `--out`.
    pub out: Option<PathBuf>,
}

/// Loads the config file, or plain defaults when no file is named.
/// Parse failures exit with the offending line number.
pub fn load(path: Option<&Path>) -> Result<RunConfig, Fail> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        fail(
            EXIT_CONFIG,
            format!("parse error in {} at line {}: {e}", path.display(), e.line()),
        )
    })
}

/// Writes a resolved config section as pretty JSON for provenance.
pub fn echo_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Fail> {
    let mut text = serde_json::to_string_pretty(value).expect("configs serialize");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| fail(EXIT_DATA, format!("cannot write {}: {e}", path.display())))
}
