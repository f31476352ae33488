//! Run configuration: a TOML (or JSON) file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tcgu_core::condense::CondenseConfig;
use tcgu_core::gnn::{GnnSpec, TrainConfig};
use tcgu_core::graph::{GraphFormat, SbmSpec, SplitSpec};
use tcgu_core::transfer::TransferConfig;
use tcgu_core::pipeline::PipelineConfig;
use tcgu_core::Error;

/// Where the input graph comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path to a graph; relative paths that do not exist are looked up under `$TCGU_DATA_DIR`.
    pub path: Option<PathBuf>,
    pub format: Option<GraphFormat>,
    /// Generate a stochastic block model instead of loading a file.
    pub synthetic: Option<SbmSpec>,
    /// Use the masks stored in the file instead of drawing a fresh split.
    pub keep_split: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub gnn: GnnSpec,
    pub train: TrainConfig,
    pub condense: CondenseConfig,
    pub transfer: TransferConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: std::result::Result<Self, String> = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            gnn: self.gnn,
            train: self.train.clone(),
            condense: self.condense.clone(),
            transfer: self.transfer.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.pipeline().validate()?;
        if self.data.path.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("give either a data path or a synthetic graph, not both".into()).into());
        }
        Ok(())
    }
}

/// Resolves a dataset path, falling back to `$TCGU_DATA_DIR` for relative paths.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os("TCGU_DATA_DIR") {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Parses `<batches>x<ratio>`, e.g. `5x0.05`.
pub fn parse_sequential(s: &str) -> std::result::Result<(usize, f64), String> {
    let (n, r) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected <batches>x<ratio>, got {s:?}"))?;
    let n: usize = n.trim().parse().map_err(|_| format!("bad batch count {n:?}"))?;
    let r: f64 = r.trim().parse().map_err(|_| format!("bad batch ratio {r:?}"))?;
    if n == 0 || !(r > 0.0 && r < 1.0) {
        return Err(format!("need a positive batch count and a ratio in (0,1), got {s:?}"));
    }
    Ok((n, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_spec() {
        assert_eq!(parse_sequential("5x0.05"), Ok((5, 0.05)));
        assert!(parse_sequential("0x0.1").is_err());
        assert!(parse_sequential("5x1.5").is_err());
        assert!(parse_sequential("five").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.condense.steps = 2000;
        c.data.path = Some("cora".into());
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: RunConfig = toml::from_str("[condense]\nratio = 0.1\n").unwrap();
        assert_eq!(c.condense.ratio, 0.1);
        assert_eq!(c.condense.steps, 1500);
    }
}
