use super::Workload;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoePlacement};
use crate::routing::RouterConfig;

/// Tokens per step in the large presets: 512 sequences of 2048.
pub const PRESET_BATCH_TOKENS: usize = 1 << 20;

const BASES: [&str; 3] = ["toy", "1.6b", "6.4b"];

pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for base in BASES {
        names.push(base.to_string());
        let experts: &[usize] = match base {
            "toy" => &[4],
            "1.6b" => &[16, 64, 256],
            _ => &[64, 256],
        };
        names.extend(experts.iter().map(|e| format!("{base}/{e}e")));
    }
    names
}

fn backbone(base: &str) -> Option<(ModelConfig, usize)> {
    match base {
        "toy" => Some((ModelConfig::dense(4, 32, 4, 64, 128, 16), 256)),
        "1.6b" => Some((ModelConfig::dense(24, 2048, 16, 7168, 32000, 2048), PRESET_BATCH_TOKENS)),
        "6.4b" => Some((ModelConfig::dense(32, 4096, 32, 10240, 32000, 2048), PRESET_BATCH_TOKENS)),
        _ => None,
    }
}

/// A named workload: `"1.6b"` is the dense backbone, `"1.6b/64e"` the same
/// backbone with every fourth FFN replaced by 64 top-2 experts.
pub fn preset(name: &str) -> Result<Workload> {
    let unknown = || Error::InvalidArgument(format!("unknown preset {name:?}; known: {}", preset_names().join(", ")));
    let (base, experts) = match name.split_once('/') {
        Some((b, e)) => {
            let e = e.strip_suffix('e').and_then(|n| n.parse::<usize>().ok()).ok_or_else(unknown)?;
            (b, Some(e))
        }
        None => (name, None),
    };
    let (mut model, batch_tokens) = backbone(base).ok_or_else(unknown)?;
    if let Some(e) = experts {
        if e == 0 {
            return Err(unknown());
        }
        model.moe_placement = MoePlacement::EveryK { k: 4 };
        model.router = RouterConfig::new(e, 2.min(e), 2.0);
    }
    Ok(Workload { model, batch_tokens })
}
