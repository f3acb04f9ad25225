use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ModelConfig;

/// The eight probe points inside a transformer block, in dataflow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Module {
    LN1,
    MHA,
    RC1,
    LN2,
    FC1,
    Act,
    FC2,
    RC2,
}

impl Module {
    pub const ALL: [Module; 8] = [
        Module::LN1,
        Module::MHA,
        Module::RC1,
        Module::LN2,
        Module::FC1,
        Module::Act,
        Module::FC2,
        Module::RC2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::LN1 => "LN1",
            Module::MHA => "MHA",
            Module::RC1 => "RC1",
            Module::LN2 => "LN2",
            Module::FC1 => "FC1",
            Module::Act => "Act",
            Module::FC2 => "FC2",
            Module::RC2 => "RC2",
        }
    }

    /// Position in [`Module::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Feature width: `4d` inside the feedforward expansion, `d` elsewhere.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        match self {
            Module::FC1 | Module::Act => cfg.ffn_dim,
            _ => cfg.embed_dim,
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Tap(format!("unknown module {s:?}")))
    }
}

/// Address of one probe point: a module inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapId {
    pub block: usize,
    pub module: Module,
}

impl TapId {
    pub fn new(block: usize, module: Module) -> Self {
        Self { block, module }
    }

    pub fn width(&self, cfg: &ModelConfig) -> usize {
        self.module.width(cfg)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.block >= cfg.num_blocks {
            return Err(Error::Tap(format!(
                "block {} out of range for a {}-block model",
                self.block, cfg.num_blocks
            )));
        }
        Ok(())
    }

    /// All `8·L` taps, block-major.
    pub fn all(cfg: &ModelConfig) -> Vec<TapId> {
        (0..cfg.num_blocks)
            .flat_map(|b| Module::ALL.into_iter().map(move |m| TapId::new(b, m)))
            .collect()
    }

    /// The block-output tap of every block.
    pub fn block_outputs(cfg: &ModelConfig) -> Vec<TapId> {
        (0..cfg.num_blocks)
            .map(|b| TapId::new(b, Module::RC2))
            .collect()
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.module)
    }
}

impl FromStr for TapId {
    type Err = Error;

    /// Parses `"<block>.<module>"`, e.g. `"3.FC1"`.
    fn from_str(s: &str) -> Result<Self> {
        let (b, m) = s
            .split_once('.')
            .ok_or_else(|| Error::Tap(format!("expected <block>.<module>, got {s:?}")))?;
        let block = b
            .trim()
            .parse()
            .map_err(|_| Error::Tap(format!("bad block index in {s:?}")))?;
        Ok(TapId::new(block, m.trim().parse()?))
    }
}

/// Captured CLS-token embedding at one tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord<T = f32> {
    pub tap: TapId,
    pub cls_embedding: Vec<T>,
}

/// Parses a tap selection: `all`, `rc2`, or a comma-separated list of
/// `<block>.<module>` entries. A bare module name selects it in every block.
pub fn parse_tap_selection(spec: &str, cfg: &ModelConfig) -> Result<Vec<TapId>> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("all") {
        return Ok(TapId::all(cfg));
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.contains('.') {
            let tap: TapId = part.parse()?;
            tap.validate(cfg)?;
            out.push(tap);
        } else {
            let module: Module = part.parse()?;
            out.extend((0..cfg.num_blocks).map(|b| TapId::new(b, module)));
        }
    }
    if out.is_empty() {
        return Err(Error::Tap("empty tap selection".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}
