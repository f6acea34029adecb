//! Declarative model description and its text form.
//!
//! The text form is one `key = value` pair per line; `#` starts a comment.
//! The first pair must be `format = lsnet-spec/1`. List values are comma
//! separated. Keys not given take the defaults of [`ModelSpec::default_for`].
//!
//! ```text
//! format = lsnet-spec/1
//! name = micro
//! stem = 8,16,32
//! channels = 32,64,96,128
//! blocks = 0,1,2,2
//! mixers = ls,ls,ls,msa
//! divisors = 8,8,8,16
//! classes = 10
//! ```

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{config_err, ensure_config, Error, Result};

pub const FORMAT_TAG: &str = "lsnet-spec/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MixerKind {
    Ls,
    Msa,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Ls => "ls",
            MixerKind::Msa => "msa",
        }
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ls" => Ok(MixerKind::Ls),
            "msa" => Ok(MixerKind::Msa),
            _ => Err(Error::Format(format!("unknown mixer `{s}`"))),
        }
    }
}

/// How the sub-blocks of a stage are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Wiring {
    /// Even-indexed blocks are DW → SE → FFN, odd-indexed blocks are mixer → FFN.
    Alternating,
    /// Every block is DW → SE → mixer → FFN.
    Full,
}

impl Wiring {
    pub fn name(self) -> &'static str {
        match self {
            Wiring::Alternating => "alternating",
            Wiring::Full => "full",
        }
    }
}

impl FromStr for Wiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(Wiring::Alternating),
            "full" => Ok(Wiring::Full),
            _ => Err(Error::Format(format!("unknown wiring `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub mixer: MixerKind,
    /// Input-to-feature resolution ratio of this stage.
    pub divisor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem: [usize; 3],
    pub stages: [StageSpec; 4],
    pub classes: usize,
    pub large_kernel: usize,
    pub small_kernel: usize,
    /// Channels per aggregation group, `C/G`.
    pub group_width: usize,
    pub ffn_ratio: usize,
    pub se_ratio: usize,
    /// Value channels per attention head; heads = `C / head_dim`.
    pub head_dim: usize,
    pub key_dim: usize,
    pub lkp_dw: bool,
    pub dw: bool,
    pub se: bool,
    pub wiring: Wiring,
}

fn stages(channels: [usize; 4], blocks: [usize; 4], divisors: [usize; 4]) -> [StageSpec; 4] {
    std::array::from_fn(|i| StageSpec {
        channels: channels[i],
        blocks: blocks[i],
        mixer: if i == 3 { MixerKind::Msa } else { MixerKind::Ls },
        divisor: divisors[i],
    })
}

const STANDARD_DIVISORS: [usize; 4] = [8, 16, 32, 64];

impl ModelSpec {
    /// Operator and block defaults around the given tables.
    pub fn default_for(name: &str, stem: [usize; 3], st: [StageSpec; 4], classes: usize) -> Self {
        ModelSpec {
            name: name.to_string(),
            in_channels: 3,
            stem,
            stages: st,
            classes,
            large_kernel: 7,
            small_kernel: 3,
            group_width: 8,
            ffn_ratio: 2,
            se_ratio: 4,
            head_dim: 32,
            key_dim: 16,
            lkp_dw: true,
            dw: true,
            se: true,
            wiring: Wiring::Alternating,
        }
    }

    pub fn lsnet_t() -> Self {
        Self::default_for(
            "t",
            [16, 32, 64],
            stages([64, 128, 256, 384], [0, 2, 8, 10], STANDARD_DIVISORS),
            1000,
        )
    }

    pub fn lsnet_s() -> Self {
        Self::default_for(
            "s",
            [24, 48, 96],
            stages([96, 192, 320, 448], [1, 2, 8, 10], STANDARD_DIVISORS),
            1000,
        )
    }

    pub fn lsnet_b() -> Self {
        Self::default_for(
            "b",
            [32, 64, 128],
            stages([128, 256, 384, 512], [4, 6, 8, 10], STANDARD_DIVISORS),
            1000,
        )
    }

    /// Desk-scale model for 32×32 inputs and 10 classes.
    pub fn micro() -> Self {
        Self::default_for(
            "micro",
            [8, 16, 32],
            stages([32, 64, 96, 128], [0, 1, 2, 2], [8, 8, 8, 16]),
            10,
        )
    }

    /// Smallest model containing every block kind, for finite-difference checks.
    pub fn tiny() -> Self {
        Self::default_for(
            "tiny",
            [4, 8, 8],
            stages([8, 16, 16, 16], [0, 1, 2, 2], [8, 8, 8, 16]),
            4,
        )
    }

    /// `t`, `s`, `b`, `micro` or `tiny`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t" | "lsnet-t" => Ok(Self::lsnet_t()),
            "s" | "lsnet-s" => Ok(Self::lsnet_s()),
            "b" | "lsnet-b" => Ok(Self::lsnet_b()),
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config_err!(
                "unknown variant `{other}` (expected t, s, b, micro or tiny)"
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(
            self.in_channels > 0 && self.classes > 0,
            "input channels and classes must be positive"
        );
        ensure_config!(self.stem.iter().all(|&c| c > 0), "stem channels must be positive");
        for (i, s) in self.stages.iter().enumerate() {
            let expected = if i == 3 { MixerKind::Msa } else { MixerKind::Ls };
            ensure_config!(
                s.mixer == expected,
                "stage {} must use the {} mixer",
                i + 1,
                expected.name()
            );
            ensure_config!(s.channels > 0, "stage {} has no channels", i + 1);
        }
        ensure_config!(
            self.stages[0].divisor == 8,
            "the first stage divisor must be 8 (stem output)"
        );
        for w in self.stages.windows(2) {
            crate::blocks::transition_stride(w[0].divisor, w[1].divisor)?;
        }
        ensure_config!(
            self.ffn_ratio > 0 && self.se_ratio > 0 && self.head_dim > 0 && self.key_dim > 0 && self.group_width > 0,
            "ratios and dims must be positive"
        );
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                continue;
            }
            match s.mixer {
                MixerKind::Ls => {
                    self.ls_config(s.channels)
                        .map_err(|e| config_err!("stage {}: {e}", i + 1))?;
                }
                MixerKind::Msa => {
                    crate::blocks::Attention::new(s.channels, self.head_dim, self.key_dim)
                        .map_err(|e| config_err!("stage {}: {e}", i + 1))?;
                }
            }
        }
        Ok(())
    }

    /// LS conv hyperparameters for a stage of `channels`.
    pub fn ls_config(&self, channels: usize) -> Result<crate::lsconv::LsConvConfig> {
        let cfg = crate::lsconv::LsConvConfig {
            channels,
            large_kernel: self.large_kernel,
            small_kernel: self.small_kernel,
            groups: (channels / self.group_width).max(1),
            lkp_dw: self.lkp_dw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; [`ModelSpec::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let col = |f: fn(&StageSpec) -> usize| list(&self.stages.iter().map(f).collect::<Vec<_>>());
        let mixers = self.stages.iter().map(|s| s.mixer.name()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("format", FORMAT_TAG.into());
        kv("name", self.name.clone());
        kv("in_channels", self.in_channels.to_string());
        kv("stem", list(&self.stem));
        kv("channels", col(|s| s.channels));
        kv("blocks", col(|s| s.blocks));
        kv("mixers", mixers);
        kv("divisors", col(|s| s.divisor));
        kv("classes", self.classes.to_string());
        kv("large_kernel", self.large_kernel.to_string());
        kv("small_kernel", self.small_kernel.to_string());
        kv("group_width", self.group_width.to_string());
        kv("ffn_ratio", self.ffn_ratio.to_string());
        kv("se_ratio", self.se_ratio.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("key_dim", self.key_dim.to_string());
        kv("lkp_dw", self.lkp_dw.to_string());
        kv("dw", self.dw.to_string());
        kv("se", self.se.to_string());
        kv("wiring", self.wiring.name().into());
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(Error::Format(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            pairs.push((k, v));
        }
        match pairs.first() {
            Some((k, v)) if k == "format" && v == FORMAT_TAG => {}
            _ => return Err(Error::Format(format!("spec must start with `format = {FORMAT_TAG}`"))),
        }
        let get = |k: &str| pairs.iter().find(|(p, _)| p == k).map(|(_, v)| v.as_str());
        let required = |k: &str| get(k).ok_or_else(|| Error::Format(format!("missing key `{k}`")));
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Format(format!("`{k}`: `{v}` is not a non-negative integer")))
        };
        fn arr<const N: usize, X>(k: &str, v: &str, f: impl Fn(&str) -> Result<X>) -> Result<[X; N]> {
            let items = v.split(',').map(|s| f(s.trim())).collect::<Result<Vec<X>>>()?;
            items
                .try_into()
                .map_err(|_| Error::Format(format!("`{k}` needs {N} comma-separated values")))
        }
        let bool_of = |k: &str, v: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Format(format!("`{k}`: `{v}` is not true/false")))
        };
        let stem = arr::<3, usize>("stem", required("stem")?, |s| num("stem", s))?;
        let channels = arr::<4, usize>("channels", required("channels")?, |s| num("channels", s))?;
        let blocks = arr::<4, usize>("blocks", required("blocks")?, |s| num("blocks", s))?;
        let divisors = match get("divisors") {
            Some(v) => arr::<4, usize>("divisors", v, |s| num("divisors", s))?,
            None => STANDARD_DIVISORS,
        };
        let mut st = stages(channels, blocks, divisors);
        if let Some(v) = get("mixers") {
            let m = arr::<4, MixerKind>("mixers", v, MixerKind::from_str)?;
            for (s, m) in st.iter_mut().zip(m) {
                s.mixer = m;
            }
        }
        let classes = num("classes", required("classes")?)?;
        let mut spec = ModelSpec::default_for(get("name").unwrap_or("custom"), stem, st, classes);
        for (k, v) in &pairs {
            match k.as_str() {
                "format" | "name" | "stem" | "channels" | "blocks" | "divisors" | "mixers" | "classes" => {}
                "in_channels" => spec.in_channels = num(k, v)?,
                "large_kernel" => spec.large_kernel = num(k, v)?,
                "small_kernel" => spec.small_kernel = num(k, v)?,
                "group_width" => spec.group_width = num(k, v)?,
                "ffn_ratio" => spec.ffn_ratio = num(k, v)?,
                "se_ratio" => spec.se_ratio = num(k, v)?,
                "head_dim" => spec.head_dim = num(k, v)?,
                "key_dim" => spec.key_dim = num(k, v)?,
                "lkp_dw" => spec.lkp_dw = bool_of(k, v)?,
                "dw" => spec.dw = bool_of(k, v)?,
                "se" => spec.se = bool_of(k, v)?,
                "wiring" => spec.wiring = v.parse()?,
                other => return Err(Error::Format(format!("unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for name in ["t", "s", "b", "micro", "tiny"] {
            let s = ModelSpec::builtin(name).unwrap();
            s.validate().unwrap();
            assert_eq!(ModelSpec::parse(&s.to_text()).unwrap(), s);
        }
        assert!(ModelSpec::builtin("xl").is_err());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ModelSpec::parse("name = x\n"), Err(Error::Format(_))));
        let base = ModelSpec::micro().to_text();
        assert!(ModelSpec::parse(&format!("{base}bogus = 1\n")).is_err());
        assert!(ModelSpec::parse(&base.replace("blocks = 0,1,2,2", "blocks = 0,1,2")).is_err());
        assert!(ModelSpec::parse(&format!("{base}name = again\n")).is_err());
        assert!(matches!(
            ModelSpec::parse(&base.replace("mixers = ls,ls,ls,msa", "mixers = ls,ls,msa,msa")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let text =
            "format = lsnet-spec/1\nstem = 8,16,32\nchannels = 32,64,96,128\nblocks = 0,1,2,2\nclasses = 10 # ten\n";
        let s = ModelSpec::parse(text).unwrap();
        assert_eq!(s.large_kernel, 7);
        assert_eq!(s.stages[3].divisor, 64);
        assert_eq!(s.name, "custom");
    }

    #[test]
    fn digest_tracks_content() {
        let a = ModelSpec::micro();
        let mut b = a.clone();
        b.lkp_dw = false;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest_hex().len(), 64);
    }
}
