use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Transformer,
    Lstm,
    TransfoRnn,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Transformer => "transformer",
            Family::Lstm => "lstm",
            Family::TransfoRnn => "transfornn",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Family::Transformer),
            "lstm" => Ok(Family::Lstm),
            "transfornn" => Ok(Family::TransfoRnn),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

/// How perplexity is measured: every position of non-overlapping windows,
/// or only the last position of a window sliding one token at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    All,
    Final,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::All => "all",
            InferenceMode::Final => "final",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(InferenceMode::All),
            "final" => Ok(InferenceMode::Final),
            other => Err(Error::Config(format!("unknown inference mode {other:?}"))),
        }
    }
}

/// Full architectural description of a model. Parameter shapes, counts and
/// checkpoint metadata are all derived from this.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub family: Family,
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub m_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub use_pos: bool,
    pub tied: bool,
    /// Multiply raw embeddings by `sqrt(d)` before adding positions.
    pub scale_embed: bool,
    pub lstm_hidden: usize,
    pub inference_mode: InferenceMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn transformer(vocab_size: usize, d: usize, n_layers: usize) -> Self {
        Self {
            family: Family::Transformer,
            vocab_size,
            d,
            n_layers,
            m_layers: 0,
            heads: 8,
            d_ff: 1024,
            use_pos: true,
            tied: true,
            scale_embed: true,
            lstm_hidden: d,
            inference_mode: InferenceMode::Final,
            seed: 1,
        }
    }

    pub fn lstm(vocab_size: usize, d: usize, m_layers: usize) -> Self {
        Self {
            family: Family::Lstm,
            n_layers: 0,
            m_layers,
            use_pos: false,
            scale_embed: false,
            inference_mode: InferenceMode::All,
            ..Self::transformer(vocab_size, d, 0)
        }
    }

    pub fn transfornn(vocab_size: usize, d: usize, n_layers: usize, m_layers: usize) -> Self {
        Self {
            family: Family::TransfoRnn,
            n_layers,
            m_layers,
            inference_mode: InferenceMode::All,
            ..Self::transformer(vocab_size, d, n_layers)
        }
    }

    /// Defaults for `family` with the given depths.
    pub fn for_family(family: Family, vocab_size: usize, d: usize, n: usize, m: usize) -> Self {
        match family {
            Family::Transformer => Self::transformer(vocab_size, d, n),
            Family::Lstm => Self::lstm(vocab_size, d, m),
            Family::TransfoRnn => Self::transfornn(vocab_size, d, n, m),
        }
    }

    /// Width of the representation fed to the output projection.
    pub fn output_dim(&self) -> usize {
        if self.m_layers > 0 {
            self.lstm_hidden
        } else {
            self.d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d == 0 {
            return bad("vocab_size and d must be positive".into());
        }
        match self.family {
            Family::Transformer if self.m_layers != 0 || self.n_layers == 0 => {
                return bad("transformer family needs n_layers >= 1 and m_layers = 0".into())
            }
            Family::Lstm if self.n_layers != 0 || self.m_layers == 0 => {
                return bad("lstm family needs n_layers = 0 and m_layers >= 1".into())
            }
            Family::TransfoRnn if self.n_layers == 0 || self.m_layers == 0 => {
                return bad("transfornn family needs n_layers >= 1 and m_layers >= 1".into())
            }
            _ => {}
        }
        if self.n_layers > 0 {
            if self.heads == 0 || self.d % self.heads != 0 {
                return bad(format!(
                    "d = {} is not divisible by heads = {}",
                    self.d, self.heads
                ));
            }
            if self.d_ff == 0 {
                return bad("d_ff must be positive".into());
            }
        }
        if self.m_layers > 0 && self.lstm_hidden == 0 {
            return bad("lstm_hidden must be positive".into());
        }
        if self.tied && self.output_dim() != self.d {
            return bad(format!(
                "tied output needs the final width ({}) to equal d ({})",
                self.output_dim(),
                self.d
            ));
        }
        Ok(())
    }

    /// Exact number of trainable scalars, from the closed-form layer sizes.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, h) = (self.vocab_size, self.d, self.d_ff, self.lstm_hidden);
        let embedding = v * d;
        let attention = 4 * d * d + 4 * d;
        let feed_forward = d * f + f + f * d + d;
        let norms = 4 * d;
        let transformer = self.n_layers * (attention + feed_forward + norms);
        let lstm: usize = (0..self.m_layers)
            .map(|l| {
                let d_in = if l == 0 { d } else { h };
                4 * h * (d_in + h) + 4 * h
            })
            .sum();
        let output = if self.tied { 0 } else { self.output_dim() * v };
        embedding + transformer + lstm + output
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn fields(&self) -> Vec<(String, String)> {
        [
            ("family", self.family.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("d", self.d.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("m_layers", self.m_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("use_pos", self.use_pos.to_string()),
            ("tied", self.tied.to_string()),
            ("scale_embed", self.scale_embed.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("inference_mode", self.inference_mode.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Parses the output of [`ModelConfig::to_kv`]. Every key must be
    /// present exactly once; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::transformer(1, 1, 1);
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fmt_err = |msg: String| Error::Format { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(fmt_err(format!("duplicate key {k}")));
            }
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| fmt_err(format!("{k}: {e}")))
            };
            let flag = |v: &str| v.parse::<bool>().map_err(|e| fmt_err(format!("{k}: {e}")));
            match k {
                "family" => cfg.family = v.parse()?,
                "vocab_size" => cfg.vocab_size = num(v)?,
                "d" => cfg.d = num(v)?,
                "n_layers" => cfg.n_layers = num(v)?,
                "m_layers" => cfg.m_layers = num(v)?,
                "heads" => cfg.heads = num(v)?,
                "d_ff" => cfg.d_ff = num(v)?,
                "use_pos" => cfg.use_pos = flag(v)?,
                "tied" => cfg.tied = flag(v)?,
                "scale_embed" => cfg.scale_embed = flag(v)?,
                "lstm_hidden" => cfg.lstm_hidden = num(v)?,
                "inference_mode" => cfg.inference_mode = v.parse()?,
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|e| fmt_err(format!("seed: {e}")))?
                }
                other => return Err(fmt_err(format!("unknown key {other}"))),
            }
        }
        let expected = cfg.fields();
        if let Some((missing, _)) = expected.iter().find(|(k, _)| !seen.contains(k)) {
            return Err(Error::Config(format!("missing key {missing}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_constraints() {
        assert!(ModelConfig::transformer(10, 8, 1).validate().is_ok());
        let mut c = ModelConfig::transformer(10, 8, 1);
        c.m_layers = 1;
        assert!(c.validate().is_err());
        assert!(ModelConfig::lstm(10, 8, 0).validate().is_err());
        assert!(ModelConfig::transfornn(10, 8, 0, 2).validate().is_err());
        assert!(ModelConfig::transfornn(10, 8, 1, 0).validate().is_err());
    }

    #[test]
    fn heads_divide_width() {
        let mut c = ModelConfig::transformer(10, 12, 1);
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn tied_requires_matching_width() {
        let mut c = ModelConfig::transfornn(10, 8, 1, 1);
        c.heads = 2;
        c.lstm_hidden = 6;
        assert!(c.validate().is_err());
        c.tied = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::transfornn(33, 16, 2, 3);
        c.tied = false;
        c.seed = 77;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn kv_rejects_unknown_and_missing() {
        let c = ModelConfig::transformer(10, 8, 1);
        let mut text = c.to_kv();
        text.push_str("dropout=0.1\n");
        assert!(ModelConfig::from_kv(&text).is_err());
        let partial: String = c.to_kv().lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(ModelConfig::from_kv(&partial).is_err());
    }

    #[test]
    fn untied_adds_exactly_one_projection() {
        let mut c = ModelConfig::transfornn(1000, 64, 2, 2);
        let tied = c.parameter_count();
        c.tied = false;
        assert_eq!(c.parameter_count(), tied + 1000 * 64);
    }
}
