//! Student hyperparameters and variant switches, persisted as `key = value` text.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$var => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} value {s:?}", stringify!($name)
                    ))),
                }
            }
        }
    };
}

choice!(
    /// How the already-decoded digits enter head `t`.
    PrefixMode { Concat => "concat", Sum => "sum", None => "none" }
);
choice!(HeadMode { PerDigit => "per_digit", Shared => "shared" });
choice!(
    /// `HiddenState` feeds head `t` the previous head's hidden layer and
    /// the newest digit instead of `z` and the whole prefix.
    Cascade { Off => "off", HiddenState => "hidden_state" }
);
choice!(ContextMode { Mha => "mha", LinearMeanpool => "linear_meanpool" });
choice!(Switch { On => "on", Off => "off" });
choice!(
    /// `PerDigit` re-reads the encoder states at every digit with a
    /// prefix-shifted query.
    Readout { Once => "once", PerDigit => "per_digit" }
);
choice!(Embeddings { FrozenTeacher => "frozen_teacher", Trainable => "trainable" });
choice!(
    /// `FullVocab` emits logits over the whole token vocabulary (`L*C + 2`)
    /// and reads digit `t` from its slice.
    LogitSupport { Digit => "digit", FullVocab => "full_vocab" }
);
choice!(Activation { Relu => "relu", Gelu => "gelu" });

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub head_hidden: usize,
    pub attn_heads: usize,
    pub attn_inner: usize,
    pub prefix_mode: PrefixMode,
    pub head_mode: HeadMode,
    pub cascade: Cascade,
    pub context_mode: ContextMode,
    pub context_ffn: Switch,
    pub context_readout: Readout,
    pub embeddings: Embeddings,
    pub logit_support: LogitSupport,
    pub activation: Activation,
    pub dropout: f64,
    pub l: usize,
    pub c: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub seed: u64,
}

impl StudentConfig {
    /// Default architecture for a catalog of depth `l`, codebook `c` and
    /// teacher widths `d_h`, `d_e`.
    pub fn new(l: usize, c: usize, d_h: usize, d_e: usize) -> Self {
        StudentConfig {
            head_hidden: 512,
            attn_heads: 4,
            attn_inner: 256,
            prefix_mode: PrefixMode::Concat,
            head_mode: HeadMode::PerDigit,
            cascade: Cascade::Off,
            context_mode: ContextMode::Mha,
            context_ffn: Switch::On,
            context_readout: Readout::Once,
            embeddings: Embeddings::FrozenTeacher,
            logit_support: LogitSupport::Digit,
            activation: Activation::Relu,
            dropout: 0.1,
            l,
            c,
            d_h,
            d_e,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.l == 0 || self.c == 0 || self.d_h == 0 || self.d_e == 0 {
            return bad("L, C, d_h and d_e must be positive".into());
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be positive".into());
        }
        if self.context_mode == ContextMode::Mha {
            if self.attn_heads == 0 || self.attn_inner == 0 {
                return bad("attention needs at least one head and a positive inner dim".into());
            }
            if self.attn_inner % self.attn_heads != 0 {
                return bad(format!(
                    "attn_inner {} not divisible by attn_heads {}",
                    self.attn_inner, self.attn_heads
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.head_mode == HeadMode::Shared && self.prefix_mode == PrefixMode::Concat {
            return bad("a shared head needs a fixed input width: use prefix_mode sum or none".into());
        }
        if self.cascade == Cascade::HiddenState && self.head_mode == HeadMode::Shared {
            return bad("cascade needs per-digit heads".into());
        }
        if self.context_readout == Readout::PerDigit && self.context_mode != ContextMode::Mha {
            return bad("per-digit readout needs the attention context".into());
        }
        Ok(())
    }

    /// Width of the head output layer.
    pub fn output_width(&self) -> usize {
        match self.logit_support {
            LogitSupport::Digit => self.c,
            LogitSupport::FullVocab => self.l * self.c + 2,
        }
    }

    /// Column of digit 0 for step `t` (0-based).
    pub fn logit_offset(&self, t: usize) -> usize {
        match self.logit_support {
            LogitSupport::Digit => 0,
            LogitSupport::FullVocab => t * self.c,
        }
    }

    /// Input width of head `t` (0-based).
    pub fn head_input_dim(&self, t: usize) -> usize {
        if self.cascade == Cascade::HiddenState && t > 0 {
            return self.head_hidden + self.d_e;
        }
        match (self.prefix_mode, self.head_mode) {
            (PrefixMode::None, _) => self.d_h,
            (PrefixMode::Concat, _) => self.d_h + t * self.d_e,
            (PrefixMode::Sum, HeadMode::Shared) => self.d_h + self.d_e,
            (PrefixMode::Sum, HeadMode::PerDigit) if t == 0 => self.d_h,
            (PrefixMode::Sum, HeadMode::PerDigit) => self.d_h + self.d_e,
        }
    }

    pub fn head_count(&self) -> usize {
        match self.head_mode {
            HeadMode::PerDigit => self.l,
            HeadMode::Shared => 1,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("head_hidden", self.head_hidden.to_string()),
            ("attn_heads", self.attn_heads.to_string()),
            ("attn_inner", self.attn_inner.to_string()),
            ("prefix_mode", self.prefix_mode.to_string()),
            ("head_mode", self.head_mode.to_string()),
            ("cascade", self.cascade.to_string()),
            ("context_mode", self.context_mode.to_string()),
            ("context_ffn", self.context_ffn.to_string()),
            ("context_readout", self.context_readout.to_string()),
            ("embeddings", self.embeddings.to_string()),
            ("logit_support", self.logit_support.to_string()),
            ("activation", self.activation.to_string()),
            ("dropout", self.dropout.to_string()),
            ("l", self.l.to_string()),
            ("c", self.c.to_string()),
            ("d_h", self.d_h.to_string()),
            ("d_e", self.d_e.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "head_hidden" => self.head_hidden = num(key, value)?,
            "attn_heads" => self.attn_heads = num(key, value)?,
            "attn_inner" => self.attn_inner = num(key, value)?,
            "prefix_mode" => self.prefix_mode = value.parse()?,
            "head_mode" => self.head_mode = value.parse()?,
            "cascade" => self.cascade = value.parse()?,
            "context_mode" => self.context_mode = value.parse()?,
            "context_ffn" => self.context_ffn = value.parse()?,
            "context_readout" => self.context_readout = value.parse()?,
            "embeddings" => self.embeddings = value.parse()?,
            "logit_support" => self.logit_support = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "dropout" => self.dropout = num(key, value)?,
            "l" => self.l = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown student key {key:?}"))),
        }
        Ok(())
    }

    /// Parses text written by [`to_kv`](Self::to_kv). Every key must be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = StudentConfig::new(1, 1, 1, 1);
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            cfg.set(k, v.trim())?;
            seen.push(k.to_string());
        }
        for (k, _) in cfg.pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("missing student key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
