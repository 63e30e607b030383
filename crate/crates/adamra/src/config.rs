//! Flat key/value config files with dotted keys, plus exact rational rates.
//!
//! The on-disk format is one `key = value` pair per line:
//!
//! ```text
//! # comment
//! adamra.heads = 4
//! adamra.c = 1/4, 1/8, 1/16, 1/32
//! train.lr = 2e-3
//! ```
//!
//! Values are untyped strings until a caller asks for them with a typed
//! getter. [`ConfigMap`] remembers which keys were consumed so that a final
//! [`ConfigMap::finish`] call can reject typos: any key nobody asked for is
//! an error, not a silent no-op.

use crate::error::{Error, Result};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Exact rational in `(0, 1]`, used for compression rates.
///
/// Rates stay as integer pairs so that landmark counts are computed with
/// integer arithmetic only — `1/3` must mean one third, not `0.333...`,
/// or segment counts drift at large `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rate {
    num: u32,
    den: u32,
}

impl Rate {
    pub const ONE: Rate = Rate { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Rate> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidConfig(format!(
                "rate {}/{} is outside (0, 1]",
                num, den
            )));
        }
        Ok(Rate { num, den })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Number of landmarks for a sequence of length `n`: `max(1, round(n·c))`,
    /// computed exactly (round half up) in integer arithmetic.
    pub fn landmarks(&self, n: usize) -> usize {
        let num = self.num as u64;
        let den = self.den as u64;
        let rounded = (2 * n as u64 * num + den) / (2 * den);
        (rounded as usize).max(1)
    }
}

impl FromStr for Rate {
    type Err = Error;

    /// Accepts `"1"`, `"1/2"`, `"3/8"`. Decimals are rejected on purpose.
    fn from_str(s: &str) -> Result<Rate> {
        let bad = |_| Error::InvalidConfig(format!("cannot parse rate {:?} (use p/q or 1)", s));
        match s.split_once('/') {
            None => Rate::new(s.trim().parse().map_err(bad)?, 1),
            Some((p, q)) => Rate::new(
                p.trim().parse().map_err(bad)?,
                q.trim().parse().map_err(bad)?,
            ),
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize, // 0 for command-line overrides
    used: bool,
}

/// Parsed key/value pairs from a config file and `--set` overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: Vec<Entry>,
}

impl ConfigMap {
    pub fn empty() -> ConfigMap {
        ConfigMap::default()
    }

    pub fn from_file(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<ConfigMap> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(Error::Parse {
                line,
                msg: format!("expected `key = value`, got {:?}", stripped),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
                used: false,
            });
        }
        Ok(ConfigMap { entries })
    }

    /// Applies a `key=value` override; later entries shadow earlier ones.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override {:?} is not of the form key=value", spec))
        })?;
        if key.trim().is_empty() {
            return Err(Error::InvalidConfig(format!("override {:?} has an empty key", spec)));
        }
        self.entries.push(Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: 0,
            used: false,
        });
        Ok(())
    }

    /// Raw string lookup. The last occurrence of a key wins; every occurrence
    /// is marked as consumed so shadowed duplicates do not trip `finish`.
    pub fn get_str(&mut self, key: &str) -> Option<String> {
        let mut found = None;
        for e in self.entries.iter_mut() {
            if e.key == key {
                e.used = true;
                found = Some(e.value.clone());
            }
        }
        found
    }

    /// Typed lookup with a default for absent keys.
    pub fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| {
                Error::InvalidConfig(format!("key `{}`: cannot parse {:?}: {}", key, v, e))
            }),
        }
    }

    /// Boolean keys accept `on/off`, `true/false`, `1/0`, `yes/no`.
    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "on" | "true" | "1" | "yes" => Ok(true),
                "off" | "false" | "0" | "no" => Ok(false),
                other => Err(Error::InvalidConfig(format!(
                    "key `{}`: expected on/off, got {:?}",
                    key, other
                ))),
            },
        }
    }

    /// Comma-separated list of `T`.
    pub fn get_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e| {
                        Error::InvalidConfig(format!(
                            "key `{}`: cannot parse element {:?}: {}",
                            key,
                            item.trim(),
                            e
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Errors on the first key that no getter ever consumed.
    pub fn finish(&self) -> Result<()> {
        for e in &self.entries {
            if !e.used {
                return Err(Error::UnknownKey(if e.line > 0 {
                    format!("{} (line {})", e.key, e.line)
                } else {
                    e.key.clone()
                }));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_parses_integers_and_fractions() {
        assert_eq!("1".parse::<Rate>().unwrap(), Rate::ONE);
        assert_eq!("1/2".parse::<Rate>().unwrap(), Rate::new(1, 2).unwrap());
        assert_eq!(" 3 / 8 ".trim().parse::<Rate>().unwrap(), Rate::new(3, 8).unwrap());
        assert!("0".parse::<Rate>().is_err());
        assert!("2/1".parse::<Rate>().is_err()); // > 1
        assert!("1/0".parse::<Rate>().is_err());
        assert!("0.5".parse::<Rate>().is_err()); // decimals rejected
        assert!("a/b".parse::<Rate>().is_err());
    }

    #[test]
    fn rate_display_roundtrips() {
        for s in ["1", "1/2", "7/16"] {
            assert_eq!(s.parse::<Rate>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn landmarks_round_half_up_exactly() {
        let third = Rate::new(1, 3).unwrap();
        // n/3 for n = 1..8: 0.33→1(floor clamp), 0.67→1, 1→1, 1.33→1, 1.67→2, 2→2, 2.33→2, 2.67→3
        let want = [1, 1, 1, 1, 2, 2, 2, 3];
        for (n, &w) in (1..=8).zip(&want) {
            assert_eq!(third.landmarks(n), w, "n={}", n);
        }
        // ties round up: 1/2 at odd n
        let half = Rate::new(1, 2).unwrap();
        assert_eq!(half.landmarks(3), 2);
        assert_eq!(half.landmarks(5), 3);
        // full rate is the identity
        assert_eq!(Rate::ONE.landmarks(1000), 1000);
        // tiny rates clamp to one landmark
        assert_eq!(Rate::new(1, 32).unwrap().landmarks(8), 1);
    }

    #[test]
    fn landmarks_never_exceed_n() {
        for num in 1..=8u32 {
            for den in num..=8u32 {
                let r = Rate::new(num, den).unwrap();
                for n in 1..=64 {
                    let m = r.landmarks(n);
                    assert!(m >= 1 && m <= n, "c={} n={} m={}", r, n, m);
                }
            }
        }
    }

    #[test]
    fn config_map_parses_comments_and_pairs() {
        let text = "\n# heading\nadamra.heads = 4  # trailing\n\nadamra.c = 1/2, 1/4\n";
        let mut cfg = ConfigMap::from_str_contents(text).unwrap();
        assert_eq!(cfg.get::<usize>("adamra.heads", 0).unwrap(), 4);
        let rates = cfg.get_list::<Rate>("adamra.c", vec![]).unwrap();
        assert_eq!(rates, vec![Rate::new(1, 2).unwrap(), Rate::new(1, 4).unwrap()]);
        cfg.finish().unwrap();
    }

    #[test]
    fn config_map_rejects_malformed_lines() {
        let err = ConfigMap::from_str_contents("just words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{}", err);
    }

    #[test]
    fn unknown_keys_are_rejected_by_finish() {
        let mut cfg = ConfigMap::from_str_contents("adamra.heds = 4\n").unwrap();
        assert_eq!(cfg.get::<usize>("adamra.heads", 3).unwrap(), 3); // default: typo not seen
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("adamra.heds"), "{}", err);
        assert!(err.to_string().contains("line 1"), "{}", err);
    }

    #[test]
    fn overrides_shadow_file_values() {
        let mut cfg = ConfigMap::from_str_contents("train.lr = 1e-3\n").unwrap();
        cfg.apply_override("train.lr=5e-4").unwrap();
        assert_eq!(cfg.get::<f64>("train.lr", 0.0).unwrap(), 5e-4);
        cfg.finish().unwrap(); // both occurrences count as consumed
        assert!(cfg.apply_override("no-equals-sign").is_err());
        assert!(cfg.apply_override("=5").is_err());
    }

    #[test]
    fn typed_getter_reports_key_on_parse_failure() {
        let mut cfg = ConfigMap::from_str_contents("train.steps = many\n").unwrap();
        let err = cfg.get::<usize>("train.steps", 1).unwrap_err();
        assert!(err.to_string().contains("train.steps"), "{}", err);
    }

    #[test]
    fn bool_spellings() {
        let mut cfg =
            ConfigMap::from_str_contents("a = on\nb = false\nc = 1\nd = maybe\n").unwrap();
        assert!(cfg.get_bool("a", false).unwrap());
        assert!(!cfg.get_bool("b", true).unwrap());
        assert!(cfg.get_bool("c", false).unwrap());
        assert!(cfg.get_bool("d", false).is_err());
        assert!(cfg.get_bool("absent", true).unwrap());
    }
}
