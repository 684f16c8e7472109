//! Configuration: a flat `key = value` file, command-line flags and
//! `--set key=value` overrides, validated against a per-subcommand schema.
//! Precedence: command line > config file > defaults.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const GLOBAL_KEYS: &[&str] = &["seed", "out", "jobs", "config"];

fn schema(subcommand: &str) -> Option<&'static [&'static str]> {
    match subcommand {
        "gen-data" => Some(&["n", "horizon", "n-obs-min", "n-obs-max", "binary"]),
        "train" => Some(&[
            "data",
            "members",
            "arch",
            "m-h",
            "layers",
            "n-obs-max",
            "preset",
            "lr",
            "epochs",
            "batch",
            "weight-decay",
        ]),
        "eval-open" => Some(&["data", "models"]),
        "simulate" => Some(&[
            "episodes", "duration", "preset", "planner", "models", "svg",
        ]),
        "bench" => Some(&["n", "horizon", "n-obs", "models", "max-nodes"]),
        "selftest" => Some(&[]),
        _ => None,
    }
}

#[derive(Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(subcommand: &str, args: &[String]) -> Result<Self, ConfigError> {
        let Some(keys) = schema(subcommand) else {
            return Err(ConfigError(format!("unknown subcommand `{subcommand}`")));
        };
        let validate_key = |k: &str| -> Result<(), ConfigError> {
            if GLOBAL_KEYS.contains(&k) || keys.contains(&k) {
                Ok(())
            } else {
                Err(ConfigError(format!(
                    "unknown key `{k}` for `{subcommand}`"
                )))
            }
        };

        // command-line pass
        let mut cli: BTreeMap<String, String> = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(stripped) = arg.strip_prefix("--") else {
                return Err(ConfigError(format!("unexpected argument `{arg}`")));
            };
            let (key, value) = if stripped == "set" {
                let kv = args
                    .get(i + 1)
                    .ok_or_else(|| ConfigError("--set needs key=value".into()))?;
                i += 2;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| ConfigError(format!("bad --set `{kv}`")))?;
                (k.to_string(), v.to_string())
            } else if let Some((k, v)) = stripped.split_once('=') {
                i += 1;
                (k.to_string(), v.to_string())
            } else {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| ConfigError(format!("flag --{stripped} needs a value")))?;
                i += 2;
                (stripped.to_string(), v.clone())
            };
            validate_key(&key)?;
            cli.insert(key, value);
        }

        // config file underneath
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = cli.get("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {path}: {e}")))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    ConfigError(format!("{path}:{}: expected key = value", lineno + 1))
                })?;
                let key = k.trim().to_string();
                validate_key(&key)?;
                values.insert(key, v.trim().to_string());
            }
        }
        values.extend(cli);
        Ok(Self { values })
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.values.get(key).cloned()
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get_str(key).unwrap_or_else(|| default.to_string())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("`{key}` expects an integer, got `{v}`"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> usize {
        self.get_usize(key).ok().flatten().unwrap_or(default)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("`{key}` expects a number, got `{v}`"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> f64 {
        self.get_f64(key).ok().flatten().unwrap_or(default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> u64 {
        self.values
            .get(key)
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> bool {
        self.values
            .get(key)
            .map(|v| v == "1" || v == "true" || v == "yes")
            .unwrap_or(default)
    }

    pub fn jobs(&self) -> usize {
        self.usize_or(
            "jobs",
            std::thread::available_parallelism().map_or(1, |n| n.get()),
        )
    }
}
