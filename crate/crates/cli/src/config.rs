//! Flat `key = value` run configuration with `--key value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use osr_core::meta::report::ConfigEcho;
use osr_core::{Arch, EvalConfig, Lambdas, SynthConfig, TrainConfig};

use crate::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "", "dataset root holding train/ and test/ manifests; empty = synthetic data from this config"),
    ("gen_out", "data", "gen-data output directory"),
    ("checkpoint", "out/model.ckpt", "checkpoint path"),
    ("report_dir", "out", "directory for CSV/JSON reports"),
    ("seed", "0", "master seed for every random stream"),
    ("n_classes", "6", "synthetic classes"),
    ("per_class_train", "100", "synthetic training images per class"),
    ("per_class_test", "50", "synthetic test images per class"),
    ("image_size", "32", "synthetic image side"),
    ("speckle_looks", "2", "gamma speckle shape (looks)"),
    ("difficulty", "0.8", "synthetic class separation in [0,1]"),
    ("input_size", "32", "network input side; loaded images are resized to it"),
    ("conv_channels", "16,32,64,64", "output channels per conv block"),
    ("kernel_size", "3", "conv kernel side (odd)"),
    ("disc_input", "distances", "discriminator input: distances | embedding"),
    ("scalar", "f64", "floating-point width: f32 | f64"),
    ("episodes", "2000", "meta-training episodes"),
    ("n_closed", "4", "known classes per episode"),
    ("n_support", "10", "support images per known class"),
    ("n_query", "10", "query images per known class"),
    ("n_open", "10", "open-set images per episode"),
    ("open_sampling", "pooled", "open-sample draw: pooled | balanced"),
    ("lambda1", "0.5", "meta cross-entropy weight"),
    ("lambda2", "0.25", "entropy-distancing weight"),
    ("lambda3", "0.25", "open-set BCE weight"),
    ("lr0", "0.01", "initial SGD learning rate"),
    ("lr_halving_period", "1000", "episodes per learning-rate halving"),
    ("tau", "0.1", "distance temperature"),
    ("mode", "features", "class-probability mode: features | logits"),
    ("n_evaluations", "4", "meta-test partitions averaged"),
    ("threshold", "0.5", "accept as known iff score < threshold"),
    ("rule", "discriminator", "rejection rule: discriminator | entropy"),
    ("support_per_class", "0", "meta-test support images per known class; 0 = all"),
    ("sweep_steps", "20", "sweep grid is i/steps for i = 0..=steps"),
    ("eval_index", "0", "meta-test partition used by dump-features"),
    ("chunk", "64", "images per evaluation forward pass"),
    ("selftest_entries", "48", "self-test entries checked per tensor"),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &str) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {path}: {e}")))?;
        self.parse_text(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.replace('-', "_");
        if !known(&key) {
            return Err(format!("unknown key `{key}`"));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = `{raw}`: {e}")))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Every resolved key, for report headers.
    pub fn echo(&self, command: &str) -> ConfigEcho {
        let mut echo: ConfigEcho = self.values.clone();
        echo.insert("command".into(), command.into());
        echo
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parsed("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            n_classes: self.parsed("n_classes")?,
            per_class_train: self.parsed("per_class_train")?,
            per_class_test: self.parsed("per_class_test")?,
            image_size: self.parsed("image_size")?,
            speckle_looks: self.parsed("speckle_looks")?,
            difficulty: self.parsed("difficulty")?,
            seed: self.seed()?,
        })
    }

    pub fn arch(&self) -> Result<Arch, CliError> {
        let channels = self
            .get("conv_channels")
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("conv_channels: {e}")))?;
        let arch = Arch {
            input_size: self.parsed("input_size")?,
            conv_channels: channels,
            kernel_size: self.parsed("kernel_size")?,
            disc_input: self.parsed("disc_input")?,
            n_closed: self.parsed("n_closed")?,
        };
        arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(arch)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            episodes: self.parsed("episodes")?,
            n_closed: self.parsed("n_closed")?,
            n_support: self.parsed("n_support")?,
            n_query: self.parsed("n_query")?,
            n_open: self.parsed("n_open")?,
            lambdas: Lambdas::new(self.parsed("lambda1")?, self.parsed("lambda2")?, self.parsed("lambda3")?),
            lr0: self.parsed("lr0")?,
            lr_halving_period: self.parsed("lr_halving_period")?,
            tau: self.parsed("tau")?,
            mode: self.parsed("mode")?,
            open_sampling: self.parsed("open_sampling")?,
            seed: self.seed()?,
            scalar: self.parsed("scalar")?,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig, CliError> {
        let support: usize = self.parsed("support_per_class")?;
        let cfg = EvalConfig {
            n_evaluations: self.parsed("n_evaluations")?,
            threshold: self.parsed("threshold")?,
            rule: self.parsed("rule")?,
            support_per_class: (support > 0).then_some(support),
            chunk: self.parsed("chunk")?,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn sweep_grid(&self) -> Result<Vec<f64>, CliError> {
        let steps: usize = self.parsed("sweep_steps")?;
        if steps == 0 {
            return Err(CliError::Config("sweep_steps must be positive".into()));
        }
        Ok((0..=steps).map(|i| i as f64 / steps as f64).collect())
    }
}
