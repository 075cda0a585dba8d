//! Run configuration: model dimensions, prompt-kernel settings, loss
//! weights, optimizer schedule, module toggles and the evaluation protocol.
//!
//! Config files are flat `key = value` text; CLI flags override file values
//! through the same [`RunConfig::set`] path.

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Protocol {
    Lodo,
    Adaptability,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Gaussian kernel radius r; window is (2r+1) x (2r+1).
    pub kernel_radius: usize,
    /// Gaussian sigma. Defaults to r/3 so the window holds ~99.7% of the mass.
    pub sigma: f64,
    /// Number of heterogeneous adapter spaces N.
    pub n_spaces: usize,
    /// Encoder token channels d.
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Frozen FFN hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Prompt/decoder channels c_p; must equal `dim` (the fuse step adds
    /// image embeddings and semantic prompts elementwise).
    pub prompt_dim: usize,
    /// Prediction categories C.
    pub categories: usize,
    /// Dice-loss weight.
    pub alpha: f64,
    /// Focal-loss weight.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Dice smoothing term.
    pub dice_eps: f64,
    /// Mask binarization threshold.
    pub tau: f64,
    pub lr: f64,
    /// Per-epoch exponential decay factor.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Square image side; must be divisible by the 16x16 patch side.
    pub size: usize,
    /// Synthetic images generated per domain.
    pub images_per_domain: usize,
    /// Module toggles (ablation grid).
    pub hs_adapter: bool,
    pub gkp_encoder: bool,
    pub tsm_decoder: bool,
    /// Learned projections inside decoder cross-attention (the plain
    /// equation is projection-free).
    pub decoder_proj: bool,
    /// Give the second cross-attention iteration its own projections
    /// (only meaningful with `decoder_proj`).
    pub decoder_unshared: bool,
    /// Report the 95th-percentile Hausdorff variant instead of the max.
    pub hd95: bool,
    /// Minimum separation of distance-transform maxima when splitting
    /// touching instances. `None` ties it to `kernel_radius`.
    pub split_sep: Option<usize>,
    pub protocol: Protocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kernel_radius: 10,
            sigma: 10.0 / 3.0,
            n_spaces: 2,
            dim: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            prompt_dim: 64,
            categories: 1,
            alpha: 0.8,
            beta: 0.2,
            gamma: 2.0,
            dice_eps: 1.0,
            tau: 0.5,
            lr: 1e-4,
            lr_decay: 0.98,
            epochs: 100,
            batch_size: 2,
            seed: 0,
            size: 64,
            images_per_domain: 8,
            hs_adapter: true,
            gkp_encoder: true,
            tsm_decoder: true,
            decoder_proj: false,
            decoder_unshared: false,
            hd95: false,
            split_sep: None,
            protocol: Protocol::Lodo,
        }
    }
}

impl RunConfig {
    /// Effective marker separation for the instance splitter.
    pub fn split_separation(&self) -> usize {
        self.split_sep.unwrap_or(self.kernel_radius)
    }

    /// Target channel widths of the N adapter spaces: d/4, d/8, d/16, ...
    /// Pairwise-distinct low-rank dims are what make the space heterogeneous.
    pub fn space_dims(&self) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(self.n_spaces);
        for i in 0..self.n_spaces {
            let d = self.dim >> (i + 2);
            if d == 0 {
                return Err(Error::Config(format!(
                    "dim {} too small for {} heterogeneous spaces",
                    self.dim, self.n_spaces
                )));
            }
            if dims.contains(&d) {
                return Err(Error::Config(format!(
                    "adapter space dims collide at {d}; raise dim or lower n_spaces"
                )));
            }
            dims.push(d);
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.prompt_dim {
            return Err(Error::Config(format!(
                "dim ({}) must equal prompt_dim ({}): image embeddings and semantic \
                 prompts are fused by elementwise addition",
                self.dim, self.prompt_dim
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim ({}) must be divisible by heads ({})",
                self.dim, self.heads
            )));
        }
        if self.size % 16 != 0 || self.size == 0 {
            return Err(Error::Config(format!(
                "size ({}) must be a positive multiple of the 16-pixel patch side",
                self.size
            )));
        }
        if self.prompt_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "prompt_dim ({}) must be divisible by 8 (mask-head channel halving)",
                self.prompt_dim
            )));
        }
        if self.categories == 0 {
            return Err(Error::Config("categories must be >= 1".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights alpha/beta must be >= 0".into()));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.n_spaces == 0 {
            return Err(Error::Config("n_spaces must be >= 1".into()));
        }
        self.space_dims()?;
        Ok(())
    }

    /// Parse a flat `key = value` config file. `#` starts a comment.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Set one field from its textual form; used by the file parser and by
    /// CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("invalid value '{v}' for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(Error::Parse(format!("invalid boolean '{v}' for {key}"))),
            }
        }
        match key {
            "r" | "kernel_radius" => {
                self.kernel_radius = num(key, value)?;
                self.sigma = self.kernel_radius as f64 / 3.0;
            }
            "sigma" => self.sigma = num(key, value)?,
            "n_spaces" | "n" => self.n_spaces = num(key, value)?,
            "dim" | "d" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "prompt_dim" | "c_p" => self.prompt_dim = num(key, value)?,
            "categories" => self.categories = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "dice_eps" => self.dice_eps = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "size" => self.size = num(key, value)?,
            "images_per_domain" => self.images_per_domain = num(key, value)?,
            "hs_adapter" => self.hs_adapter = flag(key, value)?,
            "gkp_encoder" => self.gkp_encoder = flag(key, value)?,
            "tsm_decoder" => self.tsm_decoder = flag(key, value)?,
            "decoder_proj" => self.decoder_proj = flag(key, value)?,
            "decoder_unshared" => self.decoder_unshared = flag(key, value)?,
            "hd95" => self.hd95 = flag(key, value)?,
            "split_sep" => self.split_sep = Some(num(key, value)?),
            "protocol" => {
                self.protocol = match value {
                    "lodo" => Protocol::Lodo,
                    "adaptability" => Protocol::Adaptability,
                    _ => {
                        return Err(Error::Parse(format!(
                            "protocol must be 'lodo' or 'adaptability', got '{value}'"
                        )))
                    }
                }
            }
            _ => return Err(Error::Parse(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Tokens per image under the fixed 16x16 patching.
    pub fn tokens(&self) -> usize {
        (self.size / 16) * (self.size / 16)
    }

    /// Token-grid side length.
    pub fn grid(&self) -> usize {
        self.size / 16
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_training_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.kernel_radius, 10);
        assert_eq!(cfg.n_spaces, 2);
        assert_eq!(cfg.alpha, 0.8);
        assert_eq!(cfg.beta, 0.2);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.lr_decay, 0.98);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.space_dims().unwrap(), vec![16, 8]);
    }

    #[test]
    fn file_parse_and_overrides() {
        let dir = std::env::temp_dir().join("nucseg_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# comment\nr = 4\nepochs= 7\nhs_adapter = off\nsize=32\n").unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.kernel_radius, 4);
        assert!((cfg.sigma - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(cfg.epochs, 7);
        assert!(!cfg.hs_adapter);
        assert_eq!(cfg.size, 32);
        cfg.set("sigma", "2.5").unwrap();
        assert_eq!(cfg.sigma, 2.5);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("not_a_key", "1"), Err(Error::Parse(_))));
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.prompt_dim = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.size = 50;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.n_spaces = 6; // 64 >> 7 == 0
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
