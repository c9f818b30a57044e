//! Pipeline configuration: a flat `key = value` text file, overridable from
//! the command line.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{InpaintConfig, VaeConfig};
use crate::metrics::{ChamferMode, ChamferOptions};
use crate::sampler::{SampleOptions, Schedule};
use crate::train::{DropoutMode, InpaintTrainConfig, VaeTrainConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "P23D_CONFIG";

macro_rules! config_schema {
    ($( $field:ident : $ty:ty = $default:expr, $doc:literal; )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $field: $default, )* }
            }
        }

        /// `(key, default value, description)` of every setting.
        pub fn schema() -> Vec<(&'static str, String, &'static str)> {
            let d = Config::default();
            vec![ $( (stringify!($field), d.$field.to_string(), $doc), )* ]
        }

        impl Config {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| Error::Config {
                            key: key.to_string(),
                            msg: format!("cannot parse `{}`: {e}", value.trim()),
                        })?;
                    } )*
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            msg: "unknown configuration key".into(),
                        })
                    }
                }
                Ok(())
            }

            /// Resolved settings as `key=value` lines in schema order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{}={}", stringify!($field), self.$field); )*
                out
            }
        }
    };
}

config_schema! {
    n: usize = 16, "occupancy grid resolution";
    r: usize = 4, "latent grid resolution";
    c_s: usize = 4, "latent channels";
    c_m: usize = 1, "mask channels";
    vae_hidden: usize = 16, "autoencoder channels after the first stage";
    vae_beta: f64 = 1e-4, "latent norm penalty weight";
    vae_noise_std: f64 = 0.0, "reparameterization noise std during autoencoder training (0 = deterministic)";
    vae_steps: usize = 4000, "maximum autoencoder optimizer steps";
    vae_batch: usize = 16, "autoencoder batch size";
    vae_lr: f64 = 2e-3, "autoencoder learning rate";
    vae_target_iou: f64 = 0.95, "stop autoencoder training at this train IoU (0 disables)";
    vae_eval_every: usize = 250, "steps between autoencoder IoU checks";
    width: usize = 32, "inpainting network channel width";
    blocks: usize = 4, "inpainting network residual blocks";
    cond_len: usize = 16, "condition vector length";
    lr: f64 = 1e-3, "inpainting learning rate";
    batch: usize = 16, "inpainting batch size";
    iterations: usize = 5000, "inpainting optimizer steps";
    mask_dropout: f64 = 0.1, "probability of the all-ones mask during inpainting training";
    dropout_mode: DropoutMode = DropoutMode::Blind, "all-ones mask sample: blind (same bridge) or exact (q_comb = q_gt)";
    seed: u64 = 0, "master seed";
    steps: usize = 50, "total sampling steps t";
    inpaint_steps: usize = 25, "masked (stage-1) sampling steps s";
    reanchor: bool = false, "re-impose the visible latent after each stage-1 step";
    repair_k: usize = 5, "noisy-prior repair steps";
    repair_strength: f64 = 0.3, "noisy-prior repair noise level";
    decode_threshold: f64 = 0.5, "occupancy probability threshold when decoding";
    tau_fraction: f64 = 0.05, "visibility tolerance as a fraction of the depth range";
    ring_views: usize = 24, "cameras on the view ring";
    ring_pitch: f64 = 30.0, "view ring elevation in degrees";
    ring_radius: f64 = 1.8, "view ring distance from the origin";
    image_size: usize = 64, "depth map width and height in pixels";
    surface_samples: usize = 50000, "surface points per asset";
    shapes: usize = 200, "synthetic training shapes";
    eval_shapes: usize = 48, "held-out synthetic evaluation shapes";
    fscore_threshold: f64 = 0.05, "F-score distance threshold (normalized units)";
    chamfer_mode: ChamferMode = ChamferMode::Mean, "chamfer reduction: mean or sum";
    chamfer_squared: bool = false, "use squared distances in chamfer";
    threads: usize = 0, "worker threads (0 = all cores)";
}

impl Config {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.r == 0 || self.n % self.r != 0 {
            return bad("n", "must be divisible by r");
        }
        if self.inpaint_steps > self.steps {
            return bad("inpaint_steps", "must not exceed steps");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if !(self.tau_fraction >= 0.0) {
            return bad("tau_fraction", "must be >= 0");
        }
        if !(self.fscore_threshold > 0.0) {
            return bad("fscore_threshold", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.mask_dropout) {
            return bad("mask_dropout", "must lie in [0, 1]");
        }
        if !(self.repair_strength > 0.0 && self.repair_strength <= 1.0) {
            return bad("repair_strength", "must lie in (0, 1]");
        }
        if self.repair_k == 0 {
            return bad("repair_k", "must be >= 1");
        }
        for (key, v) in [
            ("c_s", self.c_s),
            ("c_m", self.c_m),
            ("width", self.width),
            ("cond_len", self.cond_len),
            ("batch", self.batch),
            ("vae_batch", self.vae_batch),
            ("ring_views", self.ring_views),
            ("image_size", self.image_size),
            ("surface_samples", self.surface_samples),
            ("shapes", self.shapes),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if self.cond_len < 4 {
            return bad("cond_len", "must be >= 4 to hold the family code");
        }
        self.vae_config().validate().or_else(|e| bad("n", &e.to_string()))
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            n: self.n,
            r: self.r,
            c_s: self.c_s,
            hidden: self.vae_hidden,
            beta: self.vae_beta,
            noise_std: self.vae_noise_std,
        }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            steps: self.vae_steps,
            batch: self.vae_batch,
            lr: self.vae_lr,
            seed: self.seed,
            target_iou: (self.vae_target_iou > 0.0).then_some(self.vae_target_iou),
            eval_every: self.vae_eval_every,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            r: self.r,
            c_s: self.c_s,
            c_m: self.c_m,
            width: self.width,
            blocks: self.blocks,
            cond_len: self.cond_len,
            ..InpaintConfig::default()
        }
    }

    pub fn inpaint_train_config(&self) -> InpaintTrainConfig {
        InpaintTrainConfig {
            steps: self.iterations,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            mask_dropout: self.mask_dropout,
            dropout_mode: self.dropout_mode,
            ..InpaintTrainConfig::default()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            t: self.steps,
            s: self.inpaint_steps,
        }
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            reanchor: self.reanchor,
            record: false,
        }
    }

    pub fn chamfer_options(&self) -> ChamferOptions {
        ChamferOptions {
            mode: self.chamfer_mode,
            squared: self.chamfer_squared,
        }
    }

    /// Settings that determine the content of training pairs.
    pub fn dataset_text(&self) -> String {
        format!(
            "n={} r={} c_s={} c_m={} cond_len={} tau_fraction={} ring_views={} ring_pitch={} ring_radius={} image_size={} surface_samples={} shapes={} seed={}",
            self.n,
            self.r,
            self.c_s,
            self.c_m,
            self.cond_len,
            self.tau_fraction,
            self.ring_views,
            self.ring_pitch,
            self.ring_radius,
            self.image_size,
            self.surface_samples,
            self.shapes,
            self.seed
        )
    }
}
