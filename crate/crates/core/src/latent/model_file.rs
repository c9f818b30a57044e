//! Model checkpoints: a text header followed by a "P23D" tensor segment.
//!
//! ```text
//! "P23H" | u32 version | u32 header_len | header (key=value lines) | P23D segment
//! ```
//!
//! Header keys are written sorted. Autoencoder checkpoints carry
//! `kind=vae`; inpainting checkpoints carry `kind=inpaint` and bundle the
//! autoencoder they were trained against under the `vae.` prefix, both in
//! the header and in the parameter names.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::{InpaintConfig, InpaintNet, Vae, VaeConfig};
use crate::numcore::{read_segment, write_segment, ParamSet, RNG_ALGORITHM};

pub const HEADER_MAGIC: &[u8; 4] = b"P23H";
pub const HEADER_VERSION: u32 = 1;

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of parameter names, shapes and the f32 values that get stored.
pub fn params_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            h.update((v as f32).to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub header: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl ModelFile {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint header `{key}` has bad value `{raw}`")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let text: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.write_all(HEADER_MAGIC)?;
        w.write_all(&HEADER_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        write_segment(w, &self.params)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        if &head[..4] != HEADER_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", &head[..4])));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != HEADER_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)
            .map_err(|e| Error::Format(format!("truncated checkpoint header: {e}")))?;
        let text = String::from_utf8(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let params = read_segment(r)?;
        Ok(ModelFile { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(f))
    }

    fn check_rng(&self) -> Result<()> {
        let rng = self.get("rng")?;
        if rng != RNG_ALGORITHM {
            return Err(Error::Format(format!(
                "checkpoint was written with generator `{rng}`, this build uses `{RNG_ALGORITHM}`"
            )));
        }
        Ok(())
    }

    pub fn from_vae(vae: &Vae, train_config: &str) -> Self {
        let mut header = vae_header(&vae.config, "");
        header.insert("kind".into(), "vae".into());
        header.insert("rng".into(), RNG_ALGORITHM.into());
        let hash = config_hash(&format!("{header:?}{train_config}"));
        header.insert("config_hash".into(), hash);
        ModelFile {
            header,
            params: vae.params.clone(),
        }
    }

    pub fn to_vae(&self) -> Result<Vae> {
        self.check_rng()?;
        let prefix = match self.get("kind")? {
            "vae" => "",
            "inpaint" => "vae.",
            other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
        };
        let config = VaeConfig {
            n: self.get_parsed(&format!("{prefix}n"))?,
            r: self.get_parsed(&format!("{prefix}r"))?,
            c_s: self.get_parsed(&format!("{prefix}c_s"))?,
            hidden: self.get_parsed(&format!("{prefix}hidden"))?,
            beta: self.get_parsed(&format!("{prefix}beta"))?,
            noise_std: self.get_parsed(&format!("{prefix}noise_std"))?,
        };
        let params = if prefix.is_empty() {
            self.params.clone()
        } else {
            self.params.with_prefix(prefix)
        };
        Vae::from_params(config, params)
    }

    /// Inpainting checkpoint bundling the autoencoder it was trained with.
    pub fn from_inpaint(net: &InpaintNet, vae: &Vae, train_config: &str) -> Self {
        let c = &net.config;
        let mut header = vae_header(&vae.config, "vae.");
        for (k, v) in [
            ("kind", "inpaint".to_string()),
            ("r", c.r.to_string()),
            ("c_s", c.c_s.to_string()),
            ("c_m", c.c_m.to_string()),
            ("width", c.width.to_string()),
            ("blocks", c.blocks.to_string()),
            ("cond_len", c.cond_len.to_string()),
            ("time_features", c.time_features.to_string()),
            ("n", vae.config.n.to_string()),
            ("rng", RNG_ALGORITHM.to_string()),
            ("vae.digest", params_digest(&vae.params)),
        ] {
            header.insert(k.into(), v);
        }
        let hash = config_hash(&format!("{header:?}{train_config}"));
        header.insert("config_hash".into(), hash);
        let mut params = net.params.clone();
        params.extend_prefixed("vae.", &vae.params);
        ModelFile { header, params }
    }

    pub fn to_inpaint(&self) -> Result<(InpaintNet, Vae)> {
        self.check_rng()?;
        if self.get("kind")? != "inpaint" {
            return Err(Error::Format("checkpoint does not hold an inpainting network".into()));
        }
        let config = InpaintConfig {
            r: self.get_parsed("r")?,
            c_s: self.get_parsed("c_s")?,
            c_m: self.get_parsed("c_m")?,
            width: self.get_parsed("width")?,
            blocks: self.get_parsed("blocks")?,
            cond_len: self.get_parsed("cond_len")?,
            time_features: self.get_parsed("time_features")?,
        };
        let mut own = ParamSet::new();
        for (n, t) in self.params.iter() {
            if !n.starts_with("vae.") {
                own.push(n, t.clone());
            }
        }
        let net = InpaintNet::from_params(config, own)?;
        let vae = self.to_vae()?;
        if vae.config.r != net.config.r || vae.config.c_s != net.config.c_s {
            return Err(Error::Format("bundled autoencoder does not match the network latent".into()));
        }
        Ok((net, vae))
    }
}

fn vae_header(c: &VaeConfig, prefix: &str) -> BTreeMap<String, String> {
    [
        ("n", c.n.to_string()),
        ("r", c.r.to_string()),
        ("c_s", c.c_s.to_string()),
        ("hidden", c.hidden.to_string()),
        ("beta", format!("{:e}", c.beta)),
        ("noise_std", format!("{:e}", c.noise_std)),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}{k}"), v))
    .collect()
}
