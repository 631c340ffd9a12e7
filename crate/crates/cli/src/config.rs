//! Flat `key = value` configuration files for `train` and `distill`.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the field
//! names of the network and training configurations; command-line flags
//! override whatever the file sets.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fpfl_core::net::{DistillConfig, NetConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(CliError::validation(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(CliError::validation(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::validation(format!("line {line}: bad value {v:?} for {key}"))),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse_list(&v)
                .map(Some)
                .map_err(|_| CliError::validation(format!("line {line}: bad list {v:?} for {key}"))),
        }
    }

    /// Fails on any key that no `apply_*` call consumed.
    pub fn finish(self) -> Result<(), CliError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(CliError::validation(format!("line {line}: unknown key {k:?}"))),
        }
    }

    pub fn apply_net(&mut self, net: &mut NetConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.take(stringify!($field))? {
                    net.$field = v;
                }
            )*};
        }
        set!(
            branch_channels,
            embed_dim,
            map_h,
            map_w,
            map_c,
            map_sigma,
            minutiae_pool,
            use_localizer,
            loc_pool,
            dropout_keep,
            weight_decay,
            loc_lr_scale
        );
        if let Some(v) = self.take_list("stem_channels")? {
            net.stem_channels = v;
        }
        if let Some(v) = self.take("w_texture")? {
            net.loss_weights.texture = v;
        }
        if let Some(v) = self.take("w_minutiae")? {
            net.loss_weights.minutiae = v;
        }
        if let Some(v) = self.take("w_map")? {
            net.loss_weights.map = v;
        }
        if let Some(v) = self.take("net_seed")? {
            net.seed = v;
        }
        Ok(())
    }

    pub fn apply_train(&mut self, cfg: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(v) = self.take("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.take("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.take("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = self.take("min_lr")? {
            cfg.min_lr = Some(v);
        }
        if let Some(v) = self.take("decay")? {
            cfg.decay = v;
        }
        if let Some(v) = self.take("eps")? {
            cfg.eps = v;
        }
        if let Some(v) = self.take("seed")? {
            cfg.seed = v;
        }
        if let Some(false) = self.take::<bool>("augment")? {
            cfg.augment = None;
        }
        if let Some(v) = self.take("dropout")? {
            cfg.dropout = v;
        }
        Ok(())
    }

    pub fn apply_distill(&mut self, cfg: &mut DistillConfig) -> Result<(), CliError> {
        if let Some(v) = self.take("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.take("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.take("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = self.take("min_lr")? {
            cfg.min_lr = v;
        }
        if let Some(v) = self.take("decay")? {
            cfg.decay = v;
        }
        if let Some(v) = self.take("eps")? {
            cfg.eps = v;
        }
        if let Some(v) = self.take("seed")? {
            cfg.seed = v;
        }
        Ok(())
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',').map(|p| p.trim().parse()).collect()
}
