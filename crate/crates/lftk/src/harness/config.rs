//! Experiment configuration: one flat struct covering both tasks, stored as
//! diff-friendly `key = value` text in four sections. Serialization writes
//! every key, so parse/serialize round trips reproduce the struct exactly.

use std::path::PathBuf;

use crate::crnet::train::CrTrainConfig;
use crate::dnnet::train::DnTrainConfig;
use crate::dnnet::CaLayout;
use crate::{Error, Result};

use super::kv::{self, Line};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Cr,
    Dn,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cr => "cr",
            Task::Dn => "dn",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "cr" => Ok(Task::Cr),
            "dn" => Ok(Task::Dn),
            _ => Err(Error::config(format!("task: expected cr or dn, found {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // [run]
    pub task: Task,
    pub seed: u64,
    /// Recorded in run manifests; every code path is already deterministic,
    /// so this selects nothing today.
    pub deterministic: bool,
    pub out: Option<PathBuf>,

    // [data] — an existing dataset directory, or the synthetic spec gen-data
    // expands into one.
    pub data: Option<PathBuf>,
    pub scenes: usize,
    pub m: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub max_disparity: u32,
    pub layers: usize,

    // [network]
    pub stages: usize,
    pub units: usize,
    pub channels: usize,
    /// Measurement count (reconstruction task).
    pub s: usize,
    /// Training noise level on the 0..255 scale (denoising task).
    pub sigma: f32,
    pub ca_layout: CaLayout,
    pub normalize_cms: bool,

    // [optim]
    pub batch: usize,
    pub patch: usize,
    pub max_lr: f64,
    pub pre_epochs: usize,
    pub epochs: usize,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl ExperimentConfig {
    /// Paper-mirroring dimensions per task; epochs are the scaled-down
    /// 200+200 defaults for desk-size runs.
    pub fn defaults(task: Task) -> ExperimentConfig {
        let (stages, units, channels) = match task {
            Task::Cr => (6, 8, 32),
            Task::Dn => (2, 6, 64),
        };
        ExperimentConfig {
            task,
            seed: 0,
            deterministic: true,
            out: None,
            data: None,
            scenes: 50,
            m: 3,
            n: 3,
            height: 64,
            width: 64,
            max_disparity: 2,
            layers: 3,
            stages,
            units,
            channels,
            s: 2,
            sigma: 20.0,
            ca_layout: CaLayout::PerView,
            normalize_cms: false,
            batch: 5,
            patch: 32,
            max_lr: 1e-3,
            pre_epochs: 200,
            epochs: 200,
            tau_start: 1.0,
            tau_end: 0.05,
        }
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("task = {}\n", self.task.name()));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("deterministic = {}\n", self.deterministic));
        if let Some(out) = &self.out {
            s.push_str(&format!("out = {}\n", out.display()));
        }
        s.push_str("\n[data]\n");
        if let Some(data) = &self.data {
            s.push_str(&format!("path = {}\n", data.display()));
        }
        s.push_str(&format!("scenes = {}\n", self.scenes));
        s.push_str(&format!("m = {}\n", self.m));
        s.push_str(&format!("n = {}\n", self.n));
        s.push_str(&format!("height = {}\n", self.height));
        s.push_str(&format!("width = {}\n", self.width));
        s.push_str(&format!("max_disparity = {}\n", self.max_disparity));
        s.push_str(&format!("layers = {}\n", self.layers));
        s.push_str("\n[network]\n");
        s.push_str(&format!("stages = {}\n", self.stages));
        s.push_str(&format!("units = {}\n", self.units));
        s.push_str(&format!("channels = {}\n", self.channels));
        s.push_str(&format!("s = {}\n", self.s));
        s.push_str(&format!("sigma = {}\n", self.sigma));
        s.push_str(&format!("ca_layout = {}\n", self.ca_layout.name()));
        s.push_str(&format!("normalize_cms = {}\n", self.normalize_cms));
        s.push_str("\n[optim]\n");
        s.push_str(&format!("batch = {}\n", self.batch));
        s.push_str(&format!("patch = {}\n", self.patch));
        s.push_str(&format!("max_lr = {}\n", self.max_lr));
        s.push_str(&format!("pre_epochs = {}\n", self.pre_epochs));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("tau_start = {}\n", self.tau_start));
        s.push_str(&format!("tau_end = {}\n", self.tau_end));
        s
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let lines = kv::scan(text)?;
        // The task picks the dimension defaults, so find it before anything else.
        let task = lines
            .iter()
            .find_map(|(_, l)| match l {
                Line::Pair { key: "task", value } => Some(*value),
                _ => None,
            })
            .ok_or_else(|| Error::config("config has no task key"))?;
        let mut cfg = ExperimentConfig::defaults(Task::parse(task)?);

        let mut section = None;
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for (lineno, line) in &lines {
            match line {
                Line::Section(name) => {
                    if !["run", "data", "network", "optim"].contains(name) {
                        return Err(Error::config(format!(
                            "line {lineno}: unknown section [{name}]"
                        )));
                    }
                    section = Some(*name);
                }
                Line::Pair { key, value } => {
                    let sec = section.ok_or_else(|| {
                        Error::config(format!("line {lineno}: key {key:?} before any section"))
                    })?;
                    if seen.contains(&(sec, key)) {
                        return Err(Error::config(format!(
                            "line {lineno}: duplicate key {key:?} in [{sec}]"
                        )));
                    }
                    seen.push((sec, key));
                    cfg.apply(sec, key, value).map_err(|e| match e {
                        Error::Config(m) => Error::config(format!("line {lineno}: {m}")),
                        other => other,
                    })?;
                }
            }
        }
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "task") => self.task = Task::parse(value)?,
            ("run", "seed") => self.seed = kv::parse_num(key, value)?,
            ("run", "deterministic") => self.deterministic = kv::parse_bool(key, value)?,
            ("run", "out") => self.out = Some(PathBuf::from(value)),
            ("data", "path") => self.data = Some(PathBuf::from(value)),
            ("data", "scenes") => self.scenes = kv::parse_num(key, value)?,
            ("data", "m") => self.m = kv::parse_num(key, value)?,
            ("data", "n") => self.n = kv::parse_num(key, value)?,
            ("data", "height") => self.height = kv::parse_num(key, value)?,
            ("data", "width") => self.width = kv::parse_num(key, value)?,
            ("data", "max_disparity") => self.max_disparity = kv::parse_num(key, value)?,
            ("data", "layers") => self.layers = kv::parse_num(key, value)?,
            ("network", "stages") => self.stages = kv::parse_num(key, value)?,
            ("network", "units") => self.units = kv::parse_num(key, value)?,
            ("network", "channels") => self.channels = kv::parse_num(key, value)?,
            ("network", "s") => self.s = kv::parse_num(key, value)?,
            ("network", "sigma") => self.sigma = kv::parse_num(key, value)?,
            ("network", "ca_layout") => self.ca_layout = CaLayout::parse(value)?,
            ("network", "normalize_cms") => self.normalize_cms = kv::parse_bool(key, value)?,
            ("optim", "batch") => self.batch = kv::parse_num(key, value)?,
            ("optim", "patch") => self.patch = kv::parse_num(key, value)?,
            ("optim", "max_lr") => self.max_lr = kv::parse_num(key, value)?,
            ("optim", "pre_epochs") => self.pre_epochs = kv::parse_num(key, value)?,
            ("optim", "epochs") => self.epochs = kv::parse_num(key, value)?,
            ("optim", "tau_start") => self.tau_start = kv::parse_num(key, value)?,
            ("optim", "tau_end") => self.tau_end = kv::parse_num(key, value)?,
            _ => {
                return Err(Error::config(format!("unknown key {key:?} in [{section}]")));
            }
        }
        Ok(())
    }

    /// Structural checks plus existence of the referenced dataset directory.
    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, usize); 10] = [
            ("scenes", self.scenes),
            ("m", self.m),
            ("n", self.n),
            ("height", self.height),
            ("width", self.width),
            ("layers", self.layers),
            ("stages", self.stages),
            ("units", self.units),
            ("channels", self.channels),
            ("s", self.s),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::config("batch and patch must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma {} must be finite and non-negative",
                self.sigma
            )));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config(format!("max_lr {} must be positive", self.max_lr)));
        }
        if self.pre_epochs + self.epochs == 0 {
            return Err(Error::config("pre_epochs + epochs must be at least 1"));
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return Err(Error::config(format!(
                "temperature schedule {} -> {} must descend and stay positive",
                self.tau_start, self.tau_end
            )));
        }
        if let Some(data) = &self.data {
            if !data.is_dir() {
                return Err(Error::config(format!(
                    "data path {} is not a directory",
                    data.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_cr_train(&self) -> CrTrainConfig {
        CrTrainConfig {
            s: self.s,
            stages: self.stages,
            units: self.units,
            channels: self.channels,
            patch: self.patch,
            batch: self.batch,
            pre_epochs: self.pre_epochs,
            epochs: self.epochs,
            max_lr: self.max_lr,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            seed: self.seed,
            normalize_cms: self.normalize_cms,
            fixed_code: None,
        }
    }

    pub fn to_dn_train(&self) -> DnTrainConfig {
        DnTrainConfig {
            sigma: self.sigma,
            stages: self.stages,
            units: self.units,
            channels: self.channels,
            ca_layout: self.ca_layout,
            patch: self.patch,
            batch: self.batch,
            pre_epochs: self.pre_epochs,
            epochs: self.epochs,
            max_lr: self.max_lr,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            seed: self.seed,
        }
    }
}

/// Seed override from the PFE_SEED environment variable. Callers pass the
/// raw variable so tests never have to mutate process state.
pub fn seed_override(raw: Option<&std::ffi::OsStr>) -> Result<Option<u64>> {
    match raw {
        None => Ok(None),
        Some(os) => {
            let s = os
                .to_str()
                .ok_or_else(|| Error::config("PFE_SEED is not valid UTF-8"))?;
            let v = s
                .parse()
                .map_err(|_| Error::config(format!("PFE_SEED: cannot parse {s:?} as u64")))?;
            Ok(Some(v))
        }
    }
}
