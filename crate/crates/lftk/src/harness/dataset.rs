//! Synthetic dataset directories: numbered `.lf4` scenes plus a manifest
//! recording everything needed to regenerate them bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lf::io::{load_lf4, save_lf4};
use crate::lf::synth::{gen_synthetic, SynthParams};
use crate::lf::LightField4D;
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::kv::{self, Line};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub m: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub max_disparity: u32,
    pub layers: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> DatasetSpec {
        DatasetSpec {
            scenes: cfg.scenes,
            m: cfg.m,
            n: cfg.n,
            height: cfg.height,
            width: cfg.width,
            max_disparity: cfg.max_disparity,
            layers: cfg.layers,
            seed: cfg.seed,
        }
    }

    fn synth_params(&self) -> SynthParams {
        SynthParams {
            m: self.m,
            n: self.n,
            h: self.height,
            w: self.width,
            max_disparity: self.max_disparity,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub file: String,
    pub seed: u64,
    pub disparities: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut s = String::from("[dataset]\n");
        s.push_str(&format!("scenes = {}\n", self.spec.scenes));
        s.push_str(&format!("m = {}\n", self.spec.m));
        s.push_str(&format!("n = {}\n", self.spec.n));
        s.push_str(&format!("height = {}\n", self.spec.height));
        s.push_str(&format!("width = {}\n", self.spec.width));
        s.push_str(&format!("max_disparity = {}\n", self.spec.max_disparity));
        s.push_str(&format!("layers = {}\n", self.spec.layers));
        s.push_str(&format!("seed = {}\n", self.spec.seed));
        for e in &self.entries {
            s.push_str(&format!("\n[scene {}]\n", e.file));
            s.push_str(&format!("seed = {}\n", e.seed));
            let ds: Vec<String> = e.disparities.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("disparities = {}\n", ds.join(",")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let mut spec = DatasetSpec {
            scenes: 0,
            m: 0,
            n: 0,
            height: 0,
            width: 0,
            max_disparity: 0,
            layers: 0,
            seed: 0,
        };
        let mut entries: Vec<SceneEntry> = Vec::new();
        // None until the first header; Some(None) inside [dataset];
        // Some(Some(i)) inside the i-th scene section.
        let mut at: Option<Option<usize>> = None;
        for (lineno, line) in kv::scan(text)? {
            match line {
                Line::Section("dataset") => at = Some(None),
                Line::Section(name) => {
                    let file = name.strip_prefix("scene ").ok_or_else(|| {
                        Error::format(format!("line {lineno}: unknown section [{name}]"))
                    })?;
                    entries.push(SceneEntry {
                        file: file.to_string(),
                        seed: 0,
                        disparities: Vec::new(),
                    });
                    at = Some(Some(entries.len() - 1));
                }
                Line::Pair { key, value } => match at {
                    None => {
                        return Err(Error::format(format!(
                            "line {lineno}: key {key:?} before any section"
                        )))
                    }
                    Some(None) => match key {
                        "scenes" => spec.scenes = kv::parse_num(key, value)?,
                        "m" => spec.m = kv::parse_num(key, value)?,
                        "n" => spec.n = kv::parse_num(key, value)?,
                        "height" => spec.height = kv::parse_num(key, value)?,
                        "width" => spec.width = kv::parse_num(key, value)?,
                        "max_disparity" => spec.max_disparity = kv::parse_num(key, value)?,
                        "layers" => spec.layers = kv::parse_num(key, value)?,
                        "seed" => spec.seed = kv::parse_num(key, value)?,
                        _ => {
                            return Err(Error::format(format!(
                                "line {lineno}: unknown dataset key {key:?}"
                            )))
                        }
                    },
                    Some(Some(i)) => match key {
                        "seed" => entries[i].seed = kv::parse_num(key, value)?,
                        "disparities" => {
                            entries[i].disparities = value
                                .split(',')
                                .map(|d| kv::parse_num("disparities", d.trim()))
                                .collect::<Result<_>>()?;
                        }
                        _ => {
                            return Err(Error::format(format!(
                                "line {lineno}: unknown scene key {key:?}"
                            )))
                        }
                    },
                },
            }
        }
        if spec.scenes != entries.len() {
            return Err(Error::format(format!(
                "manifest declares {} scenes but lists {}",
                spec.scenes,
                entries.len()
            )));
        }
        Ok(DatasetManifest { spec, entries })
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

fn scene_file(k: usize) -> String {
    format!("scene_{k:03}.lf4")
}

/// Write `spec.scenes` generated light fields plus the manifest into `dir`
/// (created if missing). Per-scene seeds come from one stream over
/// `spec.seed`, so the whole directory is a pure function of the spec.
pub fn generate(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    if spec.scenes == 0 {
        return Err(Error::config("dataset needs at least one scene"));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.seed);
    let entries = (0..spec.scenes)
        .map(|k| SceneEntry {
            file: scene_file(k),
            seed: seeder.random(),
            disparities: Vec::new(),
        })
        .collect();
    let mut manifest = DatasetManifest { spec: *spec, entries };
    write_scenes(&mut manifest, dir, false)?;
    Ok(manifest)
}

/// Rebuild a dataset directory from a previously written manifest. Output
/// files are bit-identical to the original generation.
pub fn regenerate(manifest_text: &str, dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::parse(manifest_text)?;
    write_scenes(&mut manifest, dir, true)?;
    Ok(manifest)
}

fn write_scenes(manifest: &mut DatasetManifest, dir: &Path, check: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = manifest.spec.synth_params();
    for e in &mut manifest.entries {
        let (lf, desc) = gen_synthetic(&params, e.seed);
        if check && desc.disparities != e.disparities {
            return Err(Error::data(format!(
                "{}: regenerated disparities {:?} disagree with the manifest's {:?}",
                e.file, desc.disparities, e.disparities
            )));
        }
        e.disparities = desc.disparities;
        save_lf4(&lf, &dir.join(&e.file))?;
    }
    fs::write(manifest_path(dir), manifest.render())?;
    Ok(())
}

/// All `.lf4` scenes in a directory, sorted by file name so iteration order
/// is stable. Scene names are the file stems.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, LightField4D)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lf4"))
        .collect();
    if files.is_empty() {
        return Err(Error::data(format!("no .lf4 scenes in {}", dir.display())));
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_lf4(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            scenes: 4,
            m: 3,
            n: 3,
            height: 16,
            width: 16,
            max_disparity: 1,
            layers: 2,
            seed,
        }
    }

    #[test]
    fn generation_writes_scenes_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&tiny_spec(5), dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        for e in &manifest.entries {
            assert!(dir.path().join(&e.file).is_file());
            assert!(!e.disparities.is_empty());
        }
        let text = fs::read_to_string(manifest_path(dir.path())).unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), manifest);

        let scenes = load_dir(dir.path()).unwrap();
        assert_eq!(scenes.len(), 4);
        assert_eq!(scenes[0].0, "scene_000");
        assert_eq!(scenes[0].1.h, 16);
    }

    #[test]
    fn regeneration_from_the_manifest_is_bit_identical() {
        let a = tempfile::tempdir().unwrap();
        let manifest = generate(&tiny_spec(9), a.path()).unwrap();
        let text = fs::read_to_string(manifest_path(a.path())).unwrap();

        let b = tempfile::tempdir().unwrap();
        let again = regenerate(&text, b.path()).unwrap();
        assert_eq!(again, manifest);
        for e in &manifest.entries {
            let x = fs::read(a.path().join(&e.file)).unwrap();
            let y = fs::read(b.path().join(&e.file)).unwrap();
            assert_eq!(x, y, "{} differs after regeneration", e.file);
        }
        assert_eq!(fs::read(manifest_path(a.path())).unwrap(),
                   fs::read(manifest_path(b.path())).unwrap());
    }

    #[test]
    fn tampered_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate(&tiny_spec(11), dir.path()).unwrap();
        let text = fs::read_to_string(manifest_path(dir.path())).unwrap();

        let wrong_count = text.replace("scenes = 4", "scenes = 5");
        assert!(matches!(DatasetManifest::parse(&wrong_count), Err(Error::Format(_))));

        // flip a recorded disparity: regeneration must notice the mismatch
        let out = tempfile::tempdir().unwrap();
        let lied = text.replacen("disparities = ", "disparities = 7,", 1);
        assert!(matches!(regenerate(&lied, out.path()), Err(Error::Data(_))));
    }

    #[test]
    fn zero_disparity_datasets_have_equal_views_per_scene() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { max_disparity: 0, ..tiny_spec(3) };
        generate(&spec, dir.path()).unwrap();
        for (_, lf) in load_dir(dir.path()).unwrap() {
            let base = lf.view_slice(0, 0).to_vec();
            for u in 0..lf.m {
                for v in 0..lf.n {
                    assert_eq!(lf.view_slice(u, v), &base[..]);
                }
            }
        }
    }

    #[test]
    fn empty_directories_are_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Data(_))));
    }
}
