//! Dataset persistence: `manifest.json` plus one newline-delimited JSON file
//! per split, named `<split>-seed<master_seed>.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, GenerationConfig, InitialConditions, Split, SplitSizes};
use super::policy::DosePolicyConfig;
use crate::sim::{PatientTrajectory, SimParams, System, TimeGrid};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: String,
    system: System,
    grid: TimeGrid,
    policy: DosePolicyConfig,
    sizes: SplitSizes,
    master_seed: u64,
    params: SimParams,
    initial: InitialConditions,
    resampled: usize,
}

fn split_file_name(split: Split, seed: u64) -> String {
    format!("{}-seed{seed}.jsonl", split.name())
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let cfg = &dataset.config;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION.to_string(),
        system: cfg.system,
        grid: cfg.grid,
        policy: cfg.policy.clone(),
        sizes: cfg.sizes,
        master_seed: dataset.master_seed,
        params: cfg.params.clone(),
        initial: cfg.initial.clone(),
        resampled: dataset.resampled,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    for split in Split::ALL {
        let path = dir.join(split_file_name(split, dataset.master_seed));
        let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        for p in dataset.split(split) {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

fn find_split_file(dir: &Path, split: Split) -> Result<(PathBuf, u64)> {
    let prefix = format!("{}-seed", split.name());
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".jsonl")) {
            let seed = rest
                .parse::<u64>()
                .map_err(|_| Error::Validation(format!("cannot parse seed from file name `{name}`")))?;
            found.push((entry.path(), seed));
        }
    }
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(Error::Validation(format!(
            "no `{prefix}<N>.jsonl` file in {}",
            dir.display()
        ))),
        _ => Err(Error::Validation(format!(
            "several `{prefix}<N>.jsonl` files in {}",
            dir.display()
        ))),
    }
}

fn read_patients(path: &Path) -> Result<Vec<PatientTrajectory>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let patient: PatientTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(patient);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let found = version.get("schema_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    let manifest: Manifest = serde_json::from_value(version).map_err(|e| Error::Parse {
        path: path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;

    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let (file, seed) = find_split_file(dir, split)?;
        if seed != manifest.master_seed {
            return Err(Error::Validation(format!(
                "{} embeds seed {seed} but the manifest says {}",
                file.display(),
                manifest.master_seed
            )));
        }
        splits.push(read_patients(&file)?);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let config = GenerationConfig {
        system: manifest.system,
        sizes: manifest.sizes,
        policy: manifest.policy,
        grid: manifest.grid,
        params: manifest.params,
        initial: manifest.initial,
    };
    let sizes = [train.len(), val.len(), test.len()];
    if sizes != [config.sizes.train, config.sizes.val, config.sizes.test] {
        return Err(Error::Validation(format!(
            "split sizes {sizes:?} disagree with manifest {:?}",
            config.sizes
        )));
    }
    let ds = Dataset {
        config,
        master_seed: manifest.master_seed,
        resampled: manifest.resampled,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn tiny() -> Dataset {
        let cfg = GenerationConfig {
            sizes: SplitSizes { train: 5, val: 2, test: 2 },
            ..Default::default()
        };
        generate_dataset(&cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        assert!(dir.path().join("train-seed77.jsonl").exists());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(&tiny(), a.path()).unwrap();
        save_dataset(&tiny(), b.path()).unwrap();
        for name in [MANIFEST_FILE, "train-seed77.jsonl", "val-seed77.jsonl", "test-seed77.jsonl"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn seed_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::rename(dir.path().join("val-seed77.jsonl"), dir.path().join("val-seed78.jsonl")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("78")), "{err}");
    }

    #[test]
    fn truncated_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("train-seed77.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.trim_end().len() - 40;
        fs::write(&path, &text[..cut]).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": \"1\"", "\"schema_version\": \"2\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Version { .. }));
    }
}
