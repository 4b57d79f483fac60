//! A checkpoint directory holds `manifest.json` and one tensor file per
//! parameter under `tensors/`.

use std::fs;
use std::path::Path;

use fluff_core::detector::{DetectionHeadConfig, DetectorNet};
use fluff_core::nn::Parameters;
use fluff_core::tensor_file::{read_tensor, write_tensor};
use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "fluffnet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub network: DetectionHeadConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(dir: &Path, net: &DetectorNet) -> CliResult<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| CliError::Data(format!("{}: {e}", tdir.display())))?;
    let mut tensors = Vec::new();
    let mut failure = None;
    net.visit("", &mut |name, t| {
        let file = format!("tensors/{name}.tns");
        if let Err(e) = write_tensor(&dir.join(&file), t) {
            failure.get_or_insert(e);
        }
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().dims(),
        });
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        network: net.config().clone(),
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads a checkpoint into the architecture `expected`; any difference in
/// architecture, tensor names or shapes is an error.
pub fn load(dir: &Path, expected: &DetectionHeadConfig) -> CliResult<DetectorNet> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST)).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CliError::Data(format!(
            "{}: not a version 1 checkpoint",
            dir.display()
        )));
    }
    if &manifest.network != expected {
        return Err(CliError::Config(
            "checkpoint was trained for a different network than the config describes".into(),
        ));
    }
    let mut net = DetectorNet::zeros(expected)?;
    let names = net.named_tensors().len();
    if names != manifest.tensors.len() {
        return Err(CliError::Data(format!(
            "checkpoint has {} tensors, network needs {names}",
            manifest.tensors.len()
        )));
    }
    let mut entries = manifest.tensors.iter();
    let mut failure: Option<CliError> = None;
    net.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let e = entries.next().expect("counts checked");
        if e.name != name {
            failure = Some(CliError::Data(format!("expected tensor {name}, manifest lists {}", e.name)));
            return;
        }
        match read_tensor(&dir.join(&e.file)) {
            Ok(v) if v.shape() == t.shape() => *t = v,
            Ok(v) => {
                failure = Some(CliError::Data(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in network",
                    v.shape().dims(),
                    t.shape().dims()
                )))
            }
            Err(err) => failure = Some(err.into()),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(net),
    }
}
