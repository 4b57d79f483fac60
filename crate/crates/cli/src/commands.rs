use std::path::Path;

use fluff_core::analyzer::{analyze, fluffnet300, vgg16_fc7, ArchDesc, ArchReport};
use fluff_core::detector::DetectorNet;
use fluff_core::gradcheck::{check_case, standard_suite, GradReport, Tolerance};
use fluff_core::synth::{generate_dataset, write_dataset};
use fluff_core::Element;
use serde::{Deserialize, Serialize};

use crate::config::{DataSpec, RunConfig};
use crate::error::{CliError, CliResult};

/// Built-in static descriptions for `analyze --model`.
pub fn static_model(name: &str, input: usize) -> CliResult<ArchDesc> {
    match name {
        "fluffnet300" => Ok(fluffnet300(input)?),
        "vgg16-fc7" => Ok(vgg16_fc7(input)?),
        "empty" => Ok(ArchDesc {
            name: "empty".into(),
            blocks: Vec::new(),
        }),
        other => Err(CliError::Config(format!(
            "unknown model `{other}` (fluffnet300, vgg16-fc7, empty)"
        ))),
    }
}

pub fn analyze_config(cfg: &RunConfig) -> CliResult<ArchReport> {
    let net = DetectorNet::<f32>::zeros(&cfg.network)?;
    Ok(analyze(&net.describe())?)
}

pub fn analyze_model(name: &str, input: usize) -> CliResult<ArchReport> {
    Ok(analyze(&static_model(name, input)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub train_images: usize,
    pub test_images: usize,
    pub train_objects: usize,
    pub test_objects: usize,
}

/// Writes `out/train` and, when requested, `out/test`.
pub fn gen_data(spec: &DataSpec, out: &Path) -> CliResult<GenDataReport> {
    let train = generate_dataset(&spec.scene, spec.train_images)?;
    write_dataset(&out.join("train"), &train)?;
    let count = |d: &fluff_core::synth::Dataset| d.annotations.iter().map(|a| a.objects.len()).sum();
    let mut report = GenDataReport {
        train_images: train.len(),
        test_images: 0,
        train_objects: count(&train),
        test_objects: 0,
    };
    if spec.test_images > 0 {
        let test = generate_dataset(&spec.test_scene(), spec.test_images)?;
        write_dataset(&out.join("test"), &test)?;
        report.test_images = test.len();
        report.test_objects = count(&test);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub passed: bool,
    pub cases: Vec<GradReport>,
}

fn run_suite<T: Element>(seed: u64, tol: Tolerance, out: &mut Vec<GradReport>) -> CliResult<()> {
    for case in standard_suite::<T>(seed) {
        out.push(check_case(case.as_ref(), tol, 0)?);
    }
    Ok(())
}

/// Finite-difference suite in f32 and again in f64.
pub fn gradcheck(seed: u64) -> CliResult<GradcheckReport> {
    let mut cases = Vec::new();
    run_suite::<f32>(seed, Tolerance::f32_default(), &mut cases)?;
    run_suite::<f64>(seed, Tolerance::f64_default(), &mut cases)?;
    Ok(GradcheckReport {
        seed,
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}
