use std::path::Path;

use fluff_core::detector::{
    decode_detections, evaluate_map, nms, BoxSet, DetectorNet, GroundTruth, MapReport, NmsConfig,
};
use fluff_core::nn;
use fluff_core::synth::{read_dataset, Dataset};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::train::{check_dataset, stack};

pub const EVAL_BATCH: usize = 16;
pub const MAP_IOU: f32 = 0.5;

/// Post-NMS detections for every image, in image order.
pub fn predict(net: &DetectorNet, ds: &Dataset, variances: [f32; 2], nms_cfg: &NmsConfig) -> CliResult<Vec<BoxSet>> {
    let priors = net.config().priors()?;
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.images.chunks(EVAL_BATCH) {
        let x = stack(&chunk.iter().collect::<Vec<_>>())?;
        let y = net.forward(&x)?;
        for set in decode_detections(&y, &priors, variances, nms_cfg.score_threshold)? {
            out.push(nms(&set, nms_cfg));
        }
    }
    Ok(out)
}

pub fn map_report(dets: &[BoxSet], truth: &[Vec<GroundTruth>], num_classes: usize) -> CliResult<MapReport> {
    Ok(evaluate_map(dets, truth, num_classes, MAP_IOU)?)
}

/// Evaluates a network on a dataset at IoU 0.5.
pub fn evaluate(cfg: &RunConfig, net: &DetectorNet, ds: &Dataset) -> CliResult<(MapReport, Vec<BoxSet>)> {
    check_dataset(ds, &cfg.network)?;
    nn::set_parallel(cfg.schedule.parallel);
    let dets = predict(net, ds, cfg.loss.variances, &cfg.nms)?;
    let report = map_report(&dets, &ds.ground_truth(), cfg.network.num_classes)?;
    Ok((report, dets))
}

/// `eval` command on the configured test split.
pub fn run_eval(cfg: &RunConfig, checkpoint_dir: &Path) -> CliResult<(MapReport, Vec<BoxSet>)> {
    let test_dir = cfg
        .data
        .test
        .as_ref()
        .ok_or_else(|| CliError::Config("data.test is required for evaluation".into()))?;
    let ds = read_dataset(test_dir)?;
    let net = checkpoint::load(checkpoint_dir, &cfg.network)?;
    evaluate(cfg, &net, &ds)
}
