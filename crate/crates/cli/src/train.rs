use std::fs;
use std::io::Write;
use std::path::Path;

use fluff_core::detector::{multibox_loss, BBox, DetectorNet, GroundTruth};
use fluff_core::nn::{self, Parameters};
use fluff_core::rng::seeded_rng;
use fluff_core::synth::{flip_horizontal, read_dataset, Dataset};
use fluff_core::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Image-weighted means over the epoch.
    pub loss: f64,
    pub loc: f64,
    pub conf: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Stacks images `(1, C, H, W)` into one batch tensor.
pub fn stack(images: &[&Tensor<f32>]) -> CliResult<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Data("empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first {
            return Err(CliError::Data(format!(
                "image shape {:?} differs from {:?}",
                img.shape().dims(),
                first.dims()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(
        Shape::new(images.len(), first.channels, first.height, first.width),
        data,
    )?)
}

pub fn check_dataset(ds: &Dataset, net_cfg: &fluff_core::detector::DetectionHeadConfig) -> CliResult<()> {
    let i = net_cfg.input;
    let want = Shape::new(1, i.channels, i.height, i.width);
    if ds.is_empty() {
        return Err(CliError::Data("dataset has no images".into()));
    }
    if let Some(img) = ds.images.iter().find(|t| t.shape() != want) {
        return Err(CliError::Data(format!(
            "dataset image shape {:?} does not match network input {:?}",
            img.shape().dims(),
            want.dims()
        )));
    }
    let classes = net_cfg.num_classes;
    if let Some(o) = ds.annotations.iter().flat_map(|a| &a.objects).find(|o| o.label >= classes) {
        return Err(CliError::Data(format!(
            "label {} outside the network's {classes} classes",
            o.label
        )));
    }
    Ok(())
}

/// Trains from the config's seed and returns the network and per-epoch log.
pub fn train(cfg: &RunConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> CliResult<(DetectorNet, Vec<EpochLog>)> {
    check_dataset(ds, &cfg.network)?;
    nn::set_parallel(cfg.schedule.parallel);
    let mut net = DetectorNet::new(&cfg.network, &mut seeded_rng(cfg.seed))?;
    let priors: Vec<BBox> = cfg.network.priors()?;
    let truth: Vec<Vec<GroundTruth>> = ds.ground_truth();
    let mut velocity: Vec<Tensor<f32>> = Vec::new();
    net.visit("", &mut |_, t| velocity.push(Tensor::zeros(t.shape())));
    // batch order and flips come from their own stream
    let mut rng = seeded_rng(cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    let opt = &cfg.optimizer;
    let sched = &cfg.schedule;
    let mut log = Vec::new();

    for epoch in 0..sched.epochs {
        let decays = sched.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        let lr = opt.learning_rate * sched.decay_factor.powi(decays as i32);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let (mut tot, mut loc, mut conf) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(sched.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if sched.horizontal_flip && rng.gen_bool(0.5) {
                    let (img, gt) = flip_horizontal(&ds.images[i], &truth[i]);
                    imgs.push(img);
                    gts.push(gt);
                } else {
                    imgs.push(ds.images[i].clone());
                    gts.push(truth[i].clone());
                }
            }
            let x = stack(&imgs.iter().collect::<Vec<_>>())?;
            let (out, cache) = net.forward_cached(&x)?;
            let l = multibox_loss(&out.loc, &out.conf, &priors, &gts, &cfg.loss)?;
            if !l.total.is_finite() {
                return Err(CliError::Numeric(format!(
                    "non-finite loss at epoch {epoch} (loc {}, conf {}); try a lower learning rate",
                    l.loc, l.conf
                )));
            }
            let n = chunk.len() as f64;
            tot += l.total * n;
            loc += l.loc * n;
            conf += l.conf * n;
            let (grads, _) = net.backward(&cache, &l.grad_loc, &l.grad_conf)?;
            let mut g_all: Vec<&Tensor<f32>> = Vec::new();
            grads.visit("", &mut |_, t| g_all.push(t));
            let mut k = 0;
            net.visit_mut("", &mut |_, p| {
                let g = g_all[k].data();
                let v = velocity[k].data_mut();
                for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    let step = *gv as f64 + opt.weight_decay * *pv as f64;
                    *vv = (opt.momentum * *vv as f64 + step) as f32;
                    *pv = (*pv as f64 - lr * *vv as f64) as f32;
                }
                k += 1;
            });
        }
        let n = ds.len() as f64;
        let entry = EpochLog {
            epoch,
            learning_rate: lr,
            loss: tot / n,
            loc: loc / n,
            conf: conf / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((net, log))
}

/// `train` command: reads the training split, trains, writes the checkpoint
/// and `metrics.jsonl` into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> CliResult<Vec<EpochLog>> {
    let train_dir = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| CliError::Config("data.train is required for training".into()))?;
    let ds = read_dataset(train_dir)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let path = out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut write_err = None;
    let (net, log) = train(cfg, &ds, |e| {
        let line = serde_json::to_string(e).expect("log entry serialises");
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if let Err(err) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Data(format!("{}: {e}", path.display())));
    }
    checkpoint::save(out, &net)?;
    Ok(log)
}
