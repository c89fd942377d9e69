//! Subcommand implementations. Each artifact-producing command writes one
//! `manifest.json` into its output directory.

use std::fs;
use std::path::Path;

use focal3d::analysis::distribution::write_sweep_csv;
use focal3d::analysis::{
    evaluate, gamma_sweep, imbalance_report, loss_cdf, posterior_histogram, synthetic_dump,
    ImbalanceReport, PredictionDump,
};
use focal3d::config::RunConfig;
use focal3d::data::kitti::{parse_results, write_results};
use focal3d::data::{
    filter_sparse_boxes, generate_scene, split_train_val, write_split, Calibration,
    CalibrationMode, Dataset, DatasetMeta, DifficultyRule, Frame, SceneRecipe, DATASET_META,
};
use focal3d::losses::Class;
use focal3d::manifest::ManifestBuilder;
use focal3d::network::{flops_estimate, forward, NetworkConfig, ParamStore};
use focal3d::train::{self as tr, dump_posteriors, frame_seed, prepare_frame};
use focal3d::{Error, Result};
use serde::Serialize;

use crate::{ConfigArgs, Split};

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(d) = &args.detector {
        sets.push(format!("detector={}", serde_json::Value::String(d.clone())));
    }
    if let Some(g) = args.gamma {
        sets.push(format!("loss.gamma={g}"));
    }
    if let Some(d) = &args.data {
        sets.push(format!(
            "data.root={}",
            serde_json::Value::String(d.display().to_string())
        ));
    }
    RunConfig::load(args.config.as_deref(), &sets)
}

fn start(command: &str, args: &ConfigArgs, rc: &RunConfig) -> Result<ManifestBuilder> {
    let mut m = ManifestBuilder::start(command, rc.seed, serde_json::to_value(rc)?);
    if let Some(c) = &args.config {
        m.input(c)?;
    }
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Frame ids of `split` in sorted order, capped by `data.max_frames`.
fn split_ids(rc: &RunConfig, ds: &Dataset, split: Split) -> Result<Vec<String>> {
    let mut ids = match split {
        Split::All => ds.ids().to_vec(),
        Split::Train | Split::Val => {
            let (train, val) = split_train_val(ds.ids(), rc.data.split_seed.unwrap_or(rc.seed))?;
            if split == Split::Train {
                train
            } else {
                val
            }
        }
    };
    ids.sort();
    if let Some(n) = rc.data.max_frames {
        ids.truncate(n);
    }
    Ok(ids)
}

fn load_frames(ds: &Dataset, ids: &[String]) -> Result<Vec<Frame>> {
    ids.iter().map(|id| ds.load_frame(id)).collect()
}

fn load_checkpoint(path: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let (net, params) = ParamStore::load(path)?;
    log::info!("loaded {} ({} trainable values)", net.name, params.num_trainable());
    Ok((net, params))
}

pub fn gen_data(args: &ConfigArgs, count: usize, out: &Path) -> Result<()> {
    let rc = resolve(args)?;
    rc.scene.validate().map_err(|e| Error::Config {
        msg: e.to_string(),
        keys: vec!["scene".into()],
    })?;
    let mut m = start("gen-data", args, &rc)?;
    create_dir(out)?;
    if count > 0 {
        write_json(
            &out.join(DATASET_META),
            &DatasetMeta {
                calibration: CalibrationMode::Identity,
                difficulty: DifficultyRule::Support,
                classes: vec![rc.scene.class.clone()],
            },
        )?;
    }
    let calib = Calibration::identity();
    for i in 0..count {
        let id = format!("{i:06}");
        let mut frame = generate_scene(&SceneRecipe {
            seed: frame_seed(rc.seed, &id),
            ..rc.scene.clone()
        })?;
        frame.id = id;
        Dataset::write_frame(out, &frame, &calib)?;
    }
    log::info!("wrote {count} frames to {}", out.display());
    m.output(out);
    m.finish(out)?;
    Ok(())
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let rc = resolve(args)?;
    let tc = rc.train_config()?;
    let root = rc.data_root()?;
    let ds = Dataset::open(root)?;
    let train_ids = split_ids(&rc, &ds, Split::Train)?;
    let val_ids = split_ids(&rc, &ds, Split::Val)?;
    let mut m = start("train", args, &rc)?;
    m.input(root)?;
    let train_frames = load_frames(&ds, &train_ids)?;
    let val_frames = load_frames(&ds, &val_ids)?;
    create_dir(out)?;
    write_split(&out.join("train.txt"), &train_ids)?;
    write_split(&out.join("val.txt"), &val_ids)?;
    let outcome = focal3d::train::train(&tc, &train_frames, &val_frames, out)?;
    let s = &outcome.summary;
    println!(
        "{} steps, final loss {:.6}, best epoch {} (3D mAP {}), checkpoint {}",
        s.steps,
        s.final_loss,
        s.best_epoch,
        s.best_map.map_or("n/a".to_string(), |v| format!("{v:.2}")),
        s.best_checkpoint
    );
    m.output(out);
    m.finish(out)?;
    Ok(())
}

pub fn predict(args: &ConfigArgs, checkpoint: &Path, split: Split, out: &Path) -> Result<()> {
    let rc = resolve(args)?;
    rc.predict.validate()?;
    let (net, params) = load_checkpoint(checkpoint)?;
    let root = rc.data_root()?;
    let ds = Dataset::open(root)?;
    let ids = split_ids(&rc, &ds, split)?;
    let mut m = start("predict", args, &rc)?;
    m.input(checkpoint)?;
    m.input(&focal3d::network::params::manifest_path(checkpoint))?;
    m.input(root)?;
    create_dir(out)?;
    for id in &ids {
        let frame = ds.load_frame(id)?;
        let dets = tr::predict(&net, &params, &frame.cloud, &rc.predict, frame_seed(rc.seed, id))?;
        write_results(
            &out.join(format!("{id}.txt")),
            &rc.eval.class,
            &dets,
            &ds.calibration(id)?,
        )?;
    }
    log::info!("wrote results for {} frames", ids.len());
    m.output(out);
    m.finish(out)?;
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    results: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<()> {
    let rc = resolve(args)?;
    rc.eval.validate()?;
    let root = rc.data_root()?;
    let ds = Dataset::open(root)?;
    let ids = split_ids(&rc, &ds, split)?;
    let mut m = start("eval", args, &rc)?;
    m.input(root)?;
    let model = match checkpoint {
        Some(c) => {
            m.input(c)?;
            Some(load_checkpoint(c)?)
        }
        None => None,
    };
    let mut dets = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in &ids {
        let (frame, _) = filter_sparse_boxes(&ds.load_frame(id)?, rc.train.min_points);
        let d = match (&model, results) {
            (Some((net, params)), _) => {
                tr::predict(net, params, &frame.cloud, &rc.predict, frame_seed(rc.seed, id))?
            }
            (None, Some(dir)) => {
                let path = dir.join(format!("{id}.txt"));
                if path.exists() {
                    parse_results(&path, &ds.calibration(id)?)?
                        .into_iter()
                        .filter(|(c, _)| *c == rc.eval.class)
                        .map(|(_, d)| d)
                        .collect()
                } else {
                    Vec::new()
                }
            }
            (None, None) => {
                return Err(Error::Config {
                    msg: "eval needs a checkpoint or a results directory".into(),
                    keys: vec![],
                })
            }
        };
        dets.push(d);
        labels.push(frame.labels);
    }
    if let Some(dir) = results {
        m.input(dir)?;
    }
    let report = evaluate(&dets, &labels, &rc.eval)?;
    create_dir(out)?;
    let path = out.join("ap.json");
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    m.output(&path);
    m.finish(out)?;
    Ok(())
}

fn class_tag(class: Class) -> &'static str {
    match class {
        Class::Positive => "pos",
        Class::Negative => "neg",
    }
}

pub fn analyze(
    args: &ConfigArgs,
    dump_path: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let rc = resolve(args)?;
    let a = &rc.analysis;
    let mut m = start("analyze", args, &rc)?;
    create_dir(out)?;
    let dump = match (dump_path, checkpoint) {
        (Some(p), _) => {
            m.input(p)?;
            PredictionDump::read_csv(p)?
        }
        (None, Some(c)) => {
            m.input(c)?;
            let (net, params) = load_checkpoint(c)?;
            let root = rc.data_root()?;
            let ds = Dataset::open(root)?;
            m.input(root)?;
            let mut dump = PredictionDump::new();
            for id in split_ids(&rc, &ds, Split::Val)? {
                let frame = ds.load_frame(&id)?;
                let p = prepare_frame(
                    &net,
                    &frame,
                    &rc.eval.class,
                    rc.train.min_points,
                    &rc.matching,
                    rc.seed,
                )?;
                let (pmap, _) = forward(&net, &params, p.input.as_input())?;
                dump_posteriors(&pmap, &p.targets, &mut dump)?;
            }
            dump
        }
        (None, None) => synthetic_dump(a.negatives, a.positives, a.negative_shape, rc.seed)?,
    };
    if dump_path.is_none() {
        dump.write_csv(&out.join("dump.csv"))?;
    }
    for class in [Class::Positive, Class::Negative] {
        if dump.filtered(Some(class)).is_empty() {
            log::warn!("no {} samples; skipping their curves", class_tag(class));
            continue;
        }
        for &g in &a.gammas {
            let curve = loss_cdf(&dump, g, Some(class))?;
            curve.write_csv(&out.join(format!("cdf_{}_g{g}.csv", class_tag(class))))?;
        }
        let rows = gamma_sweep(&dump, &a.gammas, &a.ks, Some(class))?;
        write_sweep_csv(&rows, &out.join(format!("sweep_{}.csv", class_tag(class))))?;
    }
    let positives: Vec<f64> = dump
        .filtered(Some(Class::Positive))
        .iter()
        .map(|s| s.p_t())
        .collect();
    posterior_histogram(&positives, a.bins)?.write_csv(&out.join("histogram.csv"))?;
    log::info!("analyzed {} samples into {}", dump.len(), out.display());
    m.output(out);
    m.finish(out)?;
    Ok(())
}

#[derive(Serialize)]
struct FrameImbalance {
    id: String,
    #[serde(flatten)]
    report: ImbalanceReport,
}

#[derive(Serialize)]
struct ImbalanceSummary {
    detector: String,
    anchors: usize,
    frames: usize,
    mean_positives: f64,
    max_positives: usize,
    mean_ratio: f64,
    per_frame: Vec<FrameImbalance>,
}

pub fn imbalance(args: &ConfigArgs, scenes: usize, out: &Path) -> Result<()> {
    let rc = resolve(args)?;
    let net = rc.network()?;
    let mut m = start("imbalance", args, &rc)?;
    let frames: Vec<Frame> = match &rc.data.root {
        Some(root) => {
            let ds = Dataset::open(root)?;
            m.input(root)?;
            load_frames(&ds, &split_ids(&rc, &ds, Split::All)?)?
        }
        None => (0..scenes)
            .map(|i| {
                let id = format!("{i:06}");
                let mut f = generate_scene(&SceneRecipe {
                    seed: frame_seed(rc.seed, &id),
                    ..rc.scene.clone()
                })?;
                f.id = id;
                Ok(f)
            })
            .collect::<Result<_>>()?,
    };
    let grid = net.head_grid()?;
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in &frames {
        let p = prepare_frame(&net, f, &rc.eval.class, rc.train.min_points, &rc.matching, rc.seed)?;
        per_frame.push(FrameImbalance {
            id: f.id.clone(),
            report: imbalance_report(&p.targets, &grid)?,
        });
    }
    let n = per_frame.len().max(1) as f64;
    let summary = ImbalanceSummary {
        detector: net.name.clone(),
        anchors: net.anchor_count()?,
        frames: per_frame.len(),
        mean_positives: per_frame.iter().map(|f| f.report.n_pos as f64).sum::<f64>() / n,
        max_positives: per_frame.iter().map(|f| f.report.n_pos).max().unwrap_or(0),
        mean_ratio: per_frame.iter().map(|f| f.report.ratio).sum::<f64>() / n,
        per_frame,
    };
    println!(
        "{}: {} anchors, {:.1} positives per frame (max {}), mean neg/pos ratio {:.1}",
        summary.detector, summary.anchors, summary.mean_positives, summary.max_positives, summary.mean_ratio
    );
    create_dir(out)?;
    let path = out.join("imbalance.json");
    write_json(&path, &summary)?;
    m.output(&path);
    m.finish(out)?;
    Ok(())
}

pub fn flops(args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let rc = resolve(args)?;
    let net = rc.network()?;
    let costs = flops_estimate(&net)?;
    let total: u64 = costs.iter().map(|c| c.flops).sum();
    println!("{:<14} {:<16} {:<10} {:>20} {:>10}", "block", "layer", "kind", "output", "GFLOPs");
    for c in &costs {
        println!(
            "{:<14} {:<16} {:<10} {:>20} {:>10.3}",
            c.block,
            c.name,
            c.kind,
            format!("{:?}", c.output),
            c.flops as f64 / 1e9
        );
    }
    println!("{:<63} {:>10.3}", "total", total as f64 / 1e9);
    if let Some(dir) = out {
        let m = start("flops", args, &rc)?;
        create_dir(dir)?;
        let path = dir.join("flops.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["block", "name", "kind", "output", "flops"])?;
        for c in &costs {
            let shape: Vec<String> = c.output.iter().map(usize::to_string).collect();
            w.write_record([
                c.block.as_str(),
                c.name.as_str(),
                c.kind.as_str(),
                shape.join("x").as_str(),
                c.flops.to_string().as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut m = m;
        m.output(&path);
        m.finish(dir)?;
    }
    Ok(())
}
