//! Command-line surface: `gen-data`, `targets`, `train`, `detect`, `eval`, `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fovea_core::evaluation::{
    aspect_report, average_recall, coco_iou_thresholds, evaluate, EvalResult, ImageDets, PROPOSAL_KS,
};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::data::{self, write_json, CocoCategory, CocoFile, CocoImage, Dataset, DatasetSpec};
use crate::error::{IoContext, Result};
use crate::report::{self, SweepRow};
use crate::train::{self, agnostic_gts};

#[derive(Debug, Parser)]
#[command(name = "fovea", version, about = "Anchor-free detection on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Build training targets for a dataset and dump them with heatmaps.
    Targets(TargetsArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Run a checkpoint over images and write COCO results.
    Detect(DetectArgs),
    /// Score COCO results against annotations.
    Eval(EvalArgs),
    /// Train and evaluate once per value of an assignment parameter.
    Sweep(SweepArgs),
}

/// Options shared by the commands that read a run configuration.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.schedule.seed = v;
            cfg.dataset.seed = v;
        }
        if let Some(v) = self.sigma {
            cfg.assign.sigma = v;
        }
        if let Some(v) = self.eta {
            cfg.assign.eta = v;
        }
        if let Some(v) = self.epochs {
            cfg.schedule.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.schedule.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.sgd.learning_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON dataset spec; flags override its values.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_aspect: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    /// COCO annotation file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Images to render heatmaps for.
    #[arg(long, default_value_t = 16)]
    pub heatmaps: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// COCO annotation file of the training set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional annotation file to evaluate the final model on.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// COCO annotation file, or a directory of PNG images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit up to this many class-agnostic proposals per image instead.
    #[arg(long)]
    pub proposals: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// COCO annotation file.
    #[arg(long)]
    pub gt: PathBuf,
    /// COCO results file.
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat detections as class-agnostic proposals and report recall.
    #[arg(long)]
    pub proposals: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Sigma,
    Eta,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Training annotation file.
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation file to evaluate on.
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub const RESULTS_FILE: &str = "results.json";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval.txt";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TABLE: &str = "sweep.txt";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Targets(a) => targets(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Detect(a) => detect(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn save_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.save(&out.join(RESOLVED_CONFIG))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => data::read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(v) = a.num_images {
        spec.num_images = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.max_aspect {
        spec.max_aspect = v;
    }
    let ds = data::generate(&spec, &a.out)?;
    let cfg = RunConfig {
        dataset: spec,
        ..RunConfig::default()
    };
    save_config(&a.out, &cfg)?;
    println!(
        "wrote {} images with {} objects to {}",
        ds.len(),
        ds.gts.iter().map(|g| g.gts.len()).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn targets(a: &TargetsArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = data::load_coco(&a.data)?;
    let s = report::dump_targets(
        &ds,
        cfg.detector.min_level,
        cfg.detector.max_level,
        &cfg.assign,
        a.heatmaps,
        &a.out,
    )?;
    save_config(&a.out, &cfg)?;
    println!(
        "sigma {} eta {}: {} positive cells for {} objects ({} with positives)",
        s.sigma, s.eta, s.total_positives, s.objects, s.objects_with_positives
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    result: &'a EvalResult,
    aspect: &'a fovea_core::evaluation::AspectBucketReport,
}

/// Evaluates detections against a dataset and writes the JSON and table.
pub fn write_eval(ds: &Dataset, dets: &[ImageDets], out: &Path) -> Result<EvalResult> {
    let result = evaluate(dets, &ds.gts, ds.num_classes(), &coco_iou_thresholds())?;
    let aspect = aspect_report(dets, &ds.gts, ds.num_classes())?;
    fs::create_dir_all(out).at(out)?;
    write_json(
        &out.join(EVAL_JSON),
        &EvalOutput {
            result: &result,
            aspect: &aspect,
        },
    )?;
    let names: Vec<String> = ds.categories.iter().map(|c| c.name.clone()).collect();
    let table = report::eval_table(&result, &names, Some(&aspect));
    let p = out.join(EVAL_TABLE);
    fs::write(&p, &table).at(&p)?;
    Ok(result)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = data::load_coco(&a.data)?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    save_config(&a.out, &cfg)?;
    let (detector, logs) = train::train(&ds, &cfg, Some(&a.out))?;
    if let Some(last) = logs.last() {
        println!(
            "epoch {} loss {:.4} (cls {:.4}, box {:.4}) in {:.0}s",
            last.epoch, last.total, last.cls_loss, last.box_loss, last.wall_seconds
        );
    }
    if let Some(eval_path) = &a.eval_data {
        let held = data::load_coco(eval_path)?;
        let dets = train::detect(&detector, &held, &cfg.inference)?;
        data::write_results(&a.out.join(RESULTS_FILE), &data::to_results(&held, &dets))?;
        let r = write_eval(&held, &dets, &a.out)?;
        println!("AP {:.3} AP50 {:.3} AP75 {:.3}", r.ap, r.ap50, r.ap75);
    }
    Ok(())
}

/// A dataset from a directory of PNG files, ids assigned in file-name order.
fn dataset_from_dir(dir: &Path) -> Result<Dataset> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .at(dir)?;
    names.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    names.sort();
    let mut file = CocoFile {
        categories: data::CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        ..CocoFile::default()
    };
    for (i, p) in names.iter().enumerate() {
        let (w, h) = image::image_dimensions(p).at(p)?;
        file.images.push(CocoImage {
            id: i as u64 + 1,
            file_name: p.file_name().expect("file").to_string_lossy().into_owned(),
            width: w as usize,
            height: h as usize,
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        gts: file
            .images
            .iter()
            .map(|i| fovea_core::evaluation::ImageGts {
                image_id: i.id,
                gts: Vec::new(),
            })
            .collect(),
        images: file.images,
        categories: file.categories,
    })
}

fn detect(a: &DetectArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (detector, _) = checkpoint::load(&a.ckpt)?;
    let ds = if a.images.is_dir() {
        dataset_from_dir(&a.images)?
    } else {
        data::load_coco(&a.images)?
    };
    let dets = match a.proposals {
        Some(k) => train::propose_dataset(&detector, &ds, &cfg.inference, k)?,
        None => train::detect(&detector, &ds, &cfg.inference)?,
    };
    fs::create_dir_all(&a.out).at(&a.out)?;
    data::write_results(&a.out.join(RESULTS_FILE), &data::to_results(&ds, &dets))?;
    let resolved = RunConfig {
        detector: detector.config().clone(),
        ..cfg
    };
    save_config(&a.out, &resolved)?;
    println!(
        "{} detections on {} images",
        dets.iter().map(|d| d.dets.len()).sum::<usize>(),
        ds.len()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ds = data::load_coco(&a.gt)?;
    let dets = data::load_results(&a.dets, &ds)?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    save_config(&a.out, &RunConfig::default())?;
    if a.proposals {
        let props: Vec<ImageDets> = dets
            .into_iter()
            .map(|mut d| {
                d.dets.iter_mut().for_each(|x| x.category = 0);
                d
            })
            .collect();
        let ar = average_recall(&props, &agnostic_gts(&ds.gts), &PROPOSAL_KS)?;
        write_json(&a.out.join(EVAL_JSON), &ar)?;
        let table = report::recall_table(&ar);
        let p = a.out.join(EVAL_TABLE);
        fs::write(&p, &table).at(&p)?;
        print!("{table}");
    } else {
        write_eval(&ds, &dets, &a.out)?;
        let p = a.out.join(EVAL_TABLE);
        print!("{}", fs::read_to_string(&p).at(&p)?);
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = a.cfg.resolve()?;
    let train_ds = data::load_coco(&a.data)?;
    let held = data::load_coco(&a.eval_data)?;
    let name = match a.param {
        SweepParam::Sigma => "sigma",
        SweepParam::Eta => "eta",
    };
    let mut rows = Vec::with_capacity(a.values.len());
    for &v in &a.values {
        let mut cfg = base.clone();
        match a.param {
            SweepParam::Sigma => cfg.assign.sigma = v,
            SweepParam::Eta => cfg.assign.eta = v,
        }
        cfg.validate()?;
        let dir = a.out.join(format!("{name}_{v}"));
        fs::create_dir_all(&dir).at(&dir)?;
        save_config(&dir, &cfg)?;
        let (detector, _) = train::train(&train_ds, &cfg, Some(&dir))?;
        let dets = train::detect(&detector, &held, &cfg.inference)?;
        data::write_results(&dir.join(RESULTS_FILE), &data::to_results(&held, &dets))?;
        let r = write_eval(&held, &dets, &dir)?;
        let summary = report::dump_targets(
            &train_ds,
            cfg.detector.min_level,
            cfg.detector.max_level,
            &cfg.assign,
            0,
            &dir.join("targets"),
        )?;
        rows.push(SweepRow {
            value: v,
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
            positives: summary.total_positives,
        });
        println!("{name} {v}: AP {:.3} AP50 {:.3}", r.ap, r.ap50);
    }
    save_config(&a.out, &base)?;
    write_json(&a.out.join(SWEEP_JSON), &rows)?;
    let table = report::sweep_table(name, &rows);
    let p = a.out.join(SWEEP_TABLE);
    fs::write(&p, &table).at(&p)?;
    print!("{table}");
    Ok(())
}
