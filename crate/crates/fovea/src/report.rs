//! Plain-text tables and the target-map dump.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fovea_core::assignment::{build_targets, CellLabel, TargetMaps};
use fovea_core::evaluation::{AspectBucketReport, EvalResult};
use fovea_core::{AssignConfig, PyramidSpec};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::{write_json, Dataset};
use crate::error::{IoContext, Result};

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn opt(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".into())
}

/// Detection metrics in the usual `AP AP50 AP75 APs APm APl` layout, followed
/// by per-class AP, recall and the aspect-ratio slices when present.
pub fn eval_table(
    result: &EvalResult,
    class_names: &[String],
    aspect: Option<&AspectBucketReport>,
) -> String {
    let mut s = String::new();
    writeln!(s, "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "AP", "AP50", "AP75", "APs", "APm", "APl").unwrap();
    writeln!(
        s,
        "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        pct(result.ap),
        pct(result.ap50),
        pct(result.ap75),
        opt(result.ap_small),
        opt(result.ap_medium),
        opt(result.ap_large)
    )
    .unwrap();
    if !result.ar_by_k.is_empty() {
        writeln!(s).unwrap();
        let heads: Vec<String> = result.ar_by_k.keys().map(|k| format!("AR{k}")).collect();
        let vals: Vec<String> = result.ar_by_k.values().map(|v| pct(*v)).collect();
        writeln!(s, "{}", heads.iter().map(|h| format!("{h:>6}")).collect::<Vec<_>>().join(" ")).unwrap();
        writeln!(s, "{}", vals.iter().map(|v| format!("{v:>6}")).collect::<Vec<_>>().join(" ")).unwrap();
    }
    if !result.per_class_ap.is_empty() {
        writeln!(s).unwrap();
        writeln!(s, "{:<12} {:>6}", "class", "AP").unwrap();
        for (c, ap) in &result.per_class_ap {
            let name = class_names.get(*c).cloned().unwrap_or_else(|| c.to_string());
            writeln!(s, "{:<12} {:>6}", name, pct(*ap)).unwrap();
        }
    }
    if let Some(a) = aspect {
        writeln!(s).unwrap();
        writeln!(s, "{:>6} {:>6} {:>6} {:>6}", "all", "u<3", "3-5", "u>5").unwrap();
        writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>6}",
            pct(a.ap_all),
            opt(a.ap_u_lt3),
            opt(a.ap_u_3to5),
            opt(a.ap_u_gt5)
        )
        .unwrap();
    }
    s
}

/// Proposal recall table, one column per proposal count.
pub fn recall_table(ar: &BTreeMap<usize, f64>) -> String {
    let heads: Vec<String> = ar.keys().map(|k| format!("{:>7}", format!("AR@{k}"))).collect();
    let vals: Vec<String> = ar.values().map(|v| format!("{:>7}", pct(*v))).collect();
    format!("{}\n{}\n", heads.join(" "), vals.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub positives: usize,
}

/// One row per swept value.
pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:>6} {:>6} {:>6} {:>6} {:>10}", param, "AP", "AP50", "AP75", "positives").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>6} {:>10}",
            r.value,
            pct(r.ap),
            pct(r.ap50),
            pct(r.ap75),
            r.positives
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveCell {
    pub x: usize,
    pub y: usize,
    pub category: usize,
    pub object: usize,
    pub offsets: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDump {
    pub level: u32,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub positives: Vec<PositiveCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDump {
    pub image_id: u64,
    pub levels: Vec<LevelDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub sigma: f64,
    pub eta: f64,
    pub images: usize,
    pub objects: usize,
    pub total_positives: usize,
    /// Positive cells per pyramid level.
    pub per_level: BTreeMap<u32, usize>,
    /// Objects that own at least one positive cell.
    pub objects_with_positives: usize,
}

pub const TARGETS_FILE: &str = "targets.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HEATMAP_DIR: &str = "heatmaps";

fn level_dump(t: &TargetMaps) -> LevelDump {
    LevelDump {
        level: t.level.level,
        stride: t.level.stride,
        grid_w: t.level.grid_w,
        grid_h: t.level.grid_h,
        positives: t
            .positives()
            .map(|(x, y, category, object)| PositiveCell {
                x,
                y,
                category,
                object,
                offsets: t.boxes[t.index(x, y)].to_array(),
            })
            .collect(),
    }
}

/// Grayscale map of one class's positive cells, scaled so the map maximum is 255.
pub fn class_heatmap(t: &TargetMaps, class: usize) -> GrayImage {
    let (w, h) = (t.level.grid_w, t.level.grid_h);
    let vals: Vec<f64> = t
        .cls
        .iter()
        .map(|c| match c {
            CellLabel::Positive { category, .. } if *category == class => 1.0,
            _ => 0.0,
        })
        .collect();
    let max = vals.iter().cloned().fold(0.0, f64::max);
    let px = vals
        .iter()
        .map(|v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches grid")
}

/// Builds target maps for every image and writes the JSON dump, the summary
/// and per-class heatmaps for the first `heatmap_images` images.
pub fn dump_targets(
    dataset: &Dataset,
    min_level: u32,
    max_level: u32,
    assign: &AssignConfig,
    heatmap_images: usize,
    out_dir: &Path,
) -> Result<TargetSummary> {
    assign.validate()?;
    let classes = dataset.num_classes();
    let mut summary = TargetSummary {
        sigma: assign.sigma,
        eta: assign.eta,
        images: dataset.len(),
        objects: 0,
        total_positives: 0,
        per_level: (min_level..=max_level).map(|l| (l, 0)).collect(),
        objects_with_positives: 0,
    };
    let mut dumps = Vec::with_capacity(dataset.len());
    let heat_dir = out_dir.join(HEATMAP_DIR);
    for (i, (info, gts)) in dataset.images.iter().zip(&dataset.gts).enumerate() {
        let pyramid = PyramidSpec::new(info.width, info.height, min_level, max_level)?;
        let maps = build_targets(&gts.gts, &pyramid, assign, classes)?;
        let mut owned = vec![false; gts.gts.len()];
        for t in &maps {
            *summary.per_level.entry(t.level.level).or_default() += t.pos_count;
            summary.total_positives += t.pos_count;
            for (_, _, _, obj) in t.positives() {
                owned[obj] = true;
            }
            if i < heatmap_images {
                fs::create_dir_all(&heat_dir).at(&heat_dir)?;
                for c in 0..classes {
                    let p = heat_dir.join(format!("{:06}_p{}_c{}.png", info.id, t.level.level, c));
                    class_heatmap(t, c).save(&p).at(&p)?;
                }
            }
        }
        summary.objects += gts.gts.len();
        summary.objects_with_positives += owned.iter().filter(|o| **o).count();
        dumps.push(ImageDump {
            image_id: info.id,
            levels: maps.iter().map(level_dump).collect(),
        });
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    write_json(&out_dir.join(TARGETS_FILE), &dumps)?;
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
