//! Detection evaluation: greedy matching against ground truth, per-class
//! average precision with the all-points precision envelope, and mAP over
//! classes and IoU thresholds. Detections pool across images and sort by
//! score globally; ties break by insertion order so reports are
//! deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Manifest, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{iou, to_corners, BoxCCWH};
use crate::student::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5],
            score_floor: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        if self
            .iou_thresholds
            .iter()
            .any(|t| !(0.0..1.0).contains(t) || *t == 0.0)
        {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Per-class AP at every threshold plus the class/detection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// `ap[t][c]`: AP of class `c` at threshold index `t`; `None` when the
    /// class has neither ground truth nor detections.
    pub ap: Vec<Vec<Option<f64>>>,
    pub gt_counts: Vec<usize>,
    pub det_counts: Vec<usize>,
    pub map: f64,
}

impl EvalReport {
    /// CSV rows `(class, threshold, ap)`; undefined APs render empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou_threshold,ap\n");
        for (t, &thresh) in self.iou_thresholds.iter().enumerate() {
            for (c, ap) in self.ap[t].iter().enumerate() {
                match ap {
                    Some(v) => out.push_str(&format!("{c},{thresh},{v}\n")),
                    None => out.push_str(&format!("{c},{thresh},\n")),
                }
            }
        }
        out
    }
}

/// Greedy matching of same-class detections against one image's ground
/// truths. Detections are processed in descending score order (stable for
/// ties) and the returned TP/FP flags follow that order. A detection is a TP
/// when the highest-IoU *unmatched* ground truth reaches the threshold; each
/// ground truth matches at most once.
pub fn match_detections(dets: &[Detection], gts: &[BoxCCWH], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let dc = to_corners(dets[i].bbox);
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = iou(&dc, &to_corners(*g));
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        match best {
            Some((v, j)) if v >= iou_thresh => {
                used[j] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Area under the precision envelope for TP/FP flags in descending score
/// order. `None` when undefined (no ground truth and no detections).
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    if flags.is_empty() {
        return Some(0.0);
    }
    let n = flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope from the right
    let mut env = precision.clone();
    for i in (0..n - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev_r) * env[i];
        prev_r = recall[i];
    }
    Some(ap)
}

/// Pool detections per class across images, match per image in global score
/// order, and reduce to mAP (mean over defined class APs, then thresholds).
pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    gts_by_image: &BTreeMap<String, Vec<ObjectAnnotation>>,
    classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    for id in dets_by_image.keys() {
        if !gts_by_image.contains_key(id) {
            return Err(Error::Eval(format!("detections for unknown image {id}")));
        }
    }
    for (id, dets) in dets_by_image {
        if let Some(d) = dets.iter().find(|d| d.class_id >= classes) {
            return Err(Error::Eval(format!(
                "image {id}: detection class {} out of range",
                d.class_id
            )));
        }
    }
    for (id, gts) in gts_by_image {
        if let Some(g) = gts.iter().find(|g| g.class_id >= classes) {
            return Err(Error::Eval(format!(
                "image {id}: ground-truth class {} out of range",
                g.class_id
            )));
        }
    }

    let mut gt_counts = vec![0usize; classes];
    for gts in gts_by_image.values() {
        for g in gts {
            gt_counts[g.class_id] += 1;
        }
    }
    let mut det_counts = vec![0usize; classes];

    // (class, image, score, bbox) pooled in deterministic order
    let mut pooled: Vec<Vec<(String, f64, BoxCCWH)>> = vec![Vec::new(); classes];
    for (id, dets) in dets_by_image {
        for d in dets {
            if d.score >= cfg.score_floor {
                pooled[d.class_id].push((id.clone(), d.score, d.bbox));
                det_counts[d.class_id] += 1;
            }
        }
    }

    let mut ap = vec![vec![None; classes]; cfg.iou_thresholds.len()];
    for (ti, &thresh) in cfg.iou_thresholds.iter().enumerate() {
        for c in 0..classes {
            let mut dets = pooled[c].clone();
            dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            // per-image matched flags
            let mut used: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
            let mut flags = Vec::with_capacity(dets.len());
            for (img, _score, bbox) in &dets {
                let gts: Vec<&ObjectAnnotation> = gts_by_image[img]
                    .iter()
                    .filter(|g| g.class_id == c)
                    .collect();
                let used_flags = used
                    .entry(img.as_str())
                    .or_insert_with(|| vec![false; gts.len()]);
                let dc = to_corners(*bbox);
                let mut best: Option<(f64, usize)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if used_flags[j] {
                        continue;
                    }
                    let v = iou(&dc, &to_corners(g.bbox));
                    if best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, j));
                    }
                }
                match best {
                    Some((v, j)) if v >= thresh => {
                        used_flags[j] = true;
                        flags.push(true);
                    }
                    _ => flags.push(false),
                }
            }
            ap[ti][c] = average_precision(&flags, gt_counts[c]);
        }
    }

    let mut per_thresh = Vec::new();
    for row in &ap {
        let defined: Vec<f64> = row.iter().filter_map(|x| *x).collect();
        if !defined.is_empty() {
            per_thresh.push(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    let map = if per_thresh.is_empty() {
        0.0
    } else {
        per_thresh.iter().sum::<f64>() / per_thresh.len() as f64
    };

    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap,
        gt_counts,
        det_counts,
        map,
    })
}

/// Ground truths of the listed manifest entries, keyed by image id.
pub fn gts_from_manifest(m: &Manifest, ids: &[String]) -> BTreeMap<String, Vec<ObjectAnnotation>> {
    let mut out = BTreeMap::new();
    for id in ids {
        if let Some(e) = m.entry(id) {
            out.insert(id.clone(), e.objects.clone());
        }
    }
    out
}

// --- Detections file --------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsFile {
    version: u32,
    detections: Vec<DetEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetEntry {
    image_id: String,
    class_id: usize,
    bbox: [f64; 4],
    score: f64,
}

pub fn save_detections(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    path: &Path,
) -> Result<()> {
    let file = DetectionsFile {
        version: 1,
        detections: dets_by_image
            .iter()
            .flat_map(|(id, dets)| {
                dets.iter().map(move |d| DetEntry {
                    image_id: id.clone(),
                    class_id: d.class_id,
                    bbox: d.bbox.to_array(),
                    score: d.score,
                })
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Eval(format!("detections serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DetectionsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("detections version {} unsupported", file.version),
        });
    }
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in file.detections {
        let bbox = BoxCCWH::from_array(d.bbox)?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Eval(format!("score {} outside [0,1]", d.score)));
        }
        out.entry(d.image_id).or_default().push(Detection {
            bbox,
            class_id: d.class_id,
            score: d.score,
        });
    }
    Ok(out)
}
