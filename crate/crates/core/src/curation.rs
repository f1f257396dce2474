//! Streaming metadata curation: detection-count, area-ratio, aesthetics and
//! resolution filters, plus the outpaint-margin annotation crop.
//!
//! Records flow through as JSONL, one decision per record, constant memory.
//! The area-ratio rule applies to the largest bounding box; see the stats
//! header emitted by [`run_pipeline`].

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use thiserror::Error;

pub const MIN_BBOXES: usize = 1;
pub const MAX_BBOXES: usize = 3;
pub const MIN_AREA_RATIO: f64 = 0.15;
pub const MIN_AESTHETICS: f64 = 4.5;
pub const MIN_RESOLUTION: u32 = 200;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// A labeled annotation region (keypoint boxes, part masks, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// One metadata row. `width`/`height` describe the current canvas; when
/// `outpaint_margin > 0` the canvas includes an outpainted band of that many
/// pixels on every side and coordinates are canvas-relative.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub human_bboxes: Vec<BBox>,
    pub aesthetic_score: f64,
    #[serde(default)]
    pub annotations: Vec<Region>,
    #[serde(default)]
    pub outpaint_margin: u32,
}

/// Filter decision; rejections carry the first failed rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    Reject(RejectReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    BboxCount,
    AreaRatio,
    Aesthetics,
    Resolution,
}

impl RejectReason {
    pub fn name(&self) -> &'static str {
        match self {
            RejectReason::BboxCount => "bbox_count",
            RejectReason::AreaRatio => "area_ratio",
            RejectReason::Aesthetics => "aesthetics",
            RejectReason::Resolution => "resolution",
        }
    }
}

/// Keep iff 1..=3 detections, largest-bbox area ratio above 0.15, aesthetic
/// score at least 4.5 and both sides at least 200 px. Rules check in that
/// order; the first failure names the rejection.
pub fn filter_record(r: &CurationRecord) -> Decision {
    let n = r.human_bboxes.len();
    if !(MIN_BBOXES..=MAX_BBOXES).contains(&n) {
        return Decision::Reject(RejectReason::BboxCount);
    }
    let canvas = (r.width as f64) * (r.height as f64);
    let max_area = r.human_bboxes.iter().map(BBox::area).fold(0.0_f64, f64::max);
    if canvas <= 0.0 || max_area / canvas <= MIN_AREA_RATIO {
        return Decision::Reject(RejectReason::AreaRatio);
    }
    if r.aesthetic_score < MIN_AESTHETICS {
        return Decision::Reject(RejectReason::Aesthetics);
    }
    if r.width.min(r.height) < MIN_RESOLUTION {
        return Decision::Reject(RejectReason::Resolution);
    }
    Decision::Keep
}

fn clip_rect(x: f64, y: f64, w: f64, h: f64, width: f64, height: f64) -> Option<(f64, f64, f64, f64)> {
    let x0 = x.max(0.0);
    let y0 = y.max(0.0);
    let x1 = (x + w).min(width);
    let y1 = (y + h).min(height);
    if x1 <= x0 || y1 <= y0 {
        None
    } else {
        Some((x0, y0, x1 - x0, y1 - y0))
    }
}

/// Translate annotations and boxes back into the original (pre-outpaint)
/// canvas, dropping whatever falls fully inside the outpainted band.
pub fn crop_annotations_to_original(r: &CurationRecord) -> CurationRecord {
    if r.outpaint_margin == 0 {
        return r.clone();
    }
    let m = r.outpaint_margin as f64;
    let ow = (r.width as f64 - 2.0 * m).max(0.0);
    let oh = (r.height as f64 - 2.0 * m).max(0.0);
    let bboxes = r
        .human_bboxes
        .iter()
        .filter_map(|b| {
            clip_rect(b.x - m, b.y - m, b.w, b.h, ow, oh)
                .map(|(x, y, w, h)| BBox { x, y, w, h, confidence: b.confidence })
        })
        .collect();
    let annotations = r
        .annotations
        .iter()
        .filter_map(|a| {
            clip_rect(a.x - m, a.y - m, a.w, a.h, ow, oh)
                .map(|(x, y, w, h)| Region { label: a.label.clone(), x, y, w, h })
        })
        .collect();
    CurationRecord {
        image_id: r.image_id.clone(),
        width: ow as u32,
        height: oh as u32,
        human_bboxes: bboxes,
        aesthetic_score: r.aesthetic_score,
        annotations,
        outpaint_margin: 0,
    }
}

/// Counters reported by [`run_pipeline`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub total: usize,
    pub kept: usize,
    pub rejected: BTreeMap<String, usize>,
    pub schema_errors: usize,
}

/// Stream records from `input` to `output`: parse, crop to the original
/// canvas, filter, and forward the kept rows unchanged in order. Malformed
/// lines are counted, never fatal.
pub fn run_pipeline<R: BufRead, W: Write>(
    input: R,
    output: &mut W,
) -> Result<PipelineStats, CurationError> {
    let mut stats = PipelineStats::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.total += 1;
        let record: CurationRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                stats.schema_errors += 1;
                continue;
            }
        };
        let cropped = crop_annotations_to_original(&record);
        match filter_record(&cropped) {
            Decision::Keep => {
                stats.kept += 1;
                writeln!(output, "{}", serde_json::to_string(&cropped).expect("serializable"))?;
            }
            Decision::Reject(reason) => {
                *stats.rejected.entry(reason.name().to_string()).or_insert(0) += 1;
            }
        }
    }
    Ok(stats)
}

/// Human-readable stats block, including the documented reading of the
/// area-ratio rule.
pub fn stats_report(stats: &PipelineStats) -> String {
    let mut s = String::new();
    s.push_str("# metadata filter: 1..=3 boxes, largest-bbox area ratio > 0.15,\n");
    s.push_str("# aesthetics >= 4.5, min side >= 200 (area rule uses the largest\n");
    s.push_str("# box; the union-of-areas reading is noted as an open choice)\n");
    s.push_str(&format!("total: {}\nkept: {}\nschema_errors: {}\n", stats.total, stats.kept, stats.schema_errors));
    for (reason, count) in &stats.rejected {
        s.push_str(&format!("rejected.{}: {}\n", reason, count));
    }
    s
}
