use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::labels::LabelTable;

use super::{assd, check_shapes, MetricsError, Result};

/// Stored in every report so readers know how the means were formed.
pub const WEIGHTING_NOTE: &str = "means weight every scored region equally, regardless of volume";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub freesurfer_id: u16,
    pub name: String,
    /// 1.0 when the region is absent from both volumes.
    pub dsc: f64,
    /// Millimetres; `None` when either surface is empty.
    pub assd: Option<f64>,
    pub pred_voxels: u64,
    pub ref_voxels: u64,
}

impl RegionMetrics {
    /// Absent from both volumes, so left out of every mean.
    pub fn is_unscored(&self) -> bool {
        self.pred_voxels == 0 && self.ref_voxels == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    /// Dataset tag used for grouping.
    #[serde(default)]
    pub group: Option<String>,
    pub weighting: String,
    pub regions: Vec<RegionMetrics>,
    pub mean_dsc: Option<f64>,
    pub n_dsc: usize,
    pub mean_assd: Option<f64>,
    pub n_assd: usize,
    /// In the reference, absent from the prediction.
    pub missing_regions: usize,
    /// In the prediction, absent from the reference.
    pub spurious_regions: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Scores every non-background table region of FreeSurfer-ID grids.
pub fn evaluate_segmentation(
    case_id: &str,
    pred: &Grid<u16>,
    reference: &Grid<u16>,
    table: &LabelTable,
    spacing: [f64; 3],
) -> Result<CaseReport> {
    check_shapes(pred, reference)?;
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(MetricsError::InvalidSpacing(spacing));
    }
    let dims = pred.dims();
    // per-id bounding boxes over both grids in a single pass
    let mut boxes: std::collections::HashMap<u16, ([usize; 3], [usize; 3])> = Default::default();
    for idx in 0..pred.len() {
        let (p, r) = (pred.as_slice()[idx], reference.as_slice()[idx]);
        if p == 0 && r == 0 {
            continue;
        }
        let c = pred.coords(idx);
        for id in [p, r] {
            let e = boxes.entry(id).or_insert((c, c));
            for a in 0..3 {
                e.0[a] = e.0[a].min(c[a]);
                e.1[a] = e.1[a].max(c[a]);
            }
        }
    }

    let mut regions = Vec::new();
    for entry in table.regions() {
        let id = entry.freesurfer_id;
        let mut m = RegionMetrics { freesurfer_id: id, name: entry.name.clone(), dsc: 1.0, assd: None, pred_voxels: 0, ref_voxels: 0 };
        if let Some(&(lo, hi)) = boxes.get(&id) {
            // one voxel of margin keeps the surface test identical to the full grid
            let lo = lo.map(|x| x.saturating_sub(1));
            let size = [0, 1, 2].map(|a| (hi[a] + 2).min(dims[a]) - lo[a]);
            let a = pred.window(lo, size).map(|&v| v == id);
            let b = reference.window(lo, size).map(|&v| v == id);
            m.pred_voxels = a.as_slice().iter().filter(|&&x| x).count() as u64;
            m.ref_voxels = b.as_slice().iter().filter(|&&x| x).count() as u64;
            m.dsc = super::dsc(&a, &b)?;
            m.assd = assd(&a, &b, spacing)?;
        }
        regions.push(m);
    }

    let scored: Vec<&RegionMetrics> = regions.iter().filter(|r| !r.is_unscored()).collect();
    let dscs: Vec<f64> = scored.iter().map(|r| r.dsc).collect();
    let assds: Vec<f64> = scored.iter().filter_map(|r| r.assd).collect();
    Ok(CaseReport {
        case_id: case_id.to_string(),
        group: None,
        weighting: WEIGHTING_NOTE.to_string(),
        mean_dsc: mean(&dscs),
        n_dsc: dscs.len(),
        mean_assd: mean(&assds),
        n_assd: assds.len(),
        missing_regions: scored.iter().filter(|r| r.ref_voxels > 0 && r.pred_voxels == 0).count(),
        spurious_regions: scored.iter().filter(|r| r.pred_voxels > 0 && r.ref_voxels == 0).count(),
        regions,
    })
}

/// One group's dataset-level statistics over case means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub n_cases: usize,
    pub dsc_mean: Option<f64>,
    pub dsc_sd: Option<f64>,
    pub n_dsc: usize,
    pub assd_mean: Option<f64>,
    pub assd_sd: Option<f64>,
    pub n_assd: usize,
}

/// Mean and population standard deviation.
fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match mean(values) {
        None => (None, None),
        Some(m) => {
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
            (Some(m), Some(var.sqrt()))
        }
    }
}

fn pm(mean: Option<f64>, sd: Option<f64>) -> String {
    match (mean, sd) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "n/a".to_string(),
    }
}

impl ReportRow {
    pub fn dsc_cell(&self) -> String {
        pm(self.dsc_mean, self.dsc_sd)
    }

    pub fn assd_cell(&self) -> String {
        pm(self.assd_mean, self.assd_sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

/// Groups reports by `group_of` in order of first appearance.
pub fn aggregate_reports(reports: &[CaseReport], group_of: impl Fn(&CaseReport) -> String) -> Result<ReportTable> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut order: Vec<String> = Vec::new();
    let mut members: Vec<Vec<&CaseReport>> = Vec::new();
    for r in reports {
        let g = group_of(r);
        match order.iter().position(|o| *o == g) {
            Some(i) => members[i].push(r),
            None => {
                order.push(g);
                members.push(vec![r]);
            }
        }
    }
    let rows = order
        .into_iter()
        .zip(members)
        .map(|(group, cases)| {
            let d: Vec<f64> = cases.iter().filter_map(|c| c.mean_dsc).collect();
            let a: Vec<f64> = cases.iter().filter_map(|c| c.mean_assd).collect();
            let (dsc_mean, dsc_sd) = mean_sd(&d);
            let (assd_mean, assd_sd) = mean_sd(&a);
            ReportRow { group, n_cases: cases.len(), dsc_mean, dsc_sd, n_dsc: d.len(), assd_mean, assd_sd, n_assd: a.len() }
        })
        .collect();
    Ok(ReportTable { rows })
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("group,n_cases,dsc_mean,dsc_sd,n_dsc,assd_mean,assd_sd,n_assd\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.group,
                r.n_cases,
                opt(r.dsc_mean),
                opt(r.dsc_sd),
                r.n_dsc,
                opt(r.assd_mean),
                opt(r.assd_sd),
                r.n_assd
            ));
        }
        out
    }

    /// Plain-text table: one row per group with `mean ± SD` cells.
    pub fn to_text(&self) -> String {
        let header = ["Dataset", "N", "DSC ↑", "ASSD (mm) ↓"];
        let body: Vec<[String; 4]> =
            self.rows.iter().map(|r| [r.group.clone(), r.n_cases.to_string(), r.dsc_cell(), r.assd_cell()]).collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: [&str; 4]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(header);
        out.push_str(&line(widths.map(|w| "-".repeat(w)).each_ref().map(|s| s.as_str())));
        for row in &body {
            out.push_str(&line(row.each_ref().map(|s| s.as_str())));
        }
        out
    }
}
