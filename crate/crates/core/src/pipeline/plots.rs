//! Plot data tables and basic SVG figures rendered from a run directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::tables::{
    self, read_csv, write_csv, AccuracyRow, BreakdownTableRow, GridFillRow, GroupPhaseRow, InterferenceRow,
    PoolRow, Table,
};
use crate::error::{Error, Result};
use crate::interference::InterferenceLevel;
use crate::phases::Phase;

pub const PLOT_DIR: &str = "plots";
const DISTRIBUTION_BINS: usize = 20;
const SIZE: (u32, u32) = (800, 500);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Accuracy,
    DeltaSByGroupPhase,
    InterferenceBreakdown,
    HeatmapCounts,
    InterferenceDistribution,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::Accuracy,
        PlotKind::DeltaSByGroupPhase,
        PlotKind::InterferenceBreakdown,
        PlotKind::HeatmapCounts,
        PlotKind::InterferenceDistribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Accuracy => "accuracy",
            PlotKind::DeltaSByGroupPhase => "delta_s_by_group_phase",
            PlotKind::InterferenceBreakdown => "interference_breakdown",
            PlotKind::HeatmapCounts => "heatmap_counts",
            PlotKind::InterferenceDistribution => "interference_distribution",
        }
    }

    /// Run-directory tables the plot is drawn from.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            PlotKind::Accuracy => &[tables::ACCURACY],
            PlotKind::DeltaSByGroupPhase => &[tables::GROUP_PHASE_STATS],
            PlotKind::InterferenceBreakdown => &[tables::BREAKDOWN],
            PlotKind::HeatmapCounts => &[tables::GRID_FILL],
            PlotKind::InterferenceDistribution => &[tables::INTERFERENCE, tables::POOL],
        }
    }

    /// Whether the plot only needs the core (non-interference) stages.
    pub fn needs_interference(self) -> bool {
        !matches!(self, PlotKind::Accuracy | PlotKind::DeltaSByGroupPhase)
    }

    pub fn data_file(self) -> String {
        format!("{PLOT_DIR}/{}.csv", self.as_str())
    }

    pub fn figure_file(self) -> String {
        format!("{PLOT_DIR}/{}.svg", self.as_str())
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind `{s}`")))
    }
}

macro_rules! plot_table {
    (pub struct $name:ident { $(pub $field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: $ty),*
        }

        impl Table for $name {
            const COLUMNS: &'static [&'static str] = &[$(stringify!($field)),*];
        }
    };
}

plot_table! {
    pub struct AccuracyPlotRow {
        pub backend_id: String,
        pub r: usize,
        pub normalized: f64,
        pub accuracy: f64,
        pub n: usize,
        pub phase: Option<Phase>,
    }
}

plot_table! {
    pub struct DeltaSPlotRow {
        pub phase: Phase,
        pub midpoint: f64,
        pub mean_delta_s: Option<f64>,
        pub standard_error: Option<f64>,
        pub n_pairs: usize,
        pub significant: bool,
    }
}

plot_table! {
    pub struct BreakdownPlotRow {
        pub level: InterferenceLevel,
        pub phase: Phase,
        pub midpoint: f64,
        pub mean_delta_s: Option<f64>,
        pub standard_error: Option<f64>,
        pub n_pairs: usize,
    }
}

plot_table! {
    pub struct HeatmapRow {
        pub group_index: usize,
        pub midpoint: f64,
        pub bin_index: usize,
        pub bin_lo: f64,
        pub bin_hi: f64,
        pub count: usize,
    }
}

plot_table! {
    pub struct DistributionRow {
        pub source: String,
        pub bin_lo: f64,
        pub bin_hi: f64,
        pub count: usize,
    }
}

fn need<T: Table>(dir: &Path, name: &str) -> Result<Vec<T>> {
    read_csv(&dir.join(name))
}

fn draw_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Plot(format!("{e:?}"))
}

fn phase_color(p: Phase) -> RGBColor {
    match p {
        Phase::Encoding => RGBColor(31, 119, 180),
        Phase::Consolidation => RGBColor(214, 39, 40),
        Phase::Forgetting => RGBColor(44, 160, 44),
    }
}

fn level_color(l: InterferenceLevel) -> RGBColor {
    match l {
        InterferenceLevel::Low => RGBColor(102, 194, 165),
        InterferenceLevel::Mid => RGBColor(252, 141, 98),
        InterferenceLevel::High => RGBColor(141, 160, 203),
    }
}

/// `(lo, hi)` padded so that a flat range still has extent.
fn padded(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn render_accuracy(rows: &[AccuracyPlotRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = padded(rows.iter().map(|r| r.normalized));
    let mut chart = ChartBuilder::on(&root)
        .caption("Accuracy across phases of learning", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..1.05)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("normalized repetition")
        .y_desc("accuracy")
        .draw()
        .map_err(draw_err)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.normalized, r.accuracy)).collect();
    chart.draw_series(LineSeries::new(pts.clone(), &BLACK)).map_err(draw_err)?;
    chart
        .draw_series(rows.iter().map(|r| {
            let c = r.phase.map_or(BLACK, phase_color);
            Circle::new((r.normalized, r.accuracy), 4, c.filled())
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn render_delta_s(rows: &[DeltaSPlotRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let present: Vec<&DeltaSPlotRow> = rows.iter().filter(|r| r.mean_delta_s.is_some()).collect();
    let (x0, x1) = padded(rows.iter().map(|r| r.midpoint));
    let (y0, y1) = padded(present.iter().flat_map(|r| {
        let m = r.mean_delta_s.unwrap_or(0.0);
        let se = r.standard_error.unwrap_or(0.0);
        [m - se, m + se, 0.0]
    }));
    let mut chart = ChartBuilder::on(&root)
        .caption("Representational change due to learning", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("pair similarity before learning")
        .y_desc("mean delta S")
        .draw()
        .map_err(draw_err)?;
    for phase in Phase::ALL {
        let color = phase_color(phase);
        let series: Vec<&&DeltaSPlotRow> = present.iter().filter(|r| r.phase == phase).collect();
        let line: Vec<(f64, f64)> = series.iter().map(|r| (r.midpoint, r.mean_delta_s.unwrap_or(0.0))).collect();
        chart
            .draw_series(LineSeries::new(line, &color))
            .map_err(draw_err)?
            .label(phase.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(series.iter().filter_map(|r| {
                let m = r.mean_delta_s?;
                let se = r.standard_error?;
                Some(ErrorBar::new_vertical(r.midpoint, m - se, m, m + se, color, 6))
            }))
            .map_err(draw_err)?;
        chart
            .draw_series(series.iter().filter(|r| r.significant).map(|r| {
                TriangleMarker::new((r.midpoint, r.mean_delta_s.unwrap_or(0.0)), 7, color.filled())
            }))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn render_breakdown(rows: &[BreakdownPlotRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (SIZE.0, SIZE.1 * 3 / 2)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let panels = root.split_evenly((3, 1));
    let (x0, x1) = padded(rows.iter().map(|r| r.midpoint));
    let (y0, y1) = padded(rows.iter().filter_map(|r| r.mean_delta_s));
    for (panel, phase) in panels.iter().zip(Phase::ALL) {
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("delta S by interference level: {phase}"), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        chart.configure_mesh().draw().map_err(draw_err)?;
        for level in InterferenceLevel::ALL {
            let color = level_color(level);
            let line: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.phase == phase && r.level == level)
                .filter_map(|r| Some((r.midpoint, r.mean_delta_s?)))
                .collect();
            chart
                .draw_series(LineSeries::new(line, &color))
                .map_err(draw_err)?
                .label(level.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)
}

fn render_heatmap(rows: &[HeatmapRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let groups = rows.iter().map(|r| r.group_index + 1).max().unwrap_or(1);
    let bins = rows.iter().map(|r| r.bin_index + 1).max().unwrap_or(1);
    let max = rows.iter().map(|r| r.count).max().unwrap_or(0).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("Pairs per (similarity group x interference bin)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..groups, 0..bins)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("similarity group")
        .y_desc("interference bin")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(rows.iter().map(|r| {
            let shade = (255.0 * (1.0 - r.count as f64 / max)) as u8;
            Rectangle::new(
                [(r.group_index, r.bin_index), (r.group_index + 1, r.bin_index + 1)],
                RGBColor(shade, shade, 255).filled(),
            )
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn render_distribution(rows: &[DistributionRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = padded(rows.iter().flat_map(|r| [r.bin_lo, r.bin_hi]));
    let ymax = rows.iter().map(|r| r.count).max().unwrap_or(0).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("Interference score distribution", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..ymax * 1.05)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("interference score")
        .y_desc("pairs")
        .draw()
        .map_err(draw_err)?;
    for (source, color) in [("pool", RGBColor(170, 170, 170)), ("stimuli", RGBColor(214, 39, 40))] {
        chart
            .draw_series(rows.iter().filter(|r| r.source == source).map(|r| {
                Rectangle::new([(r.bin_lo, 0.0), (r.bin_hi, r.count as f64)], color.mix(0.6).filled())
            }))
            .map_err(draw_err)?
            .label(source)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Equal-width histogram of both score sets over their joint range.
fn distribution_rows(stimuli: &[f64], pool: &[f64]) -> Vec<DistributionRow> {
    let all = stimuli.iter().chain(pool);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / DISTRIBUTION_BINS as f64 } else { 1.0 };
    let mut rows = Vec::new();
    for (source, values) in [("stimuli", stimuli), ("pool", pool)] {
        let mut counts = [0usize; DISTRIBUTION_BINS];
        for &v in values {
            let i = (((v - lo) / width) as usize).min(DISTRIBUTION_BINS - 1);
            counts[i] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            rows.push(DistributionRow {
                source: source.to_string(),
                bin_lo: lo + i as f64 * width,
                bin_hi: lo + (i + 1) as f64 * width,
                count,
            });
        }
    }
    rows
}

/// Writes `plots/<kind>.csv` and `plots/<kind>.svg` for each kind and
/// returns the written paths relative to `dir`.
pub fn export_plots(dir: &Path, kinds: &[PlotKind]) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for &kind in kinds {
        let data = kind.data_file();
        let fig = kind.figure_file();
        let (data_path, fig_path): (PathBuf, PathBuf) = (dir.join(&data), dir.join(&fig));
        match kind {
            PlotKind::Accuracy => {
                let rows: Vec<AccuracyPlotRow> = need::<AccuracyRow>(dir, tables::ACCURACY)?
                    .into_iter()
                    .map(|a| AccuracyPlotRow {
                        backend_id: a.backend_id,
                        r: a.r,
                        normalized: a.normalized,
                        accuracy: a.accuracy,
                        n: a.n,
                        phase: a.phase,
                    })
                    .collect();
                write_csv(&data_path, &rows)?;
                render_accuracy(&rows, &fig_path)?;
            }
            PlotKind::DeltaSByGroupPhase => {
                let rows: Vec<DeltaSPlotRow> = need::<GroupPhaseRow>(dir, tables::GROUP_PHASE_STATS)?
                    .into_iter()
                    .map(|g| DeltaSPlotRow {
                        phase: g.phase,
                        midpoint: g.midpoint,
                        mean_delta_s: g.mean_delta_s,
                        standard_error: g.standard_error,
                        n_pairs: g.n_pairs,
                        significant: g.rejected,
                    })
                    .collect();
                write_csv(&data_path, &rows)?;
                render_delta_s(&rows, &fig_path)?;
            }
            PlotKind::InterferenceBreakdown => {
                let rows: Vec<BreakdownPlotRow> = need::<BreakdownTableRow>(dir, tables::BREAKDOWN)?
                    .into_iter()
                    .map(|b| BreakdownPlotRow {
                        level: b.level,
                        phase: b.phase,
                        midpoint: b.midpoint,
                        mean_delta_s: b.mean_delta_s,
                        standard_error: b.standard_error,
                        n_pairs: b.n_pairs,
                    })
                    .collect();
                write_csv(&data_path, &rows)?;
                render_breakdown(&rows, &fig_path)?;
            }
            PlotKind::HeatmapCounts => {
                let rows: Vec<HeatmapRow> = need::<GridFillRow>(dir, tables::GRID_FILL)?
                    .into_iter()
                    .map(|g| HeatmapRow {
                        group_index: g.group_index,
                        midpoint: (g.theta_min + g.theta_max) / 2.0,
                        bin_index: g.bin_index,
                        bin_lo: g.bin_lo,
                        bin_hi: g.bin_hi,
                        count: g.total,
                    })
                    .collect();
                write_csv(&data_path, &rows)?;
                render_heatmap(&rows, &fig_path)?;
            }
            PlotKind::InterferenceDistribution => {
                let stim: Vec<f64> = need::<InterferenceRow>(dir, tables::INTERFERENCE)?
                    .iter()
                    .map(|r| r.score)
                    .collect();
                let pool: Vec<f64> = need::<PoolRow>(dir, tables::POOL)?.iter().map(|r| r.score).collect();
                let rows = distribution_rows(&stim, &pool);
                write_csv(&data_path, &rows)?;
                render_distribution(&rows, &fig_path)?;
            }
        }
        written.push(data);
        written.push(fig);
    }
    Ok(written)
}
