//! Chart-colored scatter plots as SVG text.
//!
//! Output depends only on the cloud's coordinates and labels, so a plot
//! regenerated from the CSV it was drawn next to is byte-identical.

use std::fmt::Write;

use chartflow::data::PointCloud;

/// Chart `k` is drawn in `PALETTE[k % 32]`.
pub const PALETTE: [&str; 32] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
    "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5", "#393b79", "#637939", "#8c6d31", "#843c39",
    "#7b4173", "#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363", "#fd8d3c", "#74c476",
];

/// Canvas edge in pixels.
pub const SIZE: f64 = 512.0;
const MARGIN: f64 = 16.0;
const RADIUS: f64 = 1.5;

/// Scatter of coordinates `axes.0` and `axes.1`, colored by chart label
/// (all points use the first color when the cloud has no labels). The view
/// is the square hull of the points, so aspect ratio is preserved.
pub fn render(cloud: &PointCloud, axes: (usize, usize)) -> String {
    let n = cloud.len();
    let (ax, ay) = axes;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..n {
        let row = cloud.points.row(r);
        for v in [row[ax], row[ay]] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let scale = (SIZE - 2.0 * MARGIN) / (hi - lo);
    let mut s = String::with_capacity(64 * n + 256);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for r in 0..n {
        let row = cloud.points.row(r);
        let x = MARGIN + (row[ax] - lo) * scale;
        // SVG y grows downward.
        let y = SIZE - MARGIN - (row[ay] - lo) * scale;
        let chart = cloud.labels.as_ref().map_or(0, |l| l[r]);
        writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{RADIUS}" fill="{}"/>"#,
            PALETTE[chart % PALETTE.len()]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
