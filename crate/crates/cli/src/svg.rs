//! Deterministic SVG rendering: grid-table heatmaps (policy and value
//! views) and training-trace line plots. Identical inputs produce
//! byte-identical files: fixed palette, fixed geometry, fixed number
//! formatting.

use seqstop::error::{Error, Result};

/// A parsed CSV table: header names plus rows of raw fields.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_table(csv: &str) -> Result<Table> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(None, "empty table"))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != columns.len() {
            return Err(Error::data(
                Some(i + 2),
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        rows.push(fields);
    }
    Ok(Table { columns, rows })
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::data(None, format!("table is missing column `{name}`")))
    }

    fn f64_at(&self, row: &[String], col: usize) -> Option<f64> {
        let field = &row[col];
        if field.is_empty() {
            None
        } else {
            field.parse().ok()
        }
    }
}

/// What a heatmap colors: the argmax policy, or one value column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapStyle {
    Policy,
    Value(&'static str),
    /// For region tables: mode_action plus a visitation mask.
    Regions,
}

const CELL: f64 = 8.0;
const MARGIN_LEFT: f64 = 54.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 40.0;
const MARGIN_RIGHT: f64 = 120.0;

const ACTION_COLORS: [&str; 3] = ["#4878cf", "#d65f5f", "#6acc65"];
const ACTION_NAMES: [&str; 3] = ["continue", "stop-futility", "stop-success"];
const UNVISITED_COLOR: &str = "#d9d9d9";

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Linear three-stop palette from cold to hot, on [0, 1].
fn value_color(x: f64) -> String {
    let stops = [(0x2b, 0x33, 0x8a), (0xdd, 0xd9, 0x73), (0xb2, 0x18, 0x28)];
    let x = x.clamp(0.0, 1.0);
    let (a, b, t) = if x < 0.5 {
        (stops[0], stops[1], x * 2.0)
    } else {
        (stops[1], stops[2], (x - 0.5) * 2.0)
    };
    let mix = |p: u8, q: u8| -> u8 { (p as f64 + (q as f64 - p as f64) * t).round() as u8 };
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Renders a grid-table CSV (the shared `i0,i1,...` schema) as a cell
/// heatmap. Cells with empty entries render gray.
pub fn render_heatmap(csv: &str, style: HeatmapStyle, title: &str) -> Result<String> {
    let table = parse_table(csv)?;
    if table.rows.is_empty() {
        return Err(Error::data(None, "cannot render an empty table"));
    }
    let i0 = table.column_index("i0")?;
    let i1 = table.column_index("i1")?;
    let c0 = table.column_index("c0")?;
    let c1 = table.column_index("c1")?;
    let color_col = match style {
        HeatmapStyle::Policy => table.column_index("policy")?,
        HeatmapStyle::Value(name) => table.column_index(name)?,
        HeatmapStyle::Regions => table.column_index("mode_action")?,
    };
    let visits_col = match style {
        HeatmapStyle::Regions => Some(table.column_index("visits")?),
        _ => None,
    };

    let mut max_b0 = 0u32;
    let mut max_b1 = 0u32;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &table.rows {
        let b0: u32 = row[i0]
            .parse()
            .map_err(|_| Error::data(None, format!("bad i0 value `{}`", row[i0])))?;
        let b1: u32 = row[i1]
            .parse()
            .map_err(|_| Error::data(None, format!("bad i1 value `{}`", row[i1])))?;
        max_b0 = max_b0.max(b0);
        max_b1 = max_b1.max(b1);
        if matches!(style, HeatmapStyle::Value(_)) {
            if let Some(v) = table.f64_at(row, color_col) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let rows_n = max_b0 as f64 + 1.0;
    let cols_n = max_b1 as f64 + 1.0;
    // Axis 0 runs along x (time / sd rows), axis 1 along y, y flipped so
    // larger axis-1 values sit higher.
    let width = MARGIN_LEFT + rows_n * CELL + MARGIN_RIGHT;
    let height = MARGIN_TOP + cols_n * CELL + MARGIN_BOTTOM;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{}</text>\n",
        fmt(MARGIN_LEFT),
        title
    ));

    let mut c0_min: Option<(f64, f64)> = None; // (value at min b0, value at max b0)
    let mut c1_min: Option<(f64, f64)> = None;
    for row in &table.rows {
        let b0: u32 = row[i0].parse().unwrap();
        let b1: u32 = row[i1].parse().unwrap();
        let x = MARGIN_LEFT + b0 as f64 * CELL;
        let y = MARGIN_TOP + (cols_n - 1.0 - b1 as f64) * CELL;
        let color = match style {
            HeatmapStyle::Policy | HeatmapStyle::Regions => {
                let masked_out = visits_col
                    .map(|vc| row[vc].parse::<u64>().unwrap_or(0) == 0)
                    .unwrap_or(false);
                if row[color_col].is_empty() || masked_out {
                    UNVISITED_COLOR.to_string()
                } else {
                    let a: usize = row[color_col].parse().map_err(|_| {
                        Error::data(None, format!("bad action `{}`", row[color_col]))
                    })?;
                    ACTION_COLORS.get(a).copied().unwrap_or(UNVISITED_COLOR).to_string()
                }
            }
            HeatmapStyle::Value(_) => match table.f64_at(row, color_col) {
                Some(v) if hi > lo => value_color((v - lo) / (hi - lo)),
                Some(_) => value_color(0.5),
                None => UNVISITED_COLOR.to_string(),
            },
        };
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            fmt(x),
            fmt(y),
            fmt(CELL),
            fmt(CELL),
            color
        ));
        if let (Some(v0), Some(v1)) = (table.f64_at(row, c0), table.f64_at(row, c1)) {
            if b0 == 0 {
                c0_min.get_or_insert((v0, v0)).0 = v0;
            }
            if b0 == max_b0 {
                c0_min.get_or_insert((v0, v0)).1 = v0;
            }
            if b1 == 0 {
                c1_min.get_or_insert((v1, v1)).0 = v1;
            }
            if b1 == max_b1 {
                c1_min.get_or_insert((v1, v1)).1 = v1;
            }
        }
    }

    // Axis labels from the cell-center ranges.
    if let Some((a, b)) = c0_min {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            fmt(MARGIN_LEFT),
            fmt(MARGIN_TOP + cols_n * CELL + 14.0),
            fmt(a)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_LEFT + rows_n * CELL),
            fmt(MARGIN_TOP + cols_n * CELL + 14.0),
            fmt(b)
        ));
    }
    if let Some((a, b)) = c1_min {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_LEFT - 4.0),
            fmt(MARGIN_TOP + cols_n * CELL),
            fmt(a)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_LEFT - 4.0),
            fmt(MARGIN_TOP + 10.0),
            fmt(b)
        ));
    }

    // Legend.
    match style {
        HeatmapStyle::Policy | HeatmapStyle::Regions => {
            for (i, (color, name)) in ACTION_COLORS.iter().zip(ACTION_NAMES).enumerate() {
                let y = MARGIN_TOP + i as f64 * 16.0;
                out.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
                    fmt(MARGIN_LEFT + rows_n * CELL + 8.0),
                    fmt(y),
                    color
                ));
                out.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
                    fmt(MARGIN_LEFT + rows_n * CELL + 22.0),
                    fmt(y + 9.0),
                    name
                ));
            }
        }
        HeatmapStyle::Value(_) => {
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">[{} .. {}]</text>\n",
                fmt(MARGIN_LEFT + rows_n * CELL + 8.0),
                fmt(MARGIN_TOP + 10.0),
                fmt(lo),
                fmt(hi)
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders a trace CSV as a line plot of `y_col` against `x_col`.
pub fn render_trace(csv: &str, x_col: &str, y_col: &str, title: &str) -> Result<String> {
    let table = parse_table(csv)?;
    if table.rows.is_empty() {
        return Err(Error::data(None, "cannot render an empty trace"));
    }
    let xi = table.column_index(x_col)?;
    let yi = table.column_index(y_col)?;
    let mut points = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let x = table
            .f64_at(row, xi)
            .ok_or_else(|| Error::data(None, format!("bad {x_col} value `{}`", row[xi])))?;
        let y = table
            .f64_at(row, yi)
            .ok_or_else(|| Error::data(None, format!("bad {y_col} value `{}`", row[yi])))?;
        points.push((x, y));
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !(x_hi > x_lo) {
        x_hi = x_lo + 1.0;
    }
    if !(y_hi > y_lo) {
        y_hi = y_lo + 1.0;
    }
    let (w, h) = (480.0, 280.0);
    let (ml, mr, mt, mb) = (60.0, 16.0, 28.0, 36.0);
    let sx = |x: f64| ml + (x - x_lo) / (x_hi - x_lo) * (w - ml - mr);
    let sy = |y: f64| mt + (1.0 - (y - y_lo) / (y_hi - y_lo)) * (h - mt - mb);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{}</text>\n",
        fmt(ml),
        title
    ));
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        fmt(ml),
        fmt(mt),
        fmt(w - ml - mr),
        fmt(h - mt - mb)
    ));
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
        .collect();
    out.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#2b338a\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        path.join(" ")
    ));
    for (v, x, y, anchor) in [
        (x_lo, sx(x_lo), h - mb + 14.0, "start"),
        (x_hi, sx(x_hi), h - mb + 14.0, "end"),
    ] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"{}\">{}</text>\n",
            fmt(x),
            fmt(y),
            anchor,
            fmt(v)
        ));
    }
    for (v, y) in [(y_lo, sy(y_lo)), (y_hi, sy(y_hi))] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            fmt(ml - 4.0),
            fmt(y + 3.0),
            fmt(v)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
