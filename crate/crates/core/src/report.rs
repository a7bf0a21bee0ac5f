//! Plot and table rendering for attack results.
//!
//! Both outputs are pure functions of the input rows: no timestamps, fixed
//! viewport, fixed number formatting.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;

use crate::attack::AttackTrace;
use crate::harness::{aggregate, AggregateRow};
use crate::{Error, Result};

/// Flip count the summary table reports, matching the full-scale protocol.
pub const TABLE_FLIPS: usize = 30;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub const CAPTION_REFERENCE: &str = "Full-scale reference (8-bit CIFAR networks, 5 runs): ResNet50/CIFAR-100 baseline 75.96%, \
BDFA after 30 flips 3.6 ± 1.6%; VGG16/CIFAR-10 after 30 flips BDFA 24.3 ± 2.9% vs BFA 11.5 ± 2.9%.";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub svg: String,
    pub markdown: String,
}

/// One plotted curve: a (network, dataset, mode) triple ordered by flips.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub network: String,
    pub dataset: String,
    pub mode: String,
    pub rows: Vec<AggregateRow>,
}

/// Parses `aggregate.csv`. Row numbers in errors are file line numbers, so
/// the header is line 1.
pub fn read_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<AggregateRow>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| Error::Csv {
            row: e.position().map(|p| p.line() as usize).unwrap_or(row),
            message: e.to_string(),
        })?;
        let bad = |message: &str| Error::Csv { row, message: message.into() };
        let accs = [r.acc_mean, r.acc_min, r.acc_max];
        if accs.iter().any(|a| !a.is_finite() || !(0.0..=1.0).contains(a)) {
            return Err(bad("accuracy outside [0, 1]"));
        }
        if r.acc_min > r.acc_mean + 1e-9 || r.acc_mean > r.acc_max + 1e-9 {
            return Err(bad("expected acc_min <= acc_mean <= acc_max"));
        }
        if r.seeds == 0 {
            return Err(bad("seeds must be positive"));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::Csv { row: 2, message: "no data rows".into() });
    }
    Ok(rows)
}

/// Groups rows into series in first-appearance order; each series must
/// have one row per flip count 0, 1, 2, ...
pub fn group_series(rows: &[AggregateRow]) -> Result<Vec<Series>> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String, String), Vec<AggregateRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.network.clone(), r.dataset.clone(), r.mode.clone());
        if !by_key.contains_key(&key) {
            order.push(key.clone());
        }
        by_key.entry(key).or_default().push(r.clone());
    }
    order
        .into_iter()
        .map(|key| {
            let mut rows = by_key.remove(&key).unwrap();
            rows.sort_by_key(|r| r.flips);
            if rows.iter().enumerate().any(|(i, r)| r.flips != i) {
                return Err(Error::Format(format!("series {}/{}/{} has gaps in flip counts", key.0, key.1, key.2)));
            }
            Ok(Series { network: key.0, dataset: key.1, mode: key.2, rows })
        })
        .collect()
}

fn x_of(flips: usize, max_flips: usize) -> f64 {
    LEFT + (WIDTH - LEFT - RIGHT) * flips as f64 / max_flips.max(1) as f64
}

fn y_of(acc: f64) -> f64 {
    TOP + (HEIGHT - TOP - BOTTOM) * (1.0 - acc)
}

fn points(rows: &[AggregateRow], max_flips: usize, value: impl Fn(&AggregateRow) -> f64) -> Vec<String> {
    rows.iter().map(|r| format!("{:.2},{:.2}", x_of(r.flips, max_flips), y_of(value(r)))).collect()
}

/// Accuracy versus flips: a mean line over a shaded min/max band per series.
pub fn render_svg(series: &[Series]) -> String {
    let max_flips = series.iter().flat_map(|s| s.rows.last()).map(|r| r.flips).max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick * 20);
    }
    let step = ((max_flips as f64 / 6.0).ceil() as usize).max(1);
    for flips in (0..=max_flips).step_by(step) {
        let x = x_of(flips, max_flips);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/>"##, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{flips}</text>"#, y1 + 18.0);
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{x0:.2},{y0:.2} {x0:.2},{y1:.2} {x1:.2},{y1:.2}" fill="none" stroke="#000000"/>"##
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Number of bit flips</text>"#, (x0 + x1) / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Top-1 accuracy (%)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band = points(&ser.rows, max_flips, |r| r.acc_max);
        band.extend(points(&ser.rows, max_flips, |r| r.acc_min).into_iter().rev());
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points(&ser.rows, max_flips, |r| r.acc_mean).join(" ")
        );
        let ly = TOP + 10.0 + 34.0 * i as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.mode.to_uppercase()));
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#555555">{}/{}</text>"##,
            lx + 26.0,
            ly + 17.0,
            escape(&ser.network),
            escape(&ser.dataset)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Row at `TABLE_FLIPS`, or the last row when the series is shorter.
fn table_row(series: &Series) -> &AggregateRow {
    series.rows.get(TABLE_FLIPS).unwrap_or_else(|| series.rows.last().unwrap())
}

/// Mean ± the largest distance from the mean to the min or max, in percent.
pub fn mean_and_deviation(row: &AggregateRow) -> (f64, f64) {
    let dev = (row.acc_max - row.acc_mean).max(row.acc_mean - row.acc_min).max(0.0);
    (100.0 * row.acc_mean, 100.0 * dev)
}

pub fn render_markdown(series: &[Series]) -> String {
    let mut s = String::from("| Network | Dataset | Mode | Seeds | Flips | Top-1 acc. before (%) | Top-1 acc. after (%) |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for ser in series {
        let row = table_row(ser);
        let (before, _) = mean_and_deviation(&ser.rows[0]);
        let (mean, dev) = mean_and_deviation(row);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.2} | {:.2} ± {:.2} |",
            ser.network,
            ser.dataset,
            ser.mode.to_uppercase(),
            row.seeds,
            row.flips,
            before,
            mean,
            dev
        );
    }
    s.push('\n');
    let _ = writeln!(
        s,
        "Top-1 accuracy after {TABLE_FLIPS} bit flips (or the last recorded flip), mean ± maximum deviation over seeds."
    );
    let _ = writeln!(s, "{CAPTION_REFERENCE}");
    s
}

pub fn render(rows: &[AggregateRow]) -> Result<Report> {
    let series = group_series(rows)?;
    Ok(Report { svg: render_svg(&series), markdown: render_markdown(&series) })
}

/// Renders an experiment directory (`aggregate.csv`) or a single trace
/// directory (`trace.json`, treated as a one-seed aggregate).
pub fn report_dir(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    let csv_path = dir.join("aggregate.csv");
    if csv_path.is_file() {
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        return render(&read_aggregate_csv(&text)?);
    }
    if dir.join("trace.json").is_file() {
        let trace = AttackTrace::load(dir)?;
        if trace.baseline_accuracy.is_none() {
            return Err(Error::Format(format!("{}: trace has no accuracy series", dir.display())));
        }
        let label = |s: &str| if s.is_empty() { "unknown".to_string() } else { s.to_string() };
        let rows = aggregate(&label(&trace.network), &label(&trace.dataset), &[&trace], trace.losses.len());
        return render(&rows);
    }
    Err(Error::Format(format!("{}: neither aggregate.csv nor trace.json found", dir.display())))
}
