//! CSV tables, SVG line charts and the run manifest.
//!
//! Every file goes through [`Artifacts`], which remembers what it wrote so the
//! manifest can list it with a checksum. Charts are always written together
//! with a CSV holding exactly the plotted series.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Shortest round-trip representation, so reruns produce identical bytes.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn register(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn csv<S: AsRef<str>>(&mut self, name: &str, header: &[S], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(header.iter().map(|h| h.as_ref()))?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.register(name);
        Ok(())
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.register(name);
        Ok(())
    }

    /// Writes `<stem>.svg` and its twin `<stem>.csv`.
    pub fn chart(&mut self, stem: &str, chart: &Chart) -> Result<()> {
        let (header, rows) = chart.table();
        self.csv(&format!("{stem}.csv"), &header, &rows)?;
        self.text(&format!("{stem}.svg"), &chart.svg())
    }

    /// Writes `manifest.json`; the manifest does not list itself.
    pub fn finish(self, command: &str, model: &str, overrides: Overrides) -> Result<RunManifest> {
        let mut artifacts = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let bytes = fs::read(self.dir.join(name))?;
            artifacts.push(ArtifactEntry {
                file: name.clone(),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            model: model.to_string(),
            out: self.dir.display().to_string(),
            overrides,
            artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub agents: Option<usize>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub ladder: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub mode: Option<String>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub model: String,
    pub out: String,
    pub overrides: Overrides,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    /// Own colour and own legend entry.
    Line,
    /// Thin grey member of a fan, one shared legend entry.
    Fan,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub ys: Vec<f64>,
    pub style: Style,
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub series: Vec<Series>,
    /// Legend text of the fan, e.g. "30 of 300 agents".
    pub fan_label: Option<String>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 78.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round step from {1, 2, 5}·10ᵏ giving about `target` intervals.
fn nice_step(range: f64, target: f64) -> f64 {
    let raw = range / target;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo, 5.0);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|i| i as f64 * step).collect(), decimals)
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str, xs: Vec<f64>) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            xs,
            series: Vec::new(),
            fan_label: None,
        }
    }

    pub fn line(mut self, name: &str, ys: Vec<f64>) -> Self {
        self.series.push(Series { name: name.into(), ys, style: Style::Line });
        self
    }

    pub fn fan(mut self, name: &str, ys: Vec<f64>) -> Self {
        self.series.push(Series { name: name.into(), ys, style: Style::Fan });
        self
    }

    pub fn fan_label(mut self, label: &str) -> Self {
        self.fan_label = Some(label.into());
        self
    }

    /// Header and rows of the CSV twin: the x column, then one column per
    /// series in drawing order.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec![self.x_label.clone()];
        header.extend(self.series.iter().map(|s| s.name.clone()));
        let rows = self
            .xs
            .iter()
            .enumerate()
            .map(|(m, &x)| {
                let mut row = vec![num(x)];
                row.extend(self.series.iter().map(|s| num(s.ys[m])));
                row
            })
            .collect();
        (header, rows)
    }

    fn y_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in self.series.iter().flat_map(|s| s.ys.iter()).filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if !lo.is_finite() {
            return (-1.0, 1.0);
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            return (lo - 1.0, hi + 1.0);
        }
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }

    pub fn svg(&self) -> String {
        let (x0, x1) = (self.xs.first().copied().unwrap_or(0.0), self.xs.last().copied().unwrap_or(1.0));
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
        let (y0, y1) = self.y_range();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );

        // grid and ticks
        let (yt, yd) = ticks(y0, y1);
        for v in yt {
            let y = py(v);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##, LEFT + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{v:.yd$}</text>"#, LEFT - 6.0, y + 4.0);
        }
        let (xt, xd) = ticks(x0, x1);
        for v in xt {
            let x = px(v);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##, TOP + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{v:.xd$}</text>"#, TOP + ph + 18.0);
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 14.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        // fans first so the highlighted lines sit on top
        let mut order: Vec<&Series> = self.series.iter().filter(|s| s.style == Style::Fan).collect();
        order.extend(self.series.iter().filter(|s| s.style == Style::Line));
        let mut colour = 0;
        let mut legend: Vec<(String, &str, f64)> = Vec::new();
        if order.iter().any(|s| s.style == Style::Fan) {
            legend.push((self.fan_label.clone().unwrap_or_else(|| "agents".into()), "#9aa5b1", 1.0));
        }
        for series in order {
            let (stroke, width) = match series.style {
                Style::Fan => ("#9aa5b1", 0.8),
                Style::Line => {
                    let c = PALETTE[colour % PALETTE.len()];
                    colour += 1;
                    legend.push((series.name.clone(), c, 2.0));
                    (c, 2.0)
                }
            };
            let mut points = String::new();
            for (&x, &y) in self.xs.iter().zip(&series.ys) {
                if y.is_finite() {
                    let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
                }
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{stroke}" stroke-width="{width}" points="{}"><title>{}</title></polyline>"#,
                points.trim_end(),
                escape(&series.name)
            );
        }

        let lx = LEFT + pw + 16.0;
        for (i, (name, stroke, width)) in legend.iter().enumerate() {
            let y = TOP + 12.0 + 20.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{y}" x2="{:.1}" y2="{y}" stroke="{stroke}" stroke-width="{width}"/>"#,
                lx + 24.0
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 30.0, y + 4.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }

    /// Number of drawn polylines.
    pub fn curves(&self) -> usize {
        self.series.len()
    }
}
