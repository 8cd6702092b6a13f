//! Δ success-rate tables (CSV and Markdown) and success-versus-ε plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ensembles::EnsembleSummary;
use super::sweep::SweepResult;
use crate::error::{Error, Result};
use crate::eval::BALL_EPSILONS;

/// One edited result at one ball radius. Rates are fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub task: String,
    pub model: String,
    pub method: String,
    pub epsilon: f64,
    /// Unedited success on the same evaluation set.
    pub initial: Option<f64>,
    pub success: f64,
    pub std_of_mean: f64,
}

pub fn entries_from_sweep(s: &SweepResult) -> Vec<ReportEntry> {
    s.balls
        .iter()
        .map(|b| ReportEntry {
            task: s.task.clone(),
            model: s.spec.model.as_str().to_string(),
            method: s.spec.method.as_str().to_string(),
            epsilon: b.epsilon,
            initial: s.baseline.as_ref().map(|x| x.test_success),
            success: b.test.mean_success,
            std_of_mean: b.test.std_of_mean,
        })
        .collect()
}

pub fn entry_from_ensemble(e: &EnsembleSummary) -> ReportEntry {
    ReportEntry {
        task: e.task.clone(),
        model: "host".into(),
        method: "ensemble".into(),
        epsilon: e.epsilon,
        initial: Some(e.host_success),
        success: e.mean_success,
        std_of_mean: e.std_of_mean,
    }
}

/// One table row; every figure is in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub model: String,
    pub method: String,
    pub initial: f64,
    #[serde(rename = "delta_1e-3")]
    pub delta_1e3: Option<f64>,
    #[serde(rename = "sem_1e-3")]
    pub sem_1e3: Option<f64>,
    #[serde(rename = "delta_1e-4")]
    pub delta_1e4: Option<f64>,
    #[serde(rename = "sem_1e-4")]
    pub sem_1e4: Option<f64>,
    #[serde(rename = "delta_1e-5")]
    pub delta_1e5: Option<f64>,
    #[serde(rename = "sem_1e-5")]
    pub sem_1e5: Option<f64>,
}

impl TableRow {
    fn cells(&self) -> [(Option<f64>, Option<f64>); 3] {
        [
            (self.delta_1e3, self.sem_1e3),
            (self.delta_1e4, self.sem_1e4),
            (self.delta_1e5, self.sem_1e5),
        ]
    }

    fn cell_mut(&mut self, ball: usize) -> (&mut Option<f64>, &mut Option<f64>) {
        match ball {
            0 => (&mut self.delta_1e3, &mut self.sem_1e3),
            1 => (&mut self.delta_1e4, &mut self.sem_1e4),
            _ => (&mut self.delta_1e5, &mut self.sem_1e5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReportTable {
    pub rows: Vec<TableRow>,
}

const BALL_LABELS: [&str; 3] = ["0.001", "0.0001", "0.00001"];

fn ball_index(epsilon: f64) -> Result<usize> {
    BALL_EPSILONS
        .iter()
        .position(|&e| (e - epsilon).abs() <= 1e-12 * e)
        .ok_or_else(|| Error::Report(format!("ball radius {epsilon} is not one of the table columns")))
}

impl ReportTable {
    /// Groups entries by task, model and method; Δ is edited minus initial.
    pub fn build(entries: &[ReportEntry]) -> Result<Self> {
        let mut rows: BTreeMap<(String, String, String), TableRow> = BTreeMap::new();
        for e in entries {
            let initial = e.initial.ok_or_else(|| {
                Error::Report(format!("no unedited baseline for {} / {} / {}", e.task, e.model, e.method))
            })?;
            let key = (e.task.clone(), e.model.clone(), e.method.clone());
            let row = rows.entry(key).or_insert_with(|| TableRow {
                task: e.task.clone(),
                model: e.model.clone(),
                method: e.method.clone(),
                initial: 100.0 * initial,
                delta_1e3: None,
                sem_1e3: None,
                delta_1e4: None,
                sem_1e4: None,
                delta_1e5: None,
                sem_1e5: None,
            });
            if row.initial != 100.0 * initial {
                return Err(Error::Report(format!("conflicting baselines for {} / {}", e.task, e.model)));
            }
            let (d, s) = row.cell_mut(ball_index(e.epsilon)?);
            *d = Some(100.0 * (e.success - initial));
            *s = Some(100.0 * e.std_of_mean);
        }
        Ok(ReportTable {
            rows: rows.into_values().collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<TableRow>, _>>()?;
        Ok(ReportTable { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Task | Model | Method | Initial |");
        for l in BALL_LABELS {
            let _ = write!(s, " Δ, B_{l} |");
        }
        s.push_str("\n|---|---|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {} | {} | {:.1} |", r.task, r.model, r.method, r.initial);
            for (d, sem) in r.cells() {
                match (d, sem) {
                    (Some(d), Some(sem)) => {
                        let _ = write!(s, " {d:.1} ± {sem:.1} |");
                    }
                    _ => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut t: Vec<String> = self.rows.iter().map(|r| r.task.clone()).collect();
        t.dedup();
        t
    }

    /// Line plot of success rate (initial + Δ) against ε for one task.
    pub fn to_svg(&self, task: &str) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const L: f64 = 60.0;
        const R: f64 = 160.0;
        const T: f64 = 30.0;
        const B: f64 = 50.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
        let rows: Vec<&TableRow> = self.rows.iter().filter(|r| r.task == task).collect();
        let points = |r: &TableRow| -> Vec<(usize, f64)> {
            r.cells()
                .iter()
                .enumerate()
                .filter_map(|(i, (d, _))| d.map(|d| (i, r.initial + d)))
                .collect()
        };
        let top = rows
            .iter()
            .flat_map(|r| points(r).into_iter().map(|p| p.1).chain([r.initial]))
            .fold(10.0f64, f64::max);
        let top = (top / 10.0).ceil() * 10.0;
        // Columns run from the loosest ball on the left to the strictest.
        let x = |i: usize| L + (W - L - R) * i as f64 / 2.0;
        let y = |v: f64| T + (H - T - B) * (1.0 - v.max(0.0) / top);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{task}</text>"#, (W - R + L) / 2.0);
        let _ = writeln!(
            s,
            r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#,
            H - B,
            W - R,
            H - B,
            H - B
        );
        for k in 0..=5 {
            let v = top * k as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
                L - 6.0,
                y(v) + 4.0
            );
        }
        for (i, l) in BALL_LABELS.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{l}</text>"#, x(i), H - B + 16.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">ball radius ε</text>"#, (W - R + L) / 2.0, H - 12.0);
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">success rate (%)</text>"#,
            (H - B + T) / 2.0,
            (H - B + T) / 2.0
        );
        for (n, r) in rows.iter().enumerate() {
            let c = COLORS[n % COLORS.len()];
            let _ = writeln!(
                s,
                r#"<line x1="{L}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="{c}" stroke-dasharray="4 3" stroke-width="1"/>"#,
                y(r.initial),
                W - R,
                y(r.initial)
            );
            let pts = points(r);
            let path: Vec<String> = pts.iter().map(|&(i, v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
            for &(i, v) in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, x(i), y(v));
            }
            let ly = T + 16.0 * n as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{} {}</text>"#,
                W - R + 12.0,
                W - R + 30.0,
                W - R + 36.0,
                ly + 4.0,
                r.model,
                r.method
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `table.csv`, `table.md` and one `success_<task>.svg` per task.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("table.csv"))?;
        let md = dir.join("table.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        for t in self.tasks() {
            let p = dir.join(format!("success_{t}.svg"));
            std::fs::write(&p, self.to_svg(&t)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
