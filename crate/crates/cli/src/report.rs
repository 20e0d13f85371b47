use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write;

use cyin_core::metrics::{csv_cell, format_metric, mean_std, metric_names};
use cyin_core::{Ablation, MetricReport, Protocol, Task};

use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

/// Complete first, then fixed sets, then random protocols by missing rate.
fn protocol_cmp(a: &Protocol, b: &Protocol) -> Ordering {
    fn rank(p: &Protocol) -> u8 {
        match p {
            Protocol::Complete => 0,
            Protocol::Fixed(_) => 1,
            Protocol::Random(_) => 2,
        }
    }
    match (a, b) {
        (Protocol::Fixed(x), Protocol::Fixed(y)) => x.len().cmp(&y.len()).then_with(|| x.cmp(y)),
        (Protocol::Random(x), Protocol::Random(y)) => x.total_cmp(y),
        _ => rank(a).cmp(&rank(b)),
    }
}

pub struct Cell {
    pub n: usize,
    pub stats: Vec<Option<(f64, f64)>>,
}

pub struct Table {
    pub task: Task,
    pub sections: Vec<(Protocol, Vec<(Ablation, Cell)>)>,
}

impl Table {
    pub fn collect(manifests: &[Manifest]) -> CliResult<Self> {
        let task = manifests[0].task;
        if let Some(m) = manifests.iter().find(|m| m.task != task) {
            return Err(CliError::usage(format!(
                "cannot mix {task} and {} runs in one report ({})",
                m.task,
                m.output_dir.display()
            )));
        }
        let mut protocols: Vec<Protocol> = Vec::new();
        let mut groups: BTreeMap<(usize, Ablation), Vec<&MetricReport>> = BTreeMap::new();
        for m in manifests {
            for r in &m.results {
                let idx = match protocols.iter().position(|p| p == &r.protocol) {
                    Some(i) => i,
                    None => {
                        protocols.push(r.protocol.clone());
                        protocols.len() - 1
                    }
                };
                groups.entry((idx, m.ablation)).or_default().push(r);
            }
        }
        let mut order: Vec<usize> = (0..protocols.len()).collect();
        order.sort_by(|&i, &j| protocol_cmp(&protocols[i], &protocols[j]));

        let names = metric_names(task);
        let sections = order
            .into_iter()
            .map(|i| {
                let rows = Ablation::ALL
                    .iter()
                    .filter_map(|&ab| {
                        let reports = groups.get(&(i, ab))?;
                        let stats = names
                            .iter()
                            .map(|n| {
                                let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(n)).collect();
                                if vals.len() == reports.len() {
                                    mean_std(&vals)
                                } else {
                                    None
                                }
                            })
                            .collect();
                        Some((ab, Cell { n: reports.len(), stats }))
                    })
                    .collect();
                (protocols[i].clone(), rows)
            })
            .collect();
        Ok(Self { task, sections })
    }

    pub fn markdown(&self) -> String {
        let names = metric_names(self.task);
        let mut out = format!("# Results ({})\n", self.task);
        for (p, rows) in &self.sections {
            let _ = write!(out, "\n## {p}\n\n| Model | n |");
            for n in names {
                let _ = write!(out, " {n} |");
            }
            out += "\n|---|---|";
            out += &"---|".repeat(names.len());
            out.push('\n');
            for (ab, cell) in rows {
                let _ = write!(out, "| {} | {} |", ab.label(), cell.n);
                for s in &cell.stats {
                    match s {
                        Some((m, sd)) if cell.n > 1 => {
                            let _ = write!(out, " {} ± {} |", format_metric(*m), format_metric(*sd));
                        }
                        Some((m, _)) => {
                            let _ = write!(out, " {} |", format_metric(*m));
                        }
                        None => out += " n/a |",
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let names = metric_names(self.task);
        let mut cols = vec!["protocol", "ablation", "model", "n"].into_iter().map(String::from).collect::<Vec<_>>();
        for n in names {
            cols.push(format!("{n}_mean"));
            cols.push(format!("{n}_std"));
        }
        let mut out = cols.join(",") + "\n";
        for (p, rows) in &self.sections {
            for (ab, cell) in rows {
                let mut cells = vec![csv_cell(&p.to_string()), ab.tag().to_string(), csv_cell(ab.label()), cell.n.to_string()];
                for s in &cell.stats {
                    match s {
                        Some((m, sd)) => cells.extend([format_metric(*m), format_metric(*sd)]),
                        None => cells.extend([String::new(), String::new()]),
                    }
                }
                out += &cells.join(",");
                out.push('\n');
            }
        }
        out
    }

    /// Primary metric against missing rate, one line per model.
    pub fn svg(&self) -> Option<String> {
        let names = metric_names(self.task);
        let (primary, _) = match self.task {
            Task::Regression => ("mae", false),
            Task::Classification => ("acc", true),
        };
        let col = names.iter().position(|n| *n == primary)?;
        let mut rates = Vec::new();
        let mut series: BTreeMap<Ablation, Vec<(f64, f64)>> = BTreeMap::new();
        for (p, rows) in &self.sections {
            let Protocol::Random(mr) = p else { continue };
            rates.push(*mr);
            for (ab, cell) in rows {
                if let Some((m, _)) = cell.stats[col] {
                    series.entry(*ab).or_default().push((*mr, m));
                }
            }
        }
        if series.is_empty() {
            return None;
        }
        Some(Plot::new(&rates, &series).render(primary))
    }
}

const PALETTE: [&str; 7] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Plot<'a> {
    rates: &'a [f64],
    series: &'a BTreeMap<Ablation, Vec<(f64, f64)>>,
    x: (f64, f64),
    y: (f64, f64),
}

impl<'a> Plot<'a> {
    fn new(rates: &'a [f64], series: &'a BTreeMap<Ablation, Vec<(f64, f64)>>) -> Self {
        let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let x = span(rates[0], rates[rates.len() - 1]);
        let ys = series.values().flatten().map(|&(_, y)| y);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.0 };
        Self { rates, series, x, y: span(lo - pad, hi + pad) }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn render(&self, metric: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<path d="M{x0} {y0}V{y1}H{x1}" fill="none" stroke="black"/>"#);
        for &mr in self.rates {
            let x = self.px(mr);
            let _ = writeln!(s, r#"<line class="xtick" x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 5.0);
            let _ = writeln!(s, r#"<text class="xlabel" x="{x:.2}" y="{}" text-anchor="middle">{mr}</text>"#, y1 + 18.0);
        }
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, x0 - 8.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">missing rate</text>"#, (x0 + x1) / 2.0, H - 10.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{metric}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
        for (i, (ab, pts)) in self.series.iter().enumerate() {
            let color = PALETTE[ab.order() % PALETTE.len()];
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
            for &(x, y) in pts {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, self.px(x), self.py(y));
            }
            let ly = y0 + 10.0 + 18.0 * i as f64;
            let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 + 15.0, x1 + 35.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x1 + 40.0, ly + 4.0, ab.label());
        }
        s += "</svg>\n";
        s
    }
}
