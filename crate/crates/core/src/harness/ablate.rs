use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_anchors, evaluate, split, train_with_anchors, RunConfig};
use crate::error::{Error, Result};
use crate::model::AdaLnMode;
use crate::scene::ScenarioRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Components,
    Tokens,
    CfgScale,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [Self::Components, Self::Tokens, Self::CfgScale];

    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Tokens => "tokens",
            Self::CfgScale => "cfg-scale",
        }
    }

    /// Column names of the settings that vary along the axis.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Self::Components => &["tokenization", "td_adaln", "independent_noise", "asymmetric_cfg"],
            Self::Tokens => &["tokens"],
            Self::CfgScale => &["cfg_scale"],
        }
    }

    /// One run config per row, with the row's settings as strings.
    pub fn cells(self, base: &RunConfig) -> Result<Vec<(Vec<String>, RunConfig)>> {
        let mut out = Vec::new();
        match self {
            Self::Components => {
                const ROWS: [[bool; 4]; 6] = [
                    [false, false, false, false],
                    [true, false, false, false],
                    [true, true, false, false],
                    [true, false, true, false],
                    [true, true, true, false],
                    [true, true, true, true],
                ];
                for flags in ROWS {
                    let [tok, td, ind, cfg] = flags;
                    let mut c = base.clone();
                    if !tok {
                        c.model.segments = 1;
                        c.model.groups = 1;
                    }
                    c.model.adaln = if td { AdaLnMode::Decoupled } else { AdaLnMode::Monolithic };
                    c.train.independent_noise = ind;
                    c.guidance.asymmetric = cfg;
                    out.push((flags.iter().map(|f| mark(*f)).collect(), c));
                }
            }
            Self::Tokens => {
                for n in [1, 2, 4, 8, 16] {
                    let mut c = base.clone();
                    c.model.segments = n;
                    c.model.groups = base.model.groups.min(n);
                    if c.model.groups == 1 {
                        c.guidance.asymmetric = false;
                    }
                    out.push((vec![n.to_string()], c));
                }
            }
            Self::CfgScale => {
                for w in [0.75, 1.0, 1.25, 1.5, 1.75] {
                    let mut c = base.clone();
                    c.guidance.cfg_scale = w;
                    out.push((vec![format!("{w:.2}")], c));
                }
            }
        }
        for (_, c) in &mut out {
            if base.ablate.train_steps > 0 {
                c.train.max_steps = base.ablate.train_steps;
            }
            c.validate()?;
        }
        Ok(out)
    }
}

fn mark(on: bool) -> String {
    if on { "yes" } else { "no" }.to_string()
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (components, tokens, cfg-scale)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: usize,
    pub settings: Vec<String>,
    pub score: f64,
    pub ade: f64,
    pub collision_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{},score,ade_m,collision_rate\n", self.axis.columns().join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", r.id, r.settings.join(","), r.score, r.ade, r.collision_rate);
        }
        out
    }
}

/// Bar chart of the table's scores.
pub fn svg_bar_chart(table: &AblationTable) -> String {
    let (bar, gap, height, top, left) = (48.0, 16.0, 200.0, 30.0, 40.0);
    let width = left + table.rows.len() as f64 * (bar + gap) + gap;
    let total = top + height + 50.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total}" viewBox="0 0 {width} {total}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<text x="{left}" y="18">ablation: {} (score 0-100)</text>"#, table.axis.name());
    let base = top + height;
    let _ = writeln!(out, r#"<line x1="{left}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>"#);
    for (i, r) in table.rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let h = r.score.clamp(0.0, 100.0) / 100.0 * height;
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="#4a78b0"/>"##,
            base - h
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#, base - h - 4.0, r.score);
        let label = if table.axis == AblationAxis::Components { r.id.to_string() } else { r.settings.join(" ") };
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#, base + 16.0);
    }
    out.push_str("</svg>\n");
    out
}

/// Trains and evaluates every cell of `axis`. The cfg-scale axis trains
/// once and only varies inference.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis, records: &[ScenarioRecord]) -> Result<AblationTable> {
    cfg.validate()?;
    let cells = axis.cells(cfg)?;
    let (train_records, eval_records) = split(records, cfg.data.heldout);
    let (stats, vocab, _) = build_anchors(cfg, train_records)?;

    let run_cell = |c: &RunConfig| -> Result<(f64, f64, f64)> {
        let (trained, _) = train_with_anchors(c, train_records, eval_records, stats.clone(), vocab.clone(), None, None)?;
        let r = evaluate(&trained, eval_records, c, &c.guidance)?;
        Ok((r.composite, r.ade, r.collision_rate))
    };

    let results: Vec<Result<(f64, f64, f64)>> = if axis == AblationAxis::CfgScale {
        let (trained, _) = train_with_anchors(&cells[0].1, train_records, eval_records, stats.clone(), vocab.clone(), None, None)?;
        cells
            .iter()
            .map(|(_, c)| evaluate(&trained, eval_records, c, &c.guidance).map(|r| (r.composite, r.ade, r.collision_rate)))
            .collect()
    } else if cfg.ablate.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells.iter().map(|(_, c)| s.spawn(move || run_cell(c))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation cell panicked")).collect()
        })
    } else {
        cells.iter().map(|(_, c)| run_cell(c)).collect()
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (i, ((settings, _), res)) in cells.into_iter().zip(results).enumerate() {
        let (score, ade, collision_rate) = res?;
        rows.push(AblationRow {
            id: i + 1,
            settings,
            score,
            ade,
            collision_rate,
        });
    }
    Ok(AblationTable { axis, rows })
}
