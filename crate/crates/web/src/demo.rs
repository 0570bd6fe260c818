//! The demo operations as plain functions, so they can be tested natively.

use patchprobe::attention::attention_gap;
use patchprobe::harness::synth::{generate_synthetic_pair, layout_dominated_triplet, ExpectedScores, SynthParams};
use patchprobe::mitigation::{score_strategy, Strategy, DEFAULT_K};
use patchprobe::perturb::table::{render_table, TableRender, TableStyle};
use patchprobe::perturb::{
    apply_occlusion, apply_text_replacement, changed_pixels, make_noise_image, make_signal_image, BBox,
};
use patchprobe::similarity::{score_all, Direction, Mechanism};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Scored {
    pub key: &'static str,
    pub label: &'static str,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CollapseResult {
    pub mechanisms: Vec<Scored>,
    pub mitigations: Vec<Scored>,
    /// Closed forms; exact only with zero jitter.
    pub expected: ExpectedScores,
}

pub fn collapse_scores(p: &SynthParams) -> Result<CollapseResult, String> {
    let (a, b) = generate_synthetic_pair(p, "demo").map_err(|e| e.to_string())?;
    let mechanisms = score_all(&a, &b, &Mechanism::ALL, Direction::AToB)
        .into_iter()
        .map(|(m, r)| Scored { key: m.key(), label: m.label(), value: r.ok().map(|s| s.value) })
        .collect();
    let mitigations = Strategy::ALL
        .iter()
        .map(|&s| Scored { key: s.key(), label: s.label(), value: score_strategy(&a, &b, s, DEFAULT_K).ok() })
        .collect();
    Ok(CollapseResult { mechanisms, mitigations, expected: ExpectedScores::closed_form(p) })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub layout_fraction: f64,
    /// Gap per mechanism, in `Mechanism::ALL` order.
    pub gaps: Vec<f64>,
}

pub fn attention_sweep(n: usize, steps: usize) -> Result<Vec<SweepPoint>, String> {
    if steps < 2 {
        return Err("need at least 2 steps".into());
    }
    (0..steps)
        .map(|i| {
            let p = i as f64 / (steps - 1) as f64;
            let t = layout_dominated_triplet(p, n, 3, "demo", "demo").map_err(|e| e.to_string())?;
            let gaps = Mechanism::ALL
                .iter()
                .map(|&m| attention_gap(&t, m, Direction::AToB).map(|g| g.gap).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            Ok(SweepPoint { layout_fraction: p, gaps })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    Replace,
    Occlude,
    Signal,
    Noise,
}

impl std::str::FromStr for EditMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replace" => Ok(Self::Replace),
            "occlude" => Ok(Self::Occlude),
            "signal" => Ok(Self::Signal),
            "noise" => Ok(Self::Noise),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbResult {
    pub width: u32,
    pub height: u32,
    pub original: Vec<u8>,
    pub edited: Vec<u8>,
    pub changed_pixels: u64,
    pub bbox: BBox,
}

/// Rows separated by newlines, cells by `|`.
pub fn parse_cells(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('|').map(|c| c.trim().to_uppercase()).collect())
        .collect()
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn render(cells: &[Vec<String>]) -> Result<TableRender, String> {
    render_table(cells, &TableStyle::default()).map_err(|e| e.to_string())
}

pub fn perturb_table(
    cells: &str,
    row: usize,
    col: usize,
    new_text: &str,
    mode: EditMode,
) -> Result<PerturbResult, String> {
    let cells = parse_cells(cells);
    let page = render(&cells)?;
    let img = &page.image;
    let cell_box = *page
        .text_boxes
        .get(row)
        .and_then(|r| r.get(col))
        .ok_or_else(|| format!("no cell at row {row}, column {col}"))?;
    let (edited, bbox) = match mode {
        EditMode::Replace => {
            let text = new_text.trim().to_uppercase();
            (apply_text_replacement(img, cell_box, &text, page.font_px, None).map_err(|e| e.to_string())?, cell_box)
        }
        EditMode::Occlude => (apply_occlusion(img, cell_box, None).map_err(|e| e.to_string())?, cell_box),
        EditMode::Signal => (make_signal_image(img, page.table_bbox).map_err(|e| e.to_string())?, page.table_bbox),
        EditMode::Noise => (make_noise_image(img, page.table_bbox).map_err(|e| e.to_string())?, page.table_bbox),
    };
    Ok(PerturbResult {
        width: img.width(),
        height: img.height(),
        original: rgba(img.as_raw()),
        changed_pixels: changed_pixels(img, &edited),
        edited: rgba(edited.as_raw()),
        bbox,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "item | 2019 | 2020\nrevenue | 10,520 | 13,499\nmargin | 19.65% | 11.9";

    #[test]
    fn collapse_matches_closed_form() {
        let p = SynthParams::new(100, 64, 1, std::f64::consts::FRAC_PI_2);
        let r = collapse_scores(&p).unwrap();
        let mean = r.mechanisms[0].value.unwrap();
        assert!((mean - r.expected.mean).abs() < 1e-9);
        assert!(r.mitigations.iter().all(|s| s.value.unwrap() >= 0.999));
        assert!(collapse_scores(&SynthParams::new(5, 4, 5, 1.0)).is_err());
    }

    #[test]
    fn sweep_is_monotone_for_mean_pooling() {
        let pts = attention_sweep(100, 11).unwrap();
        assert_eq!(pts.len(), 11);
        let mean: Vec<f64> = pts.iter().map(|p| p.gaps[0]).collect();
        assert!(mean.windows(2).all(|w| w[0] <= w[1]));
        assert!(mean[5].abs() < 1e-12);
    }

    #[test]
    fn replacement_changes_only_the_cell() {
        let r = perturb_table(TABLE, 1, 1, "10,526", EditMode::Replace).unwrap();
        assert_eq!(r.original.len(), (r.width * r.height * 4) as usize);
        assert!(r.changed_pixels > 0);
        for (i, (a, b)) in r.original.chunks(4).zip(r.edited.chunks(4)).enumerate() {
            let (x, y) = (i as u32 % r.width, i as u32 / r.width);
            if !r.bbox.contains(x, y) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn bad_requests_are_errors() {
        assert!(perturb_table(TABLE, 9, 0, "1", EditMode::Replace).is_err());
        assert!(perturb_table(TABLE, 1, 1, "a very long replacement", EditMode::Replace).is_err());
        assert!("smudge".parse::<EditMode>().is_err());
        for m in [EditMode::Occlude, EditMode::Signal, EditMode::Noise] {
            assert!(perturb_table(TABLE, 1, 1, "", m).unwrap().changed_pixels > 0);
        }
    }
}
