//! Compact grid rasterization of an OCR document.
//!
//! Pipeline: cluster utterances into rows by quantized box centers, compress
//! vertical gaps, split utterances into equal-width per-character boxes,
//! quantize and compress horizontal gaps within each row, then subtract the
//! minima so the grid starts at (0,0). Every token lands on its own cell;
//! collisions are impossible because every compression step is >= 1.

use crate::doc::{Document, Utterance};
use crate::error::{Result, TcpnError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatticeParams {
    /// Gap threshold: gaps up to this collapse to a single step.
    pub r_t: f64,
    /// Gap divisor: larger gaps advance by ceil(gap / r_r) steps.
    pub r_r: f64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        LatticeParams { r_t: 2.0, r_r: 4.0 }
    }
}

impl LatticeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_t.is_finite() && self.r_t > 0.0) || !(self.r_r.is_finite() && self.r_r > 0.0) {
            return Err(TcpnError::Config(format!(
                "lattice ratios must be positive and finite, got r_t={} r_r={}",
                self.r_t, self.r_r
            )));
        }
        Ok(())
    }
}

/// One character pinned to a grid cell, with its provenance in the document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPlacement {
    pub token: char,
    pub utterance_index: usize,
    pub offset: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeLayout {
    pub height: usize,
    pub width: usize,
    /// Row-major (row, then col): the canonical reading order.
    pub placements: Vec<TokenPlacement>,
}

/// Equal-width slice of an utterance box holding one character.
#[derive(Clone, Debug)]
pub struct TokenBox {
    pub utterance_index: usize,
    pub offset: usize,
    pub token: char,
    pub x0: f64,
    pub x1: f64,
    pub row: i64,
}

impl TokenBox {
    pub fn center_x(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
}

/// Raw row index per utterance: round(center_y / mean box height). Returns
/// the mean height alongside for diagnostics.
pub fn assign_rows(utterances: &[Utterance]) -> Result<(Vec<i64>, f64)> {
    if utterances.is_empty() {
        return Err(TcpnError::DegenerateBoxes("no utterances to assign rows".into()));
    }
    let mean_h: f64 =
        utterances.iter().map(|u| u.bbox.height()).sum::<f64>() / utterances.len() as f64;
    if !(mean_h > 0.0) || !mean_h.is_finite() {
        return Err(TcpnError::DegenerateBoxes(format!(
            "mean box height {} is not positive",
            mean_h
        )));
    }
    let rows = utterances
        .iter()
        .map(|u| (u.bbox.center_y() / mean_h).round() as i64)
        .collect();
    Ok((rows, mean_h))
}

fn gap_step(gap: i64, params: &LatticeParams) -> i64 {
    debug_assert!(gap >= 0);
    if (gap as f64) <= params.r_t {
        1
    } else {
        ((gap as f64 / params.r_r).max(1.0)).ceil() as i64
    }
}

/// Monotone remapping of strictly increasing coordinates: the first maps to
/// 0, each successor advances by the compressed gap step.
pub fn compress_axis(values: &[i64], params: &LatticeParams) -> Vec<i64> {
    for w in values.windows(2) {
        assert!(
            w[1] > w[0],
            "compress_axis requires strictly increasing values, got {} then {}",
            w[0],
            w[1]
        );
    }
    let mut out = Vec::with_capacity(values.len());
    if values.is_empty() {
        return out;
    }
    out.push(0);
    for w in values.windows(2) {
        let step = gap_step(w[1] - w[0], params);
        out.push(out.last().unwrap() + step);
    }
    out
}

/// Positional remapping of a sorted, duplicate-inclusive coordinate list,
/// anchored at its own first value. Duplicates advance by 1 (gap 0 counts as
/// a small gap), which is what makes every placement unique.
fn respace(sorted: &[i64], params: &LatticeParams) -> Vec<i64> {
    let mut out = Vec::with_capacity(sorted.len());
    if sorted.is_empty() {
        return out;
    }
    out.push(sorted[0]);
    for w in sorted.windows(2) {
        debug_assert!(w[1] >= w[0], "respace input must be sorted");
        let step = gap_step(w[1] - w[0], params);
        out.push(out.last().unwrap() + step);
    }
    out
}

/// Cuts each utterance box into one equal-width box per character. Token
/// boxes inherit the utterance's (already compressed) row.
pub fn split_utterances(utterances: &[Utterance], rows: &[i64]) -> Vec<TokenBox> {
    let mut out = Vec::new();
    for (ui, u) in utterances.iter().enumerate() {
        let chars: Vec<char> = u.text.chars().collect();
        let n = chars.len();
        let w = u.bbox.width() / n as f64;
        for (k, c) in chars.into_iter().enumerate() {
            out.push(TokenBox {
                utterance_index: ui,
                offset: k,
                token: c,
                x0: u.bbox.x0 + k as f64 * w,
                x1: u.bbox.x0 + (k + 1) as f64 * w,
                row: rows[ui],
            });
        }
    }
    out
}

pub fn build_lattice(doc: &Document, params: &LatticeParams) -> Result<LatticeLayout> {
    if doc.utterances.is_empty() {
        return Err(TcpnError::DegenerateBoxes(format!(
            "document {} has no utterances",
            doc.doc_id
        )));
    }
    let (raw_rows, _mean_h) = assign_rows(&doc.utterances)?;

    let mut unique_rows: Vec<i64> = raw_rows.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    unique_rows.sort_unstable();
    let compressed_rows = compress_axis(&unique_rows, params);
    let row_map: HashMap<i64, i64> = unique_rows.into_iter().zip(compressed_rows).collect();
    let utterance_rows: Vec<i64> = raw_rows.iter().map(|r| row_map[r]).collect();

    let tokens = split_utterances(&doc.utterances, &utterance_rows);
    let mean_w: f64 = tokens.iter().map(|t| t.width()).sum::<f64>() / tokens.len() as f64;
    if !(mean_w > 0.0) || !mean_w.is_finite() {
        return Err(TcpnError::DegenerateBoxes(format!(
            "mean token width {} is not positive",
            mean_w
        )));
    }

    // Group tokens by row; within a row, stable-sort by quantized x so equal
    // columns keep input order.
    let raw_cols: Vec<i64> = tokens
        .iter()
        .map(|t| (t.center_x() / mean_w).round() as i64)
        .collect();
    let mut by_row: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        by_row.entry(t.row).or_default().push(i);
    }

    let mut placed: Vec<(i64, i64, usize)> = Vec::with_capacity(tokens.len());
    for (row, mut idxs) in by_row {
        idxs.sort_by_key(|&i| raw_cols[i]);
        let sorted_cols: Vec<i64> = idxs.iter().map(|&i| raw_cols[i]).collect();
        let new_cols = respace(&sorted_cols, params);
        for (&i, col) in idxs.iter().zip(new_cols) {
            placed.push((row, col, i));
        }
    }

    let min_col = placed.iter().map(|p| p.1).min().unwrap();
    let mut placements: Vec<TokenPlacement> = placed
        .into_iter()
        .map(|(row, col, i)| TokenPlacement {
            token: tokens[i].token,
            utterance_index: tokens[i].utterance_index,
            offset: tokens[i].offset,
            row: row as usize,
            col: (col - min_col) as usize,
        })
        .collect();
    placements.sort_by_key(|p| (p.row, p.col));

    let mut cells = HashSet::new();
    for p in &placements {
        assert!(
            cells.insert((p.row, p.col)),
            "lattice cell ({},{}) assigned twice in document {}",
            p.row,
            p.col,
            doc.doc_id
        );
    }

    let height = placements.iter().map(|p| p.row).max().unwrap() + 1;
    let width = placements.iter().map(|p| p.col).max().unwrap() + 1;
    Ok(LatticeLayout { height, width, placements })
}

/// Row-major (row asc, col asc) ordering of arbitrary placements.
pub fn reading_order(mut placements: Vec<TokenPlacement>) -> Vec<TokenPlacement> {
    placements.sort_by_key(|p| (p.row, p.col));
    placements
}

/// Text-art grid: one character per cell, '.' for empty, one line per row.
pub fn render(layout: &LatticeLayout) -> String {
    let mut grid = vec![vec!['.'; layout.width]; layout.height];
    for p in &layout.placements {
        grid[p.row][p.col] = p.token;
    }
    let mut out = String::new();
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    out
}
