//! Binary PPM (P6) heatmaps.

use crate::error::{Error, Result};
use crate::interpret::PatchScoreMap;

const WHITE: [u8; 3] = [255, 255, 255];

/// Red for 1, blue for 0: `(round(255·s), 0, round(255·(1 − s)))`.
pub fn score_color(s: f64) -> [u8; 3] {
    let s = s.clamp(0.0, 1.0);
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

/// One `cell_px`-square cell per patch; cells without a patch are white.
pub fn render_heatmap(map: &PatchScoreMap, cell_px: usize) -> Result<Vec<u8>> {
    if cell_px == 0 {
        return Err(Error::invalid("cell_px must be at least 1"));
    }
    if map.entries.is_empty() {
        return Err(Error::invalid(format!("score map for {} is empty", map.slide_id)));
    }
    if let Some(e) = map.entries.iter().find(|e| e.x < 0 || e.y < 0) {
        return Err(Error::invalid(format!("negative patch coordinate ({}, {})", e.x, e.y)));
    }
    let cols = map.entries.iter().map(|e| e.x as usize).max().unwrap() + 1;
    let rows = map.entries.iter().map(|e| e.y as usize).max().unwrap() + 1;
    let mut grid = vec![WHITE; cols * rows];
    for e in &map.entries {
        grid[e.y as usize * cols + e.x as usize] = score_color(e.score);
    }

    let (w, h) = (cols * cell_px, rows * cell_px);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for py in 0..h {
        let row = &grid[(py / cell_px) * cols..][..cols];
        for px in 0..w {
            out.extend_from_slice(&row[px / cell_px]);
        }
    }
    Ok(out)
}
