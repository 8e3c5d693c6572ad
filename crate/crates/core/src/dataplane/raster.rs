use super::Mask;
use crate::{Error, Result};

/// Burns a polygon given in pixel coordinates `(x = column, y = row)` into
/// an `h x w` mask.
///
/// A pixel is set when its center `(x + 0.5, y + 0.5)` is inside under the
/// even-odd rule. Centers lying exactly on an edge follow the top-left
/// convention: included on left and top edges, excluded on right and bottom.
pub fn rasterize_polygon(poly: &[(f64, f64)], h: usize, w: usize) -> Result<Mask> {
    if poly.len() < 3 {
        return Err(Error::Data(format!(
            "polygon needs at least 3 vertices, got {}",
            poly.len()
        )));
    }
    if poly.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Data("polygon vertices must be finite".into()));
    }
    let mut mask = Mask::zeros(h, w);
    let mut xs = Vec::new();
    for row in 0..h {
        let py = row as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            // Half-open in y: an edge covers [min y, max y).
            if (y0 <= py) != (y1 <= py) {
                xs.push(x0 + (py - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // Centers with span[0] <= x + 0.5 < span[1].
            let first = (span[0] - 0.5).ceil().max(0.0);
            let end = (span[1] - 0.5).ceil().min(w as f64);
            if end > first {
                let base = row * w;
                mask.data[base + first as usize..base + end as usize].fill(1);
            }
        }
    }
    Ok(mask)
}
