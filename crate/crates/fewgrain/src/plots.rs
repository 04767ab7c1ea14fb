//! Static figure rendering: embedding scatter plots and annotated
//! confusion-matrix heatmaps, written as PNG files.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
    [0, 128, 128],
    [128, 0, 0],
];

/// 3x5 bitmap glyphs for digits, the decimal point, and percent-ish chars.
fn glyph(c: char) -> Option<[u8; 5]> {
    // Each row is 3 bits, MSB = left pixel.
    let rows = match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    };
    Some(rows)
}

fn draw_text(img: &mut image::RgbImage, x: u32, y: u32, text: &str, color: [u8; 3], scale: u32) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits & (0b100 >> rx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let px = cx + rx * scale + sx;
                                let py = y + ry as u32 * scale + sy;
                                if px < img.width() && py < img.height() {
                                    img.put_pixel(px, py, image::Rgb(color));
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn draw_disc(img: &mut image::RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    }
}

/// Scatter of 2-D embeddings colored by class.
pub fn scatter_plot(
    points: &[(f64, f64, usize)],
    path: impl AsRef<Path>,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Data("no points to plot".into()));
    }
    let size = 640u32;
    let margin = 32i64;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let inner = size as i64 - 2 * margin;
    for &(x, y, class) in points {
        let px = margin + ((x - xmin) / xspan * inner as f64) as i64;
        // Flip y so larger values sit higher.
        let py = margin + ((ymax - y) / yspan * inner as f64) as i64;
        let color = PALETTE[class % PALETTE.len()];
        draw_disc(&mut img, px, py, 3, color);
    }
    img.save(path.as_ref())
        .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;
    Ok(())
}

/// Row-normalized confusion heatmap with the normalized value annotated in
/// every cell.
pub fn confusion_plot(
    confusion: &Array2<u64>,
    class_ids: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let n = confusion.dim().0;
    if n == 0 || confusion.dim().1 != n || class_ids.len() != n {
        return Err(Error::Shape("confusion matrix must be square with matching labels".into()));
    }
    let cell = 48u32;
    let margin = 36u32;
    let size = margin + cell * n as u32 + 8;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));

    let normalized = row_normalize(confusion);
    for i in 0..n {
        for j in 0..n {
            let v = normalized[(i, j)];
            // White -> blue ramp.
            let c = (255.0 - 205.0 * v) as u8;
            let color = [c, c, c.saturating_add(60).max(200)];
            let x0 = margin + j as u32 * cell;
            let y0 = margin + i as u32 * cell;
            for y in y0..y0 + cell - 1 {
                for x in x0..x0 + cell - 1 {
                    img.put_pixel(x, y, image::Rgb(color));
                }
            }
            let text = format!("{v:.2}");
            let tcolor = if v > 0.6 { [255, 255, 255] } else { [20, 20, 20] };
            draw_text(&mut img, x0 + 6, y0 + cell / 2 - 5, &text, tcolor, 2);
        }
    }
    // Axis labels: class ids along both edges.
    for (i, id) in class_ids.iter().enumerate() {
        let text = id.to_string();
        draw_text(&mut img, margin + i as u32 * cell + 14, 10, &text, [0, 0, 0], 2);
        draw_text(&mut img, 4, margin + i as u32 * cell + 16, &text, [0, 0, 0], 2);
    }
    img.save(path.as_ref())
        .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;
    Ok(())
}

/// Row-normalized counts (rows with zero total stay zero).
pub fn row_normalize(confusion: &Array2<u64>) -> Array2<f64> {
    let (n, m) = confusion.dim();
    let mut out = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let total: u64 = confusion.row(i).sum();
        if total > 0 {
            for j in 0..m {
                out[(i, j)] = confusion[(i, j)] as f64 / total as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn row_normalize_hand_values() {
        let c = array![[8u64, 2], [1, 3]];
        let n = row_normalize(&c);
        assert_eq!(n, array![[0.8, 0.2], [0.25, 0.75]]);
    }

    #[test]
    fn identity_confusion_renders() {
        let dir = tempfile::tempdir().unwrap();
        let c = array![[5u64, 0], [0, 7]];
        let path = dir.path().join("conf.png");
        confusion_plot(&c, &[0, 1], &path).unwrap();
        assert!(path.is_file());
        let n = row_normalize(&c);
        assert_eq!(n[(0, 0)], 1.0);
        assert_eq!(n[(1, 1)], 1.0);
    }

    #[test]
    fn scatter_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<(f64, f64, usize)> = (0..40)
            .map(|i| ((i % 7) as f64, (i % 5) as f64, i % 3))
            .collect();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        scatter_plot(&pts, &p1).unwrap();
        scatter_plot(&pts, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_scatter_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scatter_plot(&[], dir.path().join("x.png")).is_err());
    }
}
