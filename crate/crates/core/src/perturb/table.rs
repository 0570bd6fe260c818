//! Synthetic financial-table page renders.
//!
//! A page has a title line, a ruled table with alternating row shading, and a
//! footer line. Cell text is drawn with [`draw_text`](super::draw_text) into each
//! cell's text box, so editing a cell in place is pixel-identical to rendering
//! the edited table directly.

use image::{Rgb, RgbImage};

use super::{draw_text, font, BBox, PerturbError, DEFAULT_INK};

pub const PAGE: Rgb<u8> = Rgb([255, 255, 255]);
pub const SHADE: Rgb<u8> = Rgb([236, 240, 244]);
pub const RULE: Rgb<u8> = Rgb([120, 120, 120]);
pub const HEADER_INK: Rgb<u8> = Rgb([20, 40, 110]);

#[derive(Debug, Clone)]
pub struct TableRender {
    pub image: RgbImage,
    /// Outer box of the ruled table, grid lines included.
    pub table_bbox: BBox,
    /// Text box of every cell, row-major.
    pub text_boxes: Vec<Vec<BBox>>,
    pub font_px: u32,
}

#[derive(Debug, Clone)]
pub struct TableStyle {
    pub title: String,
    pub footer: String,
    pub font_px: u32,
    pub shade_rows: bool,
}

impl Default for TableStyle {
    fn default() -> Self {
        Self { title: "ANNUAL REPORT".into(), footer: "PAGE 1".into(), font_px: 14, shade_rows: true }
    }
}

/// Renders `cells` (row-major, ragged rows padded with blanks).
pub fn render_table(cells: &[Vec<String>], style: &TableStyle) -> Result<TableRender, PerturbError> {
    let scale = font::scale_for(style.font_px).ok_or(PerturbError::FontTooSmall(style.font_px))?;
    let line_h = font::GLYPH_H * scale;
    let pad = 3 * scale;
    let n_rows = cells.len().max(1);
    let n_cols = cells.iter().map(Vec::len).max().unwrap_or(1).max(1);

    let col_w: Vec<u32> = (0..n_cols)
        .map(|c| {
            let widest =
                cells.iter().filter_map(|r| r.get(c)).map(|t| font::text_extent(t, scale).0).max().unwrap_or(0);
            widest.max(font::ADVANCE * scale) + 2 * pad
        })
        .collect();
    let row_h = line_h + 2 * pad;
    let table_w = col_w.iter().sum::<u32>() + n_cols as u32 + 1;
    let table_h = row_h * n_rows as u32 + n_rows as u32 + 1;

    let margin = 4 * font::ADVANCE * scale;
    let title_w = font::text_extent(&style.title, scale).0;
    let footer_w = font::text_extent(&style.footer, scale).0;
    let width = 2 * margin + table_w.max(title_w).max(footer_w);
    let table_y = margin + 3 * line_h;
    let footer_y = table_y + table_h + 2 * line_h;
    let height = footer_y + line_h + margin;

    let mut img = RgbImage::from_pixel(width, height, PAGE);
    if !style.title.is_empty() {
        draw_text(
            &mut img,
            BBox::new(margin, margin, title_w.max(1), line_h),
            &style.title,
            style.font_px,
            HEADER_INK,
        )?;
    }
    if !style.footer.is_empty() {
        draw_text(&mut img, BBox::new(margin, footer_y, footer_w.max(1), line_h), &style.footer, style.font_px, RULE)?;
    }

    let tx = margin;
    let ty = table_y;
    let table_bbox = BBox::new(tx, ty, table_w, table_h);
    for (x, y, p) in img.enumerate_pixels_mut() {
        if table_bbox.contains(x, y) {
            *p = RULE;
        }
    }

    let mut text_boxes = Vec::with_capacity(n_rows);
    let mut cy = ty + 1;
    for r in 0..n_rows {
        let fill = if style.shade_rows && r % 2 == 1 { SHADE } else { PAGE };
        let mut cx = tx + 1;
        let mut row_boxes = Vec::with_capacity(n_cols);
        for (c, &w) in col_w.iter().enumerate() {
            let interior = BBox::new(cx, cy, w, row_h);
            for y in interior.y..interior.y + interior.h {
                for x in interior.x..interior.x + interior.w {
                    img.put_pixel(x, y, fill);
                }
            }
            let text_box = BBox::new(cx + pad, cy + pad, w - 2 * pad, line_h);
            if let Some(text) = cells.get(r).and_then(|row| row.get(c)).filter(|t| !t.is_empty()) {
                draw_text(&mut img, text_box, text, style.font_px, DEFAULT_INK)?;
            }
            row_boxes.push(text_box);
            cx += w + 1;
        }
        text_boxes.push(row_boxes);
        cy += row_h + 1;
    }

    Ok(TableRender { image: img, table_bbox, text_boxes, font_px: style.font_px })
}

/// Convenience for `&str` tables.
pub fn render_str_table(cells: &[&[&str]], style: &TableStyle) -> Result<TableRender, PerturbError> {
    let owned: Vec<Vec<String>> = cells.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect();
    render_table(&owned, style)
}
