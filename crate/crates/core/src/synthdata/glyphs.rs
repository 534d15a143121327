//! Built-in 5x7 bitmap glyph set.
//!
//! Rendering and decoding share this table, so the ground-truth text of a
//! synthetic page round-trips exactly: decoding is template matching against
//! these bitmaps, not general OCR.

use crate::image::Image;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Bit 4 is the leftmost column of each row.
type Bitmap = [u8; GLYPH_H];

const GLYPHS: &[(char, Bitmap)] = &[
    ('A', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('B', [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E]),
    ('C', [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E]),
    ('D', [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C]),
    ('E', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('F', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10]),
    ('G', [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F]),
    ('H', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('I', [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('M', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('N', [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11]),
    ('O', [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('P', [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10]),
    ('Q', [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D]),
    ('R', [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11]),
    ('S', [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E]),
    ('T', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('U', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('V', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('W', [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11]),
    ('X', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04]),
    ('Z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C]),
    ('-', [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00]),
];

pub fn glyph(ch: char) -> Option<&'static Bitmap> {
    GLYPHS.iter().find(|(c, _)| *c == ch).map(|(_, b)| b)
}

/// Uppercase letters only; used to build random words.
pub fn letters() -> impl Iterator<Item = char> {
    ('A'..='Z').chain('0'..='9')
}

/// Draws a glyph with its top-left corner at (y0, x0), each bit scaled to a
/// `scale` x `scale` block of ink.
pub fn draw_glyph(img: &mut Image, ch: char, y0: usize, x0: usize, scale: usize, ink: f32) {
    let Some(bits) = glyph(ch) else { return };
    for (row, &b) in bits.iter().enumerate() {
        for col in 0..GLYPH_W {
            if b & (1 << (GLYPH_W - 1 - col)) == 0 {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = y0 + row * scale + dy;
                    let x = x0 + col * scale + dx;
                    if y < img.height() && x < img.width() {
                        for c in 0..img.channels() {
                            img.set(y, x, c, ink);
                        }
                    }
                }
            }
        }
    }
}

/// Reads a glyph cell back from an image: each bit is the majority-ink vote
/// of its scale x scale block. Returns the decoded character and its bit
/// disagreement against the best-matching glyph, or None for an empty cell.
pub fn decode_cell(img: &Image, y0: usize, x0: usize, scale: usize) -> Option<(char, usize)> {
    let mut bits = [0u8; GLYPH_H];
    let mut ink_px = 0usize;
    for row in 0..GLYPH_H {
        for col in 0..GLYPH_W {
            let mut dark = 0usize;
            let mut total = 0usize;
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = y0 + row * scale + dy;
                    let x = x0 + col * scale + dx;
                    if y < img.height() && x < img.width() {
                        total += 1;
                        if img.at(y, x, 0) < 0.5 {
                            dark += 1;
                        }
                    }
                }
            }
            if total > 0 && dark * 2 > total {
                bits[row] |= 1 << (GLYPH_W - 1 - col);
                ink_px += 1;
            }
        }
    }
    if ink_px == 0 {
        return None;
    }
    let mut best = ('?', usize::MAX);
    for (ch, pattern) in GLYPHS {
        let mut dist = 0usize;
        for row in 0..GLYPH_H {
            dist += (bits[row] ^ pattern[row]).count_ones() as usize;
        }
        if dist < best.1 {
            best = (*ch, dist);
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_glyphs_distinct() {
        for (i, (ca, a)) in GLYPHS.iter().enumerate() {
            for (cb, b) in &GLYPHS[i + 1..] {
                assert_ne!(a, b, "glyphs {ca:?} and {cb:?} share a bitmap");
            }
        }
    }

    #[test]
    fn draw_decode_round_trip() {
        for scale in [1usize, 2, 3] {
            for (ch, _) in GLYPHS {
                let mut img = Image::full(GLYPH_H * scale + 2, GLYPH_W * scale + 2, 1, 1.0);
                draw_glyph(&mut img, *ch, 1, 1, scale, 0.05);
                let (got, dist) = decode_cell(&img, 1, 1, scale).unwrap();
                assert_eq!(got, *ch, "scale {scale}");
                assert_eq!(dist, 0);
            }
        }
    }

    #[test]
    fn empty_cell_decodes_to_none() {
        let img = Image::full(20, 20, 1, 1.0);
        assert!(decode_cell(&img, 0, 0, 2).is_none());
    }
}
