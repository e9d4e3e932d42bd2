//! 5x7 bitmap glyphs for `0-9` and `a-z`.

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;

const GLYPHS: [(char, [u8; 7]); 36] = [
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    ('a', [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111]),
    ('b', [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b11110]),
    ('c', [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('d', [0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10001, 0b01111]),
    ('e', [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110]),
    ('f', [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000]),
    ('g', [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110]),
    ('h', [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001]),
    ('i', [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('j', [0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('k', [0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010]),
    ('l', [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('m', [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10001, 0b10001]),
    ('n', [0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001]),
    ('o', [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('p', [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000]),
    ('q', [0b00000, 0b00000, 0b01101, 0b10011, 0b01111, 0b00001, 0b00001]),
    ('r', [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000]),
    ('s', [0b00000, 0b00000, 0b01110, 0b10000, 0b01110, 0b00001, 0b11110]),
    ('t', [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110]),
    ('u', [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101]),
    ('v', [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('w', [0b00000, 0b00000, 0b10001, 0b10001, 0b10101, 0b10101, 0b01010]),
    ('x', [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001]),
    ('y', [0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110]),
    ('z', [0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111]),
];

/// Ink coverage of `c` as a row-major `7 x 5` grid of 0/1 values.
pub fn glyph(c: char) -> Option<[f32; GLYPH_WIDTH * GLYPH_HEIGHT]> {
    let rows = GLYPHS.iter().find(|(g, _)| *g == c)?.1;
    let mut out = [0.0; GLYPH_WIDTH * GLYPH_HEIGHT];
    for (y, bits) in rows.iter().enumerate() {
        for x in 0..GLYPH_WIDTH {
            if bits >> (GLYPH_WIDTH - 1 - x) & 1 == 1 {
                out[y * GLYPH_WIDTH + x] = 1.0;
            }
        }
    }
    Some(out)
}

pub fn has_glyph(c: char) -> bool {
    GLYPHS.iter().any(|(g, _)| *g == c)
}

/// Glyph `a` interpolated toward `b`: `(1 - u) a + u b`. Past `u = 0.5` the
/// result is closer to `b` than to `a`.
pub fn blend(a: &[f32], b: &[f32], u: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (1.0 - u) * x + u * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_glyphs_distinct_and_inked() {
        for (i, (a, _)) in GLYPHS.iter().enumerate() {
            let ga = glyph(*a).unwrap();
            assert!(ga.iter().sum::<f32>() >= 5.0);
            for (b, _) in &GLYPHS[i + 1..] {
                assert_ne!(ga, glyph(*b).unwrap(), "{a} vs {b}");
            }
        }
        assert!(glyph('A').is_none());
    }

    #[test]
    fn bit_order_is_left_to_right() {
        // 'l' top row 01100
        let g = glyph('l').unwrap();
        assert_eq!(&g[..5], &[0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pairs_meet_at_midpoint() {
        let (c, e) = (glyph('c').unwrap(), glyph('e').unwrap());
        assert_eq!(blend(&c, &e, 0.5), blend(&e, &c, 0.5));
        assert_eq!(blend(&c, &e, 0.0), c.to_vec());
        assert_eq!(blend(&c, &e, 1.0), e.to_vec());
        assert_ne!(blend(&c, &e, 0.3), blend(&e, &c, 0.3));
    }
}
