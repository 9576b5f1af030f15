use std::collections::HashMap;

use super::Mask;
use crate::error::{Error, Result};

/// Color-codes a mask as interleaved RGB bytes.
pub fn encode_mask(mask: &Mask, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(mask.data.len() * 3);
    for (i, &v) in mask.data.iter().enumerate() {
        let color = palette.get(v as usize).ok_or_else(|| Error::LabelOutOfRange {
            label: v as usize,
            classes: palette.len(),
            n: 0,
            y: i / mask.width,
            x: i % mask.width,
        })?;
        out.extend_from_slice(color);
    }
    Ok(out)
}

/// Inverse of [`encode_mask`]. Fails on the most frequent off-palette color.
pub fn decode_mask(rgb: &[u8], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Mask> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {height}x{width} RGB mask",
            rgb.len()
        )));
    }
    let lookup: HashMap<[u8; 3], u8> = palette
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u8))
        .collect();
    let mut data = Vec::with_capacity(height * width);
    let mut unknown: HashMap<[u8; 3], usize> = HashMap::new();
    for px in rgb.chunks_exact(3) {
        let c = [px[0], px[1], px[2]];
        match lookup.get(&c) {
            Some(&k) => data.push(k),
            None => {
                *unknown.entry(c).or_default() += 1;
                data.push(0);
            }
        }
    }
    if let Some((color, count)) = unknown.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))) {
        return Err(Error::UnknownColor { color, count });
    }
    Mask::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSchema;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_masks_round_trip() {
        let pal = DatasetSchema::isprs().palette;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let m = Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..6)).collect()).unwrap();
            let rgb = encode_mask(&m, &pal).unwrap();
            assert_eq!(decode_mask(&rgb, h, w, &pal).unwrap(), m);
        }
    }

    #[test]
    fn isprs_palette_is_a_bijection() {
        let pal = DatasetSchema::isprs().palette;
        let m = Mask::new(1, 6, (0..6).collect()).unwrap();
        let rgb = encode_mask(&m, &pal).unwrap();
        let distinct: std::collections::HashSet<_> = rgb.chunks(3).collect();
        assert_eq!(distinct.len(), 6);
        assert_eq!(decode_mask(&rgb, 1, 6, &pal).unwrap(), m);
    }

    #[test]
    fn off_palette_pixels_are_reported() {
        let pal = DatasetSchema::isprs().palette;
        let mut rgb = encode_mask(&Mask::new(2, 2, vec![0, 1, 2, 3]).unwrap(), &pal).unwrap();
        rgb[3..6].copy_from_slice(&[7, 7, 7]);
        rgb[9..12].copy_from_slice(&[7, 7, 7]);
        match decode_mask(&rgb, 2, 2, &pal) {
            Err(Error::UnknownColor { color, count }) => {
                assert_eq!(color, [7, 7, 7]);
                assert_eq!(count, 2);
            }
            other => panic!("{other:?}"),
        }
    }
}
