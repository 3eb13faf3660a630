//! Binary morphology on `[H,W]` masks with a 3×3 square element.

fn step(mask: &[bool], w: usize, h: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..h {
        for c in 0..w {
            let mut any = false;
            let mut all = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    // outside the image counts as background
                    let v = rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && mask[rr as usize * w + cc as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[r * w + c] = if dilate { any } else { all };
        }
    }
    out
}

pub fn dilate(mask: &[bool], w: usize, h: usize, iterations: usize) -> Vec<bool> {
    (0..iterations).fold(mask.to_vec(), |m, _| step(&m, w, h, true))
}

pub fn erode(mask: &[bool], w: usize, h: usize, iterations: usize) -> Vec<bool> {
    (0..iterations).fold(mask.to_vec(), |m, _| step(&m, w, h, false))
}

/// Two iterations at 64 px, scaled linearly with the image height.
pub fn band_iterations(height: usize) -> usize {
    ((2 * height + 32) / 64).max(1)
}

/// Pixels that are in the dilated mask but not in the eroded one.
pub fn boundary_band(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let it = band_iterations(h);
    let d = dilate(mask, w, h, it);
    let e = erode(mask, w, h, it);
    d.iter().zip(&e).map(|(&a, &b)| a && !b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_band() {
        let (w, h) = (9, 9);
        let mask: Vec<bool> = (0..81).map(|i| (2..7).contains(&(i % 9)) && (2..7).contains(&(i / 9))).collect();
        let d = dilate(&mask, w, h, 1);
        assert_eq!(d.iter().filter(|&&x| x).count(), 49);
        let e = erode(&mask, w, h, 1);
        assert_eq!(e.iter().filter(|&&x| x).count(), 9);
        assert_eq!(band_iterations(64), 2);
        assert_eq!(band_iterations(32), 1);
        assert_eq!(band_iterations(128), 4);
    }
}
