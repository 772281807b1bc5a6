//! Square-kernel morphology and connected components.
//!
//! Pixels outside the raster are ignored by both erosion and dilation, so a
//! foreground region touching the border is not eroded from that side.

use std::collections::VecDeque;

use super::BinaryMask;

fn reduce(dilate: bool, mut it: impl Iterator<Item = bool>) -> bool {
    if dilate {
        it.any(|b| b)
    } else {
        it.all(|b| b)
    }
}

/// One separable pass: OR (dilate) or AND (erode) over a clipped window of
/// radius `r` along rows, then along columns.
fn window(m: &BinaryMask, r: usize, dilate: bool) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    let src = m.bits();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = reduce(dilate, (lo..=hi).map(|xx| src[y * w + xx]));
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = reduce(dilate, (lo..=hi).map(|yy| rows[yy * w + x]));
        }
    }
    BinaryMask::from_bits(w, h, out).expect("dimensions preserved")
}

/// Dilation by a `(2r+1)×(2r+1)` square.
pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    window(m, r, true)
}

/// Erosion by a `(2r+1)×(2r+1)` square.
pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    window(m, r, false)
}

pub fn open(m: &BinaryMask, r: usize) -> BinaryMask {
    dilate(&erode(m, r), r)
}

/// Closing computed on a canvas padded by `r` background pixels and cropped
/// back, so regions near the border are not pulled onto it.
pub fn close(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    let pw = w + 2 * r;
    let padded = BinaryMask::from_fn(pw, h + 2 * r, |x, y| {
        x >= r && y >= r && x < w + r && y < h + r && m.get(x - r, y - r)
    });
    let closed = erode(&dilate(&padded, r), r);
    BinaryMask::from_fn(w, h, |x, y| closed.bits()[(y + r) * pw + x + r])
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn flood(
    m: &BinaryMask,
    value: bool,
    seeds: impl IntoIterator<Item = usize>,
    nbrs: &[(isize, isize)],
    seen: &mut [bool],
) -> Vec<usize> {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let bits = m.bits();
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    for s in seeds {
        if bits[s] == value && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        out.push(i);
        let (x, y) = ((i as isize) % w, (i as isize) / w);
        for &(dx, dy) in nbrs {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let j = (ny * w + nx) as usize;
            if bits[j] == value && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    out
}

/// Background pixels not 4-connected to the border become foreground.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    if w == 0 || h == 0 {
        return m.clone();
    }
    let border = (0..w)
        .flat_map(|x| [x, (h - 1) * w + x])
        .chain((0..h).flat_map(|y| [y * w, y * w + w - 1]));
    let mut seen = vec![false; w * h];
    let outside = flood(m, false, border, &N4, &mut seen);
    let mut bits = vec![true; w * h];
    for i in outside {
        bits[i] = false;
    }
    BinaryMask::from_bits(w, h, bits).expect("dimensions preserved")
}

/// 8-connected foreground components as lists of row-major pixel indices,
/// ordered by their first pixel.
pub fn components(m: &BinaryMask) -> Vec<Vec<usize>> {
    let mut seen = vec![false; m.len()];
    let mut out = Vec::new();
    for i in 0..m.len() {
        if m.bits()[i] && !seen[i] {
            out.push(flood(m, true, [i], &N8, &mut seen));
        }
    }
    out
}

/// Mask holding only the given pixels.
pub fn from_pixels(width: usize, height: usize, pixels: &[usize]) -> BinaryMask {
    let mut bits = vec![false; width * height];
    for &i in pixels {
        bits[i] = true;
    }
    BinaryMask::from_bits(width, height, bits).expect("dimensions preserved")
}

/// Drops components smaller than `ratio` of the largest component.
pub fn remove_small_components(m: &BinaryMask, ratio: f64) -> BinaryMask {
    let comps = components(m);
    let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
    let keep: Vec<usize> = comps
        .into_iter()
        .filter(|c| c.len() as f64 >= ratio * largest as f64)
        .flatten()
        .collect();
    from_pixels(m.width(), m.height(), &keep)
}
