//! Binary opening and connected-component filtering on pixel masks.

use std::collections::VecDeque;

/// One separable pass: for every position, `keep(count, full)` where `count`
/// is the number of ones seen in the `2r+1` window and `full` the number of
/// window positions inside the field.
fn pass_rows(src: &[u8], h: usize, w: usize, r: usize, erode: bool) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        // prefix sums over the row
        let mut pre = vec![0usize; w + 1];
        for x in 0..w {
            pre[x + 1] = pre[x] + row[x] as usize;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let ones = pre[hi + 1] - pre[lo];
            let v = if erode {
                // positions outside the field count as background
                x >= r && x + r < w && ones == 2 * r + 1
            } else {
                ones > 0
            };
            out[y * w + x] = v as u8;
        }
    }
    out
}

fn transpose(src: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

fn square_op(src: &[u8], h: usize, w: usize, r: usize, erode: bool) -> Vec<u8> {
    if r == 0 {
        return src.to_vec();
    }
    let rows = pass_rows(src, h, w, r, erode);
    let cols = pass_rows(&transpose(&rows, h, w), w, h, r, erode);
    transpose(&cols, w, h)
}

/// Erosion by a `(2r+1)^2` square; pixels beyond the border are background.
pub fn erode(src: &[u8], h: usize, w: usize, r: usize) -> Vec<u8> {
    square_op(src, h, w, r, true)
}

pub fn dilate(src: &[u8], h: usize, w: usize, r: usize) -> Vec<u8> {
    square_op(src, h, w, r, false)
}

/// Labels 4-connected foreground components; returns per-pixel labels
/// (0 = background) and the area of each label (index 0 unused).
pub fn label_components(src: &[u8], h: usize, w: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; h * w];
    let mut areas = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if src[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = areas.len() as u32;
        let mut area = 0;
        labels[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if src[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Clears every 4-connected component smaller than `min_area` pixels.
pub fn remove_small_components(src: &[u8], h: usize, w: usize, min_area: usize) -> Vec<u8> {
    let (labels, areas) = label_components(src, h, w);
    labels
        .iter()
        .map(|&l| (l != 0 && areas[l as usize] >= min_area) as u8)
        .collect()
}
