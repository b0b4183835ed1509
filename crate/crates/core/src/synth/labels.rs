use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::LabelImage;

fn neighbors4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (c, r) = (i % w, i / w);
    [
        (c > 0).then(|| i - 1),
        (c + 1 < w).then(|| i + 1),
        (r > 0).then(|| i - w),
        (r + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Splits every 4-connected region of equal nonzero id into up to `parts`
/// pieces grown from random seed pixels. Output ids are fresh and
/// sequential from 1; 0 stays 0.
pub fn fragment_masks<R: Rng + ?Sized>(labels: &LabelImage, parts: usize, rng: &mut R) -> Result<LabelImage> {
    if parts == 0 {
        return Err(Error::invalid("fragment count must be >= 1"));
    }
    let (w, h) = (labels.width as usize, labels.height as usize);
    let n = w * h;
    let mut region = vec![u32::MAX; n];
    let mut out = vec![0u16; n];
    let mut next_id: u32 = 1;
    for start in 0..n {
        let id = labels.ids[start];
        if id == 0 || region[start] != u32::MAX {
            continue;
        }
        let mut pixels = vec![start];
        region[start] = 0;
        let mut k = 0;
        while k < pixels.len() {
            let p = pixels[k];
            k += 1;
            for q in neighbors4(p, w, h) {
                if labels.ids[q] == id && region[q] == u32::MAX {
                    region[q] = 0;
                    pixels.push(q);
                }
            }
        }

        let m = parts.min(pixels.len());
        if next_id as usize + m > u16::MAX as usize + 1 {
            return Err(Error::invalid("too many fragments for 16-bit labels"));
        }
        let mut queue = VecDeque::new();
        for (j, s) in sample(rng, pixels.len(), m).into_iter().enumerate() {
            let p = pixels[s];
            region[p] = j as u32 + 1;
            queue.push_back(p);
        }
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(p, w, h) {
                if labels.ids[q] == id && region[q] == 0 {
                    region[q] = region[p];
                    queue.push_back(q);
                }
            }
        }
        for &p in &pixels {
            out[p] = (next_id + region[p] - 1) as u16;
        }
        next_id += m as u32;
    }
    Ok(LabelImage {
        width: labels.width,
        height: labels.height,
        ids: out,
    })
}
