use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::{ReconImage, TargetMask};

/// Hysteresis thresholds are fractions of the largest gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    pub gaussian_sigma: f64,
    pub low_thresh: f64,
    pub high_thresh: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.0,
            low_thresh: 0.1,
            high_thresh: 0.3,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidArgument("gaussian_sigma must be positive".into()));
        }
        if !(self.low_thresh > 0.0 && self.low_thresh < self.high_thresh) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < low_thresh < high_thresh, got ({}, {})",
                self.low_thresh, self.high_thresh
            )));
        }
        Ok(())
    }
}

struct Grid {
    side: usize,
    data: Vec<f64>,
}

impl Grid {
    fn at_clamped(&self, row: isize, col: isize) -> f64 {
        let last = self.side as isize - 1;
        let (r, c) = (row.clamp(0, last) as usize, col.clamp(0, last) as usize);
        self.data[r * self.side + c]
    }
}

fn gaussian_blur(img: &Grid, sigma: f64) -> Grid {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let n = img.side;
    let pass = |src: &Grid, horizontal: bool| -> Grid {
        let mut data = vec![0.0; n * n];
        for r in 0..n as isize {
            for c in 0..n as isize {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    acc += w * if horizontal {
                        src.at_clamped(r, c + o)
                    } else {
                        src.at_clamped(r + o, c)
                    };
                }
                data[r as usize * n + c as usize] = acc;
            }
        }
        Grid { side: n, data }
    };
    pass(&pass(img, true), false)
}

/// Thin, linked edge map (Canny: blur, Sobel, non-maximum suppression,
/// hysteresis). Returns `None` when the image has no gradient at all.
pub fn canny_edges(recon: &ReconImage, config: &CannyConfig) -> Result<Option<Vec<bool>>> {
    config.validate()?;
    if recon.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("reconstruction contains non-finite values".into()));
    }
    let n = recon.side();
    let blurred = gaussian_blur(
        &Grid {
            side: n,
            data: recon.values().to_vec(),
        },
        config.gaussian_sigma,
    );

    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    let mut mag = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let p = |dr: isize, dc: isize| blurred.at_clamped(r + dr, c + dc);
            let x = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let y = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = r as usize * n + c as usize;
            gx[i] = x;
            gy[i] = y;
            mag[i] = x.hypot(y);
        }
    }
    let max_mag = mag.iter().cloned().fold(0.0, f64::max);
    let scale = recon.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_mag <= 1e-12 * (1.0 + scale) {
        return Ok(None);
    }

    // non-maximum suppression along the gradient, quantized to 8 directions;
    // a tie with the uphill neighbour goes to that neighbour so a symmetric
    // ridge straddling a step edge is thinned onto its brighter side
    let m_at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            0.0
        } else {
            mag[r as usize * n + c as usize]
        }
    };
    const UPHILL: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];
    let mut thin = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let i = r as usize * n + c as usize;
            let angle = gy[i].atan2(gx[i]).to_degrees();
            let sector = ((angle + 22.5).rem_euclid(360.0) / 45.0) as usize % 8;
            let (dr, dc) = UPHILL[sector];
            if mag[i] > m_at(r + dr, c + dc) && mag[i] >= m_at(r - dr, c - dc) {
                thin[i] = mag[i];
            }
        }
    }

    let (low, high) = (config.low_thresh * max_mag, config.high_thresh * max_mag);
    let mut edges = vec![false; n * n];
    let mut stack = Vec::new();
    for start in 0..n * n {
        if thin[start] < high || edges[start] {
            continue;
        }
        edges[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                        continue;
                    }
                    let j = rr as usize * n + cc as usize;
                    if !edges[j] && thin[j] >= low {
                        edges[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    Ok(Some(edges))
}

fn neighbours4(i: usize, n: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / n, i % n);
    [
        (r > 0).then(|| i - n),
        (r + 1 < n).then(|| i + n),
        (c > 0).then(|| i - 1),
        (c + 1 < n).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// Tuber region from a reconstruction: Canny edges, then everything not
/// reachable from the border without crossing an edge, reduced to its
/// largest 4-connected component. Empty when no edge encloses any pixel.
///
/// A pixel-wide edge straddles the true boundary, so an enclosing edge pixel
/// is kept only when its value reaches the midpoint between the mean of the
/// enclosed interior and the mean of the exterior.
pub fn canny_region(recon: &ReconImage, config: &CannyConfig) -> Result<TargetMask> {
    let n = recon.side();
    let Some(edges) = canny_edges(recon, config)? else {
        return Ok(TargetMask::empty(n));
    };

    let mut exterior = vec![false; n * n];
    let mut queue = VecDeque::new();
    for i in 0..n * n {
        let (r, c) = (i / n, i % n);
        let border = r == 0 || c == 0 || r + 1 == n || c + 1 == n;
        if border && !edges[i] {
            exterior[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours4(i, n) {
            if !exterior[j] && !edges[j] {
                exterior[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut filled: Vec<bool> = exterior.iter().map(|e| !e).collect();
    let enclosed = filled.iter().zip(&edges).any(|(f, e)| *f && !e);
    if !enclosed {
        return Ok(TargetMask::empty(n));
    }
    let v = recon.values();
    let mean_of = |keep: &dyn Fn(usize) -> bool| {
        let (sum, count) = (0..n * n).filter(|&i| keep(i)).fold((0.0, 0usize), |(s, k), i| (s + v[i], k + 1));
        (count > 0).then(|| sum / count as f64)
    };
    let inner = mean_of(&|i| filled[i] && !edges[i]).expect("enclosed pixel exists");
    if let Some(outer) = mean_of(&|i| exterior[i]) {
        let level = 0.5 * (inner + outer);
        for i in 0..n * n {
            if filled[i] && edges[i] {
                filled[i] = v[i] >= level;
            }
        }
    }

    // largest 4-connected component; ties keep the first found
    let mut label = vec![usize::MAX; n * n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n * n {
        if !filled[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = vec![start];
        label[start] = start;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in neighbours4(i, n) {
                if filled[j] && label[j] == usize::MAX {
                    label[j] = start;
                    members.push(j);
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    let mut mask = TargetMask::empty(n);
    for i in best {
        mask.set(i / n, i % n, true);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::iou;

    fn disk(side: usize, cr: f64, cc: f64, radius: f64) -> (ReconImage, TargetMask) {
        let inside = |r: usize, c: usize| (r as f64 - cr).hypot(c as f64 - cc) <= radius;
        (
            ReconImage::from_fn(side, |r, c| if inside(r, c) { 1.0 } else { 0.0 }),
            TargetMask::from_fn(side, inside),
        )
    }

    #[test]
    fn sharp_disk_is_recovered() {
        let (img, truth) = disk(36, 17.5, 17.5, 6.0);
        let got = canny_region(&img, &CannyConfig::default()).unwrap();
        let score = iou(&got, &truth).unwrap();
        assert!(score >= 0.9, "iou {score}, {} vs {} px", got.count(), truth.count());
    }

    #[test]
    fn constant_image_has_no_region() {
        let img = ReconImage::new(36, vec![0.42; 36 * 36]).unwrap();
        assert!(canny_region(&img, &CannyConfig::default()).unwrap().is_empty());
        assert!(canny_edges(&img, &CannyConfig::default()).unwrap().is_none());
    }

    #[test]
    fn larger_of_two_blobs_survives() {
        let (big, big_mask) = disk(36, 10.0, 10.0, 6.0);
        let (small, _) = disk(36, 27.0, 27.0, 3.0);
        let values: Vec<f64> = big.values().iter().zip(small.values()).map(|(a, b)| a + b).collect();
        let img = ReconImage::new(36, values).unwrap();
        let got = canny_region(&img, &CannyConfig::default()).unwrap();
        assert!(!got.get(27, 27));
        assert!(iou(&got, &big_mask).unwrap() >= 0.8);
    }

    #[test]
    fn open_edge_yields_empty_mask() {
        // a single step across the whole image: edges touch the border on
        // both ends and enclose nothing
        let img = ReconImage::from_fn(20, |_, c| if c < 10 { 0.0 } else { 1.0 });
        let got = canny_region(&img, &CannyConfig::default()).unwrap();
        assert!(got.is_empty() || got.count() < 20 * 20);
    }

    #[test]
    fn invalid_config_and_input() {
        let img = ReconImage::new(4, vec![0.0; 16]).unwrap();
        let bad = CannyConfig {
            low_thresh: 0.5,
            high_thresh: 0.3,
            ..Default::default()
        };
        assert!(canny_region(&img, &bad).is_err());
        let nan = ReconImage::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(canny_region(&nan, &CannyConfig::default()).is_err());
    }
}
