//! Rendering of attention maps and dense patch correspondences as RGB
//! buffers; the CLI writes them out as PPM files.

use crate::data::Image;
use crate::losses::MatchMap;
use crate::tensor::Scalar;
use crate::vit::{TokenSet, VitConfig};

/// Distinct per-head colors, cycled when a model has more heads.
pub const HEAD_COLORS: [(u8, u8, u8); 8] = [
    (255, 64, 64),
    (64, 160, 255),
    (64, 255, 96),
    (255, 200, 32),
    (200, 64, 255),
    (32, 230, 230),
    (255, 128, 192),
    (160, 255, 32),
];

/// An interleaved-RGB raster ready for PPM output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    fn filled(width: usize, height: usize, color: (u8, u8, u8)) -> Self {
        let mut rgb = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            rgb.extend_from_slice(&[color.0, color.1, color.2]);
        }
        Raster { width, height, rgb }
    }

    fn put(&mut self, x: usize, y: usize, color: (u8, u8, u8)) {
        if x < self.width && y < self.height {
            let base = (y * self.width + x) * 3;
            self.rgb[base] = color.0;
            self.rgb[base + 1] = color.1;
            self.rgb[base + 2] = color.2;
        }
    }

    fn paste(&mut self, img: &Image, x0: usize, y0: usize) {
        for y in 0..img.size {
            for x in 0..img.size {
                self.put(
                    x0 + x,
                    y0 + y,
                    (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)),
                );
            }
        }
    }
}

/// Last-layer `[cls]` attention of one head over the patch grid, upsampled
/// to image size by nearest neighbour and renormalized to [0, 255].
fn head_weight_plane<T: Scalar>(
    ts: &TokenSet<T>,
    head: usize,
    grid: usize,
    image_size: usize,
) -> Vec<u8> {
    let last = ts.attn.last().expect("attention maps");
    let t = last[head].shape()[1];
    let row0 = &last[head].data()[..t];
    let weights: Vec<f64> = (0..grid * grid).map(|i| row0[i + 1].to_f64()).collect();
    let lo = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let cell = image_size / grid;
    let mut plane = vec![0u8; image_size * image_size];
    for y in 0..image_size {
        for x in 0..image_size {
            let w = weights[(y / cell).min(grid - 1) * grid + (x / cell).min(grid - 1)];
            plane[y * image_size + x] = (255.0 * (w - lo) / span).round() as u8;
        }
    }
    plane
}

/// One overlay per attention head plus one combined map: the grayscale image
/// blended with the head color scaled by normalized attention.
pub fn attention_overlays<T: Scalar>(
    ts: &TokenSet<T>,
    image: &Image,
    cfg: &VitConfig,
) -> Vec<(String, Raster)> {
    let s = cfg.image_size;
    let grid = cfg.grid();
    let heads = ts.attn.last().map(|l| l.len()).unwrap_or(0);

    let gray = |x: usize, y: usize| -> f64 {
        0.299 * image.get(0, y, x) as f64
            + 0.587 * image.get(1, y, x) as f64
            + 0.114 * image.get(2, y, x) as f64
    };

    let mut out = Vec::with_capacity(heads + 1);
    let planes: Vec<Vec<u8>> = (0..heads)
        .map(|h| head_weight_plane(ts, h, grid, s))
        .collect();

    for (h, plane) in planes.iter().enumerate() {
        let color = HEAD_COLORS[h % HEAD_COLORS.len()];
        let mut raster = Raster::filled(s, s, (0, 0, 0));
        for y in 0..s {
            for x in 0..s {
                let w = plane[y * s + x] as f64 / 255.0;
                let g = gray(x, y) * 0.35;
                let px = (
                    (g + w * color.0 as f64 * 0.65).round().clamp(0.0, 255.0) as u8,
                    (g + w * color.1 as f64 * 0.65).round().clamp(0.0, 255.0) as u8,
                    (g + w * color.2 as f64 * 0.65).round().clamp(0.0, 255.0) as u8,
                );
                raster.put(x, y, px);
            }
        }
        out.push((format!("head{h}"), raster));
    }

    // combined: additive color mix over all heads
    let mut combined = Raster::filled(s, s, (0, 0, 0));
    for y in 0..s {
        for x in 0..s {
            let mut acc = [gray(x, y) * 0.35; 3];
            for (h, plane) in planes.iter().enumerate() {
                let color = HEAD_COLORS[h % HEAD_COLORS.len()];
                let w = plane[y * s + x] as f64 / 255.0 / heads.max(1) as f64;
                acc[0] += w * color.0 as f64 * 0.65;
                acc[1] += w * color.1 as f64 * 0.65;
                acc[2] += w * color.2 as f64 * 0.65;
            }
            combined.put(
                x,
                y,
                (
                    acc[0].round().clamp(0.0, 255.0) as u8,
                    acc[1].round().clamp(0.0, 255.0) as u8,
                    acc[2].round().clamp(0.0, 255.0) as u8,
                ),
            );
        }
    }
    out.push(("combined".into(), combined));
    out
}

/// The query patches for the correspondence view: per head, the patch with
/// the highest last-layer `[cls]` attention.
pub fn top_attention_queries<T: Scalar>(ts: &TokenSet<T>) -> Vec<usize> {
    let last = ts.attn.last().expect("attention maps");
    last.iter()
        .map(|head| {
            let t = head.shape()[1];
            let row0 = &head.data()[..t];
            let mut best = 0usize;
            let mut best_w = f64::NEG_INFINITY;
            for i in 0..t - 1 {
                let w = row0[i + 1].to_f64();
                if w > best_w {
                    best_w = w;
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub const PAIR_GAP: usize = 4;

/// Pixel-center endpoints of the correspondence lines: query patch centers in
/// the left image, matched patch centers in the right image (offset by the
/// image width plus gap).
pub fn correspondence_endpoints(
    cfg: &VitConfig,
    matches: &MatchMap,
    queries: &[usize],
) -> Vec<((usize, usize), (usize, usize))> {
    let grid = cfg.grid();
    let p = cfg.patch_size;
    let offset = cfg.image_size + PAIR_GAP;
    let center = |patch: usize| -> (usize, usize) {
        let gy = patch / grid;
        let gx = patch % grid;
        (gx * p + p / 2, gy * p + p / 2)
    };
    queries
        .iter()
        .map(|&q| {
            let (x0, y0) = center(q);
            let (x1, y1) = center(matches.k_plus[q]);
            ((x0, y0), (x1 + offset, y1))
        })
        .collect()
}

/// Side-by-side pair image with lines joining each query patch to its best
/// match.
pub fn correspondence_image(
    cfg: &VitConfig,
    left: &Image,
    right: &Image,
    matches: &MatchMap,
    queries: &[usize],
) -> Raster {
    let s = cfg.image_size;
    let mut raster = Raster::filled(2 * s + PAIR_GAP, s, (24, 24, 24));
    raster.paste(left, 0, 0);
    raster.paste(right, s + PAIR_GAP, 0);
    for (qi, (a, b)) in correspondence_endpoints(cfg, matches, queries)
        .into_iter()
        .enumerate()
    {
        let color = HEAD_COLORS[qi % HEAD_COLORS.len()];
        draw_line(&mut raster, a, b, color);
    }
    raster
}

fn draw_line(raster: &mut Raster, a: (usize, usize), b: (usize, usize), color: (u8, u8, u8)) {
    let (mut x0, mut y0) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        raster.put(x0 as usize, y0 as usize, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::head::HeadConfig;
    use crate::losses::match_patches;
    use crate::trainer::ModelPair;

    fn micro_cfg() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn forward_image(
        pair: &ModelPair<f32>,
        cfg: &VitConfig,
        img: &Image,
    ) -> crate::vit::TokenSet<f32> {
        let toks = pair.teacher.vit.patchify(cfg, &img.to_tensor()).unwrap();
        pair.teacher.vit.forward(cfg, &toks).unwrap()
    }

    #[test]
    fn overlay_count_is_heads_plus_one() {
        let cfg = micro_cfg();
        let ds = generate_synthetic(7, 1, 8, 1).unwrap();
        let pair = ModelPair::<f32>::fresh(&cfg, &HeadConfig::desk_default(8), None, 2);
        let img = ds.image(0);
        let ts = forward_image(&pair, &cfg, &img);
        let overlays = attention_overlays(&ts, &img, &cfg);
        assert_eq!(overlays.len(), cfg.num_heads + 1);
        for (_, r) in &overlays {
            assert_eq!((r.width, r.height), (8, 8));
            assert_eq!(r.rgb.len(), 3 * 64);
        }
    }

    #[test]
    fn head_plane_spans_full_range() {
        let cfg = micro_cfg();
        let ds = generate_synthetic(7, 1, 8, 3).unwrap();
        let pair = ModelPair::<f32>::fresh(&cfg, &HeadConfig::desk_default(8), None, 4);
        let img = ds.image(0);
        let ts = forward_image(&pair, &cfg, &img);
        let plane = head_weight_plane(&ts, 0, cfg.grid(), cfg.image_size);
        assert_eq!(plane.iter().copied().min(), Some(0));
        assert_eq!(plane.iter().copied().max(), Some(255));
    }

    #[test]
    fn endpoints_recompute_from_matches() {
        let cfg = micro_cfg();
        let ds = generate_synthetic(7, 2, 8, 5).unwrap();
        let pair = ModelPair::<f32>::fresh(&cfg, &HeadConfig::desk_default(8), None, 6);
        let a = ds.image(0);
        let b = ds.image(1);
        let ts_a = forward_image(&pair, &cfg, &a);
        let ts_b = forward_image(&pair, &cfg, &b);
        let matches = match_patches(&ts_a.patches, &ts_b.patches).unwrap();
        let queries = top_attention_queries(&ts_a);
        assert_eq!(queries.len(), cfg.num_heads);

        let eps = correspondence_endpoints(&cfg, &matches, &queries);
        for (q, ((x0, y0), (x1, y1))) in queries.iter().zip(&eps) {
            // left endpoint: center of query patch on a 2x2 grid of 4px cells
            assert_eq!(*x0, (q % 2) * 4 + 2);
            assert_eq!(*y0, (q / 2) * 4 + 2);
            let m = matches.k_plus[*q];
            assert_eq!(*x1, (m % 2) * 4 + 2 + 8 + PAIR_GAP);
            assert_eq!(*y1, (m / 2) * 4 + 2);
        }

        let raster = correspondence_image(&cfg, &a, &b, &matches, &queries);
        assert_eq!(raster.width, 2 * 8 + PAIR_GAP);
        assert_eq!(raster.height, 8);
        // the last-drawn line's endpoints carry its head color (earlier lines
        // can be overdrawn where they cross)
        let last = eps.len() - 1;
        let (x0, y0) = eps[last].0;
        let px = &raster.rgb[(y0 * raster.width + x0) * 3..][..3];
        let expect = HEAD_COLORS[last % HEAD_COLORS.len()];
        assert_eq!(px, &[expect.0, expect.1, expect.2]);
    }
}
