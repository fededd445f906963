//! Road-region tiling: detection boxes predicted on a downscaled copy of a
//! large aerial image are mapped back to full resolution and the covered
//! region is cut into fixed-size tiles.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::BBox;

pub const DEFAULT_TILE_SIZE: u32 = 800;
pub const DEFAULT_RESIZE_LONG_SIDE: u32 = 1024;
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.35;
pub const DEFAULT_TEXT_THRESHOLD: f64 = 0.25;

// Float noise from the resize round trip must not push an exact integer
// coordinate across a floor/ceil boundary.
const SNAP_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("box {0:?} has no area at pixel resolution")]
    DegenerateBox([f64; 4]),
    #[error("invalid normalized box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("image {width}x{height} is smaller than the {resize_long_side}px working resolution")]
    ImageTooSmall {
        width: u32,
        height: u32,
        resize_long_side: u32,
    },
    #[error("tile size {tile_size} exceeds image {width}x{height}")]
    TileExceedsImage {
        tile_size: u32,
        width: u32,
        height: u32,
    },
    #[error("tile at ({x}, {y}) falls outside the image")]
    TileOutOfBounds { x: u32, y: u32 },
}

fn default_resize() -> u32 {
    DEFAULT_RESIZE_LONG_SIDE
}
fn default_box_threshold() -> f64 {
    DEFAULT_BOX_THRESHOLD
}
fn default_text_threshold() -> f64 {
    DEFAULT_TEXT_THRESHOLD
}

/// A road detection on the resized image, already vetted by an external
/// filter that sets `keep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub image_id: String,
    /// `(x0, y0, x1, y1)` normalized to `[0, 1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: String,
    pub keep: bool,
}

/// Per-image detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub image_id: String,
    #[serde(default = "default_resize")]
    pub resize_long_side: u32,
    #[serde(default = "default_box_threshold")]
    pub box_threshold: f64,
    #[serde(default = "default_text_threshold")]
    pub text_threshold: f64,
    pub detections: Vec<DetectionBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub source_image_id: String,
    pub tile_size: u32,
    pub resize_long_side: u32,
    /// Top-left offsets in original-resolution pixels, row-major.
    pub tiles: Vec<(u32, u32)>,
}

impl TilePlan {
    pub fn tile_id(&self, offset: (u32, u32)) -> String {
        format!("{}_{}_{}", self.source_image_id, offset.0, offset.1)
    }
}

fn check_normalized(b: [f64; 4]) -> Result<(), TileError> {
    let [x0, y0, x1, y1] = b;
    if b.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(TileError::InvalidBox(b));
    }
    if x0 >= x1 || y0 >= y1 {
        return Err(TileError::DegenerateBox(b));
    }
    Ok(())
}

fn snap_floor(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v.floor()
    }
}

fn snap_ceil(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v.ceil()
    }
}

/// Map a normalized box on the resized image to an original-resolution pixel
/// box, rounding outward and clamping to the image.
pub fn denormalize_box(
    bbox: [f64; 4],
    original_w: u32,
    original_h: u32,
    resize_long_side: u32,
) -> Result<BBox, TileError> {
    check_normalized(bbox)?;
    let long = original_w.max(original_h);
    if resize_long_side == 0 || long < resize_long_side {
        return Err(TileError::ImageTooSmall {
            width: original_w,
            height: original_h,
            resize_long_side,
        });
    }
    let scale = long as f64 / resize_long_side as f64;
    let (rw, rh) = (original_w as f64 / scale, original_h as f64 / scale);
    let [x0, y0, x1, y1] = bbox;
    let px = |v: f64, resized: f64, limit: u32, ceil: bool| {
        let p = v * resized * scale;
        let p = if ceil { snap_ceil(p) } else { snap_floor(p) };
        p.clamp(0.0, limit as f64) as u32
    };
    let out = BBox {
        x0: px(x0, rw, original_w, false),
        y0: px(y0, rh, original_h, false),
        x1: px(x1, rw, original_w, true),
        y1: px(y1, rh, original_h, true),
    };
    if out.is_empty() {
        return Err(TileError::DegenerateBox(bbox));
    }
    Ok(out)
}

/// Inverse of [`denormalize_box`] up to rounding.
pub fn normalize_box(b: BBox, original_w: u32, original_h: u32) -> [f64; 4] {
    [
        b.x0 as f64 / original_w as f64,
        b.y0 as f64 / original_h as f64,
        b.x1 as f64 / original_w as f64,
        b.y1 as f64 / original_h as f64,
    ]
}

fn axis_offsets(lo: u32, hi: u32, tile: u32, limit: u32) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    let mut pos = lo;
    loop {
        let clamped = pos.min(hi.saturating_sub(tile)).max(lo).min(limit - tile);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if pos + tile >= hi {
            break;
        }
        pos += tile;
    }
    out
}

/// Tile grid over `pixel_box` with stride `tile_size`. The last tile of each
/// row and column is shifted back inside the box (and the image), so edge
/// tiles may overlap their neighbours but never pad.
pub fn plan_tiles(
    image_id: &str,
    pixel_box: BBox,
    tile_size: u32,
    image_w: u32,
    image_h: u32,
) -> Result<TilePlan, TileError> {
    if tile_size == 0 || tile_size > image_w || tile_size > image_h {
        return Err(TileError::TileExceedsImage {
            tile_size,
            width: image_w,
            height: image_h,
        });
    }
    let b = BBox {
        x0: pixel_box.x0.min(image_w),
        y0: pixel_box.y0.min(image_h),
        x1: pixel_box.x1.min(image_w),
        y1: pixel_box.y1.min(image_h),
    };
    if b.is_empty() {
        return Err(TileError::DegenerateBox(normalize_box(pixel_box, image_w, image_h)));
    }
    let xs = axis_offsets(b.x0, b.x1, tile_size, image_w);
    let ys = axis_offsets(b.y0, b.y1, tile_size, image_h);
    let tiles = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(TilePlan {
        source_image_id: image_id.to_string(),
        tile_size,
        resize_long_side: DEFAULT_RESIZE_LONG_SIDE,
        tiles,
    })
}

pub fn cut_tiles(image: &RgbImage, plan: &TilePlan) -> Result<Vec<(String, RgbImage)>, TileError> {
    let ts = plan.tile_size;
    plan.tiles
        .iter()
        .map(|&(x, y)| {
            if x + ts > image.width() || y + ts > image.height() {
                return Err(TileError::TileOutOfBounds { x, y });
            }
            let tile = image::imageops::crop_imm(image, x, y, ts, ts).to_image();
            Ok((plan.tile_id((x, y)), tile))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_box_is_full_image() {
        let b = denormalize_box([0.0, 0.0, 1.0, 1.0], 7952, 5304, 1024).unwrap();
        assert_eq!(b, BBox { x0: 0, y0: 0, x1: 7952, y1: 5304 });
    }

    #[test]
    fn denormalize_uav_frame() {
        // scale = 7952 / 1024 = 7.765625
        let b = denormalize_box([0.5, 0.5, 0.75, 0.75], 7952, 5304, 1024).unwrap();
        assert_eq!(b, BBox { x0: 3976, y0: 2652, x1: 5964, y1: 3978 });
    }

    #[test]
    fn zero_width_box_is_degenerate() {
        assert!(matches!(
            denormalize_box([0.1, 0.1, 0.1, 0.2], 7952, 5304, 1024),
            Err(TileError::DegenerateBox(_))
        ));
    }

    #[test]
    fn small_image_rejected() {
        assert!(matches!(
            denormalize_box([0.0, 0.0, 1.0, 1.0], 800, 600, 1024),
            Err(TileError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn exact_box_gives_one_tile() {
        let b = BBox { x0: 100, y0: 50, x1: 900, y1: 850 };
        let plan = plan_tiles("a", b, 800, 4000, 3000).unwrap();
        assert_eq!(plan.tiles, vec![(100, 50)]);
    }

    #[test]
    fn wide_box_clamps_last_tile() {
        let b = BBox { x0: 100, y0: 0, x1: 1300, y1: 800 };
        let plan = plan_tiles("a", b, 800, 4000, 3000).unwrap();
        assert_eq!(plan.tiles, vec![(100, 0), (500, 0)]);
    }

    #[test]
    fn tile_larger_than_image() {
        let b = BBox { x0: 0, y0: 0, x1: 640, y1: 480 };
        assert!(matches!(
            plan_tiles("a", b, 800, 640, 2000),
            Err(TileError::TileExceedsImage { .. })
        ));
    }

    #[test]
    fn narrow_box_near_edge_stays_inside() {
        let b = BBox { x0: 950, y0: 10, x1: 1000, y1: 20 };
        let plan = plan_tiles("a", b, 100, 1000, 1000).unwrap();
        assert_eq!(plan.tiles, vec![(900, 10)]);
    }

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, (x ^ y) as u8]))
    }

    #[test]
    fn cut_tiles_matches_source() {
        let img = test_image(30, 20);
        let plan = plan_tiles("img", BBox { x0: 2, y0: 1, x1: 27, y1: 12 }, 10, 30, 20).unwrap();
        let tiles = cut_tiles(&img, &plan).unwrap();
        assert_eq!(tiles.len(), plan.tiles.len());
        assert_eq!(tiles[0].0, "img_2_1");
        for ((_, tile), &(ox, oy)) in tiles.iter().zip(&plan.tiles) {
            assert_eq!(tile.dimensions(), (10, 10));
            for (x, y, p) in tile.enumerate_pixels() {
                assert_eq!(p, img.get_pixel(ox + x, oy + y));
            }
        }
    }

    #[test]
    fn single_tile_plan_is_subimage() {
        let img = test_image(16, 16);
        let plan = plan_tiles("img", BBox { x0: 3, y0: 4, x1: 11, y1: 12 }, 8, 16, 16).unwrap();
        let tiles = cut_tiles(&img, &plan).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].1, image::imageops::crop_imm(&img, 3, 4, 8, 8).to_image());
    }

    proptest! {
        #[test]
        fn denormalize_normalize_within_one_pixel(
            w in 1024u32..9000, h in 1024u32..9000,
            x0 in 0u32..1000, y0 in 0u32..1000, dw in 1u32..20, dh in 1u32..20,
        ) {
            let b = BBox { x0: x0 * w / 1100, y0: y0 * h / 1100, x1: 0, y1: 0 };
            let b = BBox { x1: (b.x0 + dw * w / 100).min(w), y1: (b.y0 + dh * h / 100).min(h), ..b };
            prop_assume!(!b.is_empty());
            let back = denormalize_box(normalize_box(b, w, h), w, h, 1024).unwrap();
            prop_assert!(back.x0.abs_diff(b.x0) <= 1 && back.x1.abs_diff(b.x1) <= 1);
            prop_assert!(back.y0.abs_diff(b.y0) <= 1 && back.y1.abs_diff(b.y1) <= 1);
        }

        #[test]
        fn tiles_cover_box_and_stay_inside(
            w in 50u32..400, h in 50u32..400, ts in 10u32..50,
            a in 0u32..400, b in 0u32..400, c in 1u32..400, d in 1u32..400,
        ) {
            let bx = BBox { x0: a % w, y0: b % h, x1: 0, y1: 0 };
            let bx = BBox { x1: (bx.x0 + c).min(w), y1: (bx.y0 + d).min(h), ..bx };
            prop_assume!(!bx.is_empty());
            let plan = plan_tiles("p", bx, ts, w, h).unwrap();
            for &(x, y) in &plan.tiles {
                prop_assert!(x + ts <= w && y + ts <= h);
            }
            for y in bx.y0..bx.y1 {
                for x in bx.x0..bx.x1 {
                    prop_assert!(plan.tiles.iter().any(|&(tx, ty)| x >= tx && x < tx + ts && y >= ty && y < ty + ts));
                }
            }
        }
    }
}
