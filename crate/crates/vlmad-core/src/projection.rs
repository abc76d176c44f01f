//! Front-view trajectory projection and overlay rendering.
//!
//! The ego frame is x-right, y-forward, z-up. The calibration's extrinsics
//! map ego coordinates into the camera body frame; `frame_convention` then
//! declares how the camera body frame relates to the optical frame
//! (x-right, y-down, z-forward) used by the pinhole model.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Default camera-frame depth below which a waypoint is treated as invisible.
pub const DEFAULT_DEPTH_EPSILON: f64 = 0.1;
/// Default displacement bound for the "no line" stationary decision.
pub const DEFAULT_STATIONARY_THRESHOLD: f64 = 1.0;
/// Default projection horizon (waypoint count).
pub const DEFAULT_HORIZON: usize = 6;
/// Default waypoint spacing in seconds (2 Hz annotation).
pub const DEFAULT_TIMESTEP: f64 = 0.5;

/// How the camera body frame (after extrinsics) maps to the optical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameConvention {
    /// Camera body frame shares the ego axes (x-right, y-forward, z-up);
    /// optical x = x, optical y = -z, optical z = y.
    EgoAligned,
    /// Camera body frame already is the optical frame.
    Optical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraCalibration {
    /// 3x3 row-major intrinsics in pixels.
    pub intrinsics: [[f64; 3]; 3],
    /// 4x4 row-major rigid transform, ego frame to camera body frame.
    pub extrinsics: [[f64; 4]; 4],
    pub image_width: u32,
    pub image_height: u32,
    pub frame_convention: FrameConvention,
}

impl CameraCalibration {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::Calibration("non-positive focal length".into()));
        }
        if k[2][0] != 0.0 || k[2][1] != 0.0 || (k[2][2] - 1.0).abs() > 1e-12 {
            return Err(Error::Calibration(
                "intrinsics bottom row must be [0, 0, 1]".into(),
            ));
        }
        if k[1][0] != 0.0 {
            return Err(Error::Calibration("intrinsics[1][0] must be zero".into()));
        }
        // rotation block orthonormal within 1e-6
        let r = &self.extrinsics;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Calibration(
                        "extrinsics rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        if r[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Calibration(
                "extrinsics bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Calibration("image dimensions must be positive".into()));
        }
        for row in &self.intrinsics {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Calibration("non-finite intrinsics entry".into()));
            }
        }
        for row in &self.extrinsics {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Calibration("non-finite extrinsics entry".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let calib: CameraCalibration = serde_json::from_str(&text)?;
        calib.validate()?;
        Ok(calib)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Future ego trajectory in the ground plane, ego frame at annotation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureTrajectory {
    /// (x-right, y-forward) waypoints in meters.
    pub waypoints: Vec<[f64; 2]>,
    /// Seconds per waypoint.
    pub timestep: f64,
}

impl FutureTrajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Self {
            waypoints,
            timestep: DEFAULT_TIMESTEP,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.waypoints.len() != horizon {
            return Err(Error::Input(format!(
                "trajectory has {} waypoints, expected {horizon}",
                self.waypoints.len()
            )));
        }
        if self
            .waypoints
            .iter()
            .any(|w| !w[0].is_finite() || !w[1].is_finite())
        {
            return Err(Error::Input("non-finite waypoint coordinate".into()));
        }
        Ok(())
    }
}

/// Projected trajectory in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPolyline {
    pub points: Vec<[f64; 2]>,
    pub visible_mask: Vec<bool>,
}

/// 8-bit RGB image buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontViewImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl FrontViewImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width, self.height, self.pixels.clone())
                .ok_or_else(|| Error::Input("invalid image buffer".into()))?;
        buf.save(path)
            .map_err(|e| Error::Input(format!("image write failed: {e}")))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Input(format!("image read failed: {e}")))?
            .to_rgb8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        })
    }
}

/// Overlay line style.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LineStyle {
    pub color: [u8; 3],
    pub width: u32,
}

impl Default for LineStyle {
    fn default() -> Self {
        Self {
            color: [255, 0, 0],
            width: 4,
        }
    }
}

fn to_optical(p: [f64; 3], convention: FrameConvention) -> [f64; 3] {
    match convention {
        FrameConvention::EgoAligned => [p[0], -p[2], p[1]],
        FrameConvention::Optical => p,
    }
}

/// Project a single ego-frame 3-D point to pixel coordinates.
/// Returns `(u, v, depth)` where depth is the optical-frame z.
pub fn project_point(p_ego: [f64; 3], calib: &CameraCalibration) -> (f64, f64, f64) {
    let e = &calib.extrinsics;
    let cam = [
        e[0][0] * p_ego[0] + e[0][1] * p_ego[1] + e[0][2] * p_ego[2] + e[0][3],
        e[1][0] * p_ego[0] + e[1][1] * p_ego[1] + e[1][2] * p_ego[2] + e[1][3],
        e[2][0] * p_ego[0] + e[2][1] * p_ego[1] + e[2][2] * p_ego[2] + e[2][3],
    ];
    let opt = to_optical(cam, calib.frame_convention);
    let k = &calib.intrinsics;
    let u = (k[0][0] * opt[0] + k[0][1] * opt[1]) / opt[2] + k[0][2];
    let v = k[1][1] * opt[1] / opt[2] + k[1][2];
    (u, v, opt[2])
}

/// Inverse of [`project_point`] given the optical depth: lifts a pixel back
/// to an optical-frame ray point at that depth, returned in optical coords.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, calib: &CameraCalibration) -> [f64; 3] {
    let k = &calib.intrinsics;
    let y = (v - k[1][2]) / k[1][1] * depth;
    let x = ((u - k[0][2]) - k[0][1] * y / depth) / k[0][0] * depth;
    [x, y, depth]
}

/// Re-project an optical-frame point through the intrinsics only.
pub fn project_optical(opt: [f64; 3], calib: &CameraCalibration) -> (f64, f64) {
    let k = &calib.intrinsics;
    let u = (k[0][0] * opt[0] + k[0][1] * opt[1]) / opt[2] + k[0][2];
    let v = k[1][1] * opt[1] / opt[2] + k[1][2];
    (u, v)
}

/// Projection tuning knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub ground_offset: f64,
    pub depth_epsilon: f64,
    pub stationary_threshold: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            ground_offset: 0.0,
            depth_epsilon: DEFAULT_DEPTH_EPSILON,
            stationary_threshold: DEFAULT_STATIONARY_THRESHOLD,
        }
    }
}

/// Project every waypoint into the image. Waypoints behind the camera
/// (optical depth <= `depth_epsilon`) or outside the image bounds are
/// marked invisible; ordering is preserved.
pub fn project_trajectory(
    traj: &FutureTrajectory,
    calib: &CameraCalibration,
    cfg: &ProjectionConfig,
) -> Result<PixelPolyline> {
    calib.validate()?;
    if traj
        .waypoints
        .iter()
        .any(|w| !w[0].is_finite() || !w[1].is_finite())
    {
        return Err(Error::Input("non-finite waypoint coordinate".into()));
    }
    let mut points = Vec::with_capacity(traj.waypoints.len());
    let mut visible = Vec::with_capacity(traj.waypoints.len());
    for w in &traj.waypoints {
        let (u, v, depth) = project_point([w[0], w[1], cfg.ground_offset], calib);
        let in_front = depth > cfg.depth_epsilon;
        let in_bounds = in_front
            && u >= 0.0
            && u < calib.image_width as f64
            && v >= 0.0
            && v < calib.image_height as f64;
        points.push([u, v]);
        visible.push(in_bounds);
    }
    Ok(PixelPolyline {
        points,
        visible_mask: visible,
    })
}

/// True iff no waypoint leaves `stationary_threshold` meters from the origin.
pub fn is_stationary(traj: &FutureTrajectory, threshold: f64) -> bool {
    traj.waypoints
        .iter()
        .all(|w| (w[0] * w[0] + w[1] * w[1]).sqrt() < threshold)
}

/// Draw the polyline over a copy of the image. When the trajectory is
/// stationary (or fewer than two points are visible), the copy is returned
/// unmodified: no line means stopping or slowing down.
pub fn render_overlay(
    img: &FrontViewImage,
    polyline: &PixelPolyline,
    traj: &FutureTrajectory,
    cfg: &ProjectionConfig,
    style: &LineStyle,
) -> FrontViewImage {
    let mut out = img.clone();
    if is_stationary(traj, cfg.stationary_threshold) {
        return out;
    }
    let visible: Vec<&[f64; 2]> = polyline
        .points
        .iter()
        .zip(&polyline.visible_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p)
        .collect();
    if visible.len() < 2 {
        return out;
    }
    for pair in visible.windows(2) {
        draw_segment(&mut out, *pair[0], *pair[1], style);
    }
    out
}

/// Bresenham segment with a square stamp of the configured width,
/// clipped to the image bounds.
fn draw_segment(img: &mut FrontViewImage, a: [f64; 2], b: [f64; 2], style: &LineStyle) {
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let half = (style.width as i64) / 2;
    loop {
        stamp(img, x0, y0, half, style.color);
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

fn stamp(img: &mut FrontViewImage, cx: i64, cy: i64, half: i64, color: [u8; 3]) {
    for y in (cy - half)..=(cy + half) {
        for x in (cx - half)..=(cx + half) {
            if x >= 0 && y >= 0 && (x as u32) < img.width && (y as u32) < img.height {
                img.set(x as u32, y as u32, color);
            }
        }
    }
}

pub fn identity_extrinsics() -> [[f64; 4]; 4] {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}
