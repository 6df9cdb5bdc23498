//! Depth processing: rescaling, bilateral smoothing, back-projection to a
//! point cloud, surface-normal estimation, and assembly of the 7-channel
//! RGB-D input stack `[R, G, B, depth, nx, ny, nz]`, all channels in
//! [0, 255].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth map in meters. A value of 0 or NaN marks a missing measurement;
/// all other values must be positive.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

pub fn is_missing_depth(v: f64) -> bool {
    v.is_nan() || v == 0.0
}

impl DepthImage {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<DepthImage> {
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "depth image {height}x{width} expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        for &v in &data {
            if !is_missing_depth(v) && !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "depth values must be positive or missing, got {v}"
                )));
            }
        }
        Ok(DepthImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> DepthImage {
        DepthImage {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        is_missing_depth(self.get(i, j))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )))
        }
    }
}

/// Linear per-image rescale of valid depths to [0, 255]; missing pixels map
/// to 0, and a constant-depth image (degenerate range) maps to all zeros.
pub fn rescale_depth(depth: &DepthImage) -> Result<Tensor> {
    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    for &v in depth.data() {
        if !is_missing_depth(v) {
            dmin = dmin.min(v);
            dmax = dmax.max(v);
        }
    }
    if dmin > dmax {
        return Err(Error::EmptyDepth);
    }
    let range = dmax - dmin;
    let out: Vec<f64> = depth
        .data()
        .iter()
        .map(|&v| {
            if is_missing_depth(v) || range == 0.0 {
                0.0
            } else {
                (v - dmin) / range * 255.0
            }
        })
        .collect();
    Tensor::from_vec(&[depth.height, depth.width], out)
}

/// Edge-preserving smoothing. Weights are renormalized over the valid
/// neighbors inside the window; missing pixels stay missing.
pub fn bilateral_filter(
    depth: &DepthImage,
    sigma_spatial: f64,
    sigma_range: f64,
    radius: usize,
) -> Result<DepthImage> {
    if !(sigma_spatial > 0.0) || !(sigma_range > 0.0) {
        return Err(Error::InvalidArgument(
            "bilateral sigmas must be positive".into(),
        ));
    }
    let (h, w) = (depth.height, depth.width);
    let inv2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let r = radius as isize;
    let mut out = DepthImage::filled(h, w, f64::NAN);
    for i in 0..h {
        for j in 0..w {
            if depth.is_missing(i, j) {
                continue;
            }
            let center = depth.get(i, j);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for di in -r..=r {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -r..=r {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let v = depth.get(ii as usize, jj as usize);
                    if is_missing_depth(v) {
                        continue;
                    }
                    let spatial = (di * di + dj * dj) as f64;
                    let range = (v - center) * (v - center);
                    let weight = (-spatial * inv2ss - range * inv2sr).exp();
                    acc += weight * v;
                    wsum += weight;
                }
            }
            out.set(i, j, acc / wsum);
        }
    }
    Ok(out)
}

/// H x W grid of back-projected camera-frame points.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub height: usize,
    pub width: usize,
    points: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl PointCloud {
    pub fn point(&self, i: usize, j: usize) -> Option<[f64; 3]> {
        if self.valid[i * self.width + j] {
            Some(self.points[i * self.width + j])
        } else {
            None
        }
    }
}

/// Back-project through the pinhole model: `X = (u-cx) z / fx`,
/// `Y = (v-cy) z / fy`, `Z = z`, with `u` the column and `v` the row.
pub fn depth_to_pointcloud(depth: &DepthImage, intrinsics: &Intrinsics) -> Result<PointCloud> {
    intrinsics.validate()?;
    let (h, w) = (depth.height, depth.width);
    let mut points = vec![[0.0; 3]; h * w];
    let mut valid = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let z = depth.get(i, j);
            if is_missing_depth(z) {
                continue;
            }
            let idx = i * w + j;
            points[idx] = [
                (j as f64 - intrinsics.cx) * z / intrinsics.fx,
                (i as f64 - intrinsics.cy) * z / intrinsics.fy,
                z,
            ];
            valid[idx] = true;
        }
    }
    Ok(PointCloud {
        height: h,
        width: w,
        points,
        valid,
    })
}

/// Perspective projection of a camera-frame point back to pixel
/// coordinates `(u, v)` = (column, row).
pub fn project_point(intrinsics: &Intrinsics, p: [f64; 3]) -> (f64, f64) {
    (
        p[0] * intrinsics.fx / p[2] + intrinsics.cx,
        p[1] * intrinsics.fy / p[2] + intrinsics.cy,
    )
}

/// Unit surface normals; pixels without a fit are marked invalid and read
/// as (0, 0, 0).
#[derive(Debug, Clone)]
pub struct NormalImage {
    pub height: usize,
    pub width: usize,
    normals: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl NormalImage {
    pub fn normal(&self, i: usize, j: usize) -> [f64; 3] {
        self.normals[i * self.width + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }
}

/// Per-pixel least-squares plane fit over the valid points in an odd
/// `window`: covariance eigen-decomposition, smallest-eigenvalue
/// eigenvector, oriented to face the viewpoint (nz <= 0). Fewer than 3
/// valid neighbors leave the normal missing.
pub fn estimate_normals(cloud: &PointCloud, window: usize) -> Result<NormalImage> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "normal window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = (cloud.height, cloud.width);
    let r = (window / 2) as isize;
    let mut normals = vec![[0.0; 3]; h * w];
    let mut valid = vec![false; h * w];
    let mut neighborhood: Vec<[f64; 3]> = Vec::with_capacity(window * window);
    for i in 0..h {
        for j in 0..w {
            if cloud.point(i, j).is_none() {
                continue;
            }
            neighborhood.clear();
            for di in -r..=r {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -r..=r {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    if let Some(p) = cloud.point(ii as usize, jj as usize) {
                        neighborhood.push(p);
                    }
                }
            }
            if neighborhood.len() < 3 {
                continue;
            }
            if let Some(n) = fit_plane_normal(&neighborhood) {
                let idx = i * w + j;
                // Orient toward the viewpoint.
                normals[idx] = if n[2] > 0.0 { [-n[0], -n[1], -n[2]] } else { n };
                valid[idx] = true;
            }
        }
    }
    Ok(NormalImage {
        height: h,
        width: w,
        normals,
        valid,
    })
}

fn fit_plane_normal(points: &[[f64; 3]]) -> Option<[f64; 3]> {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    let v = smallest_eigenvector_sym3(cov);
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some([v[0] / norm, v[1] / norm, v[2] / norm])
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix via
/// cyclic Jacobi rotations.
fn smallest_eigenvector_sym3(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= 1e-30 * (diag + 1e-300) {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // Rotate rows/columns p and q of the matrix.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    let mut best = 0;
    for k in 1..3 {
        if a[k][k] < a[best][best] {
            best = k;
        }
    }
    [v[0][best], v[1][best], v[2][best]]
}

/// Knobs of the depth branch of the input pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthParams {
    pub bilateral_radius: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub normal_window: usize,
}

impl Default for DepthParams {
    fn default() -> DepthParams {
        DepthParams {
            bilateral_radius: 2,
            sigma_spatial: 2.0,
            sigma_range: 0.1,
            normal_window: 5,
        }
    }
}

/// Build the 7-channel input stack. The depth channel rescales the raw
/// depth; normals come from the bilaterally smoothed depth and are mapped
/// per axis from [-1, 1] to [0, 255] via `(n + 1) * 127.5`, so a missing
/// normal (0, 0, 0) encodes as mid-gray.
pub fn assemble_input(
    rgb: &Tensor,
    depth: &DepthImage,
    intrinsics: &Intrinsics,
    params: &DepthParams,
) -> Result<Tensor> {
    let (h, w) = match rgb.shape() {
        [h, w, 3] => (*h, *w),
        other => {
            return Err(Error::InvalidShape(format!(
                "rgb stack must be H x W x 3, got {other:?}"
            )))
        }
    };
    if depth.height != h || depth.width != w {
        return Err(Error::InvalidShape(format!(
            "depth {}x{} does not match rgb {h}x{w}",
            depth.height, depth.width
        )));
    }
    let depth_channel = rescale_depth(depth)?;
    let smoothed = bilateral_filter(
        depth,
        params.sigma_spatial,
        params.sigma_range,
        params.bilateral_radius,
    )?;
    let cloud = depth_to_pointcloud(&smoothed, intrinsics)?;
    let normals = estimate_normals(&cloud, params.normal_window)?;

    let mut out = vec![0.0; h * w * 7];
    let rgb_data = rgb.data();
    for i in 0..h {
        for j in 0..w {
            let src = (i * w + j) * 3;
            let dst = (i * w + j) * 7;
            out[dst..dst + 3].copy_from_slice(&rgb_data[src..src + 3]);
            out[dst + 3] = depth_channel.data()[i * w + j];
            let n = normals.normal(i, j);
            out[dst + 4] = (n[0] + 1.0) * 127.5;
            out[dst + 5] = (n[1] + 1.0) * 127.5;
            out[dst + 6] = (n[2] + 1.0) * 127.5;
        }
    }
    Tensor::from_vec(&[h, w, 7], out)
}
