//! Camera model, frustum lifting, BEV grid and RoI normalisation.
//!
//! Frames: the LiDAR frame is x forward, y left, z up. Camera frames are
//! x right, y down, z along the optical axis. Pixel coordinates are measured
//! from the top-left image corner, feature cells sampled at their centres.

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{CmtError, Result};

/// Depth below which a point counts as behind the image plane.
pub const MIN_VIEW_DEPTH: f64 = 1e-3;

fn geom(msg: impl Into<String>) -> CmtError {
    CmtError::Geometry(msg.into())
}

/// Axis-aligned detection volume in the LiDAR frame, metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Roi {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Result<Self> {
        let roi = Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
        ]
        .iter()
        .all(|&(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
        if ok {
            Ok(())
        } else {
            Err(geom(format!("RoI needs min < max on every axis: {self:?}")))
        }
    }

    pub fn min(&self) -> [f64; 3] {
        [self.x_min, self.y_min, self.z_min]
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.x_max - self.x_min,
            self.y_max - self.y_min,
            self.z_max - self.z_min,
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x_min
            && p[0] < self.x_max
            && p[1] >= self.y_min
            && p[1] < self.y_max
            && p[2] >= self.z_min
            && p[2] < self.z_max
    }

    /// Maps a world point into `[0, 1]^3`, clamping outside points.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, ext) = (self.min(), self.extent());
        std::array::from_fn(|i| ((p[i] - lo[i]) / ext[i]).clamp(0.0, 1.0))
    }
}

/// Pinhole camera with intrinsics `K` (4x4 homogeneous) and the rigid
/// camera-to-LiDAR transform `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix4<f64>,
    extrinsics: Matrix4<f64>,
    intrinsics_inv: Matrix4<f64>,
    extrinsics_inv: Matrix4<f64>,
    width: usize,
    height: usize,
    stride: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix4<f64>,
        extrinsics: Matrix4<f64>,
        width: usize,
        height: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 || width == 0 || height == 0 || width % stride != 0 || height % stride != 0 {
            return Err(geom(format!(
                "feature stride {stride} must divide image size {width}x{height}"
            )));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| geom("intrinsic matrix is singular"))?;
        let r: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(geom("extrinsic rotation is not a proper rotation"));
        }
        let bottom = extrinsics.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(geom("extrinsic bottom row must be [0, 0, 0, 1]"));
        }
        let extrinsics_inv = extrinsics
            .try_inverse()
            .ok_or_else(|| geom("extrinsic matrix is singular"))?;
        Ok(Self {
            intrinsics,
            extrinsics,
            intrinsics_inv,
            extrinsics_inv,
            width,
            height,
            stride,
        })
    }

    /// `K` from focal lengths and principal point.
    pub fn pinhole_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix4<f64> {
        Matrix4::new(
            fx, 0.0, cx, 0.0, //
            0.0, fy, cy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn intrinsics(&self) -> &Matrix4<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Feature grid as (columns, rows).
    pub fn feature_grid(&self) -> (usize, usize) {
        (self.width / self.stride, self.height / self.stride)
    }

    /// Pixel coordinates of the centre of feature cell (`u` column, `v` row).
    pub fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((u as f64 + 0.5) * s, (v as f64 + 0.5) * s)
    }

    /// Lifts a homogeneous frustum point `(u d, v d, d, 1)` into the LiDAR frame.
    pub fn frustum_to_lidar(&self, p: [f64; 4]) -> Result<[f64; 3]> {
        if !(p[2] > 0.0) {
            return Err(CmtError::Domain(format!(
                "frustum depth must be positive, got {}",
                p[2]
            )));
        }
        let q = self.extrinsics * (self.intrinsics_inv * Vector4::from(p));
        Ok([q[0] / q[3], q[1] / q[3], q[2] / q[3]])
    }

    /// Projects a LiDAR-frame point into pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Projection {
        let cam = self.extrinsics_inv * Vector4::new(p[0], p[1], p[2], 1.0);
        let depth = cam[2];
        if !(depth > MIN_VIEW_DEPTH) {
            return Projection::OutOfView;
        }
        let img = self.intrinsics * cam;
        let (u, v) = (img[0] / depth, img[1] / depth);
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return Projection::OutOfView;
        }
        Projection::Visible { u, v, depth }
    }

    /// Pixel coordinates and depth without the image-bounds test; `None`
    /// behind the camera.
    pub fn project_unbounded(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let cam = self.extrinsics_inv * Vector4::new(p[0], p[1], p[2], 1.0);
        let depth = cam[2];
        if !(depth > MIN_VIEW_DEPTH) {
            return None;
        }
        let img = self.intrinsics * cam;
        Some((img[0] / depth, img[1] / depth, depth))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    OutOfView,
}

impl Projection {
    pub fn is_visible(&self) -> bool {
        matches!(self, Projection::Visible { .. })
    }
}

/// Homogeneous frustum points `(u_px d, v_px d, d, 1)` of feature cell
/// (`u`, `v`) at the given depths.
pub fn frustum_points(cam: &CameraModel, u: usize, v: usize, depths: &[f64]) -> Result<Vec<[f64; 4]>> {
    check_depths(depths)?;
    let (up, vp) = cam.cell_center(u, v);
    Ok(ray_points(up, vp, depths))
}

pub(crate) fn ray_points(u_px: f64, v_px: f64, depths: &[f64]) -> Vec<[f64; 4]> {
    depths.iter().map(|&d| [u_px * d, v_px * d, d, 1.0]).collect()
}

fn check_depths(depths: &[f64]) -> Result<()> {
    if depths.iter().any(|&d| !(d > 0.0)) {
        return Err(CmtError::Domain("frustum depths must be positive".into()));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CmtError::Domain("frustum depths must be strictly increasing".into()));
    }
    Ok(())
}

/// `n` depths spaced linearly over `[d_min, d_max]`, endpoints exact.
pub fn linear_depths(d_min: f64, d_max: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 || !(d_min > 0.0) || (n > 1 && !(d_max > d_min)) {
        return Err(CmtError::Domain(format!(
            "invalid depth range [{d_min}, {d_max}] x {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![d_min]);
    }
    let mut out: Vec<f64> = (0..n)
        .map(|k| d_min + (d_max - d_min) * k as f64 / (n - 1) as f64)
        .collect();
    out[n - 1] = d_max;
    Ok(out)
}

/// Bird's-eye-view lattice anchored at the RoI corner.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGridSpec {
    pub n_u: usize,
    pub n_v: usize,
    pub cell_u: f64,
    pub cell_v: f64,
    /// Sample heights `h_k` in metres.
    pub heights: Vec<f64>,
}

impl BevGridSpec {
    /// Grid tiling `roi` with `n_u x n_v` cells and a single height of 0.
    pub fn for_roi(roi: &Roi, n_u: usize, n_v: usize) -> Result<Self> {
        if n_u == 0 || n_v == 0 {
            return Err(geom("BEV grid needs at least one cell per axis"));
        }
        let ext = roi.extent();
        Ok(Self {
            n_u,
            n_v,
            cell_u: ext[0] / n_u as f64,
            cell_v: ext[1] / n_v as f64,
            heights: vec![0.0],
        })
    }

    pub fn validate(&self, roi: &Roi) -> Result<()> {
        let ext = roi.extent();
        let tol = 1e-9 * ext[0].max(ext[1]);
        if (self.n_u as f64 * self.cell_u - ext[0]).abs() > tol || (self.n_v as f64 * self.cell_v - ext[1]).abs() > tol
        {
            return Err(geom("BEV grid does not tile the RoI footprint"));
        }
        if self.heights.is_empty() {
            return Err(geom("BEV grid needs at least one sample height"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n_u * self.n_v
    }

    /// Row-major token index of cell (`u`, `v`).
    pub fn index(&self, u: usize, v: usize) -> usize {
        u * self.n_v + v
    }

    /// Cell containing world point `p`, if inside the footprint.
    pub fn cell_of(&self, roi: &Roi, p: [f64; 3]) -> Option<(usize, usize)> {
        let fu = (p[0] - roi.x_min) / self.cell_u;
        let fv = (p[1] - roi.y_min) / self.cell_v;
        if !(fu >= 0.0 && fv >= 0.0) {
            return None;
        }
        let (u, v) = (fu as usize, fv as usize);
        (u < self.n_u && v < self.n_v).then_some((u, v))
    }
}

/// Centre of BEV cell (`u`, `v`) at sample height `k`.
pub fn bev_cell_to_world(spec: &BevGridSpec, roi: &Roi, u: usize, v: usize, k: usize) -> Result<[f64; 3]> {
    if u >= spec.n_u || v >= spec.n_v || k >= spec.heights.len() {
        return Err(CmtError::Domain(format!(
            "BEV index ({u}, {v}, {k}) outside {}x{}x{}",
            spec.n_u,
            spec.n_v,
            spec.heights.len()
        )));
    }
    Ok([
        roi.x_min + (u as f64 + 0.5) * spec.cell_u,
        roi.y_min + (v as f64 + 0.5) * spec.cell_v,
        spec.heights[k],
    ])
}

/// Affine map of a normalised anchor in `[0, 1]^3` into the RoI.
pub fn denormalize_anchor(a: [f64; 3], roi: &Roi) -> Result<[f64; 3]> {
    if a.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(CmtError::Domain(format!("anchor {a:?} outside [0, 1]^3")));
    }
    let (lo, ext) = (roi.min(), roi.extent());
    Ok(std::array::from_fn(|i| a[i] * ext[i] + lo[i]))
}

pub fn denormalize_anchors(anchors: &[[f64; 3]], roi: &Roi) -> Result<Vec<[f64; 3]>> {
    anchors.iter().map(|&a| denormalize_anchor(a, roi)).collect()
}

/// Normalised BEV-plane coordinates of a world point, clamped to `[0, 1]^2`.
pub fn world_to_bev_norm(p: [f64; 3], roi: &Roi) -> [f64; 2] {
    let n = roi.normalize(p);
    [n[0], n[1]]
}

/// Camera set mounted on the ego vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    /// `count` cameras evenly spaced in yaw around the LiDAR origin, looking
    /// horizontally outwards.
    pub fn surround(
        count: usize,
        width: usize,
        height: usize,
        stride: usize,
        horizontal_fov_deg: f64,
        mount_height: f64,
        radius: f64,
    ) -> Result<Self> {
        let fx = (width as f64 / 2.0) / (horizontal_fov_deg.to_radians() / 2.0).tan();
        let k = CameraModel::pinhole_intrinsics(fx, fx, width as f64 / 2.0, height as f64 / 2.0);
        let cameras = (0..count)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / count as f64;
                CameraModel::new(k, camera_to_lidar(yaw, mount_height, radius), width, height, stride)
            })
            .collect::<Result<_>>()?;
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Camera-to-LiDAR transform for a camera looking along LiDAR yaw `yaw`.
pub fn camera_to_lidar(yaw: f64, mount_height: f64, radius: f64) -> Matrix4<f64> {
    let (s, c) = yaw.sin_cos();
    // Columns: camera x (right), y (down), z (forward) in LiDAR coordinates.
    Matrix4::new(
        s,
        0.0,
        c,
        radius * c, //
        -c,
        0.0,
        s,
        radius * s, //
        0.0,
        -1.0,
        0.0,
        mount_height, //
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide_roi() -> Roi {
        Roi::new((-54.0, 54.0), (-54.0, 54.0), (-5.0, 3.0)).unwrap()
    }

    fn identity_cam() -> CameraModel {
        CameraModel::new(Matrix4::identity(), Matrix4::identity(), 8, 8, 1).unwrap()
    }

    #[test]
    fn frustum_points_use_cell_centres() {
        let cam = identity_cam();
        assert_eq!(frustum_points(&cam, 0, 0, &[2.0]).unwrap(), vec![[1.0, 1.0, 2.0, 1.0]]);
        let pts = frustum_points(&cam, 3, 1, &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts.iter().map(|p| p[2]).collect::<Vec<_>>(), vec![1.0, 2.0, 5.0]);
        assert!(frustum_points(&cam, 0, 0, &[0.0]).is_err());
        assert!(frustum_points(&cam, 0, 0, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn linear_depth_endpoints_exact() {
        let d = linear_depths(1.0, 60.0, 16).unwrap();
        assert_eq!(d.len(), 16);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[15], 60.0);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn identity_lift_and_projection() {
        let cam = identity_cam();
        assert_eq!(cam.frustum_to_lidar([3.0, 4.0, 5.0, 1.0]).unwrap(), [3.0, 4.0, 5.0]);
        assert_eq!(
            cam.project([0.0, 0.0, 5.0]),
            Projection::Visible {
                u: 0.0,
                v: 0.0,
                depth: 5.0
            }
        );
        assert_eq!(cam.project([0.0, 0.0, -1.0]), Projection::OutOfView);
    }

    #[test]
    fn hand_inverse_example() {
        let k = CameraModel::pinhole_intrinsics(100.0, 100.0, 50.0, 50.0);
        let mut t = Matrix4::identity();
        t[(0, 3)] = 1.0;
        let cam = CameraModel::new(k, t, 100, 100, 1).unwrap();
        let p = cam.frustum_to_lidar([100.0, 100.0, 2.0, 1.0]).unwrap();
        for (a, b) in p.iter().zip([1.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        match cam.project(p) {
            Projection::Visible { u, v, depth } => {
                assert!((u - 50.0).abs() < 1e-9 && (v - 50.0).abs() < 1e-9 && (depth - 2.0).abs() < 1e-9);
            }
            Projection::OutOfView => panic!("should be visible"),
        }
    }

    #[test]
    fn rejects_bad_cameras() {
        let k = CameraModel::pinhole_intrinsics(100.0, 100.0, 50.0, 50.0);
        let mut reflect = Matrix4::identity();
        reflect[(0, 0)] = -1.0;
        assert!(CameraModel::new(k, reflect, 100, 100, 1).is_err());
        assert!(CameraModel::new(Matrix4::zeros(), Matrix4::identity(), 100, 100, 1).is_err());
        assert!(CameraModel::new(k, Matrix4::identity(), 100, 100, 3).is_err());
    }

    #[test]
    fn bev_cells_match_hand_arithmetic() {
        let roi = wide_roi();
        let spec = BevGridSpec::for_roi(&roi, 180, 180).unwrap();
        spec.validate(&roi).unwrap();
        assert!((spec.cell_u - 0.6).abs() < 1e-12);
        let p = bev_cell_to_world(&spec, &roi, 0, 0, 0).unwrap();
        assert!((p[0] + 53.7).abs() < 1e-9 && (p[1] + 53.7).abs() < 1e-9 && p[2] == 0.0);
        let p = bev_cell_to_world(&spec, &roi, 90, 90, 0).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-9 && (p[1] - 0.3).abs() < 1e-9);
        assert_eq!(spec.heights.len(), 1);
        assert!(bev_cell_to_world(&spec, &roi, 180, 0, 0).is_err());
        assert!(bev_cell_to_world(&spec, &roi, 0, 0, 1).is_err());
    }

    #[test]
    fn anchor_denormalisation() {
        let roi = wide_roi();
        assert_eq!(denormalize_anchor([0.5, 0.5, 0.5], &roi).unwrap(), [0.0, 0.0, -1.0]);
        assert_eq!(denormalize_anchor([0.0, 0.0, 0.0], &roi).unwrap(), [-54.0, -54.0, -5.0]);
        assert_eq!(denormalize_anchor([1.0, 1.0, 1.0], &roi).unwrap(), [54.0, 54.0, 3.0]);
        assert!(denormalize_anchor([1.1, 0.0, 0.0], &roi).is_err());
        assert_eq!(world_to_bev_norm([0.0, 0.0, 7.0], &roi), [0.5, 0.5]);
        assert_eq!(world_to_bev_norm([-54.0, -54.0, 0.0], &roi), [0.0, 0.0]);
        assert_eq!(world_to_bev_norm([-90.0, 80.0, 0.0], &roi), [0.0, 1.0]);
    }

    #[test]
    fn surround_rig_sees_forward_points() {
        let rig = CameraRig::surround(6, 64, 64, 8, 70.0, -0.2, 0.5).unwrap();
        assert_eq!(rig.len(), 6);
        // Camera 0 looks along +x, camera 3 along -x.
        assert!(rig.cameras[0].project([20.0, 0.0, -1.0]).is_visible());
        assert!(!rig.cameras[3].project([20.0, 0.0, -1.0]).is_visible());
        assert!(rig.cameras[3].project([-20.0, 0.0, -1.0]).is_visible());
    }
}
