//! Testbed generation: clean box renders under sampled poses (synthetic
//! domain), corrupted renders (simulated real domain), and pose-matched
//! clean/corrupt pairs for the mapping loss.

mod corrupt;
mod io;
mod render;

pub use corrupt::apply_domain_transform;
pub use io::{read_triplet, write_triplet};
pub use render::{render_clean, NEAR_PLANE};

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    corner_targets, keypoint3d_targets, CameraIntrinsics, CornerSet, GeomError, Pose, Rotation,
};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("box intersects the near plane (corner depth {0:.4})")]
    NearPlane(f64),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeomError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated dataset file")]
    Truncated,
    #[error("dataset format mismatch: {0}")]
    FormatMismatch(String),
}

/// Which capture domain a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Synthetic => 0,
            Domain::Real => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Domain::Synthetic),
            1 => Some(Domain::Real),
            _ => None,
        }
    }
}

/// Pose-target parameterization produced by the dataset and regressed by
/// the head network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// 16 values: normalized 2D reprojections of the 8 box corners.
    Corners16,
    /// 24 values: depth-normalized camera-frame corner coordinates.
    Keypoint3d24,
}

impl HeadMode {
    pub fn target_dim(self) -> usize {
        match self {
            HeadMode::Corners16 => 16,
            HeadMode::Keypoint3d24 => 24,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            HeadMode::Corners16 => 0,
            HeadMode::Keypoint3d24 => 1,
        }
    }

    pub fn from_tag(t: u32) -> Option<Self> {
        match t {
            0 => Some(HeadMode::Corners16),
            1 => Some(HeadMode::Keypoint3d24),
            _ => None,
        }
    }
}

/// Grayscale image, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Which procedural-background family to draw from; the two families use
/// disjoint lattice scales and hash streams so the domains differ texturally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundFamily {
    Synthetic,
    Real,
}

/// One face of the box: the four corner indices (into the fixed corner
/// order), the outward object-frame normal, and a flat albedo.
#[derive(Debug, Clone, Copy)]
pub struct Face {
    pub corner_indices: [usize; 4],
    pub normal: Vector3<f64>,
    pub albedo: f64,
}

impl Face {
    /// The two triangles tiling this quad.
    pub fn triangles(&self) -> [[usize; 3]; 2] {
        let [a, b, c, d] = self.corner_indices;
        [[a, b, c], [a, c, d]]
    }
}

/// Fixed per-face albedos, all within [0.2, 0.9], pairwise distinct so each
/// face is identifiable; order +x, -x, +y, -y, +z, -z.
pub const FACE_ALBEDOS: [f64; 6] = [0.9, 0.2, 0.75, 0.35, 0.6, 0.45];

/// The rendered object: an axis-aligned box with shaded quad faces.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    corners: CornerSet,
    faces: [Face; 6],
}

impl ObjectModel {
    pub fn from_half_extents(h: Vector3<f64>) -> Result<Self, SceneError> {
        let corners = CornerSet::from_half_extents(h)?;
        // corner index = 4*(x>0) + 2*(y>0) + (z>0)
        let faces = [
            Face {
                corner_indices: [4, 5, 7, 6],
                normal: Vector3::x(),
                albedo: FACE_ALBEDOS[0],
            },
            Face {
                corner_indices: [0, 2, 3, 1],
                normal: -Vector3::x(),
                albedo: FACE_ALBEDOS[1],
            },
            Face {
                corner_indices: [2, 6, 7, 3],
                normal: Vector3::y(),
                albedo: FACE_ALBEDOS[2],
            },
            Face {
                corner_indices: [0, 1, 5, 4],
                normal: -Vector3::y(),
                albedo: FACE_ALBEDOS[3],
            },
            Face {
                corner_indices: [1, 3, 7, 5],
                normal: Vector3::z(),
                albedo: FACE_ALBEDOS[4],
            },
            Face {
                corner_indices: [0, 4, 6, 2],
                normal: -Vector3::z(),
                albedo: FACE_ALBEDOS[5],
            },
        ];
        Ok(Self { corners, faces })
    }

    pub fn corners(&self) -> &CornerSet {
        &self.corners
    }

    pub fn faces(&self) -> &[Face; 6] {
        &self.faces
    }

    pub fn diameter(&self) -> f64 {
        self.corners.diameter()
    }
}

/// Corruption-pipeline parameters defining the simulated real domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainParams {
    /// Gaussian blur sigma range in pixels, drawn uniformly per image.
    pub blur_sigma: (f64, f64),
    /// Gamma-remap exponent range, drawn uniformly per image.
    pub gamma: (f64, f64),
    /// Quadratic vignette strength at the image corners.
    pub vignette: f64,
    /// Additive Gaussian noise standard deviation (image scale [0,1]).
    pub noise_sigma: f64,
    /// Per-pixel probability of dropping the value to 0.
    pub dropout_prob: f64,
    /// Which background family renders feeding this domain use.
    pub background_family: BackgroundFamily,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            blur_sigma: (0.5, 1.5),
            gamma: (0.8, 1.25),
            vignette: 0.3,
            noise_sigma: 0.03,
            dropout_prob: 0.02,
            background_family: BackgroundFamily::Real,
        }
    }
}

impl DomainParams {
    /// The transform that leaves every image unchanged.
    pub fn identity() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            gamma: (1.0, 1.0),
            vignette: 0.0,
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            background_family: BackgroundFamily::Real,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.blur_sigma.1 < self.blur_sigma.0 || self.gamma.1 < self.gamma.0 {
            return Err(SceneError::InvalidConfig("empty corruption range".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(SceneError::InvalidConfig(format!(
                "dropout probability {} outside [0,1]",
                self.dropout_prob
            )));
        }
        if self.noise_sigma < 0.0 || self.vignette < 0.0 {
            return Err(SceneError::InvalidConfig("negative corruption strength".into()));
        }
        Ok(())
    }
}

/// One labelled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub pose: Pose,
    pub target: Vec<f64>,
    pub domain: Domain,
    pub background_seed: u64,
}

/// The three training sets: synthetic, simulated-real, and the clean
/// renders pose-matched (and background-matched) to each real sample.
#[derive(Debug, Clone)]
pub struct DatasetTriplet {
    pub synth: Vec<Sample>,
    pub real: Vec<Sample>,
    /// Index-aligned with `real`; identical pose and background seed,
    /// uncorrupted image, tagged synthetic.
    pub paired_synth: Vec<Sample>,
    pub camera: CameraIntrinsics,
    pub object: ObjectModel,
    pub head_mode: HeadMode,
}

/// Everything needed to generate a [`DatasetTriplet`].
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    pub half_extents: Vector3<f64>,
    pub n_synth: usize,
    pub n_real: usize,
    pub head_mode: HeadMode,
    pub depth_range: (f64, f64),
    pub domain: DomainParams,
    pub master_seed: u64,
}

impl SceneConfig {
    pub fn z_ref(&self) -> f64 {
        (self.depth_range.0 + self.depth_range.1) / 2.0
    }
}

/// Draw a pose: viewpoint uniform (by area) on the upper hemisphere,
/// in-plane roll uniform in ±45°, depth uniform in the configured range,
/// image-plane placement uniform over the central 50% of each image axis.
pub fn sample_pose(
    rng: &mut impl Rng,
    k: &CameraIntrinsics,
    depth_range: (f64, f64),
) -> Pose {
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let z_h: f64 = rng.gen_range(0.0..1.0);
    let elevation = z_h.asin();
    let in_plane = rng.gen_range(-45f64.to_radians()..45f64.to_radians());
    let z = rng.gen_range(depth_range.0..depth_range.1);
    let u = rng.gen_range(k.width as f64 / 4.0..3.0 * k.width as f64 / 4.0);
    let v = rng.gen_range(k.height as f64 / 4.0..3.0 * k.height as f64 / 4.0);

    // direction from the object to the camera, in object frame
    let d = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    let r3 = -d;
    let reference = Vector3::z();
    let cross = reference.cross(&r3);
    let r1 = if cross.norm() > 1e-6 {
        cross.normalize()
    } else {
        Vector3::x().cross(&r3).normalize()
    };
    let r2 = r3.cross(&r1);
    let align = nalgebra::Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let rotation = Rotation::from_axis_angle(&Vector3::z(), in_plane)
        * Rotation::from_matrix_unchecked(align);

    let x = (u - k.cx) * z / k.fx;
    let y = (v - k.cy) * z / k.fy;
    Pose::new(rotation, Vector3::new(x, y, z))
}

fn target_for(pose: &Pose, corners: &CornerSet, k: &CameraIntrinsics, mode: HeadMode, z_ref: f64)
    -> Result<Vec<f64>, GeomError>
{
    match mode {
        HeadMode::Corners16 => corner_targets(pose, corners, k),
        HeadMode::Keypoint3d24 => Ok(keypoint3d_targets(pose, corners, z_ref)),
    }
}

/// Generate the full triplet from a config. Every sample draws its pose,
/// background seed and corruption seed from named substreams of the master
/// seed, so any subset of sizes reproduces the shared prefix.
pub fn build_datasets(config: &SceneConfig) -> Result<DatasetTriplet, SceneError> {
    if config.n_synth == 0 {
        return Err(SceneError::InvalidConfig("n_synth must be > 0".into()));
    }
    if config.depth_range.1 <= config.depth_range.0 || config.depth_range.0 <= 0.0 {
        return Err(SceneError::InvalidConfig(format!(
            "bad depth range {:?}",
            config.depth_range
        )));
    }
    config.domain.validate()?;
    let object = ObjectModel::from_half_extents(config.half_extents)?;
    let k = config.camera;
    let z_ref = config.z_ref();
    let seed = config.master_seed;

    let mut synth = Vec::with_capacity(config.n_synth);
    for i in 0..config.n_synth {
        let mut rng = seeds::rng(seed, "pose.synth", i as u64);
        let pose = sample_pose(&mut rng, &k, config.depth_range);
        let bg = seeds::substream(seed, "bg.synth", i as u64);
        let image = render_clean(&pose, &object, &k, BackgroundFamily::Synthetic, bg)?;
        let target = target_for(&pose, object.corners(), &k, config.head_mode, z_ref)?;
        synth.push(Sample {
            image,
            pose,
            target,
            domain: Domain::Synthetic,
            background_seed: bg,
        });
    }

    let mut real = Vec::with_capacity(config.n_real);
    let mut paired_synth = Vec::with_capacity(config.n_real);
    for i in 0..config.n_real {
        let mut rng = seeds::rng(seed, "pose.real", i as u64);
        let pose = sample_pose(&mut rng, &k, config.depth_range);
        let bg = seeds::substream(seed, "bg.real", i as u64);
        let clean = render_clean(&pose, &object, &k, config.domain.background_family, bg)?;
        let target = target_for(&pose, object.corners(), &k, config.head_mode, z_ref)?;
        let corrupt_seed = seeds::substream(seed, "corrupt.real", i as u64);
        let corrupted = apply_domain_transform(&clean, &config.domain, corrupt_seed);
        real.push(Sample {
            image: corrupted,
            pose,
            target: target.clone(),
            domain: Domain::Real,
            background_seed: bg,
        });
        paired_synth.push(Sample {
            image: clean,
            pose,
            target,
            domain: Domain::Synthetic,
            background_seed: bg,
        });
    }

    Ok(DatasetTriplet {
        synth,
        real,
        paired_synth,
        camera: k,
        object,
        head_mode: config.head_mode,
    })
}
