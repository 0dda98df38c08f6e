use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kinematics::primitive::Primitive;
use crate::rng::{self, StreamRng};

/// Tolerance when checking actions against joint limits.
const LIMIT_TOL: f64 = 1e-12;
/// Points used to estimate the rest-pose bounding sphere.
const NORMALIZATION_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Pliers,
    Scissors,
    Eyeglasses,
    Arm3,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Pliers,
        Category::Scissors,
        Category::Eyeglasses,
        Category::Arm3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Pliers => "pliers",
            Category::Scissors => "scissors",
            Category::Eyeglasses => "eyeglasses",
            Category::Arm3 => "arm3",
        }
    }

    /// DoF of a standard instance.
    pub fn default_dof(self) -> usize {
        match self {
            Category::Pliers | Category::Scissors => 1,
            Category::Eyeglasses => 2,
            Category::Arm3 => 3,
        }
    }

    pub fn joint_limit(self) -> [f64; 2] {
        match self {
            Category::Arm3 => [-FRAC_PI_2, FRAC_PI_2],
            _ => [0.0, FRAC_PI_2],
        }
    }

    fn param_ranges(self) -> Vec<ParamRange> {
        let r = |name: &str, lo: f64, hi: f64| ParamRange {
            name: name.to_string(),
            lo,
            hi,
        };
        match self {
            Category::Pliers => vec![
                r("jaw_length", 0.25, 0.45),
                r("handle_length", 0.7, 1.1),
                r("width", 0.06, 0.10),
                r("thickness", 0.03, 0.05),
                r("handle_radius", 0.035, 0.055),
                r("handle_spread", 0.08, 0.16),
            ],
            Category::Scissors => vec![
                r("blade_length", 0.7, 1.0),
                r("blade_width", 0.05, 0.08),
                r("thickness", 0.02, 0.03),
                r("ring_radius", 0.12, 0.18),
                r("shank_length", 0.15, 0.25),
            ],
            Category::Eyeglasses => vec![
                r("lens_radius", 0.2, 0.28),
                r("bridge", 0.08, 0.14),
                r("temple_length", 0.8, 1.1),
                r("rim", 0.02, 0.035),
                r("temple_width", 0.025, 0.04),
            ],
            Category::Arm3 => vec![
                r("base_radius", 0.15, 0.22),
                r("base_height", 0.08, 0.14),
                r("link1", 0.25, 0.4),
                r("link2", 0.35, 0.55),
                r("link3", 0.25, 0.45),
                r("link_radius", 0.04, 0.06),
            ],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// A category of articulated objects and how many instances to draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category: Category,
    /// Number of instances `K`.
    pub instances: usize,
    /// DoF options; each instance draws one uniformly. Only `arm3` supports
    /// more than its default.
    pub dof_choices: Vec<usize>,
    pub param_ranges: Vec<ParamRange>,
}

impl CategorySpec {
    pub fn new(category: Category, instances: usize) -> Self {
        Self {
            category,
            instances,
            dof_choices: vec![category.default_dof()],
            param_ranges: category.param_ranges(),
        }
    }

    pub fn with_dof_choices(mut self, choices: Vec<usize>) -> Self {
        self.dof_choices = choices;
        self
    }

    /// Category-wide maximum DoF, the padded action length.
    pub fn j_max(&self) -> usize {
        self.dof_choices.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("a category needs at least one instance".into()));
        }
        if self.dof_choices.is_empty() {
            return Err(Error::Config("dof_choices must not be empty".into()));
        }
        let allowed = |d: usize| match self.category {
            Category::Arm3 => (1..=3).contains(&d),
            c => d == c.default_dof(),
        };
        if let Some(bad) = self.dof_choices.iter().find(|&&d| !allowed(d)) {
            return Err(Error::Config(format!(
                "{} does not support {bad} DoF",
                self.category
            )));
        }
        let expected = self.category.param_ranges();
        if self.param_ranges.len() != expected.len()
            || self
                .param_ranges
                .iter()
                .zip(&expected)
                .any(|(a, b)| a.name != b.name || !(a.lo <= a.hi) || a.lo <= 0.0)
        {
            return Err(Error::Config(format!(
                "parameter ranges for {} must be positive and named {:?}",
                self.category,
                expected.iter().map(|p| p.name.as_str()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

/// Primitive placed in the rest frame of its part.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub primitive: Primitive,
    pub pose: Isometry3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub name: String,
    pub shapes: Vec<Shape>,
    pub color: [f64; 3],
}

impl Part {
    pub fn area(&self) -> f64 {
        self.shapes.iter().map(|s| s.primitive.area()).sum()
    }
}

/// Revolute joint; `axis` and `origin` are expressed in the rest frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub parent: usize,
    pub child: usize,
    pub axis: Unit<Vector3<f64>>,
    pub origin: Point3<f64>,
    pub limit: [f64; 2],
}

impl Joint {
    /// Rigid motion rotating by `angle` about the joint axis through its origin.
    pub fn motion(&self, angle: f64) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_axis_angle(&self.axis, angle);
        let o = self.origin.coords;
        Isometry3::from_parts(Translation3::from(o - rot * o), rot)
    }
}

/// What forward kinematics does with an angle outside its joint limits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitPolicy {
    #[default]
    Reject,
    Clamp,
    /// Pose the mechanism at the requested angle regardless of limits.
    Free,
}

/// Similarity applied to every posed cloud: `(p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: &mut [f64]) {
        for k in 0..3 {
            p[k] = (p[k] - self.center[k]) * self.scale;
        }
    }
}

/// One synthetic articulated instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedTemplate {
    pub category: Category,
    pub parts: Vec<Part>,
    /// Joint `j` is driven by action entry `j`; children follow parents.
    pub joints: Vec<Joint>,
    pub shape_params: Vec<f64>,
    pub normalization: Normalization,
}

fn along_x() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2)
}

fn along_y() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -FRAC_PI_2)
}

fn at(x: f64, y: f64, z: f64) -> Isometry3<f64> {
    Isometry3::translation(x, y, z)
}

fn posed(x: f64, y: f64, z: f64, rot: UnitQuaternion<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::new(x, y, z), rot)
}

fn shape(primitive: Primitive, pose: Isometry3<f64>) -> Shape {
    Shape { primitive, pose }
}

fn part(name: &str, color: [f64; 3], shapes: Vec<Shape>) -> Part {
    Part {
        name: name.to_string(),
        shapes,
        color,
    }
}

fn revolute(parent: usize, child: usize, axis: Vector3<f64>, origin: Point3<f64>, limit: [f64; 2]) -> Joint {
    Joint {
        parent,
        child,
        axis: Unit::new_normalize(axis),
        origin,
        limit,
    }
}

fn pliers(p: &[f64], limit: [f64; 2]) -> (Vec<Part>, Vec<Joint>) {
    let (jaw, handle, width, thick, radius, spread) = (p[0], p[1], p[2], p[3], p[4], p[5]);
    let arm = |k: usize| {
        let z = if k == 0 { -thick / 2.0 } else { thick / 2.0 };
        let sign = if k == 0 { 1.0 } else { -1.0 };
        // The handle leaves the hinge at a small angle so the closed tool forms a V.
        let dir = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI + sign * spread);
        let mid = dir * Vector3::new(handle / 2.0, 0.0, 0.0);
        let handle_rot = dir * along_x();
        vec![
            shape(
                Primitive::Box { half: [jaw / 2.0, width / 2.0, thick / 2.0] },
                at(jaw / 2.0, 0.0, z),
            ),
            shape(
                Primitive::Capsule {
                    radius,
                    half_length: (handle / 2.0 - radius).max(0.01),
                },
                posed(mid.x, mid.y, z, handle_rot),
            ),
        ]
    };
    let parts = vec![
        part("lower_arm", [0.85, 0.25, 0.2], arm(0)),
        part("upper_arm", [0.2, 0.35, 0.85], arm(1)),
    ];
    let joints = vec![revolute(0, 1, Vector3::z(), Point3::origin(), limit)];
    (parts, joints)
}

fn scissors(p: &[f64], limit: [f64; 2]) -> (Vec<Part>, Vec<Joint>) {
    let (blade, bw, thick, ring, shank) = (p[0], p[1], p[2], p[3], p[4]);
    let half = |k: usize| {
        let z = if k == 0 { -thick / 2.0 } else { thick / 2.0 };
        let side = if k == 0 { -1.0 } else { 1.0 };
        vec![
            shape(
                Primitive::Box { half: [blade / 2.0, bw / 2.0, thick / 2.0] },
                at(blade / 2.0, 0.0, z),
            ),
            shape(
                Primitive::Box { half: [shank / 2.0, 0.4 * bw, thick / 2.0] },
                at(-shank / 2.0, 0.0, z),
            ),
            shape(
                Primitive::Cylinder {
                    radius: ring,
                    half_length: thick / 2.0,
                },
                at(-shank - ring, side * 0.3 * ring, z),
            ),
        ]
    };
    let parts = vec![
        part("lower_blade", [0.75, 0.75, 0.8], half(0)),
        part("upper_blade", [0.9, 0.55, 0.15], half(1)),
    ];
    let joints = vec![revolute(0, 1, Vector3::z(), Point3::origin(), limit)];
    (parts, joints)
}

fn eyeglasses(p: &[f64], limit: [f64; 2]) -> (Vec<Part>, Vec<Joint>) {
    let (lens, bridge, temple, rim, tw) = (p[0], p[1], p[2], p[3], p[4]);
    let lens_x = bridge / 2.0 + lens;
    let corner = bridge / 2.0 + 2.0 * lens;
    let disk = Primitive::Cylinder {
        radius: lens,
        half_length: rim / 2.0,
    };
    let frame = vec![
        shape(disk, posed(lens_x, 0.0, 0.0, along_y())),
        shape(disk, posed(-lens_x, 0.0, 0.0, along_y())),
        shape(
            Primitive::Box { half: [bridge / 2.0, rim / 2.0, tw / 2.0] },
            at(0.0, 0.0, 0.4 * lens),
        ),
    ];
    let temple_shape = |x: f64| {
        vec![shape(
            Primitive::Box { half: [tw / 2.0, temple / 2.0, tw / 2.0] },
            at(x, temple / 2.0, 0.0),
        )]
    };
    let parts = vec![
        part("frame", [0.15, 0.15, 0.2], frame),
        part("right_temple", [0.7, 0.2, 0.5], temple_shape(corner)),
        part("left_temple", [0.2, 0.6, 0.4], temple_shape(-corner)),
    ];
    // Both hinges fold their temple inward for positive angles.
    let joints = vec![
        revolute(0, 1, Vector3::z(), Point3::new(corner, 0.0, 0.0), limit),
        revolute(0, 2, -Vector3::z(), Point3::new(-corner, 0.0, 0.0), limit),
    ];
    (parts, joints)
}

fn arm(p: &[f64], dof: usize, limit: [f64; 2]) -> (Vec<Part>, Vec<Joint>) {
    let (base_r, base_h, l1, l2, l3, r) = (p[0], p[1], p[2], p[3], p[4], p[5]);
    let base = shape(
        Primitive::Cylinder {
            radius: base_r,
            half_length: base_h / 2.0,
        },
        at(0.0, 0.0, base_h / 2.0),
    );
    let link1 = shape(
        Primitive::Capsule {
            radius: r,
            half_length: l1 / 2.0,
        },
        at(0.0, 0.0, base_h + l1 / 2.0),
    );
    let shoulder_z = base_h + l1;
    let link2 = shape(
        Primitive::Capsule {
            radius: r,
            half_length: l2 / 2.0,
        },
        posed(l2 / 2.0, 0.0, shoulder_z, along_x()),
    );
    let link3 = shape(
        Primitive::Capsule {
            radius: 0.8 * r,
            half_length: l3 / 2.0,
        },
        posed(l2 + l3 / 2.0, 0.0, shoulder_z, along_x()),
    );
    let grey = [0.45, 0.45, 0.5];
    let shoulder = Point3::new(0.0, 0.0, shoulder_z);
    let elbow = Point3::new(l2, 0.0, shoulder_z);
    match dof {
        1 => (
            vec![
                part("base", grey, vec![base, link1]),
                part("link2", [0.2, 0.5, 0.85], vec![link2]),
            ],
            vec![revolute(0, 1, Vector3::y(), shoulder, limit)],
        ),
        2 => (
            vec![
                part("base", grey, vec![base]),
                part("link1", [0.9, 0.5, 0.1], vec![link1]),
                part("link2", [0.2, 0.5, 0.85], vec![link2]),
            ],
            vec![
                revolute(0, 1, Vector3::z(), Point3::new(0.0, 0.0, base_h), limit),
                revolute(1, 2, Vector3::y(), shoulder, limit),
            ],
        ),
        _ => (
            vec![
                part("base", grey, vec![base]),
                part("link1", [0.9, 0.5, 0.1], vec![link1]),
                part("link2", [0.2, 0.5, 0.85], vec![link2]),
                part("link3", [0.3, 0.75, 0.3], vec![link3]),
            ],
            vec![
                revolute(0, 1, Vector3::z(), Point3::new(0.0, 0.0, base_h), limit),
                revolute(1, 2, Vector3::y(), shoulder, limit),
                revolute(2, 3, Vector3::y(), elbow, limit),
            ],
        ),
    }
}

/// Draws one instance: shape parameters uniform in the category ranges and, for
/// categories with several DoF options, a uniformly chosen DoF.
pub fn build_instance<R: Rng + ?Sized>(spec: &CategorySpec, rng: &mut R) -> Result<ArticulatedTemplate> {
    spec.validate()?;
    let params: Vec<f64> = spec
        .param_ranges
        .iter()
        .map(|r| if r.hi > r.lo { rng.gen_range(r.lo..r.hi) } else { r.lo })
        .collect();
    let dof = spec.dof_choices[rng.gen_range(0..spec.dof_choices.len())];
    let limit = spec.category.joint_limit();
    let (parts, joints) = match spec.category {
        Category::Pliers => pliers(&params, limit),
        Category::Scissors => scissors(&params, limit),
        Category::Eyeglasses => eyeglasses(&params, limit),
        Category::Arm3 => arm(&params, dof, limit),
    };
    let mut template = ArticulatedTemplate {
        category: spec.category,
        parts,
        joints,
        shape_params: params,
        normalization: Normalization {
            center: [0.0; 3],
            scale: 1.0,
        },
    };
    template.validate()?;
    let mut norm_rng = rng::stream(rng.gen(), &[rng::tag("normalization")]);
    template.normalization = template.rest_normalization(&mut norm_rng)?;
    Ok(template)
}

impl ArticulatedTemplate {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Checks the joint graph is a tree rooted at part 0 with unit axes and
    /// ordered limits.
    pub fn validate(&self) -> Result<()> {
        let n = self.parts.len();
        let mut has_parent = vec![false; n];
        for (j, joint) in self.joints.iter().enumerate() {
            if joint.child == 0 || joint.child >= n || joint.parent >= joint.child {
                return Err(Error::invalid(format!("joint {j} breaks the part ordering")));
            }
            if std::mem::replace(&mut has_parent[joint.child], true) {
                return Err(Error::invalid(format!("part {} has two parents", joint.child)));
            }
            if (joint.axis.norm() - 1.0).abs() > 1e-12 || !(joint.limit[0] < joint.limit[1]) {
                return Err(Error::invalid(format!("joint {j} has a bad axis or limit")));
            }
        }
        if has_parent.iter().skip(1).any(|&p| !p) {
            return Err(Error::invalid("every non-root part needs a joint"));
        }
        Ok(())
    }

    /// Per-part world transforms relative to the rest pose.
    ///
    /// `action` may be padded: entries beyond the instance DoF must be zero.
    pub fn forward_kinematics(&self, action: &[f64], limits: LimitPolicy) -> Result<Vec<Isometry3<f64>>> {
        if action.len() < self.dof() {
            return Err(Error::invalid(format!(
                "action has {} entries, instance has {} joints",
                action.len(),
                self.dof()
            )));
        }
        if action[self.dof()..].iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("padding entries of an action must be zero"));
        }
        let mut transforms = vec![Isometry3::identity(); self.parts.len()];
        for (j, joint) in self.joints.iter().enumerate() {
            let [lo, hi] = joint.limit;
            let mut angle = action[j];
            if !angle.is_finite() {
                return Err(Error::invalid(format!("joint {j} angle is not finite")));
            }
            if angle < lo - LIMIT_TOL || angle > hi + LIMIT_TOL {
                match limits {
                    LimitPolicy::Reject => {
                        return Err(Error::invalid(format!(
                            "joint {j} angle {angle} outside limits [{lo}, {hi}]"
                        )))
                    }
                    LimitPolicy::Clamp => angle = angle.clamp(lo, hi),
                    LimitPolicy::Free => {}
                }
            }
            transforms[joint.child] = transforms[joint.parent] * joint.motion(angle);
        }
        Ok(transforms)
    }

    /// Area-weighted surface samples mapped through `transforms`, in the raw
    /// (unnormalized) frame. Colored clouds append the part RGB.
    pub fn sample_surface<R: Rng + ?Sized>(
        &self,
        transforms: &[Isometry3<f64>],
        n: usize,
        rng: &mut R,
        colored: bool,
    ) -> Result<PointCloud> {
        Ok(self.sample_surface_labeled(transforms, n, rng, colored)?.0)
    }

    /// Like [`Self::sample_surface`], also returning the part of every point.
    pub fn sample_surface_labeled<R: Rng + ?Sized>(
        &self,
        transforms: &[Isometry3<f64>],
        n: usize,
        rng: &mut R,
        colored: bool,
    ) -> Result<(PointCloud, Vec<usize>)> {
        if transforms.len() != self.parts.len() {
            return Err(Error::invalid(format!(
                "{} transforms for {} parts",
                transforms.len(),
                self.parts.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("need at least one surface point"));
        }
        let shapes: Vec<(usize, &Shape)> = self
            .parts
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.shapes.iter().map(move |s| (i, s)))
            .collect();
        let weights = WeightedIndex::new(shapes.iter().map(|(_, s)| s.primitive.area()))
            .map_err(|e| Error::invalid(format!("surface areas: {e}")))?;
        let dim = if colored { 6 } else { 3 };
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (part_idx, s) = shapes[weights.sample(rng)];
            labels.push(part_idx);
            let local = s.primitive.sample_surface(rng);
            let p = transforms[part_idx] * (s.pose * local);
            data.extend_from_slice(&[p.x, p.y, p.z]);
            if colored {
                data.extend_from_slice(&self.parts[part_idx].color);
            }
        }
        Ok((PointCloud::new(dim, data)?, labels))
    }

    /// Posed, normalized cloud for `action`.
    pub fn posed_cloud<R: Rng + ?Sized>(
        &self,
        action: &[f64],
        n: usize,
        rng: &mut R,
        colored: bool,
        limits: LimitPolicy,
    ) -> Result<PointCloud> {
        let transforms = self.forward_kinematics(action, limits)?;
        let raw = self.sample_surface(&transforms, n, rng, colored)?;
        Ok(self.normalize(raw))
    }

    pub fn normalize(&self, cloud: PointCloud) -> PointCloud {
        let dim = cloud.dim();
        let mut data = cloud.data().to_vec();
        for p in data.chunks_exact_mut(dim) {
            self.normalization.apply(p);
        }
        PointCloud::new(dim, data).expect("layout unchanged")
    }

    /// Bounding sphere of a dense rest-pose sample: AABB center, max radius.
    fn rest_normalization(&self, rng: &mut StreamRng) -> Result<Normalization> {
        let rest = vec![Isometry3::identity(); self.parts.len()];
        let cloud = self.sample_surface(&rest, NORMALIZATION_POINTS, rng, false)?;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in cloud.points() {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let radius = cloud
            .points()
            .map(|p| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        Ok(Normalization {
            center,
            scale: 1.0 / radius,
        })
    }

    /// Distance from a rest-frame point to the nearest primitive surface of `part`.
    pub fn distance_to_part(&self, part: usize, p: &Point3<f64>) -> f64 {
        self.parts[part]
            .shapes
            .iter()
            .map(|s| s.primitive.signed_distance(&(s.pose.inverse() * p)).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Right-pads `action` with zeros to `j_max` entries.
pub fn pad_action(action: &[f64], j_max: usize) -> Result<Vec<f64>> {
    if action.len() > j_max {
        return Err(Error::invalid(format!(
            "action of length {} exceeds the category maximum {j_max}",
            action.len()
        )));
    }
    let mut out = action.to_vec();
    out.resize(j_max, 0.0);
    Ok(out)
}
