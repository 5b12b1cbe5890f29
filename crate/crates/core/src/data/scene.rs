use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeSize {
    Small,
    Large,
}

/// Ordered so that sorting gives the report order UL, UR, LL, LR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl ShapeSize {
    pub const ALL: [ShapeSize; 2] = [ShapeSize::Small, ShapeSize::Large];

    pub fn word(self) -> &'static str {
        match self {
            ShapeSize::Small => "small",
            ShapeSize::Large => "large",
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    /// The two report words, e.g. `("upper", "left")`.
    pub fn words(self) -> (&'static str, &'static str) {
        match self {
            Quadrant::UpperLeft => ("upper", "left"),
            Quadrant::UpperRight => ("upper", "right"),
            Quadrant::LowerLeft => ("lower", "left"),
            Quadrant::LowerRight => ("lower", "right"),
        }
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::UpperRight)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::LowerLeft)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlacedShape {
    pub quadrant: Quadrant,
    pub kind: ShapeKind,
    pub size: ShapeSize,
}

impl fmt::Display for PlacedShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.quadrant.words();
        write!(f, "{} {} in the {a} {b}", self.size.word(), self.kind.word())
    }
}

/// Shapes on a canvas, at most one per quadrant, kept sorted by quadrant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<PlacedShape>,
    #[serde(default)]
    pub seed: u64,
}

pub const MAX_SHAPES: usize = 3;

impl SceneSpec {
    pub fn new(mut shapes: Vec<PlacedShape>, seed: u64) -> Result<Self> {
        shapes.sort();
        let scene = Self { shapes, seed };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty() -> Self {
        Self {
            shapes: Vec::new(),
            seed: 0,
        }
    }

    /// At most [`MAX_SHAPES`] shapes, no shared quadrant, sorted.
    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() > MAX_SHAPES {
            return Err(Error::Invariant(format!("{} shapes in one scene", self.shapes.len())));
        }
        for pair in self.shapes.windows(2) {
            if pair[0].quadrant == pair[1].quadrant {
                return Err(Error::Invariant(format!("two shapes in {:?}", pair[0].quadrant)));
            }
            if pair[0] > pair[1] {
                return Err(Error::Invariant("shapes not in quadrant order".into()));
            }
        }
        Ok(())
    }

    /// Same shapes, ignoring the generation seed.
    pub fn same_shapes(&self, other: &SceneSpec) -> bool {
        self.shapes == other.shapes
    }

    /// Draws 1..=`max_shapes` shapes in distinct quadrants.
    pub fn sample(seed: u64, max_shapes: usize) -> Self {
        let mut r = rng::stream(seed, "scene");
        let count = r.random_range(1..=max_shapes.clamp(1, MAX_SHAPES));
        let mut quadrants = Quadrant::ALL.to_vec();
        quadrants.shuffle(&mut r);
        let shapes = quadrants[..count]
            .iter()
            .map(|&quadrant| PlacedShape {
                quadrant,
                kind: ShapeKind::ALL[r.random_range(0..3)],
                size: ShapeSize::ALL[r.random_range(0..2)],
            })
            .collect();
        Self::new(shapes, seed).expect("distinct quadrants")
    }
}
