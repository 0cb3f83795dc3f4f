//! Prompt vocabulary: four shapes, seven motions and the reserved null
//! token at index 0.

use alloc::string::ToString;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Line,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Grow,
    Shrink,
    Rotate,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Line];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Line => "line",
        }
    }

    pub fn token(self) -> usize {
        1 + self as usize
    }
}

impl Motion {
    pub const ALL: [Motion; 7] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Grow,
        Motion::Shrink,
        Motion::Rotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Grow => "grow",
            Motion::Shrink => "shrink",
            Motion::Rotate => "rotate",
        }
    }

    pub fn token(self) -> usize {
        1 + Shape::ALL.len() + self as usize
    }
}

/// Table rows: null + shapes + motions.
pub const VOCAB_SIZE: usize = 1 + Shape::ALL.len() + Motion::ALL.len();
pub const NULL_TOKEN: usize = 0;

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Shape::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.strip_prefix("move-").unwrap_or(s);
        Motion::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A text prompt: either the null prompt or a (shape, motion) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prompt {
    Null,
    Text { shape: Shape, motion: Motion },
}

impl Prompt {
    pub fn new(shape: Shape, motion: Motion) -> Self {
        Prompt::Text { shape, motion }
    }

    pub fn tokens(&self) -> alloc::vec::Vec<usize> {
        match self {
            Prompt::Null => alloc::vec![NULL_TOKEN],
            Prompt::Text { shape, motion } => alloc::vec![shape.token(), motion.token()],
        }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prompt::Null => f.write_str("null"),
            Prompt::Text { shape, motion } => write!(f, "{shape}:{motion}"),
        }
    }
}

/// Parses `null` or `shape:motion`.
impl FromStr for Prompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "null" {
            return Ok(Prompt::Null);
        }
        let (shape, motion) = s
            .split_once(':')
            .ok_or_else(|| Error::Vocabulary(s.to_string()))?;
        Ok(Prompt::new(shape.trim().parse()?, motion.trim().parse()?))
    }
}
