//! Single-shape scenes on a gray background.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};
use crate::text::{COLORS, POSITIONS, SHAPES, SIZES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }

    /// Palette entry nearest to `rgb`.
    pub fn classify(rgb: [f32; 3]) -> Color {
        let d = |c: Color| {
            c.rgb()
                .iter()
                .zip(rgb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
        };
        let mut best = Color::Red;
        for c in Color::ALL {
            if d(c) < d(best) {
                best = c;
            }
        }
        best
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    /// Shape radius as a fraction of the image side.
    pub fn radius(self) -> f32 {
        match self {
            Size::Small => 0.12,
            Size::Large => 0.22,
        }
    }
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
        Position::Center,
    ];

    /// Centre as fractions of the image side, `(row, column)`.
    pub fn centre(self) -> (f32, f32) {
        match self {
            Position::TopLeft => (0.25, 0.25),
            Position::TopRight => (0.25, 0.75),
            Position::BottomLeft => (0.75, 0.25),
            Position::BottomRight => (0.75, 0.75),
            Position::Center => (0.5, 0.5),
        }
    }

    /// Pixel box `[top, bottom) × [left, right)` where the shape must appear.
    pub fn region(self, side: usize) -> (usize, usize, usize, usize) {
        let (h, q) = (side / 2, side / 4);
        match self {
            Position::TopLeft => (0, h, 0, h),
            Position::TopRight => (0, h, h, side),
            Position::BottomLeft => (h, side, 0, h),
            Position::BottomRight => (h, side, h, side),
            Position::Center => (q, side - q, q, side - q),
        }
    }
}

macro_rules! words {
    ($t:ty, $list:expr) => {
        impl $t {
            pub fn word(self) -> &'static str {
                $list[Self::ALL.iter().position(|&x| x == self).unwrap()]
            }

            pub fn from_word(w: &str) -> Option<Self> {
                $list.iter().position(|&x| x == w).map(|k| Self::ALL[k])
            }
        }
    };
}

words!(Shape, SHAPES);
words!(Color, COLORS);
words!(Size, SIZES);
words!(Position, POSITIONS);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
    /// Background intensity in [0, 1] units.
    pub background: f32,
}

/// The attribute part of a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    pub size: Size,
    pub color: Color,
    pub shape: Shape,
    pub position: Position,
}

impl Caption {
    pub fn text(&self) -> String {
        format!(
            "{} {} {} at {}",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.position.word()
        )
    }

    /// Parses the canonical `<size> <color> <shape> at <position>` form.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || {
            Error::Format(format!(
                "caption {text:?} does not follow <size> <color> <shape> at <position>"
            ))
        };
        let w: Vec<&str> = text.split_whitespace().collect();
        if w.len() != 5 || w[3] != "at" {
            return Err(bad());
        }
        Ok(Caption {
            size: Size::from_word(w[0]).ok_or_else(bad)?,
            color: Color::from_word(w[1]).ok_or_else(bad)?,
            shape: Shape::from_word(w[2]).ok_or_else(bad)?,
            position: Position::from_word(w[4]).ok_or_else(bad)?,
        })
    }

    /// Every caption the grammar can produce.
    pub fn all() -> Vec<Caption> {
        let mut out = Vec::new();
        for size in Size::ALL {
            for color in Color::ALL {
                for shape in Shape::ALL {
                    for position in Position::ALL {
                        out.push(Caption {
                            size,
                            color,
                            shape,
                            position,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn random(rng: &mut Rng) -> Self {
        Caption {
            size: Size::ALL[rng::below(rng, 2)],
            color: Color::ALL[rng::below(rng, 4)],
            shape: Shape::ALL[rng::below(rng, 3)],
            position: Position::ALL[rng::below(rng, 5)],
        }
    }
}

impl Scene {
    pub fn random(rng: &mut Rng) -> Self {
        let c = Caption::random(rng);
        let background = 0.1 + 0.2 * rng::uniform(rng);
        Scene {
            shape: c.shape,
            color: c.color,
            size: c.size,
            position: c.position,
            background,
        }
    }

    pub fn caption(&self) -> Caption {
        Caption {
            size: self.size,
            color: self.color,
            shape: self.shape,
            position: self.position,
        }
    }

    /// Whether pixel `(y, x)` lies inside the shape, sampled at pixel centres.
    pub fn covers(&self, side: usize, y: usize, x: usize) -> bool {
        let s = side as f32;
        let (cy, cx) = self.position.centre();
        let r = self.size.radius() * s;
        let dy = y as f32 + 0.5 - cy * s;
        let dx = x as f32 + 0.5 - cx * s;
        match self.shape {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            // Upward isosceles triangle with base 2r and height 2r.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn render(&self, side: usize) -> Image {
        let g = 2.0 * self.background - 1.0;
        let mut img = Image::filled(side, [g, g, g]);
        let rgb = self.color.rgb();
        for y in 0..side {
            for x in 0..side {
                if self.covers(side, y, x) {
                    img.set_pixel(y, x, rgb);
                }
            }
        }
        img
    }
}
