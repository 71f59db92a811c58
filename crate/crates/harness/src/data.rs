//! Procedural referring-segmentation scenes.
//!
//! Scenes live on a 16x16 cell grid over a black background. Each object
//! is a coloured shape template at one of two sizes, placed wholly in the
//! left or right half. The expression names all four attributes of the
//! referent; every distractor copies a strict subset of them, so exactly one
//! object matches.

use std::fmt;
use std::str::FromStr;

use cgf_core::metrics::Mask;
use cgf_core::{Rng, Tensor};

use crate::error::{Error, Result};

pub const GRID: usize = 16;
pub const EXPRESSION_LEN: usize = 4;
const PLACEMENT_TRIES: usize = 200;
const SCENE_TRIES: usize = 100;

/// Vocabulary, one word per id.
pub const VOCAB: [&str; 14] = [
    "circle", "square", "triangle", "cross", "ring", "bar", "red", "green", "blue", "yellow", "small", "large", "left",
    "right",
];

macro_rules! attribute {
    ($name:ident, $offset:expr, [$($variant:ident),+]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn token(self) -> usize {
                $offset + self.index()
            }

            pub fn from_token(id: usize) -> Option<Self> {
                id.checked_sub($offset).and_then(|i| Self::ALL.get(i).copied())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(VOCAB[self.token()])
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| VOCAB[v.token()] == s)
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name).to_lowercase()))
            }
        }
    };
}

attribute!(Shape, 0, [Circle, Square, Triangle, Cross, Ring, Bar]);
attribute!(Color, 6, [Red, Green, Blue, Yellow]);
attribute!(Size, 10, [Small, Large]);
attribute!(Position, 12, [Left, Right]);

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Size {
    /// Template side length in cells.
    pub fn cells(self) -> usize {
        match self {
            Size::Small => 4,
            Size::Large => 6,
        }
    }
}

impl Shape {
    /// `k x k` occupancy template, row-major.
    pub fn template(self, k: usize) -> Vec<bool> {
        let c = k as f64 / 2.0;
        (0..k * k)
            .map(|i| {
                let (y, x) = (i / k, i % k);
                let (dy, dx) = (y as f64 + 0.5 - c, x as f64 + 0.5 - c);
                match self {
                    Shape::Circle => dy * dy + dx * dx <= c * c,
                    Shape::Square => true,
                    Shape::Triangle => x <= y,
                    Shape::Cross => x == y || x + y == k - 1,
                    Shape::Ring => y == 0 || x == 0 || y == k - 1 || x == k - 1,
                    Shape::Bar => y >= k / 4 && y < k / 4 + k / 2,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
}

impl Attributes {
    pub fn tokens(&self) -> [usize; EXPRESSION_LEN] {
        [self.shape.token(), self.color.token(), self.size.token(), self.position.token()]
    }

    pub fn from_tokens(tokens: &[usize]) -> Option<Self> {
        match tokens {
            &[s, c, z, p] => Some(Attributes {
                shape: Shape::from_token(s)?,
                color: Color::from_token(c)?,
                size: Size::from_token(z)?,
                position: Position::from_token(p)?,
            }),
            _ => None,
        }
    }

    pub fn phrase(&self) -> String {
        format!("{} {} {} {}", self.shape, self.color, self.size, self.position)
    }

    fn shared_with(&self, other: &Attributes) -> usize {
        usize::from(self.shape == other.shape)
            + usize::from(self.color == other.color)
            + usize::from(self.size == other.size)
            + usize::from(self.position == other.position)
    }
}

/// One placed object; `row`/`col` give its top-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub attrs: Attributes,
    pub row: usize,
    pub col: usize,
}

impl Object {
    /// Occupied `(row, col)` cells.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let k = self.attrs.size.cells();
        self.attrs
            .shape
            .template(k)
            .into_iter()
            .enumerate()
            .filter(|(_, on)| *on)
            .map(|(i, _)| (self.row + i / k, self.col + i % k))
            .collect()
    }

    /// Half of the grid the object occupies, from its placement.
    pub fn placed_position(&self) -> Option<Position> {
        let k = self.attrs.size.cells();
        if self.col + k <= GRID / 2 {
            Some(Position::Left)
        } else if self.col >= GRID / 2 {
            Some(Position::Right)
        } else {
            None
        }
    }

    /// Whether the two objects' bounding boxes, grown by one cell, overlap.
    fn crowds(&self, other: &Object) -> bool {
        let (a, b) = (self.attrs.size.cells(), other.attrs.size.cells());
        let apart = |p0: usize, l0: usize, p1: usize, l1: usize| p0 + l0 < p1 || p1 + l1 < p0;
        !(apart(self.row, a, other.row, b) || apart(self.col, a, other.col, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H x W x 3` in `[0, 1]`.
    pub image: Tensor,
    pub expression: Vec<usize>,
    pub mask: Mask,
    pub category: Shape,
    pub objects: Vec<Object>,
    /// Index of the referent in `objects`.
    pub referent: usize,
}

impl Sample {
    /// Object indices whose attributes match every word of the expression.
    pub fn matches(&self) -> Vec<usize> {
        let want = Attributes::from_tokens(&self.expression);
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| Some(o.attrs) == want && o.placed_position() == Some(o.attrs.position))
            .map(|(i, _)| i)
            .collect()
    }
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

fn pick_other<T: Copy + PartialEq>(rng: &mut Rng, items: &[T], not: T) -> T {
    let rest: Vec<T> = items.iter().copied().filter(|&v| v != not).collect();
    pick(rng, &rest)
}

fn distractor(rng: &mut Rng, r: &Attributes) -> Attributes {
    // Bit i set means attribute i is copied from the referent; 15 is excluded.
    let keep = rng.below(15);
    let copy = |i: usize| keep & (1 << i) != 0;
    Attributes {
        shape: if copy(0) { r.shape } else { pick_other(rng, Shape::ALL, r.shape) },
        color: if copy(1) { r.color } else { pick_other(rng, Color::ALL, r.color) },
        size: if copy(2) { r.size } else { pick_other(rng, Size::ALL, r.size) },
        position: if copy(3) { r.position } else { pick_other(rng, Position::ALL, r.position) },
    }
}

fn place(rng: &mut Rng, attrs: Attributes, placed: &[Object]) -> Option<Object> {
    let k = attrs.size.cells();
    let half = GRID / 2;
    let col0 = match attrs.position {
        Position::Left => 0,
        Position::Right => half,
    };
    for _ in 0..PLACEMENT_TRIES {
        let obj = Object { attrs, row: rng.below(GRID - k + 1), col: col0 + rng.below(half - k + 1) };
        if placed.iter().all(|o| !obj.crowds(o)) {
            return Some(obj);
        }
    }
    None
}

/// Renders objects onto an `image_size` canvas; returns the image and one
/// mask per object.
pub fn render(objects: &[Object], image_size: usize) -> (Tensor, Vec<Mask>) {
    let cell = image_size / GRID;
    let mut image = Tensor::zeros(&[image_size, image_size, 3]);
    let mut masks = Vec::with_capacity(objects.len());
    for o in objects {
        let mut m = Mask::empty(image_size, image_size);
        let rgb = o.attrs.color.rgb();
        for (r, c) in o.cells() {
            for y in r * cell..(r + 1) * cell {
                for x in c * cell..(c + 1) * cell {
                    let i = y * image_size + x;
                    m.data[i] = true;
                    image.values_mut()[i * 3..i * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
        masks.push(m);
    }
    (image, masks)
}

fn scene(rng: &mut Rng, categories: &[Shape], image_size: usize) -> Result<Sample> {
    let n_objects = 2 + rng.below(4);
    let referent = Attributes {
        shape: pick(rng, categories),
        color: pick(rng, Color::ALL),
        size: pick(rng, Size::ALL),
        position: pick(rng, Position::ALL),
    };
    let mut objects: Vec<Object> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let attrs = if i == 0 { referent } else { distractor(rng, &referent) };
        let obj = place(rng, attrs, &objects)
            .ok_or_else(|| Error::Generation(format!("no room for object {i} ({})", attrs.phrase())))?;
        objects.push(obj);
    }
    let (image, mut masks) = render(&objects, image_size);
    let sample = Sample {
        image,
        expression: referent.tokens().to_vec(),
        mask: masks.swap_remove(0),
        category: referent.shape,
        objects,
        referent: 0,
    };
    if sample.matches() != [0] {
        return Err(Error::Generation("expression does not single out the referent".into()));
    }
    Ok(sample)
}

/// Deterministic dataset of `n` scenes whose referents are drawn from
/// `categories`.
pub fn generate_dataset(seed: u64, n: usize, categories: &[Shape], image_size: usize) -> Result<Vec<Sample>> {
    let mut rng = Rng::stream(seed, "data");
    generate_with(&mut rng, n, categories, image_size)
}

pub fn generate_with(rng: &mut Rng, n: usize, categories: &[Shape], image_size: usize) -> Result<Vec<Sample>> {
    if categories.is_empty() || n == 0 {
        return Err(Error::Config("dataset needs at least one category and one sample".into()));
    }
    if image_size % GRID != 0 {
        return Err(Error::Config(format!("image size {image_size} is not a multiple of {GRID}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut last = None;
        for _ in 0..SCENE_TRIES {
            match scene(rng, categories, image_size) {
                Ok(s) => {
                    last = None;
                    out.push(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
    }
    Ok(out)
}

/// Label-preserving variant of a scene: the layout is mirrored left/right
/// and/or top/bottom and the palette permuted, with the expression's
/// position and color words rewritten to match. Templates keep their
/// orientation, so every object keeps its shape.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    let (flip_h, flip_v) = (rng.bernoulli(0.5), rng.bernoulli(0.5));
    let mut palette: Vec<Color> = Color::ALL.to_vec();
    rng.shuffle(&mut palette);
    let objects: Vec<Object> = sample
        .objects
        .iter()
        .map(|o| {
            let k = o.attrs.size.cells();
            let mut a = o.attrs;
            a.color = palette[a.color.index()];
            if flip_h {
                a.position = Position::ALL[1 - a.position.index()];
            }
            Object {
                attrs: a,
                row: if flip_v { GRID - k - o.row } else { o.row },
                col: if flip_h { GRID - k - o.col } else { o.col },
            }
        })
        .collect();
    let (image, mut masks) = render(&objects, sample.mask.height);
    Sample {
        image,
        expression: objects[sample.referent].attrs.tokens().to_vec(),
        mask: masks.swap_remove(sample.referent),
        category: sample.category,
        objects,
        referent: sample.referent,
    }
}

/// Fraction of scenes in which some distractor shares at least one
/// attribute with the referent.
pub fn shared_attribute_rate(data: &[Sample]) -> f64 {
    let hits = data
        .iter()
        .filter(|s| {
            let r = s.objects[s.referent].attrs;
            s.objects.iter().enumerate().any(|(i, o)| i != s.referent && o.attrs.shared_with(&r) >= 1)
        })
        .count();
    hits as f64 / data.len() as f64
}

/// Reads each object's attributes back from the rendered pixels and counts
/// the objects matching the expression. Returns `None` if any object cannot
/// be decoded or the ground-truth mask differs from the referent's pixels.
pub fn audit(sample: &Sample) -> Option<usize> {
    let size = sample.mask.height;
    let cell = size / GRID;
    let want = Attributes::from_tokens(&sample.expression)?;
    let (_, masks) = render(&sample.objects, size);
    if masks[sample.referent] != sample.mask {
        return None;
    }
    let mut hits = 0;
    for m in &masks {
        let on: Vec<(usize, usize)> = (0..GRID * GRID)
            .map(|i| (i / GRID, i % GRID))
            .filter(|&(r, c)| m.get(r * cell, c * cell))
            .collect();
        let (r0, c0) = on.iter().fold((GRID, GRID), |(a, b), &(r, c)| (a.min(r), b.min(c)));
        let (r1, c1) = on.iter().fold((0, 0), |(a, b), &(r, c)| (a.max(r), b.max(c)));
        let k = (r1 - r0 + 1).max(c1 - c0 + 1);
        let size_attr = Size::ALL.iter().copied().find(|s| s.cells() == k)?;
        let rel: Vec<(usize, usize)> = on.iter().map(|&(r, c)| (r - r0, c - c0)).collect();
        let shape = Shape::ALL.iter().copied().find(|s| normalized_cells(&s.template(k), k) == rel)?;
        let (lr, lc) = on[0];
        let i = (lr * cell * size + lc * cell) * 3;
        let px = &sample.image.values()[i..i + 3];
        let color = Color::ALL.iter().copied().find(|c| c.rgb() == px)?;
        let position = if c1 < GRID / 2 {
            Position::Left
        } else if c0 >= GRID / 2 {
            Position::Right
        } else {
            return None;
        };
        let got = Attributes { shape, color, size: size_attr, position };
        hits += usize::from(got == want);
    }
    Some(hits)
}

/// Lit cells of a `k x k` template relative to their bounding box, in
/// row-major order.
fn normalized_cells(template: &[bool], k: usize) -> Vec<(usize, usize)> {
    let lit: Vec<(usize, usize)> = (0..k * k).filter(|&i| template[i]).map(|i| (i / k, i % k)).collect();
    let r0 = lit.iter().map(|p| p.0).min().unwrap_or(0);
    let c0 = lit.iter().map(|p| p.1).min().unwrap_or(0);
    lit.into_iter().map(|(r, c)| (r - r0, c - c0)).collect()
}

pub fn vocabulary_text() -> String {
    VOCAB.iter().map(|w| format!("{w}\n")).collect()
}

/// Parses a vocabulary file: one word per line, id = line number.
pub fn parse_vocabulary(text: &str) -> Vec<String> {
    text.lines().map(|l| l.trim().to_string()).collect()
}
