//! Two-dimensional k-means helpers shared by the client loop and the
//! bench harness.

use std::cmp::Ordering;

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KmeansError {
    #[error("line {line}: expected `x,y`, got {text:?}")]
    BadPoint { line: usize, text: String },
    #[error("no points")]
    NoPoints,
    #[error("expected {expected} initial centers, got {got}")]
    CenterCount { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

pub fn parse_point(s: &str) -> Option<Point> {
    let (x, y) = s.trim().split_once(',')?;
    let x: f64 = x.trim().parse().ok()?;
    let y: f64 = y.trim().parse().ok()?;
    (x.is_finite() && y.is_finite()).then_some([x, y])
}

/// Parses one `x,y` point per line. Blank lines are skipped.
pub fn parse_points(text: &str) -> Result<Vec<Point>, KmeansError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_point(line).ok_or_else(|| KmeansError::BadPoint { line: i + 1, text: line.to_owned() })?);
    }
    Ok(out)
}

pub fn format_point(p: &Point) -> String {
    format!("{},{}", p[0], p[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn of(points: &[Point]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = BoundingBox { min: first, max: first };
        for p in points {
            b.min = [b.min[0].min(p[0]), b.min[1].min(p[1])];
            b.max = [b.max[0].max(p[0]), b.max[1].max(p[1])];
        }
        Some(b)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..2).all(|d| self.min[d] <= p[d] && p[d] <= self.max[d])
    }
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(p: &Point, centers: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn lexical(a: &Point, b: &Point) -> Ordering {
    let cmp = |x: f64, y: f64| x.partial_cmp(&y).unwrap_or(Ordering::Equal);
    cmp(a[0], b[0]).then(cmp(a[1], b[1]))
}

/// Mean of `points`, summed in lexical (x, y) order so the result does
/// not depend on arrival order.
pub fn centroid(points: &mut [Point]) -> Option<Point> {
    if points.is_empty() {
        return None;
    }
    points.sort_by(lexical);
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in points.iter() {
        sx += p[0];
        sy += p[1];
    }
    let n = points.len() as f64;
    Some([sx / n, sy / n])
}

/// One assignment plus update round. Empty clusters keep their center.
pub fn step(points: &[Point], centers: &[Point]) -> Vec<Point> {
    let mut clusters = vec![Vec::new(); centers.len()];
    for p in points {
        clusters[nearest(p, centers)].push(*p);
    }
    clusters
        .iter_mut()
        .zip(centers)
        .map(|(members, old)| centroid(members).unwrap_or(*old))
        .collect()
}

/// Mean Euclidean distance between matching centers.
pub fn mean_movement(old: &[Point], new: &[Point]) -> f64 {
    assert_eq!(old.len(), new.len());
    if old.is_empty() {
        return 0.0;
    }
    old.iter().zip(new).map(|(a, b)| sq_dist(a, b).sqrt()).sum::<f64>() / old.len() as f64
}

/// Stopping rule. A zero fraction stops only at an exact fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub threshold_frac: f64,
    pub max_iterations: usize,
}

impl StopRule {
    pub const DEFAULT_FRAC: f64 = 1e-3;

    pub fn new(threshold_frac: f64) -> Self {
        StopRule { threshold_frac, max_iterations: 500 }
    }

    pub fn converged(&self, movement: f64, diagonal: f64) -> bool {
        movement == 0.0 || movement < self.threshold_frac * diagonal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansRun {
    pub centers: Vec<Point>,
    pub iterations: usize,
    /// Centers after each iteration.
    pub history: Vec<Vec<Point>>,
}

/// Single-process Lloyd iteration with the same tie-breaking, summation
/// order and stopping rule as the distributed job.
pub fn sequential(points: &[Point], init: &[Point], rule: StopRule) -> Result<KmeansRun, KmeansError> {
    if init.is_empty() {
        return Err(KmeansError::ZeroK);
    }
    let diag = BoundingBox::of(points).ok_or(KmeansError::NoPoints)?.diagonal();
    let mut centers = init.to_vec();
    let mut history = Vec::new();
    loop {
        let next = step(points, &centers);
        let movement = mean_movement(&centers, &next);
        history.push(next.clone());
        centers = next;
        if rule.converged(movement, diag) || history.len() >= rule.max_iterations {
            break;
        }
    }
    Ok(KmeansRun { iterations: history.len(), centers, history })
}
