//! Procedural structure generation for the three fungal growth stages.
//!
//! A spore image is a scatter of filled circles. Hyphae and mycelium images place
//! circles and grow a branching tree out of each one: at depth `d` every node spawns
//! `fanout` children of length `L·α^d` and width `W·β^d`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Growth stage, in life-cycle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageClass {
    Spore,
    Hyphae,
    Mycelium,
}

impl StageClass {
    pub const ALL: [StageClass; 3] = [StageClass::Spore, StageClass::Hyphae, StageClass::Mycelium];
    pub const COUNT: usize = 3;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageClass::Spore => "spore",
            StageClass::Hyphae => "hyphae",
            StageClass::Mycelium => "mycelium",
        }
    }

    /// The stage whose traces appear in this stage's images.
    pub fn previous(self) -> Option<Self> {
        match self {
            StageClass::Spore => None,
            StageClass::Hyphae => Some(StageClass::Spore),
            StageClass::Mycelium => Some(StageClass::Hyphae),
        }
    }

    pub fn is_adjacent(self, other: StageClass) -> bool {
        self.ordinal().abs_diff(other.ordinal()) == 1
    }
}

impl fmt::Display for StageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spore" => Ok(StageClass::Spore),
            "hyphae" => Ok(StageClass::Hyphae),
            "mycelium" => Ok(StageClass::Mycelium),
            other => Err(Error::Config(format!("unknown stage class '{other}'"))),
        }
    }
}

/// Image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub const fn square(side: u32) -> Self {
        Self::new(side, side)
    }

    fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= f64::from(self.width) && p.y <= f64::from(self.height)
    }
}

impl Default for Canvas {
    fn default() -> Self {
        Self::square(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Per-stage generator parameters: count, branching depth, branch length and width,
/// plus the decay factors and tree shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    pub n_structures: usize,
    pub branch_depth: u32,
    pub branch_length: f64,
    pub branch_width: f64,
    pub length_decay: f64,
    pub width_decay: f64,
    pub spore_radius: f64,
    pub fanout: u32,
    pub overlap_fraction: f64,
    /// Half-width of the uniform jitter added to each child angle, radians.
    pub angle_jitter: f64,
    /// Angular offset between neighbouring children below the first level, radians.
    pub branch_spread: f64,
}

impl StageParams {
    pub fn default_for(stage: StageClass) -> Self {
        let base = StageParams {
            n_structures: 30,
            branch_depth: 0,
            branch_length: 0.0,
            branch_width: 0.0,
            length_decay: 0.7,
            width_decay: 0.8,
            spore_radius: 3.0,
            fanout: 1,
            overlap_fraction: 0.15,
            angle_jitter: PI / 5.0,
            branch_spread: PI / 4.0,
        };
        match stage {
            StageClass::Spore => base,
            StageClass::Hyphae => StageParams {
                n_structures: 8,
                branch_depth: 2,
                branch_length: 12.0,
                branch_width: 3.0,
                fanout: 2,
                ..base
            },
            StageClass::Mycelium => StageParams {
                n_structures: 6,
                branch_depth: 4,
                branch_length: 16.0,
                branch_width: 4.0,
                fanout: 3,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.length_decay) || !in_unit(self.width_decay) {
            return Err(Error::Parameter(format!(
                "decay factors must lie in (0, 1], got length_decay={} width_decay={}",
                self.length_decay, self.width_decay
            )));
        }
        if self.fanout == 0 {
            return Err(Error::Parameter("fanout must be at least 1".into()));
        }
        if !(self.spore_radius > 0.0) {
            return Err(Error::Parameter(format!(
                "spore_radius must be positive, got {}",
                self.spore_radius
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Parameter(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.branch_depth > 0 && !(self.branch_length > 0.0 && self.branch_width > 0.0) {
            return Err(Error::Parameter(
                "branch_length and branch_width must be positive when branch_depth > 0".into(),
            ));
        }
        if !(self.angle_jitter >= 0.0 && self.branch_spread >= 0.0) {
            return Err(Error::Parameter("angles must be non-negative".into()));
        }
        Ok(())
    }

    pub fn segment_length(&self, depth: u32) -> f64 {
        self.branch_length * self.length_decay.powi(depth as i32)
    }

    pub fn segment_width(&self, depth: u32) -> f64 {
        self.branch_width * self.width_decay.powi(depth as i32)
    }

    /// Segments grown from one circle: `Σ_{d=1..D} fanout^d`.
    pub fn segments_per_structure(&self) -> usize {
        (1..=self.branch_depth)
            .map(|d| (self.fanout as usize).pow(d))
            .sum()
    }

    /// Number of previous-stage structures mixed into an image of this stage.
    pub fn overlay_count(&self) -> usize {
        // The epsilon keeps products such as 0.15 * 20 from rounding up past 3.
        (self.overlap_fraction * self.n_structures as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

/// Parameter table for all stages.
pub type StageTable = BTreeMap<StageClass, StageParams>;

pub fn default_stage_table() -> StageTable {
    StageClass::ALL
        .iter()
        .map(|&s| (s, StageParams::default_for(s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
    /// Stage whose generator produced this circle (differs from the graph stage for overlays).
    pub stage: StageClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSegment {
    pub start: Point,
    pub end: Point,
    pub width: f64,
    pub depth: u32,
    pub angle: f64,
    /// Maximum depth of the tree this segment belongs to.
    pub tree_depth: u32,
    pub stage: StageClass,
    /// Index of the circle this tree grows from.
    pub root: usize,
    /// Index of the parent segment; `None` at depth 1.
    pub parent: Option<usize>,
}

impl BranchSegment {
    pub fn length(&self) -> f64 {
        self.start.distance(self.end)
    }

    /// Position along the stage color gradient.
    pub fn gradient_t(&self) -> f64 {
        if self.tree_depth == 0 {
            0.0
        } else {
            f64::from(self.depth) / f64::from(self.tree_depth)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureGraph {
    pub stage: StageClass,
    pub canvas: Canvas,
    pub circles: Vec<Circle>,
    pub segments: Vec<BranchSegment>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl StructureGraph {
    fn empty(stage: StageClass, canvas: Canvas, seed: u64) -> Self {
        Self {
            stage,
            canvas,
            circles: Vec::new(),
            segments: Vec::new(),
            seed,
            warnings: Vec::new(),
        }
    }

    /// Appends another graph, re-indexing its roots and parents.
    fn absorb(&mut self, other: StructureGraph) {
        let circle_offset = self.circles.len();
        let segment_offset = self.segments.len();
        self.circles.extend(other.circles);
        self.segments.extend(other.segments.into_iter().map(|mut s| {
            s.root += circle_offset;
            s.parent = s.parent.map(|p| p + segment_offset);
            s
        }));
        self.warnings.extend(other.warnings);
    }

    /// Line-oriented text record with fixed field order and 6-decimal fixed point.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "graph {} {}x{} seed={} circles={} segments={}",
            self.stage,
            self.canvas.width,
            self.canvas.height,
            self.seed,
            self.circles.len(),
            self.segments.len()
        );
        for c in &self.circles {
            let _ = writeln!(
                out,
                "circle {} {:.6} {:.6} {:.6}",
                c.stage, c.center.x, c.center.y, c.radius
            );
        }
        for s in &self.segments {
            let parent = s.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "segment {} {} {} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                s.stage,
                s.root,
                parent,
                s.depth,
                s.tree_depth,
                s.start.x,
                s.start.y,
                s.end.x,
                s.end.y,
                s.width,
                s.angle
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning {w}");
        }
        out
    }
}

fn check_canvas(params: &StageParams, canvas: Canvas) -> Result<()> {
    let need = 4.0 * params.spore_radius;
    if f64::from(canvas.width) < need || f64::from(canvas.height) < need {
        return Err(Error::Dimension(format!(
            "canvas {}x{} too small for spores of radius {} (need at least {need} px per side)",
            canvas.width, canvas.height, params.spore_radius
        )));
    }
    Ok(())
}

/// Uniform point inside the canvas inset by `margin` on every side: `[m, W-m) x [m, H-m)`.
fn inset_point<R: Rng + ?Sized>(rng: &mut R, canvas: Canvas, margin: f64) -> Point {
    let x = margin + rng.random::<f64>() * (f64::from(canvas.width) - 2.0 * margin);
    let y = margin + rng.random::<f64>() * (f64::from(canvas.height) - 2.0 * margin);
    Point::new(x, y)
}

/// Spore scatter: `n_structures` circles and no branches.
pub fn generate_spore<R: Rng + ?Sized>(
    params: &StageParams,
    rng: &mut R,
    canvas: Canvas,
    seed: u64,
) -> Result<StructureGraph> {
    params.validate()?;
    if params.branch_depth != 0 {
        return Err(Error::Parameter(format!(
            "spore generation requires branch_depth = 0, got {}",
            params.branch_depth
        )));
    }
    check_canvas(params, canvas)?;
    Ok(spores(params, StageClass::Spore, rng, canvas, seed))
}

fn spores<R: Rng + ?Sized>(
    params: &StageParams,
    stage: StageClass,
    rng: &mut R,
    canvas: Canvas,
    seed: u64,
) -> StructureGraph {
    let mut graph = StructureGraph::empty(stage, canvas, seed);
    graph.circles = (0..params.n_structures)
        .map(|_| Circle {
            center: inset_point(rng, canvas, params.spore_radius),
            radius: params.spore_radius,
            stage: StageClass::Spore,
        })
        .collect();
    graph
}

/// Hyphae/mycelium generator: circles with a branching tree grown from each center.
pub fn generate_branching<R: Rng + ?Sized>(
    params: &StageParams,
    stage: StageClass,
    rng: &mut R,
    canvas: Canvas,
    seed: u64,
) -> Result<StructureGraph> {
    if stage == StageClass::Spore {
        return Err(Error::Parameter(
            "branching generation applies to hyphae and mycelium only".into(),
        ));
    }
    params.validate()?;
    if params.branch_depth == 0 {
        return Err(Error::Parameter(format!(
            "{stage} requires branch_depth >= 1"
        )));
    }
    check_canvas(params, canvas)?;

    let mut graph = StructureGraph::empty(stage, canvas, seed);
    let tip = params.segment_length(params.branch_depth);
    if tip < 0.5 {
        graph.warnings.push(format!(
            "degenerate branches: depth-{} length {tip:.4} px is below 0.5 px",
            params.branch_depth
        ));
    }
    let mut clamped = 0usize;
    for _ in 0..params.n_structures {
        let center = inset_point(rng, canvas, params.spore_radius);
        let root = graph.circles.len();
        graph.circles.push(Circle {
            center,
            radius: params.spore_radius,
            stage,
        });
        let root_angle = rng.random::<f64>() * 2.0 * PI;
        let mut grower = Grower {
            params,
            stage,
            canvas,
            root,
            segments: &mut graph.segments,
            clamped: &mut clamped,
        };
        grower.grow(rng, center, root_angle, None, 1);
    }
    if clamped > 0 {
        graph.warnings.push(format!(
            "{clamped} segment(s) longer than half the canvas were clamped to its edge"
        ));
    }
    Ok(graph)
}

struct Grower<'a> {
    params: &'a StageParams,
    stage: StageClass,
    canvas: Canvas,
    root: usize,
    segments: &'a mut Vec<BranchSegment>,
    clamped: &'a mut usize,
}

impl Grower<'_> {
    fn grow<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        from: Point,
        parent_angle: f64,
        parent: Option<usize>,
        depth: u32,
    ) {
        if depth > self.params.branch_depth {
            return;
        }
        let fanout = self.params.fanout;
        let length = self.params.segment_length(depth);
        let width = self.params.segment_width(depth);
        for child in 0..fanout {
            let base = if depth == 1 {
                parent_angle + 2.0 * PI * f64::from(child) / f64::from(fanout)
            } else {
                parent_angle + (f64::from(child) - f64::from(fanout - 1) / 2.0) * self.params.branch_spread
            };
            let jitter = self.params.angle_jitter;
            let angle = base + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            let (end, angle) = self.place(from, angle, length);
            let index = self.segments.len();
            self.segments.push(BranchSegment {
                start: from,
                end,
                width,
                depth,
                angle,
                tree_depth: self.params.branch_depth,
                stage: self.stage,
                root: self.root,
                parent,
            });
            self.grow(rng, end, angle, Some(index), depth + 1);
        }
    }

    /// Keeps a segment on the canvas. The direction is mirrored across whichever axis it
    /// leaves through, which preserves its length; only segments longer than half the
    /// canvas can still escape, and those get their endpoint clamped.
    fn place(&mut self, from: Point, angle: f64, length: f64) -> (Point, f64) {
        let (mut dx, mut dy) = (angle.cos(), angle.sin());
        let w = f64::from(self.canvas.width);
        let h = f64::from(self.canvas.height);
        let x = from.x + length * dx;
        if x < 0.0 || x > w {
            dx = -dx;
        }
        let y = from.y + length * dy;
        if y < 0.0 || y > h {
            dy = -dy;
        }
        let end = Point::new(from.x + length * dx, from.y + length * dy);
        let angle = dy.atan2(dx);
        if self.canvas.contains(end) {
            (end, angle)
        } else {
            *self.clamped += 1;
            (Point::new(end.x.clamp(0.0, w), end.y.clamp(0.0, h)), angle)
        }
    }
}

/// Full image scene for `stage`: the stage's own structures plus
/// `⌈overlap_fraction · N⌉` structures from the preceding stage.
pub fn generate_stage<R: Rng + ?Sized>(
    stage: StageClass,
    table: &StageTable,
    rng: &mut R,
    canvas: Canvas,
    seed: u64,
) -> Result<StructureGraph> {
    let params = table
        .get(&stage)
        .ok_or_else(|| Error::Config(format!("missing stage parameters for {stage}")))?;
    let Some(previous) = stage.previous() else {
        return generate_spore(params, rng, canvas, seed);
    };
    let prev_params = table.get(&previous).ok_or_else(|| {
        Error::Config(format!(
            "missing stage parameters for {previous}, required as the overlay for {stage}"
        ))
    })?;
    let mut graph = generate_branching(params, stage, rng, canvas, seed)?;
    let overlay = params.overlay_count();
    if overlay > 0 {
        let prev_params = StageParams {
            n_structures: overlay,
            ..*prev_params
        };
        let mut extra = match previous {
            StageClass::Spore => generate_spore(&prev_params, rng, canvas, seed)?,
            _ => generate_branching(&prev_params, previous, rng, canvas, seed)?,
        };
        extra.stage = stage;
        graph.absorb(extra);
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn spore(n: usize) -> StageParams {
        StageParams {
            n_structures: n,
            ..StageParams::default_for(StageClass::Spore)
        }
    }

    fn branching(n: usize, depth: u32, fanout: u32) -> StageParams {
        StageParams {
            n_structures: n,
            branch_depth: depth,
            fanout,
            overlap_fraction: 0.0,
            ..StageParams::default_for(StageClass::Hyphae)
        }
    }

    #[test]
    fn stage_order_matches_life_cycle() {
        assert_eq!(StageClass::ALL.len(), 3);
        assert!(StageClass::Spore < StageClass::Hyphae);
        assert!(StageClass::Hyphae < StageClass::Mycelium);
        for (i, s) in StageClass::ALL.iter().enumerate() {
            assert_eq!(s.ordinal(), i);
            assert_eq!(s.name().parse::<StageClass>().unwrap(), *s);
        }
        assert!("fungus".parse::<StageClass>().is_err());
    }

    #[test]
    fn single_spore() {
        let g = generate_spore(&spore(1), &mut rng_from_seed(7), Canvas::square(64), 7).unwrap();
        assert_eq!(g.circles.len(), 1);
        assert!(g.segments.is_empty());
    }

    #[test]
    fn twenty_spores() {
        let g = generate_spore(&spore(20), &mut rng_from_seed(3), Canvas::square(64), 3).unwrap();
        assert_eq!(g.circles.len(), 20);
        assert!(g.segments.is_empty());
    }

    #[test]
    fn spore_centers_match_independent_redraw() {
        let params = spore(50);
        let g = generate_spore(&params, &mut rng_from_seed(11), Canvas::square(64), 11).unwrap();
        // Redraw the same stream by hand: two uniforms per spore.
        let mut rng = rng_from_seed(11);
        let r = params.spore_radius;
        for c in &g.circles {
            let x = r + rng.random::<f64>() * (64.0 - 2.0 * r);
            let y = r + rng.random::<f64>() * (64.0 - 2.0 * r);
            assert_eq!((c.center.x, c.center.y), (x, y));
            assert!(c.center.x >= r && c.center.x < 64.0 - r);
            assert!(c.center.y >= r && c.center.y < 64.0 - r);
        }
    }

    #[test]
    fn spore_rejects_small_canvas_and_branches() {
        let err = generate_spore(&spore(1), &mut rng_from_seed(1), Canvas::square(11), 1);
        assert!(matches!(err, Err(Error::Dimension(_))));
        let mut p = spore(1);
        p.branch_depth = 1;
        assert!(matches!(
            generate_spore(&p, &mut rng_from_seed(1), Canvas::square(64), 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn branching_count_two_by_two() {
        let g = generate_branching(
            &branching(2, 2, 2),
            StageClass::Hyphae,
            &mut rng_from_seed(5),
            Canvas::square(64),
            5,
        )
        .unwrap();
        assert_eq!(g.segments.len(), 12);
        assert_eq!(g.circles.len(), 2);
    }

    #[test]
    fn depth_two_length() {
        let p = StageParams {
            branch_length: 10.0,
            length_decay: 0.5,
            ..branching(3, 2, 2)
        };
        let g = generate_branching(&p, StageClass::Hyphae, &mut rng_from_seed(9), Canvas::square(64), 9).unwrap();
        let deep: Vec<_> = g.segments.iter().filter(|s| s.depth == 2).collect();
        assert!(!deep.is_empty());
        for s in deep {
            assert!((s.length() - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn single_level_widths() {
        let p = StageParams {
            branch_width: 4.0,
            width_decay: 0.75,
            ..branching(1, 1, 3)
        };
        let g = generate_branching(&p, StageClass::Hyphae, &mut rng_from_seed(2), Canvas::square(64), 2).unwrap();
        assert_eq!(g.segments.len(), 3);
        for s in &g.segments {
            assert_eq!(s.width, 3.0);
            assert_eq!(s.parent, None);
            assert_eq!(s.start, g.circles[0].center);
        }
    }

    #[test]
    fn branching_rejects_zero_depth_and_spore_stage() {
        let p = branching(1, 0, 2);
        assert!(matches!(
            generate_branching(&p, StageClass::Hyphae, &mut rng_from_seed(1), Canvas::square(64), 1),
            Err(Error::Parameter(_))
        ));
        let p = branching(1, 2, 2);
        assert!(generate_branching(&p, StageClass::Spore, &mut rng_from_seed(1), Canvas::square(64), 1).is_err());
    }

    #[test]
    fn tiny_tips_are_flagged() {
        let p = StageParams {
            branch_length: 2.0,
            length_decay: 0.2,
            ..branching(1, 3, 1)
        };
        let g = generate_branching(&p, StageClass::Mycelium, &mut rng_from_seed(1), Canvas::square(64), 1).unwrap();
        assert!(g.warnings.iter().any(|w| w.contains("degenerate")));
    }

    #[test]
    fn ancestor_chains_end_at_circle_centers() {
        let p = branching(4, 4, 3);
        let g = generate_branching(&p, StageClass::Mycelium, &mut rng_from_seed(4), Canvas::square(64), 4).unwrap();
        for s in &g.segments {
            let mut cur = s;
            let mut steps = 0;
            while let Some(p) = cur.parent {
                let parent = &g.segments[p];
                assert_eq!(parent.end, cur.start);
                assert_eq!(parent.depth + 1, cur.depth);
                cur = parent;
                steps += 1;
            }
            assert_eq!(cur.depth, 1);
            assert_eq!(steps + 1, s.depth as usize);
            assert_eq!(cur.start, g.circles[s.root].center);
        }
    }

    #[test]
    fn segments_stay_on_canvas() {
        let p = StageParams::default_for(StageClass::Mycelium);
        for seed in 0..20 {
            let g = generate_branching(&p, StageClass::Mycelium, &mut rng_from_seed(seed), Canvas::square(64), seed).unwrap();
            for s in &g.segments {
                for q in [s.start, s.end] {
                    assert!((0.0..=64.0).contains(&q.x) && (0.0..=64.0).contains(&q.y));
                }
                assert!((s.length() - p.segment_length(s.depth)).abs() < 1e-6);
            }
            assert!(g.warnings.is_empty());
        }
    }

    #[test]
    fn overlay_counts() {
        let mut table = default_stage_table();
        table.get_mut(&StageClass::Spore).unwrap().overlap_fraction = 0.15;
        let g = generate_stage(StageClass::Spore, &table, &mut rng_from_seed(1), Canvas::square(64), 1).unwrap();
        assert_eq!(g.circles.len(), table[&StageClass::Spore].n_structures);

        let h = table.get_mut(&StageClass::Hyphae).unwrap();
        h.n_structures = 10;
        h.overlap_fraction = 0.2;
        let g = generate_stage(StageClass::Hyphae, &table, &mut rng_from_seed(1), Canvas::square(64), 1).unwrap();
        let branched = g.circles.iter().filter(|c| c.stage == StageClass::Hyphae).count();
        let plain = g.circles.iter().filter(|c| c.stage == StageClass::Spore).count();
        assert_eq!((branched, plain), (10, 2));
        assert_eq!(g.segments.len(), 10 * 6);

        let m = table.get_mut(&StageClass::Mycelium).unwrap();
        m.n_structures = 8;
        m.overlap_fraction = 0.0;
        let g = generate_stage(StageClass::Mycelium, &table, &mut rng_from_seed(1), Canvas::square(64), 1).unwrap();
        assert_eq!(g.circles.len(), 8);
        assert!(g.segments.iter().all(|s| s.stage == StageClass::Mycelium));
    }

    #[test]
    fn overlay_ceiling_matches_enumeration() {
        for n in 1..=40usize {
            for pct in 0..100usize {
                let p = StageParams {
                    n_structures: n,
                    overlap_fraction: pct as f64 / 100.0,
                    ..StageParams::default_for(StageClass::Hyphae)
                };
                // Smallest k with 100·k ≥ pct·n.
                let expected = (0..=n).find(|k| 100 * k >= pct * n).unwrap();
                assert_eq!(p.overlay_count(), expected, "n={n} pct={pct}");
            }
        }
    }

    #[test]
    fn overlay_trees_keep_their_own_indices() {
        let table = default_stage_table();
        let g = generate_stage(StageClass::Mycelium, &table, &mut rng_from_seed(8), Canvas::square(64), 8).unwrap();
        for s in &g.segments {
            assert_eq!(g.circles[s.root].stage, s.stage);
            if let Some(p) = s.parent {
                assert_eq!(g.segments[p].stage, s.stage);
            }
        }
        assert!(g.segments.iter().any(|s| s.stage == StageClass::Hyphae));
    }

    #[test]
    fn missing_previous_params_is_config_error() {
        let mut table = default_stage_table();
        table.remove(&StageClass::Hyphae);
        let err = generate_stage(StageClass::Mycelium, &table, &mut rng_from_seed(1), Canvas::square(64), 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn record_is_deterministic() {
        let table = default_stage_table();
        for stage in StageClass::ALL {
            let a = generate_stage(stage, &table, &mut rng_from_seed(21), Canvas::square(64), 21).unwrap();
            let b = generate_stage(stage, &table, &mut rng_from_seed(21), Canvas::square(64), 21).unwrap();
            assert_eq!(a.to_record(), b.to_record());
            assert!(a.to_record().starts_with(&format!("graph {stage} 64x64 seed=21")));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let base = StageParams::default_for(StageClass::Hyphae);
        for bad in [
            StageParams { length_decay: 0.0, ..base },
            StageParams { width_decay: 1.5, ..base },
            StageParams { fanout: 0, ..base },
            StageParams { overlap_fraction: 1.0, ..base },
            StageParams { branch_length: 0.0, ..base },
            StageParams { spore_radius: -1.0, ..base },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter(_))), "{bad:?}");
        }
    }
}
