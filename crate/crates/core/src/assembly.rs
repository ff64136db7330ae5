//! Direction-aware edge features.
//!
//! For an ordered pair (subject, object) the image feature grid is masked by
//! each box separately and mean-pooled per channel. The subject pool comes
//! first, then the object pool, then one-hots for the subject category, the
//! object category and their two super-categories. A single linear layer maps
//! this vector to the hidden edge context. Swapping subject and object
//! changes the input vector, so the two directions get different contexts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelSpace, ObjectCategoryId};

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(Error::invalid(format!("box {coords:?} not inside [0,1]")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("degenerate box {coords:?}")));
        }
        Ok(())
    }

    /// The whole image.
    pub fn full() -> Self {
        BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Image features plus depth, laid out `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(Error::shape(format!(
                "feature grid must be [channels, height, width] with nonzero extents, got {shape:?}"
            )));
        }
        Ok(FeatureGrid { values })
    }

    /// Appends a depth map `[height, width]` as the last channel.
    pub fn with_depth(features: Tensor, depth: &Tensor) -> Result<Self> {
        let grid = FeatureGrid::new(features)?;
        if depth.shape() != [grid.height(), grid.width()] {
            return Err(Error::shape(format!(
                "depth {:?} does not match grid {}x{}",
                depth.shape(),
                grid.height(),
                grid.width()
            )));
        }
        let shape = vec![grid.channels() + 1, grid.height(), grid.width()];
        let mut data = grid.values.into_data();
        data.extend_from_slice(depth.data());
        FeatureGrid::new(Tensor::new(shape, data)?)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Cells whose centers fall inside `bbox`, row-major over `height × width`.
pub fn cell_mask(bbox: &BoundingBox, height: usize, width: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(height * width);
    for r in 0..height {
        let cy = (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            mask.push(bbox.contains_point(cx, cy));
        }
    }
    mask
}

/// Zeroes every cell outside `bbox` in every channel.
pub fn mask_features(grid: &FeatureGrid, bbox: &BoundingBox) -> FeatureGrid {
    let mask = cell_mask(bbox, grid.height(), grid.width());
    let cells = mask.len();
    let mut values = grid.values.clone();
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        if !mask[i % cells] {
            *v = 0.0;
        }
    }
    FeatureGrid { values }
}

/// Per-channel mean over the cells inside `bbox`; zeros if no cell center is inside.
pub fn pool_box(grid: &FeatureGrid, bbox: &BoundingBox) -> Vec<f64> {
    let mask = cell_mask(bbox, grid.height(), grid.width());
    let cells = mask.len();
    let count = mask.iter().filter(|m| **m).count();
    let data = grid.values.data();
    (0..grid.channels())
        .map(|c| {
            if count == 0 {
                return 0.0;
            }
            let row = &data[c * cells..(c + 1) * cells];
            row.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>()
                / count as f64
        })
        .collect()
}

/// Size of the pre-projection edge vector for a grid with `channels` channels.
pub fn input_dim(channels: usize, space: &LabelSpace) -> usize {
    2 * channels + 2 * space.num_objects() + 2 * space.num_object_supers()
}

/// A pooled node: the spatial reduction of one box plus its category.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledNode {
    pub features: Vec<f64>,
    pub category: ObjectCategoryId,
}

impl PooledNode {
    pub fn from_grid(grid: &FeatureGrid, bbox: &BoundingBox, category: ObjectCategoryId) -> Self {
        PooledNode {
            features: pool_box(grid, bbox),
            category,
        }
    }
}

/// Concatenates subject pool, object pool and the four identity one-hots.
pub fn edge_input(subject: &PooledNode, object: &PooledNode, space: &LabelSpace) -> Result<Vec<f64>> {
    if subject.features.len() != object.features.len() {
        return Err(Error::shape("subject and object pools differ in width"));
    }
    let n_obj = space.num_objects();
    let n_sup = space.num_object_supers();
    let s_sup = space.object_super_of(subject.category)?;
    let o_sup = space.object_super_of(object.category)?;
    let mut v = Vec::with_capacity(2 * subject.features.len() + 2 * n_obj + 2 * n_sup);
    v.extend_from_slice(&subject.features);
    v.extend_from_slice(&object.features);
    let base = v.len();
    v.resize(base + 2 * n_obj + 2 * n_sup, 0.0);
    v[base + subject.category.0] = 1.0;
    v[base + n_obj + object.category.0] = 1.0;
    v[base + 2 * n_obj + s_sup] = 1.0;
    v[base + 2 * n_obj + n_sup + o_sup] = 1.0;
    Ok(v)
}

/// Learnable projection from the edge input vector to the hidden context.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyParams {
    /// `[input_dim, hidden_dim]`
    pub projection: Tensor,
}

impl AssemblyParams {
    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn project(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "edge input has {} entries, projection expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(kernels::linear(input, self.projection.data(), self.hidden_dim()))
    }

    /// Differentiable projection; `projection` is the tape leaf holding the matrix.
    pub fn project_on_tape(tape: &mut Tape, projection: Var, input: Vec<f64>) -> Result<Var> {
        let x = tape.constant(Tensor::vector(input));
        tape.linear(x, projection)
    }
}

/// The hidden vector of one directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeContext {
    pub hidden: Vec<f64>,
    pub subject_id: ObjectCategoryId,
    pub object_id: ObjectCategoryId,
    /// Node indices `(subject, object)`.
    pub direction: (usize, usize),
}

impl EdgeContext {
    /// Wraps an externally computed hidden vector.
    pub fn from_hidden(hidden: Vec<f64>) -> Self {
        EdgeContext {
            hidden,
            subject_id: ObjectCategoryId(0),
            object_id: ObjectCategoryId(0),
            direction: (0, 0),
        }
    }
}

/// Subject/object roles for one directed edge.
#[derive(Debug, Clone, Copy)]
pub struct EdgeEnds<'a> {
    pub subject_box: &'a BoundingBox,
    pub object_box: &'a BoundingBox,
    pub subject_category: ObjectCategoryId,
    pub object_category: ObjectCategoryId,
    pub direction: (usize, usize),
}

/// Builds the hidden context of the directed edge `subject → object`.
pub fn assemble_edge(
    grid: &FeatureGrid,
    ends: EdgeEnds<'_>,
    space: &LabelSpace,
    params: &AssemblyParams,
) -> Result<EdgeContext> {
    space.check_object(ends.subject_category)?;
    space.check_object(ends.object_category)?;
    let expected = input_dim(grid.channels(), space);
    if expected != params.input_dim() {
        return Err(Error::shape(format!(
            "grid with {} channels needs a projection with {expected} rows, got {}",
            grid.channels(),
            params.input_dim()
        )));
    }
    let subject = PooledNode::from_grid(grid, ends.subject_box, ends.subject_category);
    let object = PooledNode::from_grid(grid, ends.object_box, ends.object_category);
    let hidden = params.project(&edge_input(&subject, &object, space)?)?;
    Ok(EdgeContext {
        hidden,
        subject_id: ends.subject_category,
        object_id: ends.object_category,
        direction: ends.direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> LabelSpace {
        LabelSpace::from_json_str(
            r#"{"objects":["a","b","c"],"object_supers":{"a":"x","b":"y"},
                "predicates":["p"],"predicate_supers":{"p":"s"},"supers":["s"]}"#,
        )
        .unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid::new(Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
        let x0 = rng.random_range(0.0..0.7);
        let y0 = rng.random_range(0.0..0.7);
        BoundingBox::new(
            x0,
            y0,
            x0 + rng.random_range(0.15..0.3),
            y0 + rng.random_range(0.15..0.3),
        )
        .unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> AssemblyParams {
        AssemblyParams {
            projection: Tensor::from_fn(&[rows, d], |_| rng.random_range(-0.5..0.5)),
        }
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        let b: BoundingBox = serde_json::from_str("[0.1,0.2,0.3,0.4]").unwrap();
        assert_eq!(b.y_max, 0.4);
        assert!(serde_json::from_str::<BoundingBox>("[0.3,0.2,0.1,0.4]").is_err());
    }

    #[test]
    fn full_box_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_grid(&mut rng, 3, 4, 5);
        assert_eq!(mask_features(&g, &BoundingBox::full()), g);
    }

    #[test]
    fn box_between_centers_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_grid(&mut rng, 2, 2, 2);
        // centers are at 0.25 / 0.75 on each axis
        let b = BoundingBox::new(0.3, 0.3, 0.7, 0.7).unwrap();
        assert!(mask_features(&g, &b).values().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn left_half_box_zeroes_right_column() {
        let g = FeatureGrid::new(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let left = BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(mask_features(&g, &left).values().data(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(pool_box(&g, &left), vec![2.0]);
    }

    #[test]
    fn depth_is_appended_as_last_channel() {
        let feats = Tensor::zeros(&[2, 2, 3]);
        let depth = Tensor::from_fn(&[2, 3], |i| i as f64);
        let g = FeatureGrid::with_depth(feats, &depth).unwrap();
        assert_eq!(g.channels(), 3);
        assert_eq!(&g.values().data()[12..], depth.data());
        assert!(FeatureGrid::with_depth(Tensor::zeros(&[2, 2, 3]), &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn one_hots_land_in_the_right_slots() {
        let s = space();
        let a = PooledNode { features: vec![7.0], category: ObjectCategoryId(0) };
        let c = PooledNode { features: vec![9.0], category: ObjectCategoryId(2) };
        let v = edge_input(&a, &c, &s).unwrap();
        // [subj pool | obj pool | subj cat (3) | obj cat (3) | subj super (3) | obj super (3)]
        assert_eq!(
            v,
            vec![7.0, 9.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(v.len(), input_dim(1, &s));
    }

    #[test]
    fn identical_ends_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = space();
        let g = random_grid(&mut rng, 3, 8, 8);
        let p = random_params(&mut rng, input_dim(3, &s), 6);
        let b = random_box(&mut rng);
        let ends = |d| EdgeEnds {
            subject_box: &b,
            object_box: &b,
            subject_category: ObjectCategoryId(1),
            object_category: ObjectCategoryId(1),
            direction: d,
        };
        let ij = assemble_edge(&g, ends((0, 1)), &s, &p).unwrap();
        let ji = assemble_edge(&g, ends((1, 0)), &s, &p).unwrap();
        assert_eq!(ij.hidden, ji.hidden);
    }

    #[test]
    fn direction_changes_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = space();
        for _ in 0..100 {
            let g = random_grid(&mut rng, 3, 16, 16);
            let p = random_params(&mut rng, input_dim(3, &s), 8);
            let (bi, bj) = (random_box(&mut rng), random_box(&mut rng));
            let (ci, cj) = (ObjectCategoryId(rng.random_range(0..3)), ObjectCategoryId(rng.random_range(0..3)));
            let ij = assemble_edge(
                &g,
                EdgeEnds { subject_box: &bi, object_box: &bj, subject_category: ci, object_category: cj, direction: (0, 1) },
                &s,
                &p,
            )
            .unwrap();
            let ji = assemble_edge(
                &g,
                EdgeEnds { subject_box: &bj, object_box: &bi, subject_category: cj, object_category: ci, direction: (1, 0) },
                &s,
                &p,
            )
            .unwrap();
            if cell_mask(&bi, 16, 16) != cell_mask(&bj, 16, 16) {
                assert_ne!(ij.hidden, ji.hidden);
            }
        }
    }

    #[test]
    fn zero_grid_leaves_only_one_hot_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = space();
        let g = FeatureGrid::new(Tensor::zeros(&[2, 4, 4])).unwrap();
        let p = random_params(&mut rng, input_dim(2, &s), 3);
        let b = random_box(&mut rng);
        let ctx = assemble_edge(
            &g,
            EdgeEnds { subject_box: &b, object_box: &b, subject_category: ObjectCategoryId(0), object_category: ObjectCategoryId(2), direction: (0, 1) },
            &s,
            &p,
        )
        .unwrap();
        // rows: 4 pooled, 3 + 3 category one-hots, then 3 + 3 super one-hots
        let ss = s.object_super_of(ObjectCategoryId(0)).unwrap();
        let os = s.object_super_of(ObjectCategoryId(2)).unwrap();
        let rows = [4, 7 + 2, 10 + ss, 13 + os];
        let w = p.projection.data();
        for j in 0..3 {
            let expected: f64 = rows.iter().map(|r| w[r * 3 + j]).sum();
            assert!((ctx.hidden[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_shape_is_checked() {
        let s = space();
        let g = FeatureGrid::new(Tensor::zeros(&[2, 4, 4])).unwrap();
        let p = AssemblyParams { projection: Tensor::zeros(&[5, 3]) };
        let b = BoundingBox::full();
        let err = assemble_edge(
            &g,
            EdgeEnds { subject_box: &b, object_box: &b, subject_category: ObjectCategoryId(0), object_category: ObjectCategoryId(0), direction: (0, 0) },
            &s,
            &p,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_matches_tape_mean_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(&mut rng, 3, 6, 5);
        let b = random_box(&mut rng);
        let mut tape = Tape::new();
        let gv = tape.leaf(g.values().clone());
        let y = tape.mean_pool(gv, &cell_mask(&b, 6, 5)).unwrap();
        let direct = pool_box(&g, &b);
        for (a, b) in tape.value(y).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
