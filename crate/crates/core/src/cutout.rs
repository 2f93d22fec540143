//! Similarity-guided Cutout.
//!
//! The frozen model scores every patch by the cosine between its final-layer
//! token and the text embedding of the image's class; the `k` best-scoring
//! patches are zeroed in input space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::tensor::Matrix;

/// Per-patch cosine similarities laid out on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    grid: Matrix,
}

impl SimilarityMap {
    pub fn new(grid: Matrix) -> Self {
        Self { grid }
    }

    pub fn grid(&self) -> &Matrix {
        &self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid.len()
    }

    /// Flat row-major indices of the `k` highest cells, ties to the lower
    /// index.
    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        if k > self.cells() {
            return Err(Error::contract(format!(
                "cutout of {k} patches on a {}-patch grid",
                self.cells()
            )));
        }
        let values = self.grid.data();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(k);
        Ok(order)
    }
}

/// Cosines between each row of `tokens` (`P×d`) and `text` (`1×d`), reshaped
/// to `rows×cols`. A zero-norm token scores 0.
pub fn similarity_from_tokens(tokens: &Matrix, text: &Matrix, rows: usize, cols: usize) -> Result<SimilarityMap> {
    if tokens.rows() != rows * cols || text.shape() != (1, tokens.cols()) {
        return Err(Error::dim(
            "similarity_map",
            format!(
                "tokens {:?}, text {:?}, grid {rows}x{cols}",
                tokens.shape(),
                text.shape()
            ),
        ));
    }
    let t = text.row(0);
    let t_norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grid = Matrix::from_fn(rows, cols, |i, j| {
        let p = tokens.row(i * cols + j);
        let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p_norm == 0.0 || t_norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        (dot / (p_norm * t_norm)).clamp(-1.0, 1.0)
    });
    Ok(SimilarityMap { grid })
}

/// Map of one image against the frozen text embedding of `class_id`.
pub fn similarity_map(model: &DualEncoder, image: &Matrix, class_id: usize) -> Result<SimilarityMap> {
    let text = model.encode_text(&[class_id], false)?;
    let (_, tokens) = model.encode_image(std::slice::from_ref(image), false)?;
    let c = model.config();
    similarity_from_tokens(&tokens, &text, c.grid_rows, c.grid_cols)
}

/// Zeroes the patches (rows of `image`) at the `k` highest cells of `map`.
pub fn apply_cutout(image: &Matrix, map: &SimilarityMap, k: usize) -> Result<Matrix> {
    if image.rows() != map.cells() {
        return Err(Error::dim(
            "apply_cutout",
            format!("{} patches but a {}-cell map", image.rows(), map.cells()),
        ));
    }
    let mut out = image.clone();
    for idx in map.top_k(k)? {
        out.row_mut(idx).fill(0.0);
    }
    Ok(out)
}

/// Range of the number of zeroed patches, `K ∈ {k_min, …, k_max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutoutPolicy {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for CutoutPolicy {
    fn default() -> Self {
        Self { k_min: 2, k_max: 5 }
    }
}

impl CutoutPolicy {
    pub fn validate(&self, patches: usize) -> Result<()> {
        if self.k_min > self.k_max || self.k_max > patches {
            return Err(Error::contract(format!(
                "cutout range [{}, {}] invalid for {patches} patches",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }

    /// Uniform draw from `{k_min, …, k_max}`.
    pub fn sample_k(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.k_min..=self.k_max)
    }
}
