//! Procedural factorized sprite datasets.
//!
//! A [`FactorSpec`] lists the generative factors in generation order; sample
//! `i` is the mixed-radix decomposition of `i` with the last factor varying
//! fastest. Every factor combination is rendered exactly once.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on rendered pixel storage (bytes, one byte per pixel).
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("dataset of {samples} samples x {pixels} pixels exceeds the memory budget of {budget} bytes")]
    TooLarge {
        samples: usize,
        pixels: usize,
        budget: usize,
    },
    #[error("index {index} out of range for {len} samples")]
    InvalidIndex { index: usize, len: usize },
    #[error("empty index set")]
    EmptyView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Renderer {
    #[default]
    SquareSprite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

/// Which image property a factor drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorRole {
    Shape,
    Scale,
    Rotation,
    PosX,
    PosY,
}

impl FactorRole {
    fn from_name(name: &str) -> Option<Self> {
        match name {
            "shape" => Some(Self::Shape),
            "scale" => Some(Self::Scale),
            "rotation" | "orientation" => Some(Self::Rotation),
            "x" | "posx" | "pos_x" | "x_position" => Some(Self::PosX),
            "y" | "posy" | "pos_y" | "y_position" => Some(Self::PosY),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default)]
    pub renderer: Renderer,
}

impl FactorSpec {
    pub fn new(factors: &[(&str, usize)], image_height: usize, image_width: usize) -> Self {
        Self {
            factors: factors
                .iter()
                .map(|&(name, cardinality)| Factor {
                    name: name.to_string(),
                    cardinality,
                })
                .collect(),
            image_height,
            image_width,
            renderer: Renderer::SquareSprite,
        }
    }

    /// Desk-scale default: `{scale:3, x:8, y:8}` at 16x16 (192 samples).
    pub fn mini_dsprites() -> Self {
        Self::new(&[("scale", 3), ("x", 8), ("y", 8)], 16, 16)
    }

    /// The full dsprites factor layout (without rendering it at 64x64).
    pub fn dsprites_layout() -> Self {
        Self::new(
            &[("shape", 3), ("scale", 6), ("rotation", 40), ("x", 32), ("y", 32)],
            64,
            64,
        )
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    /// Product of cardinalities, `None` on overflow.
    pub fn num_samples(&self) -> Option<usize> {
        self.factors
            .iter()
            .try_fold(1usize, |acc, f| acc.checked_mul(f.cardinality))
    }

    pub fn num_pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.name.clone()).collect()
    }

    /// Mixed-radix decode; last factor fastest.
    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (k, f) in self.factors.iter().enumerate().rev() {
            out[k] = index % f.cardinality;
            index /= f.cardinality;
        }
        out
    }

    pub fn encode(&self, factors: &[usize]) -> usize {
        self.factors
            .iter()
            .zip(factors)
            .fold(0, |acc, (f, &v)| acc * f.cardinality + v)
    }

    fn layout(&self) -> Result<SpriteLayout, DatasetError> {
        let invalid = |msg: String| Err(DatasetError::InvalidSpec(msg));
        if self.factors.is_empty() {
            return invalid("no factors".into());
        }
        if self.image_height < 8 || self.image_width < 8 {
            return invalid(format!(
                "image {}x{} smaller than 8x8",
                self.image_height, self.image_width
            ));
        }
        let mut roles: Vec<FactorRole> = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            if f.cardinality == 0 {
                return invalid(format!("factor '{}' has cardinality 0", f.name));
            }
            let Some(role) = FactorRole::from_name(&f.name.to_ascii_lowercase()) else {
                return invalid(format!("unknown factor '{}'", f.name));
            };
            if roles.contains(&role) {
                return invalid(format!("duplicate factor '{}'", f.name));
            }
            roles.push(role);
        }
        let card = |role| {
            roles
                .iter()
                .position(|&r| r == role)
                .map(|k| self.factors[k].cardinality)
        };
        if let Some(shapes) = card(FactorRole::Shape) {
            if shapes > 3 {
                return invalid(format!("at most 3 shapes supported, got {shapes}"));
            }
        }
        let scales = card(FactorRole::Scale).unwrap_or(1);
        let max_side = 3 + 2 * (scales - 1);
        if max_side > self.image_height || max_side > self.image_width {
            return invalid(format!(
                "sprite side {max_side} exceeds image {}x{}",
                self.image_height, self.image_width
            ));
        }
        let grid = |n: Option<usize>, extent: usize| -> Result<Vec<usize>, DatasetError> {
            let free = extent - max_side;
            let half = (max_side - 1) / 2;
            match n {
                None | Some(1) => Ok(vec![half + free / 2]),
                Some(n) => {
                    if n > free + 1 {
                        return Err(DatasetError::InvalidSpec(format!(
                            "{n} positions do not fit in {} free pixels",
                            free + 1
                        )));
                    }
                    Ok((0..n)
                        .map(|j| half + ((j * free) as f64 / (n - 1) as f64).round() as usize)
                        .collect())
                }
            }
        };
        let xs = grid(card(FactorRole::PosX), self.image_width)?;
        let ys = grid(card(FactorRole::PosY), self.image_height)?;
        let rotations = card(FactorRole::Rotation).unwrap_or(1);
        Ok(SpriteLayout {
            roles,
            xs,
            ys,
            rotations,
        })
    }
}

struct SpriteLayout {
    roles: Vec<FactorRole>,
    xs: Vec<usize>,
    ys: Vec<usize>,
    rotations: usize,
}

impl SpriteLayout {
    fn render(&self, factors: &[usize], height: usize, width: usize, out: &mut [u8]) {
        let (mut shape, mut scale, mut rot, mut xi, mut yi) = (0, 0, 0, 0, 0);
        for (role, &v) in self.roles.iter().zip(factors) {
            match role {
                FactorRole::Shape => shape = v,
                FactorRole::Scale => scale = v,
                FactorRole::Rotation => rot = v,
                FactorRole::PosX => xi = v,
                FactorRole::PosY => yi = v,
            }
        }
        let side = (3 + 2 * scale) as f64;
        let half = side / 2.0;
        let (cx, cy) = (self.xs[xi] as f64, self.ys[yi] as f64);
        let theta = 2.0 * std::f64::consts::PI * rot as f64 / self.rotations as f64;
        let (s, c) = theta.sin_cos();
        const TOL: f64 = 1e-9;
        for py in 0..height {
            for px in 0..width {
                let dx = px as f64 - cx;
                let dy = py as f64 - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let inside = match shape {
                    0 => u.abs() <= half + TOL && v.abs() <= half + TOL,
                    1 => {
                        let arm = (half / 3.0).max(0.5);
                        (u.abs() <= arm + TOL && v.abs() <= half + TOL)
                            || (u.abs() <= half + TOL && v.abs() <= arm + TOL)
                    }
                    _ => u.abs() + v.abs() <= half + TOL,
                };
                out[py * width + px] = u8::from(inside);
            }
        }
    }
}

/// Binary images plus the complete ground-truth factor table.
#[derive(Clone)]
pub struct FactorizedDataset {
    spec: FactorSpec,
    images: Vec<u8>,
    factor_table: Vec<usize>,
}

impl fmt::Debug for FactorizedDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorizedDataset")
            .field("spec", &self.spec)
            .field("len", &self.len())
            .finish()
    }
}

/// Renders the full Cartesian product of `spec`.
pub fn generate(spec: &FactorSpec) -> Result<FactorizedDataset, DatasetError> {
    generate_with_budget(spec, DEFAULT_MEMORY_BUDGET)
}

pub fn generate_with_budget(
    spec: &FactorSpec,
    budget_bytes: usize,
) -> Result<FactorizedDataset, DatasetError> {
    let layout = spec.layout()?;
    let pixels = spec.num_pixels();
    let samples = spec
        .num_samples()
        .ok_or_else(|| DatasetError::InvalidSpec("sample count overflows".into()))?;
    if samples.checked_mul(pixels).is_none_or(|b| b > budget_bytes) {
        return Err(DatasetError::TooLarge {
            samples,
            pixels,
            budget: budget_bytes,
        });
    }
    let k = spec.num_factors();
    let mut images = vec![0u8; samples * pixels];
    let mut factor_table = Vec::with_capacity(samples * k);
    for (i, img) in images.chunks_mut(pixels).enumerate() {
        let f = spec.decode(i);
        layout.render(&f, spec.image_height, spec.image_width, img);
        factor_table.extend_from_slice(&f);
    }
    Ok(FactorizedDataset {
        spec: spec.clone(),
        images,
        factor_table,
    })
}

impl FactorizedDataset {
    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.factor_table.len() / self.spec.num_factors()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_pixels(&self) -> usize {
        self.spec.num_pixels()
    }

    /// Binary pixels of sample `i`, row-major.
    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.num_pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn factors(&self, i: usize) -> &[usize] {
        let k = self.spec.num_factors();
        &self.factor_table[i * k..(i + 1) * k]
    }

    pub fn factor_lookup(&self, i: usize) -> Result<Vec<usize>, DatasetError> {
        if i >= self.len() {
            return Err(DatasetError::InvalidIndex {
                index: i,
                len: self.len(),
            });
        }
        Ok(self.factors(i).to_vec())
    }

    /// Writes sample `i` as a binary portable graymap.
    pub fn write_pgm(&self, i: usize, path: &Path) -> std::io::Result<()> {
        let px: Vec<f64> = self.image(i).iter().map(|&b| f64::from(b)).collect();
        write_pgm(path, self.spec.image_width, self.spec.image_height, &px)
    }
}

/// A read-only subset of a dataset, addressed by sorted global indices.
#[derive(Clone)]
pub struct DatasetView {
    parent: Arc<FactorizedDataset>,
    indices: Arc<Vec<usize>>,
}

impl fmt::Debug for DatasetView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetView")
            .field("len", &self.len())
            .field("parent_len", &self.parent.len())
            .finish()
    }
}

impl DatasetView {
    pub fn full(parent: Arc<FactorizedDataset>) -> Self {
        let n = parent.len();
        Self {
            parent,
            indices: Arc::new((0..n).collect()),
        }
    }

    /// View over the given global sample indices (sorted and deduplicated).
    pub fn from_global(
        parent: Arc<FactorizedDataset>,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<Self, DatasetError> {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(DatasetError::EmptyView);
        }
        let n = parent.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DatasetError::InvalidIndex { index: bad, len: n });
        }
        Ok(Self {
            parent,
            indices: Arc::new(idx),
        })
    }

    /// Sub-view selecting positions of this view.
    pub fn subset(&self, positions: &[usize]) -> Result<Self, DatasetError> {
        let n = self.len();
        let mut global = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= n {
                return Err(DatasetError::InvalidIndex { index: p, len: n });
            }
            global.push(self.indices[p]);
        }
        Self::from_global(self.parent.clone(), global)
    }

    pub fn parent(&self) -> &Arc<FactorizedDataset> {
        &self.parent
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn global_index(&self, position: usize) -> usize {
        self.indices[position]
    }

    pub fn image(&self, position: usize) -> &[u8] {
        self.parent.image(self.indices[position])
    }

    pub fn factors(&self, position: usize) -> &[usize] {
        self.parent.factors(self.indices[position])
    }

    pub fn num_pixels(&self) -> usize {
        self.parent.num_pixels()
    }
}

/// Writes `[0,1]` intensities as an 8-bit P5 graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()
}
