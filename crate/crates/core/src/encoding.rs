//! Fixed sinusoidal positional codes for points and feature-grid locations,
//! plus the learnable class-embedding table. An object query is the sum of
//! the positional code of its point and the embedding row of its class.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Interleaved sin/cos code of a scalar in `[0,1]`.
///
/// `angle_i = 2π v / temperature^(2i/d)`; output is
/// `[sin a_0, cos a_0, sin a_1, cos a_1, ...]` with `d/2` frequencies.
pub fn sinusoidal_encode(v: f64, d: usize, temperature: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sinusoidal dimension must be even and positive, got {d}"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = (2.0 * std::f64::consts::PI * v) / temperature.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Positional code of a 2D point: x and y each take half the width.
pub fn encode_point(p: Point2, q: usize, temperature: f64) -> Result<Vec<f64>> {
    if q % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "code width must be divisible by 2, got {q}"
        )));
    }
    let mut out = sinusoidal_encode(p.x, q / 2, temperature)?;
    out.extend(sinusoidal_encode(p.y, q / 2, temperature)?);
    Ok(out)
}

/// Per-location codes for an `h×w` grid using the cell-center convention,
/// returned as an `[h*w, q]` matrix (row-major, token = row * w + col).
pub fn encode_grid(h: usize, w: usize, q: usize, temperature: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((h * w, q));
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let code = encode_point(Point2 { x, y }, q, temperature)?;
            out.row_mut(r * w + c)
                .assign(&Array2::from_shape_vec((1, q), code).unwrap().row(0));
        }
    }
    Ok(out)
}

/// Learnable `C×q` class embedding table.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingTable {
    pub weights: Array2<f64>,
}

impl ClassEmbeddingTable {
    /// Zero-mean normal initialization with the given scale.
    pub fn init(classes: usize, q: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let weights = Array2::from_shape_fn((classes, q), |_| {
            // Box-Muller from two uniform draws
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        Self { weights }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }
}

/// Build object queries on the tape: row i is
/// `encode_point(points[i]) + table[class_ids[i]]`.
///
/// `table` must already live on the tape so gradients reach it; the point
/// codes enter as constants.
pub fn make_queries(
    tape: &mut Tape,
    table: Value,
    classes: usize,
    points: &[(Point2, usize)],
    q: usize,
    temperature: f64,
) -> Result<Value> {
    let mut codes = Array2::zeros((points.len(), q));
    let mut idx = Vec::with_capacity(points.len());
    for (i, (p, class_id)) in points.iter().enumerate() {
        if *class_id >= classes {
            return Err(Error::InvalidConfig(format!(
                "class id {class_id} out of range (C={classes})"
            )));
        }
        let code = encode_point(*p, q, temperature)?;
        for (j, v) in code.into_iter().enumerate() {
            codes[[i, j]] = v;
        }
        idx.push(*class_id);
    }
    let rows = tape.gather_rows(table, &idx);
    Ok(tape.add_const(rows, &codes))
}
