//! Quadrature on the probability simplex for `V = 2` and `V = 3`.
//!
//! Coordinates are the first `V - 1` probabilities, so the simplex volume is
//! `1 / (V - 1)!`. `V = 2` uses the midpoint rule on `[0, 1]` with `R` cells;
//! `V = 3` splits the triangle into `R^2` congruent sub-triangles and uses
//! their centroids. Both node sets stay strictly inside the simplex and are
//! invariant under permutation of the coordinates.

use crate::{Error, Result};

/// Nodes never come closer than this to a face of the simplex.
pub const COORD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    vocab_size: usize,
    resolution: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(vocab_size: usize, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::config("resolution", "must be at least 1"));
        }
        let r = resolution as f64;
        let (nodes, weights) = match vocab_size {
            2 => {
                let nodes: Vec<Vec<f64>> = (0..resolution)
                    .map(|i| {
                        let u = (i as f64 + 0.5) / r;
                        vec![u, 1.0 - u]
                    })
                    .collect();
                (nodes, vec![1.0 / r; resolution])
            }
            3 => {
                let mut nodes = Vec::with_capacity(resolution * resolution);
                for i in 0..resolution {
                    for j in 0..resolution - i {
                        let (a, b) = (i as f64, j as f64);
                        // Upward triangle (a,b), (a+1,b), (a,b+1).
                        nodes.push(centroid(a + 1.0 / 3.0, b + 1.0 / 3.0, r));
                        if i + j + 1 < resolution {
                            // Downward triangle (a+1,b), (a,b+1), (a+1,b+1).
                            nodes.push(centroid(a + 2.0 / 3.0, b + 2.0 / 3.0, r));
                        }
                    }
                }
                let w = 0.5 / (r * r);
                let n = nodes.len();
                (nodes, vec![w; n])
            }
            v => {
                return Err(Error::config("vocab_size", format!("quadrature supports V = 2 or 3, got {v}")));
            }
        };
        if nodes.iter().flatten().any(|&x| x < COORD_FLOOR) {
            return Err(Error::config("resolution", format!("{resolution} puts nodes closer than {COORD_FLOOR} to the boundary")));
        }
        Ok(Self {
            vocab_size,
            resolution,
            nodes,
            weights,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Full simplex coordinates (all `V` entries) of each node.
    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ w_i f(x_i)`.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}

fn centroid(a: f64, b: f64, r: f64) -> Vec<f64> {
    let (x, y) = (a / r, b / r);
    vec![x, y, 1.0 - x - y]
}
