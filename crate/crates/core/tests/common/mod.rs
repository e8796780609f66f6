//! Shared fixtures for the integration suites.
#![allow(dead_code)] // each test target uses a different subset

use serde_json::{json, Value};

/// Small deterministic generator; uniform over [-1, 1] or [0, 1].
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x1234_5678_9abc_def1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() % (1 << 53)) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-1, 1).
    pub fn sym(&mut self) -> f64 {
        self.unit() * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

pub fn dense_layer(weights: &[Vec<f64>], bias: &[f64], relu: bool) -> Value {
    json!({"weights": weights, "bias": bias, "relu": relu})
}

/// Random fully connected network document with the given layer widths.
pub fn random_net_json(seed: u64, dims: &[usize], weight_scale: f64) -> Value {
    let mut rng = XorShift::new(seed);
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        let rows = dims[i + 1];
        let cols = dims[i];
        let weights: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.sym() * weight_scale).collect())
            .collect();
        let bias: Vec<f64> = (0..rows).map(|_| rng.sym() * 0.3).collect();
        layers.push(dense_layer(&weights, &bias, i + 2 < dims.len()));
    }
    json!({"input_dim": dims[0], "layers": layers})
}

pub fn random_inputs(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = XorShift::new(seed.wrapping_add(555));
    (0..count)
        .map(|_| (0..dim).map(|_| 0.1 + 0.8 * rng.unit()).collect())
        .collect()
}

pub fn rows_to_csv(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|v| format!("{}", v))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
