//! Permanent PE faults in a weight-stationary systolic array.
//!
//! Weight `W[i][j]` (input feature `i`, output neuron `j`) is held by PE
//! `(i mod R, j mod C)`: larger matrices are folded onto the array tile by
//! tile. A faulty PE is bypassed, so its product never reaches the
//! accumulator. Fault-aware pruning reproduces that by zeroing every weight the
//! PE would host, which is what [`derive_mask`] computes.
//! [`systolic_matmul_oracle`] executes the tiled dataflow directly and is kept
//! independent of the mask path so the two can be checked against each other.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::numnet::{Matrix, NetworkSpec};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        let cfg = ArrayConfig { rows, cols };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "systolic array must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn num_pes(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of faulty PEs a map generated at `rate` contains.
    pub fn fault_count(&self, rate: f64) -> usize {
        (rate * self.num_pes() as f64).round() as usize
    }

    /// The fault rate actually realised by a map generated at `rate`.
    pub fn realized_rate(&self, rate: f64) -> f64 {
        self.fault_count(rate) as f64 / self.num_pes() as f64
    }
}

/// Faulty PEs of one chip. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FaultMapRepr", into = "FaultMapRepr")]
pub struct FaultMap {
    config: ArrayConfig,
    faulty: BTreeSet<(usize, usize)>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultMapRepr {
    rows: usize,
    cols: usize,
    seed: u64,
    faulty: Vec<[usize; 2]>,
}

impl TryFrom<FaultMapRepr> for FaultMap {
    type Error = Error;

    fn try_from(repr: FaultMapRepr) -> Result<Self> {
        FaultMap::new(
            ArrayConfig::new(repr.rows, repr.cols)?,
            repr.faulty.into_iter().map(|[r, c]| (r, c)),
            repr.seed,
        )
    }
}

impl From<FaultMap> for FaultMapRepr {
    fn from(map: FaultMap) -> Self {
        FaultMapRepr {
            rows: map.config.rows,
            cols: map.config.cols,
            seed: map.seed,
            faulty: map.faulty.iter().map(|&(r, c)| [r, c]).collect(),
        }
    }
}

impl FaultMap {
    pub fn new(
        config: ArrayConfig,
        faulty: impl IntoIterator<Item = (usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let faulty: BTreeSet<_> = faulty.into_iter().collect();
        if let Some(&(r, c)) = faulty
            .iter()
            .find(|&&(r, c)| r >= config.rows || c >= config.cols)
        {
            return Err(Error::InvalidConfig(format!(
                "faulty PE ({r}, {c}) outside {}x{} array",
                config.rows, config.cols
            )));
        }
        Ok(FaultMap {
            config,
            faulty,
            seed,
        })
    }

    pub fn fault_free(config: ArrayConfig) -> Self {
        FaultMap {
            config,
            faulty: BTreeSet::new(),
            seed: 0,
        }
    }

    pub fn config(&self) -> ArrayConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Faulty coordinates in lexicographic order.
    pub fn faulty(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.faulty.iter().copied()
    }

    pub fn num_faulty(&self) -> usize {
        self.faulty.len()
    }

    pub fn is_faulty(&self, row: usize, col: usize) -> bool {
        self.faulty.contains(&(row, col))
    }

    /// Dense row-major fault grid.
    fn grid(&self) -> Vec<bool> {
        let mut grid = vec![false; self.config.num_pes()];
        for &(r, c) in &self.faulty {
            grid[r * self.config.cols + c] = true;
        }
        grid
    }
}

/// Random fault map with exactly `round(rate * R * C)` distinct faulty PEs
/// chosen uniformly without replacement.
pub fn generate_fault_map(cfg: ArrayConfig, rate: f64, seed: u64) -> Result<FaultMap> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!(
            "fault rate must be in [0, 1], got {rate}"
        )));
    }
    let count = cfg.fault_count(rate);
    let mut rng = seed::rng(seed);
    let picked = index::sample(&mut rng, cfg.num_pes(), count);
    FaultMap::new(
        cfg,
        picked.into_iter().map(|k| (k / cfg.cols, k % cfg.cols)),
        seed,
    )
}

pub fn fault_rate(map: &FaultMap) -> f64 {
    map.num_faulty() as f64 / map.config.num_pes() as f64
}

/// Binary keep-mask for one weight matrix; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut keep = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                keep.push(f(i, j));
            }
        }
        Mask { rows, cols, keep }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    /// Row-major keep flags.
    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn num_pruned(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// One mask per weight matrix of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub layers: Vec<Mask>,
}

impl MaskSet {
    pub fn ones(spec: &NetworkSpec) -> Self {
        MaskSet {
            layers: spec.layer_shapes().map(|(i, j)| Mask::ones(i, j)).collect(),
        }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        MaskSet {
            layers: spec
                .layer_shapes()
                .map(|(i, j)| Mask::zeros(i, j))
                .collect(),
        }
    }

    pub fn num_pruned(&self) -> usize {
        self.layers.iter().map(Mask::num_pruned).sum()
    }
}

/// Mask of an `input_dim x output_dim` weight matrix under the cyclic tiling.
pub fn derive_mask(input_dim: usize, output_dim: usize, map: &FaultMap) -> Mask {
    let ArrayConfig { rows, cols } = map.config;
    let grid = map.grid();
    Mask::from_fn(input_dim, output_dim, |i, j| {
        !grid[(i % rows) * cols + j % cols]
    })
}

pub fn derive_maskset(spec: &NetworkSpec, map: &FaultMap) -> MaskSet {
    MaskSet {
        layers: spec
            .layer_shapes()
            .map(|(i, j)| derive_mask(i, j, map))
            .collect(),
    }
}

/// Tile-by-tile weight-stationary execution of `Wᵀ x` on a faulty array.
///
/// `weights` is `I x J`. Each `R x C` tile is loaded into the array, `x` is
/// streamed through and every PE adds its product to the column's partial
/// sum unless it is faulty.
pub fn systolic_matmul_oracle(weights: &Matrix, x: &[f64], map: &FaultMap) -> Result<Vec<f64>> {
    if x.len() != weights.rows() {
        return Err(Error::DimensionMismatch(format!(
            "input vector has length {}, weights have {} rows",
            x.len(),
            weights.rows()
        )));
    }
    let ArrayConfig { rows, cols } = map.config;
    let (in_dim, out_dim) = weights.shape();
    let mut out = vec![0.0; out_dim];

    for row_tile in (0..in_dim).step_by(rows) {
        for col_tile in (0..out_dim).step_by(cols) {
            // partial sums flowing down each PE column of this tile
            let mut psum = vec![0.0; cols];
            for (pe_row, &xi) in x[row_tile..in_dim.min(row_tile + rows)].iter().enumerate() {
                let i = row_tile + pe_row;
                for (pe_col, acc) in psum.iter_mut().enumerate() {
                    let j = col_tile + pe_col;
                    if j >= out_dim || map.is_faulty(pe_row, pe_col) {
                        continue;
                    }
                    *acc += xi * weights.get(i, j);
                }
            }
            for (pe_col, acc) in psum.into_iter().enumerate() {
                if col_tile + pe_col < out_dim {
                    out[col_tile + pe_col] += acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: usize, c: usize) -> ArrayConfig {
        ArrayConfig::new(r, c).unwrap()
    }

    #[test]
    fn generated_counts() {
        let big = cfg(256, 256);
        assert_eq!(generate_fault_map(big, 0.0, 1).unwrap().num_faulty(), 0);
        assert_eq!(generate_fault_map(big, 1.0, 1).unwrap().num_faulty(), 65536);
        for seed in 0..20 {
            assert_eq!(
                generate_fault_map(cfg(4, 4), 0.25, seed)
                    .unwrap()
                    .num_faulty(),
                4
            );
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_fault_map(cfg(16, 16), 0.2, 9).unwrap();
        let b = generate_fault_map(cfg(16, 16), 0.2, 9).unwrap();
        let c = generate_fault_map(cfg(16, 16), 0.2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(generate_fault_map(cfg(4, 4), 1.5, 0).is_err());
        assert!(generate_fault_map(cfg(4, 4), -0.1, 0).is_err());
        assert!(generate_fault_map(cfg(4, 4), f64::NAN, 0).is_err());
    }

    #[test]
    fn rates() {
        let c = cfg(4, 4);
        let four = FaultMap::new(c, [(0, 0), (1, 1), (2, 2), (3, 3)], 0).unwrap();
        assert_eq!(fault_rate(&four), 0.25);
        assert_eq!(fault_rate(&FaultMap::fault_free(c)), 0.0);
        assert_eq!(fault_rate(&generate_fault_map(c, 1.0, 3).unwrap()), 1.0);
    }

    #[test]
    fn out_of_range_coordinate_rejected() {
        assert!(FaultMap::new(cfg(2, 2), [(2, 0)], 0).is_err());
        assert!(ArrayConfig::new(0, 3).is_err());
    }

    #[test]
    fn mask_follows_cyclic_tiling() {
        let map = FaultMap::new(cfg(3, 3), [(1, 2)], 0).unwrap();
        let mask = derive_mask(5, 4, &map);
        // oracle: enumerate every weight and test (i mod 3, j mod 3)
        let mut zeros = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                if !mask.keeps(i, j) {
                    zeros.push((i, j));
                }
            }
        }
        assert_eq!(zeros, vec![(1, 2), (4, 2)]);
    }

    #[test]
    fn mask_extremes() {
        let c = cfg(3, 2);
        assert!(derive_mask(7, 5, &FaultMap::fault_free(c)).is_all_ones());
        let full = generate_fault_map(c, 1.0, 0).unwrap();
        assert_eq!(derive_mask(7, 5, &full).num_pruned(), 35);
    }

    #[test]
    fn maskset_per_layer() {
        let spec = NetworkSpec::new(vec![4, 3, 2]).unwrap();
        let c = cfg(2, 2);
        let empty = derive_maskset(&spec, &FaultMap::fault_free(c));
        assert_eq!(empty, MaskSet::ones(&spec));
        assert_eq!(empty.layers[0].shape(), (4, 3));
        assert_eq!(empty.layers[1].shape(), (3, 2));
        let full = derive_maskset(&spec, &generate_fault_map(c, 1.0, 0).unwrap());
        assert_eq!(full, MaskSet::zeros(&spec));

        let single = NetworkSpec::new(vec![5, 4]).unwrap();
        let map = FaultMap::new(cfg(3, 3), [(1, 2)], 0).unwrap();
        let set = derive_maskset(&single, &map);
        assert_eq!(set.layers, vec![derive_mask(5, 4, &map)]);
    }

    #[test]
    fn oracle_extremes() {
        let w = Matrix::from_fn(7, 5, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let x: Vec<f64> = (0..7).map(|i| 1.0 - i as f64 * 0.25).collect();
        let c = cfg(3, 3);
        let dense: Vec<f64> = (0..5)
            .map(|j| (0..7).map(|i| x[i] * w.get(i, j)).sum())
            .collect();
        let out = systolic_matmul_oracle(&w, &x, &FaultMap::fault_free(c)).unwrap();
        for (a, b) in out.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12);
        }
        let full = generate_fault_map(c, 1.0, 0).unwrap();
        assert_eq!(systolic_matmul_oracle(&w, &x, &full).unwrap(), vec![0.0; 5]);
        assert!(systolic_matmul_oracle(&w, &x[..6], &full).is_err());
    }

    #[test]
    fn json_is_canonical() {
        let map = FaultMap::new(cfg(3, 4), [(2, 1), (0, 3), (0, 1)], 11).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        assert_eq!(
            text,
            r#"{"rows":3,"cols":4,"seed":11,"faulty":[[0,1],[0,3],[2,1]]}"#
        );
        let back: FaultMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back, map);
        assert!(serde_json::from_str::<FaultMap>(
            r#"{"rows":2,"cols":2,"seed":0,"faulty":[[5,0]]}"#
        )
        .is_err());
    }
}
