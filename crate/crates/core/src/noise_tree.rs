//! Binary scenario tree standing in for the Brownian filtration.
//!
//! Node `(k, j)` is the `j`-th node of level `k` (`0 <= j < 2^k`). Its
//! children are `(k+1, 2j)` (increment `+√Δt`) and `(k+1, 2j+1)`
//! (increment `−√Δt`). Processes are stored level-major: node `(k, j)`
//! lives at global index `2^k − 1 + j`. All sweeps visit nodes in this
//! order, so runs are bit-reproducible.

use thiserror::Error;

pub const MAX_DEPTH: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree depth must be in 1..={MAX_DEPTH}, got {0}")]
    Depth(usize),
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("node ({0}, {1}) is a leaf and has no children")]
    Leaf(usize, usize),
    #[error("process has depth {got}, tree has depth {expected}")]
    Mismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioTree {
    depth: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
}

impl ScenarioTree {
    pub fn build(depth: usize, horizon: f64) -> Result<Self, TreeError> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(TreeError::Depth(depth));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(TreeError::Horizon(horizon));
        }
        let dt = horizon / depth as f64;
        Ok(ScenarioTree { depth, horizon, dt, sqrt_dt: dt.sqrt() })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn time(&self, level: usize) -> f64 {
        if level == self.depth {
            self.horizon
        } else {
            level as f64 * self.dt
        }
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    pub fn level_size(&self, level: usize) -> usize {
        1usize << level
    }

    /// Global index of node `(level, path)`.
    #[inline]
    pub fn index(&self, level: usize, path: usize) -> usize {
        (1usize << level) - 1 + path
    }

    /// Probability of each node on `level`.
    pub fn probability(&self, level: usize) -> f64 {
        0.5f64.powi(level as i32)
    }

    /// Increment `ΔW` on the branch that leads into `(level, path)`.
    #[inline]
    pub fn increment(&self, path: usize) -> f64 {
        if path & 1 == 0 {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    pub fn children(&self, level: usize, path: usize) -> Result<[(usize, usize); 2], TreeError> {
        if level >= self.depth {
            return Err(TreeError::Leaf(level, path));
        }
        Ok([(level + 1, 2 * path), (level + 1, 2 * path + 1)])
    }

    pub fn parent(&self, level: usize, path: usize) -> Option<(usize, usize)> {
        (level > 0).then(|| (level - 1, path >> 1))
    }

    /// Path index at `level` of the ancestor of `leaf`.
    #[inline]
    pub fn ancestor(&self, leaf: usize, level: usize) -> usize {
        leaf >> (self.depth - level)
    }

    /// `W` at node `(level, path)`: the sum of increments from the root.
    pub fn brownian(&self, level: usize, path: usize) -> f64 {
        let downs = (path & ((1usize << level) - 1)).count_ones() as i64;
        let ups = level as i64 - downs;
        (ups - downs) as f64 * self.sqrt_dt
    }

    pub fn expectation(&self, proc: &TreeProcess, level: usize) -> Result<Vec<f64>, TreeError> {
        self.check(proc)?;
        Ok(proc.level_mean(level))
    }

    /// `E[proc_{level+1} | node (level, path)]`.
    pub fn conditional_expectation(
        &self,
        proc: &TreeProcess,
        level: usize,
        path: usize,
    ) -> Result<Vec<f64>, TreeError> {
        self.check(proc)?;
        let [up, dn] = self.children(level, path)?;
        Ok(proc
            .get(up.0, up.1)
            .iter()
            .zip(proc.get(dn.0, dn.1))
            .map(|(a, b)| 0.5 * (a + b))
            .collect())
    }

    /// Splits the child values `ξ` into `E[ξ | node]` and the diffusion
    /// coefficient `z` with `ξ = mean + z·ΔW` on both branches.
    pub fn martingale_representation(&self, up: &[f64], dn: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; up.len()];
        let mut z = vec![0.0; up.len()];
        self.martingale_representation_into(up, dn, &mut mean, &mut z);
        (mean, z)
    }

    #[inline]
    pub fn martingale_representation_into(
        &self,
        up: &[f64],
        dn: &[f64],
        mean: &mut [f64],
        z: &mut [f64],
    ) {
        let scale = 0.5 / self.sqrt_dt;
        for i in 0..up.len() {
            mean[i] = 0.5 * (up[i] + dn[i]);
            z[i] = (up[i] - dn[i]) * scale;
        }
    }

    fn check(&self, proc: &TreeProcess) -> Result<(), TreeError> {
        if proc.depth != self.depth {
            return Err(TreeError::Mismatch { expected: self.depth, got: proc.depth });
        }
        Ok(())
    }
}

/// A `dim`-vector at every node of a tree of the given depth.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeProcess {
    dim: usize,
    depth: usize,
    values: Vec<f64>,
}

impl TreeProcess {
    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        TreeProcess { dim, depth: tree.depth, values: vec![0.0; tree.node_count() * dim] }
    }

    pub fn from_fn(
        tree: &ScenarioTree,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut p = TreeProcess::zeros(tree, dim);
        for level in 0..=tree.depth {
            for path in 0..tree.level_size(level) {
                let v = f(level, path);
                assert_eq!(v.len(), dim, "from_fn: wrong value length");
                p.get_mut(level, path).copy_from_slice(&v);
            }
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn get(&self, level: usize, path: usize) -> &[f64] {
        let i = ((1usize << level) - 1 + path) * self.dim;
        &self.values[i..i + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, level: usize, path: usize) -> &mut [f64] {
        let i = ((1usize << level) - 1 + path) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    /// All values of one level, `path`-major.
    pub fn level(&self, level: usize) -> &[f64] {
        let start = ((1usize << level) - 1) * self.dim;
        &self.values[start..start + (self.dim << level)]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let start = ((1usize << level) - 1) * self.dim;
        let d = self.dim;
        &mut self.values[start..start + (d << level)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Level average by repeated pairwise averaging, which is exact for
    /// dyadic data and otherwise well conditioned.
    pub fn level_mean(&self, level: usize) -> Vec<f64> {
        let d = self.dim;
        let mut buf = self.level(level).to_vec();
        let mut len = 1usize << level;
        while len > 1 {
            len /= 2;
            for j in 0..len {
                for c in 0..d {
                    buf[j * d + c] = 0.5 * (buf[2 * j * d + c] + buf[(2 * j + 1) * d + c]);
                }
            }
        }
        buf.truncate(d);
        buf
    }

    /// Values along the path from the root to `leaf`.
    pub fn along_path(&self, leaf: usize) -> Vec<&[f64]> {
        (0..=self.depth)
            .map(|level| self.get(level, leaf >> (self.depth - level)))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &TreeProcess) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "process shape mismatch");
        crate::linalg::sup_diff(&self.values, &other.values)
    }

    /// Debug dump with header `level,path,v0,v1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,path");
        for c in 0..self.dim {
            out.push_str(&format!(",v{c}"));
        }
        out.push('\n');
        for level in 0..=self.depth {
            for path in 0..(1usize << level) {
                out.push_str(&format!("{level},{path}"));
                for x in self.get(level, path) {
                    out.push_str(&format!(",{x}"));
                }
                out.push('\n');
            }
        }
        out
    }
}
