//! Nonlocal weight graph and the graph gradient, divergence and Laplacian.
//!
//! Each pixel keeps its `k` most similar pixels inside a search window, with
//! similarity measured by the mean squared difference of zero-padded patches
//! and weight `exp(-d / h²)`. The directed k-NN edges are then merged into a
//! symmetric edge set (max weight on the union), and weights touching a pixel
//! whose total weight exceeds `k` are scaled down so no weighted degree is
//! larger than `k`.
//!
//! Edge vectors are indexed by directed edge: an undirected edge `x ~ y`
//! occupies one slot in the list of `x` and one in the list of `y`.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{ensure_same_shape, invalid, Result};
use crate::grid::Image;

/// Parameters of the similarity graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    /// Odd side of the comparison patch.
    pub patch: usize,
    /// Odd side of the search window.
    pub window: usize,
    /// Neighbours kept per pixel before symmetrization.
    pub k: usize,
    /// Filtering scale in unit intensity.
    pub h: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            patch: 5,
            window: 21,
            k: 10,
            h: 0.15,
        }
    }
}

impl GraphParams {
    pub fn with_window(self, window: usize) -> Self {
        Self { window, ..self }
    }
}

/// Symmetric sparse weight graph over the pixels of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NltvGraph {
    width: usize,
    height: usize,
    k: usize,
    symmetrized: bool,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
    reverse: Vec<usize>,
}

/// One value per directed edge of an [`NltvGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVector(pub Vec<f64>);

impl EdgeVector {
    pub fn dot(&self, other: &EdgeVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl NltvGraph {
    /// Builds a graph from explicit undirected weighted edges, used for hand
    /// instances and tests. Duplicate edges keep the larger weight.
    pub fn from_edges(width: usize, height: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(invalid("empty graph domain"));
        }
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a},{b}) outside {n} pixels")));
            }
            if a == b {
                return Err(invalid("self edges are not allowed"));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(format!("edge weight {w} must be finite and nonnegative")));
            }
            adj[a].push((b as u32, w));
            adj[b].push((a as u32, w));
        }
        Ok(Self::from_adjacency(width, height, 0, true, adj))
    }

    fn from_adjacency(
        width: usize,
        height: usize,
        k: usize,
        symmetrized: bool,
        mut adj: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        for list in adj.iter_mut() {
            list.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
            list.dedup_by_key(|e| e.0);
        }
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for list in &adj {
            for &(y, w) in list {
                neighbors.push(y);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        let mut reverse = vec![0usize; neighbors.len()];
        for x in 0..adj.len() {
            for e in offsets[x]..offsets[x + 1] {
                let y = neighbors[e] as usize;
                let slice = &neighbors[offsets[y]..offsets[y + 1]];
                let pos = slice
                    .binary_search(&(x as u32))
                    .expect("adjacency must be symmetric");
                reverse[e] = offsets[y] + pos;
            }
        }
        let sqrt_weights = weights.iter().map(|w: &f64| w.sqrt()).collect();
        Self {
            width,
            height,
            k,
            symmetrized,
            offsets,
            neighbors,
            weights,
            sqrt_weights,
            reverse,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Number of directed edges (twice the number of undirected edges).
    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbour count requested at construction (0 for hand-built graphs).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    /// `(neighbor, weight)` pairs of pixel `x`, sorted by neighbour index.
    pub fn neighbors(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[x]..self.offsets[x + 1];
        self.neighbors[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&y, &w)| (y as usize, w))
    }

    pub fn weight(&self, x: usize, y: usize) -> f64 {
        let slice = &self.neighbors[self.offsets[x]..self.offsets[x + 1]];
        slice
            .binary_search(&(y as u32))
            .map_or(0.0, |p| self.weights[self.offsets[x] + p])
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m: f64, &w| m.max(w))
    }

    /// Largest `Σ_y w(x, y)` over all pixels.
    pub fn max_weighted_degree(&self) -> f64 {
        (0..self.num_pixels())
            .map(|x| self.weights[self.offsets[x]..self.offsets[x + 1]].iter().sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn check_image(&self, u: &Image) -> Result<()> {
        ensure_same_shape((self.width, self.height), u.shape())
    }

    fn check_edges(&self, p: &EdgeVector) -> Result<()> {
        if p.len() != self.num_edges() {
            return Err(invalid(format!(
                "edge vector has {} entries, graph has {} directed edges",
                p.len(),
                self.num_edges()
            )));
        }
        Ok(())
    }

    pub(crate) fn grad_into(&self, u: &[f64], out: &mut [f64]) {
        for x in 0..self.num_pixels() {
            let ux = u[x];
            for e in self.offsets[x]..self.offsets[x + 1] {
                out[e] = (u[self.neighbors[e] as usize] - ux) * self.sqrt_weights[e];
            }
        }
    }

    pub(crate) fn div_into(&self, p: &[f64], out: &mut [f64]) {
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for e in self.offsets[x]..self.offsets[x + 1] {
                acc += (p[e] - p[self.reverse[e]]) * self.sqrt_weights[e];
            }
            *o = acc;
        }
    }

    pub(crate) fn laplacian_into(&self, u: &[f64], out: &mut [f64]) {
        for (x, o) in out.iter_mut().enumerate() {
            let ux = u[x];
            let mut acc = 0.0;
            for e in self.offsets[x]..self.offsets[x + 1] {
                acc += (u[self.neighbors[e] as usize] - ux) * self.weights[e];
            }
            *o = acc;
        }
    }

    /// Writes the directed edge list: magic `NLTG`, `u32` width and height,
    /// `u64` edge count, then `(u32 src, u32 dst, f64 weight)` per edge, all
    /// little-endian.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"NLTG")?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.num_edges() as u64).to_le_bytes())?;
        for x in 0..self.num_pixels() {
            for e in self.offsets[x]..self.offsets[x + 1] {
                out.write_all(&(x as u32).to_le_bytes())?;
                out.write_all(&self.neighbors[e].to_le_bytes())?;
                out.write_all(&self.weights[e].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_edge_list<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"NLTG" {
            return Err(invalid("not an edge-list file"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b4)?;
        let height = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let n = width * height;
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for _ in 0..count {
            input.read_exact(&mut b4)?;
            let x = u32::from_le_bytes(b4) as usize;
            input.read_exact(&mut b4)?;
            let y = u32::from_le_bytes(b4);
            input.read_exact(&mut b8)?;
            let w = f64::from_le_bytes(b8);
            if x >= n || y as usize >= n {
                return Err(invalid("edge index out of range"));
            }
            adj[x].push((y, w));
        }
        // Every directed edge must have its reverse with the same weight.
        for (x, list) in adj.iter().enumerate() {
            for &(y, w) in list {
                let back = adj[y as usize].iter().find(|e| e.0 as usize == x);
                if back.map(|e| e.1) != Some(w) {
                    return Err(invalid("edge list is not symmetric"));
                }
            }
        }
        Ok(Self::from_adjacency(width, height, 0, true, adj))
    }
}

/// Directed k-NN selection before symmetrization: for each pixel, its `k`
/// chosen neighbours with weight `exp(-d / h²)`, nearest first.
pub fn knn_candidates(u: &Image, params: &GraphParams) -> Result<Vec<Vec<(usize, f64)>>> {
    let k = params.k;
    let inv_h2 = 1.0 / (params.h * params.h);
    let best = knn_distances(u, params)?;
    Ok(best
        .chunks(k)
        .map(|c| c.iter().map(|&(d, y)| (y as usize, (-d * inv_h2).exp().min(1.0))).collect())
        .collect())
}

fn knn_distances(u: &Image, params: &GraphParams) -> Result<Vec<(f64, u32)>> {
    let GraphParams { patch, window, k, h } = *params;
    if patch % 2 == 0 || window % 2 == 0 {
        return Err(invalid("patch and window sizes must be odd"));
    }
    if patch > window {
        return Err(invalid("patch must not exceed window"));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if !(h > 0.0) {
        return Err(invalid("filtering scale h must be positive"));
    }
    let (w, ht) = u.shape();
    let half = window / 2;
    // The corner pixel sees the smallest part of its window.
    let population = (half + 1).min(ht) * (half + 1).min(w) - 1;
    if k > population {
        return Err(invalid(format!(
            "k = {k} exceeds the smallest window population {population}"
        )));
    }

    let n = w * ht;
    let r = (patch / 2) as isize;
    let pw = w + 2 * r as usize;
    let ph = ht + 2 * r as usize;
    let zero_ext = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= ht as isize || j >= w as isize {
            0.0
        } else {
            u.get(i as usize, j as usize)
        }
    };
    let inv_area = 1.0 / (patch * patch) as f64;

    // best[x*k..] holds (distance, neighbour) sorted ascending.
    let mut best: Vec<(f64, u32)> = vec![(f64::INFINITY, u32::MAX); n * k];
    let mut sq = vec![0.0f64; pw * ph];
    let mut hsum = vec![0.0f64; w * ph];
    let mut dist = vec![0.0f64; n];

    for di in -(half as isize)..=(half as isize) {
        for dj in -(half as isize)..=(half as isize) {
            if di == 0 && dj == 0 {
                continue;
            }
            // Squared differences on the padded domain, box-summed separably
            // without subtraction so equal patches give exactly zero.
            for pi in 0..ph {
                let i = pi as isize - r;
                for pj in 0..pw {
                    let j = pj as isize - r;
                    let d = zero_ext(i, j) - zero_ext(i + di, j + dj);
                    sq[pi * pw + pj] = d * d;
                }
            }
            for pi in 0..ph {
                let src = &sq[pi * pw..(pi + 1) * pw];
                for j in 0..w {
                    hsum[pi * w + j] = src[j..j + patch].iter().sum();
                }
            }
            dist.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
                for (j, d) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..patch {
                        acc += hsum[(i + a) * w + j];
                    }
                    *d = acc * inv_area;
                }
            });
            best.par_chunks_mut(w * k).enumerate().for_each(|(i, rowbest)| {
                let yi = i as isize + di;
                if yi < 0 || yi >= ht as isize {
                    return;
                }
                for j in 0..w {
                    let yj = j as isize + dj;
                    if yj < 0 || yj >= w as isize {
                        continue;
                    }
                    let d = dist[i * w + j];
                    let slot = &mut rowbest[j * k..(j + 1) * k];
                    if d < slot[k - 1].0 {
                        let y = (yi as usize * w + yj as usize) as u32;
                        let mut p = k - 1;
                        while p > 0 && slot[p - 1].0 > d {
                            slot[p] = slot[p - 1];
                            p -= 1;
                        }
                        slot[p] = (d, y);
                    }
                }
            });
        }
    }

    Ok(best)
}

/// Builds the nonlocal similarity graph of `u`.
pub fn build_graph(u: &Image, params: &GraphParams) -> Result<NltvGraph> {
    let (w, ht) = u.shape();
    let n = w * ht;
    let k = params.k;
    let best = knn_distances(u, params)?;
    let inv_h2 = 1.0 / (params.h * params.h);
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::with_capacity(2 * k); n];
    for x in 0..n {
        for &(d, y) in &best[x * k..(x + 1) * k] {
            debug_assert!(y != u32::MAX);
            let wgt = (-d * inv_h2).exp().min(1.0);
            adj[x].push((y, wgt));
            adj[y as usize].push((x as u32, wgt));
        }
    }
    let mut graph = NltvGraph::from_adjacency(w, ht, k, true, adj);
    graph.cap_weighted_degree(k as f64);
    Ok(graph)
}

impl NltvGraph {
    /// Scales `w(x,y)` by `min(1, cap/D(x), cap/D(y))`, keeping symmetry.
    fn cap_weighted_degree(&mut self, cap: f64) {
        let n = self.num_pixels();
        let scale: Vec<f64> = (0..n)
            .map(|x| {
                let d: f64 = self.weights[self.offsets[x]..self.offsets[x + 1]].iter().sum();
                if d > cap {
                    cap / d
                } else {
                    1.0
                }
            })
            .collect();
        for x in 0..n {
            for e in self.offsets[x]..self.offsets[x + 1] {
                let y = self.neighbors[e] as usize;
                self.weights[e] *= scale[x].min(scale[y]);
                self.sqrt_weights[e] = self.weights[e].sqrt();
            }
        }
    }
}

/// Nonlocal gradient: `(u(y) - u(x)) * sqrt(w(x,y))` per directed edge.
pub fn nl_grad(u: &Image, g: &NltvGraph) -> Result<EdgeVector> {
    g.check_image(u)?;
    let mut out = vec![0.0; g.num_edges()];
    g.grad_into(u.data(), &mut out);
    Ok(EdgeVector(out))
}

/// Nonlocal divergence `Σ_y (p(x,y) - p(y,x)) sqrt(w(x,y))`, the negative adjoint of [`nl_grad`].
pub fn nl_div(p: &EdgeVector, g: &NltvGraph) -> Result<Image> {
    g.check_edges(p)?;
    let mut out = vec![0.0; g.num_pixels()];
    g.div_into(&p.0, &mut out);
    Image::new(g.width, g.height, out)
}

/// Graph Laplacian `Σ_y (u(y) - u(x)) w(x,y)`, equal to `½ div_w(∇_w u)`.
pub fn nl_laplacian(u: &Image, g: &NltvGraph) -> Result<Image> {
    g.check_image(u)?;
    let mut out = vec![0.0; g.num_pixels()];
    g.laplacian_into(u.data(), &mut out);
    Image::new(g.width, g.height, out)
}

/// Isotropic nonlocal TV `Σ_x sqrt(Σ_y (u(x)-u(y))² w(x,y))`.
pub fn nltv_norm(u: &Image, g: &NltvGraph) -> Result<f64> {
    g.check_image(u)?;
    let d = u.data();
    Ok((0..g.num_pixels())
        .map(|x| {
            g.neighbors(x)
                .map(|(y, w)| {
                    let t = d[x] - d[y];
                    t * t * w
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}
