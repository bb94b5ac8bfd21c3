//! Exact W1 between uniform empirical measures by the primal network simplex
//! on the transportation problem.
//!
//! Masses are scaled by `lcm(n_a, n_b)` so every supply and demand is an
//! integer. The starting basis joins every node to an artificial root with
//! cost `M = 2 max c + 1`; any positive artificial flow pair could be rerouted
//! through the direct arc at a saving of `2M - c > 0`, so an optimum of the
//! extended problem carries no artificial flow. Pivots use block pricing and
//! the strongly feasible leaving-arc rule, which excludes cycling under
//! degeneracy.

use crate::ensemble::Ensemble;
use crate::error::{check_dim, CfmError, Result};
use crate::linalg::dist;

pub const W1_SIZE_CAP: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `(i, j, mass)` with positive mass.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self, n_a: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_a];
        for &(i, _, m) in &self.flows {
            out[i] += m;
        }
        out
    }

    pub fn col_sums(&self, n_b: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_b];
        for &(_, j, m) in &self.flows {
            out[j] += m;
        }
        out
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// Nodes: sources 0..na, sinks na..na+nb, root na+nb.
// Arcs: real i -> na+j at index i*nb + j, then one artificial arc per node
// (source -> root, root -> sink) at index na*nb + node.
struct Simplex {
    na: usize,
    nb: usize,
    root: usize,
    cost: Vec<f64>,
    art_cost: f64,
    flow: Vec<u64>,
    y: Vec<f64>,
    parent: Vec<usize>,
    arc: Vec<usize>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    slot: Vec<usize>,
    stack: Vec<usize>,
    path: Vec<usize>,
}

impl Simplex {
    fn real_arcs(&self) -> usize {
        self.na * self.nb
    }

    fn tail(&self, a: usize) -> usize {
        if a < self.real_arcs() {
            a / self.nb
        } else {
            let v = a - self.real_arcs();
            if v < self.na {
                v
            } else {
                self.root
            }
        }
    }

    fn detach(&mut self, v: usize) {
        let p = self.parent[v];
        let s = self.slot[v];
        self.children[p].swap_remove(s);
        if let Some(&moved) = self.children[p].get(s) {
            self.slot[moved] = s;
        }
    }

    fn attach(&mut self, v: usize, p: usize, a: usize) {
        self.parent[v] = p;
        self.arc[v] = a;
        self.slot[v] = self.children[p].len();
        self.children[p].push(v);
    }

    fn apex(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b];
        }
        while a != b {
            a = self.parent[a];
            b = self.parent[b];
        }
        a
    }

    /// Brings real arc `e = (i -> j)` with negative reduced cost `rc` into the basis.
    fn pivot(&mut self, e: usize, rc: f64) {
        let i = e / self.nb;
        let j = self.na + e % self.nb;
        let w = self.apex(i, j);

        // The cycle runs w ~> i -> j ~> w. Among blocking arcs keep the last
        // one in that order: nearest i on the i side (strict), then any tie on
        // the j side, nearest w.
        let mut delta = u64::MAX;
        let mut leave = usize::MAX;
        let mut on_i_side = true;
        let mut v = i;
        while v != w {
            let a = self.arc[v];
            if self.tail(a) == v && self.flow[a] < delta {
                delta = self.flow[a];
                leave = v;
            }
            v = self.parent[v];
        }
        let mut v = j;
        while v != w {
            let a = self.arc[v];
            if self.tail(a) != v && self.flow[a] <= delta {
                delta = self.flow[a];
                leave = v;
                on_i_side = false;
            }
            v = self.parent[v];
        }
        debug_assert!(leave != usize::MAX, "costs are bounded, some arc must block");

        if delta > 0 {
            self.flow[e] += delta;
            for (start, sign_up) in [(i, false), (j, true)] {
                let mut v = start;
                while v != w {
                    let a = self.arc[v];
                    // arc oriented upward gains flow on the j side, loses it on the i side
                    if (self.tail(a) == v) == sign_up {
                        self.flow[a] += delta;
                    } else {
                        self.flow[a] -= delta;
                    }
                    v = self.parent[v];
                }
            }
        }

        // Re-hang the subtree below `leave` from the entering arc.
        let (u_in, v_in) = if on_i_side { (i, j) } else { (j, i) };
        self.path.clear();
        let mut v = u_in;
        loop {
            self.path.push(v);
            if v == leave {
                break;
            }
            v = self.parent[v];
        }
        let old_arcs: Vec<usize> = self.path.iter().map(|&v| self.arc[v]).collect();
        for t in 0..self.path.len() {
            let v = self.path[t];
            self.detach(v);
        }
        let first = self.path[0];
        self.attach(first, v_in, e);
        for t in 1..self.path.len() {
            let (child, parent) = (self.path[t], self.path[t - 1]);
            self.attach(child, parent, old_arcs[t - 1]);
        }

        // Shift the subtree's potentials so the entering arc is tight.
        let shift = if u_in == j { rc } else { -rc };
        self.stack.clear();
        self.stack.push(first);
        while let Some(v) = self.stack.pop() {
            self.depth[v] = self.depth[self.parent[v]] + 1;
            self.y[v] += shift;
            for k in 0..self.children[v].len() {
                let c = self.children[v][k];
                self.stack.push(c);
            }
        }
    }

    fn solve(&mut self) {
        let m = self.real_arcs();
        let block = ((m as f64).sqrt().ceil() as usize).max(10).min(m);
        let scale = self.art_cost;
        let eps = 1e-13 * scale;
        let mut next = 0;
        let mut scanned_clean = 0;
        while scanned_clean < m {
            let mut best = -eps;
            let mut best_arc = usize::MAX;
            for _ in 0..block {
                let a = next;
                next = if next + 1 == m { 0 } else { next + 1 };
                let rc = self.cost[a] + self.y[a / self.nb] - self.y[self.na + a % self.nb];
                if rc < best {
                    best = rc;
                    best_arc = a;
                }
            }
            if best_arc == usize::MAX {
                scanned_clean += block;
            } else {
                scanned_clean = 0;
                self.pivot(best_arc, best);
            }
        }
    }
}

/// Exact W1 with an optimal plan.
pub fn w1_exact(a: &Ensemble, b: &Ensemble) -> Result<(f64, TransportPlan)> {
    if a.is_empty() || b.is_empty() {
        return Err(CfmError::EmptyEnsemble);
    }
    check_dim(a.dim(), b.dim(), "second ensemble")?;
    let (na, nb) = (a.len(), b.len());
    if na.saturating_mul(nb) > W1_SIZE_CAP {
        return Err(CfmError::W1SizeCap {
            n_a: na,
            n_b: nb,
            cap: W1_SIZE_CAP,
        });
    }
    let total = na as u64 / gcd(na as u64, nb as u64) * nb as u64;
    let mut cost = Vec::with_capacity(na * nb);
    for x in a.iter() {
        for y in b.iter() {
            cost.push(dist(x, y));
        }
    }
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let art_cost = 2.0 * max_cost + 1.0;
    let nodes = na + nb + 1;
    let root = na + nb;
    let real = na * nb;
    let mut s = Simplex {
        na,
        nb,
        root,
        cost,
        art_cost,
        flow: vec![0; real + na + nb],
        y: vec![0.0; nodes],
        parent: vec![root; nodes],
        arc: vec![usize::MAX; nodes],
        depth: vec![1; nodes],
        children: vec![Vec::new(); nodes],
        slot: vec![0; nodes],
        stack: Vec::new(),
        path: Vec::new(),
    };
    s.depth[root] = 0;
    for v in 0..root {
        s.attach(v, root, real + v);
        if v < na {
            s.flow[real + v] = total / na as u64;
            s.y[v] = -art_cost;
        } else {
            s.flow[real + v] = total / nb as u64;
            s.y[v] = art_cost;
        }
    }
    s.solve();
    if s.flow[real..].iter().any(|&f| f != 0) {
        return Err(CfmError::BoundViolation("transport solver ended with artificial flow".into()));
    }

    let unit = 1.0 / total as f64;
    let mut flows = Vec::new();
    let mut units_cost = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let f = s.flow[i * nb + j];
            if f > 0 {
                flows.push((i, j, f as f64 * unit));
                units_cost += f as f64 * s.cost[i * nb + j];
            }
        }
    }
    let cost = units_cost * unit;
    Ok((cost, TransportPlan { flows, cost }))
}
