//! Successive shortest augmenting paths with node potentials on the dense
//! bipartite graph (Dijkstra on reduced costs, stopped at the first reachable
//! sink with remaining demand). Masses are scaled by `lcm(n_a, n_b)` so every
//! supply and demand is an integer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::ensemble::Ensemble;
use crate::linalg::dist;

pub(crate) fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties on node index for determinism
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NONE: usize = usize::MAX;

struct Solver {
    na: usize,
    nb: usize,
    cost: Vec<f64>,
    flow: Vec<u64>,
    /// Sources with positive flow into each sink (backward residual arcs).
    into: Vec<Vec<usize>>,
    supply: Vec<u64>,
    demand: Vec<u64>,
    pot: Vec<f64>,
    dist: Vec<f64>,
    pred: Vec<usize>,
    done: Vec<bool>,
    touched: Vec<usize>,
}

impl Solver {
    // node ids: sources 0..na, sinks na..na+nb

    fn shortest_path(&mut self) -> Option<(usize, f64)> {
        let na = self.na;
        for &v in &self.touched {
            self.dist[v] = f64::INFINITY;
            self.pred[v] = NONE;
            self.done[v] = false;
        }
        self.touched.clear();
        let mut heap = BinaryHeap::new();
        for i in 0..na {
            if self.supply[i] > 0 {
                self.dist[i] = 0.0;
                self.touched.push(i);
                heap.push(Entry { dist: 0.0, node: i });
            }
        }
        while let Some(Entry { dist, node }) = heap.pop() {
            if self.done[node] || dist > self.dist[node] {
                continue;
            }
            self.done[node] = true;
            if node < na {
                let i = node;
                let pi = self.pot[i];
                let row = &self.cost[i * self.nb..(i + 1) * self.nb];
                let (pot_snk, dist_snk) = (&self.pot[na..], &mut self.dist[na..]);
                // settled sinks never improve: pops are monotone and reduced costs are clamped at 0
                for (j, ((&c, &pj), dj)) in row.iter().zip(pot_snk).zip(dist_snk.iter_mut()).enumerate() {
                    let nd = dist + (c + pi - pj).max(0.0);
                    if nd < *dj {
                        if *dj == f64::INFINITY {
                            self.touched.push(na + j);
                        }
                        *dj = nd;
                        self.pred[na + j] = i;
                        heap.push(Entry { dist: nd, node: na + j });
                    }
                }
            } else {
                let j = node - na;
                if self.demand[j] > 0 {
                    return Some((j, dist));
                }
                for &i in &self.into[j] {
                    if self.done[i] {
                        continue;
                    }
                    let rc = (self.pot[node] - self.pot[i] - self.cost[i * self.nb + j]).max(0.0);
                    let nd = dist + rc;
                    if nd < self.dist[i] {
                        if self.dist[i] == f64::INFINITY {
                            self.touched.push(i);
                        }
                        self.dist[i] = nd;
                        self.pred[i] = node;
                        heap.push(Entry { dist: nd, node: i });
                    }
                }
            }
        }
        None
    }

    fn augment(&mut self, sink: usize) {
        let na = self.na;
        // bottleneck along the path
        let mut amount = self.demand[sink];
        let mut v = na + sink;
        loop {
            let i = self.pred[v];
            let up = self.pred[i];
            if up == NONE {
                amount = amount.min(self.supply[i]);
                break;
            }
            amount = amount.min(self.flow[i * self.nb + (up - na)]);
            v = up;
        }
        let mut v = na + sink;
        loop {
            let i = self.pred[v];
            let j = v - na;
            let idx = i * self.nb + j;
            if self.flow[idx] == 0 {
                self.into[j].push(i);
            }
            self.flow[idx] += amount;
            let up = self.pred[i];
            if up == NONE {
                self.supply[i] -= amount;
                break;
            }
            let jb = up - na;
            let back = i * self.nb + jb;
            self.flow[back] -= amount;
            if self.flow[back] == 0 {
                let pos = self.into[jb].iter().position(|&s| s == i).expect("flow list entry");
                self.into[jb].swap_remove(pos);
            }
            v = up;
        }
        self.demand[sink] -= amount;
    }
}

/// Exact W1 by successive shortest paths. Quadratic memory and roughly
/// `n_a n_b lcm(n_a, n_b)` time; a slow but independent cross-check.
pub fn w1_ssp(a: &Ensemble, b: &Ensemble) -> f64 {
    assert!(!a.is_empty() && !b.is_empty() && a.dim() == b.dim());
    let (na, nb) = (a.len(), b.len());
    let total = na as u64 / gcd(na as u64, nb as u64) * nb as u64;
    let mut cost = Vec::with_capacity(na * nb);
    for x in a.iter() {
        for y in b.iter() {
            cost.push(dist(x, y));
        }
    }
    let v = na + nb;
    let mut s = Solver {
        na,
        nb,
        cost,
        flow: vec![0; na * nb],
        into: vec![Vec::new(); nb],
        supply: vec![total / na as u64; na],
        demand: vec![total / nb as u64; nb],
        pot: vec![0.0; v],
        dist: vec![f64::INFINITY; v],
        pred: vec![NONE; v],
        done: vec![false; v],
        touched: Vec::new(),
    };
    while let Some((sink, reach)) = s.shortest_path() {
        for node in 0..v {
            let dn = s.dist[node];
            s.pot[node] += if dn < reach { dn } else { reach };
        }
        s.augment(sink);
    }
    debug_assert!(s.demand.iter().all(|&d| d == 0));

    let mut units_cost = 0.0;
    for (f, c) in s.flow.iter().zip(&s.cost) {
        units_cost += *f as f64 * c;
    }
    units_cost / total as f64
}
