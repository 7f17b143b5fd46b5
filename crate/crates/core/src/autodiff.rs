//! Scalar reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every elementary operation appends one node holding its primal value and
//! the ids of its parents. Parents always precede children, so the node order
//! is a topological order and a reverse sweep over the slice `0..=output`
//! visits every node after all of its consumers.
//!
//! [`Tape::backward`] returns plain `f64` gradients. [`Tape::backward_graph`]
//! records the reverse sweep itself as new nodes on the same tape, which is
//! what a gradient penalty needs: the returned gradient `Var`s can be fed
//! into further ops and differentiated again.
//!
//! ```
//! use logan_core::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.lift(3.0);
//! let y = tape.square(x);
//! let dy = tape.backward_graph(y, &[x]).unwrap();
//! let d2y = tape.backward(dy[0], &[x]).unwrap();
//! assert_eq!(dy[0].value(), 6.0);
//! assert_eq!(d2y[0], 2.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("domain error in `{op}`: argument {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("variable {id} does not belong to this tape")]
    ForeignVar { id: usize },
    #[error("variable {id} is not live on the tape (length {len})")]
    StaleVar { id: usize, len: usize },
    #[error("mark was not taken from this tape or lies beyond its end")]
    BadMark,
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Handle to a node on a [`Tape`], carrying a copy of the node's value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Var {
    tape: u64,
    id: usize,
    value: f64,
}

impl Var {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Position on a tape that [`Tape::rewind`] can truncate back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mark {
    tape: u64,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    /// `c * a` for a constant `c`; emitted by the recorded reverse sweep.
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Max(usize, usize),
    Sigmoid(usize),
    Logit(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
}

/// Operation record. Single-threaded; move it between threads, don't share it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Lower and upper clamp applied to probabilities before `ln` or `logit`.
pub const PROB_EPS: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn with_capacity(cap: usize) -> Self {
        let mut t = Self::new();
        t.nodes.reserve(cap);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            id,
            value,
        }
    }

    fn node_var(&self, id: usize) -> Var {
        Var {
            tape: self.id,
            id,
            value: self.nodes[id].value,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(AdError::ForeignVar { id: v.id });
        }
        if v.id >= self.nodes.len() {
            return Err(AdError::StaleVar {
                id: v.id,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn lift(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn lift_all(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.lift(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.id, b.id), a.value + b.value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.id, b.id), a.value - b.value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.id, b.id), a.value * b.value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if b.value == 0.0 {
            return Err(AdError::Domain {
                op: "div",
                value: b.value,
            });
        }
        Ok(self.push(Op::Div(a.id, b.id), a.value / b.value))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a.id), -a.value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a.id, c), c * a.value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.id), a.value.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if !(a.value > 0.0) {
            return Err(AdError::Domain {
                op: "ln",
                value: a.value,
            });
        }
        Ok(self.push(Op::Ln(a.id), a.value.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if !(a.value > 0.0) {
            return Err(AdError::Domain {
                op: "sqrt",
                value: a.value,
            });
        }
        Ok(self.push(Op::Sqrt(a.id), a.value.sqrt()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a.id), a.value * a.value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a.id), a.value.abs())
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Max(a.id, b.id), a.value.max(b.value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a.id), sigmoid(a.value))
    }

    /// Inverse of [`Tape::sigmoid`]. The argument must lie strictly inside
    /// `(0, 1)`; use [`Tape::clamp_prob`] first when that is not guaranteed.
    pub fn logit(&mut self, a: Var) -> Result<Var> {
        if !(a.value > 0.0 && a.value < 1.0) {
            return Err(AdError::Domain {
                op: "logit",
                value: a.value,
            });
        }
        Ok(self.push(Op::Logit(a.id), (a.value / (1.0 - a.value)).ln()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a.id), a.value.tanh())
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.push(Op::LeakyRelu(a.id, slope), leaky(a.value, slope))
    }

    /// Clamps a probability into `[PROB_EPS, 1 - PROB_EPS]`.
    ///
    /// Inside the interval this is the identity (same node, full gradient);
    /// outside it returns a fresh constant, so the gradient is zero there.
    pub fn clamp_prob(&mut self, p: Var) -> Var {
        if p.value < PROB_EPS {
            self.lift(PROB_EPS)
        } else if p.value > 1.0 - PROB_EPS {
            self.lift(1.0 - PROB_EPS)
        } else {
            p
        }
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut it = xs.iter();
        match it.next() {
            None => self.lift(0.0),
            Some(&first) => it.fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let s = self.sum(xs);
        let n = xs.len().max(1) as f64;
        self.scale(s, 1.0 / n)
    }

    /// `sum_i a_i * b_i`, optionally starting from `init`.
    pub fn dot(&mut self, init: Option<Var>, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = init;
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = Some(match acc {
                None => p,
                Some(s) => self.add(s, p),
            });
        }
        acc.unwrap_or_else(|| self.lift(0.0))
    }

    pub fn mark(&self) -> Mark {
        Mark {
            tape: self.id,
            len: self.nodes.len(),
        }
    }

    /// Truncates the tape back to `mark`. Vars created after the mark become stale.
    pub fn rewind(&mut self, mark: Mark) -> Result<()> {
        if mark.tape != self.id || mark.len > self.nodes.len() {
            return Err(AdError::BadMark);
        }
        self.nodes.truncate(mark.len);
        Ok(())
    }

    /// Recomputes every node from the leaf values, in tape order.
    pub fn replay(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value,
                Op::Add(a, b) => vals[a] + vals[b],
                Op::Sub(a, b) => vals[a] - vals[b],
                Op::Mul(a, b) => vals[a] * vals[b],
                Op::Div(a, b) => vals[a] / vals[b],
                Op::Neg(a) => -vals[a],
                Op::Scale(a, c) => c * vals[a],
                Op::Exp(a) => vals[a].exp(),
                Op::Ln(a) => vals[a].ln(),
                Op::Sqrt(a) => vals[a].sqrt(),
                Op::Square(a) => vals[a] * vals[a],
                Op::Abs(a) => vals[a].abs(),
                Op::Max(a, b) => vals[a].max(vals[b]),
                Op::Sigmoid(a) => sigmoid(vals[a]),
                Op::Logit(a) => (vals[a] / (1.0 - vals[a])).ln(),
                Op::Tanh(a) => vals[a].tanh(),
                Op::LeakyRelu(a, s) => leaky(vals[a], s),
            };
            vals.push(v);
        }
        vals
    }

    /// Stored primal values, in tape order.
    pub fn values(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.value).collect()
    }

    /// Gradients of scalar `output` with respect to each of `inputs`.
    pub fn backward(&self, output: Var, inputs: &[Var]) -> Result<Vec<f64>> {
        self.check(output)?;
        for &x in inputs {
            self.check(x)?;
        }
        let mut adj = vec![0.0f64; output.id + 1];
        adj[output.id] = 1.0;
        for i in (0..=output.id).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let y = self.nodes[i].value;
            let val = |j: usize| self.nodes[j].value;
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a] += g * val(b);
                    adj[b] += g * val(a);
                }
                Op::Div(a, b) => {
                    adj[a] += g / val(b);
                    adj[b] -= g * y / val(b);
                }
                Op::Neg(a) => adj[a] -= g,
                Op::Scale(a, c) => adj[a] += g * c,
                Op::Exp(a) => adj[a] += g * y,
                Op::Ln(a) => adj[a] += g / val(a),
                Op::Sqrt(a) => adj[a] += g * 0.5 / y,
                Op::Square(a) => adj[a] += g * 2.0 * val(a),
                Op::Abs(a) => adj[a] += g * abs_slope(val(a)),
                Op::Max(a, b) => {
                    if val(a) >= val(b) {
                        adj[a] += g
                    } else {
                        adj[b] += g
                    }
                }
                Op::Sigmoid(a) => adj[a] += g * y * (1.0 - y),
                Op::Logit(a) => {
                    let p = val(a);
                    adj[a] += g / (p * (1.0 - p));
                }
                Op::Tanh(a) => adj[a] += g * (1.0 - y * y),
                Op::LeakyRelu(a, s) => adj[a] += g * leaky_slope(val(a), s),
            }
        }
        Ok(inputs
            .iter()
            .map(|x| adj.get(x.id).copied().unwrap_or(0.0))
            .collect())
    }

    /// Like [`Tape::backward`], but the reverse sweep is itself recorded so the
    /// returned gradients are differentiable `Var`s.
    ///
    /// Leaky-ReLU, abs and max contribute piecewise-constant local
    /// derivatives, so their second derivatives are zero.
    pub fn backward_graph(&mut self, output: Var, inputs: &[Var]) -> Result<Vec<Var>> {
        self.check(output)?;
        for &x in inputs {
            self.check(x)?;
        }
        let mut adj: Vec<Option<Var>> = vec![None; output.id + 1];
        adj[output.id] = Some(self.lift(1.0));
        for i in (0..=output.id).rev() {
            let Some(g) = adj[i] else { continue };
            let node = self.nodes[i];
            let y = self.node_var(i);
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, b, ng);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.node_var(a), self.node_var(b));
                    let ga = self.mul(g, vb);
                    self.accumulate(&mut adj, a, ga);
                    let gb = self.mul(g, va);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Div(a, b) => {
                    let vb = self.node_var(b);
                    let ga = self.div(g, vb)?;
                    self.accumulate(&mut adj, a, ga);
                    let t = self.mul(ga, y);
                    let gb = self.neg(t);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, y);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let va = self.node_var(a);
                    let ga = self.div(g, va)?;
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let t = self.div(g, y)?;
                    let ga = self.scale(t, 0.5);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Square(a) => {
                    let va = self.node_var(a);
                    let t = self.mul(g, va);
                    let ga = self.scale(t, 2.0);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Abs(a) => {
                    let c = abs_slope(self.nodes[a].value);
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Max(a, b) => {
                    let target = if self.nodes[a].value >= self.nodes[b].value {
                        a
                    } else {
                        b
                    };
                    self.accumulate(&mut adj, target, g);
                }
                Op::Sigmoid(a) => {
                    // y (1 - y)
                    let one = self.lift(1.0);
                    let omy = self.sub(one, y);
                    let d = self.mul(y, omy);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Logit(a) => {
                    let va = self.node_var(a);
                    let one = self.lift(1.0);
                    let om = self.sub(one, va);
                    let den = self.mul(va, om);
                    let ga = self.div(g, den)?;
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let one = self.lift(1.0);
                    let y2 = self.square(y);
                    let d = self.sub(one, y2);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::LeakyRelu(a, s) => {
                    let c = leaky_slope(self.nodes[a].value, s);
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }
        Ok(inputs
            .iter()
            .map(|x| match adj.get(x.id).copied().flatten() {
                Some(v) => v,
                None => self.lift(0.0),
            })
            .collect())
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], at: usize, g: Var) {
        adj[at] = Some(match adj[at] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }
}

fn abs_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn leaky_slope(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}
