//! Scalar reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends one node holding the local partial derivatives
//! with respect to its inputs. [`Tape::gradient`] sweeps the nodes backward
//! once. Leaves that do not influence the output get an exact zero.
//!
//! ```
//! use panocc::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x + 2.0 * x;
//! let g = tape.gradient(y);
//! assert_eq!(y.value(), 15.0);
//! assert_eq!(g.wrt(x), 8.0);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    edge_start: usize,
    edge_end: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    edges: RefCell<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, parents: impl IntoIterator<Item = (usize, f64)>) -> Var<'_> {
        let mut edges = self.edges.borrow_mut();
        let edge_start = edges.len();
        edges.extend(parents);
        let edge_end = edges.len();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            edge_start,
            edge_end,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, std::iter::empty())
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|v| self.var(*v)).collect()
    }

    /// A leaf that is never differentiated against.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value).sum();
        self.push(value, xs.iter().map(|x| (x.index, 1.0)))
    }

    pub fn mean<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let inv = 1.0 / xs.len() as f64;
        let value = xs.iter().map(|x| x.value).sum::<f64>() * inv;
        self.push(value, xs.iter().map(|x| (x.index, inv)))
    }

    /// `bias + sum(weights[i] * inputs[i])` as a single node.
    pub fn affine<'t>(&'t self, weights: &[Var<'t>], inputs: &[Var<'t>], bias: Var<'t>) -> Var<'t> {
        debug_assert_eq!(weights.len(), inputs.len());
        let value = weights
            .iter()
            .zip(inputs)
            .fold(bias.value, |acc, (w, x)| acc + w.value * x.value);
        let parents = weights
            .iter()
            .zip(inputs)
            .flat_map(|(w, x)| [(w.index, x.value), (x.index, w.value)])
            .chain(std::iter::once((bias.index, 1.0)));
        self.push(value, parents)
    }

    /// `sum(coeffs[i] * xs[i])` with constant coefficients.
    pub fn weighted_sum<'t>(&'t self, xs: &[Var<'t>], coeffs: &[f64]) -> Var<'t> {
        debug_assert_eq!(xs.len(), coeffs.len());
        let value = xs.iter().zip(coeffs).map(|(x, c)| x.value * c).sum();
        self.push(value, xs.iter().zip(coeffs).map(|(x, c)| (x.index, *c)))
    }

    /// Euclidean norm. The derivative at the origin is taken as zero.
    pub fn norm<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value * x.value).sum::<f64>().sqrt();
        let inv = if value > 0.0 { 1.0 / value } else { 0.0 };
        self.push(value, xs.iter().map(|x| (x.index, x.value * inv)))
    }

    /// Softmax of a logit vector, one node per output.
    pub fn softmax<'t>(&'t self, logits: &[Var<'t>]) -> Vec<Var<'t>> {
        let m = logits
            .iter()
            .map(|l| l.value)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l.value - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        (0..logits.len())
            .map(|i| {
                let parents = logits.iter().enumerate().map(|(j, l)| {
                    let d = if i == j {
                        probs[i] * (1.0 - probs[i])
                    } else {
                        -probs[i] * probs[j]
                    };
                    (l.index, d)
                });
                self.push(probs[i], parents)
            })
            .collect()
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let edges = self.edges.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for &(parent, partial) in &edges[node.edge_start..node.edge_end] {
                adjoints[parent] += a * partial;
            }
        }
        Gradients { adjoints }
    }
}

pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints[v.index]
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(*v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, partial)])
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(self.value.powf(p), p * self.value.powf(p - 1.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    /// Clamped value; the derivative is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        if self.value < lo {
            self.unary(lo, 0.0)
        } else if self.value > hi {
            self.unary(hi, 0.0)
        } else {
            self.unary(self.value, 1.0)
        }
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

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value + rhs.value,
            [(self.index, 1.0), (rhs.index, 1.0)],
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value - rhs.value,
            [(self.index, 1.0), (rhs.index, -1.0)],
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value * rhs.value,
            [(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.tape.push(
            self.value * inv,
            [(self.index, inv), (rhs.index, -self.value * inv * inv)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    type UnaryCase = (fn(Var) -> Var, fn(f64) -> f64);

    #[test]
    fn unary_ops_match_finite_differences() {
        let cases: Vec<UnaryCase> = vec![
            (|x| x.exp(), f64::exp),
            (|x| x.ln(), f64::ln),
            (|x| x.sqrt(), f64::sqrt),
            (|x| x.powf(2.5), |x| x.powf(2.5)),
            (|x| x.sigmoid(), sigmoid),
            (|x| 1.0 - x * x / (x + 3.0), |x| 1.0 - x * x / (x + 3.0)),
        ];
        for (sym, num) in cases {
            let tape = Tape::new();
            let x = tape.var(0.7);
            let y = sym(x);
            let g = tape.gradient(y).wrt(x);
            let fd = central_diff(num, 0.7);
            assert!((g - fd).abs() < 1e-8, "{g} vs {fd}");
        }
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let unused = tape.var(2.0);
        let y = x * 3.0;
        let g = tape.gradient(y);
        assert_eq!(g.wrt(unused), 0.0);
        assert_eq!(g.wrt(x), 3.0);
    }

    #[test]
    fn norm_at_origin_has_zero_gradient() {
        let tape = Tape::new();
        let xs = tape.vars(&[0.0, 0.0, 0.0]);
        let n = tape.norm(&xs);
        assert_eq!(n.value(), 0.0);
        assert_eq!(tape.gradient(n).wrt_all(&xs), vec![0.0; 3]);
    }

    #[test]
    fn softmax_and_affine_gradients() {
        let logits = [0.3, -1.2, 2.0];
        let tape = Tape::new();
        let ls = tape.vars(&logits);
        let p = tape.softmax(&ls);
        let y = p[1].ln();
        let g = tape.gradient(y).wrt_all(&ls);
        for j in 0..3 {
            let f = |v: f64| {
                let mut l = logits;
                l[j] = v;
                crate::objects::softmax(&l)[1].ln()
            };
            assert!((g[j] - central_diff(f, logits[j])).abs() < 1e-7);
        }

        let tape = Tape::new();
        let w = tape.vars(&[1.0, 2.0]);
        let x = tape.vars(&[3.0, -4.0]);
        let b = tape.var(0.5);
        let y = tape.affine(&w, &x, b);
        assert_eq!(y.value(), 1.0 * 3.0 + 2.0 * -4.0 + 0.5);
        let g = tape.gradient(y);
        assert_eq!(g.wrt_all(&w), vec![3.0, -4.0]);
        assert_eq!(g.wrt_all(&x), vec![1.0, 2.0]);
        assert_eq!(g.wrt(b), 1.0);
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.value(), 1.0);
        assert_eq!(tape.gradient(y).wrt(x), 0.0);
    }
}
