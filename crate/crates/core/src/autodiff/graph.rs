use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
pub trait Op<T: Real> {
    fn name(&self) -> &'static str;

    /// Given the forward inputs, the forward output and the gradient of the
    /// loss with respect to that output, returns the gradient with respect
    /// to every input whose `needs[i]` flag is set (`None` otherwise).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
    /// Accumulated gradient, leaves only.
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations. Confined to one thread.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a user-defined operation whose forward value has already
    /// been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn Op<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(op),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates `d loss / d node` to every leaf that requires gradients,
    /// adding into any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{} returned wrong arity", op.name());
            for (v, g) in node.inputs.clone().into_iter().zip(grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), self.nodes[v.0].value.numel(), "{} grad size", op.name());
                match &mut pending[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Box<dyn Op<T>>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.custom(&[x], value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Box::new(Relu))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Box::new(Tanh))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Box::new(Sigmoid))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, |v| v * c, Box::new(Scale(c)))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() - v, Box::new(Scale(-T::one())))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Box<dyn Op<T>>) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.custom(&[a, b], value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Box::new(AddSub(T::one())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Box::new(AddSub(-T::one())))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Box::new(Mul))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.custom(&[x], Tensor::scalar(T::of(s)), Box::new(SumAll { scale: T::one() }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let scale = T::of(1.0 / n as f64);
        self.custom(&[x], Tensor::scalar(T::of(s / n as f64)), Box::new(SumAll { scale }))
    }

    /// Concatenates two `[N, a]` and `[N, b]` matrices into `[N, a + b]`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", format!("{sa:?} with {sb:?}")));
        }
        let (n, wa, wb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * wa..(i + 1) * wa]);
            data.extend_from_slice(&self.value(b).data()[i * wb..(i + 1) * wb]);
        }
        let value = Tensor::new(&[n, wa + wb], data)?;
        Ok(self.custom(&[a, b], value, Box::new(Concat { n, wa, wb })))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct Relu;
impl<T: Real> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    }
}

struct Tanh;
impl<T: Real> Op<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = out.data().iter().zip(grad).map(|(&y, &g)| g * (T::one() - y * y)).collect();
        vec![Some(g)]
    }
}

struct Sigmoid;
impl<T: Real> Op<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = out.data().iter().zip(grad).map(|(&y, &g)| g * y * (T::one() - y)).collect();
        vec![Some(g)]
    }
}

struct Scale<T>(T);
impl<T: Real> Op<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

/// `a + sign * b`
struct AddSub<T>(T);
impl<T: Real> Op<T> for AddSub<T> {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.iter().map(|&g| g * self.0).collect()),
        ]
    }
}

struct Mul;
impl<T: Real> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let times = |other: &Tensor<T>| other.data().iter().zip(grad).map(|(&o, &g)| o * g).collect();
        vec![needs[0].then(|| times(inputs[1])), needs[1].then(|| times(inputs[0]))]
    }
}

struct SumAll<T> {
    scale: T,
}
impl<T: Real> Op<T> for SumAll<T> {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0] * self.scale; inputs[0].numel()])]
    }
}

struct Concat {
    n: usize,
    wa: usize,
    wb: usize,
}
impl<T: Real> Op<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let w = self.wa + self.wb;
        let ga = needs[0].then(|| (0..self.n).flat_map(|i| grad[i * w..i * w + self.wa].iter().copied()).collect());
        let gb = needs[1].then(|| (0..self.n).flat_map(|i| grad[i * w + self.wa..(i + 1) * w].iter().copied()).collect());
        vec![ga, gb]
    }
}
