//! A small reverse-mode tape over the operations an adapted layer needs.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Constants never receive gradients, and nothing
//! downstream of only constants does either.

use crate::error::{Error, Result};
use crate::mpo::{deinterleave, interleave, MpoShapePlan};
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Reshape,
    Add,
    Scale,
    Tanh,
    MseLoss,
    ChainContract,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    MseLoss(Var, DenseTensor),
    ChainContract(Vec<Var>, MpoShapePlan),
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    op: Op,
    value: DenseTensor,
    requires_grad: bool,
}

impl TapeNode {
    pub fn kind(&self) -> OpKind {
        match self.op {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::MseLoss(..) => OpKind::MseLoss,
            Op::ChainContract(..) => OpKind::ChainContract,
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        op_inputs(&self.op)
    }

    pub fn value(&self) -> &DenseTensor {
        &self.value
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
        Op::Reshape(a) | Op::Scale(a, _) | Op::Tanh(a) | Op::MseLoss(a, _) => vec![*a],
        Op::ChainContract(f, _) => f.clone(),
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients of one scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseTensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: DenseTensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(dims)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: &DenseTensor) -> Result<Var> {
        let diff = self.value(pred).sub(target)?;
        let loss = diff.hadamard(&diff)?.sum() / diff.len() as f64;
        Ok(self.push(Op::MseLoss(pred, target.clone()), DenseTensor::scalar(loss)))
    }

    /// Contracts MPO factors (dims per `plan`) into the `[I, J]` matrix they represent.
    pub fn chain_contract(&mut self, factors: &[Var], plan: &MpoShapePlan) -> Result<Var> {
        if factors.len() != plan.len() {
            return Err(Error::PlanMismatch(format!(
                "{} factor nodes for a {}-factor plan",
                factors.len(),
                plan.len()
            )));
        }
        let lefts = self.left_partials(factors, plan)?;
        let x = lefts.last().expect("at least one factor");
        let value = deinterleave(x, plan)?;
        Ok(self.push(Op::ChainContract(factors.to_vec(), plan.clone()), value))
    }

    /// `L_0 = [1]` and `L_k = L_{k-1} . T_k` viewed as `[P_k, d_k]`.
    fn left_partials(&self, factors: &[Var], plan: &MpoShapePlan) -> Result<Vec<DenseTensor>> {
        let mut lefts = vec![DenseTensor::new(vec![1, 1], vec![1.0])?];
        for (k, &f) in factors.iter().enumerate() {
            let [d_prev, i_k, j_k, d_k] = plan.factor_dims(k);
            if self.value(f).dims() != plan.factor_dims(k) {
                return Err(Error::PlanMismatch(format!(
                    "factor {k} dims {:?} vs {:?}",
                    self.value(f).dims(),
                    plan.factor_dims(k)
                )));
            }
            let t = self.value(f).reshaped(&[d_prev, i_k * j_k * d_k])?;
            let prod = matmul(lefts.last().unwrap(), &t)?;
            let rows = prod.len() / d_k;
            lefts.push(prod.reshaped(&[rows, d_k])?);
        }
        Ok(lefts)
    }

    /// `R_{m+1} = [1]` and `R_k = T_k . R_{k+1}` viewed as `[d_{k-1}, Q_k]`.
    fn right_partials(&self, factors: &[Var], plan: &MpoShapePlan) -> Result<Vec<DenseTensor>> {
        let m = factors.len();
        let mut rights = vec![DenseTensor::new(vec![1, 1], vec![1.0])?; m + 1];
        for k in (0..m).rev() {
            let [d_prev, i_k, j_k, d_k] = plan.factor_dims(k);
            let t = self.value(factors[k]).reshaped(&[d_prev * i_k * j_k, d_k])?;
            let prod = matmul(&t, &rights[k + 1])?;
            let cols = prod.len() / d_prev;
            rights[k] = prod.reshaped(&[d_prev, cols])?;
        }
        Ok(rights)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got dims {:?}",
                self.value(output).dims()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(DenseTensor::new(
            self.value(output).dims().to_vec(),
            vec![1.0],
        )?);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = matmul(&g, &self.value(*b).transpose()?)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = matmul(&self.value(*a).transpose()?, &g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Reshape(a) => {
                    let ga = g.reshaped(self.value(*a).dims())?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Tanh(a) => {
                    let local = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, g.hadamard(&local)?)?;
                }
                Op::MseLoss(p, target) => {
                    let n = target.len() as f64;
                    let c = 2.0 * g.data()[0] / n;
                    let gp = self.value(*p).sub(target)?.scale(c);
                    accumulate(&mut grads, *p, gp)?;
                }
                Op::ChainContract(factors, plan) => {
                    self.chain_backward(&mut grads, factors, plan, &g)?;
                }
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn chain_backward(
        &self,
        grads: &mut [Option<DenseTensor>],
        factors: &[Var],
        plan: &MpoShapePlan,
        g: &DenseTensor,
    ) -> Result<()> {
        // gradient with respect to the pair-ordered element vector
        let gx = interleave(g, plan)?;
        let lefts = self.left_partials(factors, plan)?;
        let rights = self.right_partials(factors, plan)?;
        for (k, &f) in factors.iter().enumerate() {
            if !self.needs(f) {
                continue;
            }
            let [d_prev, i_k, j_k, d_k] = plan.factor_dims(k);
            let left = &lefts[k]; // [P, d_prev]
            let right = &rights[k + 1]; // [d_k, Q]
            let p = left.dims()[0];
            let q = right.dims()[1];
            let c = i_k * j_k;
            let g3 = gx.reshaped(&[p, c * q])?;
            let m1 = matmul(&left.transpose()?, &g3)?.reshaped(&[d_prev * c, q])?;
            let gt = matmul(&m1, &right.transpose()?)?.reshaped(&[d_prev, i_k, j_k, d_k])?;
            accumulate(grads, f, gt)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], v: Var, g: DenseTensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
