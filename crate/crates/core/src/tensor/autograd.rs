use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls until zeroed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Autograd(
                "backward on a tensor that does not require grad".into(),
            ));
        }
        self.backward_with(vec![1.0])
    }

    /// Backward with an explicit seed gradient of the same size as `self`.
    pub(crate) fn backward_with(&self, seed: Vec<f32>) -> Result<()> {
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), seed);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    if node.requires_grad() {
                        node.accumulate_grad(&g);
                    }
                }
                Some(gf) => {
                    let input_grads = {
                        let out = node.0.data.read();
                        (gf.backward)(&g, out.as_slice())
                    };
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.name);
                    for (inp, gi) in gf.inputs.iter().zip(input_grads) {
                        let Some(gi) = gi else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), inp.numel(), "grad size in {}", gf.name);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&gi) {
                                    *a += *b;
                                }
                            }
                            None => {
                                grads.insert(inp.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the subgraph of nodes that require grad.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = &t.0.grad_fn {
            for inp in &gf.inputs {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}
