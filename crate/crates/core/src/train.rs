//! Single-image training step with fully reused buffers.
//!
//! Both the SPM probe trainings and the cross-validated protocol loop over
//! images one optimizer step at a time; this is the shared inner step.

use crate::network::{
    mse_loss, network_backward_into, network_forward_into, ForwardTrace, Gradients, NetworkSpec,
    NetworkState,
};
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use crate::Result;

/// Reusable buffers for a training run; create once per run.
#[derive(Debug, Clone)]
pub struct TrainScratch {
    trace: ForwardTrace,
    grads: Gradients,
}

impl TrainScratch {
    pub fn new(state: &NetworkState) -> Self {
        TrainScratch { trace: ForwardTrace::new(), grads: Gradients::zeros_like(state) }
    }
}

/// One forward/backward/update step on a single (input, target) pair.
/// Returns the loss and the prediction made before the update.
pub fn train_step(
    spec: &NetworkSpec,
    state: &mut NetworkState,
    optimizer: &mut Optimizer,
    input: &Tensor,
    target: &Tensor,
    scratch: &mut TrainScratch,
) -> Result<(f64, Tensor)> {
    let pred = network_forward_into(spec, state, input, &mut scratch.trace)?;
    let (loss, loss_grad) = mse_loss(&pred, target)?;
    scratch.grads.reset();
    network_backward_into(spec, state, &mut scratch.trace, &loss_grad, &mut scratch.grads)?;
    optimizer.step(state.params_mut(), scratch.grads.values())?;
    Ok((loss, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{loss_and_gradients, NetworkSpec};
    use crate::operators::{ActivationOp, NodalOp, OperatorSet, PoolOp};
    use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
    use rand::Rng;

    #[test]
    fn scratch_reuse_matches_fresh_buffers() {
        let mut rng = crate::rng::stream(601, &[1]);
        let spec = NetworkSpec::uniform(
            (6, 6),
            &[3, 2],
            (3, 3),
            OperatorSet::new(NodalOp::Sin, PoolOp::Median, ActivationOp::Tanh),
        );
        let mut state_a = NetworkState::init(&spec, &mut rng).unwrap();
        let mut state_b = state_a.clone();
        let mut opt_a = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam), state_a.param_count());
        let mut opt_b = opt_a.clone();
        let mut scratch = TrainScratch::new(&state_a);

        for step in 0..10 {
            let input = Tensor::new(
                vec![6, 6],
                (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let target = Tensor::new(
                vec![6, 6],
                (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();

            // reference path: fresh buffers each time
            let (loss_ref, _, grads_ref) =
                loss_and_gradients(&spec, &state_b, &input, &target).unwrap();
            opt_b.step(state_b.params_mut(), grads_ref.values()).unwrap();

            let (loss, _) =
                train_step(&spec, &mut state_a, &mut opt_a, &input, &target, &mut scratch)
                    .unwrap();

            assert_eq!(loss.to_bits(), loss_ref.to_bits(), "loss diverged at step {step}");
            assert_eq!(state_a.params(), state_b.params(), "params diverged at step {step}");
        }
    }
}
