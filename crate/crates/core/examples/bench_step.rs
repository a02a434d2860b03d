use onn_core::network::*;
use onn_core::operators::*;
use onn_core::optim::*;
use onn_core::tensor::Tensor;
use onn_core::train::{train_step, TrainScratch};
use rand::Rng;
use std::time::Instant;

fn bench(name: &str, spec: &NetworkSpec, opt_kind: OptimizerKind) {
    let mut rng = onn_core::rng::stream(7, &[1]);
    let mut state = NetworkState::init(spec, &mut rng).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::new(opt_kind), state.param_count());
    let mut scratch = TrainScratch::new(&state);
    let input = Tensor::new(vec![60, 60], (0..3600).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = Tensor::new(vec![60, 60], (0..3600).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for _ in 0..3 {
        train_step(spec, &mut state, &mut opt, &input, &target, &mut scratch).unwrap();
    }
    let n = 30;
    let t0 = Instant::now();
    for _ in 0..n {
        train_step(spec, &mut state, &mut opt, &input, &target, &mut scratch).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("{name:24} {:7.2} ms/image-step", dt * 1000.0);
}

fn main() {
    let mk = |set: OperatorSet| NetworkSpec::uniform((60, 60), &[12, 12], (3, 3), set);
    bench("cnn mul-sum-tanh", &mk(OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh)), OptimizerKind::Adam);
    bench("onn all sinh-sum", &mk(OperatorSet::new(NodalOp::Sinh, PoolOp::Sum, ActivationOp::Tanh)), OptimizerKind::VarianceAdam);
    bench("onn all sin-sum", &mk(OperatorSet::new(NodalOp::Sin, PoolOp::Sum, ActivationOp::Tanh)), OptimizerKind::VarianceAdam);
    bench("onn all cubic-median", &mk(OperatorSet::new(NodalOp::Cubic, PoolOp::Median, ActivationOp::Tanh)), OptimizerKind::VarianceAdam);
    bench("onn all log-sum", &mk(OperatorSet::new(NodalOp::SignedLog, PoolOp::Sum, ActivationOp::Tanh)), OptimizerKind::VarianceAdam);

    let sets = [
        OperatorSet::new(NodalOp::Sinh, PoolOp::Sum, ActivationOp::Tanh),
        OperatorSet::new(NodalOp::Sin, PoolOp::Sum, ActivationOp::Tanh),
        OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh),
        OperatorSet::new(NodalOp::Cubic, PoolOp::Median, ActivationOp::Tanh),
    ];
    let mut layers = Vec::new();
    let mut fan_in = 1;
    for _ in 0..2 {
        let neurons: Vec<NeuronSpec> = (0..12).map(|i| NeuronSpec { operator_set: sets[i % 4], kernel: (3, 3) }).collect();
        layers.push(LayerSpec { neurons, input_count: fan_in });
        fan_in = 12;
    }
    layers.push(LayerSpec {
        neurons: vec![NeuronSpec { operator_set: OperatorSet::convolutional(ActivationOp::Identity), kernel: (3, 3) }],
        input_count: 12,
    });
    bench("onn elite-style mix", &NetworkSpec { layers, input_shape: (60, 60) }, OptimizerKind::VarianceAdam);
}
