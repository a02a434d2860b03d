use onn_core::network::*;
use onn_core::operators::*;
use onn_core::tensor::Tensor;
use rand::Rng;

fn main() {
    let set = OperatorSet::new(NodalOp::SignedLog, PoolOp::Max, ActivationOp::Identity);
    let mut rng = onn_core::rng::stream(501, &[1]);
    let mut keep = None;
    for cfg_i in 0..2 {
        let rows = rng.gen_range(4..=8);
        let cols = rng.gen_range(4..=8);
        let hidden = rng.gen_range(1..=3);
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec { neurons: vec![NeuronSpec { operator_set: set, kernel: (3,3) }; hidden], input_count: 1 },
                LayerSpec { neurons: vec![NeuronSpec { operator_set: set, kernel: (3,3) }], input_count: hidden },
            ],
            input_shape: (rows, cols),
        };
        let input = Tensor::new(vec![rows, cols], (0..rows*cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target = Tensor::new(vec![rows, cols], (0..rows*cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let state = NetworkState::init(&spec, &mut rng).unwrap();
        if cfg_i == 1 { keep = Some((spec, input, target, state)); }
    }
    let (spec, input, target, state) = keep.unwrap();

    // layer-1 outputs
    let (l1, _) = layer_forward(&[input.clone()], &spec.layers[0], &state, 0).unwrap();
    // layer-2 forward + loss grad
    let (l2, tr2) = layer_forward(&l1, &spec.layers[1], &state, 1).unwrap();
    let (_, lgrad) = mse_loss(&l2[0], &target).unwrap();
    let (in_grads, _) = layer_backward(&spec.layers[1], &state, 1, &tr2, &[lgrad.clone()]).unwrap();

    // numeric d(loss)/d(map1 pixel p) through layer 2 only
    let h = 1e-7;
    let mut max_err = 0.0f64;
    let mut worst = (0usize, 0.0, 0.0);
    for p in 0..l1[1].len() {
        let mut l1p: Vec<Tensor> = l1.clone();
        l1p[1].data_mut()[p] += h;
        let (up_out, _) = layer_forward(&l1p, &spec.layers[1], &state, 1).unwrap();
        let (lu, _) = mse_loss(&up_out[0], &target).unwrap();
        l1p[1].data_mut()[p] -= 2.0 * h;
        let (dn_out, _) = layer_forward(&l1p, &spec.layers[1], &state, 1).unwrap();
        let (ld, _) = mse_loss(&dn_out[0], &target).unwrap();
        let numeric = (lu - ld) / (2.0 * h);
        let analytic = in_grads[1].data()[p];
        let err = (numeric - analytic).abs();
        if err > max_err { max_err = err; worst = (p, analytic, numeric); }
    }
    println!("layer-2 input-grad max abs err {max_err:.9} at pixel {} (analytic {:.9}, numeric {:.9})", worst.0, worst.1, worst.2);
    let s_analytic: f64 = in_grads[1].data().iter().sum();
    println!("sum analytic {s_analytic:.9}");
}
