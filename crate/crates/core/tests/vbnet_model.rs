mod common;

use std::collections::BTreeMap;

use common::checks::{self, model_inputs, network_loss, perturbed_model};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vbquant_core::tensor::kernels::ConvParams;
use vbquant_core::tensor::{Graph, Tensor, TensorError, Var};
use vbquant_core::vbnet::network::forward_network;
use vbquant_core::vbnet::{
    build_vbnet, compare_plain, compare_plain_block, param_specs, Ablation, Backend, BlockKind, ModelError, VbNetConfig,
};

/// Backend built on the loop oracles.
struct NaiveBackend {
    params: BTreeMap<String, Tensor<f64>>,
}

impl Backend<f64> for NaiveBackend {
    type Value = Tensor<f64>;

    fn param(&mut self, name: &str) -> Result<Tensor<f64>, ModelError> {
        self.params.get(name).cloned().ok_or_else(|| ModelError::MissingParam(name.into()))
    }
    fn conv3d(&mut self, x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: ConvParams) -> Result<Tensor<f64>, TensorError> {
        Ok(naive_conv3d(x, w, Some(b), p.stride[0], p.padding[0]))
    }
    fn conv3d_transpose(&mut self, x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: ConvParams) -> Result<Tensor<f64>, TensorError> {
        Ok(naive_conv3d_transpose(x, w, Some(b), p.stride[0], p.padding[0]))
    }
    fn prelu(&mut self, x: &Tensor<f64>, s: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        Ok(naive_prelu(x, s))
    }
    fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        Ok(naive_add(a, b))
    }
    fn concat(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        Ok(naive_concat(a, b))
    }
    fn sigmoid(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        naive_sigmoid(x)
    }
    fn zeros_like(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        Tensor::zeros(x.shape())
    }
}

fn toy() -> VbNetConfig {
    checks::toy_vbnet()
}

/// Closed-form parameter count, written independently of `param_specs`.
fn closed_form_params(cfg: &VbNetConfig, kind: BlockKind) -> usize {
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k * k + cout;
    let block = |c: usize| -> usize {
        match kind {
            BlockKind::Bottleneck => {
                let r = (c / cfg.bottleneck_ratio).max(1);
                conv(r, c, 1) + r + conv(r, r, 3) + r + conv(c, r, 1) + c
            }
            BlockKind::Plain => conv(c, c, 3) + c,
        }
    };
    let ch = &cfg.channels_per_level;
    let last = cfg.levels - 1;
    let mut n = conv(ch[0], 1, 3) + ch[0];
    for l in 0..cfg.levels {
        if l > 0 {
            n += conv(ch[l], ch[l - 1], 2) + ch[l];
        }
        n += cfg.blocks_per_level[l] * block(ch[l]);
    }
    for l in 0..last {
        let below = if l + 1 == last { ch[l + 1] } else { 2 * ch[l + 1] };
        n += below * ch[l] * 8 + ch[l] + ch[l];
        n += cfg.blocks_per_level[l] * block(2 * ch[l]);
    }
    n + conv(1, 2 * ch[0], 1)
}

#[test]
fn param_count_matches_closed_form() {
    let configs = [
        VbNetConfig::default(),
        toy(),
        VbNetConfig {
            levels: 4,
            channels_per_level: vec![8, 16, 32, 64],
            blocks_per_level: vec![1, 2, 2, 3],
            bottleneck_ratio: 4,
            ..VbNetConfig::default()
        },
    ];
    for cfg in &configs {
        for kind in [BlockKind::Bottleneck, BlockKind::Plain] {
            let got: usize = param_specs(cfg, kind).iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(got, closed_form_params(cfg, kind), "{cfg:?} {kind:?}");
        }
        let (b, p) = compare_plain(cfg).unwrap();
        assert!(b < p);
        let m = build_vbnet(cfg, 0).unwrap();
        assert_eq!(m.param_count(), b);
    }
}

#[test]
fn eager_forward_matches_naive_oracle() {
    for seed in 0..3 {
        let m = build_vbnet(&toy(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, &[1, 8, 8, 8], 0.0, 1.0);
        let fast = m.forward(&x.cast()).unwrap();
        let mut naive = NaiveBackend {
            params: m.params().iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        };
        let slow = forward_network(&mut naive, m.config(), &x, Ablation::default()).unwrap();
        let fast: Vec<f64> = fast.data().iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&fast, slow.data()) <= 1e-5);
    }
}

#[test]
fn full_network_gradients() {
    checks::network_gradients().unwrap();
}

#[test]
fn every_parameter_influences_the_output() {
    let m = perturbed_model(1);
    let (inputs, t, names) = model_inputs(&m, 1);
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = network_loss(&m, &t, &mut g, &vars, &names).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, v) in names.iter().zip(&vars[1..]) {
        assert!(grads.get(*v).max_abs() > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn plain_variant_has_more_parameters() {
    let cfg = VbNetConfig::default();
    let plain = VbNetConfig {
        block_kind: BlockKind::Plain,
        ..cfg.clone()
    };
    let a = build_vbnet(&cfg, 0).unwrap();
    let b = build_vbnet(&plain, 0).unwrap();
    assert!(a.param_count() < b.param_count());
    let x = Tensor::<f32>::full(&[1, 8, 8, 8], 0.3);
    assert_eq!(b.forward(&x).unwrap().shape(), &[1, 8, 8, 8]);
}

#[test]
fn bottleneck_block_counts() {
    assert_eq!(compare_plain_block(64, 16).unwrap(), (8960, 110_592));
    assert_eq!(compare_plain_block(8, 4).unwrap(), (2 * 8 * 4 + 27 * 16, 27 * 64));
}
