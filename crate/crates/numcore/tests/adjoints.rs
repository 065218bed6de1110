//! Central-difference checks for every recorded op with an analytic adjoint.

use numcore::{grad_check, Graph, LayerSpec, Mode, ParamSet, Parameterized, Result, Stack, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net(Stack);

impl Parameterized for Net {
    fn param_set_names(&self) -> Vec<String> {
        vec!["net".into()]
    }
    fn param_set(&self, _: &str) -> Option<&ParamSet> {
        Some(&self.0.params)
    }
    fn param_set_mut(&mut self, _: &str) -> Option<&mut ParamSet> {
        Some(&mut self.0.params)
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(mut net: Net, build: F)
where
    F: Fn(&mut Graph, &Net) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, &net).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(!grads.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let report = grad_check(
        &mut net,
        &grads,
        |n| {
            let mut g = Graph::new();
            let l = build(&mut g, n)?;
            Ok(g.scalar(l))
        },
        1e-5,
        40,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn conv_stack_with_batchnorm_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layers = vec![
        LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::ResidualBlock { channels: 3, kernel: 3 },
        LayerSpec::BatchNorm { channels: 3 },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { inputs: 3, outputs: 4 },
    ];
    let net = Net(Stack::new(layers, &mut rng).unwrap());
    let x = random(&[3, 5, 6, 2], &mut rng);
    check(net, move |g, n| {
        let xi = g.input(x.clone());
        let logits = n.0.forward(g, "net", &[xi], Mode::Train)?;
        g.cross_entropy(logits, &[0, 3, 1])
    });
}

#[test]
fn concat_softmax_mse_and_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layers = vec![
        LayerSpec::ConcatChannels,
        LayerSpec::Dense { inputs: 5, outputs: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 3, outputs: 3 },
    ];
    let mut stack = Stack::new(layers, &mut rng).unwrap();
    stack.params.insert("table", random(&[4, 2], &mut rng)).unwrap();
    let x = random(&[3, 3], &mut rng);
    let target = random(&[3, 2], &mut rng);
    check(Net(stack), move |g, n| {
        let xi = g.input(x.clone());
        let table = g.param("net", "table", &n.0.params)?;
        let rows = g.gather(table, &[2, 0, 2])?;
        let y = n.0.forward(g, "net", &[xi, rows], Mode::Train)?;
        let p = g.softmax(y);
        let uniform = g.mse_scalar(p, 1.0 / 3.0);
        let t = g.input(target.clone());
        let centre = g.mse(rows, t)?;
        let m = g.mean(y);
        let s = g.scale(m, 0.3);
        let total = g.add_all(&[uniform, centre, s])?;
        let sq = g.mul(total, total)?;
        g.sub(sq, m)
    });
}

#[test]
fn eval_mode_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut stack = Stack::new(
        vec![LayerSpec::BatchNorm { channels: 2 }, LayerSpec::Dense { inputs: 2, outputs: 2 }],
        &mut rng,
    )
    .unwrap();
    stack.params.buffer_mut("0.running_mean").unwrap().data_mut().copy_from_slice(&[0.3, -0.2]);
    stack.params.buffer_mut("0.running_var").unwrap().data_mut().copy_from_slice(&[2.0, 0.5]);
    let x = random(&[4, 2], &mut rng);
    check(Net(stack), move |g, n| {
        let xi = g.input(x.clone());
        let y = n.0.forward(g, "net", &[xi], Mode::Eval)?;
        g.cross_entropy(y, &[0, 1, 1, 0])
    });
}
