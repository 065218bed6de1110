use numcore::{Graph, LayerSpec, Mode, ParamSet, Parameterized, Stack, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::synth::ImageShape;

pub const BACKBONE: &str = "f_b";
pub const EMOTION_GEN: &str = "g_e";
pub const CONTEXT_GEN: &str = "g_c";
pub const EMOTION_DISC: &str = "d_e";
pub const CONTEXT_DISC: &str = "d_c";
pub const RECON: &str = "g_r";
pub const CLASSIFIER: &str = "f_c";
pub const BANK: &str = "C";
/// Name of the single parameter inside the [`BANK`] set.
pub const BANK_PARAM: &str = "centers";

pub const COMPONENTS: [&str; 8] =
    [BACKBONE, EMOTION_GEN, CONTEXT_GEN, EMOTION_DISC, CONTEXT_DISC, RECON, CLASSIFIER, BANK];

/// Layer stacks of the seven networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-sample input shape (`[h, w, c]` or `[features]`).
    pub input: Vec<usize>,
    pub n_emotions: usize,
    pub n_confounders: usize,
    pub backbone: Vec<LayerSpec>,
    pub emotion_generator: Vec<LayerSpec>,
    pub context_generator: Vec<LayerSpec>,
    pub emotion_discriminator: Vec<LayerSpec>,
    pub context_discriminator: Vec<LayerSpec>,
    pub reconstruction: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

fn discriminator(width: usize, outputs: usize) -> Vec<LayerSpec> {
    let half = (width / 2).max(1);
    vec![
        LayerSpec::Conv2d { in_channels: width, out_channels: width, kernel: 4, stride: 2, padding: 1 },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Conv2d { in_channels: width, out_channels: half, kernel: 1, stride: 1, padding: 0 },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Conv2d { in_channels: half, out_channels: outputs, kernel: 1, stride: 1, padding: 0 },
        LayerSpec::GlobalAvgPool,
    ]
}

fn generator(width: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_channels: width, out_channels: width, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::ResidualBlock { channels: width, kernel: 3 },
    ]
}

impl Architecture {
    /// Convolutional analog of the full-size component table at `width`
    /// channels. The backbone halves the resolution twice.
    pub fn desk(image: ImageShape, n_emotions: usize, n_confounders: usize, width: usize) -> Self {
        let mid = (width / 2).max(1);
        Self {
            input: vec![image.height, image.width, image.channels],
            n_emotions,
            n_confounders,
            backbone: vec![
                LayerSpec::Conv2d { in_channels: image.channels, out_channels: mid, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: mid, out_channels: width, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
            ],
            emotion_generator: generator(width),
            context_generator: generator(width),
            emotion_discriminator: discriminator(width, n_emotions),
            context_discriminator: discriminator(width, n_confounders),
            reconstruction: vec![
                LayerSpec::ConcatChannels,
                LayerSpec::Conv2d { in_channels: 2 * width, out_channels: width, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ResidualBlock { channels: width, kernel: 3 },
                LayerSpec::ResidualBlock { channels: width, kernel: 3 },
            ],
            classifier: vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { inputs: width, outputs: n_emotions }],
        }
    }

    /// Fully connected model over `input_dim` vectors with `feature_dim`
    /// features, small enough for exhaustive gradient checks.
    pub fn tiny(input_dim: usize, feature_dim: usize, n_emotions: usize, n_confounders: usize) -> Self {
        let f = feature_dim;
        Self {
            input: vec![input_dim],
            n_emotions,
            n_confounders,
            backbone: vec![LayerSpec::Dense { inputs: input_dim, outputs: f }, LayerSpec::LeakyRelu { slope: 0.1 }],
            emotion_generator: vec![LayerSpec::Dense { inputs: f, outputs: f }, LayerSpec::LeakyRelu { slope: 0.1 }],
            context_generator: vec![LayerSpec::Dense { inputs: f, outputs: f }, LayerSpec::LeakyRelu { slope: 0.1 }],
            emotion_discriminator: vec![LayerSpec::Dense { inputs: f, outputs: n_emotions }],
            context_discriminator: vec![LayerSpec::Dense { inputs: f, outputs: n_confounders }],
            reconstruction: vec![
                LayerSpec::ConcatChannels,
                LayerSpec::Dense { inputs: 2 * f, outputs: f },
                LayerSpec::LeakyRelu { slope: 0.1 },
            ],
            classifier: vec![LayerSpec::Dense { inputs: f, outputs: n_emotions }],
        }
    }

    /// Same as [`Architecture::tiny`] but every stack is a single linear map,
    /// so predictions have a closed form.
    pub fn linear(input_dim: usize, feature_dim: usize, n_emotions: usize, n_confounders: usize) -> Self {
        let f = feature_dim;
        Self {
            input: vec![input_dim],
            n_emotions,
            n_confounders,
            backbone: vec![LayerSpec::Dense { inputs: input_dim, outputs: f }],
            emotion_generator: vec![LayerSpec::Dense { inputs: f, outputs: f }],
            context_generator: vec![LayerSpec::Dense { inputs: f, outputs: f }],
            emotion_discriminator: vec![LayerSpec::Dense { inputs: f, outputs: n_emotions }],
            context_discriminator: vec![LayerSpec::Dense { inputs: f, outputs: n_confounders }],
            reconstruction: vec![LayerSpec::ConcatChannels, LayerSpec::Dense { inputs: 2 * f, outputs: f }],
            classifier: vec![LayerSpec::Dense { inputs: f, outputs: n_emotions }],
        }
    }

    pub(crate) fn stack_layers(&self, component: &str) -> Option<&Vec<LayerSpec>> {
        Some(match component {
            BACKBONE => &self.backbone,
            EMOTION_GEN => &self.emotion_generator,
            CONTEXT_GEN => &self.context_generator,
            EMOTION_DISC => &self.emotion_discriminator,
            CONTEXT_DISC => &self.context_discriminator,
            RECON => &self.reconstruction,
            CLASSIFIER => &self.classifier,
            _ => return None,
        })
    }
}

/// Deterministic per-component sub-seed.
pub fn sub_seed(seed: u64, component: &str) -> u64 {
    // FNV-1a over the component name, mixed with the global seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// The seven networks plus the learnable confounder bank.
#[derive(Debug, Clone, PartialEq)]
pub struct IernModel {
    pub arch: Architecture,
    pub seed: u64,
    /// Per-sample shape of the emotion/context features.
    pub feature_shape: Vec<usize>,
    pub backbone: Stack,
    pub emotion_gen: Stack,
    pub context_gen: Stack,
    pub emotion_disc: Stack,
    pub context_disc: Stack,
    pub recon: Stack,
    pub classifier: Stack,
    /// Holds [`BANK_PARAM`], shaped `[n_confounders, ..feature_shape]`.
    pub bank: ParamSet,
}

impl IernModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let build = |name: &str| -> Result<Stack> {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, name));
            Ok(Stack::new(arch.stack_layers(name).expect("known component").clone(), &mut rng)?)
        };
        let backbone = build(BACKBONE)?;
        let emotion_gen = build(EMOTION_GEN)?;
        let context_gen = build(CONTEXT_GEN)?;
        let emotion_disc = build(EMOTION_DISC)?;
        let context_disc = build(CONTEXT_DISC)?;
        let recon = build(RECON)?;
        let classifier = build(CLASSIFIER)?;

        let mut shape = vec![1];
        shape.extend_from_slice(&arch.input);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&shape));
        let base = backbone.forward(&mut g, BACKBONE, &[x], Mode::Eval)?;
        let emo = emotion_gen.forward(&mut g, EMOTION_GEN, &[base], Mode::Eval)?;
        let ctx = context_gen.forward(&mut g, CONTEXT_GEN, &[base], Mode::Eval)?;
        if g.shape(emo) != g.shape(ctx) {
            return Err(LabError::Config(format!(
                "emotion features {:?} and context features {:?} differ",
                g.shape(emo),
                g.shape(ctx)
            )));
        }
        let check_out = |g: &mut Graph, stack: &Stack, name: &str, input: &[Var], n: usize| -> Result<()> {
            let y = stack.forward(g, name, input, Mode::Eval)?;
            if g.shape(y) != [1, n] {
                return Err(LabError::Config(format!("{name} produces {:?}, expected [1, {n}]", g.shape(y))));
            }
            Ok(())
        };
        check_out(&mut g, &emotion_disc, EMOTION_DISC, &[emo], arch.n_emotions)?;
        check_out(&mut g, &context_disc, CONTEXT_DISC, &[emo], arch.n_confounders)?;
        let rec = recon.forward(&mut g, RECON, &[emo, ctx], Mode::Eval)?;
        if g.shape(rec) != g.shape(base) {
            return Err(LabError::Config(format!(
                "reconstruction {:?} does not match backbone output {:?}",
                g.shape(rec),
                g.shape(base)
            )));
        }
        check_out(&mut g, &classifier, CLASSIFIER, &[rec], arch.n_emotions)?;

        let feature_shape = g.shape(emo)[1..].to_vec();
        let mut bank_shape = vec![arch.n_confounders];
        bank_shape.extend_from_slice(&feature_shape);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, BANK));
        let n: usize = bank_shape.iter().product();
        let values = (0..n).map(|_| rand::Rng::random_range(&mut rng, -0.1..0.1)).collect();
        let mut bank = ParamSet::new();
        bank.insert(BANK_PARAM, Tensor::new(bank_shape, values)?)?;

        Ok(Self {
            arch,
            seed,
            feature_shape,
            backbone,
            emotion_gen,
            context_gen,
            emotion_disc,
            context_disc,
            recon,
            classifier,
            bank,
        })
    }

    pub fn n_emotions(&self) -> usize {
        self.arch.n_emotions
    }

    pub fn n_confounders(&self) -> usize {
        self.arch.n_confounders
    }

    pub fn stack(&self, name: &str) -> Option<&Stack> {
        Some(match name {
            BACKBONE => &self.backbone,
            EMOTION_GEN => &self.emotion_gen,
            CONTEXT_GEN => &self.context_gen,
            EMOTION_DISC => &self.emotion_disc,
            CONTEXT_DISC => &self.context_disc,
            RECON => &self.recon,
            CLASSIFIER => &self.classifier,
            _ => return None,
        })
    }

    pub fn stack_mut(&mut self, name: &str) -> Option<&mut Stack> {
        Some(match name {
            BACKBONE => &mut self.backbone,
            EMOTION_GEN => &mut self.emotion_gen,
            CONTEXT_GEN => &mut self.context_gen,
            EMOTION_DISC => &mut self.emotion_disc,
            CONTEXT_DISC => &mut self.context_disc,
            RECON => &mut self.recon,
            CLASSIFIER => &mut self.classifier,
            _ => return None,
        })
    }

    pub fn centers(&self) -> &Tensor {
        self.bank.get(BANK_PARAM).expect("bank parameter exists")
    }

    pub fn centers_mut(&mut self) -> &mut Tensor {
        self.bank.get_mut(BANK_PARAM).expect("bank parameter exists")
    }

    /// Marks exactly the named components trainable; everything else frozen.
    pub fn set_trainable(&mut self, trainable: &[&str]) {
        for name in COMPONENTS {
            let frozen = !trainable.contains(&name);
            if let Some(ps) = self.param_set_mut(name) {
                ps.freeze_all(frozen);
            }
        }
    }

    pub fn snapshot(&self) -> Vec<(String, ParamSet)> {
        COMPONENTS
            .iter()
            .map(|&n| (n.to_owned(), self.param_set(n).expect("component").clone()))
            .collect()
    }

    /// Components whose parameter values differ bitwise from `before`.
    pub fn changed_since(&self, before: &[(String, ParamSet)]) -> Vec<String> {
        before
            .iter()
            .filter(|(n, ps)| !self.param_set(n).expect("component").same_values(ps))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

impl Parameterized for IernModel {
    fn param_set_names(&self) -> Vec<String> {
        COMPONENTS.iter().map(|s| s.to_string()).collect()
    }

    fn param_set(&self, name: &str) -> Option<&ParamSet> {
        if name == BANK {
            Some(&self.bank)
        } else {
            self.stack(name).map(|s| &s.params)
        }
    }

    fn param_set_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        if name == BANK {
            Some(&mut self.bank)
        } else {
            self.stack_mut(name).map(|s| &mut s.params)
        }
    }
}
