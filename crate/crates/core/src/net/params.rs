use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetConfig;
use crate::error::{validation, Result};
use crate::real::Real;

/// Which learning rate a block trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Main,
    Localizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: Group,
}

/// Positions of the weight blocks; each bias follows its weight.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub stem: Vec<usize>,
    pub tex_conv: usize,
    pub tex_fc: usize,
    pub min_conv: usize,
    pub min_fc: usize,
    pub map: usize,
    pub cls1: usize,
    pub cls2: usize,
    pub loc: Option<usize>,
}

/// Names, shapes and groups of every block for `config`, in storage order.
fn block_specs(config: &NetConfig) -> (Vec<(String, Vec<usize>, Group)>, Layout) {
    let mut specs = Vec::new();
    let mut push = |name: String, w: Vec<usize>, group: Group| -> usize {
        let at = specs.len();
        let bias = vec![w[0]];
        specs.push((format!("{name}.w"), w, group));
        specs.push((format!("{name}.b"), bias, group));
        at
    };
    let mut stem = Vec::new();
    let mut ci = 1;
    for (s, &co) in config.stem_channels.iter().enumerate() {
        stem.push(push(format!("stem{s}"), vec![co, ci, 3, 3], Group::Main));
        ci = co;
    }
    let c = config.branch_channels;
    let d = config.embed_dim;
    let p = config.minutiae_pool;
    let tex_conv = push("texture.conv".into(), vec![c, ci, 3, 3], Group::Main);
    let tex_fc = push("texture.fc".into(), vec![d, c], Group::Main);
    let min_conv = push("minutiae.conv".into(), vec![c, ci, 3, 3], Group::Main);
    let min_fc = push("minutiae.fc".into(), vec![d, c * p * p], Group::Main);
    let map = push("minutiae.map".into(), vec![config.map_c, c, 3, 3], Group::Main);
    let cls1 = push("cls1".into(), vec![config.num_classes, d], Group::Main);
    let cls2 = push("cls2".into(), vec![config.num_classes, d], Group::Main);
    let loc = config
        .use_localizer
        .then(|| push("loc".into(), vec![3, config.loc_pool * config.loc_pool], Group::Localizer));
    let layout = Layout {
        stem,
        tex_conv,
        tex_fc,
        min_conv,
        min_fc,
        map,
        cls1,
        cls2,
        loc,
    };
    (specs, layout)
}

/// All trainable parameters of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    config: NetConfig,
    blocks: Vec<ParamBlock<T>>,
    pub(crate) layout: Layout,
}

impl<T: Real> NetParams<T> {
    /// All-zero parameters.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = block_specs(config);
        let blocks = specs
            .into_iter()
            .map(|(name, shape, group)| ParamBlock {
                data: vec![T::zero(); shape.iter().product()],
                name,
                shape,
                group,
            })
            .collect();
        Ok(NetParams {
            config: config.clone(),
            blocks,
            layout,
        })
    }

    /// He-normal weights, zero biases and a zero localizer, drawn from
    /// `config.seed`. The map head also starts at zero, so the initial map
    /// term equals the energy of the targets.
    pub fn init(config: &NetConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for b in p.blocks.iter_mut() {
            if b.shape.len() == 1 || b.group == Group::Localizer || b.name == "minutiae.map.w" {
                continue;
            }
            let fan_in: usize = b.shape[1..].iter().product();
            let gain = if b.name.starts_with("cls") || b.name.ends_with(".fc.w") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for v in b.data.iter_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from named blocks, checking names and shapes.
    pub fn from_blocks(config: &NetConfig, blocks: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if blocks.len() != p.blocks.len() {
            return Err(validation(format!(
                "expected {} parameter blocks, got {}",
                p.blocks.len(),
                blocks.len()
            )));
        }
        for (dst, (name, shape, data)) in p.blocks.iter_mut().zip(blocks) {
            if dst.name != name || dst.shape != shape || data.len() != dst.data.len() {
                return Err(validation(format!(
                    "block {name} {shape:?} does not match expected {} {:?}",
                    dst.name, dst.shape
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(validation(format!("block {name} contains non-finite values")));
            }
            dst.data = data;
        }
        Ok(p)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock<T>> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock<T>> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub(crate) fn data(&self, i: usize) -> &[T] {
        &self.blocks[i].data
    }

    /// Weight and bias of the layer whose weight sits at `i`.
    pub(crate) fn pair_mut(&mut self, i: usize) -> (&mut [T], &mut [T]) {
        let (a, b) = self.blocks.split_at_mut(i + 1);
        (&mut a[i].data, &mut b[0].data)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// `Σ θ²` over every parameter.
    pub fn sum_squares(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| &b.data)
            .map(|v| v.f64() * v.f64())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks.iter_mut() {
            b.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Element type conversion, e.g. to `f64` for gradient verification.
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    data: b.data.iter().map(|v| U::of(v.f64())).collect(),
                    group: b.group,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += scale · other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }
}
