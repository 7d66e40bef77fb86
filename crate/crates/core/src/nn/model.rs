use std::hash::{Hash, Hasher};

use super::layers::{self, ConvGeom, FeatureMap, NormCache};
use super::{Arch, ClassifierParams, ClassifierSpec, Init, Mode, ParamGrads, DILATION_RATES, OUTPUT_CHANNELS};
use crate::ensemble::ProbVolume;
use crate::error::{Error, Result};
use crate::volume::CineVolume;

pub(crate) struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// conv → instance norm → ReLU, addressed by tensor indices.
#[derive(Debug, Clone, Copy)]
struct Block {
    weight: usize,
    gamma: usize,
    beta: usize,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct Up {
    weight: usize,
    bias: usize,
    cout: usize,
}

enum Mid {
    Double([Block; 2]),
    Dilated { branches: Vec<Block>, fuse: Block },
}

pub(crate) struct Topology {
    pub layout: Vec<LayoutEntry>,
    enc: Vec<[Block; 2]>,
    mid: Mid,
    /// Deepest stage first.
    dec: Vec<(Up, [Block; 2])>,
    head_weight: usize,
    head_bias: usize,
    head_cin: usize,
    dropout_p: f64,
}

struct Builder {
    layout: Vec<LayoutEntry>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.layout.push(LayoutEntry { name, shape, init });
        self.layout.len() - 1
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Block {
        let fan_in = cin * kernel * kernel;
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, kernel, kernel],
            Init::Normal { fan_in, gain: 2.0 },
        );
        let gamma = self.push(format!("{prefix}.norm.gamma"), vec![cout], Init::Ones);
        let beta = self.push(format!("{prefix}.norm.beta"), vec![cout], Init::Zeros);
        Block { weight, gamma, beta, geom: ConvGeom { cin, cout, kernel, dilation } }
    }

    fn double(&mut self, prefix: &str, cin: usize, cout: usize) -> [Block; 2] {
        [self.block(&format!("{prefix}.conv0"), cin, cout, 3, 1), self.block(&format!("{prefix}.conv1"), cout, cout, 3, 1)]
    }
}

impl Topology {
    pub fn new(spec: &ClassifierSpec) -> Topology {
        let mut b = Builder { layout: Vec::new() };
        let levels = spec.depth_levels;
        let mut enc = Vec::with_capacity(levels);
        let mut cin = 1;
        for k in 0..levels {
            let c = spec.level_channels(k);
            enc.push(b.double(&format!("enc{k}"), cin, c));
            cin = c;
        }
        let bn = spec.bottleneck_channels;
        let mid = match spec.arch {
            Arch::UnetLite => Mid::Double(b.double("mid", cin, bn)),
            Arch::DilatedLite => {
                let branches = DILATION_RATES.iter().map(|&r| b.block(&format!("mid.branch{r}"), cin, bn, 3, r)).collect();
                let fuse = b.block("mid.fuse", bn * DILATION_RATES.len(), bn, 1, 1);
                Mid::Dilated { branches, fuse }
            }
        };
        let mut dec = Vec::with_capacity(levels);
        let mut prev = bn;
        for k in (0..levels).rev() {
            let c = spec.level_channels(k);
            let weight = b.push(format!("dec{k}.up.weight"), vec![prev, c, 2, 2], Init::Normal { fan_in: prev, gain: 2.0 });
            let bias = b.push(format!("dec{k}.up.bias"), vec![c], Init::Zeros);
            let blocks = b.double(&format!("dec{k}"), 2 * c, c);
            dec.push((Up { weight, bias, cout: c }, blocks));
            prev = c;
        }
        let head_cin = spec.level_channels(0);
        let head_weight = b.push("head.weight".into(), vec![OUTPUT_CHANNELS, head_cin, 1, 1], Init::Normal { fan_in: head_cin, gain: 1.0 });
        let head_bias = b.push("head.bias".into(), vec![OUTPUT_CHANNELS], Init::Zeros);
        Topology { layout: b.layout, enc, mid, dec, head_weight, head_bias, head_cin, dropout_p: spec.dropout_p }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: FeatureMap,
    norm: NormCache,
    out: FeatureMap,
}

fn block_forward(p: &ClassifierParams, b: &Block, input: FeatureMap) -> BlockCache {
    let conv = layers::conv_forward(&input, &p.tensors[b.weight].data, b.geom);
    let (mut out, norm) = layers::instance_norm_forward(&conv, &p.tensors[b.gamma].data, &p.tensors[b.beta].data);
    layers::relu_inplace(&mut out);
    BlockCache { input, norm, out }
}

fn block_backward(p: &ClassifierParams, b: &Block, cache: &BlockCache, mut dout: FeatureMap, grads: &mut ParamGrads) -> FeatureMap {
    layers::relu_backward_inplace(&cache.out, &mut dout);
    let (dgamma, dbeta) = two_mut(grads, b.gamma, b.beta);
    let dconv = layers::instance_norm_backward(&cache.norm, &p.tensors[b.gamma].data, &dout, dgamma, dbeta);
    layers::conv_backward(&cache.input, &p.tensors[b.weight].data, b.geom, &dconv, &mut grads[b.weight])
}

fn two_mut(grads: &mut ParamGrads, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert!(i < j);
    let (lo, hi) = grads.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_data(a.c + b.c, a.h, a.w, data)
}

fn split(x: FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let n = first * x.hw();
    let (h, w) = (x.h, x.w);
    let mut data = x.data;
    let rest = data.split_off(n);
    (FeatureMap::from_data(first, h, w, data), FeatureMap::from_data(x.c - first, h, w, rest))
}

struct EncCache {
    blocks: [BlockCache; 2],
    argmax: Vec<u32>,
}

enum MidCache {
    Double([BlockCache; 2]),
    Dilated { branches: Vec<BlockCache>, fuse: BlockCache },
}

struct DecCache {
    up_input: FeatureMap,
    blocks: [BlockCache; 2],
}

/// Everything the backward pass of one slice needs.
pub struct SliceTape {
    enc: Vec<EncCache>,
    mid: MidCache,
    dropout: Option<Vec<f64>>,
    dec: Vec<DecCache>,
    head_input: FeatureMap,
    probs: FeatureMap,
}

impl SliceTape {
    /// Per-pixel class probabilities, `4 × H × W`.
    pub fn probs(&self) -> &FeatureMap {
        &self.probs
    }

    pub fn into_probs(self) -> FeatureMap {
        self.probs
    }

    /// Hash of every ReLU on/off state and max-pool winner. Two forward
    /// passes with equal signatures lie in the same smooth region of the
    /// network function.
    pub fn activation_signature(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        let mut relu = |c: &BlockCache| {
            for v in &c.out.data {
                (*v > 0.0).hash(&mut hasher);
            }
        };
        for e in &self.enc {
            e.blocks.iter().for_each(&mut relu);
        }
        match &self.mid {
            MidCache::Double(b) => b.iter().for_each(&mut relu),
            MidCache::Dilated { branches, fuse } => {
                branches.iter().for_each(&mut relu);
                relu(fuse);
            }
        }
        for d in &self.dec {
            d.blocks.iter().for_each(&mut relu);
        }
        for e in &self.enc {
            e.argmax.hash(&mut hasher);
        }
        hasher.finish()
    }

    /// Backpropagates `dprobs` (gradient w.r.t. the output probabilities)
    /// and accumulates parameter gradients into `grads`.
    pub fn backward(&self, params: &ClassifierParams, dprobs: &FeatureMap, grads: &mut ParamGrads) {
        let topo = Topology::new(&params.spec);
        let dlogits = layers::softmax_channels_backward(&self.probs, dprobs);
        let (dw, db) = two_mut(grads, topo.head_weight, topo.head_bias);
        for (c, g) in db.iter_mut().enumerate() {
            *g += dlogits.channel(c).iter().sum::<f64>();
        }
        let head_geom = ConvGeom { cin: topo.head_cin, cout: OUTPUT_CHANNELS, kernel: 1, dilation: 1 };
        let mut d = layers::conv_backward(&self.head_input, &params.tensors[topo.head_weight].data, head_geom, &dlogits, dw);

        let levels = topo.enc.len();
        let mut dskips: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
        for (i, ((up, blocks), cache)) in topo.dec.iter().zip(&self.dec).enumerate().rev() {
            d = block_backward(params, &blocks[1], &cache.blocks[1], d, grads);
            d = block_backward(params, &blocks[0], &cache.blocks[0], d, grads);
            let (dup, dskip) = split(d, up.cout);
            dskips[levels - 1 - i] = Some(dskip);
            let (dw, db) = two_mut(grads, up.weight, up.bias);
            d = layers::upconv_backward(&cache.up_input, &params.tensors[up.weight].data, &dup, dw, db);
        }

        if let Some(mask) = &self.dropout {
            for (g, m) in d.data.iter_mut().zip(mask) {
                *g *= m;
            }
        }

        d = match (&topo.mid, &self.mid) {
            (Mid::Double(blocks), MidCache::Double(caches)) => {
                let d1 = block_backward(params, &blocks[1], &caches[1], d, grads);
                block_backward(params, &blocks[0], &caches[0], d1, grads)
            }
            (Mid::Dilated { branches, fuse }, MidCache::Dilated { branches: bc, fuse: fc }) => {
                let mut dcat = block_backward(params, fuse, fc, d, grads);
                let mut dinput: Option<FeatureMap> = None;
                for (b, c) in branches.iter().zip(bc).rev() {
                    let first = dcat.c - b.geom.cout;
                    let (rest, mine) = split(dcat, first);
                    dcat = rest;
                    let di = block_backward(params, b, c, mine, grads);
                    dinput = Some(match dinput {
                        None => di,
                        Some(mut acc) => {
                            acc.data.iter_mut().zip(&di.data).for_each(|(a, x)| *a += x);
                            acc
                        }
                    });
                }
                dinput.expect("at least one branch")
            }
            _ => unreachable!("tape built from a different topology"),
        };

        for (k, (blocks, cache)) in topo.enc.iter().zip(&self.enc).enumerate().rev() {
            let pre = &cache.blocks[1].out;
            let mut dpre = layers::maxpool_backward(&cache.argmax, &d, pre.c, pre.h, pre.w);
            if let Some(ds) = dskips[k].take() {
                dpre.data.iter_mut().zip(&ds.data).for_each(|(a, x)| *a += x);
            }
            d = block_backward(params, &blocks[1], &cache.blocks[1], dpre, grads);
            d = block_backward(params, &blocks[0], &cache.blocks[0], d, grads);
        }
    }
}

fn check_input(spec: &ClassifierSpec, len: usize, h: usize, w: usize) -> Result<()> {
    let m = spec.size_multiple();
    if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::shape(format!("slice {h}x{w} not divisible by {m} ({} levels)", spec.depth_levels)));
    }
    if len != h * w {
        return Err(Error::shape(format!("slice buffer has {len} values, expected {h}x{w}")));
    }
    Ok(())
}

/// Runs one slice and keeps the intermediate activations for backward.
pub fn forward_slice_cached(params: &ClassifierParams, slice: &[f64], h: usize, w: usize, mode: Mode) -> Result<SliceTape> {
    check_input(&params.spec, slice.len(), h, w)?;
    let topo = Topology::new(&params.spec);
    let mut x = FeatureMap::from_data(1, h, w, slice.to_vec());

    let mut enc = Vec::with_capacity(topo.enc.len());
    for blocks in &topo.enc {
        let b0 = block_forward(params, &blocks[0], x);
        let b1 = block_forward(params, &blocks[1], b0.out.clone());
        let (pooled, argmax) = layers::maxpool_forward(&b1.out);
        enc.push(EncCache { blocks: [b0, b1], argmax });
        x = pooled;
    }

    let (mut x, mid) = match &topo.mid {
        Mid::Double(blocks) => {
            let b0 = block_forward(params, &blocks[0], x);
            let b1 = block_forward(params, &blocks[1], b0.out.clone());
            (b1.out.clone(), MidCache::Double([b0, b1]))
        }
        Mid::Dilated { branches, fuse } => {
            let caches: Vec<BlockCache> = branches.iter().map(|b| block_forward(params, b, x.clone())).collect();
            let mut cat = caches[0].out.clone();
            for c in &caches[1..] {
                cat = concat(&cat, &c.out);
            }
            let f = block_forward(params, fuse, cat);
            (f.out.clone(), MidCache::Dilated { branches: caches, fuse: f })
        }
    };

    let dropout = match mode {
        Mode::Train { dropout_seed } if topo.dropout_p > 0.0 => {
            let mask = layers::dropout_mask(x.data.len(), topo.dropout_p, dropout_seed);
            x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            Some(mask)
        }
        _ => None,
    };

    let mut dec = Vec::with_capacity(topo.dec.len());
    for ((up, blocks), level) in topo.dec.iter().zip((0..topo.enc.len()).rev()) {
        let up_input = x;
        let upsampled = layers::upconv_forward(&up_input, &params.tensors[up.weight].data, &params.tensors[up.bias].data, up.cout);
        let cat = concat(&upsampled, &enc[level].blocks[1].out);
        let b0 = block_forward(params, &blocks[0], cat);
        let b1 = block_forward(params, &blocks[1], b0.out.clone());
        x = b1.out.clone();
        dec.push(DecCache { up_input, blocks: [b0, b1] });
    }

    let head_geom = ConvGeom { cin: topo.head_cin, cout: OUTPUT_CHANNELS, kernel: 1, dilation: 1 };
    let mut logits = layers::conv_forward(&x, &params.tensors[topo.head_weight].data, head_geom);
    let bias = &params.tensors[topo.head_bias].data;
    for c in 0..OUTPUT_CHANNELS {
        let hw = logits.hw();
        logits.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += bias[c]);
    }
    let probs = layers::softmax_channels(&logits);
    Ok(SliceTape { enc, mid, dropout, dec, head_input: x, probs })
}

/// Class probabilities `4 × H × W` for one slice.
pub fn forward_slice(params: &ClassifierParams, slice: &[f64], h: usize, w: usize, mode: Mode) -> Result<FeatureMap> {
    forward_slice_cached(params, slice, h, w, mode).map(SliceTape::into_probs)
}

/// Dropout seed of slice `d` derived from a frame-level seed.
pub(crate) fn slice_seed(seed: u64, d: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add((d as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs every slice of `v` independently and stacks the results.
pub fn forward_volume(params: &ClassifierParams, v: &CineVolume, mode: Mode, classifier_id: usize) -> Result<ProbVolume> {
    let s = v.shape();
    let mut data = Vec::with_capacity(s.len() * OUTPUT_CHANNELS);
    for d in 0..s.depth {
        let slice: Vec<f64> = v.slice(d).iter().map(|&x| x as f64).collect();
        let m = match mode {
            Mode::Eval => Mode::Eval,
            Mode::Train { dropout_seed } => Mode::Train { dropout_seed: slice_seed(dropout_seed, d) },
        };
        data.extend(forward_slice(params, &slice, s.height, s.width, m)?.data);
    }
    let mut out = ProbVolume::new(classifier_id, s, data)?;
    out.frame_id = v.frame_id.clone();
    Ok(out)
}
