//! MS U-Net and the plain U-Net baseline.
//!
//! The encoder of the multi-scale variant runs three sets of 3x3 kernels
//! per block: one at the block's input resolution, one with stride and
//! dilation 2, one with stride and dilation 4. The reduced maps are scaled
//! back up with bilinear interpolation, concatenated, optionally fused by
//! a 3x3 convolution back to the block width, and max-pooled. The pre-pool
//! (fused) map is the skip connection. Decoder blocks are a 2x up-convolution,
//! concatenation with the matching skip, and a single 3x3 convolution.
//!
//! Channel widths double per encoder level: `C_b = base_channels * 2^b`.
//! With the fusion convolution enabled the skip widths equal a standard
//! U-Net's, so the same decoder serves both architectures.

pub mod checkpoint;

use ndarray::{Array4, ArrayViewD};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{check_divisible, Conv2d, UpConv2d};
use crate::nn::ops::{
    bilinear_up_backward, bilinear_up_forward, concat_channels, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, split_channels,
};
use crate::nn::{ParamMut, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};

/// Architecture hyperparameters. Shared by the MS U-Net and the baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of encoder blocks.
    pub depth: usize,
    /// Output channels of the first block; widths double per level.
    pub base_channels: usize,
    /// Scale factors of the encoder kernel sets. Must be ascending powers
    /// of two starting at 1.
    pub scales: Vec<usize>,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Fuse the concatenated multi-scale maps back to the block width with
    /// a 3x3 convolution. Disabling keeps the literal concat width.
    pub fusion_conv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 32,
            scales: vec![1, 2, 4],
            in_channels: 3,
            out_classes: 2,
            fusion_conv: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("model.depth must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("model.base_channels must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("model.in_channels must be >= 1".into()));
        }
        if self.out_classes != 2 {
            return Err(Error::Config(
                "model.out_classes must be 2 (binary softmax head)".into(),
            ));
        }
        if self.scales.is_empty() || self.scales[0] != 1 {
            return Err(Error::Config("model.scales must start at 1".into()));
        }
        for w in self.scales.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("model.scales must be ascending".into()));
            }
        }
        if self.scales.iter().any(|s| !s.is_power_of_two()) {
            return Err(Error::Config("model.scales must be powers of two".into()));
        }
        Ok(())
    }

    /// Spatial dims of any input must be divisible by this.
    pub fn divisor(&self) -> usize {
        (1 << self.depth) * self.scales.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    MsUnet,
    BaselineUnet,
}

struct MsBlock<F: Scalar> {
    branches: Vec<Conv2d<F>>,
    scales: Vec<usize>,
    fusion: Option<Conv2d<F>>,
}

struct PlainBlock<F: Scalar> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
}

enum EncBlock<F: Scalar> {
    Ms(MsBlock<F>),
    Plain(PlainBlock<F>),
}

struct DecBlock<F: Scalar> {
    up: UpConv2d<F>,
    conv: Conv2d<F>,
}

enum EncCache<F: Scalar> {
    Ms {
        x: Array4<F>,
        branch_act: Vec<Array4<F>>,
        cat: Array4<F>,
        fused: Option<Array4<F>>,
        pool_idx: Array4<u8>,
    },
    Plain {
        x: Array4<F>,
        a1: Array4<F>,
        a2: Array4<F>,
        pool_idx: Array4<u8>,
    },
}

struct DecCache<F: Scalar> {
    x: Array4<F>,
    cat: Array4<F>,
    out: Array4<F>,
}

/// Activation cache from a training forward pass, consumed by `backward`.
pub struct ForwardCache<F: Scalar> {
    enc: Vec<EncCache<F>>,
    dec: Vec<DecCache<F>>,
}

/// A built segmentation network (either architecture).
pub struct SegModel<F: Scalar> {
    pub arch: ArchKind,
    pub config: ModelConfig,
    enc: Vec<EncBlock<F>>,
    dec: Vec<DecBlock<F>>,
    head: Conv2d<F>,
}

/// Build the multi-scale U-Net.
pub fn build_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<SegModel<F>> {
    SegModel::new(ArchKind::MsUnet, config, seed)
}

/// Build the plain U-Net baseline (two 3x3 convolutions per encoder block,
/// same depth and widths, same decoder).
pub fn build_baseline_unet<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<SegModel<F>> {
    SegModel::new(ArchKind::BaselineUnet, config, seed)
}

impl<F: Scalar> SegModel<F> {
    pub fn new(arch: ArchKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut enc = Vec::with_capacity(config.depth);
        let mut skip_widths = Vec::with_capacity(config.depth);
        let mut c_in = config.in_channels;
        for b in 0..config.depth {
            let c = config.base_channels << b;
            let skip_w = match arch {
                ArchKind::MsUnet => {
                    let branches: Vec<Conv2d<F>> = config
                        .scales
                        .iter()
                        .map(|&s| Conv2d::new(c_in, c, 3, s, s, s, &mut rng))
                        .collect();
                    let fusion = if config.fusion_conv {
                        Some(Conv2d::new(config.scales.len() * c, c, 3, 1, 1, 1, &mut rng))
                    } else {
                        None
                    };
                    let w = if config.fusion_conv {
                        c
                    } else {
                        config.scales.len() * c
                    };
                    enc.push(EncBlock::Ms(MsBlock {
                        branches,
                        scales: config.scales.clone(),
                        fusion,
                    }));
                    w
                }
                ArchKind::BaselineUnet => {
                    enc.push(EncBlock::Plain(PlainBlock {
                        conv1: Conv2d::new(c_in, c, 3, 1, 1, 1, &mut rng),
                        conv2: Conv2d::new(c, c, 3, 1, 1, 1, &mut rng),
                    }));
                    c
                }
            };
            skip_widths.push(skip_w);
            c_in = skip_w;
        }

        // decoder runs deepest-first; dec[i] pairs with skip level depth-1-i
        let mut dec = Vec::with_capacity(config.depth);
        let mut c_dec = *skip_widths.last().expect("depth >= 1");
        for i in 0..config.depth {
            let skip_w = skip_widths[config.depth - 1 - i];
            dec.push(DecBlock {
                up: UpConv2d::new(c_dec, skip_w, &mut rng),
                conv: Conv2d::new(2 * skip_w, skip_w, 3, 1, 1, 1, &mut rng),
            });
            c_dec = skip_w;
        }
        let head = Conv2d::new(c_dec, config.out_classes, 1, 1, 1, 0, &mut rng);
        Ok(SegModel {
            arch,
            config: config.clone(),
            enc,
            dec,
            head,
        })
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        check_divisible(h, w, self.config.divisor())
    }

    /// Inference forward pass: returns logits `[B, out_classes, H, W]`.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips: Vec<Array4<F>> = Vec::with_capacity(self.enc.len());
        for blk in &self.enc {
            let (skip, pooled) = match blk {
                EncBlock::Ms(ms) => {
                    let skip = ms_block_eval(ms, &cur);
                    let (pooled, _) = maxpool2_forward(&skip);
                    (skip, pooled)
                }
                EncBlock::Plain(pl) => {
                    let a1 = relu_forward(&pl.conv1.forward(&cur));
                    let a2 = relu_forward(&pl.conv2.forward(&a1));
                    let (pooled, _) = maxpool2_forward(&a2);
                    (a2, pooled)
                }
            };
            skips.push(skip);
            cur = pooled;
        }
        for (i, d) in self.dec.iter().enumerate() {
            let skip = &skips[self.enc.len() - 1 - i];
            let u = d.up.forward(&cur);
            let cat = concat_channels(&[u.view(), skip.view()]);
            cur = relu_forward(&d.conv.forward(&cat));
        }
        Ok(self.head.forward(&cur))
    }

    /// Training forward pass: returns logits plus the activation cache.
    pub fn forward_train(&self, x: &Array4<F>) -> Result<(Array4<F>, ForwardCache<F>)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut cur = x.clone();
        for blk in &self.enc {
            match blk {
                EncBlock::Ms(ms) => {
                    let x_in = cur;
                    let mut branch_act = Vec::with_capacity(ms.branches.len());
                    let mut ups = Vec::with_capacity(ms.branches.len());
                    for (conv, &s) in ms.branches.iter().zip(&ms.scales) {
                        let a = relu_forward(&conv.forward(&x_in));
                        let u = if s > 1 {
                            bilinear_up_forward(&a, s)
                        } else {
                            a.clone()
                        };
                        branch_act.push(a);
                        ups.push(u);
                    }
                    let cat =
                        concat_channels(&ups.iter().map(|u| u.view()).collect::<Vec<_>>());
                    let (skip, fused) = match &ms.fusion {
                        Some(f) => {
                            let fused = relu_forward(&f.forward(&cat));
                            (fused.clone(), Some(fused))
                        }
                        None => (cat.clone(), None),
                    };
                    let (pooled, pool_idx) = maxpool2_forward(&skip);
                    enc_caches.push(EncCache::Ms {
                        x: x_in,
                        branch_act,
                        cat,
                        fused,
                        pool_idx,
                    });
                    cur = pooled;
                }
                EncBlock::Plain(pl) => {
                    let x_in = cur;
                    let a1 = relu_forward(&pl.conv1.forward(&x_in));
                    let a2 = relu_forward(&pl.conv2.forward(&a1));
                    let (pooled, pool_idx) = maxpool2_forward(&a2);
                    enc_caches.push(EncCache::Plain {
                        x: x_in,
                        a1,
                        a2,
                        pool_idx,
                    });
                    cur = pooled;
                }
            }
        }
        let mut dec_caches: Vec<DecCache<F>> = Vec::with_capacity(self.dec.len());
        for (i, d) in self.dec.iter().enumerate() {
            let skip = match &enc_caches[self.enc.len() - 1 - i] {
                EncCache::Ms { cat, fused, .. } => fused.as_ref().unwrap_or(cat),
                EncCache::Plain { a2, .. } => a2,
            };
            let u = d.up.forward(&cur);
            let cat = concat_channels(&[u.view(), skip.view()]);
            let out = relu_forward(&d.conv.forward(&cat));
            dec_caches.push(DecCache {
                x: cur,
                cat,
                out: out.clone(),
            });
            cur = out;
        }
        let logits = self.head.forward(&cur);
        Ok((
            logits,
            ForwardCache {
                enc: enc_caches,
                dec: dec_caches,
            },
        ))
    }

    /// Backpropagate `dlogits`, accumulating parameter gradients.
    pub fn backward(&mut self, cache: &ForwardCache<F>, dlogits: &Array4<F>) {
        let depth = self.enc.len();
        let head_in = &cache.dec.last().expect("depth >= 1").out;
        let mut d = self.head.backward(head_in, dlogits);

        let mut d_skips: Vec<Option<Array4<F>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let dcache = &cache.dec[i];
            let dz = relu_backward(&dcache.out, &d);
            let dcat = self.dec[i].conv.backward(&dcache.cat, &dz);
            let up_w = self.dec[i].up.c_out();
            let skip_w = dcat.dim().1 - up_w;
            let parts = split_channels(&dcat, &[up_w, skip_w]);
            d_skips[depth - 1 - i] = Some(parts[1].clone());
            d = self.dec[i].up.backward(&dcache.x, &parts[0]);
        }

        for b in (0..depth).rev() {
            let d_skip_from_dec = d_skips[b].take().expect("skip grad present");
            match (&mut self.enc[b], &cache.enc[b]) {
                (
                    EncBlock::Ms(ms),
                    EncCache::Ms {
                        x,
                        branch_act,
                        cat,
                        fused,
                        pool_idx,
                    },
                ) => {
                    let mut d_skip = maxpool2_backward(&d, pool_idx);
                    d_skip += &d_skip_from_dec;
                    let dcat = match (&mut ms.fusion, fused) {
                        (Some(f), Some(fused_act)) => {
                            let dz = relu_backward(fused_act, &d_skip);
                            f.backward(cat, &dz)
                        }
                        _ => d_skip,
                    };
                    let c = ms.branches[0].c_out();
                    let widths: Vec<usize> = ms.branches.iter().map(|_| c).collect();
                    let parts = split_channels(&dcat, &widths);
                    let mut dx: Option<Array4<F>> = None;
                    for ((conv, &s), (du, act)) in ms
                        .branches
                        .iter_mut()
                        .zip(&ms.scales)
                        .zip(parts.iter().zip(branch_act))
                    {
                        let da = if s > 1 {
                            bilinear_up_backward(du, s)
                        } else {
                            du.clone()
                        };
                        let dz = relu_backward(act, &da);
                        let dxi = conv.backward(x, &dz);
                        match &mut dx {
                            Some(acc) => *acc += &dxi,
                            None => dx = Some(dxi),
                        }
                    }
                    d = dx.expect("at least one branch");
                }
                (EncBlock::Plain(pl), EncCache::Plain { x, a1, a2, pool_idx }) => {
                    let mut d_skip = maxpool2_backward(&d, pool_idx);
                    d_skip += &d_skip_from_dec;
                    let dz2 = relu_backward(a2, &d_skip);
                    let da1 = pl.conv2.backward(a1, &dz2);
                    let dz1 = relu_backward(a1, &da1);
                    d = pl.conv1.backward(x, &dz1);
                }
                _ => unreachable!("cache kind matches block kind"),
            }
        }
    }

    /// All parameters with their gradients, in a stable order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        let mut out = Vec::new();
        for (i, blk) in self.enc.iter_mut().enumerate() {
            match blk {
                EncBlock::Ms(ms) => {
                    for (j, conv) in ms.branches.iter_mut().enumerate() {
                        push_conv(&mut out, format!("enc{i}.branch{j}"), conv);
                    }
                    if let Some(f) = &mut ms.fusion {
                        push_conv(&mut out, format!("enc{i}.fusion"), f);
                    }
                }
                EncBlock::Plain(pl) => {
                    push_conv(&mut out, format!("enc{i}.conv1"), &mut pl.conv1);
                    push_conv(&mut out, format!("enc{i}.conv2"), &mut pl.conv2);
                }
            }
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("dec{i}.up.weight"),
                value: d.up.weight.view_mut().into_dyn(),
                grad: d.up.grad_weight.view_mut().into_dyn(),
            });
            out.push(ParamMut {
                name: format!("dec{i}.up.bias"),
                value: d.up.bias.view_mut().into_dyn(),
                grad: d.up.grad_bias.view_mut().into_dyn(),
            });
            push_conv(&mut out, format!("dec{i}.conv"), &mut d.conv);
        }
        push_conv(&mut out, "head".to_string(), &mut self.head);
        out
    }

    /// Read-only parameter views in the same order as `params_mut`.
    pub fn params(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, blk) in self.enc.iter().enumerate() {
            match blk {
                EncBlock::Ms(ms) => {
                    for (j, conv) in ms.branches.iter().enumerate() {
                        out.push((format!("enc{i}.branch{j}.weight"), conv.weight.view().into_dyn()));
                        out.push((format!("enc{i}.branch{j}.bias"), conv.bias.view().into_dyn()));
                    }
                    if let Some(f) = &ms.fusion {
                        out.push((format!("enc{i}.fusion.weight"), f.weight.view().into_dyn()));
                        out.push((format!("enc{i}.fusion.bias"), f.bias.view().into_dyn()));
                    }
                }
                EncBlock::Plain(pl) => {
                    out.push((format!("enc{i}.conv1.weight"), pl.conv1.weight.view().into_dyn()));
                    out.push((format!("enc{i}.conv1.bias"), pl.conv1.bias.view().into_dyn()));
                    out.push((format!("enc{i}.conv2.weight"), pl.conv2.weight.view().into_dyn()));
                    out.push((format!("enc{i}.conv2.bias"), pl.conv2.bias.view().into_dyn()));
                }
            }
        }
        for (i, d) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.up.weight"), d.up.weight.view().into_dyn()));
            out.push((format!("dec{i}.up.bias"), d.up.bias.view().into_dyn()));
            out.push((format!("dec{i}.conv.weight"), d.conv.weight.view().into_dyn()));
            out.push((format!("dec{i}.conv.bias"), d.conv.bias.view().into_dyn()));
        }
        out.push(("head.weight".to_string(), self.head.weight.view().into_dyn()));
        out.push(("head.bias".to_string(), self.head.bias.view().into_dyn()));
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            let mut g = p.grad;
            g.fill(F::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    /// Zero out the head so the softmax output is exactly 0.5 everywhere.
    /// Used by tests for the tie-break contracts.
    pub fn zero_head(&mut self) {
        self.head.weight.fill(F::zero());
        self.head.bias.fill(F::zero());
    }
}

fn push_conv<'a, F: Scalar>(out: &mut Vec<ParamMut<'a, F>>, prefix: String, conv: &'a mut Conv2d<F>) {
    out.push(ParamMut {
        name: format!("{prefix}.weight"),
        value: conv.weight.view_mut().into_dyn(),
        grad: conv.grad_weight.view_mut().into_dyn(),
    });
    out.push(ParamMut {
        name: format!("{prefix}.bias"),
        value: conv.bias.view_mut().into_dyn(),
        grad: conv.grad_bias.view_mut().into_dyn(),
    });
}

fn ms_block_eval<F: Scalar>(ms: &MsBlock<F>, x: &Array4<F>) -> Array4<F> {
    let ups: Vec<Array4<F>> = ms
        .branches
        .iter()
        .zip(&ms.scales)
        .map(|(conv, &s)| {
            let a = relu_forward(&conv.forward(x));
            if s > 1 {
                bilinear_up_forward(&a, s)
            } else {
                a
            }
        })
        .collect();
    let cat = concat_channels(&ups.iter().map(|u| u.view()).collect::<Vec<_>>());
    match &ms.fusion {
        Some(f) => relu_forward(&f.forward(&cat)),
        None => cat,
    }
}

/// Two-class softmax over the channel axis; returns the foreground
/// (channel 1) probability map `[B, H, W]`.
pub fn softmax_foreground<F: Scalar>(logits: &Array4<F>) -> ndarray::Array3<F> {
    let (b, c, h, w) = logits.dim();
    assert_eq!(c, 2, "binary head expected");
    let mut p = ndarray::Array3::<F>::zeros((b, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let z0 = logits[[bi, 0, i, j]];
                let z1 = logits[[bi, 1, i, j]];
                let m = if z0 > z1 { z0 } else { z1 };
                let e0 = (z0 - m).exp();
                let e1 = (z1 - m).exp();
                p[[bi, i, j]] = e1 / (e0 + e1);
            }
        }
    }
    p
}
