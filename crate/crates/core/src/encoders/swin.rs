//! Shifted-window transformer over an interval x frequency patch grid.
//!
//! Window partitioning, cyclic shifting and grid padding are expressed as
//! index gathers computed once per block by [`WindowLayout`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datamodel::ModalitySpec;
use crate::error::{Error, Result};
use crate::nn::{softmax, LayerNorm, Linear, ParamStore};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub embed_dim: usize,
    pub patch_intervals: usize,
    /// Patch width along frequency for modalities with at least
    /// `wide_min_bins` bins.
    pub wide_patch_bins: usize,
    pub narrow_patch_bins: usize,
    pub wide_min_bins: usize,
    pub window: usize,
    pub heads: usize,
    /// Blocks per stage; the grid is merged 2x2 between stages.
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            patch_intervals: 2,
            wide_patch_bins: 32,
            narrow_patch_bins: 2,
            wide_min_bins: 64,
            window: 5,
            heads: 2,
            depths: vec![2, 2],
            mlp_ratio: 2,
        }
    }
}

impl SwinConfig {
    pub fn check(&self) -> Result<()> {
        let sizes = [
            self.embed_dim,
            self.patch_intervals,
            self.wide_patch_bins,
            self.narrow_patch_bins,
            self.window,
            self.heads,
            self.mlp_ratio,
        ];
        if sizes.contains(&0) || self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::Config("SWIN layer sizes must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_for(&self, bins: usize) -> (usize, usize) {
        let pf = if bins >= self.wide_min_bins {
            self.wide_patch_bins
        } else {
            self.narrow_patch_bins
        };
        (self.patch_intervals, pf)
    }
}

/// Token order for attention inside non-overlapping windows.
///
/// The `h x w` grid is padded to whole windows, cyclically shifted by
/// `shift`, and read out window by window. `gather[k]` is the grid token at
/// window-order position `k`, or `h * w` for a padding slot.
/// `scatter[i]` is the window-order position of grid token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub grid: (usize, usize),
    pub padded: (usize, usize),
    pub window: (usize, usize),
    pub shift: (usize, usize),
    pub gather: Vec<u32>,
    pub scatter: Vec<u32>,
    /// Attention bias `[num_windows, win, win]`: 0 where query and key may
    /// interact, a large negative value otherwise.
    pub mask: Vec<f32>,
}

impl WindowLayout {
    pub fn new(grid: (usize, usize), window: usize, shifted: bool) -> Self {
        let (h, w) = grid;
        let wh = window.min(h);
        let ww = window.min(w);
        let hp = h.div_ceil(wh) * wh;
        let wp = w.div_ceil(ww) * ww;
        let sh = if shifted && h > wh { wh / 2 } else { 0 };
        let sw = if shifted && w > ww { ww / 2 } else { 0 };
        let n = h * w;
        let win = wh * ww;
        let windows = (hp / wh) * (wp / ww);
        let mut gather = Vec::with_capacity(windows * win);
        let mut region = Vec::with_capacity(windows * win);
        let mut scatter = vec![0u32; n];
        for wr in 0..hp / wh {
            for wc in 0..wp / ww {
                for a in 0..wh {
                    for b in 0..ww {
                        let r = wr * wh + a;
                        let c = wc * ww + b;
                        let src_r = (r + sh) % hp;
                        let src_c = (c + sw) % wp;
                        let k = gather.len() as u32;
                        if src_r < h && src_c < w {
                            let i = src_r * w + src_c;
                            gather.push(i as u32);
                            scatter[i] = k;
                            region.push(((r + sh >= hp) as u8) << 1 | (c + sw >= wp) as u8);
                        } else {
                            gather.push(n as u32);
                            region.push(u8::MAX);
                        }
                    }
                }
            }
        }
        let mut mask = Vec::with_capacity(windows * win * win);
        for w_idx in 0..windows {
            let reg = &region[w_idx * win..(w_idx + 1) * win];
            for q in reg {
                for k in reg {
                    mask.push(if q == k { 0.0 } else { MASKED as f32 });
                }
            }
        }
        Self {
            grid,
            padded: (hp, wp),
            window: (wh, ww),
            shift: (sh, sw),
            gather,
            scatter,
            mask,
        }
    }

    pub fn num_windows(&self) -> usize {
        (self.padded.0 / self.window.0) * (self.padded.1 / self.window.1)
    }

    pub fn window_len(&self) -> usize {
        self.window.0 * self.window.1
    }
}

/// Appends one zero token so gathers can address padding slots.
fn with_zero_token(x: &Tensor) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    let zero = Tensor::zeros((b, 1, c), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[x, &zero], 1)?)
}

fn index(values: &[u32], x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(values, x.device())?)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    layout: WindowLayout,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        config: &SwinConfig,
        layout: WindowLayout,
    ) -> Result<Self> {
        let hidden = dim * config.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
            heads: config.heads,
            layout,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let nw = self.layout.num_windows();
        let win = self.layout.window_len();
        let hd = c / self.heads;
        let windows = with_zero_token(x)?
            .index_select(&index(&self.layout.gather, x)?, 1)?
            .reshape((b * nw, win, c))?;
        let qkv = self
            .qkv
            .forward(&windows)?
            .reshape((b * nw, win, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = q.matmul(&k.t()?)?.reshape((b, nw, self.heads, win, win))?;
        let mask = Tensor::from_slice(&self.layout.mask, (1, nw, 1, win, win), x.device())?
            .to_dtype(x.dtype())?;
        let attn = softmax(&scores.broadcast_add(&mask)?)?.reshape((b * nw, self.heads, win, win))?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * nw, win, c))?;
        let out = self.proj.forward(&out)?.reshape((b, nw * win, c))?;
        Ok(out.index_select(&index(&self.layout.scatter, x)?, 1)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.relu()?)?;
        Ok((x + y)?)
    }
}

/// Gather order for 2x2 patch merging of an `h x w` grid (padded to even
/// sides). Each output token reads four consecutive entries.
pub fn merge_order(grid: (usize, usize)) -> (Vec<u32>, (usize, usize)) {
    let (h, w) = grid;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let pad = (h * w) as u32;
    let mut order = Vec::with_capacity(oh * ow * 4);
    for i in 0..oh {
        for j in 0..ow {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (r, c) = (2 * i + dr, 2 * j + dc);
                order.push(if r < h && c < w { (r * w + c) as u32 } else { pad });
            }
        }
    }
    (order, (oh, ow))
}

#[derive(Debug, Clone)]
struct Merge {
    order: Vec<u32>,
    norm: LayerNorm,
    reduce: Linear,
    out_tokens: usize,
}

impl Merge {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let y = with_zero_token(x)?
            .index_select(&index(&self.order, x)?, 1)?
            .reshape((b, self.out_tokens, 4 * c))?;
        self.reduce.forward(&self.norm.forward(&y)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    patch: (usize, usize),
    padded_input: (usize, usize),
    grid: (usize, usize),
    embed: Linear,
    position: Tensor,
    stages: Vec<(Vec<Block>, Option<Merge>)>,
    norm: LayerNorm,
    proj: Linear,
}

impl SwinEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &ModalitySpec,
        config: &SwinConfig,
        embedding_dim: usize,
    ) -> Result<Self> {
        let planes = 2 * spec.channels;
        let (pt, pf) = config.patch_for(spec.bins());
        let grid = (spec.num_intervals.div_ceil(pt), spec.bins().div_ceil(pf));
        let padded_input = (grid.0 * pt, grid.1 * pf);
        let mut dim = config.embed_dim;
        let embed = Linear::new(store, &format!("{name}.embed"), planes * pt * pf, dim)?;
        let position = store.uniform(&format!("{name}.position"), &[grid.0 * grid.1, dim], 0.02)?;
        let mut stages = Vec::new();
        let mut g = grid;
        for (s, &depth) in config.depths.iter().enumerate() {
            let blocks = (0..depth)
                .map(|i| {
                    let layout = WindowLayout::new(g, config.window, i % 2 == 1);
                    Block::new(store, &format!("{name}.stage{s}.block{i}"), dim, config, layout)
                })
                .collect::<Result<Vec<_>>>()?;
            let merge = if s + 1 < config.depths.len() {
                let (order, next) = merge_order(g);
                let m = Merge {
                    order,
                    norm: LayerNorm::new(store, &format!("{name}.stage{s}.merge.norm"), 4 * dim)?,
                    reduce: Linear::new(store, &format!("{name}.stage{s}.merge.reduce"), 4 * dim, 2 * dim)?,
                    out_tokens: next.0 * next.1,
                };
                g = next;
                dim *= 2;
                Some(m)
            } else {
                None
            };
            stages.push((blocks, merge));
        }
        Ok(Self {
            patch: (pt, pf),
            padded_input,
            grid,
            embed,
            position,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, embedding_dim)?,
            stages,
        })
    }

    /// `[B, planes, intervals, bins]` to `[B, D]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, planes, intervals, bins) = x.dims4()?;
        let (pt, pf) = self.patch;
        let (ip, fp) = self.padded_input;
        if intervals > ip || bins > fp {
            return Err(Error::ShapeMismatch(format!(
                "input grid {intervals}x{bins} exceeds the configured {ip}x{fp}"
            )));
        }
        let x = x
            .pad_with_zeros(2, 0, ip - intervals)?
            .pad_with_zeros(3, 0, fp - bins)?;
        let (gh, gw) = self.grid;
        let tokens = x
            .reshape((b, planes, gh, pt, gw, pf))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, planes * pt * pf))?;
        let mut h = self.embed.forward(&tokens)?.broadcast_add(&self.position)?;
        for (blocks, merge) in &self.stages {
            for block in blocks {
                h = block.forward(&h)?;
            }
            if let Some(m) = merge {
                h = m.forward(&h)?;
            }
        }
        let pooled = self.norm.forward(&h)?.mean(1)?;
        self.proj.forward(&pooled)
    }
}
