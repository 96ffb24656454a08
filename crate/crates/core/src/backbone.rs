//! Small causal transformer over image patches, instruction tokens and the
//! appended query banks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::QueryKind;
use crate::numerics::graph::{Graph, Mask, Var};
use crate::numerics::nn::{Block, LayerNorm, Linear};
use crate::numerics::{Init, Matrix, ParamStore};

/// RGB image, row-major, channel last, one byte per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Flattened patches as rows of `patch·patch·3` values in [0,1].
    pub fn patches(&self, patch: usize) -> Result<Matrix> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Shape(format!("{}x{} image not divisible into {patch}px patches", self.height, self.width)));
        }
        let (ph, pw) = (self.height / patch, self.width / patch);
        let cols = patch * patch * 3;
        let mut out = Matrix::zeros(ph * pw, cols);
        for py in 0..ph {
            for px in 0..pw {
                let row = out.row_mut(py * pw + px);
                let mut c = 0;
                for y in 0..patch {
                    let base = ((py * patch + y) * self.width + px * patch) * 3;
                    for &b in &self.data[base..base + patch * 3] {
                        row[c] = b as f32 / 255.0;
                        c += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Image::patches`], quantizing to bytes.
    pub fn from_patches(m: &Matrix, height: usize, width: usize, patch: usize) -> Result<Self> {
        let pw = width / patch;
        if m.rows() != (height / patch) * pw || m.cols() != patch * patch * 3 {
            return Err(Error::Shape(format!("patch matrix {:?} for {height}x{width}/{patch}", m.shape())));
        }
        let mut img = Image::new(height, width);
        for r in 0..m.rows() {
            let (py, px) = (r / pw, r % pw);
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..3 {
                        let v = m.get(r, (y * patch + x) * 3 + ch).clamp(0.0, 1.0);
                        img.data[((py * patch + y) * width + px * patch + x) * 3 + ch] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
        Ok(img)
    }
}

/// One camera frame per view; view 0 is the scene, view 1 the wrist crop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub views: Vec<Image>,
}

impl Observation {
    pub fn scene(&self) -> &Image {
        &self.views[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image: usize,
    pub patch: usize,
    pub views: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub instruction_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { image: 24, patch: 8, views: 2, width: 64, heads: 4, layers: 4, mlp_ratio: 4, vocab: 64, instruction_len: 6 }
    }
}

impl BackboneConfig {
    pub fn patches_per_view(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Config(format!("image {} not divisible by patch {}", self.image, self.patch)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.views == 0 {
            return Err(Error::Config("at least one view is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    View(usize),
    Instruction,
    Query(QueryKind),
}

/// Token rows in fixed order with their boundaries.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    /// `(segment, start, end)`, contiguous and strictly increasing.
    pub segments: Vec<(Segment, usize, usize)>,
    pub len: usize,
}

impl TokenSequence {
    pub fn range(&self, seg: Segment) -> Option<(usize, usize)> {
        self.segments.iter().find(|s| s.0 == seg).map(|s| (s.1, s.2))
    }
}

pub struct Encoded {
    pub hidden: Var,
    pub seq: TokenSequence,
    pub action: Var,
    pub hindsight: Option<Var>,
    pub frame: Option<Var>,
    pub chunk: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_proj: Linear,
    pub patch_pos: crate::numerics::ParamId,
    pub view_code: crate::numerics::ParamId,
    pub token_embed: crate::numerics::ParamId,
    pub token_pos: crate::numerics::ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

pub const PREFIX: &str = "backbone.";
const POS_STD: f64 = 0.5;

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let patch_proj = Linear::new(store, "backbone.patch", cfg.patch * cfg.patch * 3, d, true)?;
        let patch_pos = store.add("backbone.patch_pos", cfg.patches_per_view(), d, Init::TruncNormal(POS_STD))?;
        let view_code = store.add("backbone.view_code", cfg.views, d, Init::TruncNormal(POS_STD))?;
        let token_embed = store.add("backbone.token_embed", cfg.vocab, d, Init::TruncNormal(0.02))?;
        let token_pos = store.add("backbone.token_pos", cfg.instruction_len, d, Init::TruncNormal(0.02))?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("backbone.layer{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "backbone.ln_f", d)?;
        Ok(Self { cfg: cfg.clone(), patch_proj, patch_pos, view_code, token_embed, token_pos, blocks, ln_f })
    }

    /// Patch embedding rows: projection + 2-D position code + view code.
    pub fn patchify(&self, g: &mut Graph<'_>, obs: &Observation) -> Result<Var> {
        if obs.views.len() != self.cfg.views {
            return Err(Error::Shape(format!("expected {} views, got {}", self.cfg.views, obs.views.len())));
        }
        let mut parts = Vec::with_capacity(obs.views.len());
        for img in &obs.views {
            if img.height != self.cfg.image || img.width != self.cfg.image {
                return Err(Error::Shape(format!("expected {0}x{0} image, got {1}x{2}", self.cfg.image, img.height, img.width)));
            }
            parts.push(img.patches(self.cfg.patch)?);
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        let flat = g.constant(Matrix::concat_rows(&refs));
        let proj = self.patch_proj.forward(g, flat);
        let p = self.cfg.patches_per_view();
        let pos_ids: Vec<usize> = (0..obs.views.len()).flat_map(|_| 0..p).collect();
        let view_ids: Vec<usize> = (0..obs.views.len()).flat_map(|v| std::iter::repeat(v).take(p)).collect();
        let pos_table = g.param(self.patch_pos);
        let pos = g.gather_rows(pos_table, &pos_ids);
        let view_table = g.param(self.view_code);
        let view = g.gather_rows(view_table, &view_ids);
        let x = g.add(proj, pos);
        Ok(g.add(x, view))
    }

    pub fn embed_instruction(&self, g: &mut Graph<'_>, tokens: &[u16]) -> Result<Var> {
        if tokens.len() != self.cfg.instruction_len {
            return Err(Error::Shape(format!("instruction has {} tokens, expected {}", tokens.len(), self.cfg.instruction_len)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab)));
        }
        let table = g.param(self.token_embed);
        let emb = g.gather_rows(table, &ids);
        let pos = g.param(self.token_pos);
        Ok(g.add(emb, pos))
    }

    /// Assembles views, instruction and query rows in segment order.
    /// Query banks are given as `(kind, rows)` in action, hindsight, frame,
    /// chunk order; absent banks are skipped.
    pub fn sequence(&self, g: &mut Graph<'_>, obs: &Observation, instruction: &[u16], queries: &[(QueryKind, Var)]) -> Result<TokenSequence> {
        let patches = self.patchify(g, obs)?;
        let instr = self.embed_instruction(g, instruction)?;
        let p = self.cfg.patches_per_view();
        let mut segments = Vec::new();
        let mut at = 0;
        for v in 0..obs.views.len() {
            segments.push((Segment::View(v), at, at + p));
            at += p;
        }
        segments.push((Segment::Instruction, at, at + instruction.len()));
        at += instruction.len();
        let mut parts = vec![patches, instr];
        let mut last_rank = None;
        for &(kind, rows) in queries {
            let rank = QueryKind::ALL.iter().position(|&k| k == kind).unwrap();
            if last_rank.is_some_and(|r| r >= rank) {
                return Err(Error::InvalidArgument("query banks out of order".into()));
            }
            last_rank = Some(rank);
            let (n, d) = g.shape(rows);
            if d != self.cfg.width {
                return Err(Error::Shape(format!("query width {d}, model width {}", self.cfg.width)));
            }
            segments.push((Segment::Query(kind), at, at + n));
            at += n;
            parts.push(rows);
        }
        let tokens = g.concat_rows(&parts);
        Ok(TokenSequence { tokens, segments, len: at })
    }

    /// Runs the causal stack and slices the query segments out of the final
    /// hidden states.
    pub fn encode(&self, g: &mut Graph<'_>, seq: TokenSequence) -> Result<Encoded> {
        let mut h = seq.tokens;
        for block in &self.blocks {
            h = block.forward(g, h, &Mask::Causal)?;
        }
        if !self.blocks.is_empty() {
            h = self.ln_f.forward(g, h);
        }
        let mut slice = |kind| seq.range(Segment::Query(kind)).map(|(s, e)| g.slice_rows(h, s, e));
        let action = slice(QueryKind::Action).ok_or_else(|| Error::InvalidArgument("sequence has no action queries".into()))?;
        let hindsight = slice(QueryKind::Hindsight);
        let frame = slice(QueryKind::Frame);
        let chunk = slice(QueryKind::Chunk);
        Ok(Encoded { hidden: h, seq, action, hindsight, frame, chunk })
    }
}

/// Marks every backbone group non-trainable (or trainable again).
pub fn freeze_backbone(store: &mut ParamStore, frozen: bool) -> usize {
    store.set_trainable_prefix(PREFIX, !frozen)
}
