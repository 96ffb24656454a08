//! Bidirectional transformer over the query banks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::QueryKind;
use crate::numerics::graph::{Graph, Mask, Var};
use crate::numerics::nn::{Block, LayerNorm};
use crate::numerics::{Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, mlp_ratio: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct FusedQueries {
    pub action_out: Var,
    pub hindsight_out: Option<Var>,
    pub frame_out: Option<Var>,
    pub chunk_out: Option<Var>,
    pub depth: usize,
    /// Banks present in the fused sequence, in order.
    pub composition: Vec<QueryKind>,
}

#[derive(Clone, Debug)]
pub struct Connector {
    pub cfg: ConnectorConfig,
    pub width: usize,
    /// One identity row per bank kind.
    pub bank_code: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Connector {
    pub fn new(store: &mut ParamStore, cfg: &ConnectorConfig, width: usize) -> Result<Self> {
        let bank_code = store.add("connector.bank_code", 4, width, Init::TruncNormal(0.02))?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("connector.layer{i}"), width, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "connector.ln_f", width)?;
        Ok(Self { cfg: cfg.clone(), width, bank_code, blocks, ln_f })
    }

    /// Full self-attention over whichever banks are present.
    pub fn fuse(
        &self,
        g: &mut Graph<'_>,
        action_q: Var,
        hindsight_q: Option<Var>,
        frame_state: Option<Var>,
        chunk_state: Option<Var>,
    ) -> Result<FusedQueries> {
        let inputs = [
            (QueryKind::Action, Some(action_q)),
            (QueryKind::Hindsight, hindsight_q),
            (QueryKind::Frame, frame_state),
            (QueryKind::Chunk, chunk_state),
        ];
        let mut parts = Vec::new();
        let mut ranges = Vec::new();
        let mut codes = Vec::new();
        let mut at = 0;
        for (k, (kind, v)) in inputs.iter().enumerate() {
            let Some(v) = *v else { continue };
            let (n, d) = g.shape(v);
            if d != self.width {
                return Err(Error::Shape(format!("{} queries have width {d}, connector width {}", kind.name(), self.width)));
            }
            if n == 0 {
                continue;
            }
            parts.push(v);
            ranges.push((*kind, at, at + n));
            codes.extend(std::iter::repeat(k).take(n));
            at += n;
        }
        if at == 0 {
            return Err(Error::InvalidArgument("connector input is empty".into()));
        }
        let composition: Vec<QueryKind> = ranges.iter().map(|r| r.0).collect();
        let mut x = g.concat_rows(&parts);
        if !self.blocks.is_empty() {
            let table = g.param(self.bank_code);
            let code = g.gather_rows(table, &codes);
            x = g.add(x, code);
            for block in &self.blocks {
                x = block.forward(g, x, &Mask::Full)?;
            }
            x = self.ln_f.forward(g, x);
        }
        let mut out = |kind| ranges.iter().find(|r| r.0 == kind).map(|&(_, s, e)| g.slice_rows(x, s, e));
        let action_out = out(QueryKind::Action).ok_or_else(|| Error::InvalidArgument("action queries are required".into()))?;
        Ok(FusedQueries {
            action_out,
            hindsight_out: out(QueryKind::Hindsight),
            frame_out: out(QueryKind::Frame),
            chunk_out: out(QueryKind::Chunk),
            depth: self.blocks.len(),
            composition,
        })
    }
}
