//! Analytic and instrumented cost of a single block: multiply-accumulates of
//! matmul contractions and trainable parameter counts.

use std::fmt::{self, Write as _};

use crate::blocks::{Block, BlockKind, Module};
use crate::error::Result;
use crate::tensor::{mac_counter, no_grad, reset_mac_counter, Element, Tensor};

/// Leading-term costs of one block. Biases and norms are omitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCost {
    pub macs: f64,
    /// `macs` without the parameter-free attention contractions (`QK^T`, `AV`).
    pub macs_excl_attention: f64,
    pub params: f64,
}

impl BlockCost {
    /// MACs per parameter, counting only contractions against weights.
    pub fn mp_ratio(&self) -> Option<f64> {
        (self.params > 0.0).then(|| self.macs_excl_attention / self.params)
    }
}

/// `(4 + 2s) L D^2 + 2 L^2 D` MACs and `(4 + 2s) D^2` parameters.
pub fn transformer_cost(l: usize, d: usize, s: f64) -> BlockCost {
    let (l, d) = (l as f64, d as f64);
    let dense = (4.0 + 2.0 * s) * l * d * d;
    BlockCost { macs: dense + 2.0 * l * l * d, macs_excl_attention: dense, params: (4.0 + 2.0 * s) * d * d }
}

/// `(2 + 2s) L D^2 + L^2 D` MACs and `(2 + 2s) D^2 + L^2` parameters. The
/// `L^2 D` term is the token-branch linear layer, not attention.
pub fn lmlp_cost(l: usize, d: usize, s: f64) -> BlockCost {
    let (l, d) = (l as f64, d as f64);
    let macs = (2.0 + 2.0 * s) * l * d * d + l * l * d;
    BlockCost { macs, macs_excl_attention: macs, params: (2.0 + 2.0 * s) * d * d + l * l }
}

/// Counts observed while running a block once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasuredCost {
    pub macs: u64,
    pub attention_macs: u64,
    /// Every trainable scalar.
    pub params: u64,
    /// Scalars held in weight matrices (rank >= 2), the leading-term count.
    pub weight_params: u64,
}

impl MeasuredCost {
    pub fn mp_ratio(&self) -> Option<f64> {
        (self.weight_params > 0).then(|| (self.macs - self.attention_macs) as f64 / self.weight_params as f64)
    }
}

/// Runs one forward pass of `block` on a zero `[batch, L, D]` input and counts
/// matmul MACs per example.
pub fn measure<T: Element>(block: &Block<T>, batch: usize) -> Result<MeasuredCost> {
    let cfg = block.config();
    let x = Tensor::<T>::zeros(&[batch.max(1), cfg.seq_len, cfg.embed_dim]);
    reset_mac_counter();
    no_grad(|| block.forward(&x))?;
    let count = mac_counter();
    reset_mac_counter();
    let per = batch.max(1) as u64;
    let params = block.parameters();
    Ok(MeasuredCost {
        macs: count.total / per,
        attention_macs: count.attention / per,
        params: params.iter().map(|(_, p)| p.numel() as u64).sum(),
        weight_params: params.iter().filter(|(_, p)| p.rank() >= 2).map(|(_, p)| p.numel() as u64).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Transformer,
    Lmlp,
}

impl CostKind {
    pub fn formula(self) -> &'static str {
        match self {
            CostKind::Transformer => "(4+2s)LD^2+2L^2D",
            CostKind::Lmlp => "(2+2s)LD^2+L^2D",
        }
    }

    pub fn cost(self, l: usize, d: usize, s: f64) -> BlockCost {
        match self {
            CostKind::Transformer => transformer_cost(l, d, s),
            CostKind::Lmlp => lmlp_cost(l, d, s),
        }
    }
}

impl TryFrom<BlockKind> for CostKind {
    type Error = crate::Error;

    fn try_from(kind: BlockKind) -> Result<Self> {
        match kind {
            BlockKind::Transformer => Ok(CostKind::Transformer),
            BlockKind::Lmlp => Ok(CostKind::Lmlp),
            other => Err(crate::Error::Unsupported(format!("no analytic cost formula for {other:?} blocks"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub scale: f64,
    pub kind: CostKind,
}

impl CostRow {
    pub fn new(name: &str, seq_len: usize, embed_dim: usize, scale: f64, kind: CostKind) -> Self {
        Self { name: name.to_string(), seq_len, embed_dim, scale, kind }
    }

    pub fn cost(&self) -> BlockCost {
        self.kind.cost(self.seq_len, self.embed_dim, self.scale)
    }
}

/// The three reference rows at `L = 334`, `D = 512`.
pub fn reference_rows() -> Vec<CostRow> {
    vec![
        CostRow::new("Transformer", 334, 512, 4.0, CostKind::Transformer),
        CostRow::new("L-MLP", 334, 512, 5.2, CostKind::Lmlp),
        CostRow::new("L-MLP", 334, 512, 4.0, CostKind::Lmlp),
    ]
}

pub const CSV_HEADER: &str = "name,L,D,s,macs,params,mp_ratio";

/// Evaluated rows, renderable as CSV or as an aligned text table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub rows: Vec<(CostRow, BlockCost)>,
}

pub fn cost_table(rows: &[CostRow]) -> CostTable {
    CostTable { rows: rows.iter().map(|r| (r.clone(), r.cost())).collect() }
}

/// `1164906496 -> "1.165B"`.
pub fn billions(v: f64) -> String {
    format!("{:.3}B", v / 1e9)
}

/// `2732996 -> "2.73M"`.
pub fn human(v: f64, digits: usize) -> String {
    let (div, suffix) = match v.abs() {
        a if a >= 1e9 => (1e9, "B"),
        a if a >= 1e6 => (1e6, "M"),
        a if a >= 1e3 => (1e3, "K"),
        _ => (1.0, ""),
    };
    format!("{:.*}{suffix}", digits, v / div)
}

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (r, c) in &self.rows {
            let ratio = c.mp_ratio().map_or(String::new(), |m| format!("{m:.2}"));
            writeln!(out, "{},{},{},{},{:.0},{:.0},{ratio}", r.name, r.seq_len, r.embed_dim, r.scale, c.macs, c.params)
                .unwrap();
        }
        out
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = ["name", "L", "D", "s", "complexity", "MACs", "MACs (no attn)", "#params", "M/P"];
        let mut lines: Vec<[String; 9]> = vec![header.map(String::from)];
        for (r, c) in &self.rows {
            lines.push([
                r.name.clone(),
                r.seq_len.to_string(),
                r.embed_dim.to_string(),
                r.scale.to_string(),
                r.kind.formula().to_string(),
                billions(c.macs),
                billions(c.macs_excl_attention),
                human(c.params, 2),
                c.mp_ratio().map_or("-".into(), |m| format!("{m:.2}")),
            ]);
        }
        let widths: Vec<usize> = (0..9).map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0)).collect();
        for line in &lines {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(f, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}
