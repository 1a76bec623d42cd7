//! Parameter and FLOP accounting, shape tracing and spectral profiling of
//! intermediate features.
//!
//! Costs come from running the model's own forward pass on
//! [`ShapeBackend`], which carries dims instead of data. Counting and
//! execution therefore cannot disagree about the graph.

mod shape;
mod spectrum;

pub use shape::{OpRecord, ShapeBackend};
pub use spectrum::{branch_spectrum_report, fourier_spectrum, SpectrumProfile, LOW_FREQ_CUTOFF, RADIAL_BINS};

use crate::blocks::{Model, ParamKind};
use crate::error::Result;
use crate::tensor::Dims;

/// Published totals at 224² for the named presets: millions of parameters
/// and GMACs.
pub fn reference_totals(variant: &str) -> Option<(f64, f64)> {
    Some(match variant {
        "T" => (2.0, 0.3),
        "S" => (6.4, 0.8),
        "M" => (12.8, 2.0),
        "B" => (24.3, 4.2),
        "L" => (35.3, 7.1),
        _ => return None,
    })
}

/// Relative gap to a reference value inside which totals count as
/// consistent.
pub const REFERENCE_BAND: f64 = 0.25;

/// Which figure a report headlines. Both are always available.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    Macs,
    TwiceMacs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub path: String,
    pub op: &'static str,
    pub params: u64,
    pub running: u64,
    pub macs: u64,
    pub adds: u64,
    pub output_dims: Option<Dims>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostTotals {
    pub params: u64,
    pub running: u64,
    pub macs: u64,
    pub adds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
    pub convention: FlopConvention,
}

impl CostReport {
    /// Builds a report whose totals are the column sums of `rows`.
    pub fn from_rows(rows: Vec<CostRow>) -> Self {
        let mut t = CostTotals::default();
        for r in &rows {
            t.params += r.params;
            t.running += r.running;
            t.macs += r.macs;
            t.adds += r.adds;
        }
        Self {
            rows,
            totals: t,
            convention: FlopConvention::Macs,
        }
    }

    pub fn flops(&self) -> u64 {
        2 * self.totals.macs
    }

    /// The headline figure under the report's convention.
    pub fn headline(&self) -> u64 {
        match self.convention {
            FlopConvention::Macs => self.totals.macs,
            FlopConvention::TwiceMacs => self.flops(),
        }
    }
}

fn owner(path: &str) -> &str {
    path.rsplit_once('.').map_or(path, |(o, _)| o)
}

/// Exact per-layer parameter counts, in parameter order. Batch norm
/// contributes `2·C` trainable values and `2·C` running statistics, the
/// latter in the `running` column.
pub fn count_params(model: &Model) -> CostReport {
    let mut rows: Vec<CostRow> = Vec::new();
    model.for_each_param(&mut |path, kind, t| {
        let layer = owner(path);
        let op = match kind {
            ParamKind::Weight | ParamKind::Bias => "conv2d",
            _ => "batch_norm",
        };
        let n = t.numel() as u64;
        let (params, running) = if kind.is_trainable() { (n, 0) } else { (0, n) };
        match rows.last_mut() {
            Some(r) if r.path == layer => {
                r.params += params;
                r.running += running;
            }
            _ => rows.push(CostRow {
                path: layer.to_string(),
                op,
                params,
                running,
                macs: 0,
                adds: 0,
                output_dims: None,
            }),
        }
    });
    CostReport::from_rows(rows)
}

fn trace(model: &Model, input_dims: Dims) -> Result<ShapeBackend> {
    let mut b = ShapeBackend::new();
    model.forward(&mut b, &input_dims)?;
    Ok(b)
}

/// Per-op MACs and adds for one forward pass at `input_dims`.
///
/// Convolutions count `N·Cout·Hout·Wout·(Cin/G)·Kh·Kw` MACs; attention
/// counts both token matmuls on top of its projection convolutions.
/// Pooling and elementwise adds land in the `adds` column. Batch norm,
/// activations and softmax are not counted.
pub fn count_flops(model: &Model, input_dims: Dims) -> Result<CostReport> {
    let b = trace(model, input_dims)?;
    let rows = b
        .ops
        .into_iter()
        .map(|o| CostRow {
            path: o.path,
            op: o.op,
            params: o.params,
            running: o.running,
            macs: o.macs,
            adds: o.adds,
            output_dims: Some(o.output_dims),
        })
        .collect();
    Ok(CostReport::from_rows(rows))
}

/// Output dims of every op in forward order.
pub fn shape_trace(model: &Model, input_dims: Dims) -> Result<Vec<(String, Dims)>> {
    Ok(trace(model, input_dims)?
        .ops
        .into_iter()
        .map(|o| (o.path, o.output_dims))
        .collect())
}

/// Output dims of the stem, every patch embedding, every block and the head.
pub fn block_shapes(model: &Model, input_dims: Dims) -> Result<Vec<(String, Dims)>> {
    Ok(trace(model, input_dims)?.blocks)
}

/// Output dims of the last block of each stage.
pub fn stage_outputs(model: &Model, input_dims: Dims) -> Result<Vec<Dims>> {
    let blocks = block_shapes(model, input_dims)?;
    Ok((0..model.stages.len())
        .filter_map(|i| {
            let prefix = format!("stages.{i}.");
            blocks.iter().rev().find(|(p, _)| p.starts_with(&prefix)).map(|(_, d)| *d)
        })
        .collect())
}

#[cfg(test)]
mod tests;
