use crate::attention::BranchLayout;
use crate::lora::ConditionType;
use crate::tensor::{RopeTable, Scalar};

use super::ModelConfig;

/// Rotary coordinates `(text index, row, col)` for every token of the
/// unified sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionAssignment {
    pub coords: Vec<[f64; 3]>,
}

impl PositionAssignment {
    /// Adds `(row, col)` to every image-like token (X and all conditions).
    pub fn translate_grid(&mut self, layout: &BranchLayout, d_row: f64, d_col: f64) {
        for c in &mut self.coords[layout.len_t()..] {
            c[1] += d_row;
            c[2] += d_col;
        }
    }
}

/// Text token `i` sits at `(i + 1, 0, 0)`; image tokens at `(0, row, col)`.
/// Spatially-aligned conditions reuse X's grid; reference conditions
/// (subject, style) are shifted one grid width along the column axis when
/// `offset_reference_conditions` is set.
pub fn assign_positions(config: &ModelConfig, layout: &BranchLayout, kinds: &[ConditionType]) -> PositionAssignment {
    let grid = config.grid();
    let mut coords = Vec::with_capacity(layout.total());
    for i in 0..layout.len_t() {
        coords.push([(i + 1) as f64, 0.0, 0.0]);
    }
    let image = |coords: &mut Vec<[f64; 3]>, n: usize, col_offset: usize| {
        for p in 0..n {
            coords.push([0.0, (p / grid) as f64, (p % grid + col_offset) as f64]);
        }
    };
    image(&mut coords, layout.len_x(), 0);
    for (i, kind) in kinds.iter().enumerate() {
        let offset = if config.offset_reference_conditions && !kind.is_spatially_aligned() {
            grid
        } else {
            0
        };
        image(&mut coords, layout.len_c()[i], offset);
    }
    PositionAssignment { coords }
}

/// Per-token rotation angles: axis `a` with `2m` dims uses frequencies
/// `base^(-2j / 2m)`, `j < m`, applied to that axis' coordinate.
pub fn rope_table<S: Scalar>(config: &ModelConfig, positions: &PositionAssignment) -> RopeTable<S> {
    let half = config.head_dim / 2;
    let tokens = positions.coords.len();
    let mut freqs = Vec::with_capacity(half);
    for (axis, &dim) in config.rope_axes.iter().enumerate() {
        for j in 0..dim / 2 {
            freqs.push((axis, config.rope_base.powf(-2.0 * j as f64 / dim as f64)));
        }
    }
    let mut cos = Vec::with_capacity(tokens * half);
    let mut sin = Vec::with_capacity(tokens * half);
    for c in &positions.coords {
        for &(axis, f) in &freqs {
            let angle = c[axis] * f;
            cos.push(S::lit(angle.cos()));
            sin.push(S::lit(angle.sin()));
        }
    }
    RopeTable { tokens, half, cos, sin }
}
