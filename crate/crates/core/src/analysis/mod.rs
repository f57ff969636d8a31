//! Representation similarity, gap tables, grids and reports.

pub mod cka;
pub mod gap;
pub mod grid;
pub mod report;

pub use cka::{cka_linear, CkaAccumulator, CkaGrid, CkaMatrix};
pub use gap::{gap_table, gap_table_partial, gap_vs_scale, GapReport, MethodResult, PairGap};
pub use grid::{grid_csv, load_grid, parse_grid, CellOutcome, GridAxis, GridCell, GridSpec};
pub use report::{emit_report, summarize_run, ReportFiles, RunSummary};
