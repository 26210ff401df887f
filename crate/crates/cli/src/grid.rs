use tfrn_core::{Family, ModelConfig};

/// One named architecture from the reference experiment grid.
pub struct GridRow {
    pub group: &'static str,
    pub config: ModelConfig,
}

fn row(group: &'static str, family: Family, v: usize, d: usize, n: usize, m: usize) -> GridRow {
    let mut config = ModelConfig::for_family(family, v, d, n, m);
    // The cascade's output projection is counted as its own matrix.
    if family == Family::TransfoRnn {
        config.tied = false;
    }
    GridRow { group, config }
}

/// Depth sweep at V=10000 for both widths.
pub fn depth_sweep() -> Vec<GridRow> {
    let mut rows = Vec::new();
    for d in [512, 1024] {
        for n in [2, 4, 8, 16] {
            rows.push(row("depth", Family::Transformer, 10_000, d, n, 0));
        }
        for n in [2, 4, 8] {
            rows.push(row("depth", Family::TransfoRnn, 10_000, d, n, 2));
        }
        rows.push(row("depth", Family::Lstm, 10_000, d, 0, 2));
    }
    rows
}

/// Recurrent-depth sweep at V=10000.
pub fn recurrent_sweep() -> Vec<GridRow> {
    let mut rows = Vec::new();
    for d in [512, 1024] {
        for m in [1, 2, 3] {
            rows.push(row("recurrent", Family::TransfoRnn, 10_000, d, 2, m));
        }
    }
    rows
}

/// Large-vocabulary rescoring models: V=200000, d=1024, d_ff=2048.
pub fn rescoring_models() -> Vec<GridRow> {
    let mut rows: Vec<GridRow> = [2, 4, 8]
        .into_iter()
        .map(|n| row("rescoring", Family::Transformer, 200_000, 1024, n, 0))
        .collect();
    rows.push(row("rescoring", Family::TransfoRnn, 200_000, 1024, 2, 2));
    for r in &mut rows {
        r.config.d_ff = 2048;
    }
    rows
}

pub fn all_rows() -> Vec<GridRow> {
    let mut rows = depth_sweep();
    rows.extend(recurrent_sweep());
    rows.extend(rescoring_models());
    rows
}
