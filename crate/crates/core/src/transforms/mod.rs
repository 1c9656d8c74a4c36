//! Graph rewrites applied before scheduling.

pub mod fuse;
pub mod incrementalize;
pub mod lift;
pub mod vectorize;

use crate::pdg::passes::cleanup;
use crate::pdg::Pdg;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformOptions {
    pub vectorize: bool,
    pub incrementalize: bool,
    pub fuse: bool,
    /// Largest block an incrementalized reduction may read at once.
    pub block_bytes: Option<u64>,
}

impl Default for TransformOptions {
    fn default() -> Self {
        TransformOptions { vectorize: true, incrementalize: true, fuse: true, block_bytes: None }
    }
}

/// Apply the enabled rewrites in order, returning one line per change.
pub fn apply(g: &mut Pdg, opts: &TransformOptions) -> Vec<String> {
    let mut log = Vec::new();
    cleanup(g);
    if opts.vectorize {
        log.extend(lift::lift_incremental_patterns(g));
        cleanup(g);
        for (d, n) in vectorize::vectorize_all(g) {
            log.push(format!("vectorize {d}: {n} nodes"));
        }
        cleanup(g);
    }
    if opts.incrementalize {
        log.extend(incrementalize::incrementalize_all(g, opts.block_bytes.unwrap_or(incrementalize::DEFAULT_BLOCK_BYTES)));
        cleanup(g);
    }
    if opts.fuse {
        for d in fuse::fuse(g) {
            if let crate::frontend::ops::OpKind::Dataflow { body, .. } = &g.node(d).kind {
                log.push(format!("fuse {}: {} ops", g.node(d).name, body.len()));
            }
        }
    }
    log
}
