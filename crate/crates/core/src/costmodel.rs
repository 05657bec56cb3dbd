//! Closed-form cost of the factored block and the pyramid.
//!
//! One FLOP is one multiply-accumulate. The per-term formulas follow the
//! factored evaluation order step by step:
//!
//! | term            | count                              |
//! |-----------------|------------------------------------|
//! | embed           | `n·C·M`                            |
//! | attention       | `C·M`                              |
//! | degree          | `2·n·M + M`                        |
//! | laplacian-apply | `n·M + n·M·C + M·C + n·M·C`        |
//! | identity        | `n·C`                              |
//! | theta           | `n·C·C_out`                        |
//!
//! Without attention the `M` and `M·C` λ products vanish; static attention
//! drops the `C·M` projection only.
//!
//! Pyramids add `C·n` per pooling step (one comparison per input element),
//! `3·C_out·n` per bilinear upsample (three lerps per output element) and
//! `C_out·n` per aggregation add, with `n` the finer level's area.
//!
//! Memory is the f32 size of every activation the forward pass retains for
//! the backward pass, summed over levels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::AttentionMode;

const F32_BYTES: u64 = 4;

/// Extents and block options of one cost query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m: usize,
    pub c_out: usize,
    pub levels: usize,
    pub include_identity: bool,
    pub attention_mode: AttentionMode,
}

impl CostQuery {
    pub fn single(h: usize, w: usize, c: usize, m: usize, c_out: usize) -> Self {
        CostQuery {
            h,
            w,
            c,
            m,
            c_out,
            levels: 1,
            include_identity: true,
            attention_mode: AttentionMode::Dynamic,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.h, self.w, self.c, self.m, self.c_out, self.levels].contains(&0) {
            return Err(Error::invalid("costmodel", "all extents must be positive"));
        }
        if self.levels > 1 && self.c != self.c_out {
            return Err(Error::invalid("costmodel", "pyramid levels need C_out = C"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTerm {
    pub label: String,
    pub flops: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub query: CostQuery,
    pub flops: u64,
    pub peak_activation_bytes: u64,
    pub breakdown: Vec<CostTerm>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// Peak activation memory in MiB.
    pub fn memory_mib(&self) -> f64 {
        self.peak_activation_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    fn from_terms(query: CostQuery, breakdown: Vec<CostTerm>) -> Self {
        CostReport {
            query,
            flops: breakdown.iter().map(|t| t.flops).sum(),
            peak_activation_bytes: breakdown.iter().map(|t| t.bytes).sum(),
            breakdown,
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .breakdown
            .iter()
            .map(|t| t.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        writeln!(f, "{:<width$}  {:>16}  {:>14}", "term", "flops", "bytes")?;
        for t in &self.breakdown {
            writeln!(f, "{:<width$}  {:>16}  {:>14}", t.label, t.flops, t.bytes)?;
        }
        writeln!(
            f,
            "{:<width$}  {:>16}  {:>14}",
            "total", self.flops, self.peak_activation_bytes
        )?;
        write!(
            f,
            "{:.3} GFLOPs, {:.1} MiB",
            self.gflops(),
            self.memory_mib()
        )
    }
}

fn term(label: impl Into<String>, flops: usize, elements: usize) -> CostTerm {
    CostTerm {
        label: label.into(),
        flops: flops as u64,
        bytes: elements as u64 * F32_BYTES,
    }
}

/// Terms of one block evaluated on an `h x w` grid, labels prefixed.
fn block_terms(prefix: &str, h: usize, w: usize, q: &CostQuery) -> Vec<CostTerm> {
    let n = h * w;
    let (c, m, co) = (q.c, q.m, q.c_out);
    let label = |s: &str| format!("{prefix}{s}");
    // with λ ≡ 1 the two λ products are skipped
    let lam = usize::from(q.attention_mode != AttentionMode::None);
    let mut v = vec![
        // x, relu(x W_φ) and its pre-activation
        term(label("embed"), n * c * m, n * c + 2 * n * m),
    ];
    match q.attention_mode {
        // pooled x, logits, λ
        AttentionMode::Dynamic => v.push(term(label("attention"), c * m, c + 2 * m)),
        AttentionMode::Static => v.push(term(label("attention"), 0, m)),
        AttentionMode::None => {}
    }
    v.extend([
        // φᵀ1, λ ⊙ φᵀ1, d, (d + ε)^-1/2
        term(label("degree"), 2 * n * m + lam * m, (1 + lam) * m + 2 * n),
        // P, PᵀX, λ ⊙ PᵀX, P(·)
        term(
            label("laplacian-apply"),
            n * m + 2 * n * m * c + lam * m * c,
            n * m + (1 + lam) * m * c + n * c,
        ),
    ]);
    if q.include_identity {
        v.push(term(label("identity"), n * c, n * c));
    }
    // pre-activation and output
    v.push(term(label("theta"), n * c * co, 2 * n * co));
    v
}

fn ceil_half(v: usize) -> usize {
    v.div_ceil(2)
}

/// Full cost (FLOPs and memory) of a query.
pub fn estimate(query: &CostQuery) -> Result<CostReport> {
    query.validate()?;
    if query.levels == 1 {
        return Ok(CostReport::from_terms(*query, block_terms("", query.h, query.w, query)));
    }
    let mut extents = vec![(query.h, query.w)];
    for _ in 1..query.levels {
        let (h, w) = *extents.last().expect("non-empty");
        extents.push((ceil_half(h), ceil_half(w)));
    }
    let mut terms = Vec::new();
    for (k, &(h, w)) in extents.iter().enumerate() {
        terms.extend(block_terms(&format!("level{k}/"), h, w, query));
    }
    for (k, &(h, w)) in extents.iter().enumerate().take(query.levels - 1) {
        let n = h * w;
        // the pooled tensor is counted as the next level's input
        terms.push(term(format!("level{k}/pool"), query.c * n, 0));
        terms.push(term(format!("level{k}/upsample"), 3 * query.c_out * n, query.c_out * n));
        terms.push(term(format!("level{k}/aggregate"), query.c_out * n, query.c_out * n));
    }
    Ok(CostReport::from_terms(*query, terms))
}

/// Cost of one block; `include_identity` toggles the leading `X` term.
pub fn flops_graph_reason(
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    c_out: usize,
    include_identity: bool,
) -> Result<CostReport> {
    estimate(&CostQuery {
        include_identity,
        ..CostQuery::single(h, w, c, m, c_out)
    })
}

/// Cost of the pyramid with identity on at every level.
pub fn flops_pyramid(
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    c_out: usize,
    levels: usize,
) -> Result<CostReport> {
    estimate(&CostQuery {
        levels,
        ..CostQuery::single(h, w, c, m, c_out)
    })
}

/// Same report as [`estimate`]; named for callers that read the memory side.
pub fn memory_estimate(query: &CostQuery) -> Result<CostReport> {
    estimate(query)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_sums_to_total() {
        for levels in 1..=4 {
            let r = flops_pyramid(21, 17, 6, 3, 6, levels).unwrap();
            assert_eq!(r.flops, r.breakdown.iter().map(|t| t.flops).sum::<u64>());
            assert_eq!(
                r.peak_activation_bytes,
                r.breakdown.iter().map(|t| t.bytes).sum::<u64>()
            );
        }
    }

    #[test]
    fn single_pixel_closed_form() {
        let (c, m, co) = (3, 2, 5);
        let r = flops_graph_reason(1, 1, c, m, co, true).unwrap();
        let by_hand = c * m + c * m + (2 * m + m) + (m + 2 * m * c + m * c) + c + c * co;
        assert_eq!(r.flops, by_hand as u64);
        let elements = (c + 2 * m) + (c + 2 * m) + (2 * m + 2) + (m + 2 * m * c + c) + c + 2 * co;
        assert_eq!(r.peak_activation_bytes, 4 * elements as u64);
        let without = flops_graph_reason(1, 1, c, m, co, false).unwrap();
        assert_eq!(r.flops - without.flops, c as u64);
    }

    #[test]
    fn one_level_pyramid_is_the_block() {
        assert_eq!(
            flops_pyramid(13, 9, 4, 2, 4, 1).unwrap(),
            flops_graph_reason(13, 9, 4, 2, 4, true).unwrap()
        );
    }

    #[test]
    fn doubling_extent_quadruples_theta() {
        let theta = |r: &CostReport| r.breakdown.iter().find(|t| t.label == "theta").unwrap().flops;
        let a = flops_graph_reason(20, 20, 8, 4, 8, true).unwrap();
        let b = flops_graph_reason(40, 40, 8, 4, 8, true).unwrap();
        assert_eq!(theta(&b), 4 * theta(&a));
    }

    #[test]
    fn attention_modes_drop_their_terms() {
        let q = CostQuery::single(6, 5, 4, 3, 4);
        let f = |mode| estimate(&CostQuery { attention_mode: mode, ..q }).unwrap().flops;
        let (c, m) = (4, 3);
        assert_eq!(f(AttentionMode::Dynamic) - f(AttentionMode::Static), (c * m) as u64);
        assert_eq!(f(AttentionMode::Static) - f(AttentionMode::None), (m + m * c) as u64);
    }

    #[test]
    fn strictly_monotone_in_every_argument() {
        let base = CostQuery {
            levels: 2,
            ..CostQuery::single(10, 10, 4, 3, 4)
        };
        let f = |q: CostQuery| estimate(&q).unwrap().flops;
        let b = f(base);
        assert!(f(CostQuery { h: 11, ..base }) > b);
        assert!(f(CostQuery { w: 11, ..base }) > b);
        assert!(f(CostQuery { c: 5, c_out: 5, ..base }) > b);
        assert!(f(CostQuery { m: 4, ..base }) > b);
        assert!(f(CostQuery { levels: 3, ..base }) > b);
        let single = CostQuery::single(10, 10, 4, 3, 4);
        assert!(f(CostQuery { c_out: 5, ..single }) > f(single));
    }

    #[test]
    fn pyramid_overhead_ratio_is_geometric() {
        for s in [32, 48, 64, 97, 128] {
            let one = flops_graph_reason(s, s, 512, 64, 512, true).unwrap().flops as f64;
            let four = flops_pyramid(s, s, 512, 64, 512, 4).unwrap().flops as f64;
            let ratio = four / one;
            assert!((1.25..=1.40).contains(&ratio), "{s}: {ratio}");
        }
    }

    #[test]
    fn invalid_queries_are_rejected() {
        assert!(flops_graph_reason(0, 4, 1, 1, 1, true).is_err());
        assert!(flops_pyramid(8, 8, 4, 2, 3, 2).is_err());
    }

    #[test]
    fn report_renders_as_table_and_json() {
        let r = flops_pyramid(8, 8, 4, 2, 4, 2).unwrap();
        let text = r.to_string();
        assert!(text.contains("level1/theta") && text.contains("total"));
        let back: CostReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
