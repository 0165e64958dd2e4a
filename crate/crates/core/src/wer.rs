//! Word error rate: minimal-edit alignment with a deterministic
//! substitution/insertion/deletion breakdown, plus pooled corpus scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operation counts from one canonical minimal-cost alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ref_len: usize,
}

impl WerBreakdown {
    pub fn total(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// `100 * (sub + ins + del) / ref_len`; can exceed 100. Requires
    /// `ref_len >= 1`, which [`align_and_count`] and [`pooled`] guarantee.
    pub fn wer(&self) -> f64 {
        100.0 * self.total() as f64 / self.ref_len as f64
    }
}

/// Minimal-edit alignment with unit costs. Ties in the backtrace prefer
/// substitution over deletion over insertion, so the breakdown is
/// deterministic even where the minimal split is not unique.
pub fn align_and_count(reference: &[usize], hypothesis: &[usize]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (r, h) = (reference.len(), hypothesis.len());
    let cols = h + 1;
    let mut d = vec![0u32; (r + 1) * cols];
    for j in 0..=h {
        d[j] = j as u32;
    }
    for i in 1..=r {
        d[i * cols] = i as u32;
        for j in 1..=h {
            let sub_cost = u32::from(reference[i - 1] != hypothesis[j - 1]);
            let via_diag = d[(i - 1) * cols + j - 1] + sub_cost;
            let via_del = d[(i - 1) * cols + j] + 1;
            let via_ins = d[i * cols + j - 1] + 1;
            d[i * cols + j] = via_diag.min(via_del).min(via_ins);
        }
    }

    let mut out = WerBreakdown {
        sub: 0,
        ins: 0,
        del: 0,
        ref_len: r,
    };
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let here = d[i * cols + j];
        if i > 0 && j > 0 {
            let sub_cost = u32::from(reference[i - 1] != hypothesis[j - 1]);
            if here == d[(i - 1) * cols + j - 1] + sub_cost {
                out.sub += sub_cost as usize;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * cols + j] + 1 {
            out.del += 1;
            i -= 1;
            continue;
        }
        out.ins += 1;
        j -= 1;
    }
    debug_assert_eq!(out.total() as u32, d[r * cols + h]);
    Ok(out)
}

/// Pools operation counts over a corpus: `100 * sum(ops) / sum(ref_len)`,
/// not a mean of per-sample percentages.
pub fn pooled<'a>(items: impl IntoIterator<Item = &'a WerBreakdown>) -> Result<WerBreakdown> {
    let mut acc = WerBreakdown {
        sub: 0,
        ins: 0,
        del: 0,
        ref_len: 0,
    };
    for b in items {
        acc.sub += b.sub;
        acc.ins += b.ins;
        acc.del += b.del;
        acc.ref_len += b.ref_len;
    }
    if acc.ref_len == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(acc)
}
