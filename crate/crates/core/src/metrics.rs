//! Token error rate, entity-restricted error rate, and relative-reduction
//! reporting.

use crate::biasing::EntitySpan;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// One alignment step; reference/hypothesis positions are absent for the
/// side an insertion or deletion skips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignStep {
    pub op: AlignOp,
    pub ref_pos: Option<usize>,
    pub hyp_pos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment(pub Vec<AlignStep>);

impl Alignment {
    pub fn steps(&self) -> &[AlignStep] {
        &self.0
    }

    pub fn cost(&self) -> usize {
        self.0
            .iter()
            .filter(|s| s.op != AlignOp::Match)
            .count()
    }
}

/// Minimum-edit-cost alignment with unit costs. The backtrace is
/// deterministic, preferring match > sub > del > ins on ties.
pub fn align(refs: &[String], hyp: &[String]) -> Alignment {
    let n = refs.len();
    let m = hyp.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(refs[i - 1] != hyp[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }

    let mut steps = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && refs[i - 1] == hyp[j - 1] && d[i][j] == d[i - 1][j - 1] {
            steps.push(AlignStep {
                op: AlignOp::Match,
                ref_pos: Some(i - 1),
                hyp_pos: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            steps.push(AlignStep {
                op: AlignOp::Sub,
                ref_pos: Some(i - 1),
                hyp_pos: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            steps.push(AlignStep {
                op: AlignOp::Del,
                ref_pos: Some(i - 1),
                hyp_pos: None,
            });
            i -= 1;
        } else {
            steps.push(AlignStep {
                op: AlignOp::Ins,
                ref_pos: None,
                hyp_pos: Some(j - 1),
            });
            j -= 1;
        }
    }
    steps.reverse();
    Alignment(steps)
}

/// Substitution/deletion/insertion counts against a reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.subs + self.dels + self.ins
    }

    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    fn absorb(&mut self, other: &ErrorCounts) {
        self.subs += other.subs;
        self.dels += other.dels;
        self.ins += other.ins;
        self.ref_len += other.ref_len;
    }
}

fn utterance_counts(alignment: &Alignment, ref_len: usize) -> ErrorCounts {
    let mut c = ErrorCounts {
        ref_len,
        ..ErrorCounts::default()
    };
    for s in alignment.steps() {
        match s.op {
            AlignOp::Match => {}
            AlignOp::Sub => c.subs += 1,
            AlignOp::Del => c.dels += 1,
            AlignOp::Ins => c.ins += 1,
        }
    }
    c
}

/// Corpus micro-averaged token error rate: Σ(S+D+I) / Σ N.
pub fn token_error_rate(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        let a = align(r, h);
        total.absorb(&utterance_counts(&a, r.len()));
    }
    Ok(total.rate())
}

/// Attributes one utterance's alignment errors to its entity spans. A
/// substitution or deletion belongs to the span containing its reference
/// position; an insertion belongs to a span only when the nearest
/// reference positions on both sides fall inside that same span.
fn entity_counts(
    alignment: &Alignment,
    spans: &[EntitySpan],
    ref_len: usize,
) -> Result<ErrorCounts> {
    let mut covered = vec![false; ref_len];
    for s in spans {
        if s.start >= s.end || s.end > ref_len {
            return Err(Error::InvalidSpan {
                start: s.start,
                end: s.end,
                len: ref_len,
            });
        }
        for pos in s.start..s.end {
            if covered[pos] {
                return Err(Error::OverlappingSpans(pos));
            }
            covered[pos] = true;
        }
    }
    let span_of = |pos: usize| -> Option<usize> {
        spans
            .iter()
            .position(|s| (s.start..s.end).contains(&pos))
    };

    let steps = alignment.steps();
    let mut c = ErrorCounts {
        ref_len: spans.iter().map(|s| s.end - s.start).sum(),
        ..ErrorCounts::default()
    };
    for (k, step) in steps.iter().enumerate() {
        match step.op {
            AlignOp::Match => {}
            AlignOp::Sub | AlignOp::Del => {
                let pos = step.ref_pos.expect("sub/del carry a reference position");
                if span_of(pos).is_some() {
                    if step.op == AlignOp::Sub {
                        c.subs += 1;
                    } else {
                        c.dels += 1;
                    }
                }
            }
            AlignOp::Ins => {
                let before = steps[..k].iter().rev().find_map(|s| s.ref_pos);
                let after = steps[k + 1..].iter().find_map(|s| s.ref_pos);
                if let (Some(b), Some(a)) = (before, after) {
                    if let (Some(sb), Some(sa)) = (span_of(b), span_of(a)) {
                        if sb == sa {
                            c.ins += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(c)
}

/// Corpus entity error rate: attributed errors over total reference
/// entity tokens.
pub fn entity_error_rate(
    refs: &[(Vec<String>, Vec<EntitySpan>)],
    hyps: &[Vec<String>],
) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = ErrorCounts::default();
    for ((r, spans), h) in refs.iter().zip(hyps) {
        let a = align(r, h);
        total.absorb(&entity_counts(&a, spans, r.len())?);
    }
    Ok(total.rate())
}

/// Percentage by which `new` improves on `base`: (base − new) / base × 100.
pub fn relative_reduction(base: f64, new: f64) -> Result<f64> {
    if base <= 0.0 {
        return Err(Error::contract(format!(
            "relative reduction needs a positive baseline, got {base}"
        )));
    }
    Ok((base - new) / base * 100.0)
}

/// Rounding used for display of relative reductions.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Full evaluation of one hypothesis corpus, optionally against a
/// baseline corpus for relative reductions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_error_rate: f64,
    pub entity_error_rate: f64,
    pub overall: ErrorCounts,
    pub entity: ErrorCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vs_baseline: Option<BaselineComparison>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline_token_error_rate: f64,
    pub baseline_entity_error_rate: f64,
    /// Relative reduction (%) of the token error rate.
    pub token_rr: f64,
    /// Relative reduction (%) of the entity error rate.
    pub entity_rr: f64,
}

pub fn evaluate(
    refs: &[(Vec<String>, Vec<EntitySpan>)],
    hyps: &[Vec<String>],
    baseline: Option<&[Vec<String>]>,
) -> Result<EvalReport> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut overall = ErrorCounts::default();
    let mut entity = ErrorCounts::default();
    for ((r, spans), h) in refs.iter().zip(hyps) {
        let a = align(r, h);
        overall.absorb(&utterance_counts(&a, r.len()));
        entity.absorb(&entity_counts(&a, spans, r.len())?);
    }

    let vs_baseline = match baseline {
        None => None,
        Some(base_hyps) => {
            let plain_refs: Vec<Vec<String>> = refs.iter().map(|(r, _)| r.clone()).collect();
            let base_ter = token_error_rate(&plain_refs, base_hyps)?;
            let base_eer = entity_error_rate(refs, base_hyps)?;
            Some(BaselineComparison {
                baseline_token_error_rate: base_ter,
                baseline_entity_error_rate: base_eer,
                token_rr: relative_reduction(base_ter, overall.rate())?,
                entity_rr: relative_reduction(base_eer, entity.rate())?,
            })
        }
    };

    Ok(EvalReport {
        token_error_rate: overall.rate(),
        entity_error_rate: entity.rate(),
        overall,
        entity,
        vs_baseline,
    })
}

impl EvalReport {
    /// Aligned text table in the `ER (RRR) / NE-ER (NE-RRR)` cell format,
    /// rates in percent.
    pub fn table(&self) -> String {
        let cell = |rate: f64, rr: Option<f64>| -> String {
            match rr {
                Some(r) => format!("{:.2} ({:+.2})", rate * 100.0, round2(r)),
                None => format!("{:.2} (--)", rate * 100.0),
            }
        };
        let (trr, err_) = match &self.vs_baseline {
            Some(b) => (Some(b.token_rr), Some(b.entity_rr)),
            None => (None, None),
        };
        let mut out = String::new();
        writeln!(out, "ER (RRR) / NE-ER (NE-RRR)").expect("string write");
        writeln!(
            out,
            "{} / {}",
            cell(self.token_error_rate, trr),
            cell(self.entity_error_rate, err_)
        )
        .expect("string write");
        writeln!(
            out,
            "overall: S={} D={} I={} N={}",
            self.overall.subs, self.overall.dels, self.overall.ins, self.overall.ref_len
        )
        .expect("string write");
        writeln!(
            out,
            "entity:  S={} D={} I={} N={}",
            self.entity.subs, self.entity.dels, self.entity.ins, self.entity.ref_len
        )
        .expect("string write");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        if s.is_empty() {
            return Vec::new();
        }
        s.split_whitespace().map(String::from).collect()
    }

    fn edit_cost_recursive(a: &[String], b: &[String]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = edit_cost_recursive(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = edit_cost_recursive(&a[1..], b) + 1;
        let ins = edit_cost_recursive(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identical_sequences_align_as_matches() {
        let r = toks("a b c");
        let a = align(&r, &r);
        assert!(a.steps().iter().all(|s| s.op == AlignOp::Match));
        assert_eq!(a.cost(), 0);
    }

    #[test]
    fn forced_deletion() {
        let r = toks("a b c");
        let h = toks("a c");
        let a = align(&r, &h);
        assert_eq!(a.cost(), 1);
        let del: Vec<&AlignStep> = a.steps().iter().filter(|s| s.op == AlignOp::Del).collect();
        assert_eq!(del.len(), 1);
        assert_eq!(del[0].ref_pos, Some(1));
    }

    #[test]
    fn alignment_cost_matches_exhaustive_recursion() {
        let vocab = ["x", "y", "z"];
        let mut state = 0x3141592653589793u64;
        let mut next = move |m: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as usize) % m
        };
        for _ in 0..100 {
            let la = next(7);
            let lb = next(7);
            let a: Vec<String> = (0..la).map(|_| vocab[next(3)].to_string()).collect();
            let b: Vec<String> = (0..lb).map(|_| vocab[next(3)].to_string()).collect();
            assert_eq!(align(&a, &b).cost(), edit_cost_recursive(&a, &b));
        }
    }

    #[test]
    fn alignment_reconstructs_both_sequences() {
        let r = toks("a b c d");
        let h = toks("a x c e f");
        let a = align(&r, &h);
        let ref_positions: Vec<usize> = a.steps().iter().filter_map(|s| s.ref_pos).collect();
        let hyp_positions: Vec<usize> = a.steps().iter().filter_map(|s| s.hyp_pos).collect();
        assert_eq!(ref_positions, (0..r.len()).collect::<Vec<_>>());
        assert_eq!(hyp_positions, (0..h.len()).collect::<Vec<_>>());
    }

    #[test]
    fn token_error_rate_perfect_and_empty() {
        let refs = vec![toks("a b"), toks("c")];
        assert_eq!(token_error_rate(&refs, &refs.clone()).unwrap(), 0.0);

        let empties = vec![toks(""), toks("")];
        assert_eq!(token_error_rate(&refs, &empties).unwrap(), 1.0);

        assert!(token_error_rate(&refs, &[toks("a b")]).is_err());
    }

    #[test]
    fn token_error_rate_known_construction() {
        // 2 substitutions + 1 insertion over 20 reference tokens = 0.15.
        let ref1 = toks("t0 t1 t2 t3 t4 t5 t6 t7 t8 t9");
        let ref2 = toks("u0 u1 u2 u3 u4 u5 u6 u7 u8 u9");
        let mut hyp1 = ref1.clone();
        hyp1[2] = "XX".into();
        hyp1[7] = "YY".into();
        let mut hyp2 = ref2.clone();
        hyp2.insert(4, "ZZ".into());
        let ter = token_error_rate(&[ref1, ref2], &[hyp1, hyp2]).unwrap();
        assert!((ter - 0.15).abs() < 1e-12);
    }

    #[test]
    fn entity_rate_ignores_errors_outside_spans() {
        let refs = vec![(
            toks("a b ENT1 ENT2 c d"),
            vec![EntitySpan { start: 2, end: 4, bias_id: 1 }],
        )];
        // Errors only outside the span.
        let hyp = vec![toks("X b ENT1 ENT2 c Y")];
        assert_eq!(entity_error_rate(&refs, &hyp).unwrap(), 0.0);
    }

    #[test]
    fn entity_rate_counts_inside_substitution() {
        // One substitution inside a 3-token entity: 1/3.
        let refs = vec![(
            toks("a E1 E2 E3 b"),
            vec![EntitySpan { start: 1, end: 4, bias_id: 1 }],
        )];
        let hyp = vec![toks("a E1 XX E3 b")];
        let rate = entity_error_rate(&refs, &hyp).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn entity_rate_full_deletion_is_one() {
        let refs = vec![(
            toks("a E1 E2 b"),
            vec![EntitySpan { start: 1, end: 3, bias_id: 1 }],
        )];
        let hyp = vec![toks("a b")];
        assert_eq!(entity_error_rate(&refs, &hyp).unwrap(), 1.0);
    }

    #[test]
    fn entity_rate_attributes_interior_insertions() {
        let refs = vec![(
            toks("a E1 E2 b"),
            vec![EntitySpan { start: 1, end: 3, bias_id: 1 }],
        )];
        // Insertion between E1 and E2: both neighbours inside the span.
        let inside = vec![toks("a E1 XX E2 b")];
        let rate = entity_error_rate(&refs, &inside).unwrap();
        assert!((rate - 0.5).abs() < 1e-12);
        // Insertion between a and E1: neighbours straddle the boundary.
        let outside = vec![toks("a XX E1 E2 b")];
        assert_eq!(entity_error_rate(&refs, &outside).unwrap(), 0.0);
    }

    #[test]
    fn entity_rate_rejects_overlapping_spans() {
        let refs = vec![(
            toks("a b c"),
            vec![
                EntitySpan { start: 0, end: 2, bias_id: 1 },
                EntitySpan { start: 1, end: 3, bias_id: 2 },
            ],
        )];
        assert!(entity_error_rate(&refs, &[toks("a b c")]).is_err());
    }

    #[test]
    fn relative_reduction_reference_values() {
        let rr = relative_reduction(9.60, 3.56).unwrap();
        assert!((round2(rr) - 62.92).abs() < 0.01);
        let rr = relative_reduction(26.64, 17.15).unwrap();
        assert!((round2(rr) - 35.62).abs() < 0.01);
        assert_eq!(relative_reduction(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(relative_reduction(7.0, 0.0).unwrap(), 100.0);
        assert!(relative_reduction(0.0, 1.0).is_err());
        assert!(relative_reduction(-2.0, 1.0).is_err());
    }

    #[test]
    fn report_table_formats_cells() {
        let refs = vec![(
            toks("a E1 E2 b"),
            vec![EntitySpan { start: 1, end: 3, bias_id: 1 }],
        )];
        let hyp = vec![toks("a E1 E2 b")];
        let base = vec![toks("a XX E2 b")];
        let report = evaluate(&refs, &hyp, Some(&base)).unwrap();
        assert_eq!(report.token_error_rate, 0.0);
        assert_eq!(report.entity_error_rate, 0.0);
        let b = report.vs_baseline.as_ref().unwrap();
        assert!((b.token_rr - 100.0).abs() < 1e-9);
        assert!((b.entity_rr - 100.0).abs() < 1e-9);
        let table = report.table();
        assert!(table.contains("0.00 (+100.00) / 0.00 (+100.00)"));
    }
}
