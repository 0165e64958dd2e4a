//! CTC loss via the log-space forward algorithm, a brute-force enumeration
//! oracle for small instances, greedy best-path decoding, and a CSV debug
//! format for lattices.

use std::fmt::Write as _;
use std::path::Path;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Class id meaning "no gloss emitted at this step".
pub const BLANK: usize = 0;

/// Log-space stand-in for probability zero.
pub const LOG_ZERO: f64 = -1e30;

const ORACLE_PATH_LIMIT: u128 = 1_000_000;

/// Checks that every label is a real gloss id in `[1, vocab]`.
pub fn validate_labels(labels: &[usize], vocab: usize) -> Result<()> {
    for &id in labels {
        if id == BLANK || id > vocab {
            return Err(Error::InvalidLabel { id, vocab });
        }
    }
    Ok(())
}

/// Shortest lattice that admits an alignment: one step per label plus one
/// separating blank per adjacent repeat.
pub fn min_steps(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &c in path {
        if c != prev && c != BLANK {
            out.push(c);
        }
        prev = c;
    }
    out
}

/// Result of the forward algorithm: a differentiable scalar, or the
/// infinite-loss sentinel when no alignment fits in the lattice.
#[derive(Clone, Copy, Debug)]
pub enum CtcOutcome {
    Loss(Var),
    Infeasible,
}

impl CtcOutcome {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, CtcOutcome::Infeasible)
    }
}

/// Negative log-likelihood of `labels` under the lattice, summed over all
/// alignments with the usual two/three-predecessor recurrence over the
/// blank-extended label.
pub fn ctc_forward_loss<E: Elem>(
    tape: &mut Tape<E>,
    lattice: Var,
    labels: &[usize],
    vocab: usize,
) -> Result<CtcOutcome> {
    validate_labels(labels, vocab)?;
    let shape = tape.value(lattice).shape().to_vec();
    if shape.len() != 2 || shape[1] != vocab + 1 {
        return Err(Error::DimensionMismatch {
            op: "ctc_forward_loss",
            lhs: shape,
            rhs: vec![0, vocab + 1],
        });
    }
    let t_len = shape[0];
    if t_len < min_steps(labels) {
        return Ok(CtcOutcome::Infeasible);
    }
    if t_len == 0 {
        return Ok(CtcOutcome::Loss(tape.constant(Tensor::zeros(&[1]))));
    }

    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { BLANK } else { labels[s / 2] };
    let floor = tape.constant(Tensor::from_vec(&[1], vec![E::from_f64(LOG_ZERO)]));

    let mut alpha = vec![floor; s_len];
    alpha[0] = tape.select2(lattice, 0, ext(0));
    if s_len > 1 {
        alpha[1] = tape.select2(lattice, 0, ext(1));
    }
    for t in 1..t_len {
        let mut next = vec![floor; s_len];
        for s in 0..s_len {
            let mut terms = vec![alpha[s]];
            if s >= 1 {
                terms.push(alpha[s - 1]);
            }
            if s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2) {
                terms.push(alpha[s - 2]);
            }
            let acc = if terms.len() == 1 {
                terms[0]
            } else {
                tape.logsumexp(&terms)
            };
            let lp = tape.select2(lattice, t, ext(s));
            next[s] = tape.add(acc, lp);
        }
        alpha = next;
    }
    let tail = if s_len == 1 {
        alpha[0]
    } else {
        tape.logsumexp(&[alpha[s_len - 1], alpha[s_len - 2]])
    };
    Ok(CtcOutcome::Loss(tape.neg(tail)))
}

/// Loss by explicit enumeration of every frame-level path. Returns
/// `f64::INFINITY` when no path collapses to the target.
pub fn ctc_brute_force(lattice: &Tensor<f64>, labels: &[usize], vocab: usize) -> Result<f64> {
    validate_labels(labels, vocab)?;
    let shape = lattice.shape();
    if shape.len() != 2 || shape[1] != vocab + 1 {
        return Err(Error::DimensionMismatch {
            op: "ctc_brute_force",
            lhs: shape.to_vec(),
            rhs: vec![0, vocab + 1],
        });
    }
    let t_len = shape[0];
    let classes = vocab + 1;
    let paths = (classes as u128).pow(t_len as u32);
    if paths > ORACLE_PATH_LIMIT {
        return Err(Error::OracleTooLarge {
            paths,
            limit: ORACLE_PATH_LIMIT,
        });
    }

    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path) == labels {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| lattice.data()[t * classes + c])
                .sum();
            total += logp.exp();
        }
        let mut digit = 0;
        loop {
            if digit == t_len {
                return Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY });
            }
            path[digit] += 1;
            if path[digit] < classes {
                break;
            }
            path[digit] = 0;
            digit += 1;
        }
    }
}

/// Best-path decoding: per-step argmax (ties toward the lower class id),
/// collapse repeats, drop blanks.
pub fn greedy_decode<E: Elem>(lattice: &Tensor<E>) -> Vec<usize> {
    let classes = lattice.shape()[lattice.shape().len() - 1];
    let path: Vec<usize> = lattice
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Writes one lattice row per line, comma-separated log-probabilities,
/// using the shortest round-trippable decimal form.
pub fn write_lattice_csv<E: Elem>(path: &Path, lattice: &Tensor<E>) -> Result<()> {
    let shape = lattice.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: lattice.numel(),
        });
    }
    let classes = shape[1];
    let mut text = String::new();
    for row in lattice.data().chunks(classes) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            let _ = write!(text, "{}", v.to_f64());
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads the format written by [`write_lattice_csv`].
pub fn read_lattice_csv(path: &Path) -> Result<Tensor<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| {
                    Error::Dataset(format!(
                        "{}:{}: bad log-probability {cell:?}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let classes = rows.first().map(|r| r.len()).unwrap_or(0);
    if classes == 0 {
        return Err(Error::Dataset(format!(
            "{}: empty lattice",
            path.display()
        )));
    }
    let steps = rows.len();
    Ok(Tensor::from_vec(
        &[steps, classes],
        rows.into_iter().flatten().collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, steps: usize, classes: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(steps * classes);
        for _ in 0..steps {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|p| (p / sum).ln()));
        }
        Tensor::from_vec(&[steps, classes], data)
    }

    fn forward_value(lattice: &Tensor<f64>, labels: &[usize], vocab: usize) -> Option<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(lattice.clone());
        match ctc_forward_loss(&mut tape, x, labels, vocab).unwrap() {
            CtcOutcome::Loss(l) => Some(tape.value(l).item()),
            CtcOutcome::Infeasible => None,
        }
    }

    #[test]
    fn single_step_uniform_lattice_gives_ln_3() {
        let lp = (1.0f64 / 3.0).ln();
        let lattice = Tensor::from_vec(&[1, 3], vec![lp; 3]);
        let loss = forward_value(&lattice, &[1], 2).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_a_separating_step() {
        assert_eq!(min_steps(&[1, 1]), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lattice = random_lattice(&mut rng, 2, 3);
        assert!(forward_value(&lattice, &[1, 1], 2).is_none());
        assert_eq!(ctc_brute_force(&lattice, &[1, 1], 2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn three_step_lattice_matches_27_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lattice = random_lattice(&mut rng, 3, 3);
        let fwd = forward_value(&lattice, &[1], 2).unwrap();
        let brute = ctc_brute_force(&lattice, &[1], 2).unwrap();
        assert!((fwd - brute).abs() < 1e-12, "fwd {fwd} vs brute {brute}");
    }

    #[test]
    fn forward_agrees_with_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut infeasible_seen = 0;
        for _ in 0..60 {
            let vocab = rng.gen_range(1..=4usize);
            let steps = rng.gen_range(1..=6usize);
            let n = rng.gen_range(0..=3usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=vocab)).collect();
            let lattice = random_lattice(&mut rng, steps, vocab + 1);
            let brute = ctc_brute_force(&lattice, &labels, vocab).unwrap();
            match forward_value(&lattice, &labels, vocab) {
                Some(fwd) => assert!(
                    (fwd - brute).abs() < 1e-9,
                    "fwd {fwd} vs brute {brute} for labels {labels:?}"
                ),
                None => {
                    assert_eq!(brute, f64::INFINITY, "labels {labels:?} steps {steps}");
                    infeasible_seen += 1;
                }
            }
        }
        assert!(infeasible_seen > 0, "sampler never produced an infeasible case");
    }

    #[test]
    fn loss_is_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = 3;
        let lattice = random_lattice(&mut rng, 5, vocab + 1);
        let labels = [2usize, 1, 3];
        // Permute gloss ids 1,2,3 -> 3,1,2; blank stays put.
        let perm = [0usize, 3, 1, 2];
        let classes = vocab + 1;
        let mut permuted = vec![0.0; lattice.numel()];
        for t in 0..5 {
            for c in 0..classes {
                permuted[t * classes + perm[c]] = lattice.data()[t * classes + c];
            }
        }
        let permuted = Tensor::from_vec(&[5, classes], permuted);
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let a = forward_value(&lattice, &labels, vocab).unwrap();
        let b = forward_value(&permuted, &relabeled, vocab).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_target_charges_only_blank_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lattice = random_lattice(&mut rng, 4, 3);
        let loss = forward_value(&lattice, &[], 2).unwrap();
        let direct: f64 = (0..4).map(|t| lattice.data()[t * 3]).sum();
        assert!((loss + direct).abs() < 1e-12);
        let brute = ctc_brute_force(&lattice, &[], 2).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_for_normalized_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let vocab = rng.gen_range(1..=3usize);
            let steps = rng.gen_range(2..=6usize);
            let labels: Vec<usize> =
                (0..rng.gen_range(0..=2usize)).map(|_| rng.gen_range(1..=vocab)).collect();
            if let Some(loss) = forward_value(
                &random_lattice(&mut rng, steps, vocab + 1),
                &labels,
                vocab,
            ) {
                assert!(loss > -1e-12, "negative loss {loss}");
            }
        }
    }

    #[test]
    fn lattice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lattice = random_lattice(&mut rng, 4, 4);
        let labels = vec![1usize, 3];
        let f = move |tape: &mut Tape<f64>, inputs: &[Var]| match ctc_forward_loss(
            tape, inputs[0], &labels, 3,
        )
        .unwrap()
        {
            CtcOutcome::Loss(l) => l,
            CtcOutcome::Infeasible => panic!("instance chosen to be feasible"),
        };
        let report = grad_check(&f, &[lattice], 1e-4, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn labels_outside_the_vocabulary_are_rejected() {
        let lattice: Tensor<f64> = Tensor::zeros(&[3, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(lattice.clone());
        match ctc_forward_loss(&mut tape, x, &[0], 3) {
            Err(Error::InvalidLabel { id: 0, vocab: 3 }) => {}
            other => panic!("expected InvalidLabel, got {other:?}"),
        }
        match ctc_brute_force(&lattice, &[4], 3) {
            Err(Error::InvalidLabel { id: 4, vocab: 3 }) => {}
            other => panic!("expected InvalidLabel, got {other:?}"),
        }
    }

    #[test]
    fn oversized_oracle_instances_are_refused() {
        let lattice: Tensor<f64> = Tensor::zeros(&[12, 5]);
        match ctc_brute_force(&lattice, &[1], 4) {
            Err(Error::OracleTooLarge { paths, limit }) => {
                assert_eq!(paths, 5u128.pow(12));
                assert_eq!(limit, 1_000_000);
            }
            other => panic!("expected OracleTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn decoding_collapses_repeats_and_blanks() {
        // Rows argmax to [1, 1, blank, 2].
        let rows = [
            [0.1, 0.8, 0.1],
            [0.2, 0.7, 0.1],
            [0.9, 0.05, 0.05],
            [0.1, 0.2, 0.7],
        ];
        let data: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        let lattice = Tensor::from_vec(&[4, 3], data);
        assert_eq!(greedy_decode(&lattice), vec![1, 2]);

        let all_blank: Tensor<f64> =
            Tensor::from_vec(&[3, 3], vec![0.8f64.ln(), 0.1f64.ln(), 0.1f64.ln()].repeat(3));
        assert_eq!(greedy_decode(&all_blank), Vec::<usize>::new());

        // argmax path [1, blank, 1]: the blank separates the repeat.
        let rows = [[0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]];
        let data: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        assert_eq!(greedy_decode(&Tensor::from_vec(&[3, 3], data)), vec![1, 1]);

        // Exact tie between classes 1 and 2 resolves to 1.
        let tied: Tensor<f64> = Tensor::from_vec(&[1, 3], vec![-2.0, -1.0, -1.0]);
        assert_eq!(greedy_decode(&tied), vec![1]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lattice.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lattice = random_lattice(&mut rng, 5, 4);
        write_lattice_csv(&path, &lattice).unwrap();
        let back = read_lattice_csv(&path).unwrap();
        assert_eq!(back.shape(), lattice.shape());
        for (a, b) in back.data().iter().zip(lattice.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ragged_csv_rows_are_reported_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "-1.0,-2.0\n-1.0\n").unwrap();
        match read_lattice_csv(&path) {
            Err(Error::Dataset(msg)) => assert!(msg.contains(":2:"), "message was {msg}"),
            other => panic!("expected Dataset error, got {other:?}"),
        }
    }
}
