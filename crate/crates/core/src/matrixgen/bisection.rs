//! Answer candidates from a depth-3 keep/modify tree over attributes.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::rules::random_set;
use super::{cells_of, Attribute, CellSet, MatrixDraft, ProblemType, RuleKind, SymbolicPanel, CELLS, MAX_RETRIES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Bisection {
    pub candidates: Vec<SymbolicPanel>,
    pub answer: usize,
    /// Attribute modified at each tree level.
    pub attributes: Vec<Attribute>,
}

#[derive(Clone, Copy, Debug)]
enum Change {
    Value(Attribute, u8),
    Location(CellSet),
    /// Target cell set: kept cells retain their objects, new cells copy the
    /// first object.
    Count(CellSet),
}

/// Attributes a candidate may differ in: the governed per-object
/// attributes plus location (logic, location types) or count.
pub fn mutable_attributes(draft: &MatrixDraft) -> Vec<Attribute> {
    let mut attrs: Vec<Attribute> = draft
        .rules
        .iter()
        .filter(|r| Attribute::VALUES.contains(&r.attribute) && r.kind != RuleKind::Null)
        .map(|r| r.attribute)
        .collect();
    attrs.push(match draft.problem_type {
        ProblemType::Logic | ProblemType::Location => Attribute::Location,
        ProblemType::Count => Attribute::Count,
    });
    attrs
}

fn pick_change(correct: &SymbolicPanel, attr: Attribute, rng: &mut impl Rng) -> Result<Change> {
    Ok(match attr {
        Attribute::Location => {
            let cur = correct.cell_set();
            let n = cur.count_ones() as usize;
            let n = if n < CELLS as usize { n } else { n - 1 };
            let mut set = cur;
            while set == cur {
                set = random_set(rng, n, n);
            }
            Change::Location(set)
        }
        Attribute::Count => {
            let cur = correct.count();
            let options: Vec<usize> = (1..=CELLS as usize).filter(|&c| c != cur).collect();
            let n = *options.choose(rng).expect("eight options");
            let occupied = correct.cell_set();
            let pool: Vec<u8> = if n < cur {
                cells_of(occupied)
            } else {
                (0..CELLS).filter(|c| occupied >> c & 1 == 0).collect()
            };
            let k = if n < cur { n } else { n - cur };
            let picked = pool.choose_multiple(rng, k).fold(0, |m, &c| m | 1 << c);
            Change::Count(if n < cur { picked } else { occupied | picked })
        }
        a => {
            let cur = correct
                .uniform(a)
                .ok_or_else(|| Error::Generation(format!("{a:?} is not uniform in the answer panel")))?;
            let options: Vec<u8> = (0..a.domain()).filter(|&v| v != cur).collect();
            Change::Value(a, *options.choose(rng).expect("domain above one"))
        }
    })
}

fn apply(panel: &SymbolicPanel, change: Change) -> SymbolicPanel {
    let mut objects = panel.objects.clone();
    match change {
        Change::Value(a, v) => objects.iter_mut().for_each(|o| o.set_value(a, v)),
        Change::Location(set) => {
            let cells = cells_of(set);
            objects.truncate(cells.len());
            for (o, c) in objects.iter_mut().zip(cells) {
                o.cell = c;
            }
        }
        Change::Count(target) => {
            let template = objects[0];
            let occupied = panel.cell_set();
            objects.retain(|o| target >> o.cell & 1 == 1);
            for cell in cells_of(target & !occupied) {
                objects.push(super::ObjectSpec { cell, ..template });
            }
        }
    }
    SymbolicPanel::new(objects)
}

/// Builds 8 shuffled candidates from the correct panel. Leaf `m` applies
/// the level-`d` modification whenever bit `d` of `m` is set, so leaf 0 is
/// the correct panel and every modified value is shared across its level.
pub fn bisection_answers(correct: &SymbolicPanel, draft: &MatrixDraft, rng: &mut impl Rng) -> Result<Bisection> {
    let pool = mutable_attributes(draft);
    if pool.len() < 3 {
        return Err(Error::Generation(format!("only {} mutable attributes", pool.len())));
    }
    for _ in 0..MAX_RETRIES {
        let attributes: Vec<Attribute> = pool.choose_multiple(rng, 3).copied().collect();
        let changes: Vec<Change> =
            attributes.iter().map(|&a| pick_change(correct, a, rng)).collect::<Result<_>>()?;
        let leaves: Vec<SymbolicPanel> = (0..8usize)
            .map(|m| {
                let mut p = correct.clone();
                for (d, &c) in changes.iter().enumerate() {
                    if m >> d & 1 == 1 {
                        p = apply(&p, c);
                    }
                }
                p
            })
            .collect();
        let distinct = (0..8).all(|i| (i + 1..8).all(|j| leaves[i] != leaves[j]));
        if !distinct {
            continue;
        }
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(rng);
        let answer = order.iter().position(|&m| m == 0).expect("leaf 0 present");
        let candidates = order.into_iter().map(|m| leaves[m].clone()).collect();
        return Ok(Bisection { candidates, answer, attributes });
    }
    Err(Error::Generation("bisection tree kept producing duplicate candidates".into()))
}

/// Comparable summary of one attribute of a panel.
pub fn feature(panel: &SymbolicPanel, attr: Attribute) -> u32 {
    match attr {
        Attribute::Location => panel.cell_set() as u32,
        Attribute::Count => panel.count() as u32,
        // 255 marks a mixed attribute.
        a => panel.uniform(a).map_or(255, u32::from),
    }
}

/// Context-blind baseline: every attribute with a unique most frequent
/// value across the candidates votes for the candidates holding it; the
/// most-voted candidate wins, ties broken at random.
pub fn majority_vote(candidates: &[SymbolicPanel], rng: &mut impl Rng) -> usize {
    let attrs = [Attribute::Shape, Attribute::Color, Attribute::Size, Attribute::Location, Attribute::Count];
    let mut votes = vec![0usize; candidates.len()];
    for attr in attrs {
        let mut tally: HashMap<u32, usize> = HashMap::new();
        for c in candidates {
            *tally.entry(feature(c, attr)).or_default() += 1;
        }
        let top = tally.values().copied().max().unwrap_or(0);
        let modes: Vec<u32> = tally.iter().filter(|&(_, &n)| n == top).map(|(&v, _)| v).collect();
        if let [mode] = modes[..] {
            for (i, c) in candidates.iter().enumerate() {
                if feature(c, attr) == mode {
                    votes[i] += 1;
                }
            }
        }
    }
    let best = votes.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..candidates.len()).filter(|&i| votes[i] == best).collect();
    *tied.choose(rng).expect("at least one candidate")
}
