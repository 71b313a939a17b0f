//! Rule sampling and row-wise materialisation of the nine panels.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Attribute, CellSet, ObjectSpec, ProblemType, Rule, RuleKind, SymbolicPanel, CELLS, MAX_RETRIES};
use crate::error::{Error, Result};

const VALUE_KINDS: [RuleKind; 3] = [RuleKind::Null, RuleKind::Constant, RuleKind::Distribution3];
const LOGIC_KINDS: [RuleKind; 3] = [RuleKind::And, RuleKind::Or, RuleKind::Xor];
const ORDERED_KINDS: [RuleKind; 3] = [RuleKind::Constant, RuleKind::Distribution3, RuleKind::Progression];

/// Per row, per panel attribute value; `None` leaves it free per object.
pub type ValueGrid = [[Option<u8>; 3]; 3];
pub type SetGrid = [[CellSet; 3]; 3];
pub type CountGrid = [[u8; 3]; 3];

/// Cells 0..8 shifted by `k` in row-major order with wraparound.
pub fn shift_set(set: CellSet, k: i32) -> CellSet {
    (0..CELLS as i32)
        .filter(|c| set >> c & 1 == 1)
        .fold(0, |m, c| m | 1 << (c + k).rem_euclid(CELLS as i32))
}

pub fn logic_op(kind: RuleKind, a: CellSet, b: CellSet) -> Option<CellSet> {
    match kind {
        RuleKind::And => Some(a & b),
        RuleKind::Or => Some(a | b),
        RuleKind::Xor => Some(a ^ b),
        _ => None,
    }
}

/// A uniformly random set of `lo..=hi` distinct cells.
pub(crate) fn random_set(rng: &mut impl Rng, lo: usize, hi: usize) -> CellSet {
    let n = rng.random_range(lo..=hi);
    let mut cells: Vec<u8> = (0..CELLS).collect();
    cells.shuffle(rng);
    cells[..n].iter().fold(0, |m, &c| m | 1 << c)
}

fn distinct_triple(rng: &mut impl Rng, domain: u8) -> Vec<u16> {
    let mut vals: Vec<u16> = (0..domain as u16).collect();
    vals.shuffle(rng);
    vals.truncate(3);
    vals
}

fn mutable_count(rules: &[Rule]) -> usize {
    rules.iter().filter(|r| r.kind != RuleKind::Null).count()
}

/// Draws value rules for shape, color and size plus the type's location or
/// count rule. Draws are repeated until at least three attributes are
/// rule-governed, as the bisection tree needs three distinct levels.
pub fn sample_rules(problem_type: ProblemType, rng: &mut impl Rng) -> Vec<Rule> {
    loop {
        let mut rules: Vec<Rule> = Attribute::VALUES
            .iter()
            .map(|&attr| {
                let mut r = Rule::new(attr, *VALUE_KINDS.choose(rng).expect("nonempty"));
                if r.kind == RuleKind::Distribution3 {
                    r.triple = distinct_triple(rng, attr.domain());
                }
                r
            })
            .collect();
        let structural = match problem_type {
            ProblemType::Logic => Rule::new(Attribute::Location, *LOGIC_KINDS.choose(rng).expect("nonempty")),
            ProblemType::Location => {
                let mut r = Rule::new(Attribute::Location, *ORDERED_KINDS.choose(rng).expect("nonempty"));
                match r.kind {
                    RuleKind::Distribution3 => r.triple = distinct_sets(rng),
                    RuleKind::Progression => r.step = if rng.random_bool(0.5) { 1 } else { -1 },
                    _ => {}
                }
                r
            }
            ProblemType::Count => {
                let mut r = Rule::new(Attribute::Count, *ORDERED_KINDS.choose(rng).expect("nonempty"));
                match r.kind {
                    RuleKind::Distribution3 => {
                        r.triple = distinct_triple(rng, CELLS).into_iter().map(|c| c + 1).collect()
                    }
                    RuleKind::Progression => r.step = if rng.random_bool(0.5) { 1 } else { -1 },
                    _ => {}
                }
                r
            }
        };
        rules.push(structural);
        if mutable_count(&rules) >= 3 {
            return rules;
        }
    }
}

fn distinct_sets(rng: &mut impl Rng) -> Vec<u16> {
    let mut sets: Vec<u16> = Vec::with_capacity(3);
    while sets.len() < 3 {
        let s = random_set(rng, 1, 5);
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    sets
}

/// Per-panel values of a shape, color or size rule.
pub fn apply_value_rule(rule: &Rule, rng: &mut impl Rng) -> Result<ValueGrid> {
    let domain = rule.attribute.domain();
    let mut grid = [[None; 3]; 3];
    match rule.kind {
        RuleKind::Null => {}
        RuleKind::Constant => {
            for row in &mut grid {
                let v = rng.random_range(0..domain);
                *row = [Some(v); 3];
            }
        }
        RuleKind::Distribution3 => {
            let t = &rule.triple;
            if t.len() != 3 || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || t.iter().any(|&v| v >= domain as u16) {
                return Err(Error::Generation(format!("invalid distribution-of-3 triple {t:?}")));
            }
            for row in &mut grid {
                let mut p = t.clone();
                p.shuffle(rng);
                *row = [Some(p[0] as u8), Some(p[1] as u8), Some(p[2] as u8)];
            }
        }
        k => return Err(Error::Generation(format!("{k:?} is not a value rule"))),
    }
    Ok(grid)
}

/// Occupied cell sets for every panel under a location rule.
pub fn apply_location_rule(rule: &Rule, rng: &mut impl Rng) -> Result<SetGrid> {
    let mut grid = [[0; 3]; 3];
    for row in &mut grid {
        *row = match rule.kind {
            RuleKind::And | RuleKind::Or | RuleKind::Xor => {
                let mut found = None;
                for _ in 0..MAX_RETRIES {
                    let (a, b) = (random_set(rng, 2, 5), random_set(rng, 2, 5));
                    let c = logic_op(rule.kind, a, b).expect("logic kind");
                    if c != 0 {
                        found = Some([a, b, c]);
                        break;
                    }
                }
                found.ok_or_else(|| Error::Generation(format!("no nonempty {:?} row", rule.kind)))?
            }
            RuleKind::Constant => [random_set(rng, 1, 5); 3],
            RuleKind::Distribution3 => {
                if rule.triple.len() != 3 || rule.triple.iter().any(|&s| s == 0 || s >= 1 << CELLS) {
                    return Err(Error::Generation(format!("invalid location triple {:?}", rule.triple)));
                }
                let mut p = rule.triple.clone();
                p.shuffle(rng);
                [p[0], p[1], p[2]]
            }
            RuleKind::Progression => {
                if rule.step.abs() != 1 {
                    return Err(Error::Generation(format!("progression step {}", rule.step)));
                }
                let s = random_set(rng, 1, 4);
                let k = rule.step as i32;
                [s, shift_set(s, k), shift_set(s, 2 * k)]
            }
            RuleKind::Null => return Err(Error::Generation("location cannot be null".into())),
        };
    }
    Ok(grid)
}

/// Object counts for every panel under a count rule.
pub fn apply_count_rule(rule: &Rule, rng: &mut impl Rng) -> Result<CountGrid> {
    let mut grid = [[0; 3]; 3];
    for row in &mut grid {
        *row = match rule.kind {
            RuleKind::Constant => [rng.random_range(1..=CELLS); 3],
            RuleKind::Distribution3 => {
                let t = &rule.triple;
                if t.len() != 3 || t.iter().any(|&c| c == 0 || c > CELLS as u16) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                    return Err(Error::Generation(format!("invalid count triple {t:?}")));
                }
                let mut p = t.clone();
                p.shuffle(rng);
                [p[0] as u8, p[1] as u8, p[2] as u8]
            }
            RuleKind::Progression => {
                let s = rule.step as i32;
                if s.abs() != 1 {
                    return Err(Error::Generation(format!("progression step {s}")));
                }
                // Start so that all three counts stay within 1..=9.
                let (lo, hi) = if s > 0 { (1, CELLS as i32 - 2) } else { (3, CELLS as i32) };
                let c = rng.random_range(lo..=hi);
                [c as u8, (c + s) as u8, (c + 2 * s) as u8]
            }
            k => return Err(Error::Generation(format!("{k:?} is not a count rule"))),
        };
    }
    Ok(grid)
}

/// Builds all nine panels row-major from the rules.
pub(crate) fn materialize(problem_type: ProblemType, rules: &[Rule], rng: &mut impl Rng) -> Result<Vec<SymbolicPanel>> {
    let find = |a: Attribute| {
        rules.iter().find(|r| r.attribute == a).ok_or_else(|| Error::Generation(format!("no {a:?} rule")))
    };
    let shape = apply_value_rule(find(Attribute::Shape)?, rng)?;
    let color = apply_value_rule(find(Attribute::Color)?, rng)?;
    let size = apply_value_rule(find(Attribute::Size)?, rng)?;
    let sets: SetGrid = match problem_type {
        ProblemType::Logic | ProblemType::Location => apply_location_rule(find(Attribute::Location)?, rng)?,
        ProblemType::Count => {
            let counts = apply_count_rule(find(Attribute::Count)?, rng)?;
            counts.map(|row| row.map(|n| random_set(rng, n as usize, n as usize)))
        }
    };
    let mut panels = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            let objects = super::cells_of(sets[r][c])
                .into_iter()
                .map(|cell| ObjectSpec {
                    cell,
                    shape: shape[r][c].unwrap_or_else(|| rng.random_range(0..super::SHAPES)),
                    size: size[r][c].unwrap_or_else(|| rng.random_range(0..super::SIZES)),
                    color: color[r][c].unwrap_or_else(|| rng.random_range(0..super::COLORS)),
                })
                .collect();
            panels.push(SymbolicPanel::new(objects));
        }
    }
    Ok(panels)
}
