//! Rule verification kept separate from the generator: it shares none of
//! the sampling helpers and reasons over plain cell lists.

use std::collections::BTreeSet;

use super::{Attribute, MatrixProblem, ProblemType, Rule, RuleKind, SymbolicPanel};

type Verdict = std::result::Result<(), String>;

fn cells(p: &SymbolicPanel) -> BTreeSet<u8> {
    p.objects.iter().map(|o| o.cell).collect()
}

fn values(p: &SymbolicPanel, a: Attribute) -> BTreeSet<u8> {
    p.objects
        .iter()
        .map(|o| match a {
            Attribute::Shape => o.shape,
            Attribute::Color => o.color,
            Attribute::Size => o.size,
            _ => o.cell,
        })
        .collect()
}

fn single(set: &BTreeSet<u8>) -> Option<u8> {
    (set.len() == 1).then(|| *set.iter().next().expect("one element"))
}

fn check_panel(p: &SymbolicPanel) -> Verdict {
    let cs = cells(p);
    if p.objects.is_empty() || p.objects.len() > 9 || cs.len() != p.objects.len() {
        return Err(format!("panel with {} objects over {} cells", p.objects.len(), cs.len()));
    }
    if p.objects.iter().any(|o| o.cell > 8 || o.shape > 2 || o.size > 2 || o.color > 7) {
        return Err("object code out of range".into());
    }
    Ok(())
}

fn check_value_row(rule: &Rule, row: &[SymbolicPanel]) -> Verdict {
    let a = rule.attribute;
    match rule.kind {
        RuleKind::Null => Ok(()),
        RuleKind::Constant => {
            let all: BTreeSet<u8> = row.iter().flat_map(|p| values(p, a)).collect();
            if all.len() == 1 {
                Ok(())
            } else {
                Err(format!("{a:?} not constant across row: {all:?}"))
            }
        }
        RuleKind::Distribution3 => {
            let mut seen = BTreeSet::new();
            for p in row {
                let v = single(&values(p, a)).ok_or_else(|| format!("{a:?} mixed within a panel"))?;
                seen.insert(v as u16);
            }
            let want: BTreeSet<u16> = rule.triple.iter().copied().collect();
            if seen == want && want.len() == 3 {
                Ok(())
            } else {
                Err(format!("{a:?} row {seen:?} is not the triple {want:?}"))
            }
        }
        k => Err(format!("{k:?} is not a value rule")),
    }
}

fn mask_cells(mask: u16) -> BTreeSet<u8> {
    (0u8..9).filter(|&c| mask & (1 << c) != 0).collect()
}

fn check_location_row(rule: &Rule, row: &[SymbolicPanel]) -> Verdict {
    let (a, b, c) = (cells(&row[0]), cells(&row[1]), cells(&row[2]));
    let ok = match rule.kind {
        RuleKind::And => c == a.intersection(&b).copied().collect(),
        RuleKind::Or => c == a.union(&b).copied().collect(),
        RuleKind::Xor => c == a.symmetric_difference(&b).copied().collect(),
        RuleKind::Constant => a == b && b == c,
        RuleKind::Distribution3 => {
            let mut got = vec![a, b, c];
            let mut want: Vec<BTreeSet<u8>> = rule.triple.iter().map(|&m| mask_cells(m)).collect();
            got.sort();
            want.sort();
            got == want
        }
        RuleKind::Progression => {
            let shift = |s: &BTreeSet<u8>| -> BTreeSet<u8> {
                s.iter().map(|&x| ((x as i32 + rule.step as i32 + 9) % 9) as u8).collect()
            };
            rule.step.abs() == 1 && b == shift(&a) && c == shift(&b)
        }
        RuleKind::Null => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("location row violates {:?}", rule.kind))
    }
}

fn check_count_row(rule: &Rule, row: &[SymbolicPanel]) -> Verdict {
    let n: Vec<i32> = row.iter().map(|p| p.objects.len() as i32).collect();
    let ok = match rule.kind {
        RuleKind::Constant => n[0] == n[1] && n[1] == n[2],
        RuleKind::Distribution3 => {
            let got: BTreeSet<u16> = n.iter().map(|&c| c as u16).collect();
            let want: BTreeSet<u16> = rule.triple.iter().copied().collect();
            got == want && want.len() == 3
        }
        RuleKind::Progression => {
            let s = rule.step as i32;
            s.abs() == 1 && n[1] - n[0] == s && n[2] - n[1] == s
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("counts {n:?} violate {:?}", rule.kind))
    }
}

/// Whether all nine row-major panels obey every rule in every row.
pub fn satisfies_rules(problem_type: ProblemType, rules: &[Rule], grid: &[SymbolicPanel]) -> Verdict {
    if grid.len() != 9 {
        return Err(format!("grid of {} panels", grid.len()));
    }
    grid.iter().try_for_each(check_panel)?;
    let structural = match problem_type {
        ProblemType::Count => Attribute::Count,
        _ => Attribute::Location,
    };
    for attr in [Attribute::Shape, Attribute::Color, Attribute::Size, structural] {
        if !rules.iter().any(|r| r.attribute == attr) {
            return Err(format!("missing {attr:?} rule"));
        }
    }
    for row in grid.chunks(3) {
        for rule in rules {
            match rule.attribute {
                Attribute::Location => check_location_row(rule, row)?,
                Attribute::Count => check_count_row(rule, row)?,
                _ => check_value_row(rule, row)?,
            }
        }
    }
    Ok(())
}

fn summary(p: &SymbolicPanel, a: Attribute) -> Vec<u8> {
    match a {
        Attribute::Location => cells(p).into_iter().collect(),
        Attribute::Count => vec![p.objects.len() as u8],
        _ => values(p, a).into_iter().collect(),
    }
}

/// Full validation: the answer completes the matrix, no other candidate
/// does, candidates are distinct and every bisection attribute splits the
/// candidates 4/4 around the answer's value.
pub fn check_problem(p: &MatrixProblem) -> Verdict {
    if p.context.len() != 8 || p.candidates.len() != 8 || p.answer >= 8 {
        return Err("malformed problem".into());
    }
    if !p.images.is_empty() && p.images.len() != 16 {
        return Err(format!("{} images", p.images.len()));
    }
    satisfies_rules(p.problem_type, &p.rules, &p.completed_with(p.answer))?;
    for i in (0..8).filter(|&i| i != p.answer) {
        if satisfies_rules(p.problem_type, &p.rules, &p.completed_with(i)).is_ok() {
            return Err(format!("candidate {i} also completes the matrix"));
        }
    }
    for i in 0..8 {
        for j in i + 1..8 {
            if p.candidates[i] == p.candidates[j] {
                return Err(format!("candidates {i} and {j} coincide"));
            }
        }
    }
    let distinct: BTreeSet<Attribute> = p.bisection.iter().copied().collect();
    if p.bisection.len() != 3 || distinct.len() != 3 {
        return Err(format!("bisection attributes {:?}", p.bisection));
    }
    let correct = &p.candidates[p.answer];
    for &a in &p.bisection {
        if rules_null(&p.rules, a) {
            return Err(format!("bisection modified null attribute {a:?}"));
        }
        let want = summary(correct, a);
        let keep = p.candidates.iter().filter(|c| summary(c, a) == want).count();
        if keep != 4 {
            return Err(format!("{a:?} split {keep}/{}", 8 - keep));
        }
    }
    Ok(())
}

fn rules_null(rules: &[Rule], a: Attribute) -> bool {
    rules.iter().any(|r| r.attribute == a && r.kind == RuleKind::Null)
}
