use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stsn::image::PanelImage;
use stsn::matrixgen::dataset::{decode_dataset, encode_dataset};
use stsn::matrixgen::raster::gray;
use stsn::matrixgen::rules::{apply_count_rule, shift_set};
use stsn::matrixgen::*;
use stsn::Error;

fn set(cells: &[u8]) -> CellSet {
    cells.iter().fold(0, |m, &c| m | 1 << c)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn logic_ops_on_cell_sets() {
    assert_eq!(logic_op(RuleKind::Xor, set(&[1, 2]), set(&[2, 3])), Some(set(&[1, 3])));
    assert_eq!(logic_op(RuleKind::And, set(&[0, 4, 8]), set(&[4, 8, 2])), Some(set(&[4, 8])));
    assert_eq!(logic_op(RuleKind::Or, set(&[0]), set(&[8])), Some(set(&[0, 8])));
    assert_eq!(logic_op(RuleKind::Constant, 1, 2), None);
}

#[test]
fn location_progression_shifts_by_one() {
    let s = set(&[0, 3]);
    assert_eq!(shift_set(s, 1), set(&[1, 4]));
    assert_eq!(shift_set(s, 2), set(&[2, 5]));
    assert_eq!(shift_set(set(&[8]), 1), set(&[0]));
    assert_eq!(shift_set(set(&[0]), -1), set(&[8]));
}

#[test]
fn rule_kinds_belong_to_their_type() {
    let mut r = rng(1);
    for t in ProblemType::ALL {
        for _ in 0..200 {
            let rules = sample_rules(t, &mut r);
            assert_eq!(rules.len(), 4);
            assert!(rules.iter().filter(|q| q.kind != RuleKind::Null).count() >= 3);
            for q in &rules {
                let ok = match (t, q.attribute) {
                    (_, Attribute::Shape | Attribute::Color | Attribute::Size) => {
                        matches!(q.kind, RuleKind::Null | RuleKind::Constant | RuleKind::Distribution3)
                    }
                    (ProblemType::Logic, Attribute::Location) => {
                        matches!(q.kind, RuleKind::And | RuleKind::Or | RuleKind::Xor)
                    }
                    (ProblemType::Location, Attribute::Location) | (ProblemType::Count, Attribute::Count) => {
                        matches!(q.kind, RuleKind::Constant | RuleKind::Distribution3 | RuleKind::Progression)
                    }
                    _ => false,
                };
                assert!(ok, "{t:?} drew {q:?}");
            }
        }
    }
}

#[test]
fn value_rules_fill_rows() {
    let mut r = rng(2);
    let mut rule = Rule::new(Attribute::Color, RuleKind::Distribution3);
    rule.triple = vec![1, 4, 6];
    let g = apply_value_rule(&rule, &mut r).unwrap();
    for row in g {
        let vals: BTreeSet<u8> = row.iter().map(|v| v.unwrap()).collect();
        assert_eq!(vals, BTreeSet::from([1, 4, 6]));
    }
    let g = apply_value_rule(&Rule::new(Attribute::Shape, RuleKind::Constant), &mut r).unwrap();
    for row in g {
        assert!(row[0].is_some() && row.iter().all(|v| *v == row[0]));
    }
    let g = apply_value_rule(&Rule::new(Attribute::Size, RuleKind::Null), &mut r).unwrap();
    assert!(g.iter().flatten().all(Option::is_none));

    rule.triple = vec![1, 1, 2];
    assert!(matches!(apply_value_rule(&rule, &mut r), Err(Error::Generation(_))));
    assert!(apply_value_rule(&Rule::new(Attribute::Shape, RuleKind::Xor), &mut r).is_err());
}

#[test]
fn count_progression_stays_in_range() {
    let mut r = rng(3);
    for step in [1i8, -1] {
        let mut rule = Rule::new(Attribute::Count, RuleKind::Progression);
        rule.step = step;
        for _ in 0..100 {
            for row in apply_count_rule(&rule, &mut r).unwrap() {
                assert!(row.iter().all(|&n| (1..=9).contains(&n)));
                assert_eq!(row[1] as i32 - row[0] as i32, step as i32);
                assert_eq!(row[2] as i32 - row[1] as i32, step as i32);
            }
        }
    }
}

#[test]
fn location_rules_hold_per_row() {
    let mut r = rng(4);
    for kind in [RuleKind::And, RuleKind::Or, RuleKind::Xor] {
        let g = apply_location_rule(&Rule::new(Attribute::Location, kind), &mut r).unwrap();
        for [a, b, c] in g {
            assert_ne!(c, 0);
            assert_eq!(Some(c), logic_op(kind, a, b));
        }
    }
    let mut prog = Rule::new(Attribute::Location, RuleKind::Progression);
    prog.step = -1;
    for [a, b, c] in apply_location_rule(&prog, &mut r).unwrap() {
        assert_eq!(b, shift_set(a, -1));
        assert_eq!(c, shift_set(b, -1));
    }
    assert!(apply_location_rule(&Rule::new(Attribute::Location, RuleKind::Null), &mut r).is_err());
}

#[test]
fn problems_are_deterministic_per_seed_and_index() {
    let a = generate_set(&[ProblemType::Logic, ProblemType::Count], 0, 3, 7, 48).unwrap();
    let b = generate_set(&[ProblemType::Logic, ProblemType::Count], 0, 3, 7, 48).unwrap();
    assert_eq!(a, b);
    // Sub-ranges regenerate the same problems.
    let tail = generate_set(&[ProblemType::Logic], 1, 2, 7, 48).unwrap();
    assert_eq!(tail[..], a[1..3]);
    let other = generate_set(&[ProblemType::Logic], 0, 3, 8, 48).unwrap();
    assert_ne!(other[0].context, a[0].context);
}

#[test]
fn generate_full_rejects_small_panels() {
    let mut r = problem_rng(0, 0);
    assert!(matches!(generate_full(ProblemType::Logic, 47, &mut r), Err(Error::Generation(_))));
}

#[test]
fn checker_flags_broken_problems() {
    let mut p = generate_symbolic(ProblemType::Location, &mut problem_rng(5, 0)).unwrap();
    check_problem(&p).unwrap();
    let mut wrong = p.clone();
    wrong.answer = (p.answer + 1) % 8;
    assert!(check_problem(&wrong).is_err());
    let mut dup = p.clone();
    let other = (p.answer + 1) % 8;
    dup.candidates[other] = dup.candidates[(p.answer + 2) % 8].clone();
    assert!(check_problem(&dup).is_err());
    p.bisection.pop();
    assert!(check_problem(&p).is_err());
}

/// One pass over 2000 problems per type: rule soundness, split, unique
/// leaf and the context-blind baseline.
#[test]
fn generator_soundness_over_2000_per_type() {
    let per_type = 2000u64;
    let mut vote_rng = rng(99);
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in ProblemType::ALL {
        for i in 0..per_type {
            let mut r = problem_rng(11, ((t.code() as u64) << 32) + i);
            let p = generate_symbolic(t, &mut r).unwrap();
            if let Err(e) = check_problem(&p) {
                panic!("{t:?} #{i}: {e}");
            }
            hits += (majority_vote(&p.candidates, &mut vote_rng) == p.answer) as usize;
            total += 1;
        }
    }
    let n = total as f64;
    let sd = (n * 0.125 * 0.875).sqrt();
    let dev = (hits as f64 - n * 0.125).abs();
    eprintln!("majority vote {hits}/{total}");
    assert!(dev <= 3.0 * sd, "majority vote {hits}/{total}, {:.1} sd from chance", dev / sd);
}

#[test]
fn answer_position_is_roughly_uniform() {
    let mut counts = [0usize; 8];
    for i in 0..800 {
        let p = generate_symbolic(ProblemType::Logic, &mut problem_rng(12, i)).unwrap();
        counts[p.answer] += 1;
    }
    // 100 expected per slot, sd about 9.4.
    assert!(counts.iter().all(|&c| (60..=140).contains(&c)), "{counts:?}");
}

#[test]
fn empty_panel_renders_white() {
    let img = rasterize(&SymbolicPanel::default(), 48, 48);
    assert_eq!((img.height, img.width, img.channels), (48, 48, 1));
    assert!(img.data.iter().all(|&v| v == 1.0));
}

#[test]
fn objects_stay_inside_their_cell() {
    for cell in 0..9u8 {
        for shape in 0..3 {
            let o = ObjectSpec { cell, shape, size: 2, color: 0 };
            let img = rasterize(&SymbolicPanel::new(vec![o]), 48, 48);
            let (r0, c0) = ((cell / 3) as usize * 16, (cell % 3) as usize * 16);
            let mut inside = 0;
            for y in 0..48 {
                for x in 0..48 {
                    let dark = img.get(0, y, x) < 1.0;
                    let in_box = (r0..r0 + 16).contains(&y) && (c0..c0 + 16).contains(&x);
                    assert!(!dark || in_box, "cell {cell} shape {shape} leaks to ({y},{x})");
                    inside += dark as usize;
                }
            }
            assert!(inside > 20);
        }
    }
}

#[test]
fn raster_uses_color_gray_and_masks_match() {
    let p = SymbolicPanel::new(vec![
        ObjectSpec { cell: 4, shape: 1, size: 1, color: 3 },
        ObjectSpec { cell: 0, shape: 0, size: 0, color: 7 },
    ]);
    let img = rasterize(&p, 60, 60);
    let masks = object_masks(&p, 60, 60);
    assert_eq!(masks.len(), 2);
    for (o, m) in p.objects.iter().zip(&masks) {
        for (px, &on) in m.iter().enumerate() {
            if on {
                assert_eq!(img.data[px], gray(o.color));
            }
        }
    }
    assert_eq!(rasterize(&p, 60, 60), img);
    assert!(gray(0) == 0.0 && gray(7) < 0.81 && gray(7) > 0.79);
}

fn ramp(n: usize) -> PanelImage {
    let data = (0..n * n).map(|i| i as f32 / (n * n) as f32).collect();
    PanelImage::new(n, n, 1, data).unwrap()
}

#[test]
fn augmentation_identity_and_inverses() {
    let img = ramp(5);
    assert_eq!(Augmentation::IDENTITY.apply(&img), img);
    let half = Augmentation { quarter_turns: 2, ..Augmentation::IDENTITY };
    assert_eq!(half.apply(&half.apply(&img)), img);
    let quarter = Augmentation { quarter_turns: 1, ..Augmentation::IDENTITY };
    let mut x = img.clone();
    for _ in 0..4 {
        x = quarter.apply(&x);
    }
    assert_eq!(x, img);
    // A half turn equals flipping both axes.
    let both = Augmentation { flip_h: true, flip_v: true, ..Augmentation::IDENTITY };
    assert_eq!(both.apply(&img), half.apply(&img));
    // One counter-clockwise turn moves the top-right corner to top-left.
    assert_eq!(quarter.apply(&img).get(0, 0, 0), img.get(0, 0, 4));
}

#[test]
fn augmentation_keeps_range_and_labels() {
    let p = generate_full(ProblemType::Count, 48, &mut problem_rng(3, 9)).unwrap();
    let out = augment(&p.images, &mut rng(5));
    assert_eq!(out.len(), 16);
    assert!(out.iter().flat_map(|im| im.data.iter()).all(|v| (0.0..=1.0).contains(v)));
    // Corners are background; one factor applies to every panel.
    assert!(out.iter().all(|im| im.data[0] == out[0].data[0]));
    check_problem(&p).unwrap();
}

#[test]
fn dataset_round_trips() {
    let problems = generate_set(&ProblemType::ALL, 0, 2, 21, 48).unwrap();
    let bytes = encode_dataset(&problems).unwrap();
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back, problems);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    write_dataset(&problems, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), problems);
}

#[test]
fn dataset_rejects_corruption() {
    let problems = generate_set(&[ProblemType::Location], 0, 1, 1, 48).unwrap();
    let bytes = encode_dataset(&problems).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
}

#[test]
fn empty_dataset_round_trips() {
    let bytes = encode_dataset(&[]).unwrap();
    assert_eq!(bytes.len(), 4 + 2 + 4 + 2 + 2 + 1);
    assert!(decode_dataset(&bytes).unwrap().is_empty());
}

#[test]
fn split_sizes_scale() {
    assert_eq!(split_sizes(1.0), (16000, 2000, 2000));
    assert_eq!(split_sizes(0.01), (160, 20, 20));
    assert_eq!(split_sizes(0.0), (1, 1, 1));
}

#[test]
fn problem_type_parsing() {
    assert_eq!("Location".parse::<ProblemType>().unwrap(), ProblemType::Location);
    assert!("shapes".parse::<ProblemType>().is_err());
    for t in ProblemType::ALL {
        assert_eq!(ProblemType::from_code(t.code()).unwrap(), t);
    }
    assert!(ProblemType::from_code(3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_seed_gives_a_checked_problem(seed in any::<u64>(), index in 0u64..1 << 40, t in 0u8..3) {
        let t = ProblemType::from_code(t).unwrap();
        let p = generate_symbolic(t, &mut problem_rng(seed, index)).unwrap();
        prop_assert!(check_problem(&p).is_ok());
        prop_assert!(p.context.iter().chain(&p.candidates).all(SymbolicPanel::is_valid));
    }

    #[test]
    fn shifts_preserve_size_and_invert(cells in proptest::collection::btree_set(0u8..9, 0..9), k in -8i32..9) {
        let s = set(&cells.into_iter().collect::<Vec<_>>());
        prop_assert_eq!(shift_set(s, k).count_ones(), s.count_ones());
        prop_assert_eq!(shift_set(shift_set(s, k), -k), s);
    }
}
