//! Procedural 3×3 matrix problems over a grid of gray 2-D shapes.

pub mod augment;
pub mod bisection;
pub mod checker;
pub mod dataset;
pub mod raster;
pub mod rules;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, Augmentation};
pub use bisection::{bisection_answers, majority_vote, Bisection};
pub use checker::{check_problem, satisfies_rules};
pub use dataset::{read_dataset, write_dataset};
pub use raster::{object_masks, rasterize};
pub use rules::{apply_location_rule, apply_value_rule, logic_op, sample_rules};

use crate::error::{Error, Result};
use crate::image::PanelImage;

pub const SHAPES: u8 = 3;
pub const SIZES: u8 = 3;
pub const COLORS: u8 = 8;
pub const CELLS: u8 = 9;

/// Attempts made before a sampling step gives up.
pub(crate) const MAX_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemType {
    Logic,
    Location,
    Count,
}

impl ProblemType {
    pub const ALL: [ProblemType; 3] = [ProblemType::Logic, ProblemType::Location, ProblemType::Count];

    pub fn code(self) -> u8 {
        match self {
            ProblemType::Logic => 0,
            ProblemType::Location => 1,
            ProblemType::Count => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown problem type code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemType::Logic => "logic",
            ProblemType::Location => "location",
            ProblemType::Count => "count",
        }
    }
}

impl std::str::FromStr for ProblemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown problem type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Color,
    Size,
    Location,
    Count,
}

impl Attribute {
    pub const VALUES: [Attribute; 3] = [Attribute::Shape, Attribute::Color, Attribute::Size];

    /// Number of codes for a per-object attribute.
    pub fn domain(self) -> u8 {
        match self {
            Attribute::Shape => SHAPES,
            Attribute::Color => COLORS,
            Attribute::Size => SIZES,
            Attribute::Location | Attribute::Count => CELLS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub cell: u8,
    pub shape: u8,
    pub size: u8,
    pub color: u8,
}

impl ObjectSpec {
    pub fn value(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::Shape => self.shape,
            Attribute::Color => self.color,
            Attribute::Size => self.size,
            Attribute::Location | Attribute::Count => self.cell,
        }
    }

    pub fn set_value(&mut self, attr: Attribute, v: u8) {
        match attr {
            Attribute::Shape => self.shape = v,
            Attribute::Color => self.color = v,
            Attribute::Size => self.size = v,
            Attribute::Location | Attribute::Count => self.cell = v,
        }
    }
}

/// Objects of one panel, kept sorted by cell.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolicPanel {
    pub objects: Vec<ObjectSpec>,
}

/// Bitmask of occupied cells.
pub type CellSet = u16;

pub fn cells_of(set: CellSet) -> Vec<u8> {
    (0..CELLS).filter(|c| set >> c & 1 == 1).collect()
}

impl SymbolicPanel {
    pub fn new(mut objects: Vec<ObjectSpec>) -> Self {
        objects.sort_by_key(|o| o.cell);
        Self { objects }
    }

    pub fn cell_set(&self) -> CellSet {
        self.objects.iter().fold(0, |m, o| m | 1 << o.cell)
    }

    pub fn count(&self) -> usize {
        self.objects.len()
    }

    /// The value every object shares for `attr`, if they all agree.
    pub fn uniform(&self, attr: Attribute) -> Option<u8> {
        let first = self.objects.first()?.value(attr);
        self.objects.iter().all(|o| o.value(attr) == first).then_some(first)
    }

    /// 1..=9 objects in distinct cells with in-range codes.
    pub fn is_valid(&self) -> bool {
        let n = self.objects.len();
        (1..=CELLS as usize).contains(&n)
            && self.cell_set().count_ones() as usize == n
            && self.objects.iter().all(|o| {
                o.cell < CELLS && o.shape < SHAPES && o.size < SIZES && o.color < COLORS
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Null,
    Constant,
    Distribution3,
    Progression,
    And,
    Or,
    Xor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub attribute: Attribute,
    pub kind: RuleKind,
    /// The fixed triple of a distribution-of-3 rule: attribute codes,
    /// counts, or cell bitmasks for location.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triple: Vec<u16>,
    /// Per-panel step of a progression rule.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub step: i8,
}

fn is_zero(v: &i8) -> bool {
    *v == 0
}

impl Rule {
    pub fn new(attribute: Attribute, kind: RuleKind) -> Self {
        Self { attribute, kind, triple: Vec::new(), step: 0 }
    }
}

/// A complete problem: 8 context panels, 8 candidates and their images.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixProblem {
    pub problem_type: ProblemType,
    pub rules: Vec<Rule>,
    /// Attributes modified at the three bisection levels.
    pub bisection: Vec<Attribute>,
    pub context: Vec<SymbolicPanel>,
    pub candidates: Vec<SymbolicPanel>,
    pub answer: usize,
    /// Context images 0..7 then candidate images 0..7.
    pub images: Vec<PanelImage>,
}

impl MatrixProblem {
    pub fn rule(&self, attr: Attribute) -> Option<&Rule> {
        self.rules.iter().find(|r| r.attribute == attr)
    }

    /// The 9 panels of the matrix completed with candidate `i`.
    pub fn completed_with(&self, i: usize) -> Vec<SymbolicPanel> {
        let mut grid = self.context.clone();
        grid.push(self.candidates[i].clone());
        grid
    }
}

/// A problem's symbolic content before candidates are built.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDraft {
    pub problem_type: ProblemType,
    pub rules: Vec<Rule>,
    /// All 9 panels, row-major; the last is the correct answer.
    pub panels: Vec<SymbolicPanel>,
}

/// Per-problem random stream: the master seed selects the key and the
/// problem's global index selects the stream.
pub fn problem_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples rules and materialises all nine panels.
pub fn generate_problem(problem_type: ProblemType, rng: &mut ChaCha8Rng) -> Result<MatrixDraft> {
    let rules = sample_rules(problem_type, rng);
    let panels = rules::materialize(problem_type, &rules, rng)?;
    Ok(MatrixDraft { problem_type, rules, panels })
}

/// Generates one problem with candidates but without images.
pub fn generate_symbolic(problem_type: ProblemType, rng: &mut ChaCha8Rng) -> Result<MatrixProblem> {
    let draft = generate_problem(problem_type, rng)?;
    let correct = draft.panels[8].clone();
    let b = bisection_answers(&correct, &draft, rng)?;
    Ok(MatrixProblem {
        problem_type,
        rules: draft.rules,
        bisection: b.attributes,
        context: draft.panels[..8].to_vec(),
        candidates: b.candidates,
        answer: b.answer,
        images: Vec::new(),
    })
}

/// Generates one problem and rasterises its 16 panels at `size × size`.
pub fn generate_full(problem_type: ProblemType, size: usize, rng: &mut ChaCha8Rng) -> Result<MatrixProblem> {
    if size < raster::MIN_SIZE {
        return Err(Error::Generation(format!("panel size {size} below {}", raster::MIN_SIZE)));
    }
    let mut p = generate_symbolic(problem_type, rng)?;
    p.images = p.context.iter().chain(&p.candidates).map(|q| rasterize(q, size, size)).collect();
    Ok(p)
}

/// `n` problems of each listed type. Problem `i` of the `t`-th type draws
/// from stream `t·2^32 + offset + i`, so any sub-range regenerates
/// identically.
pub fn generate_set(
    types: &[ProblemType],
    offset: u64,
    n: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<MatrixProblem>> {
    let mut out = Vec::with_capacity(types.len() * n);
    for &t in types {
        for i in 0..n as u64 {
            let mut rng = problem_rng(seed, ((t.code() as u64) << 32) + offset + i);
            out.push(generate_full(t, size, &mut rng)?);
        }
    }
    Ok(out)
}

/// Train, validation and test counts per type: 16000/2000/2000 scaled
/// by `factor`, each at least one.
pub fn split_sizes(factor: f64) -> (usize, usize, usize) {
    let s = |n: f64| ((n * factor).round() as usize).max(1);
    (s(16000.0), s(2000.0), s(2000.0))
}
