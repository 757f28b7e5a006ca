//! Cyclic-task datasets and the abstract causal model.
//!
//! Four canonical tasks (months, weekdays, hours, addition) plus an
//! explicit "(a+b) mod k" probe task. Prompts are built from a fixed toy
//! vocabulary where every concept name, number word, numeral and template
//! keyword is a single token, so concept/offset/answer positions are
//! always identifiable.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

// ── vocabulary ──────────────────────────────────────────────────────────

pub const MAX_NUMERAL: i64 = 200;

const MONTH_NAMES: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

const WEEKDAY_NAMES: [&str; 7] =
    ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

const KEYWORDS: [&str; 19] = [
    "what", "month", "months", "day", "days", "hour", "hours", "time", "is", "after", "plus",
    "equals", "?", "+", "=", "(", ")", "mod", "A:",
];

/// English number word for 1..=48, hyphenated composites as one token.
pub fn number_word(n: i64) -> String {
    const ONES: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
        "eighteen", "nineteen",
    ];
    const TENS: [&str; 5] = ["", "", "twenty", "thirty", "forty"];
    assert!((1..=48).contains(&n), "number_word out of range: {n}");
    if n < 20 {
        ONES[n as usize].to_string()
    } else if n % 10 == 0 {
        TENS[(n / 10) as usize].to_string()
    } else {
        format!("{}-{}", TENS[(n / 10) as usize], ONES[(n % 10) as usize])
    }
}

fn hour_token(h: i64) -> String {
    format!("{h:02}:00")
}

/// Fixed global token table shared by every model and dataset.
#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn standard() -> Arc<Vocab> {
        let mut tokens: Vec<String> = Vec::new();
        for n in 0..=MAX_NUMERAL {
            tokens.push(n.to_string());
        }
        for n in 1..=48 {
            tokens.push(number_word(n));
        }
        tokens.extend(MONTH_NAMES.iter().map(|s| s.to_string()));
        tokens.extend(WEEKDAY_NAMES.iter().map(|s| s.to_string()));
        for h in 0..24 {
            tokens.push(hour_token(h));
        }
        tokens.extend(KEYWORDS.iter().map(|s| s.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Arc::new(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown token '{token}'")))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn numeral_id(&self, n: i64) -> Result<u32> {
        if !(0..=MAX_NUMERAL).contains(&n) {
            return Err(Error::Domain(format!("numeral {n} outside 0..={MAX_NUMERAL}")));
        }
        self.id(&n.to_string())
    }
}

// ── task specification ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Months,
    Weekdays,
    Hours,
    Addition,
    ExplicitMod,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Months => "months",
            TaskKind::Weekdays => "weekdays",
            TaskKind::Hours => "hours",
            TaskKind::Addition => "addition",
            TaskKind::ExplicitMod => "explicit_mod",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "months" => Ok(TaskKind::Months),
            "weekdays" => Ok(TaskKind::Weekdays),
            "hours" => Ok(TaskKind::Hours),
            "addition" => Ok(TaskKind::Addition),
            "explicit_mod" => Ok(TaskKind::ExplicitMod),
            other => Err(Error::Domain(format!("unknown task '{other}'"))),
        }
    }

    pub fn all_canonical() -> [TaskKind; 4] {
        [TaskKind::Months, TaskKind::Weekdays, TaskKind::Hours, TaskKind::Addition]
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which causal variable an intervention targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalVariable {
    InputConcept,
    Offset,
    OutputConcept,
}

impl CausalVariable {
    pub fn name(self) -> &'static str {
        match self {
            CausalVariable::InputConcept => "input_concept",
            CausalVariable::Offset => "offset",
            CausalVariable::OutputConcept => "output_concept",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input_concept" => Ok(CausalVariable::InputConcept),
            "offset" => Ok(CausalVariable::Offset),
            "output_concept" => Ok(CausalVariable::OutputConcept),
            other => Err(Error::Domain(format!("unknown causal variable '{other}'"))),
        }
    }

    pub fn all() -> [CausalVariable; 3] {
        [CausalVariable::InputConcept, CausalVariable::Offset, CausalVariable::OutputConcept]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Cycle length; None for the unbounded tasks (addition, explicit mod).
    pub period: Option<i64>,
    /// Offset range (cyclic tasks) or second-operand range (addition).
    pub offset_min: i64,
    pub offset_max: i64,
    /// First-operand range for addition / explicit mod.
    pub concept_min: i64,
    pub concept_max: i64,
    /// Template variant index; 0 is the canonical toy template.
    pub template: usize,
    /// Additive shift of the weekday enumeration (0 keeps Monday=1).
    pub weekday_offset: i64,
}

impl TaskSpec {
    pub fn months() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Months,
            period: Some(12),
            offset_min: 1,
            offset_max: 24,
            concept_min: 1,
            concept_max: 12,
            template: 0,
            weekday_offset: 0,
        }
    }

    pub fn weekdays() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Weekdays,
            period: Some(7),
            offset_min: 1,
            offset_max: 14,
            concept_min: 1,
            concept_max: 7,
            template: 0,
            weekday_offset: 0,
        }
    }

    pub fn hours() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Hours,
            period: Some(24),
            offset_min: 1,
            offset_max: 48,
            concept_min: 0,
            concept_max: 23,
            template: 0,
            weekday_offset: 0,
        }
    }

    pub fn addition() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Addition,
            period: None,
            offset_min: 1,
            offset_max: 100,
            concept_min: 1,
            concept_max: 100,
            template: 0,
            weekday_offset: 0,
        }
    }

    pub fn canonical(kind: TaskKind) -> TaskSpec {
        match kind {
            TaskKind::Months => TaskSpec::months(),
            TaskKind::Weekdays => TaskSpec::weekdays(),
            TaskKind::Hours => TaskSpec::hours(),
            TaskKind::Addition => TaskSpec::addition(),
            TaskKind::ExplicitMod => TaskSpec {
                kind: TaskKind::ExplicitMod,
                period: None,
                offset_min: 1,
                offset_max: 200,
                concept_min: 1,
                concept_max: 200,
                template: 0,
                weekday_offset: 0,
            },
        }
    }

    pub fn template_count(kind: TaskKind) -> usize {
        match kind {
            TaskKind::Addition | TaskKind::ExplicitMod => 1,
            _ => 3,
        }
    }

    fn concept_names(&self) -> Vec<String> {
        match self.kind {
            TaskKind::Months => MONTH_NAMES.iter().map(|s| s.to_string()).collect(),
            TaskKind::Weekdays => WEEKDAY_NAMES.iter().map(|s| s.to_string()).collect(),
            TaskKind::Hours => (0..24).map(hour_token).collect(),
            TaskKind::Addition | TaskKind::ExplicitMod => {
                (self.concept_min..=self.concept_max).map(|n| n.to_string()).collect()
            }
        }
    }

    /// Tokens the task's answers are drawn from.
    pub fn answer_tokens(&self, vocab: &Vocab) -> Vec<u32> {
        match self.kind {
            TaskKind::Months => MONTH_NAMES.iter().map(|s| vocab.id(s).unwrap()).collect(),
            TaskKind::Weekdays => WEEKDAY_NAMES.iter().map(|s| vocab.id(s).unwrap()).collect(),
            TaskKind::Hours => (0..24).map(|h| vocab.id(&hour_token(h)).unwrap()).collect(),
            TaskKind::Addition | TaskKind::ExplicitMod => {
                (0..=MAX_NUMERAL).map(|n| vocab.numeral_id(n).unwrap()).collect()
            }
        }
    }

    /// Template as a token stream with `{concept}`/`{offset}` slots.
    fn template_tokens(&self) -> Vec<Slot> {
        use Slot::*;
        let kw = |s: &str| Word(s.to_string());
        match (self.kind, self.template) {
            (TaskKind::Months, 0) => {
                vec![Offset, kw("months"), kw("after"), Concept, kw("is")]
            }
            (TaskKind::Months, 1) => vec![
                kw("what"),
                kw("month"),
                kw("is"),
                Offset,
                kw("months"),
                kw("after"),
                Concept,
                kw("?"),
            ],
            (TaskKind::Months, 2) => {
                vec![kw("month"), Concept, kw("plus"), Offset, kw("equals")]
            }
            (TaskKind::Weekdays, 0) => {
                vec![Offset, kw("days"), kw("after"), Concept, kw("is")]
            }
            (TaskKind::Weekdays, 1) => vec![
                kw("what"),
                kw("day"),
                kw("is"),
                Offset,
                kw("days"),
                kw("after"),
                Concept,
                kw("?"),
            ],
            (TaskKind::Weekdays, 2) => {
                vec![kw("day"), Concept, kw("plus"), Offset, kw("equals")]
            }
            (TaskKind::Hours, 0) => {
                vec![Offset, kw("hours"), kw("after"), Concept, kw("is")]
            }
            (TaskKind::Hours, 1) => vec![
                kw("what"),
                kw("time"),
                kw("is"),
                Offset,
                kw("hours"),
                kw("after"),
                Concept,
                kw("?"),
            ],
            (TaskKind::Hours, 2) => {
                vec![kw("hour"), Concept, kw("plus"), Offset, kw("equals")]
            }
            (TaskKind::Addition, _) => vec![Concept, kw("+"), Offset, kw("=")],
            (TaskKind::ExplicitMod, _) => vec![
                kw("("),
                Concept,
                kw("+"),
                Offset,
                kw(")"),
                kw("mod"),
                Modulus,
                kw("="),
            ],
            (kind, v) => panic!("no template variant {v} for {kind}"),
        }
    }
}

enum Slot {
    Word(String),
    Concept,
    Offset,
    Modulus,
}

// ── the causal model ────────────────────────────────────────────────────

/// Input-output causal model: concepts map into number space, the sum
/// `S = N + K` is reduced modulo the base, and the result maps back.
#[derive(Debug, Clone)]
pub struct CausalModel {
    spec: TaskSpec,
}

impl CausalModel {
    pub fn new(spec: &TaskSpec) -> CausalModel {
        CausalModel { spec: spec.clone() }
    }

    /// Base B: the task's modulus, None meaning infinity.
    pub fn base(&self) -> Option<i64> {
        self.spec.period
    }

    pub fn con_to_num(&self, concept: &str) -> Result<i64> {
        match self.spec.kind {
            TaskKind::Months => MONTH_NAMES
                .iter()
                .position(|&m| m == concept)
                .map(|i| i as i64 + 1)
                .ok_or_else(|| Error::Domain(format!("unknown month '{concept}'"))),
            TaskKind::Weekdays => WEEKDAY_NAMES
                .iter()
                .position(|&d| d == concept)
                .map(|i| i as i64 + 1 + self.spec.weekday_offset)
                .ok_or_else(|| Error::Domain(format!("unknown weekday '{concept}'"))),
            TaskKind::Hours => {
                let h = concept
                    .strip_suffix(":00")
                    .and_then(|s| s.parse::<i64>().ok())
                    .filter(|h| (0..24).contains(h));
                h.ok_or_else(|| Error::Domain(format!("unknown hour '{concept}'")))
            }
            TaskKind::Addition | TaskKind::ExplicitMod => concept
                .parse::<i64>()
                .map_err(|_| Error::Domain(format!("unknown number '{concept}'"))),
        }
    }

    /// Inverse lookup on the concept domain: `num_to_con(con_to_num(c) mod B) == c`.
    pub fn num_to_con(&self, x: i64) -> Result<String> {
        match self.spec.kind {
            TaskKind::Months => {
                let idx = (x - 1).rem_euclid(12) as usize;
                Ok(MONTH_NAMES[idx].to_string())
            }
            TaskKind::Weekdays => {
                let idx = (x - 1 - self.spec.weekday_offset).rem_euclid(7) as usize;
                Ok(WEEKDAY_NAMES[idx].to_string())
            }
            TaskKind::Hours => Ok(hour_token(x.rem_euclid(24))),
            TaskKind::Addition | TaskKind::ExplicitMod => {
                if !(0..=MAX_NUMERAL).contains(&x) {
                    return Err(Error::Domain(format!("sum {x} exceeds the numeral vocabulary")));
                }
                Ok(x.to_string())
            }
        }
    }

    /// Output number for concept value `k` and offset `n`: `(n + k) mod B`,
    /// with `s mod infinity = s`.
    pub fn eval_indices(&self, k: i64, n: i64) -> i64 {
        let s = n + k;
        match self.spec.period {
            Some(b) => s.rem_euclid(b),
            None => s,
        }
    }

    /// Output concept token for a (concept, offset) input.
    pub fn eval(&self, concept: &str, offset: i64) -> Result<String> {
        let k = self.con_to_num(concept)?;
        self.num_to_con(self.eval_indices(k, offset))
    }

    /// Evaluate `original` with `variable` fixed to its value in
    /// `counterfactual`.
    pub fn interchange(
        &self,
        original: &PromptInstance,
        counterfactual: &PromptInstance,
        variable: CausalVariable,
    ) -> Result<String> {
        if original.task != counterfactual.task {
            return Err(Error::Contract(
                "interchange prompts must come from one task".into(),
            ));
        }
        let (k, n) = match variable {
            CausalVariable::InputConcept => (counterfactual.concept_index, original.offset),
            CausalVariable::Offset => (original.concept_index, counterfactual.offset),
            CausalVariable::OutputConcept => {
                (counterfactual.concept_index, counterfactual.offset)
            }
        };
        self.num_to_con(self.eval_indices(k, n))
    }
}

// ── prompts and datasets ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub task: TaskKind,
    /// K: the concept's value in number space.
    pub concept_index: i64,
    /// N: the offset (second operand for addition).
    pub offset: i64,
    pub tokens: Vec<u32>,
    pub concept_pos: usize,
    pub offset_pos: usize,
    /// Position whose next-token prediction is the answer.
    pub final_pos: usize,
    /// S = N + K before any modulo.
    pub premod_sum: i64,
    pub gold: u32,
    /// Per-prompt modulus for the explicit-mod task.
    pub modulus: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub prompts: Vec<PromptInstance>,
}

fn render_prompt(
    spec: &TaskSpec,
    model: &CausalModel,
    vocab: &Vocab,
    concept: &str,
    offset: i64,
    modulus: Option<i64>,
) -> Result<PromptInstance> {
    let k = model.con_to_num(concept)?;
    let mut tokens = Vec::new();
    let mut concept_pos = 0;
    let mut offset_pos = 0;
    for slot in spec.template_tokens() {
        match slot {
            Slot::Word(w) => tokens.push(vocab.id(&w)?),
            Slot::Concept => {
                concept_pos = tokens.len();
                tokens.push(vocab.id(concept)?);
            }
            Slot::Offset => {
                offset_pos = tokens.len();
                let tok = match spec.kind {
                    TaskKind::Addition | TaskKind::ExplicitMod => offset.to_string(),
                    _ => number_word(offset),
                };
                tokens.push(vocab.id(&tok)?);
            }
            Slot::Modulus => {
                let m = modulus.ok_or_else(|| {
                    Error::Generation("explicit-mod template without a modulus".into())
                })?;
                tokens.push(vocab.numeral_id(m)?);
            }
        }
    }
    let gold_tok = match modulus {
        Some(m) => ((k + offset).rem_euclid(m)).to_string(),
        None => model.eval(concept, offset)?,
    };
    Ok(PromptInstance {
        task: spec.kind,
        concept_index: k,
        offset,
        final_pos: tokens.len() - 1,
        tokens,
        concept_pos,
        offset_pos,
        premod_sum: k + offset,
        gold: vocab.id(&gold_tok)?,
        modulus,
    })
}

/// Exhaustive cross product of concepts and offsets.
pub fn generate_dataset(spec: &TaskSpec, vocab: &Vocab) -> Result<Dataset> {
    if spec.kind == TaskKind::ExplicitMod {
        return Err(Error::Generation(
            "explicit_mod is sampled; use generate_explicit_mod".into(),
        ));
    }
    let model = CausalModel::new(spec);
    let mut prompts = Vec::new();
    for concept in spec.concept_names() {
        for offset in spec.offset_min..=spec.offset_max {
            prompts.push(render_prompt(spec, &model, vocab, &concept, offset, None)?);
        }
    }
    Ok(Dataset { spec: spec.clone(), prompts })
}

/// Deterministic sample of explicit "(a+b) mod k" prompts. With
/// `constrained` set, only prompts with `a + b <= 3k` are kept.
pub fn generate_explicit_mod(
    a_range: (i64, i64),
    b_range: (i64, i64),
    k_range: (i64, i64),
    sample_n: usize,
    seed: u64,
    constrained: bool,
    vocab: &Vocab,
) -> Result<Dataset> {
    if a_range.0 > a_range.1 || b_range.0 > b_range.1 || k_range.0 > k_range.1 {
        return Err(Error::Generation("empty range for explicit-mod generation".into()));
    }
    let mut spec = TaskSpec::canonical(TaskKind::ExplicitMod);
    spec.concept_min = a_range.0;
    spec.concept_max = a_range.1;
    spec.offset_min = b_range.0;
    spec.offset_max = b_range.1;
    let model = CausalModel::new(&spec);
    let mut rng = rng_from_seed(seed);
    let mut prompts = Vec::with_capacity(sample_n);
    let mut attempts = 0usize;
    let max_attempts = sample_n.saturating_mul(1000).max(100_000);
    while prompts.len() < sample_n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "explicit-mod sampling exhausted after {attempts} attempts; \
                 the constrained feasible set may be empty"
            )));
        }
        let a = rng.gen_range(a_range.0..=a_range.1);
        let b = rng.gen_range(b_range.0..=b_range.1);
        let k = rng.gen_range(k_range.0..=k_range.1);
        if constrained && a + b > 3 * k {
            continue;
        }
        prompts.push(render_prompt(&spec, &model, vocab, &a.to_string(), b, Some(k))?);
    }
    Ok(Dataset { spec, prompts })
}

// ── counterfactual pairs ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CounterfactualPair {
    pub original: PromptInstance,
    pub counterfactual: PromptInstance,
    pub variable: CausalVariable,
    /// Token the causal model predicts under the interchange.
    pub target_label: u32,
}

/// Sample `n_total` pairs with replacement from prompts satisfying
/// `keep`, attach interchange targets, and split off the first `n_test`
/// as a held-out set. Returns (train, test).
pub fn sample_counterfactual_pairs(
    dataset: &Dataset,
    variable: CausalVariable,
    n_total: usize,
    n_test: usize,
    seed: u64,
    vocab: &Vocab,
    keep: &dyn Fn(&PromptInstance) -> bool,
) -> Result<(Vec<CounterfactualPair>, Vec<CounterfactualPair>)> {
    let pool: Vec<&PromptInstance> = dataset.prompts.iter().filter(|p| keep(p)).collect();
    if pool.is_empty() {
        return Err(Error::Sampling("no prompts satisfy the sampling predicate".into()));
    }
    if n_test > n_total {
        return Err(Error::Sampling(format!("n_test {n_test} exceeds n_total {n_total}")));
    }
    let model = CausalModel::new(&dataset.spec);
    let mut rng = rng_from_seed(seed);
    let mut pairs = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let o = pool[rng.gen_range(0..pool.len())].clone();
        let c = pool[rng.gen_range(0..pool.len())].clone();
        let target = model.interchange(&o, &c, variable)?;
        pairs.push(CounterfactualPair {
            original: o,
            counterfactual: c,
            variable,
            target_label: vocab.id(&target)?,
        });
    }
    let train = pairs.split_off(n_test);
    Ok((train, pairs))
}

// ── accuracy breakdown ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn tally(&mut self, ok: bool) {
        self.total += 1;
        if ok {
            self.correct += 1;
        }
    }
}

impl Default for Cell {
    fn default() -> Self {
        Cell { correct: 0, total: 0 }
    }
}

/// Per-task accuracy report: overall, by offset range, by pre-modulo sum
/// threshold, by sum band (separate and cumulative), and per sum value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub task: TaskKind,
    pub overall: Cell,
    /// offset in [1, p] / (p, 2p]; None when the task has no period.
    pub offset_in_cycle: Option<Cell>,
    pub offset_beyond_cycle: Option<Cell>,
    /// pre-modulo sum <= p / > p.
    pub sum_within: Option<Cell>,
    pub sum_beyond: Option<Cell>,
    /// Bands [1,p], (p,2p], (2p,3p] separately and cumulatively.
    pub bands_separate: Vec<Cell>,
    pub bands_cumulative: Vec<Cell>,
    /// (sum, cell) pairs, ascending by sum.
    pub per_sum: Vec<(i64, Cell)>,
}

pub fn accuracy_breakdown(predictions: &[u32], dataset: &Dataset) -> Result<BreakdownReport> {
    if predictions.len() != dataset.prompts.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} prompts",
            predictions.len(),
            dataset.prompts.len()
        )));
    }
    let p = dataset.spec.period;
    let mut overall = Cell::default();
    let mut in_cycle = Cell::default();
    let mut beyond = Cell::default();
    let mut sum_lo = Cell::default();
    let mut sum_hi = Cell::default();
    let mut bands = vec![Cell::default(); 3];
    let mut per_sum: HashMap<i64, Cell> = HashMap::new();
    for (prompt, &pred) in dataset.prompts.iter().zip(predictions) {
        let ok = pred == prompt.gold;
        overall.tally(ok);
        per_sum.entry(prompt.premod_sum).or_default().tally(ok);
        if let Some(p) = p {
            if prompt.offset <= p {
                in_cycle.tally(ok);
            } else {
                beyond.tally(ok);
            }
            if prompt.premod_sum <= p {
                sum_lo.tally(ok);
            } else {
                sum_hi.tally(ok);
            }
            let band = ((prompt.premod_sum - 1) / p).clamp(0, 2) as usize;
            bands[band].tally(ok);
        }
    }
    let mut cumulative = vec![Cell::default(); 3];
    let mut acc = Cell::default();
    for (i, b) in bands.iter().enumerate() {
        acc.correct += b.correct;
        acc.total += b.total;
        cumulative[i] = acc;
    }
    let mut per_sum: Vec<(i64, Cell)> = per_sum.into_iter().collect();
    per_sum.sort_by_key(|&(s, _)| s);
    let has_period = p.is_some();
    Ok(BreakdownReport {
        task: dataset.spec.kind,
        overall,
        offset_in_cycle: has_period.then_some(in_cycle),
        offset_beyond_cycle: has_period.then_some(beyond),
        sum_within: has_period.then_some(sum_lo),
        sum_beyond: has_period.then_some(sum_hi),
        bands_separate: if has_period { bands } else { Vec::new() },
        bands_cumulative: if has_period { cumulative } else { Vec::new() },
        per_sum,
    })
}

// ── persistence ─────────────────────────────────────────────────────────

/// Line-delimited dataset: a `#` header carrying the spec, then one
/// record per prompt: task, concept index, offset, token ids, gold id,
/// and the optional modulus.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# lab-dataset v1 spec={}", serde_json::to_string(&dataset.spec)?)?;
    for p in &dataset.prompts {
        let toks: Vec<String> = p.tokens.iter().map(|t| t.to_string()).collect();
        let modulus = p.modulus.map_or(String::from("-"), |m| m.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.task,
            p.concept_index,
            p.offset,
            toks.join(" "),
            p.gold,
            modulus
        )?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::artifact(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::artifact("empty dataset file"))??;
    let spec_json = header
        .strip_prefix("# lab-dataset v1 spec=")
        .ok_or_else(|| Error::artifact_at("bad dataset header", 0))?;
    let spec: TaskSpec = serde_json::from_str(spec_json)?;
    let model = CausalModel::new(&spec);
    let mut prompts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::artifact(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_i64 = |s: &str, what: &str| {
            s.parse::<i64>()
                .map_err(|_| Error::artifact(format!("line {}: bad {what} '{s}'", lineno + 2)))
        };
        let task = TaskKind::parse(fields[0])?;
        let concept_index = parse_i64(fields[1], "concept index")?;
        let offset = parse_i64(fields[2], "offset")?;
        let tokens: Vec<u32> = fields[3]
            .split(' ')
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::artifact(format!("line {}: bad token id", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        let gold: u32 = fields[4]
            .parse()
            .map_err(|_| Error::artifact(format!("line {}: bad gold id", lineno + 2)))?;
        let modulus = if fields[5] == "-" { None } else { Some(parse_i64(fields[5], "modulus")?) };
        if tokens.iter().chain(std::iter::once(&gold)).any(|&t| t as usize >= vocab.len()) {
            return Err(Error::artifact(format!("line {}: token outside vocabulary", lineno + 2)));
        }
        if task != spec.kind {
            return Err(Error::artifact(format!("line {}: task does not match header", lineno + 2)));
        }
        // Rebuild through the template so derived positions are restored
        // and the record is verified against its spec in one step.
        let concept_name = model.num_to_con(concept_index)?;
        let rebuilt = render_prompt(&spec, &model, vocab, &concept_name, offset, modulus)?;
        if rebuilt.tokens != tokens || rebuilt.gold != gold {
            return Err(Error::artifact(format!(
                "line {}: record does not match its spec rendering",
                lineno + 2
            )));
        }
        prompts.push(rebuilt);
    }
    Ok(Dataset { spec, prompts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<Vocab> {
        Vocab::standard()
    }

    #[test]
    fn dataset_counts_match_task_tables() {
        let v = vocab();
        assert_eq!(generate_dataset(&TaskSpec::months(), &v).unwrap().prompts.len(), 288);
        assert_eq!(generate_dataset(&TaskSpec::weekdays(), &v).unwrap().prompts.len(), 98);
        assert_eq!(generate_dataset(&TaskSpec::hours(), &v).unwrap().prompts.len(), 1152);
        assert_eq!(generate_dataset(&TaskSpec::addition(), &v).unwrap().prompts.len(), 10_000);
    }

    #[test]
    fn datasets_are_duplicate_free() {
        let v = vocab();
        let ds = generate_dataset(&TaskSpec::hours(), &v).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in &ds.prompts {
            assert!(seen.insert((p.concept_index, p.offset)));
        }
    }

    #[test]
    fn six_months_after_august_is_february() {
        let model = CausalModel::new(&TaskSpec::months());
        assert_eq!(model.eval("August", 6).unwrap(), "February");
    }

    #[test]
    fn hours_wrap_to_midnight() {
        let model = CausalModel::new(&TaskSpec::hours());
        assert_eq!(model.eval("23:00", 1).unwrap(), "00:00");
    }

    #[test]
    fn addition_is_plain_sum() {
        let model = CausalModel::new(&TaskSpec::addition());
        assert_eq!(model.eval("8", 5).unwrap(), "13");
    }

    #[test]
    fn unknown_concept_is_a_domain_error() {
        let model = CausalModel::new(&TaskSpec::months());
        assert!(matches!(model.eval("Caturday", 1), Err(Error::Domain(_))));
    }

    #[test]
    fn concept_roundtrip_for_all_tasks() {
        for kind in TaskKind::all_canonical() {
            let spec = TaskSpec::canonical(kind);
            let model = CausalModel::new(&spec);
            for name in spec.concept_names() {
                let k = model.con_to_num(&name).unwrap();
                let wrapped = match spec.period {
                    Some(b) => k.rem_euclid(b),
                    None => k,
                };
                assert_eq!(model.num_to_con(wrapped).unwrap(), name, "{kind} {name}");
            }
        }
    }

    #[test]
    fn weekday_offset_preserves_roundtrip() {
        let mut spec = TaskSpec::weekdays();
        spec.weekday_offset = 4;
        let model = CausalModel::new(&spec);
        assert_eq!(model.con_to_num("Monday").unwrap(), 5);
        for name in WEEKDAY_NAMES {
            let k = model.con_to_num(name).unwrap();
            assert_eq!(model.num_to_con(k.rem_euclid(7)).unwrap(), name);
        }
        // Shift changes the answer mapping but not the ground truth.
        assert_eq!(model.eval("Friday", 3).unwrap(), "Monday");
    }

    #[test]
    fn periodicity_of_ground_truth() {
        for kind in [TaskKind::Months, TaskKind::Weekdays, TaskKind::Hours] {
            let spec = TaskSpec::canonical(kind);
            let p = spec.period.unwrap();
            let model = CausalModel::new(&spec);
            for name in spec.concept_names() {
                for off in 1..=p {
                    assert_eq!(
                        model.eval(&name, off).unwrap(),
                        model.eval(&name, off + p).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn interchange_matches_the_worked_example() {
        // Patching the input concept from "six months after October" into
        // "two months after April" yields December (two + October).
        let v = vocab();
        let spec = TaskSpec::months();
        let model = CausalModel::new(&spec);
        let original = render_prompt(&spec, &model, &v, "April", 2, None).unwrap();
        let counterfactual = render_prompt(&spec, &model, &v, "October", 6, None).unwrap();
        let out = model
            .interchange(&original, &counterfactual, CausalVariable::InputConcept)
            .unwrap();
        assert_eq!(out, "December");
    }

    #[test]
    fn self_interchange_is_identity_and_output_overwrites() {
        let v = vocab();
        let spec = TaskSpec::hours();
        let model = CausalModel::new(&spec);
        let o = render_prompt(&spec, &model, &v, "13:00", 4, None).unwrap();
        let c = render_prompt(&spec, &model, &v, "22:00", 30, None).unwrap();
        for var in CausalVariable::all() {
            let out = model.interchange(&o, &o, var).unwrap();
            assert_eq!(v.id(&out).unwrap(), o.gold);
        }
        let out = model.interchange(&o, &c, CausalVariable::OutputConcept).unwrap();
        assert_eq!(v.id(&out).unwrap(), c.gold);
    }

    #[test]
    fn explicit_mod_gold_labels() {
        let v = vocab();
        let ds =
            generate_explicit_mod((6, 6), (8, 8), (12, 12), 1, 0, false, &v).unwrap();
        assert_eq!(v.token(ds.prompts[0].gold), "2");
        let ds = generate_explicit_mod((5, 5), (7, 7), (12, 12), 1, 0, false, &v).unwrap();
        assert_eq!(v.token(ds.prompts[0].gold), "0");
    }

    #[test]
    fn explicit_mod_is_deterministic() {
        let v = vocab();
        let a = generate_explicit_mod((1, 200), (1, 200), (2, 100), 1000, 77, false, &v).unwrap();
        let b = generate_explicit_mod((1, 200), (1, 200), (2, 100), 1000, 77, false, &v).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.prompts.len(), 1000);
    }

    #[test]
    fn explicit_mod_constrained_infeasible_errors() {
        let v = vocab();
        // a+b is at least 300 but 3k at most 6: nothing qualifies.
        let r = generate_explicit_mod((150, 200), (150, 200), (2, 2), 10, 0, true, &v);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn pair_sampling_counts_and_determinism() {
        let v = vocab();
        let ds = generate_dataset(&TaskSpec::months(), &v).unwrap();
        let (train, test) = sample_counterfactual_pairs(
            &ds,
            CausalVariable::InputConcept,
            4096,
            512,
            5,
            &v,
            &|_| true,
        )
        .unwrap();
        assert_eq!(train.len(), 3584);
        assert_eq!(test.len(), 512);
        let (train2, _) = sample_counterfactual_pairs(
            &ds,
            CausalVariable::InputConcept,
            4096,
            512,
            5,
            &v,
            &|_| true,
        )
        .unwrap();
        for (a, b) in train.iter().zip(&train2) {
            assert_eq!(a.original, b.original);
            assert_eq!(a.target_label, b.target_label);
        }
    }

    #[test]
    fn pair_sampling_with_empty_pool_errors() {
        let v = vocab();
        let ds = generate_dataset(&TaskSpec::weekdays(), &v).unwrap();
        let r = sample_counterfactual_pairs(
            &ds,
            CausalVariable::Offset,
            10,
            2,
            0,
            &v,
            &|_| false,
        );
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn breakdown_all_correct_and_constructed_split() {
        let v = vocab();
        let ds = generate_dataset(&TaskSpec::months(), &v).unwrap();
        let golds: Vec<u32> = ds.prompts.iter().map(|p| p.gold).collect();
        let report = accuracy_breakdown(&golds, &ds).unwrap();
        assert_eq!(report.overall.accuracy(), 1.0);
        assert_eq!(report.sum_within.unwrap().accuracy(), 1.0);
        assert_eq!(report.bands_cumulative[2].total, 288);

        // Correct only when S <= p.
        let preds: Vec<u32> = ds
            .prompts
            .iter()
            .map(|p| if p.premod_sum <= 12 { p.gold } else { p.gold.wrapping_add(1) })
            .collect();
        let report = accuracy_breakdown(&preds, &ds).unwrap();
        assert_eq!(report.sum_within.unwrap().accuracy(), 1.0);
        assert_eq!(report.sum_beyond.unwrap().accuracy(), 0.0);
    }

    #[test]
    fn dataset_save_load_roundtrip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weekdays.ds");
        let ds = generate_dataset(&TaskSpec::weekdays(), &v).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, &v).unwrap();
        assert_eq!(back.prompts, ds.prompts);
    }

    #[test]
    fn number_words_cover_range() {
        assert_eq!(number_word(1), "one");
        assert_eq!(number_word(14), "fourteen");
        assert_eq!(number_word(21), "twenty-one");
        assert_eq!(number_word(40), "forty");
        assert_eq!(number_word(48), "forty-eight");
    }

    #[test]
    fn template_variants_render_and_mark_positions() {
        let v = vocab();
        for kind in TaskKind::all_canonical() {
            for variant in 0..TaskSpec::template_count(kind) {
                let mut spec = TaskSpec::canonical(kind);
                spec.template = variant;
                let ds = generate_dataset(&spec, &v).unwrap();
                let p = &ds.prompts[0];
                assert_eq!(p.final_pos, p.tokens.len() - 1);
                assert_ne!(p.concept_pos, p.offset_pos);
            }
        }
    }
}
