use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::cholesky::IncrementalCholesky;
use super::CompositionRule;
use crate::error::{Error, Result};
use crate::stats::{eta_and_singularity, ScoreCovariance};

/// What happens at a knot when `lambda` decreases through it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "index", rename_all = "kebab-case")]
pub enum PathEvent {
    Start,
    /// The sub-likelihood becomes nonzero just below the knot.
    Enter(usize),
    /// The sub-likelihood's weight reaches zero at the knot.
    Leave(usize),
    End,
}

/// The exact solution at a knot; `rule.active_set` is the support at `lambda` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathKnot {
    pub lambda: f64,
    pub rule: CompositionRule,
    pub events: Vec<PathEvent>,
    /// Solution just below the knot when the path jumps there. This happens when a coordinate
    /// enters a rank-deficient `J` and an active one must leave at the same `lambda`; `rule` is
    /// then the limit from above and the `Leave` event applies to `below`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<CompositionRule>,
}

impl PathKnot {
    /// Rule from which the segment below this knot starts.
    pub fn rule_below(&self) -> &CompositionRule {
        self.below.as_ref().unwrap_or(&self.rule)
    }

    pub fn entered(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().filter_map(|e| match e {
            PathEvent::Enter(i) => Some(*i),
            _ => None,
        })
    }

    pub fn left(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().filter_map(|e| match e {
            PathEvent::Leave(i) => Some(*i),
            _ => None,
        })
    }
}

/// Piecewise-linear trajectory of the optimal weights from `lambda_start` down to `lambda_min`.
///
/// Knot lambdas strictly decrease. Support of knot `k + 1` equals the support of knot `k`
/// plus the coordinates entering at `k`, minus those leaving at `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    /// Parameter at which the score covariance was evaluated.
    pub theta: Vec<f64>,
    /// `diag(J)`, enough to evaluate trace ratios of any active set.
    pub diagonal: Vec<f64>,
    pub lambda_start: f64,
    pub lambda_min: f64,
    pub knots: Vec<PathKnot>,
}

impl SolutionPath {
    pub fn m(&self) -> usize {
        self.diagonal.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.lambda).collect()
    }

    pub fn total_trace(&self) -> f64 {
        self.diagonal.iter().sum()
    }

    /// `sum_{j in A} J_jj` for the support of `rule`.
    pub fn active_trace(&self, rule: &CompositionRule) -> f64 {
        rule.active_set.iter().map(|&i| self.diagonal[i]).sum()
    }

    /// Weights at any `lambda` in `[lambda_min, inf)` by linear interpolation between knots.
    pub fn weights_at(&self, lambda: f64) -> Option<DVector<f64>> {
        let first = self.knots.first()?;
        if lambda >= first.lambda {
            return Some(DVector::zeros(self.m()));
        }
        for pair in self.knots.windows(2) {
            let (hi, lo) = (&pair[0], &pair[1]);
            if lambda <= hi.lambda && lambda >= lo.lambda {
                let t = (hi.lambda - lambda) / (hi.lambda - lo.lambda);
                return Some(hi.rule_below().weights() * (1.0 - t) + lo.rule.weights() * t);
            }
        }
        None
    }

    /// The rule at `lambda`, interpolated from the knots; exact on the path.
    pub fn rule_at(&self, j: &ScoreCovariance, lambda: f64) -> Option<CompositionRule> {
        self.weights_at(lambda).map(|w| CompositionRule::from_dense(j, lambda, &w))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Long-format CSV: one row per (knot, active index).
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["knot", "lambda", "n_active", "index", "weight"])?;
        for (k, knot) in self.knots.iter().enumerate() {
            let n_active = knot.rule.n_active().to_string();
            let lambda = format!("{:e}", knot.lambda);
            for (&i, &v) in knot.rule.active_set.iter().zip(&knot.rule.values) {
                wtr.write_record([k.to_string(), lambda.clone(), n_active.clone(), i.to_string(), format!("{v:e}")])?;
            }
            if knot.rule.active_set.is_empty() {
                wtr.write_record([k.to_string(), lambda, n_active, String::new(), String::new()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Homotopy path from `max_j J_jj` down to `lambda_min`.
pub fn solution_path(j: &ScoreCovariance, lambda_min: f64) -> Result<SolutionPath> {
    solution_path_with(j, lambda_min, true)
}

/// As [`solution_path`]; `check_eta = false` skips the eigendecomposition behind the
/// well-posedness check (singular systems then surface as conditioning errors).
pub fn solution_path_with(j: &ScoreCovariance, lambda_min: f64, check_eta: bool) -> Result<SolutionPath> {
    if !(lambda_min >= 0.0) || !lambda_min.is_finite() {
        return Err(Error::InvalidInput(format!("lambda_min = {lambda_min} must be finite and non-negative")));
    }
    if check_eta && lambda_min < j.max_diagonal() {
        let (eta, singular) = eta_and_singularity(j);
        if singular && lambda_min <= eta {
            return Err(Error::IllPosed { lambda: lambda_min, eta });
        }
    }
    let (knots, _) = run(j, lambda_min, true)?;
    Ok(SolutionPath {
        theta: j.theta().iter().copied().collect(),
        diagonal: j.diagonal().iter().copied().collect(),
        lambda_start: j.max_diagonal(),
        lambda_min,
        knots,
    })
}

/// Solution at a single `lambda` by running the homotopy without recording knots.
pub(super) fn solve_at(j: &ScoreCovariance, lambda: f64) -> Result<CompositionRule> {
    run(j, lambda, false).map(|(_, rule)| rule)
}

struct State<'a> {
    j: &'a ScoreCovariance,
    /// Active indices in factor order.
    active: Vec<usize>,
    signs: Vec<f64>,
    chol: IncrementalCholesky,
}

impl State<'_> {
    fn try_enter(&mut self, idx: usize, sign: f64) -> bool {
        let jm = self.j.matrix();
        let cross = DVector::from_iterator(self.active.len(), self.active.iter().map(|&a| jm[(a, idx)]));
        if self.chol.push(&cross, jm[(idx, idx)]) {
            self.active.push(idx);
            self.signs.push(sign);
            true
        } else {
            false
        }
    }

    fn leave(&mut self, idx: usize) {
        let pos = self.active.iter().position(|&a| a == idx).expect("active member");
        self.chol.remove(pos);
        self.active.remove(pos);
        self.signs.remove(pos);
    }

    /// `w_A(lambda) = a - lambda b` on the current active set, plus `J[:, A] a` and `J[:, A] b`.
    fn direction(&self) -> Direction {
        let d = self.j.diagonal();
        let rhs_a = DVector::from_iterator(self.active.len(), self.active.iter().map(|&i| d[i]));
        let rhs_b = DVector::from_row_slice(&self.signs);
        let a = self.chol.solve(&rhs_a);
        let b = self.chol.solve(&rhs_b);
        let jm = self.j.matrix();
        let m = self.j.dim();
        let mut ja = DVector::zeros(m);
        let mut jb = DVector::zeros(m);
        for (pos, &col) in self.active.iter().enumerate() {
            ja.axpy(a[pos], &jm.column(col), 1.0);
            jb.axpy(b[pos], &jm.column(col), 1.0);
        }
        Direction { a, b, ja, jb }
    }

    fn rule_at(&self, dir: &Direction, lambda: f64, zeroed: &[usize]) -> CompositionRule {
        let m = self.j.dim();
        let mut w = DVector::zeros(m);
        for (pos, &i) in self.active.iter().enumerate() {
            if !zeroed.contains(&i) {
                w[i] = dir.a[pos] - lambda * dir.b[pos];
            }
        }
        let d = self.j.diagonal();
        let mut quad = 0.0;
        for &i in &self.active {
            quad += w[i] * (dir.ja[i] - lambda * dir.jb[i]);
        }
        let lin: f64 = self.active.iter().map(|&i| w[i] * d[i]).sum();
        let l1: f64 = self.active.iter().map(|&i| w[i].abs()).sum();
        let mut rule = CompositionRule::from_dense_unscored(lambda, &w);
        rule.objective_value = 0.5 * quad - lin + lambda * l1;
        rule
    }
}

struct Direction {
    a: DVector<f64>,
    b: DVector<f64>,
    ja: DVector<f64>,
    jb: DVector<f64>,
}

struct Entered {
    indices: Vec<usize>,
    /// Coordinate that left and the weights after the jump, for a swap.
    swap: Option<(usize, DVector<f64>)>,
}

/// Enters tied coordinates jointly; if the joint system is singular, enters the lowest index only.
/// When even that is singular the lowest index swaps with the first active coordinate that reaches
/// zero along the null direction of the enlarged system.
fn enter_all(state: &mut State<'_>, mut entering: Vec<(usize, f64)>, current: &DVector<f64>) -> Result<Entered> {
    entering.sort_by_key(|&(i, _)| i);
    let before = state.active.len();
    let mut ok = true;
    for &(idx, sign) in &entering {
        if !state.try_enter(idx, sign) {
            ok = false;
            break;
        }
    }
    if ok {
        return Ok(Entered {
            indices: entering.iter().map(|&(i, _)| i).collect(),
            swap: None,
        });
    }
    while state.active.len() > before {
        let last = *state.active.last().expect("nonempty");
        state.leave(last);
    }
    let (idx, sign) = entering[0];
    if state.try_enter(idx, sign) {
        return Ok(Entered {
            indices: vec![idx],
            swap: None,
        });
    }
    let conditioning = |state: &State<'_>| {
        let mut active = state.active.clone();
        active.push(idx);
        active.sort_unstable();
        Error::Conditioning { active }
    };
    let jm = state.j.matrix();
    let cross = DVector::from_iterator(state.active.len(), state.active.iter().map(|&a| jm[(a, idx)]));
    let v = -state.chol.solve(&cross) * sign;
    let mut step = f64::INFINITY;
    let mut out = None;
    for (pos, &k) in state.active.iter().enumerate() {
        let (wk, vk) = (current[k], v[pos]);
        if wk * vk < 0.0 {
            let t = -wk / vk;
            if t < step {
                step = t;
                out = Some(k);
            }
        }
    }
    let Some(out) = out else {
        return Err(conditioning(state));
    };
    let mut next = current.clone();
    for (pos, &k) in state.active.iter().enumerate() {
        next[k] += step * v[pos];
    }
    next[out] = 0.0;
    next[idx] = step * sign;
    state.leave(out);
    if !state.try_enter(idx, sign) {
        return Err(conditioning(state));
    }
    Ok(Entered {
        indices: vec![idx],
        swap: Some((out, next)),
    })
}

fn run(j: &ScoreCovariance, lambda_target: f64, record: bool) -> Result<(Vec<PathKnot>, CompositionRule)> {
    let m = j.dim();
    let d = j.diagonal();
    let lambda_start = j.max_diagonal();
    if !(lambda_start > 0.0) {
        return Err(Error::DegenerateCovariance("diag(J) is identically zero".into()));
    }
    let tie = 1e-10 * lambda_start;
    let eps = 1e-12 * lambda_start;

    let mut knots = Vec::new();
    let zero_rule = CompositionRule::from_dense_unscored(lambda_start, &DVector::zeros(m));
    if lambda_target >= lambda_start {
        let rule = CompositionRule { lambda: lambda_target, ..zero_rule };
        if record {
            knots.push(PathKnot {
                lambda: lambda_start,
                rule: CompositionRule { lambda: lambda_start, ..rule.clone() },
                events: vec![PathEvent::Start, PathEvent::End],
                below: None,
            });
        }
        return Ok((knots, rule));
    }

    let mut state = State {
        j,
        active: Vec::new(),
        signs: Vec::new(),
        chol: IncrementalCholesky::default(),
    };
    let mut lambda = lambda_start;
    let mut rule = zero_rule;
    let mut events = vec![PathEvent::Start];
    let mut entering: Vec<(usize, f64)> = (0..m).filter(|&i| d[i] >= lambda_start - tie).map(|i| (i, 1.0)).collect();
    let mut visits: HashMap<Vec<usize>, usize> = HashMap::new();
    let cycle_limit = m * m;

    loop {
        let entered = enter_all(&mut state, std::mem::take(&mut entering), &rule.weights())?;
        events.extend(entered.indices.iter().copied().map(PathEvent::Enter));
        let below = entered.swap.map(|(out, w)| {
            events.push(PathEvent::Leave(out));
            CompositionRule::from_dense(j, lambda, &w)
        });
        if record {
            knots.push(PathKnot {
                lambda,
                rule: rule.clone(),
                events: std::mem::take(&mut events),
                below,
            });
        } else {
            events.clear();
        }

        let mut key = state.active.clone();
        key.sort_unstable();
        let count = visits.entry(key.clone()).or_insert(0);
        *count += 1;
        if *count > cycle_limit {
            return Err(Error::Cycling { active: key });
        }

        let dir = state.direction();
        let mut in_active = vec![false; m];
        for &i in &state.active {
            in_active[i] = true;
        }
        let mut enter_cands: Vec<(usize, f64, f64)> = Vec::new();
        for i in (0..m).filter(|&i| !in_active[i]) {
            let alpha = d[i] - dir.ja[i];
            let beta = dir.jb[i];
            for sign in [1.0, -1.0] {
                let denom = 1.0 - sign * beta;
                if denom.abs() <= 1e-14 {
                    continue;
                }
                let l = sign * alpha / denom;
                if l >= 0.0 && l < lambda - eps {
                    enter_cands.push((i, sign, l));
                }
            }
        }
        let mut leave_cands: Vec<(usize, f64)> = Vec::new();
        for (pos, &i) in state.active.iter().enumerate() {
            let b = dir.b[pos];
            if b != 0.0 {
                let l = dir.a[pos] / b;
                if l >= 0.0 && l < lambda - eps {
                    leave_cands.push((i, l));
                }
            }
        }
        let next = enter_cands
            .iter()
            .map(|c| c.2)
            .chain(leave_cands.iter().map(|c| c.1))
            .fold(f64::NEG_INFINITY, f64::max);

        if next <= lambda_target {
            let final_rule = state.rule_at(&dir, lambda_target, &[]);
            if record {
                knots.push(PathKnot {
                    lambda: lambda_target,
                    rule: final_rule.clone(),
                    events: vec![PathEvent::End],
                    below: None,
                });
            }
            return Ok((knots, final_rule));
        }

        let leaving: Vec<usize> = leave_cands.iter().filter(|c| c.1 >= next - tie).map(|c| c.0).collect();
        let mut chosen: HashMap<usize, (f64, f64)> = HashMap::new();
        for &(i, sign, l) in enter_cands.iter().filter(|c| c.2 >= next - tie) {
            let e = chosen.entry(i).or_insert((sign, l));
            if l > e.1 {
                *e = (sign, l);
            }
        }
        rule = state.rule_at(&dir, next, &leaving);
        for &i in &leaving {
            state.leave(i);
            events.push(PathEvent::Leave(i));
        }
        entering = chosen.into_iter().map(|(i, (s, _))| (i, s)).collect();
        lambda = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn diag(values: &[f64]) -> ScoreCovariance {
        ScoreCovariance::from_matrix(DMatrix::from_diagonal(&DVector::from_row_slice(values))).unwrap()
    }

    #[test]
    fn independent_entry_order_and_knots() {
        let j = diag(&[1.0, 0.25, 1.0 / 9.0]);
        let path = solution_path(&j, 0.0).unwrap();
        let entries: Vec<(f64, usize)> = path
            .knots
            .iter()
            .flat_map(|k| k.entered().map(move |i| (k.lambda, i)))
            .collect();
        assert_eq!(entries.iter().map(|e| e.1).collect::<Vec<_>>(), vec![0, 1, 2]);
        for (e, expected) in entries.iter().zip([1.0, 0.25, 1.0 / 9.0]) {
            assert_relative_eq!(e.0, expected, max_relative = 1e-12);
        }
        assert_eq!(path.knots.last().unwrap().events, vec![PathEvent::End]);
        assert_eq!(path.knots.last().unwrap().rule.n_active(), 3);
    }

    #[test]
    fn identity_enters_all_at_once() {
        let j = diag(&[1.0; 5]);
        let path = solution_path(&j, 0.0).unwrap();
        assert_eq!(path.knots.len(), 2);
        assert_relative_eq!(path.knots[0].lambda, 1.0);
        assert_eq!(path.knots[0].entered().count(), 5);
        assert!(path.knots[0].rule.active_set.is_empty());
    }

    #[test]
    fn singular_tie_enters_lowest_index() {
        let j = ScoreCovariance::from_matrix(DMatrix::from_element(2, 2, 1.0)).unwrap();
        let path = solution_path(&j, 0.1).unwrap();
        assert_eq!(path.knots[0].entered().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn diag_three_one_knots() {
        let j = diag(&[3.0, 1.0]);
        let path = solution_path(&j, 0.0).unwrap();
        assert_eq!(path.lambdas(), vec![3.0, 1.0, 0.0]);
        assert_eq!(path.knots[1].rule.active_set, vec![0]);
    }

    #[test]
    fn interpolation_between_knots() {
        let j = diag(&[3.0, 1.0]);
        let path = solution_path(&j, 0.0).unwrap();
        let w = path.weights_at(2.0).unwrap();
        assert_relative_eq!(w[0], 1.0 / 3.0, max_relative = 1e-14);
        assert_eq!(w[1], 0.0);
        assert!(path.weights_at(-1.0).is_none());
    }

    #[test]
    fn lambda_min_above_start() {
        let j = diag(&[2.0, 1.0]);
        let path = solution_path(&j, 5.0).unwrap();
        assert_eq!(path.knots.len(), 1);
        assert_eq!(path.knots[0].events, vec![PathEvent::Start, PathEvent::End]);
    }

    #[test]
    fn json_round_trip() {
        let j = diag(&[3.0, 1.0, 0.5]);
        let path = solution_path(&j, 0.1).unwrap();
        let back = SolutionPath::from_json(&path.to_json().unwrap()).unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn long_csv_has_one_row_per_active_weight() {
        let j = diag(&[3.0, 1.0]);
        let path = solution_path(&j, 0.0).unwrap();
        let mut buf = Vec::new();
        path.write_long_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // header + start knot (empty) + knot at 1 (one active) + end knot (two active)
        assert_eq!(text.lines().count(), 1 + 1 + 1 + 2);
    }
}
