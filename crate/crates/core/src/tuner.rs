//! LinUCB contextual bandit over the (S_p, C_p, T_p) grid.
//!
//! Context is the standardized four-counter vector (cpu, rps, rqpt, art);
//! the reward blends normalized throughput with normalized processing time.
//! The reward deliberately carries no stability feedback: when a parameter
//! choice destabilizes a node the scheduler reduces its traffic, RPS falls
//! and the reward drops on its own. This module never reads queue state.

use crate::model::PerfCounters;
use crate::tunnel::TunnelParams;
use serde::{Deserialize, Serialize};

/// Context dimension: cpu, rps, rqpt, art.
pub const CONTEXT_DIM: usize = 4;

pub type Context = [f64; CONTEXT_DIM];

/// One point of the parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub params: TunnelParams,
    pub index: usize,
}

/// Enumerates the full grid exactly once: S_p major, then C_p, then T_p.
/// 10 x 16 x 5 = 800 arms.
pub fn arm_space() -> Vec<Arm> {
    let mut arms = Vec::with_capacity(800);
    for sessions in 1..=10u8 {
        for concurrency in (50..=200u16).step_by(10) {
            for merge_timeout_ms in 1..=5u8 {
                arms.push(Arm {
                    params: TunnelParams { sessions, concurrency, merge_timeout_ms },
                    index: arms.len(),
                });
            }
        }
    }
    arms
}

/// Running reward normalization state. Extrema are primed from measured
/// operating ranges and updated before each normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub rqpt_min: f64,
    pub rqpt_max: f64,
    pub art_min: f64,
    pub art_max: f64,
    pub w_rqpt: f64,
    pub w_art: f64,
}

impl Default for RewardNorm {
    fn default() -> Self {
        // Initial extrema from the 8C16G operating range: throughput tops out
        // near 25k requests/s and processing times near 100 ms.
        Self {
            rqpt_min: 0.0,
            rqpt_max: 25_000.0,
            art_min: 0.0,
            art_max: 100.0,
            w_rqpt: 0.5,
            w_art: 0.5,
        }
    }
}

fn norm(v: f64, min: f64, max: f64) -> f64 {
    if max > min { (v - min) / (max - min) } else { 0.0 }
}

/// Updates the extrema with the observation, then returns
/// `w_rqpt * rqpt_norm + w_art * (1 - art_norm)` together with the updated
/// state. The result is always in [0, 1].
pub fn compute_reward(rqpt: f64, art: f64, norm_state: &RewardNorm) -> (f64, RewardNorm) {
    let mut n = *norm_state;
    n.rqpt_min = n.rqpt_min.min(rqpt);
    n.rqpt_max = n.rqpt_max.max(rqpt);
    n.art_min = n.art_min.min(art);
    n.art_max = n.art_max.max(art);
    let rqpt_norm = norm(rqpt, n.rqpt_min, n.rqpt_max);
    let art_norm = norm(art, n.art_min, n.art_max);
    let reward = n.w_rqpt * rqpt_norm + n.w_art * (1.0 - art_norm);
    (reward, n)
}

/// Running maxima used to bring the raw counters onto comparable scales:
/// cpu is already a fraction, the rate and time counters divide by their
/// historical maxima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextScaler {
    pub rps_max: f64,
    pub rqpt_max: f64,
    pub art_max: f64,
}

impl Default for ContextScaler {
    fn default() -> Self {
        Self { rps_max: 25_000.0, rqpt_max: 25_000.0, art_max: 100.0 }
    }
}

impl ContextScaler {
    pub fn standardize(&mut self, c: &PerfCounters) -> Context {
        self.rps_max = self.rps_max.max(c.rps);
        self.rqpt_max = self.rqpt_max.max(c.rqpt);
        self.art_max = self.art_max.max(c.art_ms);
        [
            c.cpu,
            if self.rps_max > 0.0 { c.rps / self.rps_max } else { 0.0 },
            if self.rqpt_max > 0.0 { c.rqpt / self.rqpt_max } else { 0.0 },
            if self.art_max > 0.0 { c.art_ms / self.art_max } else { 0.0 },
        ]
    }
}

type Mat = [[f64; CONTEXT_DIM]; CONTEXT_DIM];
type Vec4 = [f64; CONTEXT_DIM];

fn identity() -> Mat {
    let mut m = [[0.0; CONTEXT_DIM]; CONTEXT_DIM];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_vec(m: &Mat, x: &Vec4) -> Vec4 {
    let mut out = [0.0; CONTEXT_DIM];
    for i in 0..CONTEXT_DIM {
        for j in 0..CONTEXT_DIM {
            out[i] += m[i][j] * x[j];
        }
    }
    out
}

fn dot(a: &Vec4, b: &Vec4) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-arm ridge-regression state: design matrix A (initialized to the
/// identity), response vector b, and the cached inverse maintained with
/// rank-1 Sherman-Morrison updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub a: Mat,
    pub b: Vec4,
    a_inv: Mat,
}

impl Default for ArmState {
    fn default() -> Self {
        Self { a: identity(), b: [0.0; CONTEXT_DIM], a_inv: identity() }
    }
}

impl ArmState {
    fn theta(&self) -> Vec4 {
        mat_vec(&self.a_inv, &self.b)
    }

    fn score(&self, x: &Vec4, alpha: f64) -> f64 {
        let mean = dot(&self.theta(), x);
        let bonus = dot(x, &mat_vec(&self.a_inv, x)).max(0.0).sqrt();
        mean + alpha * bonus
    }

    fn update(&mut self, x: &Vec4, reward: f64) {
        for i in 0..CONTEXT_DIM {
            for j in 0..CONTEXT_DIM {
                self.a[i][j] += x[i] * x[j];
            }
        }
        for i in 0..CONTEXT_DIM {
            self.b[i] += reward * x[i];
        }
        // Sherman-Morrison: (A + x x^T)^-1 = A^-1 - (A^-1 x)(x^T A^-1) / (1 + x^T A^-1 x)
        let u = mat_vec(&self.a_inv, x);
        let denom = 1.0 + dot(x, &u);
        if denom.abs() < 1e-12 {
            return;
        }
        for i in 0..CONTEXT_DIM {
            for j in 0..CONTEXT_DIM {
                self.a_inv[i][j] -= u[i] * u[j] / denom;
            }
        }
    }
}

/// Joint LinUCB state over all arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinUcbState {
    pub alpha: f64,
    arms: Vec<ArmState>,
}

impl LinUcbState {
    pub fn new(num_arms: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0, "exploration coefficient must be positive");
        Self { alpha, arms: vec![ArmState::default(); num_arms] }
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arm(&self, index: usize) -> &ArmState {
        &self.arms[index]
    }

    /// argmax over arms of `theta_a . x + alpha * sqrt(x^T A_a^-1 x)`;
    /// ties break toward the lowest arm index.
    pub fn select_arm(&self, context: &Context) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, arm) in self.arms.iter().enumerate() {
            let s = arm.score(context, self.alpha);
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        best
    }

    /// `A_a += x x^T; b_a += reward * x`; other arms untouched.
    pub fn update(&mut self, arm: usize, context: &Context, reward: f64) {
        self.arms[arm].update(context, reward);
    }
}

/// Bandit tuner bundling arm enumeration, LinUCB state, reward
/// normalization and context scaling. One select/update per slot. Snapshots
/// serialize to JSON for warm restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tuner {
    pub arms: Vec<Arm>,
    pub state: LinUcbState,
    pub norm: RewardNorm,
    pub scaler: ContextScaler,
}

impl Tuner {
    pub fn new(alpha: f64) -> Self {
        let arms = arm_space();
        Self {
            state: LinUcbState::new(arms.len(), alpha),
            arms,
            norm: RewardNorm::default(),
            scaler: ContextScaler::default(),
        }
    }

    pub fn select(&mut self, counters: &PerfCounters) -> (Arm, Context) {
        let ctx = self.scaler.standardize(counters);
        let idx = self.state.select_arm(&ctx);
        (self.arms[idx], ctx)
    }

    pub fn observe(&mut self, arm: usize, context: &Context, rqpt: f64, art_ms: f64) -> f64 {
        let (reward, norm) = compute_reward(rqpt, art_ms, &self.norm);
        self.norm = norm;
        self.state.update(arm, context, reward);
        reward
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tuner state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arm_space_covers_the_grid_once() {
        let arms = arm_space();
        assert_eq!(arms.len(), 800);
        assert_eq!(arms[0].params, TunnelParams { sessions: 1, concurrency: 50, merge_timeout_ms: 1 });
        assert_eq!(
            arms[799].params,
            TunnelParams { sessions: 10, concurrency: 200, merge_timeout_ms: 5 }
        );
        let mut seen = std::collections::HashSet::new();
        for (i, arm) in arms.iter().enumerate() {
            assert_eq!(arm.index, i);
            assert!(arm.params.validate().is_ok());
            assert!(seen.insert(arm.params));
        }
    }

    #[test]
    fn reward_is_one_at_best_corner_and_zero_at_worst() {
        let n = RewardNorm { rqpt_min: 100.0, rqpt_max: 900.0, art_min: 5.0, art_max: 50.0, ..RewardNorm::default() };
        let (r, _) = compute_reward(900.0, 5.0, &n);
        assert_eq!(r, 1.0);
        let (r, _) = compute_reward(100.0, 50.0, &n);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn reward_follows_the_weighted_formula() {
        let n = RewardNorm { rqpt_min: 0.0, rqpt_max: 1.0, art_min: 0.0, art_max: 1.0, ..RewardNorm::default() };
        let (r, _) = compute_reward(0.6, 0.2, &n);
        assert!((r - 0.7).abs() < 1e-12, "0.5*0.6 + 0.5*0.8 = 0.7, got {r}");
    }

    #[test]
    fn reward_expands_extrema_first() {
        let n = RewardNorm { rqpt_min: 0.0, rqpt_max: 10.0, art_min: 0.0, art_max: 10.0, ..RewardNorm::default() };
        let (r, n2) = compute_reward(20.0, 0.0, &n);
        assert_eq!(n2.rqpt_max, 20.0);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn fresh_state_ties_break_to_arm_zero() {
        let state = LinUcbState::new(800, 1.0);
        assert_eq!(state.select_arm(&[0.5, 0.5, 0.5, 0.5]), 0);
    }

    /// Test-local dense solve, independent of the Sherman-Morrison path.
    fn solve4(a: &[[f64; 4]; 4], b: &[f64; 4]) -> [f64; 4] {
        let mut m = [[0.0f64; 5]; 4];
        for i in 0..4 {
            m[i][..4].copy_from_slice(&a[i]);
            m[i][4] = b[i];
        }
        for col in 0..4 {
            let piv = (col..4).max_by(|&r1, &r2| m[r1][col].abs().total_cmp(&m[r2][col].abs())).unwrap();
            m.swap(col, piv);
            let d = m[col][col];
            for v in m[col].iter_mut() {
                *v /= d;
            }
            for row in 0..4 {
                if row != col {
                    let f = m[row][col];
                    for k in 0..5 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        [m[0][4], m[1][4], m[2][4], m[3][4]]
    }

    #[test]
    fn one_update_raises_the_updated_arms_score() {
        let mut state = LinUcbState::new(5, 1.0);
        let x = [0.6, 0.3, 0.8, 0.2];
        state.update(2, &x, 1.0);

        // Independent oracle: theta = (I + x x^T)^-1 (1.0 * x), scored by hand.
        let mut a = identity();
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += x[i] * x[j];
            }
        }
        let b = x;
        let theta = solve4(&a, &b);
        let mean = dot(&theta, &x);
        // Bonus term from the oracle: solve A y = x, bonus = sqrt(x . y).
        let y = solve4(&a, &x);
        let expected = mean + (dot(&x, &y)).sqrt();

        let got = state.arm(2).score(&x, 1.0);
        assert!((got - expected).abs() < 1e-9, "got {got}, oracle {expected}");

        for k in 0..5 {
            if k != 2 {
                assert!(
                    state.arm(2).score(&x, 1.0) > state.arm(k).score(&x, 1.0),
                    "updated arm must outscore untouched arm {k} at its own context"
                );
            }
        }
        assert_eq!(state.select_arm(&x), 2);
    }

    #[test]
    fn zero_context_update_changes_nothing() {
        let mut state = LinUcbState::new(3, 1.0);
        let before = state.clone();
        state.update(1, &[0.0; 4], 0.7);
        assert_eq!(state, before);
    }

    #[test]
    fn updates_commute_in_a_and_b() {
        let x1 = [0.1, 0.9, 0.4, 0.3];
        let x2 = [0.7, 0.2, 0.5, 0.6];
        let mut s1 = LinUcbState::new(1, 1.0);
        s1.update(0, &x1, 0.3);
        s1.update(0, &x2, 0.8);
        let mut s2 = LinUcbState::new(1, 1.0);
        s2.update(0, &x2, 0.8);
        s2.update(0, &x1, 0.3);
        for i in 0..4 {
            assert!((s1.arm(0).b[i] - s2.arm(0).b[i]).abs() < 1e-12);
            for j in 0..4 {
                assert!((s1.arm(0).a[i][j] - s2.arm(0).a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tuner_snapshot_round_trips() {
        let mut t = Tuner::new(1.0);
        let counters = PerfCounters { cpu: 0.4, rps: 1200.0, rqpt: 1100.0, art_ms: 14.0 };
        let (arm, ctx) = t.select(&counters);
        t.observe(arm.index, &ctx, 1100.0, 14.0);
        let back = Tuner::from_json(&t.to_json()).unwrap();
        assert_eq!(back.state, t.state);
        assert_eq!(back.norm, t.norm);
    }

    /// Stationary synthetic environment: one arm pays 0.9, the rest 0.1.
    /// After the initial sweep the bandit must lock onto the good arm.
    #[test]
    fn bandit_locks_onto_the_best_arm() {
        use rand::{Rng, SeedableRng};
        let arms = arm_space();
        let best = arms
            .iter()
            .find(|a| a.params == TunnelParams { sessions: 4, concurrency: 100, merge_timeout_ms: 2 })
            .unwrap()
            .index;
        let mut state = LinUcbState::new(arms.len(), 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let ctx = [0.6, 0.5, 0.5, 0.5];
        let mut hits = 0u32;
        let rounds = 2000;
        for round in 0..rounds {
            let pick = state.select_arm(&ctx);
            let base = if pick == best { 0.9 } else { 0.1 };
            let reward = (base + rng.gen_range(-0.01..0.01f64)).clamp(0.0, 1.0);
            state.update(pick, &ctx, reward);
            if round >= 1500 && pick == best {
                hits += 1;
            }
        }
        assert!(hits as f64 / 500.0 > 0.9, "best-arm share {} too low", hits as f64 / 500.0);
    }

    proptest! {
        #[test]
        fn reward_stays_in_unit_interval(
            rqpt in 0.0..1e6f64,
            art in 0.0..1e5f64,
            seed_rqpt in 0.0..1e6f64,
            seed_art in 0.0..1e5f64,
        ) {
            let n = RewardNorm {
                rqpt_min: seed_rqpt * 0.5,
                rqpt_max: seed_rqpt,
                art_min: seed_art * 0.5,
                art_max: seed_art,
                ..RewardNorm::default()
            };
            let (r, n2) = compute_reward(rqpt, art, &n);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(n2.rqpt_min <= n2.rqpt_max);
            prop_assert!(n2.art_min <= n2.art_max);
        }

        /// A stays symmetric positive definite under arbitrary updates.
        #[test]
        fn design_matrix_stays_spd(
            updates in proptest::collection::vec(
                (proptest::array::uniform4(0.0..1.0f64), 0.0..1.0f64),
                1..40
            ),
            probe in proptest::array::uniform4(-1.0..1.0f64),
        ) {
            let mut state = LinUcbState::new(1, 1.0);
            for (x, r) in &updates {
                state.update(0, x, *r);
            }
            let a = &state.arm(0).a;
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((a[i][j] - a[j][i]).abs() < 1e-9);
                }
            }
            if probe.iter().any(|v| v.abs() > 1e-6) {
                let ax = mat_vec(a, &probe);
                prop_assert!(dot(&probe, &ax) > 0.0, "quadratic form must stay positive");
            }
        }
    }
}
