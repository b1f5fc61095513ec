//! The finite-difference suite behind `psdlab gradcheck`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use psd_core::distill::{neg_gradient, Problem, RewardSet};
use psd_core::guidance::{compose_terms, make_pair_from_noises, total_update};
use psd_core::oracle::{fd_gradient, fd_jacobian, gmm_cfg_eps, gmm_eps, gmm_log_density, relative_error, reward_value, FiniteDiffSpec};
use psd_core::representation::Representation;
use psd_core::rewards::RewardSpec;
use psd_core::schedule::{NoisyState, Schedule, ScheduleKind};
use psd_core::score::{Embedding, GmmScoreModel, ScoreModel};
use psd_core::streams::standard_normal;

/// Deliberate defects for checking that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the embedding Jacobian of the score model.
    JacobianSignFlip,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub spec: FiniteDiffSpec,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { instances: 100, seed: 0, spec: FiniteDiffSpec::default(), fault: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>9} {:>13} {:>10}  status\n", "check", "instances", "max rel err", "rel tol");
        for c in &self.checks {
            s += &format!(
                "{:<28} {:>9} {:>13.3e} {:>10.1e}  {}\n",
                c.name,
                c.instances,
                c.max_rel_error,
                c.rel_tol,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

struct SignFlipped<'a>(&'a GmmScoreModel);

impl ScoreModel for SignFlipped<'_> {
    fn data_dim(&self) -> usize {
        self.0.data_dim()
    }

    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    fn noisy_score(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> psd_core::Result<DVector<f64>> {
        self.0.noisy_score(state, e, schedule)
    }

    fn eps_embedding_jacobian(&self, state: &NoisyState, e: &Embedding, schedule: &Schedule) -> psd_core::Result<DMatrix<f64>> {
        Ok(-self.0.eps_embedding_jacobian(state, e, schedule)?)
    }
}

/// Relative errors below this reference norm are measured absolutely.
const FLOOR: f64 = 1e-8;

struct Ctx {
    schedule: Schedule,
    spec: FiniteDiffSpec,
    fault: Option<Fault>,
}

impl Ctx {
    fn model<'a>(&self, m: &'a GmmScoreModel) -> Box<dyn ScoreModel + 'a> {
        match self.fault {
            Some(Fault::JacobianSignFlip) => Box::new(SignFlipped(m)),
            None => Box::new(m.clone()),
        }
    }
}

fn quadratic(rng: &mut ChaCha8Rng, d: usize, de: usize) -> psd_core::Result<RewardSpec> {
    let m = DMatrix::from_fn(d, de, |_, _| rng.random_range(-0.5..0.5));
    RewardSpec::quadratic(m, standard_normal(rng, d), rng.random_range(0.2..2.0))
}

fn rbf(rng: &mut ChaCha8Rng, d: usize, de: usize) -> psd_core::Result<RewardSpec> {
    let m = DMatrix::from_fn(d, de, |_, _| rng.random_range(-0.5..0.5));
    RewardSpec::rbf(m, standard_normal(rng, d), rng.random_range(0.2..2.0), rng.random_range(0.7..2.0))
}

fn score_check(ctx: &Ctx, rng: &mut ChaCha8Rng, i: usize) -> anyhow::Result<f64> {
    let k = [1, 2, 4, 8][i % 4];
    let model = GmmScoreModel::random(rng, k, 3, 2)?;
    let e = standard_normal(rng, 2);
    let t = if i.is_multiple_of(10) { 0 } else { rng.random_range(1..=ctx.schedule.num_steps()) };
    let x = standard_normal(rng, 3) * 2.0;
    let analytic = ctx.model(&model).noisy_score(&NoisyState::new(x.clone(), t), &Embedding::positive(e.clone()), &ctx.schedule)?;
    let fd = fd_gradient(|x| gmm_log_density(&model, x, &e, t, &ctx.schedule).unwrap_or(f64::NAN), &x, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

fn jacobian_check(ctx: &Ctx, rng: &mut ChaCha8Rng, i: usize) -> anyhow::Result<f64> {
    let k = [1, 2, 4, 8][i % 4];
    let model = GmmScoreModel::random(rng, k, 3, 2)?;
    let e = standard_normal(rng, 2);
    let t = rng.random_range(1..=ctx.schedule.num_steps());
    let x = standard_normal(rng, 3) * 1.5;
    let state = NoisyState::new(x.clone(), t);
    let analytic = ctx.model(&model).eps_embedding_jacobian(&state, &Embedding::positive(e.clone()), &ctx.schedule)?;
    let fd = fd_jacobian(|e| gmm_eps(&model, &x, e, t, &ctx.schedule).unwrap_or_else(|_| DVector::from_element(3, f64::NAN)), &e, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

fn vjp_check(ctx: &Ctx, rng: &mut ChaCha8Rng, _: usize) -> anyhow::Result<f64> {
    let cams = rng.random_range(2..=5);
    let cameras: Vec<DMatrix<f64>> = (0..cams).map(|_| DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0))).collect();
    let rep = Representation::multi_view(standard_normal(rng, 6), cameras)?;
    let c = rng.random_range(0..cams);
    let cot = standard_normal(rng, 3);
    let analytic = rep.render_vjp(c, &cot)?;
    // the camera matrix is applied by hand so the check does not reuse `render`
    let p = rep.cameras()[c].clone();
    let fd = fd_gradient(|th| cot.dot(&(&p * th)), &rep.theta, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

fn theta_check(ctx: &Ctx, rng: &mut ChaCha8Rng, _: usize) -> anyhow::Result<f64> {
    let s = &ctx.schedule;
    let model = GmmScoreModel::random(rng, 2, 2, 2)?;
    let reward = quadratic(rng, 2, 2)?;
    let y = Embedding::positive(standard_normal(rng, 2));
    let n = Embedding::negative(standard_normal(rng, 2));
    let rep = Representation::blended_halves(standard_normal(rng, 4), &[1.0, 0.0, 0.3])?;
    let c = rng.random_range(0..3);
    let t = rng.random_range(20..=950);
    let (ea, eb) = (standard_normal(rng, 2), standard_normal(rng, 2));
    let m = ctx.model(&model);
    let pair = make_pair_from_noises(&rep.render(c)?.x, t, ea, eb, &*m, &reward, &y, &n, 7.5, s)?;
    let u = total_update(&compose_terms(&pair, &*m, &y, &n, 7.5, s)?, 7.5);
    let analytic = rep.render_vjp(c, &u)?;
    let p = rep.cameras()[c].clone();
    let fd = fd_gradient(|th| u.dot(&(&p * th)), &rep.theta, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

fn neg_check(ctx: &Ctx, rng: &mut ChaCha8Rng, i: usize) -> anyhow::Result<f64> {
    let s = &ctx.schedule;
    let model = GmmScoreModel::random(rng, 1 + i % 3, 2, 2)?;
    let reward = if i.is_multiple_of(2) { quadratic(rng, 2, 2)? } else { rbf(rng, 2, 2)? };
    let rewards = RewardSet { target: reward.clone(), heldout: vec![] };
    let y = Embedding::positive(standard_normal(rng, 2));
    let n = Embedding::negative(standard_normal(rng, 2));
    let gamma = rng.random_range(1.5..10.0);
    let t = rng.random_range(20..=700);
    let x_c = standard_normal(rng, 2);
    let (ea, eb) = (standard_normal(rng, 2), standard_normal(rng, 2));
    let m = ctx.model(&model);
    let pair = make_pair_from_noises(&x_c, t, ea, eb, &*m, &reward, &y, &n, gamma, s)?;
    let problem = Problem { model: &*m, rewards: &rewards, y: &y, schedule: s };
    let analytic = neg_gradient(&pair, &n, gamma, &problem)?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let x_w = pair.x_t_win.clone();
    let chain = |nv: &DVector<f64>| match gmm_cfg_eps(&model, &x_w, &y.v, nv, gamma, t, s) {
        Ok(eps) => reward_value(&reward, &y.v, &((&x_w - eps * sg) / a)),
        Err(_) => f64::NAN,
    };
    let fd = fd_gradient(chain, &n.v, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

fn reward_check(ctx: &Ctx, rng: &mut ChaCha8Rng, i: usize) -> anyhow::Result<f64> {
    let reward = if i.is_multiple_of(2) { quadratic(rng, 3, 2)? } else { rbf(rng, 3, 2)? };
    let y = Embedding::positive(standard_normal(rng, 2));
    let x = standard_normal(rng, 3) * 1.5;
    let analytic = reward.reward_gradient(&y, &x)?;
    let fd = fd_gradient(|x| reward_value(&reward, &y.v, x), &x, &ctx.spec)?;
    Ok(relative_error(analytic.as_slice(), fd.as_slice(), FLOOR))
}

type CheckFn = fn(&Ctx, &mut ChaCha8Rng, usize) -> anyhow::Result<f64>;

const CHECKS: [(&str, CheckFn); 6] = [
    ("noisy_score", score_check),
    ("eps_embedding_jacobian", jacobian_check),
    ("render_vjp", vjp_check),
    ("theta_update_chain", theta_check),
    ("neg_embedding_chain", neg_check),
    ("reward_gradient", reward_check),
];

/// Runs every check on `opts.instances` seeded random instances.
pub fn gradcheck(opts: &GradcheckOptions) -> anyhow::Result<GradcheckReport> {
    let start = Instant::now();
    let ctx = Ctx {
        schedule: Schedule::build(ScheduleKind::VariancePreserving, 1000, 1e-4, 2e-2)?,
        spec: opts.spec,
        fault: opts.fault,
    };
    let mut checks = Vec::with_capacity(CHECKS.len());
    for (k, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64 + 1);
        let mut worst = 0.0f64;
        for i in 0..opts.instances {
            let err = check(&ctx, &mut rng, i)?;
            // NaN counts as a failure
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            if worst.is_nan() {
                break;
            }
        }
        checks.push(CheckResult {
            name,
            instances: opts.instances,
            max_rel_error: worst,
            rel_tol: opts.spec.rel_tol,
            passed: worst <= opts.spec.rel_tol,
        });
    }
    Ok(GradcheckReport { checks, elapsed: start.elapsed() })
}
