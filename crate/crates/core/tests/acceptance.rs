//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use canonedit::datasets::{generate_synthetic_tasks, CanonicalExample, GenSizes, LossKind};
use canonedit::editors::{
    analytic_nll_sense_gradient, full_finetune, log_softmax_rows, lora_finetune, select_epoch_index, sense_edit,
    AdaptedModel, EditConfig, LoraAdapters, Method, RegSample, SenseDelta, SenseEditedModel,
};
use canonedit::ensemble::{calibrate_beta, ensemble_logits, ensemble_logits_cached, EnsembleSpec, BETA_GRID};
use canonedit::eval::{corpus_nll, example_loss, example_loss_var, sequence_nll_var, DegradationBall, BALL_EPSILONS};
use canonedit::harness::{
    ensemble_runs, pretrain, run_sweep, BaseModel, DataDir, ModelKind, PretrainConfig, SweepSpec,
};
use canonedit::models::{
    grad_check_model, AdapterVars, BackpackModel, Bound, HostTransformerLM, LanguageModel, ModelConfig, TrainableLm,
    SENSES,
};
use canonedit::tensor::{grad_check, GradCheckOptions, Graph, Tensor};

const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_INSTANCES: usize = 120;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SENSE_GRAD_REL_TOL: f64 = 1e-9;
const SENSE_GRAD_INSTANCES: usize = 24;
const LOCALITY_INPUTS: usize = 50;
const UNEDITED_RATIO_TOL: f64 = 1e-12;
const CACHE_TOL: f64 = 1e-10;
const ENSEMBLE_INPUTS: usize = 50;
const LOSS_ORACLE_TOL: f64 = 1e-10;
const LOSS_EXAMPLES: usize = 200;
const TRACE_COUNT: usize = 1000;
const MERGE_TOL: f64 = 1e-10;
const PRETRAIN_BUDGET: Duration = Duration::from_secs(600);
const SENSE_GAIN_FLOOR: f64 = 0.05;
const HARD_NEG_CEIL: f64 = 0.5;
const ENSEMBLE_GAIN_FLOOR: f64 = 0.03;
const SENSE_EPSILON: f64 = 1e-4;
const ENSEMBLE_EPSILON: f64 = 1e-5;
const WORLD_SEED: u64 = 1;
const MODEL_SEED: u64 = 0;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

type Check = anyhow::Result<(bool, String)>;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        sense_count: 2,
        model_dim: 4,
        sense_dim: 5,
        ctx_layers: 1,
        ctx_heads: 2,
        ctx_mlp_dim: 6,
        max_len: 10,
        host_layers: 2,
        host_heads: 2,
        host_dim: 4,
        host_mlp_dim: 6,
    }
}

/// Adds `N(0, std)` noise to every parameter so gradients are not vanishingly small.
fn jitter<M: TrainableLm>(mut m: M, std: f64, rng: &mut ChaCha8Rng) -> M {
    let names: Vec<String> = m.params().names().map(String::from).collect();
    for n in names {
        let t = m.params_mut().get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape(), std, rng);
        t.add_assign(&noise).unwrap();
    }
    m
}

fn tokens(rng: &mut ChaCha8Rng, vocab: usize, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn random_example(rng: &mut ChaCha8Rng, vocab: usize, kind: LossKind, max_y: usize) -> CanonicalExample {
    let prefix = tokens(rng, vocab, 1, 4);
    let ya = tokens(rng, vocab, 1, max_y);
    let mut yb = tokens(rng, vocab, 1, max_y);
    if yb == ya {
        yb[0] = (yb[0] + 1) % vocab;
    }
    let (a, b) = match kind {
        LossKind::NllGood => (Some(ya), None),
        LossKind::SuppressBad => (None, Some(yb)),
        _ => (Some(ya), Some(yb)),
    };
    CanonicalExample::new(prefix, a, b, kind, 0.0).unwrap()
}

fn lm_kind<M: TrainableLm>(
    m: &M,
    rng: &mut ChaCha8Rng,
    loss: usize,
    opts: &GradCheckOptions,
) -> anyhow::Result<f64> {
    let v = m.vocab_size();
    let r = match loss {
        0 => {
            let seq = tokens(rng, v, 2, 8);
            grad_check_model(m, |g, b| sequence_nll_var(g, &seq, &mut |g, t| m.forward_graph(g, b, t)), GRAD_REL_TOL, opts)?
        }
        1..=4 => {
            let ex = random_example(rng, v, LossKind::ALL[loss - 1], 3);
            grad_check_model(m, |g, b| example_loss_var(g, &ex, &mut |g, t| m.forward_graph(g, b, t)), GRAD_REL_TOL, opts)?
        }
        5 => {
            let seq = tokens(rng, v, 2, 8);
            let other = jitter(m.clone(), 0.1, rng);
            let reference = Arc::new(log_softmax_rows(&other.logits(&seq)?));
            grad_check_model(
                m,
                |g, b| {
                    let logits = m.forward_graph(g, b, &seq)?;
                    let rows = g.kl_rows(logits, reference.clone())?;
                    Ok(g.sum(rows))
                },
                GRAD_REL_TOL,
                opts,
            )?
        }
        _ => {
            let mut ad = LoraAdapters::init(m, 2, 1, rng.random())?;
            for f in &mut ad.factors {
                f.q = Tensor::randn(f.q.shape(), 0.3, rng);
            }
            let names: Vec<String> = m.params().names().map(String::from).collect();
            let n = names.len();
            let mut ts: Vec<Tensor> = m.params().iter().map(|(_, t)| t.clone()).collect();
            for f in &ad.factors {
                ts.push(f.q.clone());
                ts.push(f.r.clone());
            }
            let seq = tokens(rng, v, 2, 8);
            grad_check(
                |g, vars| {
                    let mut b = Bound::from_vars(names.iter().cloned().zip(vars[..n].iter().copied()));
                    for (i, f) in ad.factors.iter().enumerate() {
                        b.attach_adapter(f.weight.clone(), AdapterVars { q: vars[n + 2 * i], r: vars[n + 2 * i + 1] });
                    }
                    sequence_nll_var(g, &seq, &mut |g, t| m.forward_graph(g, &b, t))
                },
                &ts,
                GRAD_REL_TOL,
                opts,
            )?
        }
    };
    Ok(r.max_rel_error)
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    for i in 0..GRAD_INSTANCES {
        let vocab = rng.random_range(5..=9);
        let opts = GradCheckOptions {
            max_coords: Some(40),
            seed: i as u64,
            ..GradCheckOptions::default()
        };
        let loss = i % 7;
        let err = if i % 2 == 0 {
            let m = jitter(HostTransformerLM::new(tiny(vocab), i as u64)?, 0.3, &mut rng);
            lm_kind(&m, &mut rng, loss, &opts)?
        } else {
            let m = jitter(BackpackModel::new(tiny(vocab), i as u64)?, 0.3, &mut rng);
            lm_kind(&m, &mut rng, loss, &opts)?
        };
        worst = worst.max(err);
        fails += (err >= GRAD_REL_TOL) as usize;
    }
    let took = start.elapsed();
    Ok((
        fails == 0 && took < GRAD_BUDGET,
        format!("{GRAD_INSTANCES} instances, max rel error {worst:.2e}, {fails} over tolerance, {:.1}s", took.as_secs_f64()),
    ))
}

fn sense_gradient_closed_form() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst: f64 = 0.0;
    for i in 0..SENSE_GRAD_INSTANCES {
        let vocab = rng.random_range(6..=12);
        let m = jitter(BackpackModel::new(tiny(vocab), 50 + i as u64)?, 0.3, &mut rng);
        let ex = random_example(&mut rng, vocab, LossKind::NllGood, 3);
        let y = ex.y_a.clone().unwrap();
        let analytic = analytic_nll_sense_gradient(&m, &ex.prefix, &y)?;
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, m.params(), |n| n == SENSES);
        let loss = example_loss_var(&mut g, &ex, &mut |g, t| m.forward_graph(g, &b, t))?;
        let grads = g.backward(loss)?;
        let auto = grads.get(b.var(SENSES)?).expect("sense gradient");
        let k = m.sense_count();
        for w in 0..vocab {
            for l in 0..k {
                let row = auto.row(w * k + l);
                match analytic.get(&(w, l)) {
                    Some(a) => {
                        for (x, z) in a.iter().zip(row) {
                            let rel = (x - z).abs() / x.abs().max(z.abs()).max(1e-300);
                            if (x - z).abs() > 1e-15 {
                                worst = worst.max(rel);
                            }
                        }
                    }
                    None if row.iter().any(|&v| v != 0.0) => return Ok((false, format!("({w},{l}) missing from analytic"))),
                    None => {}
                }
            }
        }
    }
    Ok((worst < SENSE_GRAD_REL_TOL, format!("{SENSE_GRAD_INSTANCES} instances, max rel error {worst:.2e}")))
}

struct EditFixture {
    bp: BackpackModel,
    host: HostTransformerLM,
    train: Vec<CanonicalExample>,
    reg: RegSample,
    host_reg: RegSample,
    ball_corpus: Vec<Vec<usize>>,
}

fn edit_fixture() -> anyhow::Result<EditFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let vocab = 10;
    let bp = jitter(BackpackModel::new(tiny(vocab), 3)?, 0.2, &mut rng);
    let host = jitter(HostTransformerLM::new(tiny(vocab), 3)?, 0.2, &mut rng);
    let train = (0..6).map(|i| random_example(&mut rng, vocab, LossKind::ALL[i % 4], 2)).collect();
    let reg_seqs: Vec<Vec<usize>> = (0..8).map(|_| tokens(&mut rng, vocab, 3, 8)).collect();
    let ball_corpus = (0..8).map(|_| tokens(&mut rng, vocab, 3, 8)).collect();
    Ok(EditFixture {
        reg: RegSample::new(&bp, reg_seqs.clone())?,
        host_reg: RegSample::new(&host, reg_seqs)?,
        bp,
        host,
        train,
        ball_corpus,
    })
}

/// Every snapshot the checks edit, kept for the ball monotonicity check.
#[derive(Default)]
struct Snapshots {
    models: Vec<(String, Box<dyn LanguageModel>)>,
    /// Base loss and ball corpus per model family.
    bases: BTreeMap<String, (f64, Vec<Vec<usize>>)>,
}

fn edit_locality(fx: &EditFixture, snaps: &mut Snapshots) -> Check {
    let g = &fx.ball_corpus;
    let ball = DegradationBall::around(&fx.bp, g, 1e-3)?;
    let mut cfg = EditConfig::senses(5e-2, 0.5, 3, 1.0, 7);
    cfg.epochs = 4;
    let (sel, trace) = sense_edit(&fx.bp, &fx.train, &fx.reg, &cfg, &ball, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let inputs: Vec<Vec<usize>> = (0..LOCALITY_INPUTS).map(|_| tokens(&mut rng, 10, 1, 10)).collect();
    let k = fx.bp.sense_count();
    let mut moved = 0;
    for (e, delta) in trace.snapshots.iter().enumerate() {
        let edited = SenseEditedModel::new(&fx.bp, delta.clone())?.materialize()?;
        for w in 0..10 {
            for l in 0..k {
                let same = edited.sense(w, l) == fx.bp.sense(w, l);
                if sel.pairs.contains(&(w, l)) {
                    moved += (!same) as usize;
                } else if !same {
                    return Ok((false, format!("unselected sense ({w},{l}) changed at epoch {e}")));
                }
            }
        }
        for x in &inputs {
            if !edited.alpha(x)?.matrix().bit_eq(fx.bp.alpha(x)?.matrix()) {
                return Ok((false, format!("alpha changed at epoch {e}")));
            }
        }
        snaps.models.push(("backpack".into(), Box::new(edited)));
    }
    Ok((
        moved > 0,
        format!("{} selected senses, {moved} selected updates, {} epochs x {LOCALITY_INPUTS} inputs bit-identical", sel.pairs.len(), trace.epochs()),
    ))
}

fn more_snapshots(fx: &EditFixture, snaps: &mut Snapshots) -> anyhow::Result<()> {
    let g = &fx.ball_corpus;
    let hb = DegradationBall::around(&fx.host, g, 1e-3)?;
    let mut full = EditConfig::full(1e-2, 0.5, 1);
    full.epochs = 3;
    for m in full_finetune(&fx.host, &fx.train, &fx.host_reg, &full, &hb, g)?.snapshots {
        snaps.models.push(("host".into(), Box::new(m)));
    }
    let mut lora = EditConfig::lora(3e-2, 0.5, 2, 1, 2);
    lora.epochs = 3;
    for a in lora_finetune(&fx.host, &fx.train, &fx.host_reg, &lora, &hb, g)?.snapshots {
        snaps.models.push(("host".into(), Box::new(a.merge(&fx.host)?)));
    }
    snaps.bases.insert("host".into(), (hb.base_loss, g.clone()));
    let bb = DegradationBall::around(&fx.bp, g, 1e-3)?;
    snaps.bases.insert("backpack".into(), (bb.base_loss, g.clone()));
    Ok(())
}

fn ball_exactness(fx: &EditFixture, snaps: &Snapshots) -> Check {
    let g = &fx.ball_corpus;
    let mut worst_unit: f64 = 0.0;
    for m in [&fx.bp as &dyn LanguageModel, &fx.host as &dyn LanguageModel] {
        for &eps in &BALL_EPSILONS {
            let (r, member) = DegradationBall::around(m, g, eps)?.membership(m, g)?;
            worst_unit = worst_unit.max((r - 1.0).abs());
            if !member {
                return Ok((false, "unedited model outside its own ball".into()));
            }
        }
    }
    let mut eps = BALL_EPSILONS.to_vec();
    eps.sort_by(f64::total_cmp);
    let mut members = [0usize; 3];
    for (kind, m) in &snaps.models {
        let (base, corpus) = &snaps.bases[kind];
        let mut prev = false;
        for (i, &e) in eps.iter().enumerate() {
            let (_, member) = DegradationBall::new(e, *base, "g")?.membership(m.as_ref(), corpus)?;
            if prev && !member {
                return Ok((false, format!("snapshot in B_{} but not in B_{e}", eps[i - 1])));
            }
            prev = member;
            members[i] += member as usize;
        }
    }
    Ok((
        worst_unit <= UNEDITED_RATIO_TOL,
        format!(
            "|ratio-1| of unedited = {worst_unit:.1e}; {} snapshots monotone, members per ascending eps {members:?}",
            snaps.models.len()
        ),
    ))
}

fn random_delta(bp: &BackpackModel, rng: &mut ChaCha8Rng, pairs: usize, scale: f64) -> SenseDelta {
    let (v, k, d) = (bp.vocab_size(), bp.sense_count(), bp.config().sense_dim);
    let mut delta = SenseDelta::zeros((0..pairs).map(|_| (rng.random_range(0..v), rng.random_range(0..k))), d);
    for e in delta.entries.values_mut() {
        for x in e.iter_mut() {
            *x = scale * rng.random_range(-1.0..1.0);
        }
    }
    delta
}

fn ensemble_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let v = 9;
    let host = jitter(HostTransformerLM::new(tiny(v), 1)?, 0.2, &mut rng);
    let bp = jitter(BackpackModel::new(tiny(v), 2)?, 0.2, &mut rng);
    let delta = random_delta(&bp, &mut rng, 6, 0.5);
    let edited = EnsembleSpec::from_delta(host.clone(), bp.clone(), &delta, 0.7)?;
    let zero_beta = edited.with_beta(0.0)?;
    let unedited = EnsembleSpec::new(host.clone(), bp.clone(), bp.clone(), 0.7)?;
    let (mut worst, mut single_calls) = (0.0f64, true);
    for _ in 0..ENSEMBLE_INPUTS {
        let x = tokens(&mut rng, v, 1, 10);
        let h = host.logits(&x)?;
        if !ensemble_logits(&zero_beta, &x)?.bit_eq(&h) || !ensemble_logits(&unedited, &x)?.bit_eq(&h) {
            return Ok((false, "identity case differs from host".into()));
        }
        let before = edited.bp_pre.contextualizer_calls() + edited.bp_ft.contextualizer_calls();
        let cached = ensemble_logits_cached(&edited, &x)?;
        let after = edited.bp_pre.contextualizer_calls() + edited.bp_ft.contextualizer_calls();
        single_calls &= after - before == 1;
        worst = worst.max(cached.max_abs_diff(&ensemble_logits(&edited, &x)?)?);
    }
    Ok((
        worst < CACHE_TOL && single_calls,
        format!("beta=0 and unedited bit-exact, cached vs uncached max diff {worst:.1e}, one contextualizer call per cached call: {single_calls}"),
    ))
}

/// Mean per-token NLL of `host + beta (lsm_ft - lsm_pre)` computed directly.
fn direct_ensemble_nll(host: &HostTransformerLM, pre: &BackpackModel, ft: &BackpackModel, beta: f64, g: &[Vec<usize>]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for s in g {
        let x = &s[..s.len() - 1];
        let (h, p, f) = (host.logits(x).unwrap(), pre.logits(x).unwrap(), ft.logits(x).unwrap());
        let lse = |row: &[f64]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
        };
        for t in 0..x.len() {
            let (pl, fl) = (lse(p.row(t)), lse(f.row(t)));
            let row: Vec<f64> = (0..h.cols()).map(|v| h.at(t, v) + beta * ((f.at(t, v) - fl) - (p.at(t, v) - pl))).collect();
            total += lse(&row) - row[s[t + 1]];
            n += 1;
        }
    }
    total / n as f64
}

fn calibration_correctness() -> Check {
    let v = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let host = jitter(HostTransformerLM::new(tiny(v), 4)?, 0.2, &mut rng);
    let bp = jitter(BackpackModel::new(tiny(v), 5)?, 0.2, &mut rng);
    let g: Vec<Vec<usize>> = (0..12).map(|_| tokens(&mut rng, v, 3, 10)).collect();
    let base = direct_ensemble_nll(&host, &bp, &bp, 0.0, &g);
    // The ensemble NLL is convex in β and equal to the base at β = 0, so
    // the grid ratios are monotone once the ratio at 0.1 exceeds 1.
    let mut found = None;
    'search: for _ in 0..8 {
        let unit = random_delta(&bp, &mut rng, 12, 1.0);
        for scale in [1.0, -1.0, 2.0, -2.0, 4.0, -4.0, 8.0, -8.0, 16.0, -16.0] {
            let mut d = unit.clone();
            d.entries.values_mut().flatten().for_each(|x| *x *= scale);
            let ft = SenseEditedModel::new(&bp, d.clone())?.materialize()?;
            let ratios: Vec<f64> = BETA_GRID.iter().map(|&b| direct_ensemble_nll(&host, &bp, &ft, b, &g) / base).collect();
            if ratios.windows(2).all(|w| w[0] > w[1]) && ratios[9] > 1.0 + 1e-6 {
                found = Some((d, ratios));
                break 'search;
            }
        }
    }
    let Some((delta, ratios)) = found else {
        return Ok((false, "no monotone instance constructed".into()));
    };
    let spec = EnsembleSpec::from_delta(host.clone(), bp.clone(), &delta, 1.0)?;
    let base_ball = DegradationBall::around(&host, &g, 1e-3)?;
    let mut checked = 0;
    for cross in 0..=BETA_GRID.len() {
        let r = |i: usize| ratios.get(i).copied();
        let eps = match cross {
            0 => ratios[0] - 1.0 + 1e-3,
            c if c == BETA_GRID.len() => (ratios[c - 1] - 1.0) / 2.0,
            c => (r(c - 1).unwrap() + r(c).unwrap()) / 2.0 - 1.0,
        };
        let expected = if cross == BETA_GRID.len() { 0.0 } else { BETA_GRID[cross] };
        let cal = calibrate_beta(&spec, &base_ball.with_epsilon(eps)?, &g)?;
        if cal.beta != expected || cal.admissible != (expected > 0.0) {
            return Ok((false, format!("eps {eps:.3e}: got beta {} expected {expected}", cal.beta)));
        }
        if expected > 0.0 {
            let ratio_at = direct_ensemble_nll(&host, &bp, &spec.bp_ft, expected, &g) / base;
            if ratio_at > 1.0 + eps {
                return Ok((false, format!("beta {expected} not admissible by direct check")));
            }
            if expected < 1.0 {
                let above = direct_ensemble_nll(&host, &bp, &spec.bp_ft, expected + 0.1, &g) / base;
                if above <= 1.0 + eps {
                    return Ok((false, format!("beta {} also admissible", expected + 0.1)));
                }
            }
        }
        checked += 1;
    }
    Ok((true, format!("{checked} radii, one per grid crossing, ratios {:.4}..{:.4}", ratios[9], ratios[0])))
}

/// `p(y | prefix)` by enumerating every continuation of `y`'s length and
/// normalizing joint probabilities built from per-step softmaxes.
fn enumerated_prob(m: &HostTransformerLM, prefix: &[usize], y: &[usize]) -> (f64, f64) {
    let v = m.vocab_size();
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..y.len() {
        seqs = seqs.into_iter().flat_map(|s| (0..v).map(move |t| [s.clone(), vec![t]].concat())).collect();
    }
    let mut total = 0.0;
    let mut target = 0.0;
    for cont in &seqs {
        let mut p = 1.0;
        for i in 0..cont.len() {
            let input = [prefix, &cont[..i]].concat();
            let logits = m.logits(&input).unwrap();
            let row = logits.row(input.len() - 1);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            p *= row[cont[i]].exp() / z;
        }
        total += p;
        if cont == y {
            target = p;
        }
    }
    (target / total, total)
}

fn loss_oracle() -> Check {
    let v = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let m = jitter(HostTransformerLM::new(tiny(v), 6)?, 0.5, &mut rng);
    let mut worst: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    for i in 0..LOSS_EXAMPLES {
        let kind = LossKind::ALL[i % 4];
        let ex = random_example(&mut rng, v, kind, 2);
        let mut lp = |y: &Option<Vec<usize>>| {
            y.as_ref().map(|y| {
                let (p, total) = enumerated_prob(&m, &ex.prefix, y);
                mass_err = mass_err.max((total - 1.0).abs());
                p.ln()
            })
        };
        let (a, b) = (lp(&ex.y_a), lp(&ex.y_b));
        let want = match kind {
            LossKind::NllGood => -a.unwrap(),
            LossKind::SuppressBad => b.unwrap(),
            LossKind::AbsBalance => (a.unwrap() - b.unwrap()).abs(),
            LossKind::PreferAOverB => b.unwrap() - a.unwrap(),
        };
        worst = worst.max((example_loss(&m, &ex)? - want).abs());
    }
    Ok((
        worst < LOSS_ORACLE_TOL,
        format!("{LOSS_EXAMPLES} examples over |V|={v}, max abs error {worst:.1e}, enumeration mass error {mass_err:.1e}"),
    ))
}

fn epoch_selection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut nonzero = 0;
    for i in 0..TRACE_COUNT {
        let epochs = rng.random_range(1..=10);
        let eps = BALL_EPSILONS[i % 3];
        let mut ratios = vec![1.0];
        for _ in 0..epochs {
            let r = match rng.random_range(0..4) {
                0 => 1.0 + eps,
                1 => 1.0 - rng.random_range(0.0..eps),
                _ => 1.0 + rng.random_range(0.0..3.0 * eps),
            };
            ratios.push(r);
        }
        let cap = if rng.random_bool(0.5) { Some(rng.random_range(0..=epochs)) } else { None };
        let mut want = 0;
        for e in (1..=epochs).rev() {
            if cap.is_none_or(|c| e <= c) && ratios[e] <= 1.0 + eps {
                want = e;
                break;
            }
        }
        let got = select_epoch_index(&ratios, eps, cap);
        if got != want {
            return Ok((false, format!("trace {i}: got {got}, scan gives {want}")));
        }
        nonzero += (want > 0) as usize;
    }
    Ok((true, format!("{TRACE_COUNT} traces agree with the scan ({nonzero} choose an edited epoch)")))
}

fn lora_noop_and_merge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1100);
    let v = 9;
    let host = jitter(HostTransformerLM::new(tiny(v), 7)?, 0.2, &mut rng);
    let bp = jitter(BackpackModel::new(tiny(v), 8)?, 0.2, &mut rng);
    let mut worst: f64 = 0.0;
    let mut check = |base: &dyn Fn(&LoraAdapters, &[usize]) -> (Tensor, Tensor, Tensor)| -> bool {
        for seed in 0..5 {
            let x = tokens(&mut rng, v, 1, 10);
            let mut ad = LoraAdapters::init(&host, 2, 2, seed).unwrap();
            let (plain, adapted, _) = base(&ad, &x);
            if !plain.bit_eq(&adapted) {
                return false;
            }
            for f in &mut ad.factors {
                f.q = Tensor::randn(f.q.shape(), 0.3, &mut rng);
            }
            let (_, adapted, merged) = base(&ad, &x);
            worst = worst.max(adapted.max_abs_diff(&merged).unwrap());
        }
        true
    };
    let host_ok = check(&|ad, x| {
        let a = AdaptedModel { base: &host, adapters: ad };
        (host.logits(x).unwrap(), a.logits(x).unwrap(), ad.merge(&host).unwrap().logits(x).unwrap())
    });
    let bp_ok = {
        let mut ok = true;
        for seed in 0..5 {
            let x = tokens(&mut rng, v, 1, 10);
            let mut ad = LoraAdapters::init(&bp, 2, 1, seed)?;
            ok &= AdaptedModel { base: &bp, adapters: &ad }.logits(&x)?.bit_eq(&bp.logits(&x)?);
            for f in &mut ad.factors {
                f.q = Tensor::randn(f.q.shape(), 0.3, &mut rng);
            }
            let a = AdaptedModel { base: &bp, adapters: &ad }.logits(&x)?;
            worst = worst.max(a.max_abs_diff(&ad.merge(&bp)?.logits(&x)?)?);
        }
        ok
    };
    Ok((
        host_ok && bp_ok && worst < MERGE_TOL,
        format!("zero adapters bit-exact: {}, merged vs adapter form max diff {worst:.1e}", host_ok && bp_ok),
    ))
}

struct DeskResult {
    lines: Vec<(usize, &'static str, bool, String)>,
}

fn desk_experiments(snaps: &mut Snapshots) -> anyhow::Result<DeskResult> {
    let dir = tempfile::tempdir()?;
    generate_synthetic_tasks(WORLD_SEED, &GenSizes::default())?.write(dir.path())?;
    let data = DataDir::load(dir.path())?;
    let (pre, held) = data.pretraining()?;
    let cfg = ModelConfig::default().with_vocab(data.vocab.len());

    let start = Instant::now();
    let bp = pretrain(
        BackpackModel::new(cfg.clone(), MODEL_SEED)?,
        &pre,
        &held,
        &PretrainConfig::for_kind(ModelKind::Backpack),
        MODEL_SEED,
    )?;
    let bp_time = start.elapsed();
    let start = Instant::now();
    let host = pretrain(
        HostTransformerLM::new(cfg, MODEL_SEED)?,
        &pre,
        &held,
        &PretrainConfig::for_kind(ModelKind::Host),
        MODEL_SEED,
    )?;
    let host_time = start.elapsed();

    let base = BaseModel::Backpack(bp.model.clone());
    let (val, test) = data.bundle_pair("fact_recall", base.config().max_len)?;
    let spec = SweepSpec::new(Method::Senses, ModelKind::Backpack, 0);
    let sweep = run_sweep(&base, "fact_recall", &val, &test, &data.corpora, &spec, &[SENSE_EPSILON])?;
    let ball = sweep.ball(SENSE_EPSILON).expect("swept radius");
    let baseline = sweep.baseline.as_ref().expect("baseline").test_success;
    let t = &ball.test;
    let worst_hn = t.runs.iter().map(|r| r.hard_negative_delta).fold(f64::NEG_INFINITY, f64::max);
    let gain = t.mean_success - baseline;
    let sense_pass = bp_time < PRETRAIN_BUDGET
        && t.runs.len() == spec.test_seeds
        && gain >= SENSE_GAIN_FLOOR
        && t.all_members
        && worst_hn <= HARD_NEG_CEIL;
    let sense_line = format!(
        "pretrain {:.0}s; test success {:.1}% ± {:.1} vs unedited {:.1}% over {} seeds (+{:.1}pp), all in ball: {}, max hard-negative delta {worst_hn:.3}",
        bp_time.as_secs_f64(),
        100.0 * t.mean_success,
        100.0 * t.std_of_mean,
        100.0 * baseline,
        t.runs.len(),
        100.0 * gain,
        t.all_members
    );

    let deltas: Vec<(u64, SenseDelta)> =
        t.runs.iter().filter_map(|r| r.delta.clone().map(|d| (r.seed, d))).collect();
    let g = &data.corpora.ball_ref;
    for (_, d) in &deltas {
        snaps.models.push(("desk".into(), Box::new(SenseEditedModel::new(&bp.model, d.clone())?.materialize()?)));
    }
    snaps.bases.insert("desk".into(), (corpus_nll(&bp.model, g)?.mean(), g.clone()));

    let (ens_pass, ens_line) = if deltas.len() == t.runs.len() && !deltas.is_empty() {
        let e = ensemble_runs(&host.model, &bp.model, &deltas, "fact_recall", &test, &data.corpora, ENSEMBLE_EPSILON, None)?;
        let gain = e.mean_success - e.host_success;
        (
            gain >= ENSEMBLE_GAIN_FLOOR && e.all_members,
            format!(
                "host pretrain {:.0}s; ensemble {:.1}% ± {:.1} vs host {:.1}% (+{:.1}pp), betas {:?}, all in ball: {}",
                host_time.as_secs_f64(),
                100.0 * e.mean_success,
                100.0 * e.std_of_mean,
                100.0 * e.host_success,
                100.0 * gain,
                e.runs.iter().map(|r| r.beta).collect::<Vec<_>>(),
                e.all_members
            ),
        )
    } else {
        (false, "no edited test runs to ensemble".into())
    };
    Ok(DeskResult {
        lines: vec![
            (9, "sense finetuning improves fact recall", sense_pass, sense_line),
            (10, "ensemble improves the host", ens_pass, ens_line),
        ],
    })
}

fn run_cli(bin: &Path, root: &Path, args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(bin).current_dir(root).args(args).output()?;
    anyhow::ensure!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn write(path: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn cli_pipeline(bin: &Path, root: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(root)?;
    let sizes = GenSizes {
        edit_entities: 2,
        eval_templates: 1,
        hard_negatives: 4,
        pretrain_sentences: 300,
        heldout_sequences: 10,
        reg_sequences: 12,
        ball_sequences: 12,
        ..GenSizes::default()
    };
    write(&root.join("sizes.json"), serde_json::to_value(&sizes)?)?;
    let mc = ModelConfig {
        max_len: 64,
        ..tiny(0)
    };
    let schedule = PretrainConfig {
        steps: 10,
        eval_every: 5,
        ..PretrainConfig::default()
    };
    for kind in ["backpack", "host"] {
        write(
            &root.join(format!("pre_{kind}.json")),
            serde_json::json!({"data": "data", "model": kind, "model_config": mc, "pretrain": schedule}),
        )?;
    }
    let mut edit = EditConfig::senses(5e-2, 0.5, 2, 10.0, 0);
    edit.epochs = 2;
    write(
        &root.join("edit.json"),
        serde_json::json!({"data": "data", "model": "bp/model", "bundle": "fact_recall_val", "edit": edit}),
    )?;
    write(
        &root.join("evaluate.json"),
        serde_json::json!({"data": "data", "model": "bp/model", "bundle": "fact_recall_test", "edited": "edit/snapshot"}),
    )?;
    write(
        &root.join("sweep.json"),
        serde_json::json!({"data": "data", "model": "bp/model", "task": "fact_recall", "method": "senses", "trial_count": 2, "test_seeds": 2}),
    )?;
    write(
        &root.join("ensemble.json"),
        serde_json::json!({"data": "data", "bundle": "fact_recall_test", "host": "host/model", "backpack": "bp/model", "sense_deltas": ["edit/snapshot"]}),
    )?;
    write(&root.join("report.json"), serde_json::json!({"sweeps": ["sweep"], "ensembles": ["ens"]}))?;
    let steps: [&[&str]; 8] = [
        &["gen-data", "--config", "sizes.json", "--seed", "4", "--out", "data"],
        &["pretrain", "--config", "pre_backpack.json", "--seed", "1", "--out", "bp"],
        &["pretrain", "--config", "pre_host.json", "--seed", "1", "--out", "host"],
        &["edit", "--config", "edit.json", "--ball", "1e-3", "--seed", "3", "--out", "edit"],
        &["evaluate", "--config", "evaluate.json", "--ball", "1e-3", "--out", "eval"],
        &["sweep", "--config", "sweep.json", "--ball", "1e-4", "--seed", "2", "--out", "sweep"],
        &["ensemble", "--config", "ensemble.json", "--ball", "1e-5", "--out", "ens"],
        &["report", "--config", "report.json", "--out", "report"],
    ];
    for s in steps {
        run_cli(bin, root, s)?;
    }
    Ok(())
}

fn tree(root: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Check {
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_canonedit"));
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli_pipeline(&bin, &a)?;
    cli_pipeline(&bin, &b)?;
    let (ta, tb) = (tree(&a)?, tree(&b)?);
    let manifests = ta.keys().filter(|p| p.ends_with("manifest.json")).count();
    let differing: Vec<_> = ta.iter().filter(|(p, bytes)| tb.get(*p) != Some(bytes)).map(|(p, _)| p.display().to_string()).collect();
    Ok((
        differing.is_empty() && ta.len() == tb.len() && manifests >= 7,
        format!("7 commands twice: {} files, {manifests} manifests, differing: {differing:?}", ta.len()),
    ))
}

fn record(out: &mut Vec<Outcome>, id: usize, name: &'static str, r: Check) {
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    out.push(Outcome { id, name, pass, detail });
}

fn main() {
    // Optional criterion ids to run, e.g. `-- 6 7`; all run by default.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    let mut out = Vec::new();
    let mut snaps = Snapshots::default();
    if want(1) {
        record(&mut out, 1, "autodiff matches finite differences", gradient_oracle());
    }
    if want(2) {
        record(&mut out, 2, "closed-form sense gradient", sense_gradient_closed_form());
    }
    let fx = edit_fixture().expect("fixture");
    if want(3) || want(4) {
        record(&mut out, 3, "sense edits are local", edit_locality(&fx, &mut snaps));
        more_snapshots(&fx, &mut snaps).expect("snapshots");
    }
    if want(5) {
        record(&mut out, 5, "ensemble identities and cache", ensemble_identities());
    }
    if want(6) {
        record(&mut out, 6, "beta calibration", calibration_correctness());
    }
    if want(7) {
        record(&mut out, 7, "losses match enumeration", loss_oracle());
    }
    if want(8) {
        record(&mut out, 8, "epoch selection", epoch_selection());
    }
    if want(11) {
        record(&mut out, 11, "lora no-op and merge", lora_noop_and_merge());
    }
    if want(12) {
        record(&mut out, 12, "cli determinism", determinism());
    }
    if want(9) || want(10) || want(4) {
        match desk_experiments(&mut snaps) {
            Ok(d) => {
                for (id, name, pass, detail) in d.lines {
                    out.push(Outcome { id, name, pass, detail });
                }
            }
            Err(e) => {
                record(&mut out, 9, "sense finetuning improves fact recall", Err(anyhow::anyhow!("{e:#}")));
                record(&mut out, 10, "ensemble improves the host", Err(anyhow::anyhow!("skipped after failure")));
            }
        }
    }
    if want(4) {
        record(&mut out, 4, "ball exactness and monotone membership", ball_exactness(&fx, &snaps));
    }
    out.retain(|o| want(o.id));

    out.sort_by_key(|o| o.id);
    println!();
    for o in &out {
        println!("{} [{:>2}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = out.iter().filter(|o| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed\n", out.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
