//! Subcommand bodies. Each returns the process exit code on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resexp_core::alignlab::{covariance_diagnostics, alignment_bound};
use resexp_core::certify::{self, CertificateReport, ComplexityTerms, PopulationRecord, Relation, Verdict};
use resexp_core::data::{mix_seed, Dataset, SyntheticTask, TaskSplits};
use resexp_core::harness::{self, Cell, ExpansionOutcome, InsertionPolicy};
use resexp_core::jumpboard::{self, Choice, MarginReport};
use resexp_core::netmodel::{evaluate_loss, NetworkSpec, NetworkState};
use resexp_core::scalelab::{self, reliability_constraint};
use resexp_core::stats;
use resexp_core::train::{self, SgdConfig};

use crate::config::{self, NetworkConfig, SplitName, SweepKind, TaskConfig};
use crate::error::{exit, CliError, Result};
use crate::io::{ensure_dir, fmt_f64, sha256_hex, write_csv, ModelFile, RunManifest};
use crate::record::Record;
use crate::runner::{self, Journal};

pub const SEED_ENV: &str = "RESEXP_SEED";

/// Flags shared by every subcommand.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: usize,
    pub quiet: bool,
}

impl RunContext {
    /// `--seed` beats `RESEXP_SEED`, which beats the config file.
    pub fn seed(&self, config_seed: u64) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(std::env::VarError::NotPresent) => Ok(config_seed),
            Err(e) => Err(CliError::Invalid(format!("{SEED_ENV}: {e}"))),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }
}

fn write_rec(ctx: &RunContext, name: &str, rec: &Record, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let p = ctx.path(name);
    rec.write(&p)?;
    outputs.push(p);
    Ok(())
}

fn write_table(
    ctx: &RunContext,
    name: &str,
    header: &[&str],
    rows: &[Vec<String>],
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let p = ctx.path(name);
    write_csv(&p, header, rows)?;
    outputs.push(p);
    Ok(())
}

fn write_model(ctx: &RunContext, name: &str, m: &ModelFile, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let p = ctx.path(name);
    m.write(&p)?;
    outputs.push(p);
    Ok(())
}

struct Base {
    task: SyntheticTask,
    spec: NetworkSpec,
    state: NetworkState,
    splits: TaskSplits,
    /// Present when the base was trained by this run.
    trained: Option<train::TrainOutcome>,
}

/// Loads the base model named in the config, or trains one.
fn prepare_base(
    config_path: &Path,
    model: Option<&Path>,
    task_cfg: &TaskConfig,
    network: &NetworkConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<Base> {
    if let Some(m) = model {
        let mf = ModelFile::read(&config::relative_to(config_path, m))?;
        let task = mf.task.clone().unwrap_or_else(|| task_cfg.with_seed(seed));
        let mut spec = mf.spec;
        if let Some(l) = network.insertion_layer {
            spec.insertion_layer = l;
            spec.validate()?;
        }
        let splits = task.generate()?;
        return Ok(Base { task, spec, state: mf.state, splits, trained: None });
    }
    let task = task_cfg.with_seed(seed);
    task.validate()?;
    let (depth, width) = network.shape()?;
    let spec = network.spec(&task, depth, width)?;
    let splits = task.generate()?;
    let out = train_network(&spec, network, &splits.train, sgd, seed)?;
    Ok(Base { task, spec, state: out.state.clone(), splits, trained: Some(out) })
}

fn train_network(
    spec: &NetworkSpec,
    network: &NetworkConfig,
    train_set: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<train::TrainOutcome> {
    let mut init = train::initial_state(spec, seed)?;
    network.adjust_init(spec, &mut init);
    Ok(train::train_from(spec, &init, train_set, sgd, seed)?)
}

fn trace_rows(out: &train::TrainOutcome) -> Vec<Vec<String>> {
    out.loss_trace.iter().map(|&(s, l)| vec![s.to_string(), fmt_f64(l)]).collect()
}

pub fn train(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::TrainFile>(config_path)?;
    let seed = ctx.seed(file.seed)?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("train", Some((config_path, &bytes)), vec![seed], ctx.workers);
    let base = prepare_base(config_path, None, &file.task, &file.network, &file.sgd, seed)?;
    let out = base.trained.as_ref().expect("freshly trained");

    let mut outputs = Vec::new();
    write_model(ctx, "model.json", &ModelFile::new(&base.spec, &base.state, Some(&base.task), seed), &mut outputs)?;
    write_table(ctx, "train_trace.csv", &["step", "train_loss"], &trace_rows(out), &mut outputs)?;
    let test_loss = evaluate_loss(&base.spec, &base.state, &base.splits.test)?;
    let mut rec = Record::new();
    rec.uint("seed", seed)
        .uint("depth", base.spec.depth as u64)
        .uint("width", base.spec.width as u64)
        .float("initial_train_loss", out.initial_loss())
        .float("final_train_loss", out.final_loss())
        .uint("best_step", out.best_step as u64)
        .float("test_loss", test_loss);
    write_rec(ctx, "train_summary.txt", &rec, &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&rec.render());
    Ok(exit::SUCCESS)
}

fn choice_str(c: Choice) -> &'static str {
    match c {
        Choice::Alg => "alg",
        Choice::Jump => "jump",
    }
}

const POP_PREFIX: &str = "pop_";

/// The machine record of one expansion, sufficient to re-certify.
pub fn expansion_record(o: &ExpansionOutcome, spec: &NetworkSpec, seed: u64, m: usize, k: usize) -> Record {
    let mut r = Record::new();
    r.uint("seed", seed)
        .uint("depth", spec.depth as u64)
        .uint("width", spec.width as u64)
        .uint("insertion_layer", spec.insertion_layer as u64)
        .uint("m_train", m as u64)
        .uint("k_test", k as u64)
        .flag("degenerate_direction", o.degenerate_direction)
        .flag("degenerate_step", o.degenerate_step)
        .float("direction_norm", o.direction_norm)
        .float("eta", o.eta)
        .text("selected", choice_str(o.selection.choice))
        .float("predicted_test_margin", o.predicted_test_margin)
        .float("mu_norm_sq", o.stats.mu_norm_sq)
        .float("g_norm_sq", o.stats.g_norm_sq)
        .float("mu_dot_g", o.stats.mu_dot_g);
    for (key, v) in o.margins.entries() {
        r.float(key, v);
    }
    if let Some(p) = &o.population {
        for (key, v) in population_entries(p) {
            r.float(&format!("{POP_PREFIX}{key}"), v);
        }
    }
    let t = ComplexityTerms::from(&o.constants);
    for (key, v) in terms_entries(&t) {
        r.float(key, v);
    }
    certificate_entries(&mut r, &o.certificate);
    r
}

fn population_entries(p: &PopulationRecord) -> [(&'static str, f64); 7] {
    [
        ("r_old", p.r_old),
        ("r_jump", p.r_jump),
        ("r_new", p.r_new),
        ("l_train_jump", p.l_train_jump),
        ("l_train_new", p.l_train_new),
        ("l_test_old", p.l_test_old),
        ("l_test_new", p.l_test_new),
    ]
}

fn terms_entries(t: &ComplexityTerms) -> [(&'static str, f64); 6] {
    [
        ("b_ell", t.b_ell),
        ("l_ell", t.l_ell),
        ("d", t.d),
        ("b_bar", t.b_bar),
        ("depth_term", t.depth),
        ("lambda_max", t.lambda_max),
    ]
}

fn certificate_entries(r: &mut Record, c: &CertificateReport) {
    r.float("delta", c.delta)
        .float("eps_m", c.eps_m)
        .float("eps_k", c.eps_k)
        .float("hoeffding_term", c.hoeffding_term)
        .float("route_a_lhs", c.route_a_lhs)
        .float("route_a_rhs", c.route_a_rhs)
        .float("route_b_lhs", c.route_b_lhs)
        .float("route_b_rhs", c.route_b_rhs)
        .float("pop_lhs", c.pop_lhs)
        .float("pop_rhs", c.pop_rhs)
        .text("verdict_a", c.verdict_a.as_str())
        .text("verdict_b", c.verdict_b.as_str())
        .text("verdict_pop", c.verdict_pop.as_str())
        .flag("audit_holds", c.audit_holds());
}

/// Recomputes the certificate from a saved expansion record.
pub fn recertify(rec: &Record, delta: Option<f64>) -> std::result::Result<CertificateReport, String> {
    let need = |k: &str| rec.get_f64(k).ok_or_else(|| format!("missing or non-numeric `{k}`"));
    let margins = MarginReport::from_entries(|k| rec.get_f64(k))?;
    let population = if rec.get(&format!("{POP_PREFIX}r_old")).is_some() {
        let p = |k: &str| need(&format!("{POP_PREFIX}{k}"));
        Some(PopulationRecord {
            r_old: p("r_old")?,
            r_jump: p("r_jump")?,
            r_new: p("r_new")?,
            l_train_jump: p("l_train_jump")?,
            l_train_new: p("l_train_new")?,
            l_test_old: p("l_test_old")?,
            l_test_new: p("l_test_new")?,
        })
    } else {
        None
    };
    let terms = ComplexityTerms {
        b_ell: need("b_ell")?,
        l_ell: need("l_ell")?,
        d: need("d")?,
        b_bar: need("b_bar")?,
        depth: need("depth_term")?,
        lambda_max: need("lambda_max")?,
    };
    let m = rec.get_u64("m_train").ok_or("missing `m_train`")? as f64;
    let k = rec.get_u64("k_test").ok_or("missing `k_test`")? as f64;
    let delta = match delta {
        Some(d) => d,
        None => need("delta")?,
    };
    if !(delta > 0.0 && delta < 1.0) {
        return Err(format!("delta must be in (0, 1), got {delta}"));
    }
    if !(m > 0.0 && k > 0.0) {
        return Err("sample sizes must be positive".into());
    }
    let eps = |n: f64| certify::eps_gen_norm(&terms, n, delta, 1.0 / n.sqrt());
    Ok(certify::certify(&margins, population.as_ref(), eps(m), eps(k), delta, k, terms.b_ell))
}

fn relation_str(r: Relation) -> &'static str {
    match r {
        Relation::Le => "<=",
        Relation::Eq => "=",
    }
}

fn audit_rows(c: &CertificateReport) -> Vec<Vec<String>> {
    c.audit_chain
        .iter()
        .map(|s| {
            vec![
                s.route.clone(),
                s.label.clone(),
                fmt_f64(s.lhs),
                relation_str(s.relation).to_string(),
                fmt_f64(s.rhs),
                s.holds.to_string(),
            ]
        })
        .collect()
}

const AUDIT_HEADER: [&str; 6] = ["route", "step", "lhs", "relation", "rhs", "holds"];

/// Human-readable inequality chains and verdicts.
pub fn chain_table(c: &CertificateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "eps_M = {:.6e}   eps_K = {:.6e}   delta = {}", c.eps_m, c.eps_k, c.delta);
    for route in ["A", "B"] {
        let _ = writeln!(s, "\nRoute {route}");
        for step in c.audit_chain.iter().filter(|x| x.route == route) {
            let _ = writeln!(
                s,
                "  {:<72} {:>14.6e} {:>2} {:<14.6e} {}",
                step.label,
                step.lhs,
                relation_str(step.relation),
                step.rhs,
                if step.holds { "ok" } else { "FAILS" }
            );
        }
    }
    let line = |s: &mut String, name: &str, lhs: f64, rhs: f64, v: Verdict| {
        let _ = writeln!(s, "  {name:<11} gain {lhs:>14.6e} vs cost {rhs:<14.6e} -> {}", v.as_str());
    };
    let _ = writeln!(s, "\nVerdicts");
    line(&mut s, "route A", c.route_a_lhs, c.route_a_rhs, c.verdict_a);
    line(&mut s, "route B", c.route_b_lhs, c.route_b_rhs, c.verdict_b);
    line(&mut s, "population", c.pop_lhs, c.pop_rhs, c.verdict_pop);
    let _ = writeln!(s, "  hoeffding failure term {:.6e}", c.hoeffding_term);
    s
}

pub fn expand(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::ExpandFile>(config_path)?;
    let seed = ctx.seed(file.seed)?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("expand", Some((config_path, &bytes)), vec![seed], ctx.workers);
    let base = prepare_base(config_path, file.model.as_deref(), &file.task, &file.network, &file.sgd, seed)?;
    let mut outputs = Vec::new();
    if let Some(out) = &base.trained {
        write_model(ctx, "base_model.json", &ModelFile::new(&base.spec, &base.state, Some(&base.task), seed), &mut outputs)?;
        write_table(ctx, "train_trace.csv", &["step", "train_loss"], &trace_rows(out), &mut outputs)?;
    }
    let o = harness::expansion_pipeline(&base.spec, &base.splits, &base.state, &file.expansion, mix_seed(seed, 0xe0))?;
    let rec = expansion_record(&o, &base.spec, seed, base.splits.train.len(), base.splits.test.len());
    write_rec(ctx, "expansion.txt", &rec, &mut outputs)?;
    write_table(ctx, "audit.csv", &AUDIT_HEADER, &audit_rows(&o.certificate), &mut outputs)?;
    write_model(ctx, "jump_model.json", &ModelFile::new(&base.spec, &o.jump, Some(&base.task), seed), &mut outputs)?;
    write_model(ctx, "new_model.json", &ModelFile::new(&base.spec, &o.new, Some(&base.task), seed), &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&chain_table(&o.certificate));
    if o.degenerate_direction {
        eprintln!("no descent direction at layer {}: deepest-model regime", base.spec.insertion_layer);
        return Ok(exit::DEGENERATE);
    }
    Ok(exit::SUCCESS)
}

pub fn certify_cmd(input: &Path, delta: Option<f64>, ctx: &RunContext) -> Result<i32> {
    let bytes = std::fs::read(input).map_err(|e| CliError::Config {
        path: input.to_path_buf(),
        message: format!("cannot read: {e}"),
    })?;
    let rec = Record::read(input)?;
    let c = recertify(&rec, delta).map_err(|message| CliError::Format {
        what: "expansion record",
        path: input.to_path_buf(),
        message,
    })?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("certify", Some((input, &bytes)), rec.get_u64("seed").into_iter().collect(), ctx.workers);
    let mut outputs = Vec::new();
    let mut out = Record::new();
    certificate_entries(&mut out, &c);
    write_rec(ctx, "certificate.txt", &out, &mut outputs)?;
    write_table(ctx, "audit.csv", &AUDIT_HEADER, &audit_rows(&c), &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&chain_table(&c));
    Ok(exit::SUCCESS)
}

pub const ALIGN_HEADER: [&str; 15] = [
    "N",
    "M",
    "K",
    "mu_bar_norm_sq",
    "tau_sq",
    "c_sigma",
    "empirical_rate",
    "wilson_upper",
    "bound",
    "train_term",
    "test_term",
    "mixed_term",
    "noise",
    "failures",
    "trials",
];

pub fn align(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::AlignFile>(config_path)?;
    let seed = ctx.seed(file.seed)?;
    let cells = file.align.cells(seed)?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("align", Some((config_path, &bytes)), vec![seed], ctx.workers);
    let configs: Vec<_> = cells.iter().map(|(c, _)| c.clone()).collect();
    let results = runner::run_alignment(&configs, &runner::pool(ctx.workers)?)?;

    let mut rows = Vec::new();
    let (mut bounded, mut violations) = (0u64, 0u64);
    for ((cfg, noise), r) in cells.iter().zip(&results) {
        let t = alignment_bound(cfg).ok();
        let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
        if let Some(b) = t {
            if b.total < 0.9 {
                bounded += 1;
                if r.wilson_ci_upper > b.total {
                    violations += 1;
                }
            }
        }
        rows.push(vec![
            cfg.n.to_string(),
            cfg.m.to_string(),
            cfg.k.to_string(),
            fmt_f64(cfg.mu_bar_norm_sq()),
            fmt_f64(cfg.tau_sq),
            fmt_f64(cfg.c_sigma),
            fmt_f64(r.empirical_fail_rate),
            fmt_f64(r.wilson_ci_upper),
            opt(t.map(|b| b.total)),
            opt(t.map(|b| b.train_term)),
            opt(t.map(|b| b.test_term)),
            opt(t.map(|b| b.mixed_term)),
            noise.label(),
            r.failures.to_string(),
            r.trials.to_string(),
        ]);
    }
    let mut outputs = Vec::new();
    write_table(ctx, "align.csv", &ALIGN_HEADER, &rows, &mut outputs)?;

    let mut rec = Record::new();
    rec.uint("cells", cells.len() as u64)
        .uint("cells_bound_below_0_9", bounded)
        .uint("dominance_violations", violations);
    // Slope of log empirical rate against log N within each (M, K, alpha, noise) group.
    let mut groups: Vec<String> = Vec::new();
    for (cfg, noise) in &cells {
        let key = group_key(cfg.m, cfg.k, cfg.mu_bar.first().copied().unwrap_or(0.0), &noise.label());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for key in groups {
        let (xs, ys): (Vec<f64>, Vec<f64>) = cells
            .iter()
            .zip(&results)
            .filter(|((c, n), r)| {
                group_key(c.m, c.k, c.mu_bar.first().copied().unwrap_or(0.0), &n.label()) == key
                    && r.empirical_fail_rate > 0.0
            })
            .map(|((c, _), r)| (c.n as f64, r.empirical_fail_rate))
            .unzip();
        if let Ok(slope) = stats::log_log_slope(&xs, &ys) {
            rec.float(&format!("slope_vs_n.{key}"), slope);
        }
    }
    write_rec(ctx, "align_summary.txt", &rec, &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&rec.render());
    Ok(exit::SUCCESS)
}

fn group_key(m: usize, k: usize, alpha: f64, noise: &str) -> String {
    format!("m{m}.k{k}.alpha{alpha:?}.{noise}")
}

pub fn scaling(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::ScalingFile>(config_path)?;
    let s = &file.scaling;
    let params = s.params()?;
    let grid = scalelab::log_grid(s.p_min, s.p_max, s.points);
    let curve = scalelab::coupled_risk_curve(&grid, &s.model, &params, s.steps_per_depth)?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("scaling", Some((config_path, &bytes)), vec![], ctx.workers);

    let mut header = vec!["P", "N", "L", "k", "delta", "envelope"];
    if s.reliability.is_some() {
        header.extend(["reliability_lhs", "reliability_rhs", "reliability_ok"]);
    }
    let mut dominated = true;
    let mut rows = Vec::new();
    for p in &curve.points {
        if let Some(e) = p.envelope {
            dominated &= p.delta <= e * (1.0 + 1e-12);
        }
        let mut row = vec![
            fmt_f64(p.p),
            fmt_f64(p.n),
            fmt_f64(p.l),
            p.k.to_string(),
            fmt_f64(p.delta),
            p.envelope.map_or_else(String::new, fmt_f64),
        ];
        if let Some(r) = &s.reliability {
            let rel = reliability_constraint(p.k as f64, p.n, r.m, r.k, s.beta, r.delta, r.constant);
            row.extend([fmt_f64(rel.lhs), fmt_f64(rel.rhs), rel.satisfied.to_string()]);
        }
        rows.push(row);
    }
    let mut outputs = Vec::new();
    write_table(ctx, "scaling.csv", &header, &rows, &mut outputs)?;
    let mut rec = Record::new();
    rec.uint("points", curve.points.len() as u64)
        .float("fitted_exponent", curve.fitted_exponent)
        .float("analytic_exponent", curve.analytic_exponent)
        .float("relative_error", curve.relative_error())
        .flag("envelope_dominates", dominated);
    write_rec(ctx, "scaling_summary.txt", &rec, &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&rec.render());
    Ok(exit::SUCCESS)
}

pub fn covariance(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::CovarianceFile>(config_path)?;
    let seed = ctx.seed(file.seed)?;
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("covariance", Some((config_path, &bytes)), vec![seed], ctx.workers);
    let base = prepare_base(config_path, file.model.as_deref(), &file.task, &file.network, &file.sgd, seed)?;
    let opts = &file.covariance;
    let data = match opts.split {
        SplitName::Train => &base.splits.train,
        SplitName::Test => &base.splits.test,
        SplitName::Proxy => &base.splits.proxy,
    };
    let (_, q) = jumpboard::activation_gradients(&base.spec, &base.state, data)?;
    let d = covariance_diagnostics(&q, opts.pair_samples, opts.gershgorin_rows, mix_seed(seed, 0xc0))?;

    let mut outputs = Vec::new();
    let hist: Vec<Vec<String>> = d
        .histogram
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| vec![fmt_f64(d.histogram.edges[i]), fmt_f64(d.histogram.edges[i + 1]), c.to_string()])
        .collect();
    write_table(ctx, "histogram.csv", &["bin_lo", "bin_hi", "count"], &hist, &mut outputs)?;
    let off: Vec<Vec<String>> = d
        .offdiag
        .iter()
        .map(|e| vec![e.j.to_string(), e.k.to_string(), fmt_f64(e.value), fmt_f64(e.noise)])
        .collect();
    write_table(ctx, "offdiag.csv", &["j", "k", "covariance", "noise"], &off, &mut outputs)?;
    let diag: Vec<Vec<String>> =
        d.sigma_diag.iter().enumerate().map(|(j, v)| vec![j.to_string(), fmt_f64(*v)]).collect();
    write_table(ctx, "sigma_diag.csv", &["j", "variance"], &diag, &mut outputs)?;

    let mut rec = Record::new();
    rec.uint("samples", q.rows() as u64)
        .uint("coordinates", q.cols() as u64)
        .uint("insertion_layer", base.spec.insertion_layer as u64)
        .uint("pairs", d.offdiag.len() as u64)
        .float("offdiag_to_diag_ratio", d.ratio)
        .float("gershgorin_lambda_max", d.gershgorin_lambda_max)
        .uint("gershgorin_rows", d.gershgorin_rows.len() as u64)
        .float("bands", opts.bands)
        .float("within_band_fraction", d.fraction_within_bands(opts.bands))
        .float("sigma_diag_max", d.sigma_diag.iter().copied().fold(0.0, f64::max))
        .float("sigma_diag_mean", stats::mean(&d.sigma_diag));
    write_rec(ctx, "covariance_summary.txt", &rec, &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&rec.render());
    Ok(exit::SUCCESS)
}

/// One row of an expansion sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
    pub layer: usize,
    pub degenerate_direction: bool,
    pub eta: f64,
    pub delta_train_s: f64,
    pub delta_r_test: f64,
    pub delta_erm: f64,
    pub l_test_old: f64,
    pub l_test_new: f64,
    pub eps_m: f64,
    pub eps_k: f64,
    pub route_b_lhs: f64,
    pub route_b_rhs: f64,
    pub verdict_a: Verdict,
    pub verdict_b: Verdict,
    pub verdict_pop: Verdict,
    pub audit_holds: bool,
}

impl ExpansionRow {
    pub const HEADER: [&'static str; 20] = [
        "depth",
        "width",
        "seed",
        "layer",
        "degenerate_direction",
        "eta",
        "delta_train_s",
        "delta_r_test",
        "delta_erm",
        "l_test_old",
        "l_test_new",
        "test_improved",
        "eps_m",
        "eps_k",
        "route_b_lhs",
        "route_b_rhs",
        "verdict_a",
        "verdict_b",
        "verdict_pop",
        "audit_holds",
    ];

    pub fn test_improved(&self) -> bool {
        self.l_test_new < self.l_test_old
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.depth.to_string(),
            self.width.to_string(),
            self.seed.to_string(),
            self.layer.to_string(),
            self.degenerate_direction.to_string(),
            fmt_f64(self.eta),
            fmt_f64(self.delta_train_s),
            fmt_f64(self.delta_r_test),
            fmt_f64(self.delta_erm),
            fmt_f64(self.l_test_old),
            fmt_f64(self.l_test_new),
            self.test_improved().to_string(),
            fmt_f64(self.eps_m),
            fmt_f64(self.eps_k),
            fmt_f64(self.route_b_lhs),
            fmt_f64(self.route_b_rhs),
            self.verdict_a.as_str().into(),
            self.verdict_b.as_str().into(),
            self.verdict_pop.as_str().into(),
            self.audit_holds.to_string(),
        ]
    }
}

fn cell_splits(task: &TaskConfig, base_seed: u64, cell: Cell) -> Result<(SyntheticTask, TaskSplits, u64)> {
    let cell_seed = mix_seed(base_seed, cell.seed);
    let t = task.with_seed(cell_seed);
    let splits = t.generate()?;
    Ok((t, splits, cell_seed))
}

pub fn sweep(config_path: &Path, ctx: &RunContext) -> Result<i32> {
    let (file, bytes) = config::load::<config::SweepFile>(config_path)?;
    let seed = ctx.seed(file.seed)?;
    let cfg = file.sweep_config()?;
    file.task.with_seed(seed).validate()?;
    let cells = cfg.cells();
    ensure_dir(&ctx.out)?;
    let manifest = RunManifest::start("sweep", Some((config_path, &bytes)), vec![seed], ctx.workers);
    let pool = runner::pool(ctx.workers)?;
    let digest = {
        let mut b = bytes.clone();
        b.extend_from_slice(format!("\nseed={seed}").as_bytes());
        sha256_hex(&b)
    };
    let journal = ctx.path("sweep.journal");
    let mut outputs = Vec::new();
    let spec_for = |t: &SyntheticTask, c: Cell| file.network.spec(t, c.depth, c.width);

    let summary = match file.sweep.kind {
        SweepKind::GradientDecay => {
            let j = Journal::open(&journal, &digest, cells.len())?;
            let mut rows = j.run(cells.len(), &pool, |i| {
                let c = cells[i];
                let (t, splits, cell_seed) = cell_splits(&file.task, seed, c)?;
                let spec = spec_for(&t, c)?;
                let mut row = harness::gradient_decay_cell(&spec, &splits, Cell { seed: cell_seed, ..c }, &cfg.sgd)?;
                row.seed = c.seed;
                Ok(vec![row])
            })?;
            harness::normalize_by_shallowest(&mut rows);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.depth.to_string(),
                        r.width.to_string(),
                        r.seed.to_string(),
                        fmt_f64(r.mu_norm),
                        fmt_f64(r.normalized),
                    ]
                })
                .collect();
            write_table(ctx, "gradient_decay.csv", &["depth", "width", "seed", "mu_norm", "normalized"], &table, &mut outputs)?;
            let profile = harness::depth_profile(&rows);
            let mut rec = Record::new();
            let (xs, ys): (Vec<f64>, Vec<f64>) = profile.iter().map(|&(d, m)| (d as f64, m)).unzip();
            rec.uint("rows", rows.len() as u64).float("spearman_depth_mu", stats::spearman(&xs, &ys));
            for (d, m) in &profile {
                rec.float(&format!("mean_mu_norm.depth{d}"), *m);
            }
            rec
        }
        SweepKind::JointScaling => {
            let j = Journal::open(&journal, &digest, cells.len())?;
            let rows = j.run(cells.len(), &pool, |i| {
                let c = cells[i];
                let (t, splits, cell_seed) = cell_splits(&file.task, seed, c)?;
                let spec = spec_for(&t, c)?;
                let mut row = harness::joint_scaling_cell(&spec, &splits, Cell { seed: cell_seed, ..c }, &cfg.sgd)?;
                row.seed = c.seed;
                Ok(vec![row])
            })?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.depth.to_string(),
                        r.width.to_string(),
                        r.seed.to_string(),
                        fmt_f64(r.train_loss),
                        fmt_f64(r.test_loss),
                    ]
                })
                .collect();
            write_table(ctx, "joint_scaling.csv", &["depth", "width", "seed", "train_loss", "test_loss"], &table, &mut outputs)?;
            let agg = harness::aggregate_joint(&rows);
            let table: Vec<Vec<String>> = agg
                .iter()
                .map(|c| {
                    vec![
                        c.depth.to_string(),
                        c.width.to_string(),
                        c.seeds.to_string(),
                        fmt_f64(c.train_mean),
                        fmt_f64(c.train_std),
                        fmt_f64(c.test_mean),
                        fmt_f64(c.test_std),
                    ]
                })
                .collect();
            write_table(
                ctx,
                "joint_scaling_cells.csv",
                &["depth", "width", "seeds", "train_mean", "train_std", "test_mean", "test_std"],
                &table,
                &mut outputs,
            )?;
            let mut rec = Record::new();
            rec.uint("rows", rows.len() as u64).uint("cells", agg.len() as u64);
            rec
        }
        SweepKind::Expansion => {
            let j = Journal::open(&journal, &digest, cells.len())?;
            let rows = j.run(cells.len(), &pool, |i| {
                let c = cells[i];
                let (t, splits, cell_seed) = cell_splits(&file.task, seed, c)?;
                let spec = spec_for(&t, c)?;
                let base = train_network(&spec, &file.network, &splits.train, &cfg.sgd, cell_seed)?.state;
                let layers: Vec<usize> = match cfg.insertion {
                    InsertionPolicy::LastLayer => vec![spec.insertion_layer],
                    InsertionPolicy::ScanAll => (0..=c.depth).collect(),
                };
                let mut out = Vec::with_capacity(layers.len());
                for l in layers {
                    let s = NetworkSpec { insertion_layer: l, ..spec.clone() };
                    let o = harness::expansion_pipeline(&s, &splits, &base, &file.expansion, mix_seed(cell_seed, l as u64))?;
                    let cert = &o.certificate;
                    out.push(ExpansionRow {
                        depth: c.depth,
                        width: c.width,
                        seed: c.seed,
                        layer: l,
                        degenerate_direction: o.degenerate_direction,
                        eta: o.eta,
                        delta_train_s: o.margins.delta_train_s,
                        delta_r_test: o.margins.delta_r_test,
                        delta_erm: o.margins.delta_erm,
                        l_test_old: o.margins.l_test_old,
                        l_test_new: o.margins.l_test_new,
                        eps_m: cert.eps_m,
                        eps_k: cert.eps_k,
                        route_b_lhs: cert.route_b_lhs,
                        route_b_rhs: cert.route_b_rhs,
                        verdict_a: cert.verdict_a,
                        verdict_b: cert.verdict_b,
                        verdict_pop: cert.verdict_pop,
                        audit_holds: cert.audit_holds(),
                    });
                }
                Ok(out)
            })?;
            let table: Vec<Vec<String>> = rows.iter().map(ExpansionRow::fields).collect();
            write_table(ctx, "expansion_sweep.csv", &ExpansionRow::HEADER, &table, &mut outputs)?;
            let strict = rows.iter().filter(|r| r.verdict_b == Verdict::CertifiedStrict).count();
            let unmatched =
                rows.iter().filter(|r| r.verdict_b == Verdict::CertifiedStrict && !r.test_improved()).count();
            let mut rec = Record::new();
            rec.uint("rows", rows.len() as u64)
                .uint("degenerate", rows.iter().filter(|r| r.degenerate_direction).count() as u64)
                .uint("route_b_strict", strict as u64)
                .uint("strict_without_test_gain", unmatched as u64)
                .uint("audit_failures", rows.iter().filter(|r| !r.audit_holds).count() as u64)
                .uint("test_improved", rows.iter().filter(|r| r.test_improved()).count() as u64);
            rec
        }
    };
    write_rec(ctx, "sweep_summary.txt", &summary, &mut outputs)?;
    manifest.finish(&ctx.out, outputs)?;
    ctx.say(&summary.render());
    Ok(exit::SUCCESS)
}
