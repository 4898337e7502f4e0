use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coverlab::experiments::{self as ex, ExperimentReport, FChoice, Gate, Verdict};
use coverlab::fixtures::{good_fixture, round_trip, FixtureOptions};
use coverlab::interlacements::{Truncation, Window};
use coverlab::io::{load_config, write_trajectory, ArtifactWriter, RunConfig, RunManifest};
use coverlab::late::LnPolicy;
use coverlab::potential::{Constants, GreenTable};
use coverlab::walk::RngStream;

#[derive(Parser)]
#[command(name = "coverlab", version, about = "Cover times, late points and path surgery on the discrete torus")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Opts {
    /// JSON run config; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long = "N", global = true)]
    n: Option<u32>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long = "K", global = true)]
    k: Option<f64>,
    #[arg(long = "M", global = true)]
    m: Option<f64>,
    /// One or more comma-separated values.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Levels; for `interlace` these are multiples of g(0).
    #[arg(long, global = true, value_delimiter = ',')]
    u: Vec<f64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "budget-steps", global = true)]
    budget_steps: Option<u64>,
    #[arg(long, global = true, default_value = "coverlab-out")]
    out: PathBuf,
    /// `paper` (unclamped `(ln N)^4`), `clamped` or `clamped:<v>`.
    #[arg(long = "lN-policy", global = true)]
    ln_policy: Option<String>,
    /// Green table cache directory.
    #[arg(long, global = true, env = "COVERLAB_CACHE")]
    cache: Option<PathBuf>,
    /// Torus sizes for multi-size runs.
    #[arg(long = "Ns", global = true, value_delimiter = ',')]
    ns: Vec<u32>,
    /// Cube sides.
    #[arg(long = "R", global = true, value_delimiter = ',')]
    sides: Vec<u64>,
    /// Box separations for the decoupling run.
    #[arg(long, global = true, value_delimiter = ',')]
    sep: Vec<u32>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    fixtures: Option<usize>,
    /// Monte Carlo walks for the second Green method (0 skips it).
    #[arg(long = "mc-walks", global = true)]
    mc_walks: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Green function table and capacity identities.
    Green,
    /// Capacities of cubes.
    Capacity,
    /// Cover time statistics.
    Cover,
    /// Late point counts.
    LatePoints,
    /// Vacant set laws of random interlacements.
    Interlace,
    /// Cover level of cubes by interlacements.
    CoverLevel,
    /// Path surgery.
    Surgery {
        #[command(subcommand)]
        cmd: SurgeryCmd,
    },
    /// Run a named experiment.
    Experiment { id: String },
    /// Small-size run of every check.
    ValidateAll,
}

#[derive(Subcommand)]
enum SurgeryCmd {
    /// One fixture, with plan, transcript and trajectory dumps.
    Demo,
    /// Round trips over many fixtures.
    Roundtrip,
    /// Certified lower bound from natural walks.
    Certify,
}

const EXPERIMENTS: &[&str] = &[
    "cover-time",
    "late-points",
    "upward-deviation",
    "max-local-time",
    "interlacement-laws",
    "cover-level",
    "decoupling",
    "excursions",
    "potential",
    "surgery-roundtrip",
    "certify",
];

struct Ctx {
    opts: Opts,
    cfg: RunConfig,
    policy: LnPolicy,
}

impl Ctx {
    fn new(opts: Opts) -> Result<Ctx> {
        let mut cfg = match &opts.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(opts.d, cfg.d);
        set!(opts.n, cfg.n);
        set!(opts.trials, cfg.trials);
        set!(opts.seed, cfg.seed);
        set!(opts.budget_steps, cfg.budget_steps);
        set!(opts.gamma, cfg.surgery.gamma);
        set!(opts.delta, cfg.surgery.delta);
        set!(opts.eps, cfg.surgery.eps);
        set!(opts.k, cfg.surgery.k);
        set!(opts.m, cfg.surgery.m0);
        set!(opts.ln_policy.clone(), cfg.ln_policy);
        if let Some(&a) = opts.alpha.first() {
            cfg.alpha = Some(a);
        }
        cfg.validate()?;
        let policy = cfg.policy()?;
        Ok(Ctx { opts, cfg, policy })
    }

    fn green(&self) -> Result<GreenTable> {
        let (radius, domain) = if self.cfg.d == 3 { (32, 96) } else { (12, 40) };
        Ok(GreenTable::cached(self.cfg.d, radius, domain, 1e-12, self.opts.cache.as_deref())?)
    }

    fn ns(&self) -> Vec<u32> {
        if self.opts.ns.is_empty() {
            vec![self.cfg.n]
        } else {
            self.opts.ns.clone()
        }
    }

    fn sides(&self, default: &[u64]) -> Vec<u64> {
        if self.opts.sides.is_empty() {
            default.to_vec()
        } else {
            self.opts.sides.clone()
        }
    }

    fn levels(&self, default: &[f64]) -> Vec<f64> {
        if self.opts.u.is_empty() {
            default.to_vec()
        } else {
            self.opts.u.clone()
        }
    }
}

fn diag(name: &str, v: f64, lo: f64, hi: f64) -> Verdict {
    Verdict::band(name, Gate::Diagnostic, v, lo, hi)
}

fn hard(name: &str, v: f64, lo: f64, hi: f64) -> Verdict {
    Verdict::band(name, Gate::Hard, v, lo, hi)
}

fn run_experiment(ctx: &Ctx, id: &str) -> Result<ExperimentReport> {
    let c = &ctx.cfg;
    let seed = c.seed;
    let mut rep = match id {
        "cover-time" => {
            let g0 = ctx.green()?.g0();
            let mut r = ex::cover_time_stats(c.d, c.n, c.trials, g0, seed, c.budget_steps)?;
            r.push_verdict(diag("mean C_N / t_cov", r.get("mean_ratio")?, 0.85, 1.35));
            r.push_verdict(diag("KS distance to Gumbel", r.get("ks_gumbel")?, 0.0, 0.15));
            r.push_verdict(diag("budget exhausted fraction", r.get("exhausted")?, 0.0, 0.0));
            r
        }
        "late-points" => {
            let g0 = ctx.green()?.g0();
            let alphas = if ctx.opts.alpha.is_empty() { vec![0.5] } else { ctx.opts.alpha.clone() };
            let f = match ctx.opts.delta {
                Some(delta) => FChoice::Bulk(delta),
                None => FChoice::Torus,
            };
            let mut r = ex::late_point_stats(c.d, c.n, &alphas, f, c.trials, g0, seed)?;
            for a in &alphas {
                if *a > 0.0 {
                    r.push_verdict(diag(&format!("late ratio at alpha={a}"), r.get(&format!("ratio@{a}"))?, 0.7, 1.4));
                    r.push_verdict(diag(&format!("concentration at alpha={a}"), r.get(&format!("concentrated@{a}"))?, 0.8, 1.0));
                }
            }
            r
        }
        "upward-deviation" => {
            let g0 = ctx.green()?.g0();
            let gamma = ctx.opts.gamma.unwrap_or(1.15);
            let ns = if ctx.opts.ns.is_empty() { vec![8, 12, 16] } else { ctx.opts.ns.clone() };
            let mut r = ex::upward_deviation(c.d, &ns, gamma, c.trials, g0, seed)?;
            let target = r.get("target")?;
            if let Ok(s) = r.get("slope") {
                let lo = target.min(target * 1.5).min(target * 0.5);
                let hi = target.max(target * 1.5).max(target * 0.5);
                r.push_verdict(diag("log-log slope", s, lo, hi));
            }
            r
        }
        "max-local-time" => {
            let pot = ex::potential_checks(&ctx.green()?, ctx.opts.mc_walks.unwrap_or(100_000), &[], seed)?;
            let escape = pot.get("escape_mc")?;
            let steps = ctx.opts.steps.unwrap_or(1_000_000);
            let mut r = ex::max_local_time_stats(c.d, steps, c.trials, escape, seed)?;
            r.push_verdict(diag("relative error to the local time law", r.get("relative_error")?, 0.0, 0.3));
            r
        }
        "interlacement-laws" => {
            let green = ctx.green()?;
            let side = ctx.sides(&[3])[0];
            let w = Window::cube(c.d, side, &green, Truncation::default())?;
            let multiples = ctx.levels(&[0.5, 1.0, 2.0]);
            let mut r = ex::interlacement_laws(&green, &w, &multiples, c.trials, seed)?;
            for m in &multiples {
                for k in ["one", "two"] {
                    let p = r.get(&format!("{k}@{m}"))?;
                    let law = r.get(&format!("{k}_law@{m}"))?;
                    let tol = 3.0 * r.get(&format!("{k}_se@{m}"))? + 0.005;
                    r.push_verdict(diag(&format!("{k}-point vacancy at {m} g(0)"), p, law - tol, law + tol));
                }
                let fl = r.get(&format!("fkg_floor@{m}"))?;
                let se = r.get(&format!("fkg_se@{m}"))?;
                r.push_verdict(diag(&format!("FKG floor at {m} g(0)"), r.get(&format!("fkg@{m}"))?, fl - 2.0 * se, 1.0));
            }
            r
        }
        "cover-level" => {
            let sides = ctx.sides(&[6, 9, 12]);
            let mut r = ex::cover_level_curve(&ctx.green()?, &sides, c.trials, Truncation::default(), seed)?;
            let last = *sides.last().expect("nonempty");
            r.push_verdict(diag(&format!("cover probability at R={last}"), r.get(&format!("p@{last}"))?, 0.25, 0.5));
            r
        }
        "decoupling" => {
            let gamma = ctx.opts.gamma.unwrap_or(0.5);
            let sep = if ctx.opts.sep.is_empty() { vec![c.n / 4, c.n / 2] } else { ctx.opts.sep.clone() };
            let u = ctx.levels(&[1.0])[0];
            ex::decoupling_diagnostic(c.n, gamma, &sep, u, c.trials, &ctx.green()?, seed)?
        }
        "excursions" => {
            let sides = ctx.sides(&[3, 7]);
            if sides.len() != 2 {
                bail!("--R needs two sides a,a' for excursions");
            }
            let u = ctx.levels(&[0.5])[0];
            ex::excursion_counts(c.d, c.n, sides[0], sides[1], u, c.trials, seed)?
        }
        "potential" => {
            let sides = ctx.sides(&[3, 5, 9, 15]);
            let mut r = ex::potential_checks(&ctx.green()?, ctx.opts.mc_walks.unwrap_or(200_000), &sides, seed)?;
            r.push_verdict(hard("g(0) - g(e1) - 1", r.get("identity_defect")?, 0.0, 1e-9));
            if let Ok(gap) = r.get("method_gap") {
                r.push_verdict(hard("Monte Carlo g(0) - g(e1) - 1", r.get("identity_defect_mc")?, 0.0, 1e-9));
                r.push_verdict(diag("two-method g(0) gap", gap, 0.0, 1e-3));
            }
            r.push_verdict(hard("cap({0}) g(0) - 1", r.get("cap_point_error")?, 0.0, 1e-6));
            r.push_verdict(hard("cap({0,e1}) (g(0)+g(e1))/2 - 1", r.get("cap_pair_error")?, 0.0, 1e-6));
            let ratios: Vec<f64> = sides.iter().map(|s| r.get(&format!("cap_ratio@{s}"))).collect::<coverlab::Result<_>>()?;
            if ratios.len() > 1 {
                let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
                r.push_verdict(hard("cap(Q(0,R)) / R^(d-2) spread", spread, 1.0, 4.0));
            }
            r
        }
        "surgery-roundtrip" => ex::surgery_round_trips(&ctx.ns(), ctx.opts.fixtures.unwrap_or(100), ctx.policy, seed)?,
        "certify" => {
            let constants = Constants::from_table(&ctx.green()?)?;
            let mut r = ex::certified_lower_bound(c.n, &c.surgery, &constants, ctx.policy, c.trials, seed)?;
            r.push_verdict(hard("surgery failures on good paths", r.get("surgery_failures")?, 0.0, 0.0));
            r
        }
        other => bail!("unknown experiment `{other}`; known: {}", EXPERIMENTS.join(", ")),
    };
    if rep.green_digest.is_none() && !matches!(id, "surgery-roundtrip" | "excursions") {
        rep.green_digest = Some(ctx.green()?.digest());
    }
    Ok(rep)
}

fn emit(ctx: &Ctx, command: &str, rep: &ExperimentReport, started: Instant) -> Result<bool> {
    let w = ArtifactWriter::new(&ctx.opts.out)?;
    let m = RunManifest::for_report(command, rep, started.elapsed().as_secs_f64(), Some(ctx.cfg.budget_steps));
    let paths = w.write_report(rep, &m)?;
    for (k, v) in &rep.summary {
        println!("{k} = {v}");
    }
    for v in &rep.verdicts {
        println!("{}", v.line());
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(rep.passed())
}

fn surgery_demo(ctx: &Ctx) -> Result<bool> {
    let started = Instant::now();
    let opts = FixtureOptions { policy: ctx.policy, ..FixtureOptions::new(ctx.cfg.n) };
    let fx = good_fixture(&opts, &Constants::watson(), ctx.cfg.seed, 0)?;
    let rt = round_trip(&fx, &mut RngStream::new(ctx.cfg.seed, "psi", 0))?;
    let w = ArtifactWriter::new(&ctx.opts.out)?;
    std::fs::write(w.dir().join("surgery-plan.json"), rt.surgery.plan.to_json()?)?;
    std::fs::write(w.dir().join("recovery-transcript.json"), rt.transcript.to_json()?)?;
    dump(&w.dir().join("omega.traj"), &fx.omega)?;
    dump(&w.dir().join("psi-sample.traj"), &rt.sample)?;
    let mut rep = ExperimentReport {
        id: "surgery-demo".into(),
        version: coverlab::experiments::REPORT_VERSION,
        seed: ctx.cfg.seed,
        config: serde_json::json!({ "N": ctx.cfg.n, "l_policy": ctx.policy.to_string(), "params": fx.params }),
        green_digest: None,
        columns: vec![],
        rows: vec![],
        summary: Default::default(),
        verdicts: vec![],
    };
    let p = &rt.surgery.plan;
    rep.summary.insert("late".into(), p.late.len() as f64);
    rep.summary.insert("loops".into(), p.stage_one.len() as f64);
    rep.summary.insert("added_steps".into(), (rt.surgery.omega_2n.len() - fx.omega.len()) as f64);
    rep.summary.insert("j_budget".into(), p.j_budget);
    rep.push_verdict(hard("exact round trip", rt.exact(&fx.omega) as u8 as f64, 1.0, 1.0));
    emit(ctx, "surgery demo", &rep, started)
}

fn dump(path: &Path, t: &coverlab::walk::Trajectory) -> Result<()> {
    write_trajectory(std::io::BufWriter::new(std::fs::File::create(path)?), t)?;
    Ok(())
}

fn validate_all(ctx: &Ctx) -> Result<bool> {
    let seed = ctx.cfg.seed;
    let small = |n: u32, trials: usize| {
        let mut c = ctx.cfg.clone();
        c.n = n;
        c.trials = trials;
        Ctx { opts: ctx.opts.clone(), cfg: c, policy: ctx.policy }
    };
    let mut all = true;
    let plan: Vec<(&str, Ctx)> = vec![
        ("potential", {
            let mut c = small(16, 1);
            c.opts.mc_walks = Some(50_000);
            c
        }),
        ("surgery-roundtrip", {
            let mut c = small(16, 1);
            c.opts.fixtures = Some(50);
            c
        }),
        ("cover-time", small(8, 50)),
        ("late-points", small(12, 20)),
        ("interlacement-laws", small(16, 2000)),
        ("cover-level", {
            let mut c = small(16, 200);
            c.opts.sides = vec![6];
            c
        }),
    ];
    for (id, c) in plan {
        let started = Instant::now();
        println!("== {id} (seed {seed})");
        let rep = run_experiment(&c, id)?;
        all &= emit(&c, "validate-all", &rep, started)?;
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx::new(cli.opts)?;
    let started = Instant::now();
    let (name, id) = match &cli.cmd {
        Cmd::Green => ("green", "potential"),
        Cmd::Capacity => ("capacity", "potential"),
        Cmd::Cover => ("cover", "cover-time"),
        Cmd::LatePoints => ("late-points", "late-points"),
        Cmd::Interlace => ("interlace", "interlacement-laws"),
        Cmd::CoverLevel => ("cover-level", "cover-level"),
        Cmd::Surgery { cmd: SurgeryCmd::Demo } => return surgery_demo(&ctx),
        Cmd::Surgery { cmd: SurgeryCmd::Roundtrip } => ("surgery roundtrip", "surgery-roundtrip"),
        Cmd::Surgery { cmd: SurgeryCmd::Certify } => ("surgery certify", "certify"),
        Cmd::Experiment { id } => ("experiment", id.as_str()),
        Cmd::ValidateAll => return validate_all(&ctx),
    };
    let rep = run_experiment(&ctx, id)?;
    emit(&ctx, name, &rep, started)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("hard gate failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
