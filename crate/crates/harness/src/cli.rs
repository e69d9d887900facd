//! `tshf <command> [--config FILE] [--key value ...] [command flags]`
//!
//! Any config key may be given as a flag and overrides the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tshf_core::sampler::{generate, trace_csv, CfgSchedule, ScheduleKind};
use tshf_core::vocab::{dataset::format_record, decode_attributes, to_pgm, Caption};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, KEYS};
use crate::error::{HarnessError, Result};
use crate::experiments::{self, SweepResult};
use crate::{data, selftest, trainer};

pub const USAGE: &str = "\
usage: tshf <command> [--config FILE] [--<key> <value> ...] [flags]

commands:
  gen-data          render a dataset file             [--out PATH]
  train             train, writing loss.csv and checkpoint.tshf to out_dir   [--resume]
  train-staged      three-stage desk schedule under out_dir/stage{1,2,3}
  sample            decode grids from a checkpoint    --checkpoint PATH [--caption TEXT] [--n N] [--pgm]
  sweep-window      shuffle window sweep              [--s_list 1,2,4]
  sweep-variant     design variant sweep              [--variants a,b,...]
  probe-redundancy  visual rank probe at s=1          [--r_list none,1,8,32]
  sweep-cfg         guidance accuracy table           --checkpoint PATH [--alphas 1,3] [--schedules constant] [--samples N]
  flops             FLOP and decode-step table        [--s_list 1,2,4]
  canary            overfit one batch, save, and sample it back
  selftest          run the invariant suite
  keys              list config keys with defaults

TSHF_THREADS caps gradient worker threads.";

struct Args {
    command: String,
    cfg: RunConfig,
    flags: Vec<(String, Option<String>)>,
}

/// Flags that belong to a command rather than the config, and whether they
/// take a value.
const COMMAND_FLAGS: &[(&str, bool)] = &[
    ("resume", false),
    ("pgm", false),
    ("out", true),
    ("checkpoint", true),
    ("caption", true),
    ("n", true),
    ("s_list", true),
    ("variants", true),
    ("r_list", true),
    ("alphas", true),
    ("schedules", true),
    ("samples", true),
];

fn parse(argv: &[String]) -> Result<Args> {
    let command = argv.first().cloned().ok_or_else(|| HarnessError::Usage(USAGE.into()))?;
    let mut config_file: Option<String> = None;
    let mut overrides = Vec::new();
    let mut flags = Vec::new();
    let mut i = 1;
    while i < argv.len() {
        let raw = argv[i]
            .strip_prefix("--")
            .ok_or_else(|| HarnessError::Usage(format!("unexpected argument {:?}\n{USAGE}", argv[i])))?;
        let (name, inline) = match raw.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (raw.to_string(), None),
        };
        let takes_value = match COMMAND_FLAGS.iter().find(|(f, _)| *f == name) {
            Some(&(_, v)) => v,
            None => true,
        };
        let value = if !takes_value {
            if inline.is_some() {
                return Err(HarnessError::Usage(format!("--{name} takes no value")));
            }
            None
        } else if let Some(v) = inline {
            Some(v)
        } else {
            i += 1;
            Some(
                argv.get(i)
                    .cloned()
                    .ok_or_else(|| HarnessError::Usage(format!("--{name} needs a value")))?,
            )
        };
        if name == "config" {
            config_file = value;
        } else if COMMAND_FLAGS.iter().any(|(f, _)| *f == name) {
            flags.push((name, value));
        } else if KEYS.contains(&name.as_str()) {
            overrides.push((name, value.expect("config keys take values")));
        } else {
            return Err(HarnessError::Config {
                key: name,
                msg: "unknown flag or config key".into(),
            });
        }
        i += 1;
    }
    let mut cfg = match &config_file {
        Some(f) => RunConfig::load(Path::new(f))?,
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    Ok(Args { command, cfg, flags })
}

impl Args {
    fn flag(&self, name: &str) -> Option<&str> {
        self.flags.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v.as_deref().unwrap_or(""))
    }

    fn has(&self, name: &str) -> bool {
        self.flag(name).is_some()
    }

    fn list<T>(&self, name: &str, default: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
        self.flag(name)
            .unwrap_or(default)
            .split(',')
            .map(|s| {
                item(s.trim()).ok_or_else(|| HarnessError::Usage(format!("--{name}: cannot parse {s:?}")))
            })
            .collect()
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        for (n, _) in &self.flags {
            if !allowed.contains(&n.as_str()) {
                return Err(HarnessError::Usage(format!("--{n} does not apply to {}", self.command)));
            }
        }
        Ok(())
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self
            .flag("checkpoint")
            .ok_or_else(|| HarnessError::Usage(format!("{} needs --checkpoint PATH", self.command)))?;
        Checkpoint::load(Path::new(path))
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn print_sweep(results: &[SweepResult], out: &Path) {
    println!("{:<20} {:>12} {:>12} {:>10} {:>10} {:>9}", "key", "final_loss", "ce_visual", "s/step", "params", "vis_pos");
    for r in results {
        println!(
            "{:<20} {:>12.5} {:>12.5} {:>10.3} {:>10} {:>9}",
            r.key, r.final_total, r.final_ce_visual, r.secs_per_step, r.params, r.visual_positions
        );
    }
    println!("summary: {}", out.join("summary.csv").display());
}

/// Runs one CLI invocation.
pub fn run(argv: &[String]) -> Result<()> {
    let args = parse(argv)?;
    let cfg = &args.cfg;
    match args.command.as_str() {
        "gen-data" => {
            args.only(&["out"])?;
            cfg.validate()?;
            let out = match args.flag("out") {
                Some(p) => PathBuf::from(p),
                None if !cfg.dataset.is_empty() => PathBuf::from(&cfg.dataset),
                None => Path::new(&cfg.out_dir).join("data.txt"),
            };
            let examples = data::generate(cfg)?;
            data::write(&out, cfg, &examples)?;
            println!("wrote {} examples to {}", examples.len(), out.display());
        }
        "train" => {
            args.only(&["resume"])?;
            let outcome = trainer::train(cfg, args.has("resume"))?;
            println!(
                "step {}: final-window loss {:.5} ({:.3} s/step); {}",
                outcome.state.step,
                outcome.final_mean(|m| m.total),
                outcome.secs_per_step(),
                Path::new(&cfg.out_dir).display()
            );
        }
        "train-staged" => {
            args.only(&[])?;
            let stages = trainer::desk_stages(cfg);
            let (outcome, transfers) = trainer::staged_train(&stages)?;
            for (k, t) in transfers.iter().enumerate() {
                println!(
                    "stage {} <- stage {}: {} copied, {} re-initialized {:?}, {} new {:?}",
                    k + 2,
                    k + 1,
                    t.copied.len(),
                    t.reinitialized.len(),
                    t.reinitialized,
                    t.fresh.len(),
                    t.fresh
                );
            }
            println!("final-window loss {:.5}", outcome.final_mean(|m| m.total));
        }
        "sample" => {
            args.only(&["checkpoint", "caption", "n", "pgm"])?;
            let ck = args.checkpoint()?;
            let mut run_cfg = ck.config()?;
            for (k, v) in argv_overrides(argv) {
                run_cfg.set(&k, &v)?;
            }
            let model = ck.restore(&run_cfg)?.model;
            let captions: Vec<Caption> = match args.flag("caption") {
                Some(text) => vec![text.parse().map_err(|e: tshf_core::Error| HarnessError::Usage(e.to_string()))?],
                None => data::held_out_captions(),
            };
            let n: usize = args
                .flag("n")
                .map(|v| v.parse().map_err(|_| HarnessError::Usage(format!("--n: cannot parse {v:?}"))))
                .transpose()?
                .unwrap_or(1);
            let schedule = run_cfg.schedule();
            let opts = run_cfg.decode_opts();
            let dir = Path::new(&run_cfg.out_dir).join("samples");
            let mut grids = String::new();
            let (mut hits, mut total) = (0, 0);
            for (ci, caption) in captions.iter().enumerate() {
                for k in 0..n {
                    let seed = tshf_core::Rng::new(run_cfg.seed).fork2(ci as u64, k as u64).next_u64();
                    let g = generate(&model, caption, &schedule, &opts, seed)?;
                    let (ok, conf) = experiments::matches(&g.grid, caption, &model)?;
                    let decoded = decode_attributes(&g.grid, &model.cfg.vocab)?;
                    println!("{caption:<40} -> {:<40} confidence {conf:.3} {}", decoded.caption.to_string(), if ok { "ok" } else { "miss" });
                    hits += ok as usize;
                    total += 1;
                    writeln!(grids, "{}", format_record(caption, &g.grid)).expect("string write");
                    write(&dir.join(format!("trace_{ci}_{k}.csv")), trace_csv(&g.trace))?;
                    if args.has("pgm") {
                        write(&dir.join(format!("sample_{ci}_{k}.pgm")), to_pgm(&g.grid, &model.cfg.vocab, 8))?;
                    }
                }
            }
            write(&dir.join("grids.txt"), grids)?;
            println!("accuracy {:.4} ({hits}/{total}); outputs in {}", hits as f64 / total as f64, dir.display());
        }
        "sweep-window" => {
            args.only(&["s_list"])?;
            let s_list = args.list("s_list", "1,2,4", |s| s.parse().ok())?;
            let points = experiments::window_points(cfg, &s_list)?;
            let results = experiments::run_sweep(Path::new(&cfg.out_dir), &points)?;
            print_sweep(&results, Path::new(&cfg.out_dir));
        }
        "sweep-variant" => {
            args.only(&["variants"])?;
            let default = experiments::VARIANTS.join(",");
            let names = args.list("variants", &default, |s| Some(s.to_string()))?;
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let points = experiments::variant_points(cfg, &names)?;
            let results = experiments::run_sweep(Path::new(&cfg.out_dir), &points)?;
            print_sweep(&results, Path::new(&cfg.out_dir));
        }
        "probe-redundancy" => {
            args.only(&["r_list"])?;
            let r_list = args.list("r_list", "none,1,8,32", |s| match s {
                "none" => Some(None),
                _ => s.parse().ok().map(Some),
            })?;
            let points = experiments::probe_points(cfg, &r_list)?;
            let results = experiments::run_sweep(Path::new(&cfg.out_dir), &points)?;
            print_sweep(&results, Path::new(&cfg.out_dir));
            let mut ranks = String::from("key,bound,tail_max\n");
            for r in &results {
                let check = experiments::probe_rank(&r.outcome.state.model)?;
                println!("{}: singular values past index {} peak at {:.3e}", r.key, check.bound, check.tail_max());
                writeln!(ranks, "{},{},{}", r.key, check.bound, check.tail_max()).expect("string write");
            }
            write(&Path::new(&cfg.out_dir).join("rank.csv"), ranks)?;
        }
        "sweep-cfg" => {
            args.only(&["checkpoint", "alphas", "schedules", "samples"])?;
            let ck = args.checkpoint()?;
            let mut run_cfg = ck.config()?;
            for (k, v) in argv_overrides(argv) {
                run_cfg.set(&k, &v)?;
            }
            let model = ck.restore(&run_cfg)?.model;
            let alphas = args.list("alphas", "1,3,7.5", |s| s.parse().ok())?;
            let kinds = args.list("schedules", "constant", ScheduleKind::parse)?;
            let samples: usize = args
                .flag("samples")
                .map(|v| v.parse().map_err(|_| HarnessError::Usage(format!("--samples: cannot parse {v:?}"))))
                .transpose()?
                .unwrap_or(200);
            let rows = experiments::run_cfg_sweep(&model, &alphas, &kinds, samples, run_cfg.seed, &run_cfg.decode_opts())?;
            let csv = experiments::cfg_csv(&rows);
            print!("{csv}");
            write(&Path::new(&run_cfg.out_dir).join("cfg_sweep.csv"), csv)?;
        }
        "flops" => {
            args.only(&["s_list"])?;
            let s_list = args.list("s_list", "1,2,4", |s| s.parse().ok())?;
            let mut rows = experiments::flops_rows("desk", &cfg.model_config()?, &s_list)?;
            rows.extend(experiments::flops_rows("full", &experiments::full_scale()?, &s_list)?);
            let csv = experiments::flops_csv(&rows);
            print!("{csv}");
            write(&Path::new(&cfg.out_dir).join("flops.csv"), csv)?;
        }
        "canary" => {
            args.only(&[])?;
            let ccfg = experiments::canary_config(cfg);
            let (state, report) = experiments::run_canary(&ccfg)?;
            let acc = experiments::reproduction_accuracy(
                &state.model,
                &report.batch,
                4,
                &CfgSchedule::new(ScheduleKind::Constant, 1.0),
                &ccfg.decode_opts(),
                ccfg.seed,
            )?;
            println!(
                "loss {:.4} -> {:.4} ({:.1}% of initial), decreasing in {:.1}% of steps, batch reproduction accuracy {:.3}; {}",
                report.initial_loss(),
                report.final_loss(),
                100.0 * report.final_loss() / report.initial_loss(),
                100.0 * report.decreasing_fraction(),
                acc,
                Path::new(&ccfg.out_dir).join(trainer::CHECKPOINT_FILE).display()
            );
        }
        "selftest" => {
            args.only(&[])?;
            let results = selftest::run_all();
            for r in &results {
                println!("{} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(HarnessError::Runtime(format!("{failed} selftest checks failed")));
            }
        }
        "keys" => {
            args.only(&[])?;
            print!("{}", cfg.echo());
        }
        "help" | "--help" | "-h" => println!("{USAGE}"),
        other => return Err(HarnessError::Usage(format!("unknown command {other:?}\n{USAGE}"))),
    }
    Ok(())
}

/// Config-key flags in argv order, for commands whose base config comes
/// from a checkpoint.
fn argv_overrides(argv: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut i = 1;
    while i < argv.len() {
        if let Some(raw) = argv[i].strip_prefix("--") {
            let (name, inline) = match raw.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (raw, None),
            };
            let takes = COMMAND_FLAGS.iter().find(|(f, _)| *f == name).is_none_or(|&(_, v)| v);
            let value = if takes && inline.is_none() {
                i += 1;
                argv.get(i).cloned()
            } else {
                inline
            };
            if KEYS.contains(&name) {
                if let Some(v) = value {
                    out.push((name.to_string(), v));
                }
            }
        }
        i += 1;
    }
    out
}
