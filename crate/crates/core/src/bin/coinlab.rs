use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coinlab::config::Config;
use coinlab::disambiguate::{prompt_choice, ChoiceManifest, ChoiceSource, HypothesisChoice};
use coinlab::episode::{simulate_episode, Policy};
use coinlab::extrapolate::{HypothesisPair, LabeledSet, UnlabeledSet};
use coinlab::harness::{BaselinePolicy, EvalReport, FourAgentReport, PathFollower};
use coinlab::levelgen::{generate_level, CoinMode};
use coinlab::obs::frame_pgm;
use coinlab::pipeline::{self, ArtifactHash, RunManifest, StageRecord};
use coinlab::ppo::{NetPolicy, RewardSource, TrainingLog};

#[derive(Parser)]
#[command(name = "coinlab", version, about = "Goal-misgeneralisation laboratory")]
struct Cli {
    /// Master seed (level seed for `gen` and `play`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one level as MGL text.
    Gen {
        #[arg(long, default_value = "train")]
        mode: CoinMode,
    },
    /// Train the standard agent on the training distribution.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Collect unlabeled shifted-distribution observations.
    Explore {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<u32>,
    },
    /// Collect labeled training transitions with a trained policy.
    Collect {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        neg_per_pos: Option<usize>,
    },
    /// Train the diversified pair of reward heads.
    Extrapolate {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        lambda_mi: Option<f64>,
    },
    /// Export indicative frames and record the one-bit hypothesis choice.
    Disambiguate {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        bit: Option<u8>,
    },
    /// Fine-tune a policy on the shifted distribution with a learned reward.
    Finetune {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        /// Choice manifest written by `disambiguate`.
        #[arg(long, conflicts_with = "prudent", required_unless_present = "prudent")]
        choice: Option<PathBuf>,
        /// Use the average of both heads instead of a chosen one.
        #[arg(long)]
        prudent: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate one policy and write its report as JSON.
    Eval {
        #[command(flatten)]
        agent: AgentArg,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "test")]
        mode: CoinMode,
        #[arg(long)]
        n_levels: Option<usize>,
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Combine four evaluation reports into the comparison table.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        standard: PathBuf,
        #[arg(long)]
        prudent: PathBuf,
        #[arg(long)]
        ace: PathBuf,
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Render one episode as numbered PGM frames plus an action log.
    Play {
        #[command(flatten)]
        agent: AgentArg,
        #[arg(long, default_value = "test")]
        mode: CoinMode,
        #[arg(long, default_value_t = coinlab::env::MAX_STEPS)]
        max_steps: u32,
    },
    /// Misgeneralisation verdict for one policy.
    Detect {
        #[command(flatten)]
        agent: AgentArg,
    },
}

#[derive(Args)]
struct AgentArg {
    /// Checkpoint path, or one of: baseline, baseline-cyclic, coin-seeker, runner.
    #[arg(long)]
    policy: String,
}

impl AgentArg {
    fn load(&self) -> Result<(Box<dyn Policy>, Vec<ArtifactHash>)> {
        Ok(match self.policy.as_str() {
            "baseline" => (Box::new(BaselinePolicy::new(false)), vec![]),
            "baseline-cyclic" => (Box::new(BaselinePolicy::new(true)), vec![]),
            "coin-seeker" => (Box::new(PathFollower::coin_seeker()), vec![]),
            "runner" => (Box::new(PathFollower::right_runner()), vec![]),
            path => {
                let p = Path::new(path);
                let net = pipeline::load_policy(p)?;
                let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (Box::new(NetPolicy::new(net, label)), vec![hash(p)?])
            }
        })
    }
}

/// Failure of an acceptance gate (exit 2) rather than of the contract.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct GateFailure(String);

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<GateFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn hash(path: &Path) -> Result<ArtifactHash> {
    Ok(ArtifactHash::of(path)?)
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("missing input: {}", path.display());
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// `out` with its extension replaced by `suffix`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

struct Ctx<'a> {
    cfg: Config,
    out: Option<PathBuf>,
    argv: &'a [String],
}

impl Ctx<'_> {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
    }

    /// Records the stage in `manifest.json` beside the output file or directory.
    fn record(&self, stage: &str, inputs: Vec<ArtifactHash>, outputs: &[PathBuf], choice: Option<ChoiceManifest>) -> Result<()> {
        let out = self.out()?;
        let path = out.parent().map(Path::to_path_buf).unwrap_or_default().join("manifest.json");
        let mut manifest = RunManifest::load_or_default(&path)?;
        manifest.record(StageRecord {
            stage: stage.to_string(),
            argv: self.argv[1..].to_vec(),
            seed: self.cfg.seed,
            inputs,
            outputs: outputs.iter().map(|p| hash(p)).collect::<Result<_>>()?,
            config: self.cfg.clone(),
            choice,
        });
        manifest.save(&path)?;
        Ok(())
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut ctx = Ctx {
        cfg,
        out: cli.out,
        argv,
    };
    match cli.command {
        Command::Gen { mode } => {
            let level = generate_level(&ctx.cfg.distribution(mode), ctx.cfg.seed)?;
            let out = ctx.out()?.to_path_buf();
            write(&out, level.to_mgl())?;
            ctx.record("gen", vec![], &[out], None)
        }
        Command::Train { steps } => {
            if let Some(s) = steps {
                ctx.cfg.train.steps = s;
            }
            let out = ctx.out()?.to_path_buf();
            let (policy, log) = pipeline::train_standard(&ctx.cfg)?;
            pipeline::save_policy(&policy, &out, serde_json::json!({ "stage": "train", "steps": ctx.cfg.train.steps }))?;
            let log_path = sibling(&out, "train.csv");
            write(&log_path, log.to_csv())?;
            report_log(&log);
            ctx.record("train", vec![], &[out.clone(), checkpoint_payload(&out), log_path], None)
        }
        Command::Explore { episodes, steps } => {
            if let Some(e) = episodes {
                ctx.cfg.explore.episodes = e;
            }
            if let Some(s) = steps {
                ctx.cfg.explore.steps_per_episode = s;
            }
            let out = ctx.out()?.to_path_buf();
            let set = pipeline::explore(&ctx.cfg)?;
            set.save_jsonl(&out)?;
            println!("unlabeled observations: {}", set.records.len());
            ctx.record("explore", vec![], &[out], None)
        }
        Command::Collect {
            policy,
            episodes,
            neg_per_pos,
        } => {
            if let Some(e) = episodes {
                ctx.cfg.collect.episodes = e;
            }
            if let Some(n) = neg_per_pos {
                ctx.cfg.collect.neg_per_pos = n;
            }
            require_input(&policy)?;
            let out = ctx.out()?.to_path_buf();
            let net = pipeline::load_policy(&policy)?;
            let set = pipeline::collect(&ctx.cfg, &net)?;
            set.save_jsonl(&out)?;
            println!("labeled: {} positives, {} negatives", set.positives(), set.negatives());
            ctx.record("collect", vec![hash(&policy)?], &[out], None)
        }
        Command::Extrapolate {
            labeled,
            unlabeled,
            lambda_mi,
        } => {
            if let Some(l) = lambda_mi {
                ctx.cfg.extrapolate.lambda_mi = l;
            }
            require_input(&labeled)?;
            require_input(&unlabeled)?;
            let out = ctx.out()?.to_path_buf();
            let lab = LabeledSet::load_jsonl(&labeled, ctx.cfg.collect.neg_per_pos)?;
            let unl = UnlabeledSet::load_jsonl(&unlabeled)?;
            let pair = pipeline::extrapolate(&ctx.cfg, &lab, &unl)?;
            pair.save(&out)?;
            let r = &pair.report;
            println!(
                "holdout accuracy {:.4} / {:.4}, unlabeled disagreement {:.4}",
                r.holdout_accuracy[0], r.holdout_accuracy[1], r.unlabeled_disagreement
            );
            if !r.disagreement_ok() {
                eprintln!(
                    "warning: unlabeled disagreement {:.4} is below {}",
                    r.unlabeled_disagreement, r.min_disagreement
                );
            }
            ctx.record(
                "extrapolate",
                vec![hash(&labeled)?, hash(&unlabeled)?],
                &[out.clone(), checkpoint_payload(&out)],
                None,
            )?;
            pipeline::check_pair(&pair).map_err(|e| anyhow::Error::new(GateFailure(e.to_string())))
        }
        Command::Disambiguate { pair, unlabeled, k, bit } => {
            if let Some(k) = k {
                ctx.cfg.disambiguate.k = k;
            }
            if bit.is_some() {
                ctx.cfg.disambiguate.bit = bit;
            }
            ctx.cfg.validate()?;
            require_input(&pair)?;
            require_input(&unlabeled)?;
            let dir = ctx.out()?.to_path_buf();
            let hp = HypothesisPair::load(&pair)?;
            let unl = UnlabeledSet::load_jsonl(&unlabeled)?;
            let panel = coinlab::disambiguate::indicative_frames(&hp, &unl, ctx.cfg.disambiguate.k)?;
            let images = panel.export(&dir)?;
            let choice = match ctx.cfg.disambiguate.bit {
                Some(b) => HypothesisChoice::new(b, ChoiceSource::Config)?,
                None => {
                    let stdin = io::stdin();
                    let mut input = stdin.lock();
                    let mut stdout = io::stdout();
                    let c = prompt_choice(&images, &mut input, &mut stdout)?;
                    stdout.flush()?;
                    c
                }
            };
            let timestamp = ctx.cfg.disambiguate.timestamp.unwrap_or_else(now);
            let (source, manifest) = coinlab::disambiguate::select_hypothesis(&panel, choice, timestamp);
            let choice_path = dir.join("choice.json");
            manifest.save(&choice_path)?;
            println!("reward source: {}", serde_json::to_string(&source)?);
            let mut outputs = images;
            outputs.push(choice_path);
            ctx.record(
                "disambiguate",
                vec![hash(&pair)?, hash(&unlabeled)?],
                &outputs,
                Some(manifest),
            )
        }
        Command::Finetune {
            policy,
            pair,
            choice,
            prudent,
            steps,
        } => {
            if let Some(s) = steps {
                ctx.cfg.finetune.steps = s;
            }
            require_input(&policy)?;
            require_input(&pair)?;
            let mut inputs = vec![hash(&policy)?, hash(&pair)?];
            let source = if prudent {
                RewardSource::Prudent
            } else {
                let path = choice.expect("clap enforces --choice without --prudent");
                require_input(&path)?;
                inputs.push(hash(&path)?);
                ChoiceManifest::load(&path)?.reward_source
            };
            let out = ctx.out()?.to_path_buf();
            let init = pipeline::load_policy(&policy)?;
            let hp = HypothesisPair::load(&pair)?;
            let (net, log) = pipeline::finetune(&ctx.cfg, &init, &hp, source)?;
            pipeline::save_policy(
                &net,
                &out,
                serde_json::json!({ "stage": "finetune", "reward_source": source, "steps": ctx.cfg.finetune.steps }),
            )?;
            let log_path = sibling(&out, "finetune.csv");
            write(&log_path, log.to_csv())?;
            report_log(&log);
            ctx.record("finetune", inputs, &[out.clone(), checkpoint_payload(&out), log_path], None)
        }
        Command::Eval {
            agent,
            label,
            mode,
            n_levels,
            seed_base,
        } => {
            match mode {
                CoinMode::TestRandom => {
                    if let Some(n) = n_levels {
                        ctx.cfg.eval.n_levels = n;
                    }
                    if let Some(b) = seed_base {
                        ctx.cfg.eval.seed_base = b;
                    }
                }
                CoinMode::TrainRight => {
                    if let Some(n) = n_levels {
                        ctx.cfg.eval.train_n_levels = n;
                    }
                    if let Some(b) = seed_base {
                        ctx.cfg.eval.train_seed_base = b;
                    }
                }
            }
            let out = ctx.out()?.to_path_buf();
            let (mut policy, inputs) = agent.load()?;
            let mut report = match mode {
                CoinMode::TestRandom => pipeline::eval_shifted(&ctx.cfg, policy.as_mut())?,
                CoinMode::TrainRight => pipeline::eval_train(&ctx.cfg, policy.as_mut())?,
            };
            if let Some(l) = label {
                report.policy = l;
            }
            write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "{}: coin rate {:.4}, stuck {:.4}, passed coin {:.4} over {} levels",
                report.policy, report.coin_rate, report.right_wall_stuck_rate, report.passed_coin_rate, report.n_levels
            );
            ctx.record("eval", inputs, &[out], None)
        }
        Command::Report {
            baseline,
            standard,
            prudent,
            ace,
            plot_data,
        } => {
            let paths = [baseline, standard, prudent, ace];
            let mut rows = Vec::new();
            for p in &paths {
                require_input(p)?;
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let row: EvalReport =
                    serde_json::from_str(&text).with_context(|| format!("{} is not an evaluation report", p.display()))?;
                rows.push(row);
            }
            if rows.iter().any(|r| r.seeds != rows[0].seeds || r.mode != rows[0].mode) {
                bail!("evaluation reports were not produced on shared seeds");
            }
            let report = FourAgentReport::from_rows(rows);
            let out = ctx.out()?.to_path_buf();
            write(&out, report.to_csv())?;
            let json = sibling(&out, "json");
            write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
            print!("{}", report.to_csv());
            let mut outputs = vec![out, json];
            if let Some(plot) = plot_data {
                write(&plot, report.plot_csv())?;
                outputs.push(plot);
            }
            let inputs = paths.iter().map(|p| hash(p)).collect::<Result<_>>()?;
            ctx.record("report", inputs, &outputs, None)
        }
        Command::Play { agent, mode, max_steps } => {
            let dir = ctx.out()?.to_path_buf();
            let (mut policy, inputs) = agent.load()?;
            let level = generate_level(&ctx.cfg.distribution(mode), ctx.cfg.seed)?;
            let rng_seed = pipeline::eval_rng_seed(&ctx.cfg);
            let tr = simulate_episode(policy.as_mut(), &level, max_steps, rng_seed);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut outputs = Vec::new();
            let mut log = String::from("t,action,agent_x,agent_y\n");
            for (t, r) in tr.records.iter().enumerate() {
                let path = dir.join(format!("frame_{t:04}.pgm"));
                write(&path, frame_pgm(&r.frame, r.action))?;
                outputs.push(path);
                log.push_str(&format!("{t},{:?},{},{}\n", r.action, r.agent.x, r.agent.y));
            }
            let log_path = dir.join("actions.csv");
            write(&log_path, log)?;
            outputs.push(log_path);
            println!("{} steps, ended by {:?}", tr.len(), tr.cause());
            ctx.record("play", inputs, &outputs, None)
        }
        Command::Detect { agent } => {
            let out = ctx.out()?.to_path_buf();
            let (mut policy, inputs) = agent.load()?;
            let verdict = pipeline::detect(&ctx.cfg, policy.as_mut())?;
            write(&out, serde_json::to_string_pretty(&verdict)? + "\n")?;
            println!(
                "{}: misgeneralised = {} (train R {:.3} R' {:.3}; test R {:.3} R' {:.3})",
                verdict.policy,
                verdict.verdict,
                verdict.train.r_true,
                verdict.train.r_proxy,
                verdict.test.r_true,
                verdict.test.r_proxy
            );
            ctx.record("detect", inputs, &[out], None)
        }
    }
}

fn checkpoint_payload(manifest: &Path) -> PathBuf {
    coinlab::checkpoint::payload_path(manifest)
}

fn report_log(log: &TrainingLog) {
    if let Some(last) = log.rows.last() {
        println!(
            "iterations {}, env steps {}, mean episode reward {:.4}",
            last.iteration, last.env_steps, last.mean_episode_reward
        );
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
